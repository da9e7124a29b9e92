//! Sparsity/speedup sweep: one shared base run, a short fine-tune per grid
//! point, and evaluation on held-out scenes.

use std::io::Write;

use crate::edf::PassOptions;
use crate::error::{Error, Result};
use crate::halting::HaltConfig;
use crate::trainer::{evaluate, scene_for, train, train_from, Sample, TrainConfig};

/// One operating point. `u = None` disables halting.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub u: Option<f64>,
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub points: Vec<SweepPoint>,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub heldout_scenes: usize,
}

/// Bounds loose enough that `u` decides the sparsity.
pub const SWEEP_BOUNDS: (f64, f64) = (0.0, 0.95);
pub const SWEEP_U_GRID: [f64; 4] = [0.02, 0.05, 0.1, 0.2];

impl SweepConfig {
    /// `u_grid` entries of `None` disable halting. Every point uses
    /// `bounds` for each module.
    pub fn new(train: TrainConfig, u_grid: &[Option<f64>], bounds: (f64, f64)) -> Self {
        let modules = train.model.halt_layers.len();
        Self {
            points: u_grid
                .iter()
                .map(|&u| SweepPoint {
                    u,
                    bounds: vec![bounds; modules],
                })
                .collect(),
            train,
            finetune_steps: 50,
            finetune_lr: 5e-4,
            heldout_scenes: 20,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        let grid: Vec<Option<f64>> = SWEEP_U_GRID.iter().map(|&u| Some(u)).collect();
        Self::new(TrainConfig::default(), &grid, SWEEP_BOUNDS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub sparsity: Vec<f64>,
    pub dense_flops: u64,
    pub observed_flops: u64,
    pub speedup: f64,
    /// Mean held-out total loss.
    pub loss: f64,
    pub fg_keep: Vec<f64>,
    pub bg_keep: Vec<f64>,
}

fn point_options(p: &SweepPoint) -> PassOptions {
    match p.u {
        Some(u) => PassOptions::with_halt(HaltConfig {
            u,
            bounds: p.bounds.clone(),
        }),
        None => PassOptions {
            halt: HaltConfig {
                bounds: p.bounds.clone(),
                ..HaltConfig::default()
            },
            ..PassOptions::no_halting()
        },
    }
}

/// Rows sorted by speedup (stable, so ties keep grid order).
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.points.is_empty() {
        return Err(Error::Invalid("sweep grid is empty".into()));
    }
    let modules = cfg.train.model.halt_layers.len();
    for p in &cfg.points {
        let opts = point_options(p);
        opts.halt.validate(modules)?;
    }
    let base = train(&cfg.train)?.model;
    let held = (0..cfg.heldout_scenes as u64)
        .map(|i| {
            Sample::new(
                scene_for(&cfg.train, "heldout", i),
                &cfg.train.model,
                cfg.train.heatmap_sigma,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(cfg.points.len());
    for p in &cfg.points {
        let opts = point_options(p);
        let model = if cfg.finetune_steps == 0 {
            base.clone()
        } else {
            let ft = TrainConfig {
                epochs: 1,
                scenes_per_epoch: cfg.finetune_steps,
                lr_start: cfg.finetune_lr / 25.0,
                lr_peak: cfg.finetune_lr,
                lr_floor: cfg.train.lr_floor.min(cfg.finetune_lr),
                halt: opts.halt.clone(),
                halting: opts.halting,
                ..cfg.train.clone()
            };
            train_from(&ft, base.clone())?.model
        };
        let e = evaluate(&model, &held, &cfg.train, &opts)?;
        rows.push(SweepRow {
            point: p.clone(),
            sparsity: e.sparsity,
            dense_flops: e.dense_flops,
            observed_flops: e.observed_flops,
            speedup: e.speedup,
            loss: e.loss,
            fg_keep: e.fg_keep,
            bg_keep: e.bg_keep,
        });
    }
    rows.sort_by(|a, b| a.speedup.total_cmp(&b.speedup));
    Ok(rows)
}

/// Header `u,alpha_lo_1,alpha_hi_1,...,sparsity_1,...,dense_flops,
/// observed_flops,speedup,loss,fg_keep_1,bg_keep_1,...`. Disabled points
/// print `off` for `u`.
pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    let modules = rows.first().map_or(0, |r| r.sparsity.len());
    let mut head = vec!["u".to_string()];
    for m in 1..=modules {
        head.push(format!("alpha_lo_{m}"));
        head.push(format!("alpha_hi_{m}"));
    }
    head.extend((1..=modules).map(|m| format!("sparsity_{m}")));
    head.extend(["dense_flops", "observed_flops", "speedup", "loss"].map(String::from));
    for m in 1..=modules {
        head.push(format!("fg_keep_{m}"));
        head.push(format!("bg_keep_{m}"));
    }
    writeln!(w, "{}", head.join(","))?;
    for r in rows {
        let mut cols = vec![r.point.u.map_or("off".to_string(), |u| u.to_string())];
        for (lo, hi) in &r.point.bounds {
            cols.push(lo.to_string());
            cols.push(hi.to_string());
        }
        cols.extend(r.sparsity.iter().map(f64::to_string));
        cols.push(r.dense_flops.to_string());
        cols.push(r.observed_flops.to_string());
        cols.push(r.speedup.to_string());
        cols.push(r.loss.to_string());
        for (f, b) in r.fg_keep.iter().zip(&r.bg_keep) {
            cols.push(f.to_string());
            cols.push(b.to_string());
        }
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}
