//! Training loop: one scene per step, AdamW under a one-cycle schedule, and
//! per-step foreground/background keep ratios.

mod config;
mod optim;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

pub use config::TrainConfig;
pub use optim::{clip_global_norm, AdamW, OneCycle, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::edf::{
    flop_count, infer_forward, train_forward_graph, write_flop_csv, EdfGraph, PassOptions,
};
use crate::error::{Error, Result};
use crate::halting::HaltRecord;
use crate::losses::{
    box_targets, detect_head, loss_box, loss_heatmap, loss_sparsity, total_loss, LossBreakdown,
    BOX_CHANNELS,
};
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::rng;
use crate::scene::{
    assign_regions, build_heatmap, classify_tokens_fg_bg, generate_scene, voxelize, Heatmap, Scene,
    TokenSet,
};
use crate::tensor::{Graph, Var};

/// A scene with everything the losses need.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub tokens: TokenSet,
    pub heat: Heatmap,
    pub token_heat: Vec<f64>,
    pub targets: Vec<(usize, [f64; BOX_CHANNELS])>,
    pub foreground: Vec<bool>,
}

impl Sample {
    pub fn new(scene: Scene, config: &ModelConfig, heatmap_sigma: f64) -> Result<Self> {
        let mut tokens = voxelize(&scene, &config.grid)?;
        if tokens.region_size != config.region_size {
            assign_regions(&mut tokens, config.region_size);
        }
        let heat = build_heatmap(&scene.boxes, &config.grid, heatmap_sigma);
        let token_heat = heat.for_tokens(&tokens);
        let targets = box_targets(&scene.boxes, &config.grid, &heat);
        let foreground = classify_tokens_fg_bg(&tokens, &scene.boxes);
        Ok(Self {
            scene,
            tokens,
            heat,
            token_heat,
            targets,
            foreground,
        })
    }
}

/// Scene `index` of the sub-stream `stream` (`scenes`, `heldout`, `eval`).
pub fn scene_for(cfg: &TrainConfig, stream: &str, index: u64) -> Scene {
    let seed = rng::indexed(cfg.seed, stream, index).random::<u64>();
    generate_scene(
        seed,
        cfg.objects_per_scene,
        cfg.clusters_per_scene,
        cfg.model.grid.extent_m,
    )
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Random mirror about either axis followed by a rotation by a multiple of
/// 90° about the scene center. Keeps every point inside the extent.
pub fn augment_scene(scene: &Scene, rng: &mut rng::Rng) -> Scene {
    let e = scene.extent_m;
    let flip_x = rng.random_bool(0.5);
    let flip_y = rng.random_bool(0.5);
    let quarter_turns = rng.random_range(0..4u32);
    let map = |mut x: f64, mut y: f64, mut a: f64| {
        if flip_x {
            x = e - x;
            a = PI - a;
        }
        if flip_y {
            y = e - y;
            a = -a;
        }
        for _ in 0..quarter_turns {
            (x, y) = (e - y, x);
            a += 0.5 * PI;
        }
        (x, y, wrap_angle(a))
    };
    let mut out = scene.clone();
    for p in &mut out.points {
        let (x, y, _) = map(p.x, p.y, 0.0);
        p.x = x;
        p.y = y;
    }
    for b in &mut out.boxes {
        let (x, y, a) = map(b.lx, b.ly, b.alpha);
        b.lx = x;
        b.ly = y;
        b.alpha = a;
    }
    out
}

/// Forward pass, head and all three losses on `sample`.
pub fn scene_loss(
    g: &mut Graph,
    b: &Bound,
    model: &Model,
    sample: &Sample,
    cfg: &TrainConfig,
    opts: &PassOptions,
) -> Result<(Var, LossBreakdown, EdfGraph)> {
    let edf = train_forward_graph(g, b, model, &sample.tokens, opts)?;
    let head = detect_head(g, edf.bev, &model.head, b)?;
    let lh = loss_heatmap(g, head.center_logits, &sample.heat)?;
    let lb = loss_box(g, head.box_params, &sample.targets)?;
    let ls = loss_sparsity(
        g,
        &edf.scores,
        &edf.trace.records,
        &sample.token_heat,
        cfg.sparsity,
    )?;
    let (total, breakdown) = total_loss(g, lb, lh, ls, cfg.loss_weights)?;
    Ok((total, breakdown, edf))
}

/// Keep ratios after one halting module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeepRatios {
    /// Foreground tokens still active after the module.
    pub fg_keep: f64,
    pub bg_keep: f64,
    /// Halted fraction among tokens active before the module.
    pub sparsity: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn keep_ratios(records: &[HaltRecord], foreground: &[bool]) -> Vec<KeepRatios> {
    let n_fg = foreground.iter().filter(|&&f| f).count();
    let n_bg = foreground.len() - n_fg;
    records
        .iter()
        .map(|r| {
            let kept_fg = r
                .cumulative
                .iter()
                .zip(foreground)
                .filter(|(&c, &f)| c && f)
                .count();
            let kept_bg = r
                .cumulative
                .iter()
                .zip(foreground)
                .filter(|(&c, &f)| c && !f)
                .count();
            KeepRatios {
                fg_keep: ratio(kept_fg, n_fg),
                bg_keep: ratio(kept_bg, n_bg),
                sparsity: r.sparsity(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityRow {
    pub step: usize,
    /// 1-based halting module.
    pub layer: usize,
    pub ratios: KeepRatios,
}

impl SparsityRow {
    pub const CSV_HEADER: &'static str = "step,layer,fg_keep,bg_keep,sparsity";

    pub fn csv_row(&self) -> String {
        let r = &self.ratios;
        format!(
            "{},{},{},{},{}",
            self.step, self.layer, r.fg_keep, r.bg_keep, r.sparsity
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub metrics: Vec<LossBreakdown>,
    pub sparsity: Vec<SparsityRow>,
    pub steps_per_epoch: usize,
}

impl TrainReport {
    fn final_epoch(&self) -> std::ops::Range<usize> {
        let n = self.metrics.len();
        n.saturating_sub(self.steps_per_epoch)..n
    }

    /// Mean total loss over the last epoch.
    pub fn final_loss(&self) -> f64 {
        let r = self.final_epoch();
        let k = r.len().max(1) as f64;
        self.metrics[r].iter().map(|m| m.total).sum::<f64>() / k
    }

    /// Mean total loss over the first epoch.
    pub fn first_loss(&self) -> f64 {
        let k = self.steps_per_epoch.min(self.metrics.len());
        self.metrics[..k].iter().map(|m| m.total).sum::<f64>() / k.max(1) as f64
    }

    /// Mean `(fg_keep, bg_keep)` after halting module `layer` (1-based) over
    /// the last epoch.
    pub fn final_keep(&self, layer: usize) -> (f64, f64) {
        let r = self.final_epoch();
        let rows: Vec<&SparsityRow> = self
            .sparsity
            .iter()
            .filter(|s| s.layer == layer && r.contains(&s.step))
            .collect();
        let k = rows.len().max(1) as f64;
        (
            rows.iter().map(|s| s.ratios.fg_keep).sum::<f64>() / k,
            rows.iter().map(|s| s.ratios.bg_keep).sum::<f64>() / k,
        )
    }

    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", LossBreakdown::CSV_HEADER)?;
        for (step, m) in self.metrics.iter().enumerate() {
            writeln!(w, "{}", m.csv_row(step))?;
        }
        Ok(())
    }

    pub fn write_sparsity_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", SparsityRow::CSV_HEADER)?;
        for r in &self.sparsity {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Stores the halting switches a checkpoint was trained with.
fn write_pass_meta(model: &mut Model, opts: &PassOptions) {
    let p = &mut model.params;
    p.set_meta("halt_u", opts.halt.u);
    let bounds: Vec<String> = opts
        .halt
        .bounds
        .iter()
        .map(|(lo, hi)| format!("{lo}:{hi}"))
        .collect();
    p.set_meta("halt_bounds", bounds.join(","));
    p.set_meta("halting", opts.halting);
    p.set_meta("recycle", opts.recycle);
}

/// Pass options recorded in a checkpoint, or the defaults when absent.
pub fn stored_pass_options(model: &Model) -> Result<PassOptions> {
    let p = &model.params;
    let bad = |k: &str| Error::Checkpoint(format!("bad meta `{k}`"));
    let mut opts = PassOptions::default();
    if let Some(u) = p.meta("halt_u") {
        opts.halt.u = u.parse().map_err(|_| bad("halt_u"))?;
    }
    if let Some(raw) = p.meta("halt_bounds") {
        opts.halt.bounds = raw
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|pair| {
                let (lo, hi) = pair.split_once(':').ok_or_else(|| bad("halt_bounds"))?;
                Ok((
                    lo.parse().map_err(|_| bad("halt_bounds"))?,
                    hi.parse().map_err(|_| bad("halt_bounds"))?,
                ))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(v) = p.meta("halting") {
        opts.halting = v.parse().map_err(|_| bad("halting"))?;
    }
    if let Some(v) = p.meta("recycle") {
        opts.recycle = v.parse().map_err(|_| bad("recycle"))?;
    }
    opts.halt.validate(model.n_halt_modules())?;
    Ok(opts)
}

/// Trains from a fresh initialization drawn from `cfg.seed`.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    train_from(cfg, model)
}

/// Trains `model` (which must match `cfg.model`) with a fresh optimizer and
/// schedule.
pub fn train_from(cfg: &TrainConfig, mut model: Model) -> Result<TrainReport> {
    cfg.validate()?;
    if model.config != cfg.model {
        return Err(Error::Invalid(
            "model architecture differs from the training config".into(),
        ));
    }
    let opts = cfg.pass_options();
    let samples = (0..cfg.scenes_per_epoch as u64)
        .map(|i| Sample::new(scene_for(cfg, "scenes", i), &cfg.model, cfg.heatmap_sigma))
        .collect::<Result<Vec<_>>>()?;
    let total = cfg.total_steps();
    let schedule = OneCycle::new(
        cfg.lr_start,
        cfg.lr_peak,
        cfg.lr_floor,
        cfg.warmup_fraction,
        total,
    );
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut aug = rng::stream(cfg.seed, "augment");
    let mut metrics = Vec::with_capacity(total);
    let mut sparsity = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::indexed(cfg.seed, "order", epoch as u64));
        for &i in &order {
            let augmented;
            let sample = if cfg.augment {
                augmented = Sample::new(
                    augment_scene(&samples[i].scene, &mut aug),
                    &cfg.model,
                    cfg.heatmap_sigma,
                )?;
                &augmented
            } else {
                &samples[i]
            };
            let mut g = Graph::new();
            let b = model.params.bind(&mut g);
            let (loss, breakdown, edf) = scene_loss(&mut g, &b, &model, sample, cfg, &opts)?;
            if !breakdown.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    l_box: breakdown.l_box,
                    l_heat: breakdown.l_heat,
                    l_sparse: breakdown.l_sparse,
                });
            }
            g.backward(loss)?;
            let mut grads = model.params.grads(&g, &b);
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            opt.step(&mut model.params, &grads, schedule.lr(step));

            metrics.push(breakdown);
            for (m, ratios) in keep_ratios(&edf.trace.records, &sample.foreground)
                .into_iter()
                .enumerate()
            {
                sparsity.push(SparsityRow {
                    step,
                    layer: m + 1,
                    ratios,
                });
            }
            step += 1;
        }
    }
    write_pass_meta(&mut model, &opts);
    Ok(TrainReport {
        model,
        metrics,
        sparsity,
        steps_per_epoch: cfg.scenes_per_epoch,
    })
}

/// Writes `checkpoint.bin`, `metrics.csv`, `sparsity.csv` and `flops.csv`
/// (sparse pass on the first `eval` scene) into `dir`.
pub fn write_artifacts(report: &TrainReport, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.model.save(&dir.join("checkpoint.bin"))?;
    let csv = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    };
    csv("metrics.csv", &|w| report.write_metrics_csv(w))?;
    csv("sparsity.csv", &|w| report.write_sparsity_csv(w))?;
    let eval = Sample::new(scene_for(cfg, "eval", 0), &cfg.model, cfg.heatmap_sigma)?;
    let (_, trace) = infer_forward(&report.model, &eval.tokens, &cfg.pass_options())?;
    let flops = flop_count(&trace, &report.model.config);
    csv("flops.csv", &|w| write_flop_csv(w, &flops, true))
}

/// Averages over held-out scenes without updating weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Mean halted fraction per module.
    pub sparsity: Vec<f64>,
    pub fg_keep: Vec<f64>,
    pub bg_keep: Vec<f64>,
    /// Summed over scenes.
    pub dense_flops: u64,
    pub observed_flops: u64,
    pub speedup: f64,
}

pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    opts: &PassOptions,
) -> Result<Evaluation> {
    let modules = model.n_halt_modules();
    let mut loss = 0.0;
    let mut sums = vec![
        KeepRatios {
            fg_keep: 0.0,
            bg_keep: 0.0,
            sparsity: 0.0
        };
        modules
    ];
    let (mut dense, mut observed) = (0u64, 0u64);
    for s in samples {
        let mut g = Graph::new();
        let b = model.params.bind_constant(&mut g);
        let (_, breakdown, edf) = scene_loss(&mut g, &b, model, s, cfg, opts)?;
        loss += breakdown.total;
        for (acc, r) in sums
            .iter_mut()
            .zip(keep_ratios(&edf.trace.records, &s.foreground))
        {
            acc.fg_keep += r.fg_keep;
            acc.bg_keep += r.bg_keep;
            acc.sparsity += r.sparsity;
        }
        let report = flop_count(&edf.trace, &model.config);
        dense += report.dense;
        observed += report.observed;
    }
    let k = samples.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / k,
        sparsity: sums.iter().map(|r| r.sparsity / k).collect(),
        fg_keep: sums.iter().map(|r| r.fg_keep / k).collect(),
        bg_keep: sums.iter().map(|r| r.bg_keep / k).collect(),
        dense_flops: dense,
        observed_flops: observed,
        speedup: if dense == observed || observed == 0 {
            1.0
        } else {
            dense as f64 / observed as f64
        },
    })
}
