//! `tokenhalt`: training, equivalence checks, the pseudo-gradient
//! experiment, threshold sweeps and halting dumps.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokenhalt::edf::{
    check_equivalence, infer_forward, pseudo_grad_experiment, summarize_pseudo_grad,
    write_pseudo_grad_csv, LossKind, PseudoGradConfig,
};
use tokenhalt::losses::SparsityKind;
use tokenhalt::model::Model;
use tokenhalt::scene::{assign_regions, read_scene_file, voxelize};
use tokenhalt::sweep::{run_sweep, write_sweep_csv, SweepConfig, SWEEP_BOUNDS, SWEEP_U_GRID};
use tokenhalt::trainer::{scene_for, stored_pass_options, train, write_artifacts, TrainConfig};
use tokenhalt::Error;

const EQUIV_TOL: f64 = 1e-9;
const SLOPE_MIN: f64 = 0.8;
const ZERO_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Parser, Debug)]
#[command(
    name = "tokenhalt",
    version,
    about = "Dynamic token halting over voxelized scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Root seed; overrides the config file
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train and write checkpoint.bin, metrics.csv, sparsity.csv, flops.csv
    Train {
        #[command(flatten)]
        common: Common,
        /// Replace the heatmap-driven sparsity loss with the mean score
        #[arg(long)]
        uniform_sparsity: bool,
        /// Drop halted tokens instead of recycling them into the BEV map
        #[arg(long)]
        no_recycle: bool,
        /// Random flips and quarter turns of each training scene
        #[arg(long)]
        augment: bool,
    },
    /// Compare the training and sparse passes on random scenes
    Equiv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        scenes: usize,
    },
    /// Straight-through gradient versus brute-force mask flips
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.04, 0.02, 0.01, 0.005])]
        u_list: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        seeds: usize,
        /// Zero W_V and the MLP output so the residual term vanishes
        #[arg(long)]
        zero_residual: bool,
        /// Use the squared-error loss instead of the linear one
        #[arg(long)]
        squared_loss: bool,
    },
    /// Fine-tune and evaluate at each threshold; rows sorted by speedup
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Thresholds; `off` disables halting
        #[arg(long, value_delimiter = ',')]
        u_grid: Option<Vec<String>>,
        #[arg(long, default_value_t = SWEEP_BOUNDS.0)]
        alpha_lo: f64,
        #[arg(long, default_value_t = SWEEP_BOUNDS.1)]
        alpha_hi: f64,
        #[arg(long, default_value_t = 50)]
        finetune_steps: usize,
        #[arg(long, default_value_t = 20)]
        heldout: usize,
    },
    /// Dump `cell_x cell_y halt_layer score_1 score_2` for one scene
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Threshold override
        #[arg(long)]
        u: Option<f64>,
        /// Quantile bounds override, applied to every module
        #[arg(long, requires = "alpha_hi")]
        alpha_lo: Option<f64>,
        #[arg(long, requires = "alpha_lo")]
        alpha_hi: Option<f64>,
    },
}

/// Errors carrying their exit code.
enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } | Error::HaltMismatch { .. } => {
                Failure::Check(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CmdResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    }
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Failure::Usage(e.to_string()))?;
    fs::write(path, buf).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_train(common: &Common, uniform: bool, no_recycle: bool, augment: bool) -> CmdResult {
    let mut cfg = load_config(common)?;
    if uniform {
        cfg.sparsity = SparsityKind::Uniform;
    }
    if no_recycle {
        cfg.recycle = false;
    }
    if augment {
        cfg.augment = true;
    }
    cfg.validate()?;
    let report = train(&cfg)?;
    write_artifacts(&report, &cfg, &common.out)?;
    let (fg, bg) = report.final_keep(1);
    println!(
        "trained {} steps: final loss {}, fg_keep {fg}, bg_keep {bg}",
        report.metrics.len(),
        report.final_loss()
    );
    Ok(())
}

fn cmd_equiv(common: &Common, checkpoint: &Path, scenes: usize) -> CmdResult {
    let cfg = load_config(common)?;
    let model = Model::load(checkpoint)?;
    let opts = stored_pass_options(&model)?;
    let mut worst = 0.0f64;
    for i in 0..scenes as u64 {
        let mut tokens = voxelize(&scene_for(&cfg, "equiv", i), &model.config.grid)?;
        assign_regions(&mut tokens, model.config.region_size);
        let diff = match check_equivalence(&model, &tokens, &opts) {
            Ok(d) => d,
            Err(e @ Error::HaltMismatch { .. }) => {
                return Err(Failure::Check(format!(
                    "scene {i} (seed {}): {e}",
                    cfg.seed
                )));
            }
            Err(e) => return Err(e.into()),
        };
        if !(diff < EQUIV_TOL) {
            return Err(Failure::Check(format!(
                "scene {i} (seed {}): max |train - infer| = {diff} exceeds {EQUIV_TOL}",
                cfg.seed
            )));
        }
        worst = worst.max(diff);
    }
    println!("max_abs_diff {worst} over {scenes} scenes");
    Ok(())
}

fn cmd_gradcheck(
    common: &Common,
    u_list: &[f64],
    seeds: usize,
    zero_residual: bool,
    squared: bool,
) -> CmdResult {
    let mut distinct = u_list.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 && !zero_residual {
        return Err(Failure::Usage(
            "--u-list needs at least two distinct values: the log-log slope is undefined otherwise"
                .into(),
        ));
    }
    let cfg = PseudoGradConfig {
        u_list: u_list.to_vec(),
        seeds,
        seed: common.seed.unwrap_or(0),
        zero_residual,
        loss: if squared {
            LossKind::Squared
        } else {
            LossKind::Linear
        },
        ..PseudoGradConfig::default()
    };
    let rows = pseudo_grad_experiment(&cfg)?;
    write_file(&common.out.join("gradcheck.csv"), |w| {
        write_pseudo_grad_csv(w, &rows)
    })?;
    if zero_residual {
        let worst = rows.iter().map(|r| r.abs_err).fold(0.0, f64::max);
        println!("max abs_err {worst} over {} rows", rows.len());
        return if worst < ZERO_RESIDUAL_TOL {
            Ok(())
        } else {
            Err(Failure::Check(format!(
                "abs_err {worst} is not below {ZERO_RESIDUAL_TOL}"
            )))
        };
    }
    let summary = summarize_pseudo_grad(&rows, u_list)?;
    for (u, m) in &summary.medians {
        println!("u {u} median abs_err {m}");
    }
    println!("slope {}", summary.slope);
    let by_u = |target: f64| {
        summary
            .medians
            .iter()
            .find(|(u, _)| *u == target)
            .map(|p| p.1)
    };
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let shrinks = matches!((by_u(lo), by_u(hi)), (Some(a), Some(b)) if a < b);
    if summary.slope >= SLOPE_MIN && shrinks {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "slope {} (need >= {SLOPE_MIN}), error at u={lo} below u={hi}: {shrinks}",
            summary.slope
        )))
    }
}

fn parse_u(s: &str) -> Result<Option<f64>, Failure> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Failure::Usage(format!("--u-grid: `{s}` is neither a number nor `off`")))
}

fn cmd_sweep(
    common: &Common,
    u_grid: Option<&[String]>,
    bounds: (f64, f64),
    finetune_steps: usize,
    heldout: usize,
) -> CmdResult {
    let cfg = load_config(common)?;
    let grid: Vec<Option<f64>> = match u_grid {
        Some(list) => list.iter().map(|s| parse_u(s)).collect::<Result<_, _>>()?,
        None => SWEEP_U_GRID.iter().map(|&u| Some(u)).collect(),
    };
    let sweep = SweepConfig {
        finetune_steps,
        heldout_scenes: heldout,
        ..SweepConfig::new(cfg, &grid, bounds)
    };
    let rows = run_sweep(&sweep)?;
    write_file(&common.out.join("sweep.csv"), |w| write_sweep_csv(w, &rows))?;
    write_sweep_csv(std::io::stdout().lock(), &rows).map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_viz(
    common: &Common,
    checkpoint: &Path,
    scene: &Path,
    u: Option<f64>,
    bounds: Option<(f64, f64)>,
) -> CmdResult {
    let model = Model::load(checkpoint)?;
    let mut opts = stored_pass_options(&model)?;
    if common.config.is_some() {
        let cfg = load_config(common)?;
        opts.halt = cfg.halt;
        opts.halting = cfg.halting;
    }
    if let Some(u) = u {
        opts.halt.u = u;
    }
    if let Some(b) = bounds {
        opts.halt.bounds = vec![b; model.n_halt_modules()];
    }
    opts.halt.validate(model.n_halt_modules())?;
    let scene = read_scene_file(scene)?;
    let mut tokens = voxelize(&scene, &model.config.grid)?;
    assign_regions(&mut tokens, model.config.region_size);
    let (_, trace) = infer_forward(&model, &tokens, &opts)?;
    let modules = model.n_halt_modules();
    write_file(&common.out.join("viz.txt"), |w| {
        let mut head = vec!["cell_x".to_string(), "cell_y".into(), "halt_layer".into()];
        head.extend((1..=modules).map(|m| format!("score_{m}")));
        writeln!(w, "{}", head.join(" "))?;
        for (i, c) in tokens.grid_coords.iter().enumerate() {
            let halted = trace
                .records
                .iter()
                .position(|r| r.active[i] && !r.cumulative[i])
                .map_or(0, |m| m + 1);
            let mut row = vec![c[0].to_string(), c[1].to_string(), halted.to_string()];
            row.extend(trace.records.iter().map(|r| r.scores[i].to_string()));
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    })?;
    println!(
        "{} tokens written to {}",
        tokens.len(),
        common.out.join("viz.txt").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train {
            common,
            uniform_sparsity,
            no_recycle,
            augment,
        } => cmd_train(common, *uniform_sparsity, *no_recycle, *augment),
        Cmd::Equiv {
            common,
            checkpoint,
            scenes,
        } => cmd_equiv(common, checkpoint, *scenes),
        Cmd::Gradcheck {
            common,
            u_list,
            seeds,
            zero_residual,
            squared_loss,
        } => cmd_gradcheck(common, u_list, *seeds, *zero_residual, *squared_loss),
        Cmd::Sweep {
            common,
            u_grid,
            alpha_lo,
            alpha_hi,
            finetune_steps,
            heldout,
        } => cmd_sweep(
            common,
            u_grid.as_deref(),
            (*alpha_lo, *alpha_hi),
            *finetune_steps,
            *heldout,
        ),
        Cmd::Viz {
            common,
            checkpoint,
            scene,
            u,
            alpha_lo,
            alpha_hi,
        } => cmd_viz(common, checkpoint, scene, *u, alpha_lo.zip(*alpha_hi)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
