//! Acceptance suite: evaluates every criterion at its stated tolerance and
//! prints one PASS/FAIL line each. Exits non-zero only when a criterion could
//! not be evaluated; a FAIL is a measured outcome and is reported, not hidden.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::{layer_case, layer_tensors, layer_vars, LayerCase};
use tokenhalt::backbone::{layer_forward, wsa, LayerSpec, RegionView};
use tokenhalt::diagnostics::model_gradcheck;
use tokenhalt::edf::{
    check_equivalence, flop_count, infer_forward, pseudo_grad_experiment, summarize_pseudo_grad,
    train_forward, LayerTrace, PassMode, PassOptions, PassTrace, PseudoGradConfig,
};
use tokenhalt::halting::{threshold, HaltConfig};
use tokenhalt::losses::SparsityKind;
use tokenhalt::model::{Model, ModelConfig};
use tokenhalt::rng::{self, Rng};
use tokenhalt::scene::{assign_regions, generate_scene, voxelize, GridSpec, TokenSet};
use tokenhalt::tensor::{grad_check, randn, uniform, Graph, Tensor, Var};
use tokenhalt::trainer::{scene_for, train, TrainConfig};

/// `Ok((passed, detail))`, or `Err` when the criterion could not be run.
type Verdict = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tokens_for(scene: &tokenhalt::scene::Scene, cfg: &ModelConfig) -> Result<TokenSet, String> {
    let mut t = voxelize(scene, &cfg.grid).map_err(err)?;
    assign_regions(&mut t, cfg.region_size);
    Ok(t)
}

// ---- C1 -------------------------------------------------------------------

fn c1_equivalence() -> Verdict {
    let cfg = ModelConfig::default();
    let tc = TrainConfig::default();
    let options = [
        PassOptions::default(),
        PassOptions::with_halt(HaltConfig::unclamped(0.5, 2)),
        PassOptions {
            recycle: false,
            ..PassOptions::default()
        },
    ];
    let scenes = (0..50)
        .map(|i| tokens_for(&scene_for(&tc, "equiv", i), &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut worst = 0.0f64;
    for init in 0..10u64 {
        let model = Model::new(cfg.clone(), 100 + init).map_err(err)?;
        let opts = &options[init as usize % options.len()];
        for t in &scenes {
            worst = worst.max(check_equivalence(&model, t, opts).map_err(err)?);
        }
    }
    Ok((
        worst < 1e-9,
        format!("max |train - infer| = {worst:e} over 50 scenes x 10 inits"),
    ))
}

// ---- C2 -------------------------------------------------------------------

fn c2_pseudo_gradient() -> Verdict {
    let zero = pseudo_grad_experiment(&PseudoGradConfig {
        zero_residual: true,
        ..PseudoGradConfig::default()
    })
    .map_err(err)?;
    let mut errs: Vec<f64> = zero.iter().map(|r| r.abs_err).collect();
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];
    let cfg = PseudoGradConfig::default();
    let rows = pseudo_grad_experiment(&cfg).map_err(err)?;
    let summary = summarize_pseudo_grad(&rows, &cfg.u_list).map_err(err)?;
    let at = |u: f64| summary.medians.iter().find(|m| m.0 == u).map(|m| m.1);
    let (lo, hi) = (at(0.005).ok_or("no u=0.005")?, at(0.04).ok_or("no u=0.04")?);
    let pass = median < 1e-8 && summary.slope >= 0.8 && lo < hi;
    Ok((
        pass,
        format!(
            "zero-residual median {median:e}; slope {:.3}; median at 0.005 {lo:e} vs 0.04 {hi:e}",
            summary.slope
        ),
    ))
}

// ---- C3 -------------------------------------------------------------------

type Inputs = fn(&mut Rng) -> Vec<Tensor>;
type Op = fn(&mut Graph, &[Var]) -> tokenhalt::Result<Var>;

fn n(shape: &[usize], r: &mut Rng) -> Tensor {
    randn(shape, 1.0, r)
}

fn op_table() -> Vec<(&'static str, Inputs, Op)> {
    vec![
        (
            "matmul",
            |r| vec![n(&[3, 4], r), n(&[4, 2], r)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        (
            "linear",
            |r| vec![n(&[5, 3], r), n(&[3, 4], r), n(&[4], r)],
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        (
            "add",
            |r| vec![n(&[3, 4], r), n(&[3, 4], r)],
            |g, v| g.add(v[0], v[1]),
        ),
        (
            "sub",
            |r| vec![n(&[3, 4], r), n(&[3, 4], r)],
            |g, v| g.sub(v[0], v[1]),
        ),
        (
            "mul",
            |r| vec![n(&[3, 4], r), n(&[3, 4], r)],
            |g, v| g.mul(v[0], v[1]),
        ),
        (
            "maximum",
            |r| vec![n(&[3, 4], r), n(&[3, 4], r)],
            |g, v| g.maximum(v[0], v[1]),
        ),
        (
            "div",
            |r| vec![n(&[3, 4], r), uniform(&[3, 4], 0.5, 2.0, r)],
            |g, v| g.div(v[0], v[1]),
        ),
        (
            "add_row",
            |r| vec![n(&[4, 3], r), n(&[3], r)],
            |g, v| g.add_row(v[0], v[1]),
        ),
        (
            "mul_row",
            |r| vec![n(&[4, 3], r), n(&[3], r)],
            |g, v| g.mul_row(v[0], v[1]),
        ),
        (
            "mul_col",
            |r| vec![n(&[4, 3], r), n(&[4, 1], r)],
            |g, v| g.mul_col(v[0], v[1]),
        ),
        ("scale", |r| vec![n(&[3, 5], r)], |g, v| g.scale(v[0], -1.7)),
        (
            "add_scalar",
            |r| vec![n(&[3, 5], r)],
            |g, v| g.add_scalar(v[0], 0.3),
        ),
        (
            "one_minus",
            |r| vec![n(&[3, 5], r)],
            |g, v| g.one_minus(v[0]),
        ),
        ("exp", |r| vec![n(&[3, 5], r)], |g, v| g.exp(v[0])),
        (
            "log",
            |r| vec![uniform(&[3, 5], 0.2, 3.0, r)],
            |g, v| g.log(v[0]),
        ),
        ("sigmoid", |r| vec![n(&[3, 5], r)], |g, v| g.sigmoid(v[0])),
        ("abs", |r| vec![n(&[3, 5], r)], |g, v| g.abs(v[0])),
        ("relu", |r| vec![n(&[3, 5], r)], |g, v| g.relu(v[0])),
        (
            "clamp",
            |r| vec![n(&[3, 5], r)],
            |g, v| g.clamp(v[0], -0.5, 0.5),
        ),
        ("sum", |r| vec![n(&[4, 3], r)], |g, v| g.sum(v[0])),
        ("mean", |r| vec![n(&[4, 3], r)], |g, v| g.mean(v[0])),
        (
            "sum_axis0",
            |r| vec![n(&[4, 3], r)],
            |g, v| g.sum_axis(v[0], 0),
        ),
        (
            "sum_axis1",
            |r| vec![n(&[4, 3], r)],
            |g, v| g.sum_axis(v[0], 1),
        ),
        (
            "softmax_rows",
            |r| vec![n(&[4, 3], r)],
            |g, v| g.softmax_rows(v[0]),
        ),
        (
            "layer_norm",
            |r| vec![n(&[4, 8], r), uniform(&[8], 0.5, 1.5, r), n(&[8], r)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "concat",
            |r| vec![n(&[2, 3], r), n(&[4, 3], r)],
            |g, v| g.concat(&[v[0], v[1]], 0),
        ),
        (
            "gather_rows",
            |r| vec![n(&[5, 3], r)],
            |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]),
        ),
        (
            "scatter_rows",
            |r| vec![n(&[3, 2], r)],
            |g, v| g.scatter_rows(v[0], &[6, 1, 3], 8),
        ),
        (
            "slice_cols",
            |r| vec![n(&[3, 6], r)],
            |g, v| g.slice_cols(v[0], 1, 4),
        ),
        (
            "reshape",
            |r| vec![n(&[3, 4], r)],
            |g, v| g.reshape(v[0], &[2, 6]),
        ),
        (
            "transpose",
            |r| vec![n(&[3, 4], r)],
            |g, v| g.transpose(v[0]),
        ),
        (
            "conv2d",
            |r| vec![n(&[5, 6, 2], r), n(&[3, 3, 2, 3], r), n(&[3], r)],
            |g, v| g.conv2d(v[0], v[1], v[2], 1),
        ),
        (
            "conv2d_stride2",
            |r| vec![n(&[5, 6, 3], r), n(&[3, 3, 3, 2], r), n(&[2], r)],
            |g, v| g.conv2d(v[0], v[1], v[2], 2),
        ),
        (
            "upsample2x",
            |r| vec![n(&[3, 3, 2], r)],
            |g, v| g.upsample2x(v[0], 5, 5),
        ),
    ]
}

fn c3_gradients() -> Verdict {
    let mut op_worst = (0.0f64, "");
    for (name, inputs, op) in op_table() {
        for seed in 0..100 {
            let mut r = rng::indexed(seed, name, 0);
            let xs = inputs(&mut r);
            let proj = {
                let mut g = Graph::new();
                let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
                let y = op(&mut g, &vars).map_err(err)?;
                randn(
                    g.value(y).shape(),
                    1.0,
                    &mut rng::indexed(seed, "projection", 0),
                )
            };
            let e = grad_check(
                |g, v| {
                    let y = op(g, v)?;
                    let p = g.constant(proj.clone());
                    let yp = g.mul(y, p)?;
                    g.sum(yp)
                },
                &xs,
                1e-6,
            )
            .map_err(err)?;
            if e > op_worst.0 {
                op_worst = (e, name);
            }
        }
    }
    let (mut strict, mut resolved, mut directional, mut within) = (0.0f64, 0.0f64, 0.0f64, true);
    let mut worst_param = String::new();
    for seed in 0..5 {
        let c = model_gradcheck(seed, 1e-6, 4).map_err(err)?;
        if c.report.max_rel_error > strict {
            strict = c.report.max_rel_error;
            worst_param = c.worst_parameter().unwrap_or("").to_string();
        }
        resolved = resolved.max(c.report.max_resolved_rel_error(1e-4));
        directional = directional.max(c.directional);
        within &= c.report.within(1e-4);
    }
    let pass = op_worst.0 < 1e-4 && strict < 1e-4;
    Ok((
        pass,
        format!(
            "ops max {:e} ({}); full model strict max {strict:e} at {worst_param}; \
             resolvable entries {resolved:e}, noise-aware bound holds: {within}, directional {directional:e}",
            op_worst.0, op_worst.1
        ),
    ))
}

// ---- C4 -------------------------------------------------------------------

fn c4_telescoping() -> Verdict {
    let cfg = ModelConfig {
        layers: LayerSpec {
            pe_hidden: 4,
            ..LayerSpec::alternating(4, 2, 8, 16)
        },
        grid: GridSpec::new(8.0, 0.5).map_err(err)?,
        region_size: 4,
        module1_channels: 2,
        head_channels: 4,
        halt_layers: vec![0, 1, 3],
    };
    let mut r = rng::stream(11, "schedules");
    let mut bad = 0usize;
    let mut tokens_seen = 0usize;
    for k in 0..1000u64 {
        let model = Model::new(cfg.clone(), k % 7).map_err(err)?;
        let tokens = tokens_for(&generate_scene(k, 1 + (k % 3) as usize, 2, 8.0), &cfg)?;
        let draw = uniform(&[3, 2], 0.0, 1.0, &mut r);
        let fractions: Vec<f64> = draw
            .data()
            .chunks(2)
            .map(|p| match (p[0] * 4.0) as usize {
                0 => 0.0,
                1 => 1.0,
                _ => p[1],
            })
            .collect();
        let opts = PassOptions::with_halt(HaltConfig::fixed_fractions(&fractions));
        let cells = tokens.cell_indices();
        let runs = if k % 10 == 0 { 2 } else { 1 };
        for run in 0..runs {
            let (bev, trace) = if run == 0 {
                infer_forward(&model, &tokens, &opts).map_err(err)?
            } else {
                train_forward(&model, &tokens, &opts).map_err(err)?
            };
            tokens_seen += cells.len();
            bad += partition_violations(&trace, &bev.provenance, &cells);
        }
    }
    Ok((
        bad == 0,
        format!("{bad} violations over 1000 schedules ({tokens_seen} token checks)"),
    ))
}

/// Tokens whose mask differences do not sum to one, or whose halt layer
/// disagrees with the trace or the BEV provenance.
fn partition_violations(trace: &PassTrace, provenance: &[usize], cells: &[usize]) -> usize {
    let n = trace.n_tokens;
    let layers = trace.layers.len();
    let mut cum = vec![vec![true; n]];
    for l in 0..layers {
        let next = match trace.records.iter().find(|r| r.layer == l) {
            Some(r) => r.cumulative.clone(),
            None => cum[l].clone(),
        };
        cum.push(next);
    }
    cum.push(vec![false; n]);
    (0..n)
        .filter(|&i| {
            let diffs: Vec<i32> = (1..cum.len())
                .map(|l| cum[l - 1][i] as i32 - cum[l][i] as i32)
                .collect();
            let halt = diffs.iter().position(|&d| d == 1).map(|p| p + 1);
            diffs.iter().any(|&d| d < 0)
                || diffs.iter().sum::<i32>() != 1
                || halt != Some(trace.halt_layer[i])
                || halt != Some(provenance[cells[i]])
        })
        .count()
}

// ---- C5 -------------------------------------------------------------------

fn run_layer(
    case: &LayerCase,
    f: &Tensor,
    view: &RegionView,
    scores: Option<&Tensor>,
) -> Result<Tensor, String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = layer_tensors(&case.store, &case.weights)
        .into_iter()
        .map(|t| g.constant(t))
        .collect();
    let lv = layer_vars(&vars);
    let f = g.constant(f.clone());
    let out = match scores {
        Some(s) => {
            let s = g.constant(s.clone());
            wsa(&mut g, f, s, &lv, view, case.spec.heads)
        }
        None => layer_forward(&mut g, f, None, &lv, view, case.spec.heads),
    }
    .map_err(err)?;
    Ok(g.value(out).clone())
}

fn c5_wsa() -> Verdict {
    let spec = LayerSpec::alternating(1, 4, 16, 32);
    let (mut uni, mut del, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let case = layer_case(seed, spec.clone(), 3, 6);
        let n = case.f.shape()[0];
        let view = RegionView::all(&case.field);
        let c = 0.5 + 1.5 * (seed as f64 / 99.0);
        let plain = run_layer(&case, &case.f, &view, None)?;
        let flat = run_layer(&case, &case.f, &view, Some(&Tensor::full(&[n, 1], c)))?;
        uni = uni.max(plain.max_abs_diff(&flat));

        let mut r = rng::indexed(seed, "acceptance_scores", 0);
        let mut s = uniform(&[n, 1], 0.1, 1.0, &mut r);
        let a = run_layer(&case, &case.f, &view, Some(&s))?;
        let b = run_layer(&case, &case.f, &view, Some(&s.map(|v| v * c)))?;
        scale = scale.max(a.max_abs_diff(&b));

        let mut seen = std::collections::BTreeSet::new();
        let kept: Vec<usize> = (0..n)
            .filter(|&i| {
                let keep = seen.insert(case.field.ids[i]) || i % 3 != 0;
                if !keep {
                    s.data_mut()[i] = 0.0;
                }
                keep
            })
            .collect();
        let full = run_layer(&case, &case.f, &view, Some(&s))?;
        let sub = run_layer(
            &case,
            &case.f.gather_rows(&kept),
            &RegionView::new(&case.field, &kept),
            Some(&s.gather_rows(&kept)),
        )?;
        del = del.max(full.gather_rows(&kept).max_abs_diff(&sub));
    }
    Ok((
        uni < 1e-8 && del < 1e-10 && scale < 1e-8,
        format!("uniform {uni:e}, zero-score deletion {del:e}, scale {scale:e} (100 seeds each)"),
    ))
}

// ---- C6 -------------------------------------------------------------------

fn c6_quantile_clamp() -> Verdict {
    let mut r = rng::stream(6, "clamp_cases");
    let mut worst_excess = 0.0f64;
    for case in 0..500 {
        let len = 1 + (uniform(&[1], 0.0, 1.0, &mut r).item() * 150.0) as usize;
        let scores = uniform(&[len], 0.0, 1.0, &mut r);
        let ab = uniform(&[3], 0.0, 1.0, &mut r);
        let (lo, hi) = if ab.data()[0] <= ab.data()[1] {
            (ab.data()[0], ab.data()[1])
        } else {
            (ab.data()[1], ab.data()[0])
        };
        // a few cases pin the fraction exactly, including both endpoints
        let (lo, hi) = match case % 25 {
            0 => (0.0, 0.0),
            1 => (1.0, 1.0),
            2 => (lo, lo),
            _ => (lo, hi),
        };
        let u = ab.data()[2] * 1.2 - 0.1;
        let active: Vec<bool> = (0..len).map(|i| (i * 7 + case) % 5 != 0).collect();
        let out = threshold(scores.data(), u, lo, hi, &active).map_err(err)?;
        let na = active.iter().filter(|&&a| a).count() as f64;
        let halted = active
            .iter()
            .zip(&out.mask)
            .filter(|(&a, &k)| a && !k)
            .count() as f64;
        let excess = (lo * na - halted).max(halted - hi * na).max(0.0);
        worst_excess = worst_excess.max(excess);
        if active.iter().zip(&out.mask).any(|(&a, &k)| !a && k) {
            return Ok((false, format!("case {case}: an inactive token was kept")));
        }
    }
    Ok((
        worst_excess <= 1.0,
        format!("largest excursion outside [lo, hi] = {worst_excess} tokens over 500 cases"),
    ))
}

// ---- C7 -------------------------------------------------------------------

fn c7_flops() -> Verdict {
    let cfg = ModelConfig::default();
    let (n, r) = (392usize, 7usize);
    let groups = |m: usize| vec![r; m / r];
    let trace = PassTrace {
        mode: PassMode::Infer,
        n_tokens: n,
        grid_cells: 0,
        features: Vec::new(),
        rows: Vec::new(),
        records: Vec::new(),
        layers: (0..4)
            .map(|l| {
                let m = if l == 0 { n } else { n / 2 };
                LayerTrace {
                    shifted: l % 2 == 1,
                    survivors: (0..m).collect(),
                    group_sizes: groups(m),
                    dense_group_sizes: groups(n),
                }
            })
            .collect(),
        modules: Vec::new(),
        halt_layer: Vec::new(),
    };
    let synthetic = flop_count(&trace, &cfg).speedup;
    // every layer cost is linear in n at fixed region size: 4 / (1 + 3/2)
    let closed = (synthetic - 1.6).abs();
    let tokens = tokens_for(&generate_scene(7, 3, 2, 40.0), &cfg)?;
    let opts = PassOptions::with_halt(HaltConfig::fixed_fractions(&[0.85, 0.95]));
    let mut golden = f64::INFINITY;
    let mut with_overhead = f64::INFINITY;
    for seed in 0..3 {
        let model = Model::new(cfg.clone(), seed).map_err(err)?;
        let (_, t) = infer_forward(&model, &tokens, &opts).map_err(err)?;
        let rep = flop_count(&t, &cfg);
        golden = golden.min(rep.speedup);
        with_overhead = with_overhead.min(rep.speedup_with_overhead);
    }
    Ok((
        closed < 1e-12 && golden > 1.5,
        format!(
            "synthetic |speedup - 1.6| = {closed:e}; golden 85%/95% speedup {golden:.3} \
             ({with_overhead:.3} counting halting modules)"
        ),
    ))
}

// ---- C8, C9 -----------------------------------------------------------------

struct Runs {
    full: tokenhalt::trainer::TrainReport,
    uniform: tokenhalt::trainer::TrainReport,
    no_recycle: tokenhalt::trainer::TrainReport,
}

fn training_runs() -> Result<Runs, String> {
    let cfg = TrainConfig::default();
    Ok(Runs {
        full: train(&cfg).map_err(err)?,
        uniform: train(&TrainConfig {
            sparsity: SparsityKind::Uniform,
            ..cfg.clone()
        })
        .map_err(err)?,
        no_recycle: train(&TrainConfig {
            recycle: false,
            ..cfg
        })
        .map_err(err)?,
    })
}

fn c8_nonuniform(runs: &Runs) -> Verdict {
    let (fg, bg) = runs.full.final_keep(1);
    let (first, last) = (runs.uniform.first_loss(), runs.uniform.final_loss());
    Ok((
        fg - bg > 0.3 && last < first,
        format!(
            "fg_keep {fg:.3} - bg_keep {bg:.3} = {:.3}; uniform ablation loss {first:.3} -> {last:.3}",
            fg - bg
        ),
    ))
}

fn c9_recycling(runs: &Runs) -> Verdict {
    let (full, none) = (runs.full.final_loss(), runs.no_recycle.final_loss());
    Ok((
        full < none,
        format!("final loss full {full:.4} vs no-recycle {none:.4}"),
    ))
}

// ---- C10 --------------------------------------------------------------------

const TINY: &str = "\
train.epochs = 1
train.scenes_per_epoch = 4
model.layers = 2
halt.layers = 0, 1
model.d_model = 8
model.heads = 2
model.d_ff = 16
model.head_channels = 4
halt.module1_channels = 2
";

fn binary(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tokenhalt"))
        .args(args)
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<Vec<String>, String> {
    let mut differ = Vec::new();
    for name in names {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x != y {
            differ.push(name.to_string());
        }
    }
    Ok(differ)
}

fn c10_determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).map_err(err)?;
    let cfg = cfg.to_str().ok_or("path")?;
    let out = |name: &str| dir.path().join(name);
    for run in ["a", "b"] {
        let train_dir = out(&format!("train_{run}"));
        binary(&[
            "train",
            "--config",
            cfg,
            "--seed",
            "5",
            "--out",
            train_dir.to_str().ok_or("path")?,
        ])?;
        let sweep_dir = out(&format!("sweep_{run}"));
        binary(&[
            "sweep",
            "--config",
            cfg,
            "--seed",
            "5",
            "--out",
            sweep_dir.to_str().ok_or("path")?,
            "--u-grid",
            "off,0.05,0.2",
            "--finetune-steps",
            "3",
            "--heldout",
            "3",
        ])?;
    }
    let mut differ = same_files(
        &out("train_a"),
        &out("train_b"),
        &["metrics.csv", "sparsity.csv", "flops.csv", "checkpoint.bin"],
    )?;
    differ.extend(same_files(
        &out("sweep_a"),
        &out("sweep_b"),
        &["sweep.csv"],
    )?);
    Ok((
        differ.is_empty(),
        if differ.is_empty() {
            "train (4 files) and sweep CSVs byte-identical across two runs".into()
        } else {
            format!("differing files: {differ:?}")
        },
    ))
}

// ---- driver -------------------------------------------------------------------

fn report(
    id: &str,
    name: &str,
    start: Instant,
    v: Verdict,
    evaluated: &mut bool,
    passed: &mut usize,
) {
    let secs = start.elapsed().as_secs_f64();
    match v {
        Ok((ok, detail)) => {
            *passed += ok as usize;
            println!(
                "{id} {} {name}: {detail} [{secs:.1}s]",
                if ok { "PASS" } else { "FAIL" }
            );
        }
        Err(e) => {
            *evaluated = false;
            println!("{id} ERROR {name}: could not evaluate: {e} [{secs:.1}s]");
        }
    }
}

fn main() -> ExitCode {
    let (mut evaluated, mut passed) = (true, 0usize);
    let checks: [(&str, &str, fn() -> Verdict); 7] = [
        ("C1", "train/infer equivalence", c1_equivalence),
        ("C2", "pseudo-gradient accuracy", c2_pseudo_gradient),
        ("C3", "gradient integrity", c3_gradients),
        ("C4", "telescoping recycling", c4_telescoping),
        ("C5", "weighted attention degeneracies", c5_wsa),
        ("C6", "quantile clamp", c6_quantile_clamp),
        ("C7", "FLOP model", c7_flops),
    ];
    for (id, name, f) in checks {
        let t = Instant::now();
        report(id, name, t, f(), &mut evaluated, &mut passed);
    }
    let t = Instant::now();
    match training_runs() {
        Ok(runs) => {
            report(
                "C8",
                "non-uniform sparsity loss",
                t,
                c8_nonuniform(&runs),
                &mut evaluated,
                &mut passed,
            );
            report(
                "C9",
                "recycling ablation",
                t,
                c9_recycling(&runs),
                &mut evaluated,
                &mut passed,
            );
        }
        Err(e) => {
            report(
                "C8",
                "non-uniform sparsity loss",
                t,
                Err(e.clone()),
                &mut evaluated,
                &mut passed,
            );
            report(
                "C9",
                "recycling ablation",
                t,
                Err(e),
                &mut evaluated,
                &mut passed,
            );
        }
    }
    let t = Instant::now();
    report(
        "C10",
        "determinism",
        t,
        c10_determinism(),
        &mut evaluated,
        &mut passed,
    );
    println!("acceptance: {passed}/10 PASS");
    if evaluated {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
