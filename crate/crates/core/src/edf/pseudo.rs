//! Straight-through pseudo-gradient versus brute-force mask flips on the
//! one-layer reduction
//!
//! ```text
//! q1 = (1 - k) ∘ f
//! q2 = k ∘ φ₂(WSA(φ₁(f), s ∘ k), f)
//! ```
//!
//! For every halted token `i` (score `0.9 u`), `delta_i` re-evaluates the
//! loss with `k_i` set to 1 and `grad_i` is `∂L/∂s_i` from one backward pass
//! through the straight-through mask.

use std::io::Write;

use crate::backbone::{layer_forward, AttentionLayerWeights, LayerSpec, LayerVars, RegionView};
use crate::error::{Error, Result};
use crate::halting::ste_apply;
use crate::params::ParamStore;
use crate::rng;
use crate::scene::RegionField;
use crate::tensor::{randn, uniform, Graph, Tensor, Var};

use rand::Rng as _;

/// Scalar loss on `(q1, q2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// `⟨T1, q1⟩ + ⟨T2, q2⟩`. Its curvature in `q` is zero, so the gap
    /// between flip and gradient comes only from the attention weights.
    #[default]
    Linear,
    /// `½ ‖q1 + q2 - T‖²`. Flipping a mask moves `q` by `O(1)`, so the gap
    /// contains an `O(1)` quadratic term that does not shrink with `u`.
    Squared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGradConfig {
    pub u_list: Vec<f64>,
    pub seeds: usize,
    pub seed: u64,
    pub regions: usize,
    pub tokens_per_region: usize,
    /// Probability that a token (other than the first of each region) is
    /// halted.
    pub halt_fraction: f64,
    /// Zero `W_V` and the MLP output so the layer is the identity on `f`.
    pub zero_residual: bool,
    pub loss: LossKind,
    pub spec: LayerSpec,
}

impl Default for PseudoGradConfig {
    fn default() -> Self {
        Self {
            u_list: vec![0.04, 0.02, 0.01, 0.005],
            seeds: 8,
            seed: 0,
            regions: 4,
            tokens_per_region: 12,
            halt_fraction: 0.3,
            zero_residual: false,
            loss: LossKind::Linear,
            spec: LayerSpec::alternating(1, 4, 32, 64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoGradRow {
    pub u: f64,
    pub seed: u64,
    pub token_index: usize,
    pub delta: f64,
    pub grad: f64,
    pub abs_err: f64,
}

struct Instance {
    store: ParamStore,
    layer: AttentionLayerWeights,
    view: RegionView,
    f: Tensor,
    t1: Tensor,
    t2: Tensor,
    halted: Vec<bool>,
    kept_scores: Vec<f64>,
}

fn instance(cfg: &PseudoGradConfig, seed: u64) -> Result<Instance> {
    let mut r = rng::indexed(cfg.seed, "pseudo_grad", seed);
    let mut store = ParamStore::new();
    let layer = AttentionLayerWeights::register(&mut store, "layer", &cfg.spec, &mut r)?;
    if cfg.zero_residual {
        layer.zero_residual_branches(&mut store);
    }
    let n = cfg.regions * cfg.tokens_per_region;
    let d = cfg.spec.d_model;
    let field = RegionField {
        ids: (0..n).map(|i| i / cfg.tokens_per_region).collect(),
        offsets: uniform(&[n, 2], -1.0, 1.0, &mut r),
    };
    let f = randn(&[n, d], 1.0, &mut r);
    let t1 = randn(&[n, d], 1.0, &mut r);
    let t2 = randn(&[n, d], 1.0, &mut r);
    // the first token of each region always survives so no region is empty
    let halted = (0..n)
        .map(|i| i % cfg.tokens_per_region != 0 && r.random_bool(cfg.halt_fraction))
        .collect();
    let kept_scores = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
    Ok(Instance {
        store,
        layer,
        view: RegionView::all(&field),
        f,
        t1,
        t2,
        halted,
        kept_scores,
    })
}

fn loss(
    g: &mut Graph,
    inst: &Instance,
    lv: &LayerVars,
    heads: usize,
    s: Var,
    mask: &[bool],
    kind: LossKind,
) -> Result<Var> {
    let k = ste_apply(g, s, mask)?;
    let f = g.constant(inst.f.clone());
    let w = g.mul(s, k)?;
    let out = layer_forward(g, f, Some(w), lv, &inst.view, heads)?;
    let keep = g.one_minus(k)?;
    let q1 = g.mul_col(f, keep)?;
    let q2 = g.mul_col(out, k)?;
    match kind {
        LossKind::Linear => {
            let t1 = g.constant(inst.t1.clone());
            let t2 = g.constant(inst.t2.clone());
            let a = g.mul(q1, t1)?;
            let b = g.mul(q2, t2)?;
            let ab = g.add(a, b)?;
            g.sum(ab)
        }
        LossKind::Squared => {
            let t = g.constant(inst.t1.clone());
            let q = g.add(q1, q2)?;
            let e = g.sub(q, t)?;
            let e2 = g.mul(e, e)?;
            let tot = g.sum(e2)?;
            g.scale(tot, 0.5)
        }
    }
}

fn eval(
    inst: &Instance,
    heads: usize,
    scores: &Tensor,
    mask: &[bool],
    kind: LossKind,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = inst.store.bind_constant(&mut g);
    let lv = inst.layer.bind(&b);
    let s = g.constant(scores.clone());
    let l = loss(&mut g, inst, &lv, heads, s, mask, kind)?;
    Ok(g.value(l).item())
}

/// One row per (u, seed, halted token).
pub fn pseudo_grad_experiment(cfg: &PseudoGradConfig) -> Result<Vec<PseudoGradRow>> {
    if cfg.u_list.iter().any(|&u| !(u > 0.0 && u < 0.1 / 0.9)) {
        return Err(Error::Invalid(
            "every u must lie in (0, 0.11) so halted scores stay below 0.1".into(),
        ));
    }
    cfg.spec.validate()?;
    let heads = cfg.spec.heads;
    let mut rows = Vec::new();
    for seed in 0..cfg.seeds as u64 {
        let inst = instance(cfg, seed)?;
        for &u in &cfg.u_list {
            let scores: Vec<f64> = inst
                .halted
                .iter()
                .zip(&inst.kept_scores)
                .map(|(&h, &s)| if h { 0.9 * u } else { s })
                .collect();
            let mask: Vec<bool> = scores.iter().map(|&s| s >= u).collect();
            let scores = Tensor::column(scores);

            let mut g = Graph::new();
            let b = inst.store.bind_constant(&mut g);
            let lv = inst.layer.bind(&b);
            let s = g.param(scores.clone());
            let l = loss(&mut g, &inst, &lv, heads, s, &mask, cfg.loss)?;
            let base = g.value(l).item();
            g.backward(l)?;
            let grad = g
                .grad(s)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(scores.shape()));

            for i in (0..mask.len()).filter(|&i| !mask[i]) {
                let mut flipped = mask.clone();
                flipped[i] = true;
                let delta = eval(&inst, heads, &scores, &flipped, cfg.loss)? - base;
                let gi = grad.data()[i];
                rows.push(PseudoGradRow {
                    u,
                    seed,
                    token_index: i,
                    delta,
                    grad: gi,
                    abs_err: (delta - gi).abs(),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGradSummary {
    /// `(u, median abs_err)` in input order.
    pub medians: Vec<(f64, f64)>,
    /// Least-squares slope of `ln median` against `ln u`.
    pub slope: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Medians per `u` and the log-log slope. Needs at least two distinct `u`
/// values with positive medians.
pub fn summarize_pseudo_grad(rows: &[PseudoGradRow], u_list: &[f64]) -> Result<PseudoGradSummary> {
    let medians: Vec<(f64, f64)> = u_list
        .iter()
        .map(|&u| {
            (
                u,
                median(
                    rows.iter()
                        .filter(|r| r.u == u)
                        .map(|r| r.abs_err)
                        .collect(),
                ),
            )
        })
        .collect();
    let pts: Vec<(f64, f64)> = medians
        .iter()
        .filter(|(_, m)| *m > 0.0 && m.is_finite())
        .map(|&(u, m)| (u.ln(), m.ln()))
        .collect();
    let distinct = {
        let mut us: Vec<f64> = pts.iter().map(|p| p.0).collect();
        us.sort_by(f64::total_cmp);
        us.dedup();
        us.len()
    };
    if distinct < 2 {
        return Err(Error::Invalid(
            "slope needs at least two distinct u values with positive median error".into(),
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(PseudoGradSummary {
        medians,
        slope: sxy / sxx,
    })
}

pub fn write_pseudo_grad_csv<W: Write>(mut w: W, rows: &[PseudoGradRow]) -> std::io::Result<()> {
    writeln!(w, "u,token_index,delta,grad,abs_err")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.u, r.token_index, r.delta, r.grad, r.abs_err
        )?;
    }
    Ok(())
}
