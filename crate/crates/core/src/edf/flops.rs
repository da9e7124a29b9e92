//! Analytic multiply-add counts.
//!
//! Per attention layer with `n` tokens in regions of sizes `r_g`:
//!
//! ```text
//! pe        n · (2·P + P·D)             P = positional MLP width
//! qkv       3 · n · D²
//! attention Σ_g (2 · r_g² · D + 4 · r_g² · H)
//! mlp       2 · n · D · D_ff
//! ```
//!
//! The `4 · r² · H` term charges four operations per softmax element. Layer
//! norms, residual adds and the embedding are not counted.

use std::io::Write;

use super::{PassMode, PassTrace};
use crate::backbone::LayerSpec;
use crate::halting::SCORE_INPUT_FEATURES;
use crate::model::ModelConfig;

/// Multiply-adds of one attention layer.
pub fn layer_flops(spec: &LayerSpec, tokens: usize, group_sizes: &[usize]) -> u64 {
    let (n, d, p) = (tokens as u64, spec.d_model as u64, spec.pe_hidden as u64);
    let h = spec.heads as u64;
    let attn: u64 = group_sizes
        .iter()
        .map(|&r| {
            let r2 = (r as u64) * (r as u64);
            2 * r2 * d + 4 * r2 * h
        })
        .sum();
    n * (2 * p + p * d) + 3 * n * d * d + attn + 2 * n * d * spec.d_ff as u64
}

/// Multiply-adds of one halting module on `tokens` inputs.
pub fn module_flops(dense: bool, tokens: usize, config: &ModelConfig) -> u64 {
    let n = tokens as u64;
    let d = config.layers.d_model as u64;
    let din = config.layers.d_model.min(SCORE_INPUT_FEATURES) as u64;
    if !dense {
        return n * din;
    }
    let c = config.module1_channels as u64;
    let g = config.grid.cells() as u64;
    let half = g.div_ceil(2);
    let quarter = half.div_ceil(2);
    let conv = |side: u64, cin: u64, cout: u64| side * side * 9 * cin * cout;
    n * din * c
        + conv(half, c, c)
        + conv(quarter, c, 2 * c)
        + conv(half, 3 * c, c)
        + conv(g, 2 * c, c)
        + n * c
        + n * c * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFlops {
    pub tokens: usize,
    pub flops: u64,
    pub dense_tokens: usize,
    pub dense_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub mode: PassMode,
    /// Attention layers with every token present.
    pub dense: u64,
    /// Attention layers over survivors only.
    pub observed: u64,
    /// Halting modules.
    pub overhead: u64,
    /// `dense / observed`.
    pub speedup: f64,
    /// `dense / (observed + overhead)`.
    pub speedup_with_overhead: f64,
    pub per_layer: Vec<LayerFlops>,
}

/// Counts for a trace from either pass. Both passes yield the same report
/// for the same halting decisions.
pub fn flop_count(trace: &PassTrace, config: &ModelConfig) -> FlopReport {
    let spec = &config.layers;
    let per_layer: Vec<LayerFlops> = trace
        .layers
        .iter()
        .map(|l| LayerFlops {
            tokens: l.survivors.len(),
            flops: layer_flops(spec, l.survivors.len(), &l.group_sizes),
            dense_tokens: trace.n_tokens,
            dense_flops: layer_flops(spec, trace.n_tokens, &l.dense_group_sizes),
        })
        .collect();
    let dense: u64 = per_layer.iter().map(|l| l.dense_flops).sum();
    let observed: u64 = per_layer.iter().map(|l| l.flops).sum();
    let overhead: u64 = trace
        .modules
        .iter()
        .map(|m| module_flops(m.dense, m.tokens, config))
        .sum();
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    FlopReport {
        mode: trace.mode,
        dense,
        observed,
        overhead,
        speedup: if observed == dense {
            1.0
        } else {
            ratio(dense, observed)
        },
        speedup_with_overhead: ratio(dense, observed + overhead),
        per_layer,
    }
}

/// Rows `pass,layer,tokens,flops` for the observed pass followed by the
/// halting-disabled reference (`pass = dense`). Writes the header when
/// `header` is set.
pub fn write_flop_csv<W: Write>(
    mut w: W,
    report: &FlopReport,
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(w, "pass,layer,tokens,flops")?;
    }
    let label = match report.mode {
        PassMode::Train => "train",
        PassMode::Infer => "infer",
    };
    for (l, lf) in report.per_layer.iter().enumerate() {
        writeln!(w, "{label},{},{},{}", l + 1, lf.tokens, lf.flops)?;
    }
    for (l, lf) in report.per_layer.iter().enumerate() {
        writeln!(w, "dense,{},{},{}", l + 1, lf.dense_tokens, lf.dense_flops)?;
    }
    Ok(())
}
