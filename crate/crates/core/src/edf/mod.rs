//! Training pass over all tokens with masked attention weights, inference
//! pass with physical token dropping, and token recycling into the BEV map.

mod flops;
mod pseudo;

pub use flops::{flop_count, layer_flops, module_flops, write_flop_csv, FlopReport};
pub use pseudo::{
    pseudo_grad_experiment, summarize_pseudo_grad, write_pseudo_grad_csv, LossKind,
    PseudoGradConfig, PseudoGradRow, PseudoGradSummary,
};

use crate::backbone::{layer_forward, RegionView};
use crate::error::{Error, Result};
use crate::halting::{
    compare_records, fuse_latent, score_module_dense, score_module_mlp, ste_apply, threshold,
    HaltConfig, HaltRecord,
};
use crate::model::{HaltModule, Model};
use crate::params::Bound;
use crate::scene::TokenSet;
use crate::tensor::{Graph, Tensor, Var};

/// Switches shared by both passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOptions {
    pub halt: HaltConfig,
    /// When false every module keeps every active token.
    pub halting: bool,
    /// When false halted tokens are dropped instead of written to the BEV map.
    pub recycle: bool,
}

impl Default for PassOptions {
    fn default() -> Self {
        Self {
            halt: HaltConfig::default(),
            halting: true,
            recycle: true,
        }
    }
}

impl PassOptions {
    pub fn no_halting() -> Self {
        Self {
            halting: false,
            ..Self::default()
        }
    }

    pub fn with_halt(halt: HaltConfig) -> Self {
        Self {
            halt,
            ..Self::default()
        }
    }
}

/// Dense `[cells, cells, d]` feature grid with per-cell provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub cells: usize,
    pub features: Tensor,
    /// 1-based layer whose input features fill the cell; `n_layers + 1` for
    /// tokens that survive every layer; 0 for empty cells.
    pub provenance: Vec<usize>,
}

impl BevMap {
    pub fn max_abs_diff(&self, other: &BevMap) -> f64 {
        self.features.max_abs_diff(&other.features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    Train,
    Infer,
}

/// Token counts and region occupancy seen by one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub shifted: bool,
    /// Tokens whose attention row is live (all earlier masks are 1).
    pub survivors: Vec<usize>,
    /// Region sizes over the survivors.
    pub group_sizes: Vec<usize>,
    /// Region sizes with halting disabled.
    pub dense_group_sizes: Vec<usize>,
}

/// Inputs seen by one halting module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleTrace {
    pub dense: bool,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassTrace {
    pub mode: PassMode,
    pub n_tokens: usize,
    pub grid_cells: usize,
    /// `features[l]` enters attention layer `l`; the last entry is the output.
    pub features: Vec<Tensor>,
    /// Token index of each row of `features[l]`.
    pub rows: Vec<Vec<usize>>,
    pub records: Vec<HaltRecord>,
    pub layers: Vec<LayerTrace>,
    pub modules: Vec<ModuleTrace>,
    /// Per token, the 1-based layer whose input is recycled into the BEV
    /// map (`n_layers + 1` for survivors).
    pub halt_layer: Vec<usize>,
}

/// Graph handles produced by [`train_forward_graph`].
#[derive(Debug, Clone)]
pub struct EdfGraph {
    /// `[cells, cells, d]`
    pub bev: Var,
    /// Score node per halting module, `[n, 1]`.
    pub scores: Vec<Var>,
    pub trace: PassTrace,
    pub bev_map: BevMap,
}

fn group_sizes(groups: &[Vec<usize>]) -> Vec<usize> {
    groups.iter().map(Vec::len).collect()
}

fn score_module(
    g: &mut Graph,
    model: &Model,
    module: usize,
    input: Var,
    f: Var,
    cells: &[usize],
    b: &Bound,
) -> Result<(Var, Var)> {
    match &model.halt[module] {
        HaltModule::Dense(w) => {
            let (s, latent) = score_module_dense(g, input, cells, model.config.grid.cells(), w, b)?;
            let fused = fuse_latent(g, f, latent, b[w.fuse_w], b[w.fuse_b])?;
            Ok((s, fused))
        }
        HaltModule::Mlp(w) => Ok((score_module_mlp(g, input, w, b)?, f)),
    }
}

fn decide(
    opts: &PassOptions,
    module: usize,
    scores: &[f64],
    active: &[bool],
) -> Result<(Vec<bool>, f64)> {
    if !opts.halting {
        return Ok((active.to_vec(), f64::NEG_INFINITY));
    }
    let (lo, hi) = *opts.halt.bounds.get(module).ok_or_else(|| {
        Error::Invalid(format!(
            "no threshold bounds for halting module {}",
            module + 1
        ))
    })?;
    let out = threshold(scores, opts.halt.u, lo, hi, active)?;
    Ok((out.mask, out.threshold))
}

fn empty_pass(model: &Model, mode: PassMode) -> (BevMap, PassTrace) {
    let cells = model.config.grid.cells();
    let d = model.config.layers.d_model;
    let bev = BevMap {
        cells,
        features: Tensor::zeros(&[cells, cells, d]),
        provenance: vec![0; cells * cells],
    };
    let l = model.config.layers.n_layers;
    let trace = PassTrace {
        mode,
        n_tokens: 0,
        grid_cells: cells,
        features: vec![Tensor::zeros(&[0, d]); l + 1],
        rows: vec![Vec::new(); l + 1],
        records: model
            .config
            .halt_layers
            .iter()
            .map(|&layer| HaltRecord {
                layer,
                scores: Vec::new(),
                active: Vec::new(),
                mask: Vec::new(),
                cumulative: Vec::new(),
                threshold: 0.0,
            })
            .collect(),
        layers: model
            .config
            .layers
            .shifted
            .iter()
            .map(|&shifted| LayerTrace {
                shifted,
                survivors: Vec::new(),
                group_sizes: Vec::new(),
                dense_group_sizes: Vec::new(),
            })
            .collect(),
        modules: model
            .halt
            .iter()
            .map(|m| ModuleTrace {
                dense: matches!(m, HaltModule::Dense(_)),
                tokens: 0,
            })
            .collect(),
        halt_layer: Vec::new(),
    };
    (bev, trace)
}

fn check_tokens(model: &Model, tokens: &TokenSet) -> Result<()> {
    if tokens.grid != model.config.grid {
        return Err(Error::Invalid(
            "token grid differs from the model grid".into(),
        ));
    }
    if tokens.region_size != model.config.region_size {
        return Err(Error::Invalid(format!(
            "tokens use region size {}, model expects {}",
            tokens.region_size, model.config.region_size
        )));
    }
    Ok(())
}

/// Differentiable pass over every token. Attention at layer `l` is weighted
/// by `s ∘ k_{0:l}` (latest module scores times the cumulative mask), masks
/// come from [`ste_apply`], and the BEV map is
/// `Σ_l (k_{0:l-1} - k_{0:l}) ∘ f_l` with `k_{0:0} = 1`, `k_{0:L+1} = 0`.
pub fn train_forward_graph(
    g: &mut Graph,
    b: &Bound,
    model: &Model,
    tokens: &TokenSet,
    opts: &PassOptions,
) -> Result<EdfGraph> {
    check_tokens(model, tokens)?;
    let spec = &model.config.layers;
    let cells = model.config.grid.cells();
    let d = spec.d_model;
    let n = tokens.len();
    if n == 0 {
        let (bev_map, trace) = empty_pass(model, PassMode::Train);
        let bev = g.constant(bev_map.features.clone());
        let scores = (0..model.halt.len())
            .map(|_| g.constant(Tensor::zeros(&[0, 1])))
            .collect();
        return Ok(EdfGraph {
            bev,
            scores,
            trace,
            bev_map,
        });
    }
    let cell_idx = tokens.cell_indices();
    let all: Vec<usize> = (0..n).collect();
    let raw = g.constant(tokens.raw.clone());
    let mut f = g.linear(raw, b[model.embed_w], b[model.embed_b])?;

    let ones = g.constant(Tensor::ones(&[n, 1]));
    let mut cum = ones;
    let mut cum_vals = vec![true; n];
    let mut latest: Option<Var> = None;
    let mut terms: Vec<Var> = Vec::new();
    let mut halt_layer = vec![spec.n_layers + 1; n];
    let mut score_vars = Vec::new();
    let mut records = Vec::new();
    let mut modules = Vec::new();
    let mut features = Vec::new();
    let mut layers = Vec::new();

    for l in 0..spec.n_layers {
        if let Some(m) = model.module_before(l) {
            let input = if cum_vals.iter().all(|&a| a) {
                f
            } else {
                g.mul_col(f, cum)?
            };
            let (s, fused) = score_module(g, model, m, input, f, &cell_idx, b)?;
            f = fused;
            let active = cum_vals.clone();
            let svals: Vec<f64> = g.value(s).data().to_vec();
            let (mask, thr) = decide(opts, m, &svals, &active)?;
            // with halting off the mask does not depend on the scores, so
            // no straight-through gradient is attached
            let next = if opts.halting {
                let k = ste_apply(g, s, &mask)?;
                g.mul(cum, k)?
            } else {
                cum
            };
            let next_vals: Vec<bool> = cum_vals.iter().zip(&mask).map(|(&c, &k)| c && k).collect();
            if opts.recycle {
                let coef = g.sub(cum, next)?;
                terms.push(g.mul_col(f, coef)?);
            }
            for i in 0..n {
                if cum_vals[i] && !next_vals[i] {
                    halt_layer[i] = l + 1;
                }
            }
            modules.push(ModuleTrace {
                dense: matches!(model.halt[m], HaltModule::Dense(_)),
                tokens: active.iter().filter(|&&a| a).count(),
            });
            records.push(HaltRecord {
                layer: l,
                scores: svals
                    .iter()
                    .zip(&active)
                    .map(|(&s, &a)| if a { s } else { 0.0 })
                    .collect(),
                active,
                mask,
                cumulative: next_vals.clone(),
                threshold: thr,
            });
            score_vars.push(s);
            cum = next;
            cum_vals = next_vals;
            latest = Some(s);
        }
        features.push(g.value(f).clone());
        let shifted = spec.shifted[l];
        let field = tokens.region_field(shifted);
        let view = RegionView::all(field);
        let survivors: Vec<usize> = all.iter().copied().filter(|&i| cum_vals[i]).collect();
        layers.push(LayerTrace {
            shifted,
            group_sizes: group_sizes(&field.groups(&survivors)),
            dense_group_sizes: group_sizes(&view.groups),
            survivors,
        });
        let weights = match latest {
            Some(s) => Some(g.mul(s, cum)?),
            None => None,
        };
        let lv = model.layers[l].bind(b);
        f = layer_forward(g, f, weights, &lv, &view, spec.heads)?;
    }
    features.push(g.value(f).clone());
    terms.push(g.mul_col(f, cum)?);
    if !opts.recycle {
        for (h, &alive) in halt_layer.iter_mut().zip(&cum_vals) {
            if !alive {
                *h = 0;
            }
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    let grid = g.scatter_rows(acc, &cell_idx, cells * cells)?;
    let bev = g.reshape(grid, &[cells, cells, d])?;
    let mut provenance = vec![0; cells * cells];
    for (i, &c) in cell_idx.iter().enumerate() {
        provenance[c] = halt_layer[i];
    }
    let bev_map = BevMap {
        cells,
        features: g.value(bev).clone(),
        provenance,
    };
    let trace = PassTrace {
        mode: PassMode::Train,
        n_tokens: n,
        grid_cells: cells,
        features,
        rows: vec![all; spec.n_layers + 1],
        records,
        layers,
        modules,
        halt_layer,
    };
    Ok(EdfGraph {
        bev,
        scores: score_vars,
        trace,
        bev_map,
    })
}

/// [`train_forward_graph`] on a throwaway graph with constant weights.
pub fn train_forward(
    model: &Model,
    tokens: &TokenSet,
    opts: &PassOptions,
) -> Result<(BevMap, PassTrace)> {
    let mut g = Graph::new();
    let b = model.params.bind_constant(&mut g);
    let out = train_forward_graph(&mut g, &b, model, tokens, opts)?;
    Ok((out.bev_map, out.trace))
}

/// Sparse pass: halted tokens leave the token set, survivors attend only to
/// survivors with their own scores as weights, and each halted token's
/// features at its halt layer are written straight into the BEV map.
pub fn infer_forward(
    model: &Model,
    tokens: &TokenSet,
    opts: &PassOptions,
) -> Result<(BevMap, PassTrace)> {
    check_tokens(model, tokens)?;
    let n = tokens.len();
    if n == 0 {
        return Ok(empty_pass(model, PassMode::Infer));
    }
    let spec = &model.config.layers;
    let cells = model.config.grid.cells();
    let d = spec.d_model;
    let cell_idx = tokens.cell_indices();
    let mut g = Graph::new();
    let b = model.params.bind_constant(&mut g);
    let raw = g.constant(tokens.raw.clone());
    let mut f = g.linear(raw, b[model.embed_w], b[model.embed_b])?;

    let mut bev = Tensor::zeros(&[cells, cells, d]);
    let mut provenance = vec![0; cells * cells];
    let write =
        |bev: &mut Tensor, provenance: &mut [usize], token: usize, row: &[f64], layer: usize| {
            let c = cell_idx[token];
            bev.data_mut()[c * d..(c + 1) * d].copy_from_slice(row);
            provenance[c] = layer;
        };

    let mut survivors: Vec<usize> = (0..n).collect();
    let mut cum_vals = vec![true; n];
    let mut latest: Option<Var> = None;
    let mut halt_layer = vec![spec.n_layers + 1; n];
    let mut records = Vec::new();
    let mut modules = Vec::new();
    let mut features = Vec::new();
    let mut rows = Vec::new();
    let mut layers = Vec::new();

    for l in 0..spec.n_layers {
        if let Some(m) = model.module_before(l) {
            let active = cum_vals.clone();
            let mut svals = vec![0.0; n];
            let mut mask = vec![false; n];
            let mut thr = opts.halt.u;
            if !survivors.is_empty() {
                let cells_s: Vec<usize> = survivors.iter().map(|&i| cell_idx[i]).collect();
                let (s, fused) = score_module(&mut g, model, m, f, f, &cells_s, &b)?;
                f = fused;
                for (r, &i) in survivors.iter().enumerate() {
                    svals[i] = g.value(s).data()[r];
                }
                let (mk, t) = decide(opts, m, &svals, &active)?;
                mask = mk;
                thr = t;
                let mut keep = Vec::new();
                for (r, &i) in survivors.iter().enumerate() {
                    if mask[i] {
                        keep.push(r);
                    } else {
                        halt_layer[i] = l + 1;
                        if opts.recycle {
                            let row = g.value(f).row(r).to_vec();
                            write(&mut bev, &mut provenance, i, &row, l + 1);
                        } else {
                            halt_layer[i] = 0;
                        }
                    }
                }
                f = g.gather_rows(f, &keep)?;
                let s = g.gather_rows(s, &keep)?;
                survivors = keep.iter().map(|&r| survivors[r]).collect();
                latest = Some(s);
            } else if !opts.halting {
                thr = f64::NEG_INFINITY;
            }
            modules.push(ModuleTrace {
                dense: matches!(model.halt[m], HaltModule::Dense(_)),
                tokens: active.iter().filter(|&&a| a).count(),
            });
            let cumulative: Vec<bool> = active.iter().zip(&mask).map(|(&a, &k)| a && k).collect();
            cum_vals = cumulative.clone();
            records.push(HaltRecord {
                layer: l,
                scores: svals,
                active,
                mask,
                cumulative,
                threshold: thr,
            });
        }
        features.push(g.value(f).clone());
        rows.push(survivors.clone());
        let shifted = spec.shifted[l];
        let field = tokens.region_field(shifted);
        let all: Vec<usize> = (0..n).collect();
        let view = RegionView::new(field, &survivors);
        layers.push(LayerTrace {
            shifted,
            survivors: survivors.clone(),
            group_sizes: group_sizes(&view.groups),
            dense_group_sizes: group_sizes(&field.groups(&all)),
        });
        if survivors.is_empty() {
            continue;
        }
        let lv = model.layers[l].bind(&b);
        f = layer_forward(&mut g, f, latest, &lv, &view, spec.heads)?;
    }
    features.push(g.value(f).clone());
    rows.push(survivors.clone());
    for (r, &i) in survivors.iter().enumerate() {
        let row = g.value(f).row(r).to_vec();
        write(&mut bev, &mut provenance, i, &row, spec.n_layers + 1);
    }
    let bev_map = BevMap {
        cells,
        features: bev,
        provenance,
    };
    let trace = PassTrace {
        mode: PassMode::Infer,
        n_tokens: n,
        grid_cells: cells,
        features,
        rows,
        records,
        layers,
        modules,
        halt_layer,
    };
    Ok((bev_map, trace))
}

/// Runs both passes and returns the largest BEV difference. Halting records
/// must agree exactly.
pub fn check_equivalence(model: &Model, tokens: &TokenSet, opts: &PassOptions) -> Result<f64> {
    let (bt, tt) = train_forward(model, tokens, opts)?;
    let (bi, ti) = infer_forward(model, tokens, opts)?;
    compare_records(&tt.records, &ti.records)?;
    if let Some(c) = (0..bt.provenance.len()).find(|&c| bt.provenance[c] != bi.provenance[c]) {
        return Err(Error::HaltMismatch {
            layer: bt.provenance[c],
            token: tokens
                .cell_indices()
                .iter()
                .position(|&x| x == c)
                .unwrap_or(0),
            detail: format!("provenance {} vs {}", bt.provenance[c], bi.provenance[c]),
        });
    }
    Ok(bt.max_abs_diff(&bi))
}

/// Re-evaluates the recycling sum from a training trace:
/// `Σ_l (k_{0:l-1} - k_{0:l}) f_l` per token, scattered to the grid.
pub fn assemble_bev(trace: &PassTrace, cell_index: &[usize], recycle: bool) -> Result<Tensor> {
    if trace.mode != PassMode::Train {
        return Err(Error::Invalid(
            "assemble_bev needs a training-pass trace".into(),
        ));
    }
    let l_total = trace.layers.len();
    let cells = trace.grid_cells;
    let d = trace.features.last().map(|t| t.shape()[1]).unwrap_or(0);
    let mut out = Tensor::zeros(&[cells, cells, d]);
    // cumulative mask entering each layer, and after the last one
    let n = trace.n_tokens;
    let mut cum: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for l in 0..l_total {
        let mut next = cum[l].clone();
        if let Some(r) = trace.records.iter().find(|r| r.layer == l) {
            next = r
                .cumulative
                .iter()
                .map(|&c| if c { 1.0 } else { 0.0 })
                .collect();
        }
        cum.push(next);
    }
    // cum[l + 1] is k_{0:l+1}: the mask in force during layer l (0-based)
    for i in 0..n {
        let mut acc = vec![0.0; d];
        for l in 0..=l_total {
            let before = if l == 0 { 1.0 } else { cum[l][i] };
            let after = if l == l_total { 0.0 } else { cum[l + 1][i] };
            let coef = before - after;
            if coef == 0.0 || (!recycle && l < l_total) {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(trace.features[l].row(i)) {
                *a += coef * v;
            }
        }
        let c = cell_index[i];
        out.data_mut()[c * d..(c + 1) * d].copy_from_slice(&acc);
    }
    Ok(out)
}
