//! Sparse regional attention layers and their weighted variant.

mod attention;

use std::rc::Rc;

pub use attention::{RegionAttention, EPS_ATTN};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scene::RegionField;
use crate::tensor::{randn, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Shape of the attention stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub n_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Hidden width of the positional-encoding MLP.
    pub pe_hidden: usize,
    /// One flag per layer; `true` uses the shifted region grouping.
    pub shifted: Vec<bool>,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self::alternating(4, 4, 32, 64)
    }
}

impl LayerSpec {
    /// Plain/shifted alternation starting with plain.
    pub fn alternating(n_layers: usize, heads: usize, d_model: usize, d_ff: usize) -> Self {
        Self {
            n_layers,
            heads,
            d_model,
            d_head: if heads == 0 { 0 } else { d_model / heads },
            d_ff,
            pe_hidden: 16,
            shifted: (0..n_layers).map(|l| l % 2 == 1).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.heads * self.d_head != self.d_model {
            return Err(Error::Invalid(format!(
                "heads ({}) × d_head ({}) must equal d_model ({})",
                self.heads, self.d_head, self.d_model
            )));
        }
        if self.shifted.len() != self.n_layers {
            return Err(Error::Invalid(format!(
                "{} shift flags for {} layers",
                self.shifted.len(),
                self.n_layers
            )));
        }
        if self.d_ff == 0 || self.pe_hidden == 0 {
            return Err(Error::Invalid("d_ff and pe_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles for one attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionLayerWeights {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub pe_w1: ParamId,
    pub pe_b1: ParamId,
    pub pe_w2: ParamId,
    pub pe_b2: ParamId,
}

/// The same layer's parameters on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub pe_w1: Var,
    pub pe_b1: Var,
    pub pe_w2: Var,
    pub pe_b2: Var,
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
}

impl AttentionLayerWeights {
    /// Registers `<prefix>.*` tensors with random projections, unit layer-norm
    /// gains and zero biases.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: &LayerSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = spec.d_model;
        let mut add = |name: &str, t: Tensor| store.add(&format!("{prefix}.{name}"), t);
        Ok(Self {
            ln1_g: add("ln1.g", Tensor::ones(&[d]))?,
            ln1_b: add("ln1.b", Tensor::zeros(&[d]))?,
            wq: add("wq", glorot(d, d, rng))?,
            wk: add("wk", glorot(d, d, rng))?,
            wv: add("wv", glorot(d, d, rng))?,
            ln2_g: add("ln2.g", Tensor::ones(&[d]))?,
            ln2_b: add("ln2.b", Tensor::zeros(&[d]))?,
            mlp_w1: add("mlp.w1", glorot(d, spec.d_ff, rng))?,
            mlp_b1: add("mlp.b1", Tensor::zeros(&[spec.d_ff]))?,
            mlp_w2: add("mlp.w2", glorot(spec.d_ff, d, rng).map(|v| 0.5 * v))?,
            mlp_b2: add("mlp.b2", Tensor::zeros(&[d]))?,
            pe_w1: add("pe.w1", glorot(2, spec.pe_hidden, rng))?,
            pe_b1: add("pe.b1", Tensor::zeros(&[spec.pe_hidden]))?,
            pe_w2: add("pe.w2", glorot(spec.pe_hidden, d, rng).map(|v| 0.5 * v))?,
            pe_b2: add("pe.b2", Tensor::zeros(&[d]))?,
        })
    }

    pub fn bind(&self, b: &Bound) -> LayerVars {
        LayerVars {
            ln1_g: b[self.ln1_g],
            ln1_b: b[self.ln1_b],
            wq: b[self.wq],
            wk: b[self.wk],
            wv: b[self.wv],
            ln2_g: b[self.ln2_g],
            ln2_b: b[self.ln2_b],
            mlp_w1: b[self.mlp_w1],
            mlp_b1: b[self.mlp_b1],
            mlp_w2: b[self.mlp_w2],
            mlp_b2: b[self.mlp_b2],
            pe_w1: b[self.pe_w1],
            pe_b1: b[self.pe_b1],
            pe_w2: b[self.pe_w2],
            pe_b2: b[self.pe_b2],
        }
    }

    /// Zeroes the value projection and the MLP output so the layer reduces
    /// to its residual path.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for id in [self.wv, self.mlp_w2, self.mlp_b2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Region grouping restricted to a subset of tokens, with positions
/// relative to that subset.
#[derive(Debug, Clone)]
pub struct RegionView {
    pub offsets: Tensor,
    pub groups: Rc<Vec<Vec<usize>>>,
}

impl RegionView {
    pub fn new(field: &RegionField, subset: &[usize]) -> Self {
        Self {
            offsets: field.offsets.gather_rows(subset),
            groups: Rc::new(field.groups(subset)),
        }
    }

    pub fn all(field: &RegionField) -> Self {
        let subset: Vec<usize> = (0..field.ids.len()).collect();
        Self::new(field, &subset)
    }

    pub fn len(&self) -> usize {
        self.offsets.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learned embedding of each token's normalized offset inside its region.
pub fn positional_encoding(g: &mut Graph, offsets: &Tensor, w: &LayerVars) -> Result<Var> {
    let x = g.constant(offsets.clone());
    let h = g.linear(x, w.pe_w1, w.pe_b1)?;
    let h = g.relu(h)?;
    g.linear(h, w.pe_w2, w.pe_b2)
}

/// Multi-head attention inside each group. `weights` (`[n, 1]`) switches to
/// the weighted form with the `EPS_ATTN` denominator.
pub fn region_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    weights: Option<Var>,
    groups: &Rc<Vec<Vec<usize>>>,
    heads: usize,
) -> Result<Var> {
    let op = RegionAttention {
        groups: Rc::clone(groups),
        heads,
        weighted: weights.is_some(),
    };
    match weights {
        Some(w) => g.custom(Rc::new(op), &[q, k, v, w]),
        None => g.custom(Rc::new(op), &[q, k, v]),
    }
}

/// One pre-norm attention layer:
///
/// ```text
/// x  = LN1(f);  p = PE(offsets)
/// f' = Attn((x + p) W_Q, (x + p) W_K, x W_V; weights) + f
/// out = MLP(LN2(f')) + f'
/// ```
///
/// `weights = None` gives plain softmax attention; `Some(w)` the weighted form.
pub fn layer_forward(
    g: &mut Graph,
    f: Var,
    weights: Option<Var>,
    w: &LayerVars,
    view: &RegionView,
    heads: usize,
) -> Result<Var> {
    let x = g.layer_norm(f, w.ln1_g, w.ln1_b, LN_EPS)?;
    let pe = positional_encoding(g, &view.offsets, w)?;
    let xp = g.add(x, pe)?;
    let q = g.matmul(xp, w.wq)?;
    let k = g.matmul(xp, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let a = region_attention(g, q, k, v, weights, &view.groups, heads)?;
    let f1 = g.add(a, f)?;
    let y = g.layer_norm(f1, w.ln2_g, w.ln2_b, LN_EPS)?;
    let h = g.linear(y, w.mlp_w1, w.mlp_b1)?;
    let h = g.relu(h)?;
    let h = g.linear(h, w.mlp_w2, w.mlp_b2)?;
    g.add(h, f1)
}

/// Unweighted sparse regional attention layer.
pub fn sra(g: &mut Graph, f: Var, w: &LayerVars, view: &RegionView, heads: usize) -> Result<Var> {
    layer_forward(g, f, None, w, view, heads)
}

/// Weighted layer; `scores` is `[n, 1]` and non-negative.
pub fn wsa(
    g: &mut Graph,
    f: Var,
    scores: Var,
    w: &LayerVars,
    view: &RegionView,
    heads: usize,
) -> Result<Var> {
    if g.value(scores).data().iter().any(|&s| s < 0.0) {
        return Err(Error::Invalid(
            "attention weights must be non-negative".into(),
        ));
    }
    layer_forward(g, f, Some(scores), w, view, heads)
}
