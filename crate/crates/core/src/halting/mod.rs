//! Halting score modules, quantile-clamped thresholds and the
//! straight-through mask.

mod threshold;

use std::rc::Rc;

pub use threshold::{quantile, threshold, ThresholdOutcome};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{randn, CustomBackward, Graph, Tensor, Var};

/// Features beyond this index are ignored by the score modules.
pub const SCORE_INPUT_FEATURES: usize = 32;

/// Default threshold `u`.
pub const DEFAULT_U: f64 = 0.01;

/// Per-module halting threshold and quantile bounds on the halted fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltConfig {
    pub u: f64,
    /// `(alpha_lo, alpha_hi)` per halting module.
    pub bounds: Vec<(f64, f64)>,
}

impl Default for HaltConfig {
    fn default() -> Self {
        Self {
            u: DEFAULT_U,
            bounds: vec![(0.8, 0.9), (0.9, 0.99)],
        }
    }
}

impl HaltConfig {
    /// Thresholding with `u` alone.
    pub fn unclamped(u: f64, modules: usize) -> Self {
        Self {
            u,
            bounds: vec![(0.0, 1.0); modules],
        }
    }

    /// Forces the halted fraction of each module into `[a, a]`.
    pub fn fixed_fractions(fractions: &[f64]) -> Self {
        Self {
            u: DEFAULT_U,
            bounds: fractions.iter().map(|&a| (a, a)).collect(),
        }
    }

    pub fn validate(&self, modules: usize) -> Result<()> {
        if !(self.u.is_finite()) {
            return Err(Error::Config {
                key: "halt.u".into(),
                msg: "must be finite".into(),
            });
        }
        if self.bounds.len() != modules {
            return Err(Error::Invalid(format!(
                "{} bound pairs for {modules} halting modules",
                self.bounds.len()
            )));
        }
        for (m, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config {
                    key: format!("halt.alpha_lo_{}", m + 1),
                    msg: format!("need 0 <= alpha_lo <= alpha_hi <= 1, got ({lo}, {hi})"),
                });
            }
        }
        Ok(())
    }
}

/// State of one halting module for one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltRecord {
    /// Index of the attention layer the module runs before (0-based).
    pub layer: usize,
    /// Score per token; zero for tokens that were already halted.
    pub scores: Vec<f64>,
    /// Cumulative mask before this module.
    pub active: Vec<bool>,
    pub mask: Vec<bool>,
    /// Cumulative mask after this module.
    pub cumulative: Vec<bool>,
    pub threshold: f64,
}

impl HaltRecord {
    pub fn newly_halted(&self) -> usize {
        self.active
            .iter()
            .zip(&self.cumulative)
            .filter(|(&a, &c)| a && !c)
            .count()
    }

    /// Halted fraction among tokens active before the module.
    pub fn sparsity(&self) -> f64 {
        let active = self.active.iter().filter(|&&a| a).count();
        if active == 0 {
            0.0
        } else {
            self.newly_halted() as f64 / active as f64
        }
    }
}

/// Returns the first mismatch between two record lists as a structured error.
pub fn compare_records(a: &[HaltRecord], b: &[HaltRecord]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::HaltMismatch {
            layer: a.len().min(b.len()),
            token: 0,
            detail: format!("{} vs {} halting records", a.len(), b.len()),
        });
    }
    for (ra, rb) in a.iter().zip(b) {
        let layer = ra.layer;
        if ra.scores.len() != rb.scores.len() {
            return Err(Error::HaltMismatch {
                layer,
                token: 0,
                detail: format!("{} vs {} tokens", ra.scores.len(), rb.scores.len()),
            });
        }
        for i in 0..ra.scores.len() {
            let checks = [
                ("active", ra.active[i], rb.active[i]),
                ("mask", ra.mask[i], rb.mask[i]),
                ("cumulative", ra.cumulative[i], rb.cumulative[i]),
            ];
            for (what, x, y) in checks {
                if x != y {
                    return Err(Error::HaltMismatch {
                        layer,
                        token: i,
                        detail: format!("{what} {x} vs {y}"),
                    });
                }
            }
            let (sa, sb) = (ra.scores[i], rb.scores[i]);
            if (sa - sb).abs() > 1e-12 {
                return Err(Error::HaltMismatch {
                    layer,
                    token: i,
                    detail: format!("score {sa} vs {sb}"),
                });
            }
        }
        if ra.threshold.to_bits() != rb.threshold.to_bits()
            && (ra.threshold - rb.threshold).abs() > 1e-12
        {
            return Err(Error::HaltMismatch {
                layer,
                token: 0,
                detail: format!("threshold {} vs {}", ra.threshold, rb.threshold),
            });
        }
    }
    Ok(())
}

/// Straight-through mask: forward yields the stored binary mask, backward
/// passes the upstream gradient to the scores unchanged.
struct Ste {
    mask: Tensor,
}

impl CustomBackward for Ste {
    fn name(&self) -> &str {
        "ste"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != 1 || inputs[0].shape() != self.mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "ste",
                lhs: self.mask.shape().to_vec(),
                rhs: inputs
                    .first()
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_default(),
            });
        }
        Ok(self.mask.clone())
    }

    fn backward(&self, up: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![up.clone()])
    }
}

/// Node whose value is `mask` and whose gradient flows to `scores` as if it
/// were the identity.
pub fn ste_apply(g: &mut Graph, scores: Var, mask: &[bool]) -> Result<Var> {
    let shape = g.value(scores).shape().to_vec();
    let mask = Tensor::new(
        shape,
        mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
    )?;
    g.custom(Rc::new(Ste { mask }), &[scores])
}

/// Parameters of the convolutional encoder-decoder module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseHaltWeights {
    pub channels: usize,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub enc1_w: ParamId,
    pub enc1_b: ParamId,
    pub enc2_w: ParamId,
    pub enc2_b: ParamId,
    pub dec1_w: ParamId,
    pub dec1_b: ParamId,
    pub dec2_w: ParamId,
    pub dec2_b: ParamId,
    pub score_w: ParamId,
    pub score_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

fn conv_init(cin: usize, cout: usize, rng: &mut Rng) -> Tensor {
    randn(&[3, 3, cin, cout], (2.0 / (9 * cin) as f64).sqrt(), rng)
}

impl DenseHaltWeights {
    /// `d_model` token width, `channels` encoder width. The latent has
    /// `channels` features.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config {
                key: "halt.module1_channels".into(),
                msg: "must be positive".into(),
            });
        }
        let din = d_model.min(SCORE_INPUT_FEATURES);
        let c = channels;
        let mut add = |name: &str, t: Tensor| store.add(&format!("{prefix}.{name}"), t);
        Ok(Self {
            channels,
            proj_w: add("proj.w", randn(&[din, c], (1.0 / din as f64).sqrt(), rng))?,
            proj_b: add("proj.b", Tensor::zeros(&[c]))?,
            enc1_w: add("enc1.w", conv_init(c, c, rng))?,
            enc1_b: add("enc1.b", Tensor::zeros(&[c]))?,
            enc2_w: add("enc2.w", conv_init(c, 2 * c, rng))?,
            enc2_b: add("enc2.b", Tensor::zeros(&[2 * c]))?,
            dec1_w: add("dec1.w", conv_init(3 * c, c, rng))?,
            dec1_b: add("dec1.b", Tensor::zeros(&[c]))?,
            dec2_w: add("dec2.w", conv_init(2 * c, c, rng))?,
            dec2_b: add("dec2.b", Tensor::zeros(&[c]))?,
            score_w: add("score.w", randn(&[c, 1], 0.1, rng))?,
            score_b: add("score.b", Tensor::zeros(&[1]))?,
            fuse_w: add("fuse.w", randn(&[c, d_model], 0.1 / (c as f64).sqrt(), rng))?,
            fuse_b: add("fuse.b", Tensor::zeros(&[d_model]))?,
        })
    }

    pub fn zero_score_head(&self, store: &mut ParamStore) {
        store.get_mut(self.score_w).data_mut().fill(0.0);
        store.get_mut(self.score_b).data_mut().fill(0.0);
    }
}

/// Parameters of the single-linear module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpHaltWeights {
    pub w: ParamId,
    pub b: ParamId,
}

impl MlpHaltWeights {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let din = d_model.min(SCORE_INPUT_FEATURES);
        Ok(Self {
            w: store.add(
                &format!("{prefix}.w"),
                randn(&[din, 1], 0.1 / (din as f64).sqrt(), rng),
            )?,
            b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[1]))?,
        })
    }
}

fn score_input(g: &mut Graph, tokens: Var) -> Result<Var> {
    let d = g.value(tokens).shape()[1];
    if d > SCORE_INPUT_FEATURES {
        g.slice_cols(tokens, 0, SCORE_INPUT_FEATURES)
    } else {
        Ok(tokens)
    }
}

/// Scores (`[n, 1]`) and latent features (`[n, channels]`) from the
/// encoder-decoder over the BEV grid.
///
/// Tokens are projected, scattered onto the `cells × cells` grid (empty
/// cells zero), encoded by two stride-2 convolutions, decoded by two
/// upsample + skip-concat + convolution stages, and read back at each
/// token's cell.
pub fn score_module_dense(
    g: &mut Graph,
    tokens: Var,
    cell_index: &[usize],
    cells: usize,
    w: &DenseHaltWeights,
    b: &Bound,
) -> Result<(Var, Var)> {
    let c = w.channels;
    let x = score_input(g, tokens)?;
    let proj = g.linear(x, b[w.proj_w], b[w.proj_b])?;
    let grid = g.scatter_rows(proj, cell_index, cells * cells)?;
    let grid = g.reshape(grid, &[cells, cells, c])?;
    let e1 = g.conv2d(grid, b[w.enc1_w], b[w.enc1_b], 2)?;
    let e1 = g.relu(e1)?;
    let e2 = g.conv2d(e1, b[w.enc2_w], b[w.enc2_b], 2)?;
    let e2 = g.relu(e2)?;
    let (h1, w1) = (g.value(e1).shape()[0], g.value(e1).shape()[1]);
    let u1 = g.upsample2x(e2, h1, w1)?;
    let d1 = g.concat(&[u1, e1], 2)?;
    let d1 = g.conv2d(d1, b[w.dec1_w], b[w.dec1_b], 1)?;
    let d1 = g.relu(d1)?;
    let u2 = g.upsample2x(d1, cells, cells)?;
    let d2 = g.concat(&[u2, grid], 2)?;
    let d2 = g.conv2d(d2, b[w.dec2_w], b[w.dec2_b], 1)?;
    let d2 = g.relu(d2)?;
    let flat = g.reshape(d2, &[cells * cells, c])?;
    let latent = g.gather_rows(flat, cell_index)?;
    let logit = g.linear(latent, b[w.score_w], b[w.score_b])?;
    let scores = g.sigmoid(logit)?;
    Ok((scores, latent))
}

/// `sigmoid(first-32-features · w + b)` as `[n, 1]`.
pub fn score_module_mlp(g: &mut Graph, tokens: Var, w: &MlpHaltWeights, b: &Bound) -> Result<Var> {
    let x = score_input(g, tokens)?;
    let logit = g.linear(x, b[w.w], b[w.b])?;
    g.sigmoid(logit)
}

/// `tokens + latent · W + b`.
pub fn fuse_latent(
    g: &mut Graph,
    tokens: Var,
    latent: Var,
    fuse_w: Var,
    fuse_b: Var,
) -> Result<Var> {
    let y = g.linear(latent, fuse_w, fuse_b)?;
    g.add(tokens, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ste_gradient_is_identity() {
        let mut g = Graph::new();
        let s = g.param(Tensor::column(vec![0.3, 0.8, 0.01]));
        let k = ste_apply(&mut g, s, &[false, true, false]).unwrap();
        assert_eq!(g.value(k).data(), &[0.0, 1.0, 0.0]);
        let tot = g.sum(k).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ste_product_rule() {
        let mut g = Graph::new();
        let s = g.param(Tensor::column(vec![0.3]));
        let k = ste_apply(&mut g, s, &[false]).unwrap();
        let sk = g.mul(s, k).unwrap();
        let tot = g.sum(sk).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[0.3]);
    }

    #[test]
    fn zero_heads_give_half() {
        let mut r = rng::stream(1, "t");
        let mut store = ParamStore::new();
        let dense = DenseHaltWeights::register(&mut store, "h1", 32, 4, &mut r).unwrap();
        let mlp = MlpHaltWeights::register(&mut store, "h2", 32, &mut r).unwrap();
        dense.zero_score_head(&mut store);
        store.get_mut(mlp.w).data_mut().fill(0.0);
        let mut g = Graph::new();
        let b = store.bind_constant(&mut g);
        let toks = g.constant(randn(&[3, 32], 1.0, &mut r));
        let (s, lat) = score_module_dense(&mut g, toks, &[0, 17, 63], 8, &dense, &b).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
        assert_eq!(g.value(lat).shape(), &[3, 4]);
        let s2 = score_module_mlp(&mut g, toks, &mlp, &b).unwrap();
        assert!(g.value(s2).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn narrow_model_uses_all_features() {
        let mut r = rng::stream(2, "t");
        let mut store = ParamStore::new();
        let mlp = MlpHaltWeights::register(&mut store, "h2", 8, &mut r).unwrap();
        assert_eq!(store.get(mlp.w).shape(), &[8, 1]);
        let wide = MlpHaltWeights::register(&mut store, "h3", 48, &mut r).unwrap();
        assert_eq!(store.get(wide.w).shape(), &[32, 1]);
    }

    #[test]
    fn fusion_identities() {
        let mut r = rng::stream(3, "t");
        let f = randn(&[4, 6], 1.0, &mut r);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let lat = g.constant(randn(&[4, 3], 1.0, &mut r));
        let zw = g.constant(Tensor::zeros(&[3, 6]));
        let zb = g.constant(Tensor::zeros(&[6]));
        let out = fuse_latent(&mut g, fv, lat, zw, zb).unwrap();
        assert_eq!(g.value(out), &f);
        let zl = g.constant(Tensor::zeros(&[4, 3]));
        let w = g.constant(randn(&[3, 6], 1.0, &mut r));
        let bias = Tensor::full(&[6], 0.25);
        let bv = g.constant(bias);
        let out = fuse_latent(&mut g, fv, zl, w, bv).unwrap();
        assert_eq!(g.value(out), &f.map(|v| v + 0.25));
    }

    #[test]
    fn compare_records_names_token() {
        let rec = HaltRecord {
            layer: 2,
            scores: vec![0.5, 0.6],
            active: vec![true, true],
            mask: vec![true, false],
            cumulative: vec![true, false],
            threshold: 0.55,
        };
        let mut other = rec.clone();
        other.mask[1] = true;
        other.cumulative[1] = true;
        match compare_records(&[rec.clone()], &[other]) {
            Err(Error::HaltMismatch { layer, token, .. }) => {
                assert_eq!((layer, token), (2, 1));
            }
            r => panic!("unexpected {r:?}"),
        }
        assert!(compare_records(&[rec.clone()], &[rec]).is_ok());
    }
}
