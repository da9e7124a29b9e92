//! Detection head on the BEV map and the training losses.

use std::fmt;

use crate::error::{Error, Result};
use crate::halting::HaltRecord;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scene::{BBox, GridSpec, Heatmap, POSITIVE_EPS};
use crate::tensor::{randn, Graph, Tensor, Var};

/// Focal exponent on the prediction.
pub const FOCAL_ALPHA: i32 = 2;
/// Focal exponent on `1 - m` for negatives.
pub const FOCAL_GAMMA: i32 = 4;
/// Probability clamp before logs.
pub const PROB_EPS: f64 = 1e-4;
/// Box parameters per cell: dx, dy, z, log wx, log wy, log wz, sin, cos.
pub const BOX_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub boxes: f64,
    pub heat: f64,
    pub sparse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            boxes: 2.0,
            heat: 1.0,
            sparse: 0.5,
        }
    }
}

/// Which sparsity penalty to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SparsityKind {
    /// Focal penalty driven by the ground-truth heatmap.
    #[default]
    NonUniform,
    /// Mean score over active tokens.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_heat: f64,
    pub l_sparse: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_box,l_heat,l_sparse,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{}",
            self.l_box, self.l_heat, self.l_sparse, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_box, self.l_heat, self.l_sparse, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.5} (box {:.5}, heat {:.5}, sparse {:.5})",
            self.total, self.l_box, self.l_heat, self.l_sparse
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadWeights {
    pub channels: usize,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub center_w: ParamId,
    pub center_b: ParamId,
    pub box_w: ParamId,
    pub box_b: ParamId,
}

/// Initial center bias; `sigmoid(-4) ≈ 0.018`, close to the positive rate.
pub const CENTER_BIAS_INIT: f64 = -4.0;

impl HeadWeights {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = channels;
        let mut add = |name: &str, t: Tensor| store.add(&format!("{prefix}.{name}"), t);
        Ok(Self {
            channels,
            conv1_w: add(
                "conv1.w",
                randn(
                    &[3, 3, d_model, c],
                    (2.0 / (9 * d_model) as f64).sqrt(),
                    rng,
                ),
            )?,
            conv1_b: add("conv1.b", Tensor::zeros(&[c]))?,
            conv2_w: add(
                "conv2.w",
                randn(&[3, 3, c, c], (2.0 / (9 * c) as f64).sqrt(), rng),
            )?,
            conv2_b: add("conv2.b", Tensor::zeros(&[c]))?,
            center_w: add("center.w", randn(&[c, 1], 0.01, rng))?,
            center_b: add("center.b", Tensor::full(&[1], CENTER_BIAS_INIT))?,
            box_w: add("box.w", randn(&[c, BOX_CHANNELS], 0.01, rng))?,
            box_b: add("box.b", Tensor::zeros(&[BOX_CHANNELS]))?,
        })
    }
}

/// Head outputs flattened over the grid in row-major cell order.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[H·W, 1]`
    pub center_logits: Var,
    /// `[H·W, BOX_CHANNELS]`
    pub box_params: Var,
}

/// Two 3×3 conv + relu stages followed by 1×1 center and box heads.
pub fn detect_head(g: &mut Graph, bev: Var, w: &HeadWeights, b: &Bound) -> Result<HeadOutput> {
    let shape = g.value(bev).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "detect_head",
            shape,
            reason: "expected [h, w, d]".into(),
        });
    }
    let x = g.conv2d(bev, b[w.conv1_w], b[w.conv1_b], 1)?;
    let x = g.relu(x)?;
    let x = g.conv2d(x, b[w.conv2_w], b[w.conv2_b], 1)?;
    let x = g.relu(x)?;
    let flat = g.reshape(x, &[shape[0] * shape[1], w.channels])?;
    Ok(HeadOutput {
        center_logits: g.linear(flat, b[w.center_w], b[w.center_b])?,
        box_params: g.linear(flat, b[w.box_w], b[w.box_b])?,
    })
}

/// Penalized focal loss of `sigmoid(logits)` against the heatmap, divided by
/// `max(1, positives)`.
pub fn loss_heatmap(g: &mut Graph, center_logits: Var, heat: &Heatmap) -> Result<Var> {
    let n = heat.values.len();
    if g.value(center_logits).len() != n {
        return Err(Error::ShapeMismatch {
            op: "loss_heatmap",
            lhs: g.value(center_logits).shape().to_vec(),
            rhs: vec![n],
        });
    }
    let logits = g.reshape(center_logits, &[n, 1])?;
    let p = g.sigmoid(logits)?;
    focal_terms(
        g,
        p,
        &heat.values,
        &vec![true; n],
        heat.positives().len().max(1) as f64,
    )
}

/// `-Σ_i [pos_i (1-p)^α log p + neg_i (1-m)^γ p^α log(1-p)] / norm` over
/// selected rows, with `p` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
fn focal_terms(g: &mut Graph, p: Var, m: &[f64], select: &[bool], norm: f64) -> Result<Var> {
    let n = m.len();
    let mut pos_w = vec![0.0; n];
    let mut neg_w = vec![0.0; n];
    for i in 0..n {
        if !select[i] {
            continue;
        }
        if m[i] >= 1.0 - POSITIVE_EPS {
            pos_w[i] = -1.0 / norm;
        } else {
            neg_w[i] = -(1.0 - m[i]).powi(FOCAL_GAMMA) / norm;
        }
    }
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = g.one_minus(p)?;
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let q2 = g.mul(q, q)?;
    let p2 = g.mul(p, p)?;
    let pos = g.mul(q2, log_p)?;
    let neg = g.mul(p2, log_q)?;
    let pw = g.constant(Tensor::column(pos_w));
    let nw = g.constant(Tensor::column(neg_w));
    let pos = g.mul(pos, pw)?;
    let neg = g.mul(neg, nw)?;
    let both = g.add(pos, neg)?;
    g.sum(both)
}

/// Regression targets per cell; `None` for cells that are not positive.
pub fn box_targets(
    boxes: &[BBox],
    grid: &GridSpec,
    heat: &Heatmap,
) -> Vec<(usize, [f64; BOX_CHANNELS])> {
    let n = grid.cells();
    heat.positives()
        .into_iter()
        .filter_map(|cell| {
            let (cx, cy) = grid.cell_center([cell % n, cell / n]);
            let b = boxes.iter().min_by(|a, b| {
                let da = (a.lx - cx).powi(2) + (a.ly - cy).powi(2);
                let db = (b.lx - cx).powi(2) + (b.ly - cy).powi(2);
                da.total_cmp(&db)
            })?;
            Some((cell, encode_box(b, cx, cy, grid.voxel_m)))
        })
        .collect()
}

/// `[dx/v, dy/v, z, ln wx, ln wy, ln wz, sin α, cos α]` relative to the cell
/// center `(cx, cy)`.
pub fn encode_box(b: &BBox, cx: f64, cy: f64, voxel_m: f64) -> [f64; BOX_CHANNELS] {
    [
        (b.lx - cx) / voxel_m,
        (b.ly - cy) / voxel_m,
        b.lz,
        b.wx.ln(),
        b.wy.ln(),
        b.wz.ln(),
        b.alpha.sin(),
        b.alpha.cos(),
    ]
}

/// Mean absolute error over positive cells and all box channels; zero when
/// there is no positive cell.
pub fn loss_box(
    g: &mut Graph,
    box_params: Var,
    targets: &[(usize, [f64; BOX_CHANNELS])],
) -> Result<Var> {
    if targets.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let cells: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let pred = g.gather_rows(box_params, &cells)?;
    let tgt = Tensor::new(
        vec![cells.len(), BOX_CHANNELS],
        targets.iter().flat_map(|t| t.1).collect(),
    )?;
    let tgt = g.constant(tgt);
    let diff = g.sub(pred, tgt)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}

/// Sparsity penalty summed over halting modules. Each module averages over
/// the tokens active before it; a module with no active token adds zero.
pub fn loss_sparsity(
    g: &mut Graph,
    scores: &[Var],
    records: &[HaltRecord],
    token_heat: &[f64],
    kind: SparsityKind,
) -> Result<Var> {
    if scores.len() != records.len() {
        return Err(Error::Invalid(format!(
            "{} score nodes for {} halting records",
            scores.len(),
            records.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&s, rec) in scores.iter().zip(records) {
        let active = rec.active.iter().filter(|&&a| a).count();
        if active == 0 {
            continue;
        }
        if rec.active.len() != token_heat.len() || g.value(s).len() != token_heat.len() {
            return Err(Error::ShapeMismatch {
                op: "loss_sparsity",
                lhs: g.value(s).shape().to_vec(),
                rhs: vec![token_heat.len()],
            });
        }
        let term = match kind {
            SparsityKind::NonUniform => focal_terms(g, s, token_heat, &rec.active, active as f64)?,
            SparsityKind::Uniform => {
                let w = Tensor::column(
                    rec.active
                        .iter()
                        .map(|&a| if a { 1.0 / active as f64 } else { 0.0 })
                        .collect(),
                );
                let w = g.constant(w);
                let ws = g.mul(s, w)?;
                g.sum(ws)?
            }
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Weighted sum of the three components.
pub fn total_loss(
    g: &mut Graph,
    l_box: Var,
    l_heat: Var,
    l_sparse: Var,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let a = g.scale(l_box, weights.boxes)?;
    let b = g.scale(l_heat, weights.heat)?;
    let c = g.scale(l_sparse, weights.sparse)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    let breakdown = LossBreakdown {
        l_box: g.value(l_box).item(),
        l_heat: g.value(l_heat).item(),
        l_sparse: g.value(l_sparse).item(),
        total: g.value(total).item(),
        weights,
    };
    Ok((total, breakdown))
}
