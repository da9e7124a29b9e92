//! Fused multi-head region attention with optional per-token weights.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{CustomBackward, Tensor};

/// Added to the weighted denominator.
pub const EPS_ATTN: f64 = 1e-9;

/// Attention restricted to groups of row positions.
///
/// Inputs are `q, k, v` (`[n, d]`) and, when weighted, `w` (`[n, 1]`). For
/// row `i` in group `G` and head `h`:
///
/// ```text
/// e_ij  = exp(P_ij - m_i) * w_j                 (w_j = 1 when unweighted)
/// out_i = Σ_j e_ij v_j / (Σ_j e_ij + ε e^-m_i)  (ε = 0 when unweighted)
/// ```
///
/// with `P = q kᵀ / √d_head`, which is exactly
/// `Σ_j e^P_ij w_j v_j / (Σ_j e^P_ij w_j + ε)`. The shift `m_i` is the row
/// maximum over positions with `w_j > 0`; the ratio does not depend on it, so
/// it is held constant under differentiation. Rows whose group has no
/// positive weight get `m_i = 0` and output zero.
pub struct RegionAttention {
    pub groups: Rc<Vec<Vec<usize>>>,
    pub heads: usize,
    pub weighted: bool,
}

struct Dims {
    n: usize,
    d: usize,
    dh: usize,
}

impl RegionAttention {
    fn dims(&self, inputs: &[&Tensor]) -> Result<Dims> {
        let want = if self.weighted { 4 } else { 3 };
        if inputs.len() != want {
            return Err(Error::CustomArity {
                op: self.name().to_string(),
                expected: want,
                got: inputs.len(),
            });
        }
        let q = inputs[0];
        if q.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "attention",
                shape: q.shape().to_vec(),
                reason: "expected [n, d]".into(),
            });
        }
        let (n, d) = q.dims2();
        for t in &inputs[1..3] {
            if t.shape() != q.shape() {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: q.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if self.weighted && inputs[3].shape() != [n, 1] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: vec![n, 1],
                rhs: inputs[3].shape().to_vec(),
            });
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                shape: q.shape().to_vec(),
                reason: format!("width not divisible by {} heads", self.heads),
            });
        }
        for g in self.groups.iter() {
            if g.iter().any(|&p| p >= n) {
                return Err(Error::Invalid("attention group index out of range".into()));
            }
        }
        Ok(Dims {
            n,
            d,
            dh: d / self.heads,
        })
    }

    fn weight(&self, inputs: &[&Tensor], j: usize) -> f64 {
        if self.weighted {
            inputs[3].data()[j]
        } else {
            1.0
        }
    }

    /// Scores `P_ij` for one row and head, plus the shift `m_i`.
    fn row_scores(
        &self,
        inputs: &[&Tensor],
        dims: &Dims,
        group: &[usize],
        i: usize,
        h: usize,
        scores: &mut Vec<f64>,
    ) -> f64 {
        let (q, k) = (inputs[0].data(), inputs[1].data());
        let scale = 1.0 / (dims.dh as f64).sqrt();
        let off = h * dims.dh;
        let qi = &q[i * dims.d + off..i * dims.d + off + dims.dh];
        scores.clear();
        let mut m = f64::NEG_INFINITY;
        for &j in group {
            let kj = &k[j * dims.d + off..j * dims.d + off + dims.dh];
            let p = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            scores.push(p);
            if self.weight(inputs, j) > 0.0 && p > m {
                m = p;
            }
        }
        if m == f64::NEG_INFINITY {
            0.0
        } else {
            m
        }
    }
}

impl CustomBackward for RegionAttention {
    fn name(&self) -> &str {
        if self.weighted {
            "weighted_region_attention"
        } else {
            "region_attention"
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let dims = self.dims(inputs)?;
        let v = inputs[2].data();
        let eps = if self.weighted { EPS_ATTN } else { 0.0 };
        let mut out = vec![0.0; dims.n * dims.d];
        let mut scores = Vec::new();
        for group in self.groups.iter() {
            for h in 0..self.heads {
                let off = h * dims.dh;
                for &i in group {
                    let m = self.row_scores(inputs, &dims, group, i, h, &mut scores);
                    let row = &mut out[i * dims.d + off..i * dims.d + off + dims.dh];
                    let mut den = 0.0;
                    for (&j, &p) in group.iter().zip(&scores) {
                        let e = (p - m).exp() * self.weight(inputs, j);
                        den += e;
                        let vj = &v[j * dims.d + off..j * dims.d + off + dims.dh];
                        for (o, x) in row.iter_mut().zip(vj) {
                            *o += e * x;
                        }
                    }
                    // ε sits on the unshifted denominator, hence e^-m here
                    let den = den + eps * (-m).exp();
                    if den > 0.0 {
                        for o in row.iter_mut() {
                            *o /= den;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![dims.n, dims.d], out)
    }

    fn backward(&self, up: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Tensor>> {
        let dims = self.dims(inputs)?;
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (g, out) = (up.data(), output.data());
        let eps = if self.weighted { EPS_ATTN } else { 0.0 };
        let scale = 1.0 / (dims.dh as f64).sqrt();
        let mut dq = vec![0.0; dims.n * dims.d];
        let mut dk = vec![0.0; dims.n * dims.d];
        let mut dv = vec![0.0; dims.n * dims.d];
        let mut dw = vec![0.0; dims.n];
        let mut scores = Vec::new();
        let mut ex = Vec::new();
        for group in self.groups.iter() {
            for h in 0..self.heads {
                let off = h * dims.dh;
                for &i in group {
                    let m = self.row_scores(inputs, &dims, group, i, h, &mut scores);
                    ex.clear();
                    let mut den = eps * (-m).exp();
                    for (&j, &p) in group.iter().zip(&scores) {
                        let x = (p - m).exp();
                        ex.push(x);
                        den += x * self.weight(inputs, j);
                    }
                    if den <= 0.0 {
                        continue;
                    }
                    let gi = &g[i * dims.d + off..i * dims.d + off + dims.dh];
                    let oi = &out[i * dims.d + off..i * dims.d + off + dims.dh];
                    let g_out: f64 = gi.iter().zip(oi).map(|(a, b)| a * b).sum();
                    let qi = &q[i * dims.d + off..i * dims.d + off + dims.dh];
                    for (&j, &x) in group.iter().zip(&ex) {
                        let wj = self.weight(inputs, j);
                        let e = x * wj;
                        let base = j * dims.d + off;
                        let vj = &v[base..base + dims.dh];
                        let g_v: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let de = (g_v - g_out) / den;
                        if self.weighted {
                            dw[j] += de * x;
                        }
                        for c in 0..dims.dh {
                            dv[base + c] += e / den * gi[c];
                        }
                        let dp = de * e * scale;
                        if dp != 0.0 {
                            let kj = &k[base..base + dims.dh];
                            for c in 0..dims.dh {
                                dq[i * dims.d + off + c] += dp * kj[c];
                                dk[base + c] += dp * qi[c];
                            }
                        }
                    }
                }
            }
        }
        let shape = vec![dims.n, dims.d];
        let mut grads = vec![
            Tensor::new(shape.clone(), dq)?,
            Tensor::new(shape.clone(), dk)?,
            Tensor::new(shape, dv)?,
        ];
        if self.weighted {
            grads.push(Tensor::new(vec![dims.n, 1], dw)?);
        }
        Ok(grads)
    }
}
