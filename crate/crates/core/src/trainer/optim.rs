//! AdamW, the one-cycle schedule and global-norm clipping.

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from `start` to `peak` over steps `0..=warmup`, then cosine
/// decay to `floor` at step `total - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub start: f64,
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl OneCycle {
    /// Warmup ends at step `floor(fraction · (total - 1))`.
    pub fn new(start: f64, peak: f64, floor: f64, warmup_fraction: f64, total: usize) -> Self {
        let last = total.saturating_sub(1);
        let warmup = ((warmup_fraction * last as f64).floor() as usize).min(last);
        Self {
            start,
            peak,
            floor,
            warmup,
            total,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let last = self.total.saturating_sub(1);
        if step < self.warmup {
            // written so that step == warmup lands on `peak` exactly
            let rest = (self.warmup - step) as f64 / self.warmup as f64;
            self.peak - (self.peak - self.start) * rest
        } else if step == self.warmup && step < last {
            self.peak
        } else if step >= last {
            if self.total <= 1 {
                self.peak
            } else {
                self.floor
            }
        } else {
            let t = (step - self.warmup) as f64 / (last - self.warmup) as f64;
            self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay. Decay skips vectors (biases, norms).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let decay = if p.rank() >= 2 {
                lr * self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= decay * *w + lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}
