//! Central finite-difference verification of graph gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Rounding units assumed per loss evaluation when bounding the noise in a
/// central difference. Intermediate sums add a few units on top of the final
/// rounding of the loss.
pub const NOISE_ULPS: f64 = 4.0;

/// One checked input entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    /// `|ad - fd| / max(|fd|, 1e-8)`
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.numeric.abs().max(REL_FLOOR)
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |ad - fd| / max(|fd|, 1e-8)` over every input entry.
    pub max_rel_error: f64,
    /// `(input, entry)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub entries: Vec<GradEntry>,
    /// Loss at the unperturbed inputs.
    pub loss: f64,
    /// `NOISE_ULPS·ε·|loss| / h`, the size of the error rounding alone can put into a
    /// central difference. Entries whose gradient is not well above this
    /// cannot be resolved to a small relative error at this step.
    pub noise_floor: f64,
}

impl GradCheckReport {
    /// True when every entry satisfies
    /// `|ad - fd| <= tol·max(|fd|, 1e-8) + noise_floor`.
    pub fn within(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| {
            (e.analytic - e.numeric).abs()
                <= tol * e.numeric.abs().max(REL_FLOOR) + self.noise_floor
        })
    }

    /// Worst relative error among entries with `|fd| >= noise_floor / tol`,
    /// i.e. the ones a step of this size can resolve to `tol`.
    pub fn max_resolved_rel_error(&self, tol: f64) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.numeric.abs() >= self.noise_floor / tol)
            .map(GradEntry::rel_error)
            .fold(0.0, f64::max)
    }

    /// Entries whose relative error exceeds `tol`.
    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(move |e| e.rel_error() > tol)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarRoot {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((g.value(out).item(), grads))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, returning the worst relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, h).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (loss, grads) = analytic(&f, inputs)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: Vec::with_capacity(inputs.iter().map(Tensor::len).sum()),
        loss,
        noise_floor: NOISE_ULPS * f64::EPSILON * loss.abs() / h,
    };
    let mut probe = inputs.to_vec();
    for (k, grad) in grads.iter().enumerate() {
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + h;
            let fp = eval(&f, &probe)?;
            probe[k].data_mut()[e] = x0 - h;
            let fm = eval(&f, &probe)?;
            probe[k].data_mut()[e] = x0;
            let entry = GradEntry {
                input: k,
                index: e,
                analytic: grad.data()[e],
                numeric: (fp - fm) / (2.0 * h),
            };
            let err = entry.rel_error();
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, e));
            }
            report.entries.push(entry);
        }
    }
    Ok(report)
}

/// Directional form of the check: for each direction `v` (one tensor per
/// input) compares `∇f·v` with `(f(x + hv) - f(x - hv)) / 2h`. A random
/// direction has a derivative of the size of the whole gradient, so this
/// stays well conditioned where individual entries are lost in rounding.
/// Returns the worst `|ad - fd| / max(|fd|, 1e-8)`.
pub fn directional_check<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    directions: &[Vec<Tensor>],
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, grads) = analytic(&f, inputs)?;
    let mut worst = 0.0f64;
    for dir in directions {
        if dir.len() != inputs.len() {
            return Err(Error::Invalid(format!(
                "direction has {} tensors, expected {}",
                dir.len(),
                inputs.len()
            )));
        }
        let mut ad = 0.0;
        for ((g, d), x) in grads.iter().zip(dir).zip(inputs) {
            if d.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "directional_check",
                    lhs: d.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            ad += g
                .data()
                .iter()
                .zip(d.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        let shifted = |s: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(dir)
                .map(|(x, d)| {
                    let mut y = x.clone();
                    for (v, dv) in y.data_mut().iter_mut().zip(d.data()) {
                        *v += s * dv;
                    }
                    y
                })
                .collect()
        };
        let fd = (eval(&f, &shifted(h))? - eval(&f, &shifted(-h))?) / (2.0 * h);
        worst = worst.max((ad - fd).abs() / fd.abs().max(REL_FLOOR));
    }
    Ok(worst)
}
