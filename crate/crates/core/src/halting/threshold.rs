use crate::error::{Error, Result};

/// Nearest-rank quantile on an ascending list: the smallest value `q` such
/// that at least `ceil(alpha · n)` entries lie strictly below it when values
/// are distinct. `alpha <= 0` gives `-inf`; ranks at or past the end give
/// `+inf`, so `alpha = 1` halts everything.
pub fn quantile(sorted: &[f64], alpha: f64) -> f64 {
    if alpha <= 0.0 || sorted.is_empty() {
        return f64::NEG_INFINITY;
    }
    let n = sorted.len();
    // guard against `0.8 * 10 = 8.000000000000002`
    let rank = (alpha * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if rank >= n {
        f64::INFINITY
    } else {
        sorted[rank]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdOutcome {
    pub mask: Vec<bool>,
    pub threshold: f64,
}

/// `threshold = clamp(u, Q(alpha_lo), Q(alpha_hi))` over the scores of
/// active tokens; active tokens with `s >= threshold` are kept, inactive
/// tokens stay masked. With no active token the mask is all-zero and the
/// threshold is `u`.
pub fn threshold(
    scores: &[f64],
    u: f64,
    alpha_lo: f64,
    alpha_hi: f64,
    active: &[bool],
) -> Result<ThresholdOutcome> {
    if scores.len() != active.len() {
        return Err(Error::ShapeMismatch {
            op: "threshold",
            lhs: vec![scores.len()],
            rhs: vec![active.len()],
        });
    }
    if !(0.0..=1.0).contains(&alpha_lo) || !(0.0..=1.0).contains(&alpha_hi) || alpha_lo > alpha_hi {
        return Err(Error::Invalid(format!(
            "threshold bounds must satisfy 0 <= lo <= hi <= 1, got ({alpha_lo}, {alpha_hi})"
        )));
    }
    let mut live: Vec<f64> = scores
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .collect();
    if live.is_empty() {
        return Ok(ThresholdOutcome {
            mask: vec![false; scores.len()],
            threshold: u,
        });
    }
    live.sort_by(f64::total_cmp);
    let lo = quantile(&live, alpha_lo);
    let hi = quantile(&live, alpha_hi);
    let t = u.max(lo).min(hi);
    Ok(ThresholdOutcome {
        mask: scores
            .iter()
            .zip(active)
            .map(|(&s, &a)| a && s >= t)
            .collect(),
        threshold: t,
    })
}
