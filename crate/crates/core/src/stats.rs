//! Small weighted-statistics helpers shared across modules.

use crate::error::{Error, Result};

/// Relative slack used when comparing cumulative weight shares against a
/// probability level, so that e.g. 99/100 compares equal to `1 - 0.01`.
pub(crate) const SHARE_EPS: f64 = 1e-12;

fn sorted_pairs(values: &[f64], weights: Option<&[f64]>) -> Result<(Vec<(f64, f64)>, f64)> {
    if let Some(w) = weights {
        if w.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "weights length {} != values length {}",
                w.len(),
                values.len()
            )));
        }
    }
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .map(|(i, &v)| (v, weights.map_or(1.0, |w| w[i])))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty("no non-missing values".into()));
    }
    if pairs.iter().any(|&(_, w)| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    Ok((pairs, total))
}

/// Left-continuous weighted quantile: `inf { x : F_w(x) >= p }`.
pub fn weighted_quantile(values: &[f64], weights: Option<&[f64]>, p: f64) -> Result<f64> {
    let (pairs, total) = sorted_pairs(values, weights)?;
    let target = p * total - SHARE_EPS * total;
    let mut cum = 0.0;
    for (i, &(v, w)) in pairs.iter().enumerate() {
        cum += w;
        let last_of_tie = i + 1 == pairs.len() || pairs[i + 1].0 != v;
        if last_of_tie && cum >= target && cum > 0.0 {
            return Ok(v);
        }
    }
    Ok(pairs[pairs.len() - 1].0)
}

/// Smallest value whose weighted CDF strictly exceeds `p`: `inf { x : F_w(x) > p }`.
/// Returns `None` when no such value exists (p >= 1).
pub fn weighted_quantile_above(values: &[f64], weights: Option<&[f64]>, p: f64) -> Result<Option<f64>> {
    let (pairs, total) = sorted_pairs(values, weights)?;
    let target = p * total + SHARE_EPS * total;
    let mut cum = 0.0;
    for (i, &(v, w)) in pairs.iter().enumerate() {
        cum += w;
        let last_of_tie = i + 1 == pairs.len() || pairs[i + 1].0 != v;
        if last_of_tie && cum > target {
            return Ok(Some(v));
        }
    }
    Ok(None)
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    let mut sw = 0.0;
    let mut swx = 0.0;
    for (&v, &w) in values.iter().zip(weights) {
        if v.is_nan() {
            continue;
        }
        sw += w;
        swx += w * v;
    }
    if sw <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    Ok(swx / sw)
}

/// Pearson correlation of two equal-length series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("series lengths differ".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ZeroVariance("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
