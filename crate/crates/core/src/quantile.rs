//! Quantile regression and distributional effect profiles.
//!
//! The check-loss problem is solved on its linear-programming dual by a
//! primal-dual interior-point method, then moved to an exact vertex and
//! finished with simplex pivots. Among tied optima the lexicographically
//! smallest coefficient vector is returned, which for an intercept-only fit
//! is the left-continuous weighted quantile.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{self, pinv_sym, symmetrize};
use crate::panel::{fmt_f64, PanelDataset};
use crate::regress::{design_names, encode, prepare, sample_keys, wls_fit, FitResult, ModelSpec};
use crate::stats::weighted_quantile;

const IPM_MAX_ITER: usize = 200;
const IPM_GAP_TOL: f64 = 1e-12;
const STEP_FRACTION: f64 = 0.99995;
const MAX_PIVOTS: usize = 20_000;
/// Relative slack on directional derivatives, matching the quantile helper.
const SLOPE_TOL: f64 = 1e-12;

pub fn check_loss(r: f64, tau: f64) -> f64 {
    if r < 0.0 { (tau - 1.0) * r } else { tau * r }
}

fn psi(r: f64, tau: f64) -> f64 {
    if r < 0.0 { tau - 1.0 } else { tau }
}

pub fn objective(x: &DMatrix<f64>, y: &[f64], w: &[f64], tau: f64, b: &DVector<f64>) -> f64 {
    let fit = x * b;
    (0..y.len()).map(|i| w[i] * check_loss(y[i] - fit[i], tau)).sum()
}

/// Primal-dual interior point on
/// `max y'a  s.t.  X'a = (1 - tau) X'w,  0 <= a <= w`,
/// whose multipliers are the quantile coefficients.
fn interior_point(x: &DMatrix<f64>, y: &[f64], w: &[f64], tau: f64, start: &DVector<f64>) -> (DVector<f64>, usize) {
    let n = y.len();
    let yv = DVector::from_column_slice(y);
    let mut a: Vec<f64> = w.iter().map(|wi| (1.0 - tau) * wi).collect();
    let mut s: Vec<f64> = w.iter().map(|wi| tau * wi).collect();
    let mut beta = start.clone();
    let r0 = &yv - x * &beta;
    let spread = r0.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let delta = 0.1 * spread.max(1e-8 * yv.amax().max(1.0));
    // dual slacks with v - z = y - X beta
    let mut z: Vec<f64> = r0.iter().map(|&r| (-r).max(0.0) + delta).collect();
    let mut v: Vec<f64> = r0.iter().map(|&r| r.max(0.0) + delta).collect();

    let solve = |d: &[f64], rho: &[f64]| -> Option<(DVector<f64>, Vec<f64>)> {
        // (X' D X) dbeta = -X' (D rho); dx = D (-X dbeta - rho)
        let k = x.ncols();
        let mut m = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for i in 0..n {
            let xi = x.row(i);
            m += xi.transpose() * xi * d[i];
            rhs -= xi.transpose() * (d[i] * rho[i]);
        }
        let db = m.cholesky()?.solve(&rhs);
        let xdb = x * &db;
        let dx = (0..n).map(|i| d[i] * (-xdb[i] - rho[i])).collect();
        Some((db, dx))
    };
    let max_step = |val: &[f64], dir: &[f64]| -> f64 {
        val.iter()
            .zip(dir)
            .filter(|(_, d)| **d < 0.0)
            .map(|(v, d)| -v / d)
            .fold(1.0_f64, f64::min)
    };

    let mut iters = 0;
    while iters < IPM_MAX_ITER {
        let gap: f64 = (0..n).map(|i| a[i] * z[i] + s[i] * v[i]).sum();
        let scale = 1.0 + a.iter().zip(y).map(|(ai, yi)| ai * yi).sum::<f64>().abs();
        if gap <= IPM_GAP_TOL * scale {
            break;
        }
        iters += 1;
        let mu = gap / (2 * n) as f64;
        let d: Vec<f64> = (0..n).map(|i| 1.0 / (z[i] / a[i] + v[i] / s[i])).collect();

        // predictor
        let rho: Vec<f64> = (0..n).map(|i| z[i] - v[i]).collect();
        let Some((_, dx_aff)) = solve(&d, &rho) else { break };
        let ds_aff: Vec<f64> = dx_aff.iter().map(|v| -v).collect();
        let dz_aff: Vec<f64> = (0..n).map(|i| (-a[i] * z[i] - z[i] * dx_aff[i]) / a[i]).collect();
        let dv_aff: Vec<f64> = (0..n).map(|i| (-s[i] * v[i] + v[i] * dx_aff[i]) / s[i]).collect();
        let ap = max_step(&a, &dx_aff).min(max_step(&s, &ds_aff));
        let ad = max_step(&z, &dz_aff).min(max_step(&v, &dv_aff));
        let mu_aff: f64 = (0..n)
            .map(|i| (a[i] + ap * dx_aff[i]) * (z[i] + ad * dz_aff[i]) + (s[i] + ap * ds_aff[i]) * (v[i] + ad * dv_aff[i]))
            .sum::<f64>()
            / (2 * n) as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);

        // corrector
        let r_az: Vec<f64> = (0..n).map(|i| sigma * mu - a[i] * z[i] - dx_aff[i] * dz_aff[i]).collect();
        let r_sv: Vec<f64> = (0..n).map(|i| sigma * mu - s[i] * v[i] - ds_aff[i] * dv_aff[i]).collect();
        let rho: Vec<f64> = (0..n).map(|i| -r_az[i] / a[i] + r_sv[i] / s[i]).collect();
        let Some((db, dx)) = solve(&d, &rho) else { break };
        let ds: Vec<f64> = dx.iter().map(|v| -v).collect();
        let dz: Vec<f64> = (0..n).map(|i| (r_az[i] - z[i] * dx[i]) / a[i]).collect();
        let dv: Vec<f64> = (0..n).map(|i| (r_sv[i] + v[i] * dx[i]) / s[i]).collect();
        let ap = (STEP_FRACTION * max_step(&a, &dx).min(max_step(&s, &ds))).min(1.0);
        let ad = (STEP_FRACTION * max_step(&z, &dz).min(max_step(&v, &dv))).min(1.0);
        for i in 0..n {
            a[i] += ap * dx[i];
            s[i] += ap * ds[i];
            z[i] += ad * dz[i];
            v[i] += ad * dv[i];
        }
        beta += db * ad;
    }
    (beta, iters)
}

/// Indices of `k` observations with the smallest absolute residuals whose
/// design rows are linearly independent.
fn crossover_basis(x: &DMatrix<f64>, resid: &[f64]) -> Option<Vec<usize>> {
    let k = x.ncols();
    let mut order: Vec<usize> = (0..resid.len()).collect();
    order.sort_by(|&i, &j| resid[i].abs().total_cmp(&resid[j].abs()).then(i.cmp(&j)));
    let mut basis = vec![];
    let mut q: Vec<DVector<f64>> = vec![];
    for i in order {
        let row = x.row(i).transpose();
        let norm0 = row.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for _ in 0..2 {
            for u in &q {
                let c = u.dot(&v);
                v.axpy(-c, u, 1.0);
            }
        }
        let nv = v.norm();
        if nv > 1e-8 * norm0 {
            q.push(v / nv);
            basis.push(i);
            if basis.len() == k {
                return Some(basis);
            }
        }
    }
    None
}

struct Vertex {
    basis: Vec<usize>,
    inv: DMatrix<f64>,
    beta: DVector<f64>,
    resid: Vec<f64>,
}

fn vertex(x: &DMatrix<f64>, y: &[f64], basis: Vec<usize>) -> Option<Vertex> {
    let k = x.ncols();
    let xh = DMatrix::from_fn(k, k, |i, j| x[(basis[i], j)]);
    let inv = xh.try_inverse()?;
    let yh = DVector::from_iterator(k, basis.iter().map(|&i| y[i]));
    let beta = &inv * yh;
    let fit = x * &beta;
    let mut resid: Vec<f64> = (0..y.len()).map(|i| y[i] - fit[i]).collect();
    for &i in &basis {
        resid[i] = 0.0;
    }
    Some(Vertex {
        basis,
        inv,
        beta,
        resid,
    })
}

struct Edge {
    slot: usize,
    dir: DVector<f64>,
    xd: DVector<f64>,
    slope: f64,
    scale: f64,
}

fn edges(x: &DMatrix<f64>, w: &[f64], tau: f64, vx: &Vertex, ztol: f64) -> Vec<Edge> {
    let k = x.ncols();
    let mut out = vec![];
    for slot in 0..k {
        for sign in [1.0, -1.0] {
            let dir = vx.inv.column(slot) * sign;
            let xd = x * &dir;
            let mut slope = 0.0;
            let mut scale = 0.0;
            for i in 0..x.nrows() {
                let r = vx.resid[i];
                scale += w[i] * xd[i].abs();
                if r.abs() <= ztol {
                    slope += w[i] * check_loss(-xd[i], tau);
                } else {
                    slope -= w[i] * psi(r, tau) * xd[i];
                }
            }
            out.push(Edge {
                slot,
                dir,
                xd,
                slope,
                scale,
            });
        }
    }
    out
}

/// Step along an edge to the first kink where the slope turns nonnegative
/// (or, with `first_kink`, simply the first kink). Returns the entering index.
fn line_search(e: &Edge, vx: &Vertex, w: &[f64], ztol: f64, first_kink: bool) -> Option<usize> {
    let mut kinks: Vec<(f64, usize)> = (0..vx.resid.len())
        .filter(|i| !vx.basis.contains(i))
        .filter_map(|i| {
            let r = vx.resid[i];
            if r.abs() <= ztol || e.xd[i] == 0.0 {
                return None;
            }
            let t = r / e.xd[i];
            (t > 0.0).then_some((t, i))
        })
        .collect();
    kinks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut slope = e.slope;
    for (_, i) in kinks {
        if first_kink {
            return Some(i);
        }
        slope += w[i] * e.xd[i].abs();
        if slope >= -SLOPE_TOL * e.scale {
            return Some(i);
        }
    }
    None
}

fn lexicographically_negative(d: &DVector<f64>) -> bool {
    let tol = 1e-12 * d.amax();
    d.iter().find(|v| v.abs() > tol).is_some_and(|&v| v < 0.0)
}

/// Simplex descent from a vertex, then lexicographic descent along flat edges.
fn simplex(x: &DMatrix<f64>, y: &[f64], w: &[f64], tau: f64, basis: Vec<usize>) -> Option<(Vertex, usize)> {
    let ztol = 1e-12 * y.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut vx = vertex(x, y, basis)?;
    let mut pivots = 0;
    let mut polishing = false;
    while pivots < MAX_PIVOTS {
        let es = edges(x, w, tau, &vx, ztol);
        let next = if !polishing {
            es.iter()
                .filter(|e| e.slope < -SLOPE_TOL * e.scale)
                .min_by(|a, b| (a.slope / a.dir.norm()).total_cmp(&(b.slope / b.dir.norm())))
        } else {
            es.iter()
                .filter(|e| e.slope <= SLOPE_TOL * e.scale && lexicographically_negative(&e.dir))
                .min_by(|a, b| a.slot.cmp(&b.slot))
        };
        let Some(edge) = next else {
            if polishing {
                break;
            }
            polishing = true;
            continue;
        };
        let Some(enter) = line_search(edge, &vx, w, ztol, polishing) else {
            if polishing {
                break;
            }
            return None;
        };
        let mut basis = vx.basis.clone();
        basis[edge.slot] = enter;
        vx = vertex(x, y, basis)?;
        pivots += 1;
    }
    Some((vx, pivots))
}

/// Weighted check-loss minimiser for a dense design.
///
/// Returns the coefficient vector and (interior-point iterations, simplex
/// pivots, whether the exact vertex solution was used).
pub fn rq_solve(x: &DMatrix<f64>, y: &[f64], w: &[f64], tau: f64, names: &[String]) -> Result<(DVector<f64>, usize, usize, bool)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let yv = DVector::from_column_slice(y);
    let ols = linalg::solve_wls(x, &yv, w, names)?;
    let (b_ipm, iters) = interior_point(x, y, w, tau, &ols.beta);
    let f_ipm = objective(x, y, w, tau, &b_ipm);
    let fit = x * &b_ipm;
    let resid: Vec<f64> = (0..y.len()).map(|i| y[i] - fit[i]).collect();
    if let Some((vx, pivots)) = crossover_basis(x, &resid).and_then(|b| simplex(x, y, w, tau, b)) {
        let f_vx = objective(x, y, w, tau, &vx.beta);
        if f_vx <= f_ipm + 1e-9 * f_ipm.abs().max(1e-300) + 1e-300 {
            return Ok((vx.beta, iters, pivots, true));
        }
    }
    Ok((b_ipm, iters, 0, false))
}

fn normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Hall-Sheather bandwidth on the probability scale, alpha = 0.05.
pub fn hall_sheather(n: usize, tau: f64) -> f64 {
    let nd = normal();
    let z = nd.inverse_cdf(0.975);
    let q = nd.inverse_cdf(tau);
    let f = nd.pdf(q);
    let h = (n as f64).powf(-1.0 / 3.0) * z.powf(2.0 / 3.0) * (1.5 * f * f / (2.0 * q * q + 1.0)).powf(1.0 / 3.0);
    h.min(0.999 * tau).min(0.999 * (1.0 - tau))
}

/// Powell kernel sandwich with cluster-summed scores.
fn powell_vcov(
    x: &DMatrix<f64>,
    resid: &[f64],
    w: &[f64],
    tau: f64,
    clusters: &[usize],
    dof_adjust: bool,
) -> Result<(DMatrix<f64>, f64)> {
    let (n, k) = (x.nrows(), x.ncols());
    let sw: f64 = w.iter().sum();
    let mean = resid.iter().zip(w).map(|(r, w)| r * w).sum::<f64>() / sw;
    let sd = (resid.iter().zip(w).map(|(r, w)| w * (r - mean) * (r - mean)).sum::<f64>() / sw).sqrt();
    let iqr = weighted_quantile(resid, Some(w), 0.75)? - weighted_quantile(resid, Some(w), 0.25)?;
    let kappa = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = hall_sheather(n, tau);
    let nd = normal();
    let bw = kappa * (nd.inverse_cdf(tau + h) - nd.inverse_cdf(tau - h));
    let (codes, g) = encode(clusters);
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let mut j = DMatrix::zeros(k, k);
    let mut sc = DMatrix::<f64>::zeros(g, k);
    for i in 0..n {
        let xi = x.row(i);
        if bw > 0.0 && resid[i].abs() <= bw {
            j += xi.transpose() * xi * (w[i] / (2.0 * bw));
        }
        let s = w[i] * psi(resid[i], tau);
        for c in 0..k {
            sc[(codes[i], c)] += s * x[(i, c)];
        }
    }
    let meat = sc.transpose() * &sc;
    let Some(jinv) = pinv_sym(&j) else {
        return Ok((DMatrix::from_element(k, k, f64::NAN), bw));
    };
    let mut v = &jinv * meat * &jinv;
    if dof_adjust {
        v *= g as f64 / (g as f64 - 1.0);
    }
    Ok((symmetrize(&v), bw))
}

/// Weighted quantile regression of `spec.outcome` on `spec.regressors`.
/// Fixed effects are not absorbed here; demean first.
pub fn qreg_fit(spec: &ModelSpec, tau: f64, panel: &PanelDataset) -> Result<FitResult> {
    if !spec.fe_dims.is_empty() {
        return Err(Error::InvalidArgument(
            "quantile regression does not absorb fixed effects; demean within individual first".into(),
        ));
    }
    let mut needed = vec![spec.outcome.clone()];
    needed.extend(spec.regressors.iter().cloned());
    let mut sample = prepare(panel, spec, &needed)?;
    let names = design_names(&mut sample, spec, &spec.regressors.clone());
    let x = sample.matrix(&names);
    let y = sample.col(&spec.outcome).to_vec();
    let (beta, iters, pivots, exact) = rq_solve(&x, &y, &sample.w, tau, &names)?;
    let fit = &x * &beta;
    let resid: Vec<f64> = (0..y.len()).map(|i| y[i] - fit[i]).collect();
    let (vcov, bw) = powell_vcov(&x, &resid, &sample.w, tau, &sample.clusters, spec.dof_adjust)?;
    let obj = objective(&x, &y, &sample.w, tau, &beta);
    let q0 = weighted_quantile(&y, Some(&sample.w), tau)?;
    let obj0: f64 = y.iter().zip(&sample.w).map(|(v, w)| w * check_loss(v - q0, tau)).sum();
    let n = y.len();
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("tau".into(), tau);
    diagnostics.insert("objective".into(), obj);
    diagnostics.insert("bandwidth".into(), bw);
    diagnostics.insert("ipm_iterations".into(), iters as f64);
    diagnostics.insert("simplex_pivots".into(), pivots as f64);
    diagnostics.insert("exact_vertex".into(), exact as u8 as f64);
    diagnostics.insert("n_clusters".into(), encode(&sample.clusters).1 as f64);
    Ok(FitResult {
        coefficients: beta.iter().copied().collect(),
        vcov,
        fitted: fit.iter().copied().collect(),
        residuals: resid,
        fe_component: vec![0.0; n],
        keys: sample_keys(panel, &sample.rows),
        rows: sample.rows,
        weights: sample.w,
        n_obs: n,
        r_squared: if obj0 > 0.0 { 1.0 - obj / obj0 } else { f64::NAN },
        dof: n.saturating_sub(names.len()),
        names,
        diagnostics,
    })
}

/// Subtract the unweighted within-individual mean from each column, using
/// only rows where every listed column is present; other rows become NaN.
pub fn demean_within(panel: &PanelDataset, columns: &[String]) -> Result<PanelDataset> {
    let cols: Vec<&[f64]> = columns.iter().map(|c| panel.column(c)).collect::<Result<_>>()?;
    let complete: Vec<bool> = (0..panel.len()).map(|i| cols.iter().all(|c| c[i].is_finite())).collect();
    let mut out = panel.clone();
    for (name, c) in columns.iter().zip(&cols) {
        let mut v = vec![f64::NAN; panel.len()];
        for g in panel.individual_groups() {
            let rows: Vec<usize> = g.filter(|&i| complete[i]).collect();
            if rows.is_empty() {
                continue;
            }
            let m = rows.iter().map(|&i| c[i]).sum::<f64>() / rows.len() as f64;
            for i in rows {
                v[i] = c[i] - m;
            }
        }
        out.set_column(name.clone(), v)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileProfile {
    pub variable: String,
    pub taus: Vec<f64>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub n_obs: usize,
}

pub fn default_taus() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

fn check_grid(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("empty tau grid".into()));
    }
    if taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) || taus.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidArgument("tau grid must be strictly increasing inside (0, 1)".into()));
    }
    Ok(())
}

/// Quantile coefficients of `predicted` across `taus` after within-individual
/// demeaning of the outcome, `predicted` and the controls in `spec`.
pub fn quantile_effect_profile(spec: &ModelSpec, predicted: &str, taus: &[f64], panel: &PanelDataset) -> Result<QuantileProfile> {
    check_grid(taus)?;
    let mut cols = vec![spec.outcome.clone(), predicted.to_string()];
    cols.extend(spec.regressors.iter().cloned());
    let demeaned = demean_within(panel, &cols)?;
    let mut model = spec.clone();
    // controls constant within individual vanish under demeaning
    let varying = spec.regressors.iter().filter(|c| {
        let v = demeaned.column(c).expect("demeaned column");
        let scale = panel.column(c).expect("control column").iter().filter(|x| x.is_finite()).fold(1.0_f64, |m, x| m.max(x.abs()));
        v.iter().any(|x| x.is_finite() && x.abs() > 1e-12 * scale)
    });
    model.regressors = std::iter::once(predicted.to_string()).chain(varying.cloned()).collect();
    model.fe_dims.clear();
    model.mundlak = false;
    let fits: Vec<Result<FitResult>> = taus.par_iter().map(|&t| qreg_fit(&model, t, &demeaned)).collect();
    let z = normal().inverse_cdf(0.975);
    let mut profile = QuantileProfile {
        variable: predicted.to_string(),
        taus: taus.to_vec(),
        estimates: vec![],
        std_errors: vec![],
        ci_low: vec![],
        ci_high: vec![],
        n_obs: 0,
    };
    for f in fits {
        let f = f?;
        let b = f.coef(predicted).ok_or_else(|| Error::MissingCoefficient(predicted.to_string()))?;
        let se = f.se(predicted).unwrap_or(f64::NAN);
        profile.estimates.push(b);
        profile.std_errors.push(se);
        profile.ci_low.push(b - z * se);
        profile.ci_high.push(b + z * se);
        profile.n_obs = f.n_obs;
    }
    Ok(profile)
}

pub fn write_profile_csv<W: Write>(profile: &QuantileProfile, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["tau", "estimate", "se", "ci_low", "ci_high"])?;
    for i in 0..profile.taus.len() {
        w.write_record([
            fmt_f64(profile.taus[i]),
            fmt_f64(profile.estimates[i]),
            fmt_f64(profile.std_errors[i]),
            fmt_f64(profile.ci_low[i]),
            fmt_f64(profile.ci_high[i]),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinEffect {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Assign each finite value to one of `n_bins` weighted-quantile bins
/// `(q_{k-1}, q_k]`, the first bin closed below. Returns bin codes (NaN
/// input gives `None`) and the bin edges.
pub fn quantile_bins(values: &[f64], weights: &[f64], n_bins: usize) -> Result<(Vec<Option<usize>>, Vec<f64>)> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    let mut edges = vec![f64::NEG_INFINITY];
    for k in 1..n_bins {
        edges.push(weighted_quantile(values, Some(weights), k as f64 / n_bins as f64)?);
    }
    edges.push(f64::INFINITY);
    let codes = values
        .iter()
        .map(|&v| {
            if v.is_nan() {
                None
            } else {
                Some((1..=n_bins).find(|&k| v <= edges[k]).unwrap_or(n_bins) - 1)
            }
        })
        .collect();
    Ok((codes, edges))
}

/// Instrument effect on participation separately by PFS quantile bin:
/// `endogenous` on `instrument × bin_k` for every bin, bin indicators and
/// the controls and fixed effects of `spec`.
pub fn pfs_bin_first_stage(
    spec: &ModelSpec,
    endogenous: &str,
    instrument: &str,
    pfs: &str,
    n_bins: usize,
    panel: &PanelDataset,
) -> Result<Vec<BinEffect>> {
    let pv = panel.column(pfs)?;
    let wv: Vec<f64> = match &spec.weight {
        Some(c) => panel.column(c)?.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect(),
        None => vec![1.0; panel.len()],
    };
    let (codes, edges) = quantile_bins(pv, &wv, n_bins)?;
    let z = panel.column(instrument)?;
    let mut work = panel.clone();
    let mut model = spec.clone();
    model.outcome = endogenous.to_string();
    let mut regs = vec![];
    let mut counts = vec![0usize; n_bins];
    for c in codes.iter().flatten() {
        counts[*c] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Empty(format!("PFS bin {} is empty", k + 1)));
    }
    for k in 0..n_bins {
        let ind: Vec<f64> = codes.iter().map(|c| c.map_or(f64::NAN, |c| (c == k) as u8 as f64)).collect();
        let name = format!("{instrument}_x_bin{}", k + 1);
        work.set_column(name.clone(), ind.iter().zip(z).map(|(a, b)| a * b).collect())?;
        regs.push(name);
        if k > 0 {
            let bname = format!("bin{}", k + 1);
            work.set_column(bname.clone(), ind)?;
            regs.push(bname);
        }
    }
    regs.extend(spec.regressors.iter().cloned());
    model.regressors = regs;
    let fit = wls_fit(&model, &work)?;
    (0..n_bins)
        .map(|k| {
            let name = format!("{instrument}_x_bin{}", k + 1);
            Ok(BinEffect {
                bin: k + 1,
                lower: edges[k],
                upper: edges[k + 1],
                estimate: fit.coef(&name).ok_or_else(|| Error::MissingCoefficient(name.clone()))?,
                std_error: fit.se(&name).unwrap_or(f64::NAN),
                n: counts[k],
            })
        })
        .collect()
}

pub fn write_bins_csv<W: Write>(bins: &[BinEffect], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["bin", "lower", "upper", "estimate", "se", "n"])?;
    for b in bins {
        w.write_record([
            b.bin.to_string(),
            fmt_f64(b.lower),
            fmt_f64(b.upper),
            fmt_f64(b.estimate),
            fmt_f64(b.std_error),
            b.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
