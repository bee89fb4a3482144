//! Instrumental-variables estimators: two-stage least squares, interaction
//! instruments, the logit-instrument three-step procedure, first-stage
//! strength, and two small auxiliary diagnostics.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::glm::{logit_fit, Family, GlmSpec};
use crate::linalg::{self, pinv_sym, sym_sqrt};
use crate::panel::{fmt_f64, PanelDataset};
use crate::regress::{
    absorb_with_stats, cluster_vcov, design_names, encode, fe_levels, prepare, sample_keys, sandwich, weighted_tss,
    FeDim, FitResult, ModelSpec,
};
use crate::stats;

/// First-stage F below this is flagged weak.
pub const WEAK_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IvMode {
    Linear2sls,
    Interaction2sls,
    ThreeStep,
}

#[derive(Debug, Clone)]
pub struct IVResult {
    pub mode: IvMode,
    /// Structural equation: endogenous regressors first, then controls.
    pub structural: FitResult,
    /// One first-stage regression per endogenous regressor.
    pub first_stages: Vec<FitResult>,
    /// Step-one logit of the three-step procedure.
    pub step_one: Option<FitResult>,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub kp_f: f64,
    pub weak: bool,
    pub n_obs: usize,
    pub mean_outcome: f64,
}

impl IVResult {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.structural.coef(name)
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.structural.se(name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut fit = self.structural.clone();
        fit.diagnostics.insert("kp_f".into(), self.kp_f);
        fit.diagnostics.insert("weak_instruments".into(), self.weak as u8 as f64);
        fit.diagnostics.insert("mean_outcome".into(), self.mean_outcome);
        fit.write_csv(out)
    }
}

/// Estimation sample and absorbed columns shared by both stages.
struct IvData {
    sample_rows: Vec<usize>,
    keys: Vec<(i64, i32)>,
    w: Vec<f64>,
    clusters: Vec<usize>,
    fe_levels: usize,
    singletons: usize,
    sweeps: usize,
    y_raw: Vec<f64>,
    y: DVector<f64>,
    d: DMatrix<f64>,
    d_raw: DMatrix<f64>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    x_raw: DMatrix<f64>,
    controls: Vec<String>,
    absorbed_controls: Vec<String>,
}

/// Columns that vanish after absorption (relative to their raw scale).
fn vanished(raw: &[f64], absorbed: &[f64]) -> bool {
    let r = raw.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let a = absorbed.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    a <= 1e-10 * r.max(1e-300)
}

fn iv_data(
    spec: &ModelSpec,
    endogenous: &[String],
    instruments: &[String],
    optional_controls: &[String],
    panel: &PanelDataset,
) -> Result<IvData> {
    if instruments.len() < endogenous.len() {
        return Err(Error::UnderIdentified(format!(
            "{} instruments for {} endogenous regressors",
            instruments.len(),
            endogenous.len()
        )));
    }
    for z in instruments {
        if spec.regressors.contains(z) {
            return Err(Error::InvalidArgument(format!("instrument `{z}` also appears as a control")));
        }
    }
    let mut model = spec.clone();
    model.regressors.extend(optional_controls.iter().cloned());
    let mut needed = vec![model.outcome.clone()];
    needed.extend(endogenous.iter().cloned());
    needed.extend(instruments.iter().cloned());
    needed.extend(model.regressors.iter().cloned());
    needed.dedup();
    let mut sample = prepare(panel, &model, &needed)?;
    let mut time_varying = model.regressors.clone();
    time_varying.extend(instruments.iter().cloned());
    let mut controls = design_names(&mut sample, &model, &time_varying);
    let n = sample.n();

    let mut all: Vec<String> = vec![model.outcome.clone()];
    all.extend(endogenous.iter().cloned());
    all.extend(instruments.iter().cloned());
    all.extend(controls.iter().cloned());
    let raw = sample.matrix(&all);
    let (absorbed, sweeps) = absorb_with_stats(&raw, &sample.fe, &sample.w)?;

    let p = endogenous.len();
    let l = instruments.len();
    let off = 1 + p + l;
    let mut keep = vec![];
    let mut absorbed_controls = vec![];
    for (j, c) in controls.iter().enumerate() {
        let col = off + j;
        let raw_c: Vec<f64> = raw.column(col).iter().copied().collect();
        let abs_c: Vec<f64> = absorbed.column(col).iter().copied().collect();
        if optional_controls.contains(c) && vanished(&raw_c, &abs_c) {
            absorbed_controls.push(c.clone());
        } else {
            keep.push(j);
        }
    }
    let x = DMatrix::from_fn(n, keep.len(), |i, k| absorbed[(i, off + keep[k])]);
    let x_raw = DMatrix::from_fn(n, keep.len(), |i, k| raw[(i, off + keep[k])]);
    controls = keep.iter().map(|&j| controls[j].clone()).collect();

    Ok(IvData {
        keys: sample_keys(panel, &sample.rows),
        sample_rows: sample.rows.clone(),
        w: sample.w.clone(),
        clusters: sample.clusters.clone(),
        fe_levels: fe_levels(&sample.fe),
        singletons: sample.singletons_dropped,
        sweeps,
        y_raw: raw.column(0).iter().copied().collect(),
        y: DVector::from_iterator(n, absorbed.column(0).iter().copied()),
        d: absorbed.columns(1, p).into_owned(),
        d_raw: raw.columns(1, p).into_owned(),
        z: absorbed.columns(1 + p, l).into_owned(),
        x,
        x_raw,
        controls,
        absorbed_controls,
    })
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

fn base_diagnostics(data: &IvData) -> BTreeMap<String, f64> {
    let mut d = BTreeMap::new();
    d.insert("singletons_dropped".into(), data.singletons as f64);
    d.insert("n_clusters".into(), encode(&data.clusters).1 as f64);
    d.insert("absorb_sweeps".into(), data.sweeps as f64);
    d
}

fn first_stage(data: &IvData, j: usize, names: &[String], spec: &ModelSpec) -> Result<(FitResult, DVector<f64>)> {
    let design = hcat(&data.z, &data.x);
    let target = DVector::from_iterator(data.d.nrows(), data.d.column(j).iter().copied());
    let sol = linalg::solve_wls(&design, &target, &data.w, names)?;
    let fitted = &design * &sol.beta;
    let resid: Vec<f64> = (&target - &fitted).iter().copied().collect();
    let vcov = cluster_vcov(&design, &resid, &data.w, &data.clusters, spec.dof_adjust)?;
    let ssr: f64 = resid.iter().zip(&data.w).map(|(e, w)| w * e * e).sum();
    let tss = weighted_tss(target.as_slice(), &data.w);
    let mut diagnostics = base_diagnostics(data);
    diagnostics.insert("condition_number".into(), sol.condition_number);
    diagnostics.insert("ssr".into(), ssr);
    diagnostics.insert("tss".into(), tss);
    let raw = data.d_raw.column(j);
    let n = data.w.len();
    let fit = FitResult {
        names: names.to_vec(),
        coefficients: sol.beta.iter().copied().collect(),
        vcov,
        fitted: (0..n).map(|i| raw[i] - resid[i]).collect(),
        residuals: resid,
        fe_component: vec![f64::NAN; n],
        rows: data.sample_rows.clone(),
        keys: data.keys.clone(),
        weights: data.w.clone(),
        n_obs: n,
        r_squared: if tss > 0.0 { 1.0 - ssr / tss } else { f64::NAN },
        dof: n.saturating_sub(names.len() + data.fe_levels),
        diagnostics,
    };
    Ok((fit, fitted))
}

/// First-stage residuals at rounding level relative to the absorbed
/// endogenous variation.
const EXACT_FIT: f64 = 1e-20;

/// Wald statistic on the excluded instruments of a single first stage,
/// divided by their count; +inf when the first stage is exact.
fn single_endogenous_f(fs: &FitResult, l: usize) -> f64 {
    if fs.diagnostics["ssr"] <= EXACT_FIT * fs.diagnostics["tss"] {
        return f64::INFINITY;
    }
    let pi = DVector::from_iterator(l, fs.coefficients[..l].iter().copied());
    let v = fs.vcov.view((0, 0), (l, l)).into_owned();
    match pinv_sym(&v) {
        Some(inv) => ((pi.transpose() * inv * &pi)[(0, 0)] / l as f64).max(0.0),
        None => f64::INFINITY,
    }
}

/// Weighted residual of each column of `m` after projecting on `x`.
fn partial_out(m: &DMatrix<f64>, x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    if x.ncols() == 0 {
        return m.clone();
    }
    let mut xtwx = DMatrix::zeros(x.ncols(), x.ncols());
    let mut xtwm = DMatrix::zeros(x.ncols(), m.ncols());
    for i in 0..x.nrows() {
        let xi = x.row(i);
        xtwx += xi.transpose() * xi * w[i];
        xtwm += xi.transpose() * m.row(i) * w[i];
    }
    let inv = pinv_sym(&xtwx).unwrap_or_else(|| DMatrix::zeros(x.ncols(), x.ncols()));
    m - x * (inv * xtwm)
}

/// Orthonormal eigenvectors of a symmetric matrix, columns ordered by
/// decreasing eigenvalue.
fn sorted_eigenvectors(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(linalg::symmetrize(m));
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| eig.eigenvectors[(i, order[j])])
}

/// Rank-based robust statistic for `p` endogenous regressors and `l`
/// instruments: the cluster-robust Wald test that the normalised
/// first-stage coefficient matrix has rank `p - 1`, divided by `l`.
pub fn kp_rank_f(
    d: &DMatrix<f64>,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    w: &[f64],
    clusters: &[usize],
    dof_adjust: bool,
) -> Result<f64> {
    let (n, p, l) = (d.nrows(), d.ncols(), z.ncols());
    if l < p {
        return Err(Error::UnderIdentified(format!("{l} instruments for {p} endogenous regressors")));
    }
    let zp = partial_out(z, x, w);
    let dp = partial_out(d, x, w);
    let mut szz = DMatrix::zeros(l, l);
    let mut szd = DMatrix::zeros(l, p);
    for i in 0..n {
        let zi = zp.row(i);
        szz += zi.transpose() * zi * w[i];
        szd += zi.transpose() * dp.row(i) * w[i];
    }
    let szz_inv = pinv_sym(&szz).ok_or_else(|| Error::RankDeficient(vec!["instruments".into()]))?;
    let pi = &szz_inv * &szd;
    let v = &dp - &zp * &pi;
    let mut svv = DMatrix::zeros(p, p);
    for i in 0..n {
        let vi = v.row(i);
        svv += vi.transpose() * vi * w[i];
    }
    let total: f64 = (0..n).map(|i| w[i] * dp.row(i).norm_squared()).sum();
    if svv.trace() <= EXACT_FIT * total {
        return Ok(f64::INFINITY);
    }
    let nf = n as f64;
    let (g, _) = sym_sqrt(&(&szz / nf));
    let (_, f) = sym_sqrt(&(&svv / nf));

    // Cluster-robust covariance of vec(pi), equations stacked column-wise.
    let lp = l * p;
    let mut scores = DMatrix::zeros(n, lp);
    for i in 0..n {
        let zi = szz_inv.clone() * zp.row(i).transpose();
        for j in 0..p {
            for k in 0..l {
                scores[(i, j * l + k)] = w[i] * v[(i, j)] * zi[k];
            }
        }
    }
    let k_first = l + x.ncols();
    let (codes, groups) = encode(clusters);
    if groups < 2 {
        return Err(Error::TooFewClusters(groups));
    }
    let mut s = DMatrix::<f64>::zeros(groups, lp);
    for i in 0..n {
        for c in 0..lp {
            s[(codes[i], c)] += scores[(i, c)];
        }
    }
    let mut v_pi = s.transpose() * &s;
    if dof_adjust {
        let (gf, kf) = (groups as f64, k_first as f64);
        v_pi *= if nf > kf { gf / (gf - 1.0) * (nf - 1.0) / (nf - kf) } else { gf / (gf - 1.0) };
    }

    let theta = &g * &pi * f.transpose();
    let kron = f.kronecker(&g);
    let v_theta = &kron * v_pi * kron.transpose();

    let q = p - 1;
    let u = sorted_eigenvectors(&(&theta * theta.transpose()));
    let vv = sorted_eigenvectors(&(theta.transpose() * &theta));
    let u_2 = u.columns(q, l - q).into_owned();
    let u22 = u_2.rows(q, l - q).into_owned();
    let v_2 = vv.columns(q, p - q).into_owned();
    let v22 = v_2.rows(q, p - q).into_owned();
    let (u22_root, _) = sym_sqrt(&(&u22 * u22.transpose()));
    let (v22_root, _) = sym_sqrt(&(&v22 * v22.transpose()));
    let u22_inv = u22.clone().try_inverse().ok_or_else(|| Error::RankDeficient(vec!["first stage".into()]))?;
    let v22t_inv = v22
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient(vec!["first stage".into()]))?;
    let a_perp = &u_2 * u22_inv * u22_root;
    let b_perp = v22_root * v22t_inv * v_2.transpose();
    let lambda = a_perp.transpose() * &theta * b_perp.transpose();
    let vec_lambda = DVector::from_iterator(lambda.len(), lambda.iter().copied());
    let sel = b_perp.kronecker(&a_perp.transpose());
    let omega = &sel * v_theta * sel.transpose();
    let rk = match pinv_sym(&omega) {
        Some(inv) => (vec_lambda.transpose() * inv * &vec_lambda)[(0, 0)],
        None => return Ok(f64::INFINITY),
    };
    Ok((rk / l as f64).max(0.0))
}

fn tsls_core(
    spec: &ModelSpec,
    endogenous: &[String],
    instruments: &[String],
    optional_controls: &[String],
    panel: &PanelDataset,
    mode: IvMode,
) -> Result<IVResult> {
    if endogenous.is_empty() {
        return Err(Error::InvalidArgument("no endogenous regressor".into()));
    }
    let data = iv_data(spec, endogenous, instruments, optional_controls, panel)?;
    let n = data.w.len();
    let p = endogenous.len();
    let l = instruments.len();
    let fs_names: Vec<String> = instruments.iter().chain(&data.controls).cloned().collect();
    let mut first_stages = vec![];
    let mut d_hat = DMatrix::zeros(n, p);
    for j in 0..p {
        let (fs, fitted) = first_stage(&data, j, &fs_names, spec)?;
        d_hat.column_mut(j).copy_from(&fitted);
        first_stages.push(fs);
    }

    let names: Vec<String> = endogenous.iter().chain(&data.controls).cloned().collect();
    let x_hat = hcat(&d_hat, &data.x);
    let x_act = hcat(&data.d, &data.x);
    let sol = linalg::solve_wls(&x_hat, &data.y, &data.w, &names)?;
    let e = &data.y - &x_act * &sol.beta;
    let resid: Vec<f64> = e.iter().copied().collect();
    let mut scores = x_hat.clone();
    for i in 0..n {
        let s = data.w[i] * resid[i];
        for j in 0..scores.ncols() {
            scores[(i, j)] *= s;
        }
    }
    let vcov = sandwich(&sol.bread, &scores, &data.clusters, spec.dof_adjust)?;
    let ssr: f64 = resid.iter().zip(&data.w).map(|(e, w)| w * e * e).sum();
    let tss = weighted_tss(data.y.as_slice(), &data.w);

    let kp_f = if p == 1 {
        single_endogenous_f(&first_stages[0], l)
    } else {
        kp_rank_f(&data.d, &data.z, &data.x, &data.w, &data.clusters, spec.dof_adjust)?
    };

    let raw_act = hcat(&data.d_raw, &data.x_raw);
    let xb = &raw_act * &sol.beta;
    let fitted: Vec<f64> = (0..n).map(|i| data.y_raw[i] - resid[i]).collect();
    let mut diagnostics = base_diagnostics(&data);
    diagnostics.insert("condition_number".into(), sol.condition_number);
    diagnostics.insert("ssr".into(), ssr);
    diagnostics.insert("kp_f".into(), kp_f);
    diagnostics.insert("absorbed_controls".into(), data.absorbed_controls.len() as f64);
    let mean_outcome = stats::weighted_mean(&data.y_raw, &data.w)?;
    let structural = FitResult {
        coefficients: sol.beta.iter().copied().collect(),
        vcov,
        fe_component: (0..n).map(|i| fitted[i] - xb[i]).collect(),
        fitted,
        residuals: resid,
        rows: data.sample_rows.clone(),
        keys: data.keys.clone(),
        weights: data.w.clone(),
        n_obs: n,
        r_squared: if tss > 0.0 { 1.0 - ssr / tss } else { f64::NAN },
        dof: n.saturating_sub(names.len() + data.fe_levels),
        names,
        diagnostics,
    };
    Ok(IVResult {
        mode,
        structural,
        first_stages,
        step_one: None,
        endogenous: endogenous.to_vec(),
        instruments: instruments.to_vec(),
        weak: kp_f < WEAK_F,
        kp_f,
        n_obs: n,
        mean_outcome,
    })
}

/// Two-stage least squares of `spec.outcome` on `endogenous` and the
/// controls in `spec.regressors`, instrumenting with `instruments`.
pub fn tsls_fit(spec: &ModelSpec, endogenous: &[String], instruments: &[String], panel: &PanelDataset) -> Result<IVResult> {
    tsls_core(spec, endogenous, instruments, &[], panel, IvMode::Linear2sls)
}

/// The first-stage strength statistic stored on an IV result.
pub fn first_stage_f(iv: &IVResult) -> Result<f64> {
    if iv.first_stages.is_empty() {
        return Err(Error::InvalidArgument("IV result carries no first stage".into()));
    }
    Ok(iv.kp_f)
}

pub fn interaction_name(a: &str, b: &str) -> String {
    format!("{a}_x_{b}")
}

/// 2SLS with `endogenous × G` terms instrumented by `instrument × G` for each
/// group indicator. Indicators identically zero on the sample are dropped;
/// group main effects enter as controls unless absorbed.
pub fn interaction_iv(
    spec: &ModelSpec,
    endogenous: &str,
    groups: &[String],
    instrument: &str,
    panel: &PanelDataset,
) -> Result<IVResult> {
    let mut work = panel.clone();
    let d = panel.column(endogenous)?.to_vec();
    let z = panel.column(instrument)?.to_vec();
    let mut endo = vec![endogenous.to_string()];
    let mut inst = vec![instrument.to_string()];
    let mut mains = vec![];
    // rows usable for the plain model decide whether a group varies
    let base = prepare(panel, spec, &[spec.outcome.clone(), endogenous.to_string(), instrument.to_string()])?;
    for g in groups {
        let gv = panel.column(g)?.to_vec();
        let on_sample: Vec<f64> = base.rows.iter().map(|&r| gv[r]).filter(|v| !v.is_nan()).collect();
        if on_sample.iter().all(|&v| v == 0.0) {
            continue;
        }
        if on_sample.iter().all(|&v| v == on_sample[0]) {
            return Err(Error::ZeroVariance(format!("group indicator `{g}` is constant on the sample")));
        }
        let dn = interaction_name(endogenous, g);
        let zn = interaction_name(instrument, g);
        work.set_column(dn.clone(), d.iter().zip(&gv).map(|(a, b)| a * b).collect())?;
        work.set_column(zn.clone(), z.iter().zip(&gv).map(|(a, b)| a * b).collect())?;
        endo.push(dn);
        inst.push(zn);
        if !spec.regressors.contains(g) {
            mains.push(g.clone());
        }
    }
    if endo.len() == 1 {
        return tsls_fit(spec, &endo, &inst, panel);
    }
    tsls_core(spec, &endo, &inst, &mains, &work, IvMode::Interaction2sls)
}

/// How the step-one logit handles individual effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitEffects {
    /// Same fixed effects as the structural spec.
    Absorb,
    /// Individual effects replaced by within-individual means of the logit
    /// regressors; other fixed effects kept.
    Mundlak,
}

/// Logit of the binary endogenous variable on instruments and controls,
/// then 2SLS using the fitted probability as the single excluded instrument
/// on the logit estimation sample.
pub fn three_step_iv(spec: &ModelSpec, endogenous: &str, instruments: &[String], panel: &PanelDataset) -> Result<IVResult> {
    three_step_iv_with(spec, endogenous, instruments, LogitEffects::Absorb, panel)
}

/// [`three_step_iv`] with a choice of individual-effect handling in the logit.
pub fn three_step_iv_with(
    spec: &ModelSpec,
    endogenous: &str,
    instruments: &[String],
    effects: LogitEffects,
    panel: &PanelDataset,
) -> Result<IVResult> {
    let mut model = spec.clone();
    model.outcome = endogenous.to_string();
    model.regressors = instruments.iter().chain(&spec.regressors).cloned().collect();
    if effects == LogitEffects::Mundlak && model.fe_dims.contains(&FeDim::Individual) {
        model.fe_dims.retain(|d| *d != FeDim::Individual);
        model.mundlak = true;
    }
    let logit = logit_fit(&GlmSpec::new(Family::Logit, model), panel)?;
    let phat_name = format!("{endogenous}_phat");
    let mut phat = vec![f64::NAN; panel.len()];
    for (i, &r) in logit.rows.iter().enumerate() {
        phat[r] = logit.fitted[i];
    }
    let work = panel.clone().with_column(phat_name.clone(), phat)?;
    let mut iv = tsls_core(spec, &[endogenous.to_string()], &[phat_name], &[], &work, IvMode::ThreeStep)?;
    iv.step_one = Some(logit);
    Ok(iv)
}

/// Pearson correlation of two aligned change series with a two-sided p-value
/// from Student's t on N - 2 degrees of freedom.
pub fn exogeneity_diag(delta_spi: &[f64], delta_unemp: &[f64]) -> Result<(f64, f64)> {
    if delta_spi.len() != delta_unemp.len() {
        return Err(Error::InvalidArgument("series lengths differ".into()));
    }
    let n = delta_spi.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 points, got {n}")));
    }
    let r = stats::pearson(delta_spi, delta_unemp)?;
    if r.abs() >= 1.0 {
        return Ok((r, 0.0));
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((r, (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)))
}

/// Year-over-year changes of a state-year series, pairing consecutive
/// observed years within each state.
pub fn state_year_changes(series: &BTreeMap<(String, i32), f64>) -> BTreeMap<(String, i32), f64> {
    let mut out = BTreeMap::new();
    let mut prev: Option<(&String, f64)> = None;
    for ((state, year), &v) in series {
        if let Some((ps, pv)) = prev {
            if ps == state && !v.is_nan() && !pv.is_nan() {
                out.insert((state.clone(), *year), v - pv);
            }
        }
        prev = Some((state, v));
    }
    out
}

/// Coefficient times mean income: the PFS change from a one-log-unit
/// income change at the mean.
pub fn semi_elasticity(fit: &FitResult, income_coefficient: &str, mean_income: f64) -> Result<f64> {
    let b = fit
        .coef(income_coefficient)
        .ok_or_else(|| Error::MissingCoefficient(income_coefficient.to_string()))?;
    Ok(b * mean_income)
}

/// Side-by-side table: per reported coefficient an estimate row and a
/// standard-error row, then N, mean outcome and first-stage F.
pub fn write_iv_table<W: Write>(columns: &[(&str, &IVResult)], rows: &[String], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["row".to_string()];
    header.extend(columns.iter().map(|c| c.0.to_string()));
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for name in rows {
        let mut est = vec![name.clone()];
        let mut se = vec![format!("{name}_se")];
        for (_, r) in columns {
            est.push(cell(r.coef(name)));
            se.push(cell(r.se(name)));
        }
        w.write_record(&est)?;
        w.write_record(&se)?;
    }
    let mut n = vec!["n_obs".to_string()];
    let mut m = vec!["mean_outcome".to_string()];
    let mut f = vec!["kp_f".to_string()];
    for (_, r) in columns {
        n.push(r.n_obs.to_string());
        m.push(fmt_f64(r.mean_outcome));
        f.push(fmt_f64(r.kp_f));
    }
    w.write_record(&n)?;
    w.write_record(&m)?;
    w.write_record(&f)?;
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::{wls_fit, ClusterBy, FeDim, INTERCEPT};
    use rand::{Rng, SeedableRng};

    fn cross(n: usize, cols: &[(&str, Vec<f64>)]) -> PanelDataset {
        let states = (0..n).map(|i| format!("S{}", i % 4)).collect();
        let mut p = PanelDataset::new((0..n as i64).collect(), vec![2001; n], states).unwrap();
        for (name, v) in cols {
            p.set_column(*name, v.clone()).unwrap();
        }
        p
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn cov(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n
    }

    #[test]
    fn just_identified_covariance_ratio() {
        let z = vec![0.0, 1.0, 2.0, 0.5, 1.5, 3.0];
        let d = vec![0.1, 0.9, 2.2, 0.3, 1.9, 2.5];
        let y = vec![1.0, 1.4, 2.9, 0.7, 2.0, 3.3];
        let p = cross(6, &[("y", y.clone()), ("d", d.clone()), ("z", z.clone())]);
        let iv = tsls_fit(&ModelSpec::new("y", &[]), &s(&["d"]), &s(&["z"]), &p).unwrap();
        let oracle = cov(&z, &y) / cov(&z, &d);
        assert!((iv.coef("d").unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn self_instrument_is_ols() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.3 * d[i] - x[i] + rng.random_range(-0.5..0.5)).collect();
        let p = cross(n, &[("y", y), ("d", d.clone()), ("d2", d), ("x", x)]);
        let iv = tsls_fit(&ModelSpec::new("y", &["x"]), &s(&["d"]), &s(&["d2"]), &p).unwrap();
        let ols = wls_fit(&ModelSpec::new("y", &["d", "x"]), &p).unwrap();
        for name in ["d", "x", INTERCEPT] {
            assert!((iv.coef(name).unwrap() - ols.coef(name).unwrap()).abs() < 1e-12);
            assert!((iv.se(name).unwrap() - ols.se(name).unwrap()).abs() < 1e-12);
        }
    }

    fn iv_panel(seed: u64, n_ind: i64, waves: i32, pi: f64) -> PanelDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (mut ids, mut years, mut states) = (vec![], vec![], vec![]);
        let (mut y, mut d, mut z, mut z2, mut x, mut g, mut w) = (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
        for i in 0..n_ind {
            let a: f64 = rng.random_range(-1.0..1.0);
            let gi = (i % 2) as f64;
            let wi = rng.random_range(0.5..2.0);
            for t in 0..waves {
                ids.push(i);
                years.push(2000 + 2 * t);
                states.push(format!("S{}", i % 7));
                let zi: f64 = rng.random_range(0.0..4.0);
                let z2i: f64 = rng.random_range(0.0..4.0);
                let xi: f64 = rng.random_range(-1.0..1.0);
                let u: f64 = rng.random_range(-1.0..1.0);
                let di = pi * zi + 0.2 * pi * z2i + 0.5 * u + a + rng.random_range(-1.0..1.0);
                y.push(0.1 * di + 0.1 * di * gi + 0.5 * xi - 0.8 * u + a + rng.random_range(-0.3..0.3));
                d.push(di);
                z.push(zi);
                z2.push(z2i);
                x.push(xi);
                g.push(gi);
                w.push(wi);
            }
        }
        let mut p = PanelDataset::new(ids, years, states).unwrap();
        for (name, v) in [("y", y), ("d", d), ("z", z), ("z2", z2), ("x", x), ("g", g), ("w", w)] {
            p.set_column(name, v).unwrap();
        }
        p
    }

    #[test]
    fn indirect_least_squares_with_fixed_effects() {
        let p = iv_panel(1, 60, 4, 0.5);
        let spec = ModelSpec::new("y", &["x"]).fe(&[FeDim::Individual, FeDim::Year]).weight("w");
        let iv = tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &p).unwrap();
        let mut rf = spec.clone();
        rf.regressors = s(&["z", "x"]);
        let reduced = wls_fit(&rf, &p).unwrap();
        let mut fs = rf.clone();
        fs.outcome = "d".into();
        let first = wls_fit(&fs, &p).unwrap();
        let ratio = reduced.coef("z").unwrap() / first.coef("z").unwrap();
        assert!((iv.coef("d").unwrap() - ratio).abs() < 1e-8);
    }

    #[test]
    fn instrument_rescaling_invariance() {
        let p = iv_panel(2, 50, 3, 0.5);
        let zc: Vec<f64> = p.column("z").unwrap().iter().map(|v| -3.5 * v).collect();
        let p2 = p.clone().with_column("zc", zc).unwrap();
        let spec = ModelSpec::new("y", &["x"]).fe(&[FeDim::Year]);
        let a = tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &p2).unwrap();
        let b = tsls_fit(&spec, &s(&["d"]), &s(&["zc"]), &p2).unwrap();
        for (u, v) in a.structural.coefficients.iter().zip(&b.structural.coefficients) {
            assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
    }

    #[test]
    fn single_instrument_f_is_squared_t() {
        let p = iv_panel(3, 40, 3, 0.3);
        let spec = ModelSpec::new("y", &["x"]).fe(&[FeDim::Individual]).weight("w");
        let iv = tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &p).unwrap();
        let fs = &iv.first_stages[0];
        let t = fs.coef("z").unwrap() / fs.se("z").unwrap();
        assert!((first_stage_f(&iv).unwrap() - t * t).abs() <= 1e-8 * (t * t).max(1.0));
    }

    #[test]
    fn rank_statistic_reduces_to_wald_for_one_endogenous() {
        let p = iv_panel(4, 60, 3, 0.4);
        let spec = ModelSpec::new("y", &["x"]).fe(&[FeDim::Year]).cluster(ClusterBy::Individual);
        let iv = tsls_fit(&spec, &s(&["d"]), &s(&["z", "z2"]), &p).unwrap();
        let data = iv_data(&spec, &s(&["d"]), &s(&["z", "z2"]), &[], &p).unwrap();
        let general = kp_rank_f(&data.d, &data.z, &data.x, &data.w, &data.clusters, true).unwrap();
        assert!((general - iv.kp_f).abs() <= 1e-8 * iv.kp_f);
    }

    #[test]
    fn perfect_first_stage_is_infinite() {
        let z = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![1.0, 0.5, 2.0, 2.5, 3.1, 4.0];
        let p = cross(6, &[("y", y), ("d", z.clone()), ("z", z)]);
        let iv = tsls_fit(&ModelSpec::new("y", &[]), &s(&["d"]), &s(&["z"]), &p).unwrap();
        assert_eq!(iv.kp_f, f64::INFINITY);
        assert!(!iv.weak);
    }

    #[test]
    fn null_instrument_f_near_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut fs = vec![];
        for _ in 0..200 {
            let n = 400;
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = cross(n, &[("y", y), ("d", d), ("z", z)]);
            let iv = tsls_fit(&ModelSpec::new("y", &[]), &s(&["d"]), &s(&["z"]), &p).unwrap();
            fs.push(iv.kp_f);
        }
        let mean = fs.iter().sum::<f64>() / fs.len() as f64;
        assert!((mean - 1.0).abs() < 0.3, "mean F {mean}");
    }

    #[test]
    fn under_identification() {
        let p = iv_panel(5, 20, 2, 0.5);
        let r = tsls_fit(&ModelSpec::new("y", &[]), &s(&["d", "x"]), &s(&["z"]), &p);
        assert!(matches!(r, Err(Error::UnderIdentified(_))));
    }

    #[test]
    fn interaction_with_zero_group_is_plain() {
        let p = iv_panel(6, 30, 3, 0.5);
        let zero = p.clone().with_column("g0", vec![0.0; p.len()]).unwrap();
        let spec = ModelSpec::new("y", &["x"]).fe(&[FeDim::Year]);
        let a = interaction_iv(&spec, "d", &s(&["g0"]), "z", &zero).unwrap();
        let b = tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &zero).unwrap();
        assert_eq!(a.structural.coefficients, b.structural.coefficients);
        assert!(a.coef("d_x_g0").is_none());
        let ones = p.clone().with_column("g1", vec![1.0; p.len()]).unwrap();
        assert!(matches!(interaction_iv(&spec, "d", &s(&["g1"]), "z", &ones), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn interaction_matches_split_samples() {
        let p = iv_panel(7, 80, 3, 0.6);
        let spec = ModelSpec::new("y", &[]).cluster(ClusterBy::Individual);
        let full = interaction_iv(&spec, "d", &s(&["g"]), "z", &p).unwrap();
        assert_eq!(full.mode, IvMode::Interaction2sls);
        let g = p.column("g").unwrap();
        let split = |flag: f64| {
            let part = p.filter_rows(&g.iter().map(|&v| v == flag).collect::<Vec<_>>());
            tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &part).unwrap().coef("d").unwrap()
        };
        let (b0, b1) = (split(0.0), split(1.0));
        assert!((full.coef("d").unwrap() - b0).abs() < 1e-6);
        assert!((full.coef("d_x_g").unwrap() - (b1 - b0)).abs() < 1e-6);
        assert!(full.kp_f.is_finite() && full.kp_f > 0.0);
    }

    #[test]
    fn interaction_group_absorbed_by_individual_effects() {
        let p = iv_panel(8, 60, 3, 0.6);
        let spec = ModelSpec::new("y", &["x"]).fe(&[FeDim::Individual, FeDim::Year]);
        let r = interaction_iv(&spec, "d", &s(&["g"]), "z", &p).unwrap();
        assert!(r.coef("g").is_none());
        assert_eq!(r.structural.diagnostics["absorbed_controls"], 1.0);
    }

    fn binary_panel(seed: u64, scale: f64) -> PanelDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 3000;
        let (mut y, mut d, mut z) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let zi: f64 = rng.random_range(-1.0..1.0);
            let u: f64 = rng.random_range(-1.0..1.0);
            let p = 1.0 / (1.0 + (-(scale * zi + 0.3 * u)).exp());
            let di = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            y.push(0.1 * di - 0.5 * u + rng.random_range(-0.2..0.2));
            d.push(di);
            z.push(zi);
        }
        cross(n, &[("y", y), ("d", d), ("z", z)])
    }

    #[test]
    fn three_step_probabilities_in_unit_interval() {
        let p = binary_panel(10, 3.0);
        let spec = ModelSpec::new("y", &[]).cluster(ClusterBy::Observation);
        let ts = three_step_iv(&spec, "d", &s(&["z"]), &p).unwrap();
        assert_eq!(ts.mode, IvMode::ThreeStep);
        let step = ts.step_one.as_ref().unwrap();
        assert!(step.fitted.iter().all(|&v| v > 0.0 && v < 1.0));
        let lin = tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &p).unwrap();
        let fs = &lin.first_stages[0];
        assert!(fs.fitted.iter().any(|&v| !(0.0..=1.0).contains(&v)));
        assert_eq!(ts.n_obs, lin.n_obs);
    }

    #[test]
    fn three_step_approaches_linear_in_small_coefficient_regime() {
        let spec = ModelSpec::new("y", &[]).cluster(ClusterBy::Observation);
        let gap = |scale: f64| {
            let p = binary_panel(12, scale);
            let a = three_step_iv(&spec, "d", &s(&["z"]), &p).unwrap().coef("d").unwrap();
            let b = tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &p).unwrap().coef("d").unwrap();
            (a - b).abs()
        };
        let (small, smaller) = (gap(0.8), gap(0.2));
        assert!(smaller < small || smaller < 1e-3, "{small} {smaller}");
        assert!(smaller < 0.05);
    }

    #[test]
    fn exogeneity_examples() {
        let a = [0.1, -0.3, 0.25, 0.05, 0.4];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(exogeneity_diag(&a, &a).unwrap(), (1.0, 0.0));
        assert_eq!(exogeneity_diag(&a, &neg).unwrap().0, -1.0);
        let b = [1.0, 0.5, 1.5, 0.0, 2.0];
        let (r, pv) = exogeneity_diag(&a, &b).unwrap();
        // hand-computed covariance over product of sds
        let (ma, mb) = (0.1, 1.0);
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        assert!((r - sab / (saa * sbb).sqrt()).abs() < 1e-14);
        assert!(pv > 0.0 && pv < 1.0);
        assert!(exogeneity_diag(&a[..2], &b[..2]).is_err());
        assert!(exogeneity_diag(&a, &[1.0; 5]).is_err());
    }

    #[test]
    fn changes_pair_consecutive_years() {
        let series: BTreeMap<(String, i32), f64> = [
            (("A".to_string(), 2001), 1.0),
            (("A".to_string(), 2003), 4.0),
            (("A".to_string(), 2005), 3.0),
            (("B".to_string(), 2001), 2.0),
        ]
        .into_iter()
        .collect();
        let ch = state_year_changes(&series);
        assert_eq!(ch.len(), 2);
        assert_eq!(ch[&("A".to_string(), 2003)], 3.0);
        assert_eq!(ch[&("A".to_string(), 2005)], -1.0);
    }

    #[test]
    fn semi_elasticity_examples() {
        let p = cross(4, &[("y", vec![1.0, 2.0, 3.0, 5.0]), ("inc", vec![0.0, 1.0, 2.0, 3.0])]);
        let mut f = wls_fit(&ModelSpec::new("y", &["inc"]).cluster(ClusterBy::Observation), &p).unwrap();
        f.coefficients[0] = 0.009;
        assert!((semi_elasticity(&f, "inc", 3.12).unwrap() - 0.02808).abs() < 1e-15);
        f.coefficients[0] = 0.0;
        assert_eq!(semi_elasticity(&f, "inc", 3.12).unwrap(), 0.0);
        assert!(matches!(semi_elasticity(&f, "nope", 1.0), Err(Error::MissingCoefficient(_))));
    }

    #[test]
    fn table_layout() {
        let p = iv_panel(13, 30, 3, 0.5);
        let spec = ModelSpec::new("y", &["x"]).fe(&[FeDim::Year]);
        let iv = tsls_fit(&spec, &s(&["d"]), &s(&["z"]), &p).unwrap();
        let mut buf = vec![];
        write_iv_table(&[("(1)", &iv), ("(2)", &iv)], &s(&["d"]), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "row,(1),(2)");
        assert!(lines[1].starts_with("d,"));
        assert!(lines[2].starts_with("d_se,"));
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn mundlak_step_one_keeps_other_effects() {
        let cfg = crate::synth::SynthConfig {
            n_individuals: 300,
            n_waves: 5,
            ..Default::default()
        };
        let p = crate::synth::estimation_panel(&cfg).unwrap();
        let spec = crate::synth::control_spec(&p).unwrap();
        let inst = [crate::synth::MC_INSTRUMENT.to_string()];
        let m = three_step_iv_with(&spec, "snap", &inst, LogitEffects::Mundlak, &p).unwrap();
        let step = m.step_one.as_ref().unwrap();
        assert!(step.names.iter().any(|n| n.ends_with("_mean")));
        assert!(step.fitted.iter().all(|&q| q > 0.0 && q < 1.0));
        assert_eq!(m.mode, IvMode::ThreeStep);
        let a = three_step_iv(&spec, "snap", &inst, &p).unwrap();
        assert!(!a.step_one.unwrap().names.iter().any(|n| n.ends_with("_mean")));
        assert_eq!(m.structural.names, a.structural.names);
    }
}
