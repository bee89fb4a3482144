//! Poisson quasi-MLE and logit by iteratively reweighted least squares.
//!
//! Fixed effects are absorbed from the working regression at every step, so
//! the individual dimension never materialises as dummy columns. The linear
//! predictor including fixed effects is recovered as `z - r`, the working
//! response minus the absorbed-regression residual.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::PanelDataset;
use crate::regress::{
    absorb_with_stats, design_names, encode, fe_levels, prepare, sample_keys, sandwich, FeDim, FitResult,
    ModelSpec, Sample, INTERCEPT,
};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` in logit weights.
pub const PROB_CLAMP: f64 = 1e-10;
/// A logit linear predictor beyond this magnitude signals separation.
pub const SEPARATION_ETA: f64 = 30.0;
const MAX_HALVINGS: usize = 60;
const MAX_ETA_POISSON: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Poisson,
    Logit,
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Poisson => eta.min(MAX_ETA_POISSON).exp(),
            Family::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson_qmle",
            Family::Logit => "logit",
        }
    }

    /// Variance function evaluated at the (clamped) mean.
    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Poisson => mu.max(1e-300),
            Family::Logit => {
                let p = mu.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                p * (1.0 - p)
            }
        }
    }

    fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Poisson => {
                let mu = mu.max(1e-300);
                let t = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (t - (y - mu))
            }
            Family::Logit => {
                let p = mu.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -2.0 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub family: Family,
    pub model: ModelSpec,
    pub max_iter: usize,
    /// Convergence bound on the scaled mean score.
    pub tol: f64,
}

impl GlmSpec {
    pub fn new(family: Family, model: ModelSpec) -> Self {
        GlmSpec {
            family,
            model,
            max_iter: 100,
            tol: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        self.model.validate()
    }
}

fn weighted_deviance(family: Family, y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(w)
        .map(|((&y, &m), &w)| w * family.unit_deviance(y, m))
        .sum()
}

fn check_outcome(family: Family, spec: &ModelSpec, sample: &Sample) -> Result<()> {
    let y = sample.col(&spec.outcome);
    let bad: Vec<usize> = match family {
        Family::Poisson => (0..y.len()).filter(|&i| y[i] < 0.0).collect(),
        Family::Logit => (0..y.len()).filter(|&i| y[i] != 0.0 && y[i] != 1.0).collect(),
    };
    if !bad.is_empty() {
        let rule = match family {
            Family::Poisson => "outcome must be nonnegative",
            Family::Logit => "outcome must be binary 0/1",
        };
        return Err(Error::Domain {
            column: spec.outcome.clone(),
            rows: bad.iter().take(10).map(|&i| sample.rows[i] + 1).collect(),
            rule: rule.into(),
        });
    }
    if family == Family::Poisson && y.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("all outcomes are zero".into()));
    }
    Ok(())
}

/// Individuals whose outcome never varies over the sample.
fn constant_outcome_ids(sample: &Sample, outcome: &str) -> HashSet<i64> {
    let y = sample.col(outcome);
    let mut seen: HashMap<i64, (f64, bool)> = HashMap::new();
    for (i, &id) in sample.ids.iter().enumerate() {
        let e = seen.entry(id).or_insert((y[i], true));
        if e.0 != y[i] {
            e.1 = false;
        }
    }
    seen.into_iter().filter(|(_, (_, c))| *c).map(|(id, _)| id).collect()
}

/// Build the estimation sample; for logit with individual effects, drop
/// individuals with a constant outcome until none remain.
fn glm_sample(spec: &GlmSpec, panel: &PanelDataset, needed: &[String]) -> Result<(Sample, usize, usize)> {
    let model = &spec.model;
    let mut sample = prepare(panel, model, needed)?;
    check_outcome(spec.family, model, &sample)?;
    if spec.family != Family::Logit || !model.fe_dims.contains(&FeDim::Individual) {
        return Ok((sample, 0, 0));
    }
    let mut dropped: HashSet<i64> = HashSet::new();
    loop {
        let constant = constant_outcome_ids(&sample, &model.outcome);
        if constant.is_empty() {
            break;
        }
        dropped.extend(constant);
        let keep: Vec<bool> = panel.ids().iter().map(|id| !dropped.contains(id)).collect();
        let index: Vec<usize> = (0..panel.len()).filter(|&i| keep[i]).collect();
        if index.is_empty() {
            return Err(Error::Empty("every individual has a constant outcome".into()));
        }
        let sub = panel.filter_rows(&keep);
        sample = prepare(&sub, model, needed)?;
        for r in sample.rows.iter_mut() {
            *r = index[*r];
        }
    }
    let dropped_obs = panel.ids().iter().filter(|id| dropped.contains(id)).count();
    Ok((sample, dropped.len(), dropped_obs))
}

struct Step {
    beta: DVector<f64>,
    bread: DMatrix<f64>,
    x_tilde: DMatrix<f64>,
    eta: Vec<f64>,
    condition_number: f64,
    sweeps: usize,
}

/// One working regression at the current linear predictor.
fn working_step(
    family: Family,
    y: &[f64],
    x: &DMatrix<f64>,
    w: &[f64],
    eta: &[f64],
    fe: &[Vec<usize>],
    names: &[String],
) -> Result<Step> {
    let n = y.len();
    let k = x.ncols();
    let mut omega = vec![0.0; n];
    let mut joint = DMatrix::zeros(n, k + 1);
    for i in 0..n {
        let mu = family.inverse_link(eta[i]);
        let v = family.variance(mu);
        omega[i] = w[i] * v;
        joint[(i, 0)] = eta[i] + (y[i] - mu) / v;
    }
    joint.columns_mut(1, k).copy_from(x);
    let (absorbed, sweeps) = absorb_with_stats(&joint, fe, &omega)?;
    let z_t = DVector::from_iterator(n, absorbed.column(0).iter().copied());
    let x_t = absorbed.columns(1, k).into_owned();
    let sol = linalg::solve_wls(&x_t, &z_t, &omega, names)?;
    let r = &z_t - &x_t * &sol.beta;
    let eta_new = (0..n).map(|i| joint[(i, 0)] - r[i]).collect();
    Ok(Step {
        beta: sol.beta,
        bread: sol.bread,
        x_tilde: x_t,
        eta: eta_new,
        condition_number: sol.condition_number,
        sweeps,
    })
}

/// Sup-norm of the mean score, each regressor scaled by its weighted RMS and
/// the residual by the outcome scale, together with fixed-effect group scores.
fn score_norm(y: &[f64], mu: &[f64], x: &DMatrix<f64>, w: &[f64], fe: &[Vec<usize>], col_scale: &[f64], y_scale: f64) -> f64 {
    let n = y.len() as f64;
    let mut g = 0.0_f64;
    for j in 0..x.ncols() {
        let s: f64 = (0..y.len()).map(|i| w[i] * x[(i, j)] * (y[i] - mu[i])).sum();
        g = g.max((s / (n * col_scale[j] * y_scale)).abs());
    }
    for codes in fe {
        let levels = codes.iter().max().map_or(0, |m| m + 1);
        let mut s = vec![0.0; levels];
        for i in 0..y.len() {
            s[codes[i]] += w[i] * (y[i] - mu[i]);
        }
        for v in s {
            g = g.max((v / (n * y_scale)).abs());
        }
    }
    g
}

fn fit_glm(spec: &GlmSpec, panel: &PanelDataset) -> Result<(FitResult, Vec<f64>)> {
    spec.validate()?;
    let family = spec.family;
    let model = &spec.model;
    let mut needed = vec![model.outcome.clone()];
    needed.extend(model.regressors.iter().cloned());
    let (mut sample, ids_dropped, obs_dropped) = glm_sample(spec, panel, &needed)?;
    let names = design_names(&mut sample, model, &model.regressors.clone());
    let n = sample.n();
    let k = names.len();
    let y = sample.col(&model.outcome).to_vec();
    let x = sample.matrix(&names);
    let mean_w = sample.w.iter().sum::<f64>() / n as f64;
    let w: Vec<f64> = sample.w.iter().map(|v| v / mean_w).collect();

    let ybar = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let col_scale: Vec<f64> = (0..k)
        .map(|j| {
            let ms = (0..n).map(|i| w[i] * x[(i, j)] * x[(i, j)]).sum::<f64>() / n as f64;
            if ms > 0.0 { ms.sqrt() } else { 1.0 }
        })
        .collect();
    let y_scale = match family {
        Family::Poisson => ybar.max(1.0),
        Family::Logit => 1.0,
    };
    let eta0 = match family {
        Family::Poisson => ybar.ln(),
        Family::Logit => {
            let p = ybar.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            (p / (1.0 - p)).ln()
        }
    };
    let null_mu = vec![family.inverse_link(eta0); n];
    let null_deviance = weighted_deviance(family, &y, &null_mu, &w);

    let mut eta = vec![eta0; n];
    let mut mu: Vec<f64> = eta.iter().map(|&e| family.inverse_link(e)).collect();
    let mut deviance = weighted_deviance(family, &y, &mu, &w);
    let mut path = vec![deviance];
    let mut iterations = 0;
    let mut gradient = score_norm(&y, &mu, &x, &w, &sample.fe, &col_scale, y_scale);
    while gradient > spec.tol {
        if iterations == spec.max_iter {
            return Err(Error::NoConvergence {
                estimator: family.name(),
                iterations,
                gradient,
            });
        }
        iterations += 1;
        let step = working_step(family, &y, &x, &w, &eta, &sample.fe, &names)?;
        let mut cand = step.eta;
        let mut cand_mu: Vec<f64> = cand.iter().map(|&e| family.inverse_link(e)).collect();
        let mut cand_dev = weighted_deviance(family, &y, &cand_mu, &w);
        let mut halvings = 0;
        while !(cand_dev <= deviance * (1.0 + 1e-12) + 1e-300) && halvings < MAX_HALVINGS {
            for (c, e) in cand.iter_mut().zip(&eta) {
                *c = 0.5 * (*c + e);
            }
            cand_mu = cand.iter().map(|&e| family.inverse_link(e)).collect();
            cand_dev = weighted_deviance(family, &y, &cand_mu, &w);
            halvings += 1;
        }
        if family == Family::Logit {
            let max_eta = cand.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
            if max_eta > SEPARATION_ETA {
                return Err(Error::Separation(max_eta));
            }
        }
        let stalled = cand_dev >= deviance;
        eta = cand;
        mu = cand_mu;
        deviance = cand_dev.min(deviance);
        path.push(deviance);
        gradient = score_norm(&y, &mu, &x, &w, &sample.fe, &col_scale, y_scale);
        if stalled && gradient > spec.tol {
            return Err(Error::NoConvergence {
                estimator: family.name(),
                iterations,
                gradient,
            });
        }
    }

    // Final working regression at the converged predictor supplies beta and the bread.
    let step = working_step(family, &y, &x, &w, &eta, &sample.fe, &names)?;
    let eta = step.eta;
    let mu: Vec<f64> = eta.iter().map(|&e| family.inverse_link(e)).collect();
    let mut scores = step.x_tilde.clone();
    for i in 0..n {
        let s = w[i] * (y[i] - mu[i]);
        for j in 0..k {
            scores[(i, j)] *= s;
        }
    }
    let vcov = sandwich(&step.bread, &scores, &sample.clusters, model.dof_adjust)?;
    let xb = &x * &step.beta;
    let fe_component: Vec<f64> = (0..n).map(|i| eta[i] - xb[i]).collect();
    let final_deviance = weighted_deviance(family, &y, &mu, &w);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("iterations".into(), iterations as f64);
    diagnostics.insert("gradient".into(), gradient);
    diagnostics.insert("deviance".into(), final_deviance * mean_w);
    diagnostics.insert("null_deviance".into(), null_deviance * mean_w);
    diagnostics.insert("condition_number".into(), step.condition_number);
    diagnostics.insert("absorb_sweeps".into(), step.sweeps as f64);
    diagnostics.insert("singletons_dropped".into(), sample.singletons_dropped as f64);
    diagnostics.insert("n_clusters".into(), encode(&sample.clusters).1 as f64);
    diagnostics.insert("fe_dims".into(), model.fe_dims.len() as f64);
    if family == Family::Logit && model.fe_dims.contains(&FeDim::Individual) {
        diagnostics.insert("constant_outcome_individuals_dropped".into(), ids_dropped as f64);
        diagnostics.insert("constant_outcome_obs_dropped".into(), obs_dropped as f64);
    }

    let fit = FitResult {
        coefficients: step.beta.iter().copied().collect(),
        vcov,
        residuals: y.iter().zip(&mu).map(|(a, b)| a - b).collect(),
        fitted: mu,
        fe_component,
        keys: sample_keys(panel, &sample.rows),
        rows: sample.rows,
        weights: sample.w,
        n_obs: n,
        r_squared: if null_deviance > 0.0 { 1.0 - final_deviance / null_deviance } else { f64::NAN },
        dof: n.saturating_sub(k + fe_levels(&sample.fe)),
        names,
        diagnostics,
    };
    Ok((fit, path))
}

/// Poisson quasi-MLE with fixed effects absorbed inside each IRLS step.
/// Accepts any nonnegative outcome, integer or not.
pub fn poisson_qmle(spec: &GlmSpec, panel: &PanelDataset) -> Result<FitResult> {
    if spec.family != Family::Poisson {
        return Err(Error::InvalidArgument("poisson_qmle called with a non-poisson spec".into()));
    }
    fit_glm(spec, panel).map(|(f, _)| f)
}

/// Weighted logit. With individual fixed effects, individuals whose outcome
/// never changes are dropped; the count is in the diagnostics.
pub fn logit_fit(spec: &GlmSpec, panel: &PanelDataset) -> Result<FitResult> {
    if spec.family != Family::Logit {
        return Err(Error::InvalidArgument("logit_fit called with a non-logit spec".into()));
    }
    fit_glm(spec, panel).map(|(f, _)| f)
}

/// Fit and also return the deviance after every accepted iteration.
pub fn glm_fit_with_path(spec: &GlmSpec, panel: &PanelDataset) -> Result<(FitResult, Vec<f64>)> {
    fit_glm(spec, panel)
}

/// Response-scale predictions for every row of `panel`.
///
/// Absorbed fixed effects are only known for estimation-sample keys; other
/// rows of a fixed-effect fit come back as NaN.
pub fn predict_response(fit: &FitResult, panel: &PanelDataset, family: Family) -> Result<Vec<f64>> {
    let n = panel.len();
    let mut eta = vec![0.0; n];
    let mut mundlak_cache: HashMap<String, Vec<f64>> = HashMap::new();
    for (j, name) in fit.names.iter().enumerate() {
        let b = fit.coefficients[j];
        if name == INTERCEPT {
            eta.iter_mut().for_each(|e| *e += b);
            continue;
        }
        let col: &[f64] = if panel.has_column(name) {
            panel.column(name)?
        } else if let Some(base) = name.strip_suffix("_mean").filter(|b| panel.has_column(b)) {
            let m = crate::regress::mundlak_augment(panel, &[base.to_string()])?;
            mundlak_cache.insert(name.clone(), m.column(name)?.to_vec());
            &mundlak_cache[name]
        } else {
            return Err(Error::MissingColumn(name.clone()));
        };
        for i in 0..n {
            eta[i] += b * col[i];
        }
    }
    let has_fe = fit.diagnostics.get("fe_dims").is_some_and(|&d| d > 0.0);
    if has_fe {
        let fe: HashMap<(i64, i32), f64> = fit.keys.iter().copied().zip(fit.fe_component.iter().copied()).collect();
        for i in 0..n {
            eta[i] += fe.get(&(panel.ids()[i], panel.years()[i])).copied().unwrap_or(f64::NAN);
        }
    }
    Ok(eta.into_iter().map(|e| family.inverse_link(e)).collect())
}
