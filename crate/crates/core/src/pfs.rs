//! Probability of Food Security.
//!
//! Per observation: a Poisson conditional mean of food expenditure, a Poisson
//! fit of the squared residual for the conditional variance, a
//! method-of-moments Gamma, and the upper-tail probability at the
//! cost-of-living adjusted Thrifty Food Plan cost. Year-specific cutoffs turn
//! the probability into a binary insecurity flag.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::gamma_cdf_reg;
use crate::glm::{poisson_qmle, Family, GlmSpec};
use crate::panel::{self, fmt_f64, lag_column_name, parse_f64, PanelDataset, COLI, FOOD_EXP, TFP_COST};
use crate::regress::{ClusterBy, FeDim, FitResult, ModelSpec};
use crate::stats::{weighted_quantile_above, SHARE_EPS};

/// Conditional variances at or below this are treated as a point mass.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
pub const LAG_YEARS: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfsRecord {
    pub individual_id: i64,
    pub wave_year: i32,
    pub w_hat: f64,
    pub sigma2_hat: f64,
    /// Gamma shape; NaN under the point-mass rule.
    pub alpha: f64,
    /// Gamma scale; NaN under the point-mass rule.
    pub beta: f64,
    pub threshold: f64,
    pub pfs: f64,
    pub food_insecure: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CutoffSchedule {
    pub cutoffs: BTreeMap<i32, f64>,
}

impl CutoffSchedule {
    pub fn get(&self, year: i32) -> Result<f64> {
        self.cutoffs
            .get(&year)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no cutoff for year {year}")))
    }
}

/// Outcome of calibrating one year.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub year: i32,
    pub target: f64,
    pub cutoff: f64,
    pub achieved: f64,
    /// Largest single-observation weight share in the year.
    pub tolerance: f64,
    pub attainable: bool,
    pub n: usize,
}

/// Regressor set and fixed effects shared by the mean and variance fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfsConfig {
    pub covariates: Vec<String>,
    pub weight: Option<String>,
    pub fe_dims: Vec<FeDim>,
    pub cluster: ClusterBy,
    pub lag_years: i32,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PfsConfig {
    fn default() -> Self {
        PfsConfig {
            covariates: panel::COVARIATES.iter().map(|s| s.to_string()).collect(),
            weight: Some(panel::WEIGHT.to_string()),
            fe_dims: vec![FeDim::State, FeDim::Year, FeDim::Individual],
            cluster: ClusterBy::Individual,
            lag_years: LAG_YEARS,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

pub fn lag_name(lag_years: i32) -> String {
    lag_column_name(FOOD_EXP, lag_years)
}

pub fn lag_sq_name(lag_years: i32) -> String {
    format!("{}_sq", lag_name(lag_years))
}

impl PfsConfig {
    /// Poisson spec for expenditure on the lag polynomial and covariates.
    pub fn mean_spec(&self) -> GlmSpec {
        let mut regressors = vec![lag_name(self.lag_years), lag_sq_name(self.lag_years)];
        regressors.extend(self.covariates.iter().cloned());
        let model = ModelSpec {
            outcome: FOOD_EXP.to_string(),
            regressors,
            fe_dims: self.fe_dims.clone(),
            weight: self.weight.clone(),
            cluster: self.cluster,
            mundlak: false,
            intercept: true,
            filter: None,
            dof_adjust: true,
        };
        GlmSpec {
            family: Family::Poisson,
            model,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

/// Add the lagged expenditure and its square.
pub fn add_lag_polynomial(panel: &PanelDataset, lag_years: i32) -> Result<PanelDataset> {
    let mut out = panel::lag_join(panel, FOOD_EXP, lag_years)?;
    let sq = out.column(&lag_name(lag_years))?.iter().map(|v| v * v).collect();
    out.set_column(lag_sq_name(lag_years), sq)?;
    Ok(out)
}

/// Poisson fit of expenditure; returns the fit and the conditional mean per
/// panel row (NaN outside the estimation sample). The number of rows lacking
/// the lag is recorded as `missing_lag_rows`.
pub fn fit_conditional_mean(panel: &PanelDataset, spec: &GlmSpec) -> Result<(FitResult, Vec<f64>)> {
    let missing = spec
        .model
        .regressors
        .iter()
        .filter(|r| r.contains("_lag"))
        .map(|r| panel.column(r))
        .collect::<Result<Vec<_>>>()?;
    let missing_lag = (0..panel.len()).filter(|&i| missing.iter().any(|c| c[i].is_nan())).count();
    let mut fit = poisson_qmle(spec, panel)?;
    fit.diagnostics.insert("missing_lag_rows".into(), missing_lag as f64);
    let mut w_hat = vec![f64::NAN; panel.len()];
    for (i, &r) in fit.rows.iter().enumerate() {
        w_hat[r] = fit.fitted[i];
    }
    Ok((fit, w_hat))
}

/// Fit the squared mean-fit residual on the same specification and return
/// the absolute prediction per panel row (NaN outside the mean-fit sample).
pub fn fit_conditional_variance(
    panel: &PanelDataset,
    mean_fit: &FitResult,
    spec: &GlmSpec,
) -> Result<(Option<FitResult>, Vec<f64>)> {
    let mut u2 = vec![f64::NAN; panel.len()];
    let mut scale = 0.0_f64;
    for (i, &r) in mean_fit.rows.iter().enumerate() {
        u2[r] = mean_fit.residuals[i] * mean_fit.residuals[i];
        scale = scale.max(mean_fit.fitted[i] * mean_fit.fitted[i]);
    }
    let mut sigma2 = vec![f64::NAN; panel.len()];
    let max_u2 = u2.iter().filter(|v| !v.is_nan()).fold(0.0_f64, |m, &v| m.max(v));
    // Residuals at rounding level: the mean fit is exact.
    if max_u2 <= 1e-20 * scale.max(1.0) {
        for &r in &mean_fit.rows {
            sigma2[r] = 0.0;
        }
        return Ok((None, sigma2));
    }
    let outcome = "__squared_residual";
    let work = panel.clone().with_column(outcome, u2)?;
    let mut vspec = spec.clone();
    vspec.model.outcome = outcome.to_string();
    let fit = poisson_qmle(&vspec, &work)?;
    for (i, &r) in fit.rows.iter().enumerate() {
        sigma2[r] = fit.fitted[i].abs();
    }
    Ok((Some(fit), sigma2))
}

/// Method-of-moments Gamma shape and scale.
pub fn gamma_params(w_hat: f64, sigma2_hat: f64) -> Result<(f64, f64)> {
    if !(w_hat > 0.0) || !(sigma2_hat > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma parameters need positive mean and variance, got ({w_hat}, {sigma2_hat})"
        )));
    }
    Ok((w_hat * w_hat / sigma2_hat, sigma2_hat / w_hat))
}

/// Thrifty Food Plan cost scaled by the cost-of-living index (100 = national).
pub fn adjust_tfp(tfp_cost: f64, coli: f64) -> Result<f64> {
    if !(tfp_cost > 0.0) || !(coli > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TFP cost and COLI must be positive, got ({tfp_cost}, {coli})"
        )));
    }
    Ok(tfp_cost * coli / 100.0)
}

/// Probability that expenditure reaches `threshold` under the calibrated Gamma.
pub fn compute_pfs(w_hat: f64, sigma2_hat: f64, threshold: f64) -> Result<f64> {
    if !(w_hat > 0.0) {
        return Err(Error::InvalidArgument(format!("conditional mean must be positive, got {w_hat}")));
    }
    if !(sigma2_hat >= 0.0) || !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance and threshold must be nonnegative, got ({sigma2_hat}, {threshold})"
        )));
    }
    if sigma2_hat <= DEGENERATE_VARIANCE {
        return Ok(if w_hat >= threshold { 1.0 } else { 0.0 });
    }
    let (alpha, beta) = gamma_params(w_hat, sigma2_hat)?;
    Ok((1.0 - gamma_cdf_reg(alpha, threshold / beta)?).clamp(0.0, 1.0))
}

pub fn flag_food_insecure(pfs: f64, cutoff: f64) -> bool {
    pfs < cutoff
}

/// Per-year cutoff such that the weighted share with `pfs < cutoff` matches
/// the target rate as closely as the data allow.
///
/// The cutoff is the smallest PFS value whose weighted CDF exceeds the
/// target, capped at 1 when the target is 1 or more.
pub fn calibrate_cutoffs(
    pfs: &[f64],
    weights: &[f64],
    years: &[i32],
    targets: &BTreeMap<i32, f64>,
) -> Result<(CutoffSchedule, Vec<Calibration>)> {
    if pfs.len() != weights.len() || pfs.len() != years.len() {
        return Err(Error::InvalidArgument("calibrate_cutoffs: length mismatch".into()));
    }
    let mut by_year: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in years.iter().enumerate() {
        by_year.entry(y).or_default().push(i);
    }
    for y in by_year.keys() {
        if !targets.contains_key(y) {
            return Err(Error::InvalidArgument(format!("no target prevalence for year {y}")));
        }
    }
    let mut schedule = CutoffSchedule::default();
    let mut report = vec![];
    for (&year, &target) in targets {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidArgument(format!("target rate {target} for {year} outside [0, 1]")));
        }
        let idx = by_year
            .get(&year)
            .ok_or_else(|| Error::Empty(format!("no PFS observations for year {year}")))?;
        let p: Vec<f64> = idx.iter().map(|&i| pfs[i]).collect();
        let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        let cutoff = weighted_quantile_above(&p, Some(&w), target)?.unwrap_or(1.0).min(1.0);
        let total: f64 = w.iter().sum();
        let flagged: f64 = p.iter().zip(&w).filter(|(v, _)| flag_food_insecure(**v, cutoff)).map(|(_, w)| w).sum();
        let achieved = flagged / total;
        let tolerance = w.iter().fold(0.0_f64, |m, &v| m.max(v)) / total;
        schedule.cutoffs.insert(year, cutoff);
        report.push(Calibration {
            year,
            target,
            cutoff,
            achieved,
            tolerance,
            attainable: (achieved - target).abs() <= tolerance + SHARE_EPS,
            n: idx.len(),
        });
    }
    Ok((schedule, report))
}

/// Everything produced by the PFS stage.
#[derive(Debug, Clone)]
pub struct PfsOutput {
    pub records: Vec<PfsRecord>,
    pub mean_fit: FitResult,
    pub variance_fit: Option<FitResult>,
}

/// Mean fit, variance fit and PFS for every row with a lagged expenditure.
/// Insecurity flags are left unset until cutoffs are applied.
pub fn construct_pfs(panel: &PanelDataset, config: &PfsConfig) -> Result<PfsOutput> {
    let work = add_lag_polynomial(panel, config.lag_years)?;
    let spec = config.mean_spec();
    let (mean_fit, w_hat) = fit_conditional_mean(&work, &spec)?;
    let (variance_fit, sigma2) = fit_conditional_variance(&work, &mean_fit, &spec)?;
    let tfp = work.column(TFP_COST)?;
    let coli = work.column(COLI)?;
    let mut records = Vec::with_capacity(mean_fit.rows.len());
    for &r in &mean_fit.rows {
        let threshold = adjust_tfp(tfp[r], coli[r])?;
        let (alpha, beta) = if sigma2[r] > DEGENERATE_VARIANCE {
            gamma_params(w_hat[r], sigma2[r])?
        } else {
            (f64::NAN, f64::NAN)
        };
        records.push(PfsRecord {
            individual_id: work.ids()[r],
            wave_year: work.years()[r],
            w_hat: w_hat[r],
            sigma2_hat: sigma2[r],
            alpha,
            beta,
            threshold,
            pfs: compute_pfs(w_hat[r], sigma2[r], threshold)?,
            food_insecure: false,
        });
    }
    Ok(PfsOutput {
        records,
        mean_fit,
        variance_fit,
    })
}

pub fn apply_cutoffs(records: &mut [PfsRecord], schedule: &CutoffSchedule) -> Result<()> {
    for r in records.iter_mut() {
        r.food_insecure = flag_food_insecure(r.pfs, schedule.get(r.wave_year)?);
    }
    Ok(())
}

pub fn write_pfs_csv<W: Write>(records: &[PfsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([
        "individual_id",
        "wave_year",
        "w_hat",
        "sigma2_hat",
        "alpha",
        "beta",
        "threshold",
        "pfs",
        "food_insecure",
    ])?;
    for r in records {
        w.write_record([
            r.individual_id.to_string(),
            r.wave_year.to_string(),
            fmt_f64(r.w_hat),
            fmt_f64(r.sigma2_hat),
            fmt_f64(r.alpha),
            fmt_f64(r.beta),
            fmt_f64(r.threshold),
            fmt_f64(r.pfs),
            (r.food_insecure as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Inverse of [`write_pfs_csv`].
pub fn read_pfs_csv<R: std::io::Read>(input: R) -> Result<Vec<PfsRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let cols = ["individual_id", "wave_year", "w_hat", "sigma2_hat", "alpha", "beta", "threshold", "pfs", "food_insecure"];
    let pos = cols
        .iter()
        .map(|c| header.iter().position(|h| h == c).ok_or_else(|| Error::MissingColumn(c.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = |k: usize| rec.get(pos[k]).unwrap_or("");
        let bad = |k: usize| Error::NonNumeric {
            column: cols[k].to_string(),
            row: row + 1,
            value: raw(k).to_string(),
        };
        let num = |k: usize| parse_f64(raw(k)).ok_or_else(|| bad(k));
        out.push(PfsRecord {
            individual_id: raw(0).parse().map_err(|_| bad(0))?,
            wave_year: raw(1).parse().map_err(|_| bad(1))?,
            w_hat: num(2)?,
            sigma2_hat: num(3)?,
            alpha: num(4)?,
            beta: num(5)?,
            threshold: num(6)?,
            pfs: num(7)?,
            food_insecure: match raw(8) {
                "0" => false,
                "1" => true,
                _ => return Err(bad(8)),
            },
        });
    }
    Ok(out)
}

pub fn write_calibration_csv<W: Write>(rows: &[Calibration], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["wave_year", "target", "cutoff", "achieved", "tolerance", "attainable", "n"])?;
    for c in rows {
        w.write_record([
            c.year.to_string(),
            fmt_f64(c.target),
            fmt_f64(c.cutoff),
            fmt_f64(c.achieved),
            fmt_f64(c.tolerance),
            (c.attainable as u8).to_string(),
            c.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Copy PFS and the insecurity flag onto the panel as `pfs` and `food_insecure`
/// (NaN for rows without a record).
pub fn join_pfs(panel: &PanelDataset, records: &[PfsRecord]) -> Result<PanelDataset> {
    let index = panel.key_index();
    let mut pfs = vec![f64::NAN; panel.len()];
    let mut flag = vec![f64::NAN; panel.len()];
    for r in records {
        if let Some(&i) = index.get(&(r.individual_id, r.wave_year)) {
            pfs[i] = r.pfs;
            flag[i] = if r.food_insecure { 1.0 } else { 0.0 };
        }
    }
    panel.clone().with_column("pfs", pfs)?.with_column("food_insecure", flag)
}
