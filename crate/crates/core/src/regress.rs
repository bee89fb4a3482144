//! Weighted least squares with absorbed fixed effects, cluster-robust
//! covariance and the Mundlak device. Every linear fit in the crate goes
//! through here.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};
use crate::panel::{fmt_f64, PanelDataset};

pub const INTERCEPT: &str = "(intercept)";
pub const ABSORB_TOL: f64 = 1e-10;
pub const ABSORB_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeDim {
    Individual,
    State,
    Year,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterBy {
    Individual,
    State,
    /// Each observation its own cluster (heteroskedasticity-robust).
    Observation,
}

/// Keep rows where `column == equals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFilter {
    pub column: String,
    pub equals: f64,
}

/// Declarative description of one regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub fe_dims: Vec<FeDim>,
    /// Survey weight column; `None` means unit weights.
    pub weight: Option<String>,
    pub cluster: ClusterBy,
    /// Append within-individual means of the time-varying regressors.
    pub mundlak: bool,
    /// Add a constant when no fixed effects are absorbed.
    pub intercept: bool,
    pub filter: Option<SampleFilter>,
    /// Apply the G/(G-1) (N-1)/(N-K) small-sample factor to cluster VCOVs.
    pub dof_adjust: bool,
}

impl ModelSpec {
    pub fn new(outcome: impl Into<String>, regressors: &[&str]) -> Self {
        ModelSpec {
            outcome: outcome.into(),
            regressors: regressors.iter().map(|s| s.to_string()).collect(),
            fe_dims: vec![],
            weight: None,
            cluster: ClusterBy::Individual,
            mundlak: false,
            intercept: true,
            filter: None,
            dof_adjust: true,
        }
    }

    pub fn fe(mut self, dims: &[FeDim]) -> Self {
        self.fe_dims = dims.to_vec();
        self
    }

    pub fn weight(mut self, column: impl Into<String>) -> Self {
        self.weight = Some(column.into());
        self
    }

    pub fn cluster(mut self, by: ClusterBy) -> Self {
        self.cluster = by;
        self
    }

    pub fn mundlak(mut self, on: bool) -> Self {
        self.mundlak = on;
        self
    }

    pub fn filter(mut self, column: impl Into<String>, equals: f64) -> Self {
        self.filter = Some(SampleFilter {
            column: column.into(),
            equals,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.regressors.contains(&self.outcome) {
            return Err(Error::InvalidArgument(format!(
                "outcome `{}` also listed as a regressor",
                self.outcome
            )));
        }
        if self.mundlak && self.fe_dims.contains(&FeDim::Individual) {
            return Err(Error::InvalidArgument(
                "Mundlak means and individual fixed effects both absorb the individual dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Estimates and diagnostics from any estimator in the crate.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub vcov: DMatrix<f64>,
    /// Residuals on the estimation sample, in `rows` order.
    pub residuals: Vec<f64>,
    /// Fitted values including absorbed fixed effects (response scale for GLMs).
    pub fitted: Vec<f64>,
    /// Linear-predictor contribution of the absorbed fixed effects.
    pub fe_component: Vec<f64>,
    /// Panel row indices of the estimation sample.
    pub rows: Vec<usize>,
    /// `(individual_id, wave_year)` of each estimation-sample row.
    pub keys: Vec<(i64, i32)>,
    pub weights: Vec<f64>,
    pub n_obs: usize,
    pub r_squared: f64,
    pub dof: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

impl FitResult {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.coefficients[i])
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.vcov[(i, i)].max(0.0).sqrt())
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.names.len()).map(|i| self.vcov[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Flat `(name, estimate, std_error)` table followed by diagnostic rows
    /// whose names start with `#`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["name", "estimate", "std_error"])?;
        for (i, n) in self.names.iter().enumerate() {
            w.write_record([n.clone(), fmt_f64(self.coefficients[i]), fmt_f64(self.vcov[(i, i)].max(0.0).sqrt())])?;
        }
        w.write_record(["#n_obs".to_string(), self.n_obs.to_string(), String::new()])?;
        w.write_record(["#r_squared".to_string(), fmt_f64(self.r_squared), String::new()])?;
        w.write_record(["#dof".to_string(), self.dof.to_string(), String::new()])?;
        for (k, v) in &self.diagnostics {
            w.write_record([format!("#{k}"), fmt_f64(*v), String::new()])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Map arbitrary keys to dense codes `0..G` in sorted key order.
pub fn encode<K: Ord + Clone>(keys: &[K]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for k in keys {
        map.entry(k.clone()).or_insert(0usize);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    (keys.iter().map(|k| map[k]).collect(), map.len())
}

fn dim_codes(panel: &PanelDataset, dim: FeDim, rows: &[usize]) -> Vec<usize> {
    match dim {
        FeDim::Individual => encode(&rows.iter().map(|&i| panel.ids()[i]).collect::<Vec<_>>()).0,
        FeDim::State => encode(&rows.iter().map(|&i| panel.states()[i].clone()).collect::<Vec<_>>()).0,
        FeDim::Year => encode(&rows.iter().map(|&i| panel.years()[i]).collect::<Vec<_>>()).0,
    }
}

/// Weighted group demeaning of one column by alternating projections.
/// Returns the number of sweeps used.
fn demean_column(col: &mut [f64], fe: &[Vec<usize>], w: &[f64], group_w: &[Vec<f64>]) -> Result<usize> {
    if fe.is_empty() {
        return Ok(0);
    }
    let scale = col.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut sums: Vec<Vec<f64>> = group_w.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut last_change = f64::INFINITY;
    for sweep in 1..=ABSORB_MAX_SWEEPS {
        let mut max_change = 0.0_f64;
        for (d, codes) in fe.iter().enumerate() {
            let s = &mut sums[d];
            s.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..col.len() {
                s[codes[i]] += w[i] * col[i];
            }
            for (g, v) in s.iter_mut().enumerate() {
                *v /= group_w[d][g];
                max_change = max_change.max(v.abs());
            }
            for i in 0..col.len() {
                col[i] -= s[codes[i]];
            }
        }
        last_change = max_change;
        if fe.len() == 1 || max_change < ABSORB_TOL * scale {
            return Ok(sweep);
        }
    }
    Err(Error::AbsorbNoConvergence {
        sweeps: ABSORB_MAX_SWEEPS,
        max_residual: last_change,
    })
}

fn group_weights(fe: &[Vec<usize>], w: &[f64]) -> Result<Vec<Vec<f64>>> {
    fe.iter()
        .map(|codes| {
            let g = codes.iter().max().map_or(0, |m| m + 1);
            let mut gw = vec![0.0; g];
            for (i, &c) in codes.iter().enumerate() {
                gw[c] += w[i];
            }
            if gw.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidArgument("fixed-effect group with zero total weight".into()));
            }
            Ok(gw)
        })
        .collect()
}

/// Weighted-demean every column of `data` within each fixed-effect dimension.
///
/// `fe` holds one dense group-code vector per dimension. Alternating
/// projections stop once a full sweep moves no entry by more than
/// `1e-10 * max(1, max|column|)`, or fail after 10,000 sweeps.
pub fn absorb_fe(data: &DMatrix<f64>, fe: &[Vec<usize>], weights: &[f64]) -> Result<DMatrix<f64>> {
    absorb_with_stats(data, fe, weights).map(|(m, _)| m)
}

pub(crate) fn absorb_with_stats(
    data: &DMatrix<f64>,
    fe: &[Vec<usize>],
    weights: &[f64],
) -> Result<(DMatrix<f64>, usize)> {
    if weights.len() != data.nrows() || fe.iter().any(|c| c.len() != data.nrows()) {
        return Err(Error::InvalidArgument("absorb_fe: dimension mismatch".into()));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument("absorb_fe: negative weight".into()));
    }
    let gw = group_weights(fe, weights)?;
    let mut out = data.clone();
    let mut sweeps = 0;
    for j in 0..out.ncols() {
        let mut col = out.column(j).iter().copied().collect::<Vec<_>>();
        sweeps = sweeps.max(demean_column(&mut col, fe, weights, &gw)?);
        out.column_mut(j).copy_from_slice(&col);
    }
    Ok((out, sweeps))
}

/// Cluster-robust sandwich from a bread matrix and per-observation score rows.
pub(crate) fn sandwich(
    bread: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    clusters: &[usize],
    dof_adjust: bool,
) -> Result<DMatrix<f64>> {
    let (n, k) = (scores.nrows(), scores.ncols());
    let (codes, g) = encode(clusters);
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let mut s = DMatrix::<f64>::zeros(g, k);
    for i in 0..n {
        for j in 0..k {
            s[(codes[i], j)] += scores[(i, j)];
        }
    }
    let meat = s.transpose() * &s;
    let mut v = bread * meat * bread;
    if dof_adjust {
        let (gf, nf, kf) = (g as f64, n as f64, k as f64);
        let factor = if nf > kf { gf / (gf - 1.0) * (nf - 1.0) / (nf - kf) } else { gf / (gf - 1.0) };
        v *= factor;
    }
    Ok(symmetrize(&v))
}

/// `(X'WX)^{-1} (sum_g s_g s_g') (X'WX)^{-1}` with `s_g` the within-cluster
/// sum of `w_i x_i e_i`.
pub fn cluster_vcov(
    design: &DMatrix<f64>,
    residuals: &[f64],
    weights: &[f64],
    clusters: &[usize],
    dof_adjust: bool,
) -> Result<DMatrix<f64>> {
    let (n, k) = (design.nrows(), design.ncols());
    if residuals.len() != n || weights.len() != n || clusters.len() != n {
        return Err(Error::InvalidArgument("cluster_vcov: dimension mismatch".into()));
    }
    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut scores = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        let xi = design.row(i);
        xtwx += xi.transpose() * xi * weights[i];
        for j in 0..k {
            scores[(i, j)] = weights[i] * design[(i, j)] * residuals[i];
        }
    }
    let bread = linalg::pinv_sym(&xtwx).ok_or_else(|| Error::RankDeficient(vec!["design".into()]))?;
    sandwich(&bread, &scores, clusters, dof_adjust)
}

/// Append `<column>_mean`, the unweighted within-individual mean over
/// non-missing waves.
pub fn mundlak_augment(panel: &PanelDataset, columns: &[String]) -> Result<PanelDataset> {
    let mut out = panel.clone();
    for c in columns {
        let v = panel.column(c)?;
        let mut means = vec![f64::NAN; panel.len()];
        for g in panel.individual_groups() {
            let (s, n) = v[g.clone()]
                .iter()
                .filter(|x| !x.is_nan())
                .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n > 0 {
                for i in g {
                    means[i] = s / n as f64;
                }
            }
        }
        out.set_column(format!("{c}_mean"), means)?;
    }
    Ok(out)
}

/// Estimation sample: complete cases with positive weight, singletons removed.
#[derive(Debug, Clone)]
pub(crate) struct Sample {
    pub rows: Vec<usize>,
    pub ids: Vec<i64>,
    pub cols: HashMap<String, Vec<f64>>,
    pub w: Vec<f64>,
    pub fe: Vec<Vec<usize>>,
    pub clusters: Vec<usize>,
    pub singletons_dropped: usize,
}

impl Sample {
    pub fn col(&self, name: &str) -> &[f64] {
        &self.cols[name]
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn matrix(&self, names: &[String]) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, names.len(), |i, j| self.cols[&names[j]][i])
    }

    /// Add within-individual means (over the sample) of `names`; returns the
    /// new names. Columns constant within every individual get no mean term.
    pub fn add_mundlak(&mut self, names: &[String]) -> Vec<String> {
        let mut out = vec![];
        for c in names {
            let v = &self.cols[c];
            let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
            for (i, &id) in self.ids.iter().enumerate() {
                let e = sums.entry(id).or_insert((0.0, 0));
                e.0 += v[i];
                e.1 += 1;
            }
            let means = self
                .ids
                .iter()
                .map(|id| {
                    let (s, n) = sums[id];
                    s / n as f64
                })
                .collect::<Vec<f64>>();
            if means.iter().zip(v).all(|(m, x)| m == x) {
                continue;
            }
            let name = format!("{c}_mean");
            self.cols.insert(name.clone(), means);
            out.push(name);
        }
        out
    }

    pub fn add_intercept(&mut self) -> String {
        self.cols.insert(INTERCEPT.to_string(), vec![1.0; self.n()]);
        INTERCEPT.to_string()
    }
}

fn cluster_codes(panel: &PanelDataset, by: ClusterBy, rows: &[usize]) -> Vec<usize> {
    match by {
        ClusterBy::Individual => dim_codes(panel, FeDim::Individual, rows),
        ClusterBy::State => dim_codes(panel, FeDim::State, rows),
        ClusterBy::Observation => (0..rows.len()).collect(),
    }
}

/// Select complete cases for `columns`, apply the filter and drop zero
/// weights, then iteratively remove singleton fixed-effect groups.
pub(crate) fn prepare(panel: &PanelDataset, spec: &ModelSpec, columns: &[String]) -> Result<Sample> {
    spec.validate()?;
    let data: Vec<&[f64]> = columns.iter().map(|c| panel.column(c)).collect::<Result<_>>()?;
    let weights = match &spec.weight {
        Some(w) => Some(panel.column(w)?),
        None => None,
    };
    let filter = match &spec.filter {
        Some(f) => Some((panel.column(&f.column)?, f.equals)),
        None => None,
    };
    let mut keep: Vec<bool> = (0..panel.len())
        .map(|i| {
            data.iter().all(|c| c[i].is_finite())
                && weights.is_none_or(|w| w[i].is_finite() && w[i] > 0.0)
                && filter.is_none_or(|(f, v)| f[i] == v)
        })
        .collect();
    let total_w: f64 = (0..panel.len())
        .filter(|&i| keep[i])
        .map(|i| weights.map_or(1.0, |w| w[i]))
        .sum();
    if !keep.iter().any(|&k| k) {
        return Err(Error::Empty("no complete observations in estimation sample".into()));
    }
    if !(total_w > 0.0) {
        return Err(Error::ZeroWeight);
    }

    let mut singletons = 0;
    if !spec.fe_dims.is_empty() {
        loop {
            let mut dropped = 0;
            for &d in &spec.fe_dims {
                let mut counts: HashMap<String, usize> = HashMap::new();
                let key = |i: usize| match d {
                    FeDim::Individual => panel.ids()[i].to_string(),
                    FeDim::State => panel.states()[i].clone(),
                    FeDim::Year => panel.years()[i].to_string(),
                };
                for i in (0..panel.len()).filter(|&i| keep[i]) {
                    *counts.entry(key(i)).or_default() += 1;
                }
                for i in 0..panel.len() {
                    if keep[i] && counts[&key(i)] == 1 {
                        keep[i] = false;
                        dropped += 1;
                    }
                }
            }
            singletons += dropped;
            if dropped == 0 {
                break;
            }
        }
    }
    let rows: Vec<usize> = (0..panel.len()).filter(|&i| keep[i]).collect();
    if rows.is_empty() {
        return Err(Error::Empty("estimation sample empty after dropping singletons".into()));
    }
    let cols = columns
        .iter()
        .zip(&data)
        .map(|(c, v)| (c.clone(), rows.iter().map(|&i| v[i]).collect()))
        .collect();
    Ok(Sample {
        ids: rows.iter().map(|&i| panel.ids()[i]).collect(),
        cols,
        w: rows.iter().map(|&i| weights.map_or(1.0, |w| w[i])).collect(),
        fe: spec.fe_dims.iter().map(|&d| dim_codes(panel, d, &rows)).collect(),
        clusters: cluster_codes(panel, spec.cluster, &rows),
        singletons_dropped: singletons,
        rows,
    })
}

pub(crate) fn sample_keys(panel: &PanelDataset, rows: &[usize]) -> Vec<(i64, i32)> {
    rows.iter().map(|&i| (panel.ids()[i], panel.years()[i])).collect()
}

pub(crate) fn fe_levels(fe: &[Vec<usize>]) -> usize {
    let total: usize = fe.iter().map(|c| c.iter().max().map_or(0, |m| m + 1)).sum();
    total.saturating_sub(fe.len().saturating_sub(1))
}

/// Regressor list for a spec: regressors, Mundlak means, then intercept.
pub(crate) fn design_names(sample: &mut Sample, spec: &ModelSpec, time_varying: &[String]) -> Vec<String> {
    let mut names = spec.regressors.clone();
    if spec.mundlak {
        names.extend(sample.add_mundlak(time_varying));
    }
    if spec.fe_dims.is_empty() && (spec.intercept || spec.mundlak) {
        names.push(sample.add_intercept());
    }
    names
}

pub(crate) fn weighted_tss(y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let m = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    y.iter().zip(w).map(|(a, b)| b * (a - m) * (a - m)).sum()
}

/// Regressors of `spec` that its fixed effects absorb completely on the
/// estimation sample (complete cases of the outcome, regressors and `extra`).
pub fn absorbed_regressors(spec: &ModelSpec, panel: &PanelDataset, extra: &[String]) -> Result<Vec<String>> {
    if spec.fe_dims.is_empty() {
        return Ok(vec![]);
    }
    let mut needed = vec![spec.outcome.clone()];
    needed.extend(spec.regressors.iter().cloned());
    needed.extend(extra.iter().cloned());
    let sample = prepare(panel, spec, &needed)?;
    let x = sample.matrix(&spec.regressors);
    let (xt, _) = absorb_with_stats(&x, &sample.fe, &sample.w)?;
    Ok(spec
        .regressors
        .iter()
        .enumerate()
        .filter(|(j, _)| xt.column(*j).amax() <= 1e-8 * x.column(*j).amax().max(1.0))
        .map(|(_, n)| n.clone())
        .collect())
}

/// Copy of `spec` without the regressors its fixed effects absorb, and the
/// names removed.
pub fn prune_absorbed(spec: &ModelSpec, panel: &PanelDataset, extra: &[String]) -> Result<(ModelSpec, Vec<String>)> {
    let gone = absorbed_regressors(spec, panel, extra)?;
    let mut out = spec.clone();
    out.regressors.retain(|r| !gone.contains(r));
    Ok((out, gone))
}

/// Weighted least squares of `spec.outcome` on `spec.regressors` with the
/// requested fixed effects absorbed.
pub fn wls_fit(spec: &ModelSpec, panel: &PanelDataset) -> Result<FitResult> {
    let mut needed = vec![spec.outcome.clone()];
    needed.extend(spec.regressors.iter().cloned());
    let mut sample = prepare(panel, spec, &needed)?;
    let names = design_names(&mut sample, spec, &spec.regressors.clone());
    let n = sample.n();

    let mut joint = DMatrix::zeros(n, names.len() + 1);
    joint.column_mut(0).copy_from_slice(sample.col(&spec.outcome));
    for (j, c) in names.iter().enumerate() {
        joint.column_mut(j + 1).copy_from_slice(sample.col(c));
    }
    let (absorbed, sweeps) = absorb_with_stats(&joint, &sample.fe, &sample.w)?;
    let y_t = DVector::from_iterator(n, absorbed.column(0).iter().copied());
    let x_t = absorbed.columns(1, names.len()).into_owned();

    let sol = linalg::solve_wls(&x_t, &y_t, &sample.w, &names)?;
    let e = &y_t - &x_t * &sol.beta;
    let residuals: Vec<f64> = e.iter().copied().collect();
    let y_raw = sample.col(&spec.outcome);
    let x_raw = sample.matrix(&names);
    let xb = &x_raw * &sol.beta;
    let fitted: Vec<f64> = y_raw.iter().zip(&residuals).map(|(y, e)| y - e).collect();
    let fe_component: Vec<f64> = fitted.iter().zip(xb.iter()).map(|(f, x)| f - x).collect();

    let ssr: f64 = residuals.iter().zip(&sample.w).map(|(e, w)| w * e * e).sum();
    let tss = weighted_tss(y_t.as_slice(), &sample.w);
    let r_squared = if tss > 0.0 { 1.0 - ssr / tss } else { f64::NAN };
    let vcov = cluster_vcov(&x_t, &residuals, &sample.w, &sample.clusters, spec.dof_adjust)?;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("condition_number".into(), sol.condition_number);
    diagnostics.insert("singletons_dropped".into(), sample.singletons_dropped as f64);
    diagnostics.insert("n_clusters".into(), encode(&sample.clusters).1 as f64);
    diagnostics.insert("absorb_sweeps".into(), sweeps as f64);
    diagnostics.insert("ssr".into(), ssr);

    Ok(FitResult {
        dof: n.saturating_sub(names.len() + fe_levels(&sample.fe)),
        names,
        coefficients: sol.beta.iter().copied().collect(),
        vcov,
        residuals,
        fitted,
        fe_component,
        n_obs: n,
        r_squared,
        weights: sample.w,
        keys: sample_keys(panel, &sample.rows),
        rows: sample.rows,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_panel() -> PanelDataset {
        // 3 individuals x 2 waves, two states
        PanelDataset::new(
            vec![1, 1, 2, 2, 3, 3],
            vec![2001, 2003, 2001, 2003, 2001, 2003],
            ["A", "A", "B", "B", "A", "A"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
        .with_column("y", vec![1.0, 2.5, 0.7, 3.1, 2.2, 2.0])
        .unwrap()
        .with_column("x", vec![0.3, 1.1, -0.4, 0.9, 0.8, 0.1])
        .unwrap()
        .with_column("w", vec![1.0, 2.0, 0.5, 1.5, 1.0, 3.0])
        .unwrap()
    }

    #[test]
    fn single_dimension_is_exact_one_pass() {
        let data = DMatrix::from_row_slice(4, 1, &[1.0, 3.0, 10.0, 20.0]);
        let w = [1.0, 3.0, 1.0, 1.0];
        let fe = vec![vec![0, 0, 1, 1]];
        let (out, sweeps) = absorb_with_stats(&data, &fe, &w).unwrap();
        assert_eq!(sweeps, 1);
        // weighted means 2.5 and 15
        assert_eq!(out.as_slice(), &[-1.5, 0.5, -5.0, 5.0]);
    }

    #[test]
    fn group_constant_column_absorbed() {
        let data = DMatrix::from_row_slice(5, 1, &[4.0, 4.0, -2.0, -2.0, -2.0]);
        let fe = vec![vec![0, 0, 1, 1, 1], vec![0, 1, 0, 1, 0]];
        let out = absorb_fe(&data, &fe, &[1.0, 2.0, 1.0, 1.0, 0.5]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn absorbed_group_means_vanish() {
        let data = DMatrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * i as f64);
        let fe = vec![(0..12).map(|i| i % 4).collect::<Vec<_>>(), (0..12).map(|i| i % 3).collect()];
        let w: Vec<f64> = (0..12).map(|i| 1.0 + (i % 3) as f64).collect();
        let out = absorb_fe(&data, &fe, &w).unwrap();
        for codes in &fe {
            for g in 0..4 {
                let (mut s, mut sw) = (0.0, 0.0);
                for i in (0..12).filter(|&i| codes[i] == g) {
                    s += w[i] * out[(i, 0)];
                    sw += w[i];
                }
                if sw > 0.0 {
                    assert!((s / sw).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn intercept_only_is_mean() {
        let p = toy_panel();
        let f = wls_fit(&ModelSpec::new("y", &[]), &p).unwrap();
        let mean = p.column("y").unwrap().iter().sum::<f64>() / 6.0;
        assert!((f.coefficients[0] - mean).abs() < 1e-12);
        assert_eq!(f.names, vec![INTERCEPT.to_string()]);
    }

    #[test]
    fn exact_linear_fit() {
        let p = toy_panel();
        let x = p.column("x").unwrap().to_vec();
        let p = p.with_column("y2", x.iter().map(|v| 3.0 - 2.0 * v).collect()).unwrap();
        let f = wls_fit(&ModelSpec::new("y2", &["x"]).weight("w"), &p).unwrap();
        assert!((f.coef("x").unwrap() + 2.0).abs() < 1e-12);
        assert!((f.coef(INTERCEPT).unwrap() - 3.0).abs() < 1e-12);
        assert!(f.residuals.iter().all(|e| e.abs() <= 1e-12));
    }

    #[test]
    fn four_point_weighted_normal_equations() {
        // hand-solved normal equations for x = (0,1,2,3), y = (1,2,2,5), w = (1,2,1,2):
        // sum w = 6, sum wx = 10, sum wx^2 = 24, sum wy = 17, sum wxy = 38
        // slope = (6*38 - 10*17) / (6*24 - 100) = 58/44, intercept = (17 - 10*slope)/6
        let p = PanelDataset::new(vec![1, 2, 3, 4], vec![2001; 4], vec!["A".into(); 4])
            .unwrap()
            .with_column("x", vec![0.0, 1.0, 2.0, 3.0])
            .unwrap()
            .with_column("y", vec![1.0, 2.0, 2.0, 5.0])
            .unwrap()
            .with_column("w", vec![1.0, 2.0, 1.0, 2.0])
            .unwrap();
        let f = wls_fit(&ModelSpec::new("y", &["x"]).weight("w"), &p).unwrap();
        let slope = 58.0 / 44.0;
        let intercept = (17.0 - 10.0 * slope) / 6.0;
        assert!((f.coef("x").unwrap() - slope).abs() < 1e-12);
        assert!((f.coef(INTERCEPT).unwrap() - intercept).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_column() {
        let p = toy_panel();
        let x = p.column("x").unwrap().to_vec();
        let p = p.with_column("x2", x.iter().map(|v| 2.0 * v).collect()).unwrap();
        match wls_fit(&ModelSpec::new("y", &["x", "x2"]), &p) {
            Err(Error::RankDeficient(c)) => assert_eq!(c, vec!["x2".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_weight_rejected() {
        let p = toy_panel().with_column("z", vec![0.0; 6]).unwrap();
        assert!(wls_fit(&ModelSpec::new("y", &["x"]).weight("z"), &p).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new("y", &["y"]).validate().is_err());
        assert!(ModelSpec::new("y", &["x"]).fe(&[FeDim::Individual]).mundlak(true).validate().is_err());
    }

    #[test]
    fn singleton_groups_dropped() {
        let p = toy_panel();
        let keep = [true, true, true, true, true, false];
        let p = p.filter_rows(&keep);
        let f = wls_fit(&ModelSpec::new("y", &["x"]).fe(&[FeDim::Individual]), &p).unwrap();
        assert_eq!(f.n_obs, 4);
        assert_eq!(f.diagnostics["singletons_dropped"], 1.0);
    }

    #[test]
    fn own_cluster_equals_hc0_times_dof() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 4.0]);
        let e = [0.5, -0.2, 0.1, -0.3];
        let w = [1.0, 2.0, 1.0, 0.5];
        let v = cluster_vcov(&x, &e, &w, &[0, 1, 2, 3], false).unwrap();
        let mut xtwx = DMatrix::zeros(2, 2);
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..4 {
            let r = x.row(i);
            xtwx += r.transpose() * r * w[i];
            meat += r.transpose() * r * (w[i] * e[i]).powi(2);
        }
        let b = xtwx.try_inverse().unwrap();
        let hc0 = &b * meat * &b;
        assert!((v - hc0).abs().max() < 1e-12);
    }

    #[test]
    fn zero_residuals_zero_vcov() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let v = cluster_vcov(&x, &[0.0; 3], &[1.0; 3], &[0, 1, 1], true).unwrap();
        assert!(v.iter().all(|&a| a == 0.0));
        assert!(matches!(
            cluster_vcov(&x, &[0.0; 3], &[1.0; 3], &[4, 4, 4], true),
            Err(Error::TooFewClusters(1))
        ));
    }

    #[test]
    fn mundlak_means() {
        let p = PanelDataset::new(vec![1, 1, 2, 2], vec![2001, 2003, 2001, 2003], vec!["A".into(); 4])
            .unwrap()
            .with_column("v", vec![2.0, 4.0, 7.0, 7.0])
            .unwrap();
        let m = mundlak_augment(&p, &["v".into()]).unwrap();
        assert_eq!(m.column("v_mean").unwrap(), &[3.0, 3.0, 7.0, 7.0]);
        assert!(mundlak_augment(&p, &["nope".into()]).is_err());
    }

    #[test]
    fn absorbed_regressors_pruned() {
        let p = toy_panel().with_column("g", vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let spec = ModelSpec::new("y", &["x", "g"]).fe(&[FeDim::Individual]);
        assert!(matches!(wls_fit(&spec, &p), Err(Error::RankDeficient(_))));
        let (pruned, gone) = prune_absorbed(&spec, &p, &[]).unwrap();
        assert_eq!(gone, vec!["g".to_string()]);
        assert!(wls_fit(&pruned, &p).is_ok());
        let pooled = ModelSpec::new("y", &["x", "g"]);
        assert!(absorbed_regressors(&pooled, &p, &[]).unwrap().is_empty());
    }

    #[test]
    fn mundlak_skips_time_invariant() {
        let p = toy_panel().with_column("g", vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let f = wls_fit(&ModelSpec::new("y", &["x", "g"]).fe(&[FeDim::Year]).mundlak(true), &p).unwrap();
        assert!(f.index("x_mean").is_some() && f.index("g_mean").is_none());
    }
}
