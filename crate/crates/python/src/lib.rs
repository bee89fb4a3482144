//! Python bindings for the pfsnap core library.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pfsnap::pipeline::{run_pipeline as run, PipelineConfig};
use pfsnap::synth::{self, SynthConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: pfsnap::Error) -> PyErr {
    match e {
        pfsnap::Error::InvalidArgument(_) | pfsnap::Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Regularized lower incomplete gamma P(alpha, x).
#[pyfunction]
fn gamma_cdf_reg(alpha: f64, x: f64) -> PyResult<f64> {
    pfsnap::gamma::gamma_cdf_reg(alpha, x).map_err(to_py)
}

/// Probability that expenditure reaches `threshold` given mean and variance.
#[pyfunction]
fn compute_pfs(w_hat: f64, sigma2_hat: f64, threshold: f64) -> PyResult<f64> {
    pfsnap::pfs::compute_pfs(w_hat, sigma2_hat, threshold).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (values, p, weights=None))]
fn weighted_quantile(values: Vec<f64>, p: f64, weights: Option<Vec<f64>>) -> PyResult<f64> {
    pfsnap::stats::weighted_quantile(&values, weights.as_deref(), p).map_err(to_py)
}

/// Unweighted and weighted SPI for every row of a policy CSV as
/// `(state_id, year, unweighted, weighted)` tuples.
#[pyfunction]
fn spi_table(policy_csv: PathBuf) -> PyResult<Vec<(String, i32, f64, f64)>> {
    let records = pfsnap::spi::load_policy(&policy_csv).map_err(to_py)?;
    let rows = pfsnap::spi::spi_table(&records, &pfsnap::spi::SpiWeights::default()).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.state_id, r.year, r.spi_unweighted, r.spi_weighted)).collect())
}

/// Quantile regression coefficients of `y` on the columns of `x`; an
/// intercept is prepended to the returned vector.
#[pyfunction]
#[pyo3(signature = (y, x, tau, weights=None))]
fn qreg(y: Vec<f64>, x: Vec<Vec<f64>>, tau: f64, weights: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let n = y.len();
    if x.iter().any(|c| c.len() != n) {
        return Err(PyValueError::new_err("every column of x must have len(y) entries"));
    }
    let w = weights.unwrap_or_else(|| vec![1.0; n]);
    if w.len() != n {
        return Err(PyValueError::new_err("weights must have len(y) entries"));
    }
    let k = x.len() + 1;
    let design = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { x[j - 1][i] });
    let mut names = vec![pfsnap::regress::INTERCEPT.to_string()];
    names.extend((1..k).map(|j| format!("x{j}")));
    let (b, _, _, _) = pfsnap::quantile::rq_solve(&design, &y, &w, tau, &names).map_err(to_py)?;
    Ok(b.iter().copied().collect())
}

/// Write a synthetic input bundle and return its row count.
#[pyfunction]
#[pyo3(signature = (out, seed=1, n_individuals=1200, n_waves=9))]
fn simulate(out: PathBuf, seed: u64, n_individuals: usize, n_waves: usize) -> PyResult<usize> {
    let cfg = SynthConfig {
        seed,
        n_individuals,
        n_waves,
        ..SynthConfig::default()
    };
    let bundle = synth::generate_panel(&cfg).map_err(to_py)?;
    synth::write_bundle(&bundle, &out).map_err(to_py)?;
    Ok(bundle.panel.len())
}

/// Run every pipeline stage from a TOML config; returns the manifest JSON.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run_pipeline(config: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = PipelineConfig::load(&config).map_err(to_py)?;
    if let Some(o) = out {
        cfg.out = o;
    }
    let manifest = run(&cfg).map_err(to_py)?;
    serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn pfsnap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gamma_cdf_reg, m)?)?;
    m.add_function(wrap_pyfunction!(compute_pfs, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(spi_table, m)?)?;
    m.add_function(wrap_pyfunction!(qreg, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
