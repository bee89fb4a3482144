use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pfsnap::glm::{logit_fit, poisson_qmle, Family, GlmSpec};
use pfsnap::iv::{semi_elasticity, tsls_fit};
use pfsnap::panel::{PanelDataset, WEIGHT};
use pfsnap::pfs::{calibrate_cutoffs, compute_pfs, flag_food_insecure};
use pfsnap::pipeline::{run_pipeline, PipelineConfig, WeightMode};
use pfsnap::quantile::{default_taus, qreg_fit};
use pfsnap::regress::{wls_fit, ClusterBy, FeDim, FitResult, ModelSpec, INTERCEPT};
use pfsnap::spi::{unweighted_spi, weighted_raw, weighted_spi, PolicyRecord, SpiWeights};
use pfsnap::stats::weighted_quantile;
use pfsnap::synth::{generate_panel, monte_carlo, quantile_monte_carlo, write_bundle, Estimator, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Print one verdict line outside the test harness capture and fail the
/// test unless both the check and the time limit hold.
fn verdict(n: usize, name: &str, pass: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let in_time = elapsed <= limit;
    let ok = pass && in_time;
    let line = format!(
        "criterion {n:>2} {name}: {} ({detail}; {:.2}s of {}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "{}", line.trim_end());
}

#[test]
fn c01_spi_endpoints() {
    let t = Instant::now();
    let hi = unweighted_spi(&PolicyRecord::all_generous("X", 2001)).unwrap();
    let lo = unweighted_spi(&PolicyRecord::all_restrictive("X", 2001)).unwrap();
    let pass = hi == 10.0 && lo == 1.0;
    verdict(1, "spi endpoints", pass, &format!("generous {hi}, restrictive {lo}"), t.elapsed(), Duration::from_secs(1));
}

#[test]
fn c02_weighted_spi_bounds() {
    let t = Instant::now();
    let w = SpiWeights::default();
    let gen = PolicyRecord::all_generous("X", 2001);
    let res = PolicyRecord::all_restrictive("X", 2001);
    let raw_hi = weighted_raw(&gen, &w).unwrap();
    let raw_lo = weighted_raw(&res, &w).unwrap();
    let hi = weighted_spi(&gen, &w).unwrap();
    let lo = weighted_spi(&res, &w).unwrap();
    let pass = (raw_hi - 5.464).abs() <= 1e-12 && (raw_lo + 9.844).abs() <= 1e-12 && (hi - 10.0).abs() <= 1e-12 && (lo - 1.0).abs() <= 1e-12;
    verdict(
        2,
        "weighted spi bounds",
        pass,
        &format!("raw ({raw_hi}, {raw_lo}), scaled ({hi}, {lo})"),
        t.elapsed(),
        Duration::from_secs(1),
    );
}

fn ln_gamma_oracle(a: f64) -> f64 {
    statrs::function::gamma::ln_gamma(a)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    // split into panels so the adaptive rule sees the peak
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 40)
        })
        .sum()
}

/// Regularized lower incomplete gamma by direct quadrature of the density.
/// Shapes below one use t = u^(1/a), which removes the singularity at 0.
fn gamma_p_quadrature(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if a < 1.0 {
        let norm = ln_gamma_oracle(a + 1.0);
        let f = move |u: f64| (-u.powf(1.0 / a) - norm).exp();
        return integrate(&f, 0.0, x.powf(a), 1e-13);
    }
    let norm = ln_gamma_oracle(a);
    let f = move |t: f64| if t <= 0.0 { if a == 1.0 { (-norm).exp() } else { 0.0 } } else { ((a - 1.0) * t.ln() - t - norm).exp() };
    // integrate over the shorter side of the mode
    if x <= a {
        integrate(&f, 0.0, x, 1e-13)
    } else {
        let upper = (a + 40.0 * a.sqrt() + 60.0).max(x + 60.0);
        1.0 - integrate(&f, x, upper, 1e-13)
    }
}

#[test]
fn c03_gamma_kernel() {
    let t = Instant::now();
    let alphas: Vec<f64> = (0..20).map(|i| 0.1 * (500.0_f64).powf(i as f64 / 19.0)).collect();
    let xs: Vec<f64> = (0..10).map(|j| 100.0 * j as f64 / 9.0).collect();
    let mut worst = 0.0_f64;
    let mut at = (0.0, 0.0);
    for &a in &alphas {
        for &x in &xs {
            let got = pfsnap::gamma::gamma_cdf_reg(a, x).unwrap();
            let want = gamma_p_quadrature(a, x);
            let err = (got - want).abs();
            if err > worst {
                worst = err;
                at = (a, x);
            }
        }
    }
    let half = pfsnap::gamma::gamma_cdf_reg(1.0, std::f64::consts::LN_2).unwrap();
    let pass = worst <= 1e-8 && (half - 0.5).abs() <= 1e-12;
    verdict(
        3,
        "gamma kernel",
        pass,
        &format!("200 points, max error {worst:.2e} at {at:?}; P(1, ln 2) - 0.5 = {:.1e}", half - 0.5),
        t.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn c04_pfs_suite() {
    let t = Instant::now();
    let mut failures = vec![];
    let grid = |lo: f64, hi: f64| -> Vec<f64> { (0..100).map(|i| lo + (hi - lo) * i as f64 / 99.0).collect() };
    for &w in &grid(1.0, 500.0) {
        for s2 in [0.0, 1e-6, 1.0, 100.0, 1e5] {
            if compute_pfs(w, s2, 0.0).unwrap() != 1.0 {
                failures.push(format!("threshold 0 at ({w}, {s2})"));
            }
        }
    }
    for &w in &grid(10.0, 400.0) {
        for &th in &grid(5.0, 405.0) {
            let want = if w >= th { 1.0 } else { 0.0 };
            if compute_pfs(w, 0.0, th).unwrap() != want || compute_pfs(w, 1e-13, th).unwrap() != want {
                failures.push(format!("point mass at ({w}, {th})"));
            }
            if (w - th).abs() > 0.05 * w {
                let near = compute_pfs(w, 1e-10 * w * w, th).unwrap();
                if (near - want).abs() > 1e-6 {
                    failures.push(format!("small-variance limit at ({w}, {th}): {near}"));
                }
            }
        }
    }
    for (w, s2) in [(150.0, 900.0), (50.0, 5000.0), (300.0, 1e4), (20.0, 4000.0)] {
        let vals: Vec<f64> = grid(0.0, 600.0).iter().map(|&th| compute_pfs(w, s2, th).unwrap()).collect();
        if vals.windows(2).any(|p| p[1] > p[0]) {
            failures.push(format!("threshold monotonicity at ({w}, {s2})"));
        }
    }
    // fixed coefficient of variation: a scale family, monotone in the mean
    for (cv, th) in [(0.2, 150.0), (0.5, 80.0), (1.5, 200.0)] {
        let vals: Vec<f64> = grid(10.0, 600.0).iter().map(|&w| compute_pfs(w, (cv * w) * (cv * w), th).unwrap()).collect();
        if vals.windows(2).any(|p| p[1] < p[0]) {
            failures.push(format!("mean monotonicity at cv {cv}"));
        }
    }
    // fixed variance with shape at least one and threshold below the mean
    for (s2, th) in [(400.0_f64, 50.0_f64), (2500.0, 40.0)] {
        let lo = th.max(s2.sqrt());
        let vals: Vec<f64> = grid(lo, lo + 500.0).iter().map(|&w| compute_pfs(w, s2, th).unwrap()).collect();
        if vals.windows(2).any(|p| p[1] < p[0]) {
            failures.push(format!("mean monotonicity at variance {s2}"));
        }
    }
    let detail = if failures.is_empty() { "all grids hold".to_string() } else { failures[..failures.len().min(3)].join("; ") };
    verdict(4, "pfs degenerate and monotone", failures.is_empty(), &detail, t.elapsed(), Duration::from_secs(5));
}

#[test]
fn c05_cutoff_calibration() {
    let t = Instant::now();
    let n = 10_000;
    let targets = [0.1, 0.13, 0.24, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pfs = vec![];
    let mut w = vec![];
    let mut years = vec![];
    let mut map = BTreeMap::new();
    for (k, &target) in targets.iter().enumerate() {
        let year = 2001 + 2 * k as i32;
        map.insert(year, target);
        for _ in 0..n {
            let u: f64 = rng.random();
            pfs.push(u.powf(0.3));
            w.push(0.5 + rng.random::<f64>());
            years.push(year);
        }
    }
    let (schedule, _) = calibrate_cutoffs(&pfs, &w, &years, &map).unwrap();
    let mut worst = 0.0_f64;
    for (&year, &target) in &map {
        let c = schedule.get(year).unwrap();
        let (mut flagged, mut total) = (0.0, 0.0);
        for i in 0..pfs.len() {
            if years[i] == year {
                total += w[i];
                if flag_food_insecure(pfs[i], c) {
                    flagged += w[i];
                }
            }
        }
        worst = worst.max((flagged / total - target).abs());
    }
    let bound = 2.0 / n as f64;
    verdict(
        5,
        "cutoff calibration",
        worst <= bound,
        &format!("max |share - target| {worst:.2e}, bound {bound:.0e}"),
        t.elapsed(),
        Duration::from_secs(5),
    );
}

fn random_panel(rng: &mut ChaCha8Rng, n_ind: usize, n_years: usize) -> PanelDataset {
    let mut ids = vec![];
    let mut years = vec![];
    let mut states = vec![];
    for i in 0..n_ind {
        for t in 0..n_years {
            ids.push(i as i64);
            years.push(2000 + t as i32);
            states.push(format!("S{}", i % 3));
        }
    }
    let n = ids.len();
    let mut p = PanelDataset::new(ids, years, states).unwrap();
    let col = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect() };
    let x1 = col(rng);
    let x2 = col(rng);
    let z = col(rng);
    let e = col(rng);
    let alpha: Vec<f64> = (0..n_ind).map(|_| rng.random::<f64>()).collect();
    let d: Vec<f64> = (0..n).map(|i| 0.8 * z[i] + 0.3 * x1[i] + alpha[i / n_years] + 0.5 * e[i] + 0.2 * rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * d[i] - 0.7 * x1[i] + 0.2 * x2[i] + alpha[i / n_years] + e[i] + 0.3 * rng.random::<f64>())
        .collect();
    let w: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
    for (name, v) in [("x1", x1), ("x2", x2), ("z", z), ("d", d), ("y", y), ("w", w)] {
        p.set_column(name, v).unwrap();
    }
    p
}

/// Weighted least squares with explicit individual and year dummies, solved
/// by SVD on the square-root-weighted design.
fn dummy_ols(p: &PanelDataset, y: &str, xs: &[&str], w: &str) -> Vec<f64> {
    let n = p.len();
    let ids: Vec<i64> = p.ids().to_vec();
    let mut uid = ids.clone();
    uid.sort();
    uid.dedup();
    let mut uy: Vec<i32> = p.years().to_vec();
    uy.sort();
    uy.dedup();
    let k = xs.len() + uid.len() + uy.len() - 1;
    let wv = p.column(w).unwrap();
    let mut x = DMatrix::zeros(n, k);
    let mut yv = DVector::zeros(n);
    for i in 0..n {
        let s = wv[i].sqrt();
        for (j, c) in xs.iter().enumerate() {
            x[(i, j)] = s * p.column(c).unwrap()[i];
        }
        x[(i, xs.len() + uid.binary_search(&ids[i]).unwrap())] = s;
        let yi = uy.binary_search(&p.years()[i]).unwrap();
        if yi > 0 {
            x[(i, xs.len() + uid.len() + yi - 1)] = s;
        }
        yv[i] = s * p.column(y).unwrap()[i];
    }
    let b = x.svd(true, true).solve(&yv, 1e-14).unwrap();
    b.iter().take(xs.len()).copied().collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn c06_estimation_identities() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = BTreeMap::<&str, f64>::new();
    let mut bump = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };
    for _ in 0..20 {
        let n_ind = rng.random_range(4..9);
        let n_years = rng.random_range(3..6);
        let p = random_panel(&mut rng, n_ind, n_years);
        let fe = ModelSpec::new("y", &["x1", "x2"]).fe(&[FeDim::Individual, FeDim::Year]).weight("w");
        let fit = wls_fit(&fe, &p).unwrap();
        let oracle = dummy_ols(&p, "y", &["x1", "x2"], "w");
        for (j, name) in ["x1", "x2"].iter().enumerate() {
            bump("fe_vs_dummies", rel(fit.coef(name).unwrap(), oracle[j]));
        }

        let ctl = ModelSpec::new("y", &["x1"]).fe(&[FeDim::Individual, FeDim::Year]).weight("w").cluster(ClusterBy::Individual);
        let iv = tsls_fit(&ctl, &["d".to_string()], &["z".to_string()], &p).unwrap();
        let mut rf = ctl.clone();
        rf.regressors = vec!["z".into(), "x1".into()];
        let mut fs = rf.clone();
        fs.outcome = "d".into();
        let rf_fit = wls_fit(&rf, &p).unwrap();
        let fs_fit = wls_fit(&fs, &p).unwrap();
        let ratio = rf_fit.coef("z").unwrap() / fs_fit.coef("z").unwrap();
        bump("tsls_vs_indirect", rel(iv.coef("d").unwrap(), ratio));
        let tstat = fs_fit.coef("z").unwrap() / fs_fit.se("z").unwrap();
        bump("kp_f_vs_t2", rel(iv.kp_f, tstat * tstat));
    }

    let n = 300;
    let mut p = PanelDataset::new((0..n as i64).collect(), vec![2001; n], vec!["S".into(); n]).unwrap();
    let counts: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64).collect();
    let binary: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
    let w: Vec<f64> = (0..n).map(|_| 0.2 + 2.0 * rng.random::<f64>()).collect();
    p.set_column("c", counts.clone()).unwrap();
    p.set_column("b", binary.clone()).unwrap();
    p.set_column("w", w.clone()).unwrap();
    let sw: f64 = w.iter().sum();
    let mean_c = counts.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let share = binary.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let pois = poisson_qmle(&GlmSpec::new(Family::Poisson, ModelSpec::new("c", &[]).weight("w")), &p).unwrap();
    bump("poisson_intercept", (pois.coef(INTERCEPT).unwrap() - mean_c.ln()).abs());
    let logit = logit_fit(&GlmSpec::new(Family::Logit, ModelSpec::new("b", &[]).weight("w")), &p).unwrap();
    bump("logit_intercept", (logit.coef(INTERCEPT).unwrap() - (share / (1.0 - share)).ln()).abs());

    let mut qr_mismatch = 0;
    for trial in 0..30 {
        let m = rng.random_range(3..40);
        let mut q = PanelDataset::new((0..m as i64).collect(), vec![2001; m], vec!["S".into(); m]).unwrap();
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(0..8) as f64).collect();
        let wq: Vec<f64> = (0..m).map(|_| if trial % 2 == 0 { 1.0 } else { 0.1 + rng.random::<f64>() }).collect();
        q.set_column("y", y.clone()).unwrap();
        q.set_column("w", wq.clone()).unwrap();
        for tau in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let b = qreg_fit(&ModelSpec::new("y", &[]).weight("w"), tau, &q).unwrap().coef(INTERCEPT).unwrap();
            if b != weighted_quantile(&y, Some(&wq), tau).unwrap() {
                qr_mismatch += 1;
            }
        }
    }

    let pass = worst["fe_vs_dummies"] <= 1e-8
        && worst["tsls_vs_indirect"] <= 1e-8
        && worst["kp_f_vs_t2"] <= 1e-8
        && worst["poisson_intercept"] <= 1e-10
        && worst["logit_intercept"] <= 1e-10
        && qr_mismatch == 0;
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ") + &format!(", quantile mismatches {qr_mismatch}");
    verdict(6, "estimation identities", pass, &detail, t.elapsed(), Duration::from_secs(30));
}

#[test]
fn c07_monte_carlo_recovery() {
    let t = Instant::now();
    let cfg = SynthConfig::default();
    let rows = monte_carlo(200, &cfg, &[Estimator::Ols, Estimator::Tsls, Estimator::ThreeStep]).unwrap();
    let (ols, tsls, three) = (&rows[0], &rows[1], &rows[2]);
    let checks = [
        ("first-stage F", tsls.median_kp_f > 10.0),
        ("ols bias", ols.bias < -0.02 && ols.sign_p_negative < 0.01),
        ("2sls bias", tsls.bias.abs() <= 0.02),
        ("2sls coverage", (0.90..=0.99).contains(&tsls.coverage)),
        ("three-step gap", (three.bias - tsls.bias).abs() <= 0.03),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "ols bias {:.4} (p {:.1e}), 2sls bias {:.4} coverage {:.3} median F {:.1}, three-step bias {:.4}{}",
        ols.bias,
        ols.sign_p_negative,
        tsls.bias,
        tsls.coverage,
        tsls.median_kp_f,
        three.bias,
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    verdict(7, "monte carlo recovery", failed.is_empty(), &detail, t.elapsed(), Duration::from_secs(600));
}

/// Synthetic design whose participation effect is concentrated around the
/// median rank of the expenditure shock.
pub fn hump_config() -> SynthConfig {
    SynthConfig {
        effect_bump: 0.25,
        effect_bump_width: 0.25,
        relevance: 0.6,
        ..SynthConfig::default()
    }
}

#[test]
fn c08_distributional_shape() {
    let t = Instant::now();
    let taus = default_taus();
    let mc = quantile_monte_carlo(50, &hump_config(), &taus).unwrap();
    let last = taus.len() - 1;
    let peak = (0..taus.len()).fold(0, |b, k| if mc.mean[k] > mc.mean[b] { k } else { b });
    let pooled = |a: usize, b: usize| (mc.mc_se[a].powi(2) + mc.mc_se[b].powi(2)).sqrt();
    let z_lo = (mc.mean[peak] - mc.mean[0]) / pooled(peak, 0);
    let z_hi = (mc.mean[peak] - mc.mean[last]) / pooled(peak, last);
    let pass = peak != 0 && peak != last && z_lo >= 2.0 && z_hi >= 2.0 && mc.failures == 0;
    verdict(
        8,
        "distributional shape",
        pass,
        &format!(
            "peak tau {} mean {:.4}; endpoints {:.4} and {:.4}; margins {:.2} and {:.2} pooled SEs",
            taus[peak], mc.mean[peak], mc.mean[0], mc.mean[last], z_lo, z_hi
        ),
        t.elapsed(),
        Duration::from_secs(300),
    );
}

fn bundle_dir(root: &Path, cfg: &SynthConfig, unit_weights: bool) -> std::path::PathBuf {
    let dir = root.join(if unit_weights { "unit" } else { "survey" });
    let mut b = generate_panel(cfg).unwrap();
    if unit_weights {
        let n = b.panel.len();
        b.panel.set_column(WEIGHT, vec![1.0; n]).unwrap();
    }
    write_bundle(&b, &dir).unwrap();
    dir
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn c09_weighting_plumbing() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_individuals: 400,
        ..SynthConfig::default()
    };
    let mut notes = vec![];
    let mut pass = true;
    for unit in [true, false] {
        let input = bundle_dir(tmp.path(), &cfg, unit);
        let tag = if unit { "unit" } else { "survey" };
        let a = PipelineConfig::for_bundle(&input, tmp.path().join(format!("{tag}_w")));
        let b = PipelineConfig {
            weights: WeightMode::None,
            out: tmp.path().join(format!("{tag}_none")),
            ..a.clone()
        };
        run_pipeline(&a).unwrap();
        run_pipeline(&b).unwrap();
        let (da, db) = (dir_bytes(&a.out), dir_bytes(&b.out));
        let tables: Vec<&String> = da.keys().filter(|k| k.starts_with("estimates_") || k.starts_with("quantile") || k.starts_with("fs_by")).collect();
        let same: Vec<bool> = tables.iter().map(|k| da[*k] == db[*k]).collect();
        let weight_free = da["spi.csv"] == db["spi.csv"];
        if unit {
            let ok = same.iter().all(|&s| s) && weight_free;
            notes.push(format!("unit weights: {} of {} tables identical", same.iter().filter(|&&s| s).count(), same.len()));
            pass &= ok;
        } else {
            let ok = same.iter().all(|&s| !s) && weight_free;
            notes.push(format!("survey weights: {} of {} tables differ, spi identical {weight_free}", same.iter().filter(|&&s| !s).count(), same.len()));
            pass &= ok;
        }
    }
    verdict(9, "weighting plumbing", pass, &notes.join("; "), t.elapsed(), Duration::from_secs(60));
}

fn coefficient_fit(name: &str, value: f64) -> FitResult {
    FitResult {
        names: vec![name.to_string()],
        coefficients: vec![value],
        vcov: DMatrix::zeros(1, 1),
        residuals: vec![],
        fitted: vec![],
        fe_component: vec![],
        rows: vec![],
        keys: vec![],
        weights: vec![],
        n_obs: 0,
        r_squared: f64::NAN,
        dof: 0,
        diagnostics: BTreeMap::new(),
    }
}

#[test]
fn c10_semi_elasticity_arithmetic() {
    let t = Instant::now();
    let a = semi_elasticity(&coefficient_fit("ln_income", 0.009), "ln_income", 3.12).unwrap();
    let b = semi_elasticity(&coefficient_fit("ln_income", 0.020), "ln_income", 1.73).unwrap();
    // a coefficient printed to three decimals lies within half a unit of the
    // last digit, so the product lies within that half-unit times the mean
    let within = |got: f64, coef: f64, mean: f64, reported: f64| {
        let lo = (coef - 0.0005) * mean;
        let hi = (coef + 0.0005) * mean;
        (lo..=hi).contains(&reported) && (got - coef * mean).abs() <= 1e-15
    };
    let pass = (a - 0.02808).abs() <= 1e-15
        && (b - 0.0346).abs() <= 1e-15
        && within(a, 0.009, 3.12, 0.027)
        && within(b, 0.020, 1.73, 0.035)
        && (b * 1000.0).round() / 1000.0 == 0.035;
    verdict(
        10,
        "semi-elasticity arithmetic",
        pass,
        &format!("0.009 x 3.12 = {a}, 0.020 x 1.73 = {b}"),
        t.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn c11_pipeline_determinism() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_bundle(&generate_panel(&SynthConfig::default()).unwrap(), &input).unwrap();
    let mut outs = vec![];
    for (k, threads) in [1usize, 4, 4].iter().enumerate() {
        let cfg = PipelineConfig::for_bundle(&input, tmp.path().join(format!("run{k}")));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(*threads).build().unwrap();
        pool.install(|| run_pipeline(&cfg)).unwrap();
        outs.push(dir_bytes(&cfg.out));
    }
    let files = outs[0].len();
    let pass = outs.windows(2).all(|p| p[0] == p[1]) && files >= 12;
    verdict(
        11,
        "pipeline determinism",
        pass,
        &format!("{files} files identical across runs on 1, 4 and 4 threads"),
        t.elapsed(),
        Duration::from_secs(120),
    );
}
