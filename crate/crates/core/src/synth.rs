//! Synthetic panels with a fully known data-generating process and a Monte
//! Carlo harness for the participation-effect estimators.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, entity, wave, stream)`, so output does not depend on the order in
//! which individuals are generated or on the number of worker threads.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::error::{Error, Result};
use crate::iv::{three_step_iv_with, tsls_fit, LogitEffects};
use crate::panel::{self, fmt_f64, PanelDataset};
use crate::quantile::quantile_effect_profile;
use crate::regress::{prune_absorbed, wls_fit, ClusterBy, FeDim, ModelSpec};
use crate::spi::{self, PolicyRecord, SpiWeights};

const STREAM_STATE: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_PERSON: u64 = 3;
const STREAM_WAVE: u64 = 4;

/// Log expenditure, the outcome whose participation effect is known.
pub const LOG_FOOD_EXP: &str = "log_food_exp";
/// Participation instrument column used by the Monte Carlo harness.
pub const MC_INSTRUMENT: &str = "spi";
/// Time-varying covariates the generator produces.
pub const TIME_VARYING: [&str; 5] = ["rp_age", "rp_age_sq", "rp_married", "rp_employed", "rp_disabled"];
const SPI_CENTER: f64 = 5.5;
const HH_SHARES: [f64; 6] = [0.30, 0.25, 0.18, 0.15, 0.08, 0.04];
const TFP_SCALE: [f64; 6] = [1.20, 1.10, 1.00, 0.95, 0.95, 0.90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_individuals: usize,
    /// Biennial waves starting at `first_year`.
    pub n_waves: usize,
    pub first_year: i32,
    pub n_states: usize,
    pub seed: u64,
    pub log_exp_intercept: f64,
    pub individual_sd: f64,
    /// Marginal sd of the AR(1) expenditure shock.
    pub shock_sd: f64,
    pub shock_ar: f64,
    /// Participation effect on log expenditure away from the bump.
    pub treatment_effect: f64,
    /// Extra effect at the median rank of the expenditure shock.
    pub effect_bump: f64,
    pub effect_bump_width: f64,
    /// Correlation between the participation shock and the expenditure
    /// innovation; negative means adverse selection.
    pub selection: f64,
    /// Latent-index coefficient on the weighted SPI.
    pub relevance: f64,
    pub snap_intercept: f64,
    pub policy_trend: f64,
    pub policy_state_sd: f64,
    pub policy_component_sd: f64,
    pub policy_year_sd: f64,
    pub prevalence_base: f64,
    pub prevalence_cycle: f64,
    /// CPI growth per wave.
    pub cpi_growth: f64,
    /// Monthly per-person food plan cost in first-year dollars.
    pub tfp_base: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_individuals: 1200,
            n_waves: 9,
            first_year: 2001,
            n_states: 20,
            seed: 1,
            log_exp_intercept: 5.4,
            individual_sd: 0.3,
            shock_sd: 0.3,
            shock_ar: 0.5,
            treatment_effect: 0.10,
            effect_bump: 0.0,
            effect_bump_width: 0.2,
            selection: -0.5,
            relevance: 0.3,
            snap_intercept: -1.0,
            policy_trend: 0.25,
            policy_state_sd: 1.0,
            policy_component_sd: 0.8,
            policy_year_sd: 0.3,
            prevalence_base: 0.12,
            prevalence_cycle: 0.02,
            cpi_growth: 0.05,
            tfp_base: 170.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_individuals < 2 {
            return bad(format!("n_individuals must be at least 2, got {}", self.n_individuals));
        }
        if self.n_waves < 2 {
            return bad(format!("n_waves must be at least 2, got {}", self.n_waves));
        }
        if self.n_states < 2 {
            return bad(format!("n_states must be at least 2, got {}", self.n_states));
        }
        if !(self.selection > -1.0 && self.selection < 1.0) {
            return bad(format!("selection must lie in (-1, 1), got {}", self.selection));
        }
        if !(self.shock_ar > -1.0 && self.shock_ar < 1.0) {
            return bad(format!("shock_ar must lie in (-1, 1), got {}", self.shock_ar));
        }
        for (name, v) in [
            ("individual_sd", self.individual_sd),
            ("shock_sd", self.shock_sd),
            ("policy_state_sd", self.policy_state_sd),
            ("policy_component_sd", self.policy_component_sd),
            ("policy_year_sd", self.policy_year_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.shock_sd > 0.0) || !(self.effect_bump_width > 0.0) || !(self.tfp_base > 0.0) {
            return bad("shock_sd, effect_bump_width and tfp_base must be positive".into());
        }
        if !(self.cpi_growth > -1.0) {
            return bad(format!("cpi_growth must exceed -1, got {}", self.cpi_growth));
        }
        for t in 0..self.n_waves {
            let p = self.prevalence(t);
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("prevalence target {p} for wave {t} outside (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn year(&self, wave: usize) -> i32 {
        self.first_year + 2 * wave as i32
    }

    fn cycle(&self, wave: usize) -> f64 {
        (2.0 * std::f64::consts::PI * wave as f64 / 8.0).sin()
    }

    fn prevalence(&self, wave: usize) -> f64 {
        self.prevalence_base + self.prevalence_cycle * self.cycle(wave)
    }

    fn cpi_ratio(&self, wave: usize) -> f64 {
        (1.0 + self.cpi_growth).powi(wave as i32)
    }

    /// Participation effect on log expenditure at shock rank `u`.
    pub fn effect_at(&self, u: f64) -> f64 {
        let z = (u - 0.5) / self.effect_bump_width;
        self.treatment_effect + self.effect_bump * (-0.5 * z * z).exp()
    }
}

/// Counter-based generator for one `(entity, wave, stream)` cell.
pub fn keyed_rng(seed: u64, entity: u64, wave: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&entity.to_le_bytes());
    key[16..24].copy_from_slice(&wave.to_le_bytes());
    key[24..].copy_from_slice(&stream.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p { 1.0 } else { 0.0 }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn state_name(s: usize) -> String {
    format!("S{:02}", s + 1)
}

/// Everything the generator emits.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub panel: PanelDataset,
    pub policy: Vec<PolicyRecord>,
    pub prevalence: BTreeMap<i32, f64>,
    pub cpi: BTreeMap<i32, f64>,
    pub unemployment: BTreeMap<(String, i32), f64>,
    pub truth: BTreeMap<String, String>,
}

struct StateDraw {
    coli: f64,
    unemployment: Vec<f64>,
    spi: Vec<f64>,
    policy: Vec<PolicyRecord>,
}

fn draw_state(cfg: &SynthConfig, s: usize, weights: &SpiWeights) -> Result<StateDraw> {
    let nd = std_normal();
    let mut rng = keyed_rng(cfg.seed, s as u64, 0, STREAM_STATE);
    let coli = 100.0 * (0.08 * normal(&mut rng)).exp();
    let generosity = cfg.policy_state_sd * normal(&mut rng);
    let unemp_effect = normal(&mut rng);
    // one latent per policy lever; both vehicle components share one
    let lever: Vec<f64> = (0..9).map(|_| generosity + cfg.policy_component_sd * normal(&mut rng)).collect();
    let mid = (cfg.n_waves as f64 - 1.0) / 2.0;
    let mut out = StateDraw {
        coli,
        unemployment: vec![],
        spi: vec![],
        policy: vec![],
    };
    for t in 0..cfg.n_waves {
        let mut rng = keyed_rng(cfg.seed, s as u64, t as u64, STREAM_POLICY);
        let level: Vec<f64> = lever
            .iter()
            .map(|l| l + cfg.policy_trend * (t as f64 - mid) + cfg.policy_year_sd * normal(&mut rng))
            .collect();
        let on = |v: f64| if v > 0.0 { 1.0 } else { 0.0 };
        let mut rec = PolicyRecord::none_adopted(&state_name(s), cfg.year(t));
        rec.vehicle_exempt_all = if level[0] > 1.0 { 1.0 } else { 0.0 };
        rec.vehicle_exempt_some = if level[0] > 0.0 && level[0] <= 1.0 { 1.0 } else { 0.0 };
        rec.bbce = on(level[1]);
        rec.noncitizen_restriction = on(-level[2]);
        rec.short_recert_share = nd.cdf(-level[3]);
        rec.simplified_reporting = on(level[4]);
        rec.online_application = on(level[5]);
        rec.ebt_share = nd.cdf(level[6]);
        rec.fingerprint_required = on(-level[7]);
        rec.outreach_ad = on(level[8]);
        out.spi.push(spi::weighted_spi(&rec, weights)?);
        out.policy.push(rec);
        let u = 5.5 + 1.5 * cfg.cycle(t) + unemp_effect + 0.4 * normal(&mut rng);
        out.unemployment.push(u.max(1.0));
    }
    Ok(out)
}

#[derive(Default)]
struct PersonDraw {
    state: usize,
    cols: BTreeMap<&'static str, Vec<f64>>,
    effect: Vec<f64>,
}

fn draw_person(cfg: &SynthConfig, i: usize, states: &[StateDraw]) -> PersonDraw {
    let nd = std_normal();
    let mut rng = keyed_rng(cfg.seed, i as u64, 0, STREAM_PERSON);
    let state = rng.random_range(0..cfg.n_states);
    let female = bernoulli(&mut rng, 0.3);
    let white = bernoulli(&mut rng, 0.7);
    let college = bernoulli(&mut rng, 0.3);
    let age0 = rng.random_range(22..70) as f64;
    let pick: f64 = rng.random();
    let mut acc = 0.0;
    let mut hh = 6;
    for (k, s) in HH_SHARES.iter().enumerate() {
        acc += s;
        if pick < acc {
            hh = k + 1;
            break;
        }
    }
    let kids = if hh > 1 { rng.random_range(0..hh) } else { 0 };
    let z_w = normal(&mut rng);
    let a_w = cfg.individual_sd * z_w;
    let a_s = -0.8 * z_w + 0.6 * normal(&mut rng);
    let weight_base = 3000.0 * (0.5 * normal(&mut rng)).exp();
    let income_base = 6.8 + 0.4 * college + 0.15 * z_w + 0.3 * normal(&mut rng);
    let mut married = bernoulli(&mut rng, 0.5);
    let mut disabled = bernoulli(&mut rng, 0.1);

    let mut p = PersonDraw {
        state,
        ..Default::default()
    };
    let mut u_prev = 0.0;
    let innov_scale = (1.0 - cfg.shock_ar * cfg.shock_ar).sqrt();
    let sel_scale = (1.0 - cfg.selection * cfg.selection).sqrt();
    for t in 0..cfg.n_waves {
        let mut rng = keyed_rng(cfg.seed, i as u64, t as u64, STREAM_WAVE);
        let jitter: f64 = match rng.random::<f64>() {
            x if x < 0.15 => -1.0,
            x if x > 0.85 => 1.0,
            _ => 0.0,
        };
        let age = age0 + 2.0 * t as f64 + jitter;
        if t > 0 && rng.random::<f64>() < 0.05 {
            married = 1.0 - married;
        }
        if rng.random::<f64>() < 0.02 {
            disabled = 1.0;
        }
        let unemp = states[state].unemployment[t];
        let employed = if 0.9 + 0.5 * college - 0.6 * disabled - 0.15 * (unemp - 5.5) + normal(&mut rng) > 0.0 { 1.0 } else { 0.0 };
        let e = normal(&mut rng);
        let u = if t == 0 { cfg.shock_sd * e } else { cfg.shock_ar * u_prev + innov_scale * cfg.shock_sd * e };
        u_prev = u;
        let nu = cfg.selection * e + sel_scale * normal(&mut rng);
        let spi = states[state].spi[t];
        let latent = cfg.snap_intercept + cfg.relevance * (spi - SPI_CENTER) - 0.6 * employed + 0.3 * disabled + a_s + nu;
        let snap = if latent > 0.0 { 1.0 } else { 0.0 };
        let effect = cfg.effect_at(nd.cdf(u / cfg.shock_sd));
        let dev = age - 45.0;
        let log_w = cfg.log_exp_intercept + a_w + 0.12 * college - 0.08 * female + 0.05 * white + 0.08 * married
            + 0.10 * employed
            - 0.10 * disabled
            + 0.004 * dev
            - 0.0001 * dev * dev
            - 0.05 * (hh as f64).ln()
            + 0.01 * t as f64
            + effect * snap
            + u;
        let cpi = cfg.cpi_ratio(t);
        let income = (income_base + 0.4 * employed + 0.2 * normal(&mut rng)).exp() * cpi;
        let fpl = (981.0 + 347.0 * (hh as f64 - 1.0)) / hh as f64 * cpi;
        let weight = weight_base * (0.05 * normal(&mut rng)).exp();
        let rows: [(&'static str, f64); 17] = [
            (panel::FOOD_EXP, log_w.exp() * cpi),
            (panel::INCOME, income),
            (panel::SNAP, snap),
            (panel::WEIGHT, weight),
            ("rp_female", female),
            ("rp_age", age),
            ("rp_age_sq", age * age),
            ("rp_white", white),
            ("rp_married", married),
            ("rp_employed", employed),
            ("rp_disabled", disabled),
            ("rp_college", college),
            (panel::HH_SIZE, hh as f64),
            (panel::PCT_CHILDREN, kids as f64 / hh as f64),
            (panel::TFP_COST, cfg.tfp_base * TFP_SCALE[hh - 1] * cpi),
            (panel::COLI, states[state].coli),
            (panel::INCOME_TO_FPL, income / fpl),
        ];
        for (k, v) in rows {
            p.cols.entry(k).or_default().push(v);
        }
        p.cols.entry(panel::UNEMPLOYMENT).or_default().push(unemp);
        p.effect.push(effect);
    }
    p
}

/// Draw a panel, its policy records and auxiliary series from `config`.
pub fn generate_panel(config: &SynthConfig) -> Result<SynthBundle> {
    config.validate()?;
    let weights = SpiWeights::default();
    let states: Vec<StateDraw> = (0..config.n_states)
        .into_par_iter()
        .map(|s| draw_state(config, s, &weights))
        .collect::<Result<_>>()?;
    let people: Vec<PersonDraw> = (0..config.n_individuals)
        .into_par_iter()
        .map(|i| draw_person(config, i, &states))
        .collect();

    let (mut ids, mut years, mut st) = (vec![], vec![], vec![]);
    let mut cols: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let (mut effect_sum, mut effect_treated, mut n_treated) = (0.0, 0.0, 0usize);
    for (i, p) in people.iter().enumerate() {
        for t in 0..config.n_waves {
            ids.push(i as i64 + 1);
            years.push(config.year(t));
            st.push(state_name(p.state));
            effect_sum += p.effect[t];
            if p.cols[panel::SNAP][t] == 1.0 {
                effect_treated += p.effect[t];
                n_treated += 1;
            }
        }
        for (k, v) in &p.cols {
            cols.entry(k).or_default().extend_from_slice(v);
        }
    }
    let n_obs = ids.len();
    let mut panel = PanelDataset::new(ids, years, st)?;
    for (k, v) in cols {
        panel.set_column(k, v)?;
    }

    let mut unemployment = BTreeMap::new();
    let mut policy = vec![];
    for (s, d) in states.into_iter().enumerate() {
        for t in 0..config.n_waves {
            unemployment.insert((state_name(s), config.year(t)), d.unemployment[t]);
        }
        policy.extend(d.policy);
    }
    let prevalence = (0..config.n_waves).map(|t| (config.year(t), config.prevalence(t))).collect();
    let cpi = (0..config.n_waves).map(|t| (config.year(t), 100.0 * config.cpi_ratio(t))).collect();

    let mut truth = BTreeMap::new();
    if let serde_json::Value::Object(map) = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))? {
        for (k, v) in map {
            truth.insert(k, v.to_string());
        }
    }
    truth.insert("effect_outcome".into(), "log food expenditure".into());
    truth.insert("n_obs".into(), n_obs.to_string());
    truth.insert("snap_rate".into(), fmt_f64(n_treated as f64 / n_obs as f64));
    truth.insert("mean_effect".into(), fmt_f64(effect_sum / n_obs as f64));
    truth.insert(
        "mean_effect_treated".into(),
        fmt_f64(if n_treated > 0 { effect_treated / n_treated as f64 } else { f64::NAN }),
    );
    Ok(SynthBundle {
        panel,
        policy,
        prevalence,
        cpi,
        unemployment,
        truth,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_series(path: &Path, header: [&str; 2], series: &BTreeMap<i32, f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(path)?);
    w.write_record(header)?;
    for (y, v) in series {
        w.write_record([y.to_string(), fmt_f64(*v)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const PANEL_FILE: &str = "panel.csv";
pub const POLICY_FILE: &str = "policy.csv";
pub const PREVALENCE_FILE: &str = "prevalence.csv";
pub const CPI_FILE: &str = "cpi.csv";
pub const UNEMPLOYMENT_FILE: &str = "unemployment.csv";
pub const TRUTH_FILE: &str = "truth.txt";

/// Write the bundle as CSV files plus a `key = value` truth file.
pub fn write_bundle(bundle: &SynthBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bundle.panel.write_csv(create(&dir.join(PANEL_FILE))?)?;
    spi::write_policy_csv(&bundle.policy, create(&dir.join(POLICY_FILE))?)?;
    write_series(&dir.join(PREVALENCE_FILE), ["wave_year", "prevalence"], &bundle.prevalence)?;
    write_series(&dir.join(CPI_FILE), ["year", "cpi"], &bundle.cpi)?;
    let path = dir.join(UNEMPLOYMENT_FILE);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(&path)?);
    w.write_record([panel::STATE_ID, panel::WAVE_YEAR, panel::UNEMPLOYMENT])?;
    for ((s, y), v) in &bundle.unemployment {
        w.write_record([s.clone(), y.to_string(), fmt_f64(*v)])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join(TRUTH_FILE);
    let mut f = create(&path)?;
    for (k, v) in &bundle.truth {
        writeln!(f, "{k} = {v}").map_err(|e| Error::io(&path, e))?;
    }
    f.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ols,
    Tsls,
    ThreeStep,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ols => "ols",
            Estimator::Tsls => "2sls",
            Estimator::ThreeStep => "threestep",
        }
    }
}

/// One estimator's result on one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub estimate: f64,
    pub se: f64,
    pub kp_f: f64,
}

/// Synthetic panel with log expenditure and the weighted SPI attached.
pub fn estimation_panel(config: &SynthConfig) -> Result<PanelDataset> {
    let bundle = generate_panel(config)?;
    let rows = spi::spi_table(&bundle.policy, &SpiWeights::default())?;
    let mut p = spi::join_spi(&bundle.panel, &rows)?;
    let spi = p.column(spi::SPI_WEIGHTED)?.to_vec();
    p.set_column(MC_INSTRUMENT, spi)?;
    let lw = p.column(panel::FOOD_EXP)?.iter().map(|v| v.ln()).collect();
    p.set_column(LOG_FOOD_EXP, lw)?;
    Ok(p)
}

/// Two-way fixed-effects spec of log expenditure on the time-varying
/// covariates, clustered by individual, unweighted.
pub fn control_spec(panel: &PanelDataset) -> Result<ModelSpec> {
    let spec = ModelSpec::new(LOG_FOOD_EXP, &TIME_VARYING)
        .fe(&[FeDim::Individual, FeDim::Year])
        .cluster(ClusterBy::Individual);
    let extra = [panel::SNAP.to_string(), MC_INSTRUMENT.to_string()];
    Ok(prune_absorbed(&spec, panel, &extra)?.0)
}

pub fn estimate_once(est: Estimator, panel: &PanelDataset) -> Result<Draw> {
    let spec = control_spec(panel)?;
    let snap = panel::SNAP.to_string();
    match est {
        Estimator::Ols => {
            let mut s = spec.clone();
            s.regressors.insert(0, snap.clone());
            let f = wls_fit(&s, panel)?;
            Ok(Draw {
                estimate: f.coef(&snap).unwrap_or(f64::NAN),
                se: f.se(&snap).unwrap_or(f64::NAN),
                kp_f: f64::NAN,
            })
        }
        Estimator::Tsls | Estimator::ThreeStep => {
            let inst = [MC_INSTRUMENT.to_string()];
            let iv = if est == Estimator::Tsls {
                tsls_fit(&spec, std::slice::from_ref(&snap), &inst, panel)?
            } else {
                three_step_iv_with(&spec, &snap, &inst, LogitEffects::Mundlak, panel)?
            };
            Ok(Draw {
                estimate: iv.coef(&snap).unwrap_or(f64::NAN),
                se: iv.se(&snap).unwrap_or(f64::NAN),
                kp_f: iv.kp_f,
            })
        }
    }
}

/// Across-replication summary for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub estimator: Estimator,
    pub replications: usize,
    pub failures: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// NaN when fewer than two replications succeeded.
    pub sd: f64,
    pub sd_defined: bool,
    pub rmse: f64,
    /// Share of 95% intervals covering the truth.
    pub coverage: f64,
    pub below_truth: usize,
    /// One-sided sign-test p-value against "estimates fall below the truth
    /// no more often than half the time".
    pub sign_p_negative: f64,
    pub median_kp_f: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn sign_p(below: usize, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    if below == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n as u64).expect("binomial");
    (1.0 - b.cdf(below as u64 - 1)).clamp(0.0, 1.0)
}

fn summarize(est: Estimator, truth: f64, draws: &[Result<Draw>]) -> Result<McRow> {
    let ok: Vec<Draw> = draws.iter().filter_map(|d| d.as_ref().ok().copied()).filter(|d| d.estimate.is_finite()).collect();
    let failures = draws.len() - ok.len();
    if 2 * failures > draws.len() {
        let first = draws.iter().find_map(|d| d.as_ref().err().map(|e| e.to_string())).unwrap_or_else(|| "non-finite estimate".into());
        return Err(Error::MonteCarlo(format!(
            "{} failed in {failures} of {} replications; first error: {first}",
            est.name(),
            draws.len()
        )));
    }
    let n = ok.len() as f64;
    let mean = ok.iter().map(|d| d.estimate).sum::<f64>() / n;
    let sd_defined = ok.len() >= 2;
    let sd = if sd_defined {
        (ok.iter().map(|d| (d.estimate - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let z = std_normal().inverse_cdf(0.975);
    let covered = ok.iter().filter(|d| (d.estimate - truth).abs() <= z * d.se).count();
    let below = ok.iter().filter(|d| d.estimate < truth).count();
    let mut fs: Vec<f64> = ok.iter().map(|d| d.kp_f).filter(|f| !f.is_nan()).collect();
    Ok(McRow {
        estimator: est,
        replications: draws.len(),
        failures,
        truth,
        mean,
        bias: mean - truth,
        sd,
        sd_defined,
        rmse: (ok.iter().map(|d| (d.estimate - truth).powi(2)).sum::<f64>() / n).sqrt(),
        coverage: covered as f64 / n,
        below_truth: below,
        sign_p_negative: sign_p(below, ok.len()),
        median_kp_f: median(&mut fs),
    })
}

/// Replicate the estimators on panels drawn with seeds `seed .. seed + R - 1`.
/// The truth is `config.treatment_effect`.
pub fn monte_carlo(replications: usize, config: &SynthConfig, estimators: &[Estimator]) -> Result<Vec<McRow>> {
    if replications == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    if estimators.is_empty() {
        return Err(Error::InvalidArgument("no estimators selected".into()));
    }
    config.validate()?;
    let runs: Vec<Vec<Result<Draw>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let cfg = SynthConfig {
                seed: config.seed.wrapping_add(r as u64),
                ..config.clone()
            };
            match estimation_panel(&cfg) {
                Ok(p) => estimators.iter().map(|&e| estimate_once(e, &p)).collect(),
                Err(e) => estimators.iter().map(|_| Err(Error::MonteCarlo(e.to_string()))).collect(),
            }
        })
        .collect();
    estimators
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let draws: Vec<Result<Draw>> = runs.iter().map(|r| r[k].as_ref().map(|d| *d).map_err(|e| Error::MonteCarlo(e.to_string()))).collect();
            summarize(e, config.treatment_effect, &draws)
        })
        .collect()
}

pub fn write_mc_csv<W: Write>(rows: &[McRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([
        "estimator",
        "replications",
        "failures",
        "truth",
        "mean",
        "bias",
        "sd",
        "sd_defined",
        "rmse",
        "coverage",
        "below_truth",
        "sign_p_negative",
        "median_kp_f",
    ])?;
    for r in rows {
        w.write_record([
            r.estimator.name().to_string(),
            r.replications.to_string(),
            r.failures.to_string(),
            fmt_f64(r.truth),
            fmt_f64(r.mean),
            fmt_f64(r.bias),
            fmt_f64(r.sd),
            (r.sd_defined as u8).to_string(),
            fmt_f64(r.rmse),
            fmt_f64(r.coverage),
            r.below_truth.to_string(),
            fmt_f64(r.sign_p_negative),
            fmt_f64(r.median_kp_f),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Across-replication summary of a quantile-effect profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileMc {
    pub taus: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Monte Carlo standard error of `mean`.
    pub mc_se: Vec<f64>,
    /// Average of the per-replication sandwich standard errors.
    pub mean_se: Vec<f64>,
    /// Effect at each tau implied by the generator.
    pub truth: Vec<f64>,
    pub replications: usize,
    pub failures: usize,
}

/// Column holding the first-stage fitted participation.
pub const SNAP_HAT: &str = "snap_hat";

/// Add the two-way fixed-effects first-stage prediction of participation.
pub fn add_first_stage_prediction(panel: &PanelDataset, spec: &ModelSpec, instrument: &str) -> Result<PanelDataset> {
    let mut fs = spec.clone();
    fs.outcome = panel::SNAP.to_string();
    fs.regressors.insert(0, instrument.to_string());
    let fit = wls_fit(&fs, panel)?;
    let mut hat = vec![f64::NAN; panel.len()];
    for (k, &r) in fit.rows.iter().enumerate() {
        hat[r] = fit.fitted[k];
    }
    panel.clone().with_column(SNAP_HAT, hat)
}

pub fn quantile_monte_carlo(replications: usize, config: &SynthConfig, taus: &[f64]) -> Result<QuantileMc> {
    if replications == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    config.validate()?;
    let runs: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let cfg = SynthConfig {
                seed: config.seed.wrapping_add(r as u64),
                ..config.clone()
            };
            let p = estimation_panel(&cfg)?;
            let spec = control_spec(&p)?;
            let p = add_first_stage_prediction(&p, &spec, MC_INSTRUMENT)?;
            let mut qspec = spec.clone();
            qspec.fe_dims.clear();
            let prof = quantile_effect_profile(&qspec, SNAP_HAT, taus, &p)?;
            Ok((prof.estimates, prof.std_errors))
        })
        .collect();
    let ok: Vec<&(Vec<f64>, Vec<f64>)> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failures = replications - ok.len();
    if 2 * failures > replications {
        let first = runs.iter().find_map(|r| r.as_ref().err().map(|e| e.to_string())).unwrap_or_default();
        return Err(Error::MonteCarlo(format!(
            "quantile profile failed in {failures} of {replications} replications; first error: {first}"
        )));
    }
    let n = ok.len() as f64;
    let k = taus.len();
    let mean: Vec<f64> = (0..k).map(|j| ok.iter().map(|r| r.0[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..k)
        .map(|j| {
            if ok.len() < 2 {
                f64::NAN
            } else {
                (ok.iter().map(|r| (r.0[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        })
        .collect();
    Ok(QuantileMc {
        taus: taus.to_vec(),
        mc_se: sd.iter().map(|s| s / n.sqrt()).collect(),
        mean_se: (0..k).map(|j| ok.iter().map(|r| r.1[j]).sum::<f64>() / n).collect(),
        truth: taus.iter().map(|&t| config.effect_at(t)).collect(),
        mean,
        sd,
        replications,
        failures,
    })
}
