//! Staged driver from raw inputs to the report directory.
//!
//! Each stage reads its inputs from the configured files or from earlier
//! stage outputs in the output directory, so the stages can be run one at a
//! time from the command line or all at once through [`run_pipeline`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::iv::{exogeneity_diag, interaction_iv, state_year_changes, three_step_iv_with, tsls_fit, IVResult, LogitEffects};
use crate::panel::{self, fmt_f64, ColumnSchema, PanelDataset, COVARIATES, FOOD_EXP, INCOME, SNAP, TFP_COST, WEIGHT};
use crate::pfs::{self, PfsConfig};
use crate::quantile::{self, default_taus};
use crate::regress::{absorbed_regressors, prune_absorbed, wls_fit, ClusterBy, FeDim, ModelSpec};
use crate::spi::{self, SpiWeights};
use crate::stats;
use crate::synth::{add_first_stage_prediction, SNAP_HAT};

pub const CLEAN_PANEL_FILE: &str = "panel_clean.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SPI_FILE: &str = "spi.csv";
pub const PFS_FILE: &str = "pfs.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const PROFILE_FILE: &str = "quantile_profile.csv";
pub const BINS_FILE: &str = "fs_by_pfs_bin.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Column holding the instrument chosen by the SPI variant.
pub const INSTRUMENT: &str = "spi";
pub const OUTCOME: &str = "pfs";

/// Stage names in execution order.
pub const STAGES: [&str; 7] = ["ingest", "spi", "pfs", "calibration", "estimate", "quantile", "report"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Survey,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpiVariant {
    Weighted,
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeMode {
    Absorb,
    Mundlak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "ols")]
    Ols,
    #[serde(rename = "2sls")]
    Tsls,
    #[serde(rename = "interaction")]
    Interaction,
    #[serde(rename = "threestep")]
    ThreeStep,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [EstimatorKind::Ols, EstimatorKind::Tsls, EstimatorKind::Interaction, EstimatorKind::ThreeStep];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ols => "ols",
            EstimatorKind::Tsls => "2sls",
            EstimatorKind::Interaction => "interaction",
            EstimatorKind::ThreeStep => "threestep",
        }
    }

    pub fn file_name(self) -> String {
        format!("estimates_{}.csv", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub panel: PathBuf,
    pub policy: PathBuf,
    pub prevalence: PathBuf,
    pub cpi: PathBuf,
    #[serde(default)]
    pub unemployment: Option<PathBuf>,
}

impl Inputs {
    fn named(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![
            ("panel", self.panel.as_path()),
            ("policy", self.policy.as_path()),
            ("prevalence", self.prevalence.as_path()),
            ("cpi", self.cpi.as_path()),
        ];
        if let Some(u) = &self.unemployment {
            v.push(("unemployment", u.as_path()));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    /// Role to file-column renames for the panel.
    #[serde(default)]
    pub schema: BTreeMap<String, String>,
    #[serde(default = "default_weights")]
    pub weights: WeightMode,
    #[serde(default = "default_fe")]
    pub fe: FeMode,
    #[serde(default = "default_spi")]
    pub spi: SpiVariant,
    /// Individual-effect handling in the three-step logit.
    #[serde(default = "default_logit")]
    pub threestep_logit: LogitEffects,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    /// Group indicator for the interaction model.
    #[serde(default = "default_group")]
    pub group: String,
    #[serde(default = "default_bins")]
    pub pfs_bins: usize,
    /// Top share capped at ingest.
    #[serde(default = "default_winsorize")]
    pub winsorize: f64,
    /// Columns to winsorize; unset means expenditure and income when present.
    #[serde(default)]
    pub winsorize_columns: Option<Vec<String>>,
    /// Use survey weights for the winsorizing quantile (ignored when
    /// `weights = "none"`).
    #[serde(default = "default_true")]
    pub winsorize_weighted: bool,
    /// Columns deflated to base-year prices; unset means expenditure,
    /// income and food plan cost when present.
    #[serde(default)]
    pub deflate_columns: Option<Vec<String>>,
    /// Defaults to the earliest panel year.
    #[serde(default)]
    pub cpi_base_year: Option<i32>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_weights() -> WeightMode {
    WeightMode::Survey
}
fn default_fe() -> FeMode {
    FeMode::Absorb
}
fn default_spi() -> SpiVariant {
    SpiVariant::Weighted
}
fn default_logit() -> LogitEffects {
    LogitEffects::Mundlak
}
fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}
fn default_group() -> String {
    panel::LOW_INCOME.to_string()
}
fn default_bins() -> usize {
    5
}
fn default_winsorize() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("pfsnap_out")
}
fn default_seed() -> u64 {
    1
}

impl PipelineConfig {
    /// Config with defaults for everything but the inputs.
    pub fn new(inputs: Inputs, out: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            inputs,
            schema: BTreeMap::new(),
            weights: default_weights(),
            fe: default_fe(),
            spi: default_spi(),
            threestep_logit: default_logit(),
            estimators: default_estimators(),
            taus: default_taus(),
            group: default_group(),
            pfs_bins: default_bins(),
            winsorize: default_winsorize(),
            winsorize_columns: None,
            winsorize_weighted: true,
            deflate_columns: None,
            cpi_base_year: None,
            out: out.into(),
            seed: default_seed(),
        }
    }

    /// Inputs named as in a bundle written by `synth::write_bundle`.
    pub fn for_bundle(dir: &Path, out: impl Into<PathBuf>) -> Self {
        use crate::synth::{CPI_FILE, PANEL_FILE, POLICY_FILE, PREVALENCE_FILE, UNEMPLOYMENT_FILE};
        let unemployment = dir.join(UNEMPLOYMENT_FILE);
        let inputs = Inputs {
            panel: dir.join(PANEL_FILE),
            policy: dir.join(POLICY_FILE),
            prevalence: dir.join(PREVALENCE_FILE),
            cpi: dir.join(CPI_FILE),
            unemployment: unemployment.exists().then_some(unemployment),
        };
        PipelineConfig::new(inputs, out)
    }

    /// Parse TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.inputs.panel);
        fix(&mut cfg.inputs.policy);
        fix(&mut cfg.inputs.prevalence);
        fix(&mut cfg.inputs.cpi);
        if let Some(u) = cfg.inputs.unemployment.as_mut() {
            fix(u);
        }
        fix(&mut cfg.out);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let named = self.inputs.named();
        for (i, (a, pa)) in named.iter().enumerate() {
            for (b, pb) in &named[i + 1..] {
                if pa == pb {
                    return Err(Error::Config(format!("inputs `{a}` and `{b}` name the same file {}", pa.display())));
                }
            }
            if *pa == self.out.as_path() {
                return Err(Error::Config(format!("input `{a}` is the output directory")));
            }
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        let mut sorted = self.estimators.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.estimators.len() {
            return Err(Error::Config("estimator listed twice".into()));
        }
        if self.taus.is_empty() || self.taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) || self.taus.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("taus must be strictly increasing inside (0, 1)".into()));
        }
        if self.pfs_bins < 2 {
            return Err(Error::Config(format!("pfs_bins must be at least 2, got {}", self.pfs_bins)));
        }
        if !(0.0..1.0).contains(&self.winsorize) {
            return Err(Error::Config(format!("winsorize must lie in [0, 1), got {}", self.winsorize)));
        }
        ColumnSchema::with_overrides(&self.schema)?;
        Ok(())
    }

    /// Serialized config with input paths reduced to file names and the
    /// output directory dropped, so relocating a run leaves it unchanged.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let obj = v.as_object_mut().expect("config serializes to an object");
        obj.remove("out");
        let mut inputs = serde_json::Map::new();
        for (name, path) in self.inputs.named() {
            inputs.insert(name.to_string(), serde_json::Value::String(file_name(path)));
        }
        obj.insert("inputs".into(), serde_json::Value::Object(inputs));
        serde_json::to_string(&v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    fn weight_column(&self) -> Option<&'static str> {
        match self.weights {
            WeightMode::Survey => Some(WEIGHT),
            WeightMode::None => None,
        }
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn require(cfg: &PipelineConfig, file: &str, producer: &str) -> Result<PathBuf> {
    let path = cfg.out_path(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Dependency {
            stage: producer.to_string(),
            path,
        })
    }
}

fn ensure_out(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

/// Replace this stage's rows in `diagnostics.csv`, keeping other stages'.
fn record_diagnostics(cfg: &PipelineConfig, stage: &str, rows: &BTreeMap<String, String>) -> Result<()> {
    let path = cfg.out_path(DIAGNOSTICS_FILE);
    let mut all: BTreeMap<(usize, String), String> = BTreeMap::new();
    let rank = |s: &str| STAGES.iter().position(|x| *x == s).unwrap_or(STAGES.len());
    if path.is_file() {
        let mut rdr = csv::Reader::from_reader(open(&path)?);
        for rec in rdr.records() {
            let rec = rec?;
            let s = rec.get(0).unwrap_or("");
            if s != stage {
                all.insert((rank(s), format!("{s}\u{0}{}", rec.get(1).unwrap_or(""))), rec.get(2).unwrap_or("").to_string());
            }
        }
    }
    for (k, v) in rows {
        all.insert((rank(stage), format!("{stage}\u{0}{k}")), v.clone());
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(&path)?);
    w.write_record(["stage", "key", "value"])?;
    for ((_, sk), v) in &all {
        let (s, k) = sk.split_once('\u{0}').expect("stage key separator");
        w.write_record([s, k, v.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn columns_or(panel: &PanelDataset, chosen: &Option<Vec<String>>, defaults: &[&str]) -> Vec<String> {
    match chosen {
        Some(c) => c.clone(),
        None => defaults.iter().filter(|c| panel.has_column(c)).map(|c| c.to_string()).collect(),
    }
}

/// Load, deflate to base-year prices, winsorize expenditure and income, and
/// attach the unemployment series when supplied.
pub fn ingest(cfg: &PipelineConfig) -> Result<PanelDataset> {
    ensure_out(cfg)?;
    let schema = ColumnSchema::with_overrides(&cfg.schema)?;
    let mut p = panel::load_panel(&cfg.inputs.panel, &schema)?;
    if p.is_empty() {
        return Err(Error::Empty(format!("panel {} has no rows", cfg.inputs.panel.display())));
    }
    let cpi = panel::read_year_series(&cfg.inputs.cpi)?;
    let base = cfg.cpi_base_year.unwrap_or_else(|| *p.years().iter().min().expect("non-empty panel"));
    let money = columns_or(&p, &cfg.deflate_columns, &[FOOD_EXP, INCOME, TFP_COST]);
    panel::deflate_columns(&mut p, &money, &cpi, base)?;
    let capped = columns_or(&p, &cfg.winsorize_columns, &[FOOD_EXP, INCOME]);
    let wq = if cfg.winsorize_weighted { cfg.weight_column() } else { None };
    panel::winsorize_columns(&mut p, &capped, cfg.winsorize, wq)?;
    if let Some(path) = &cfg.inputs.unemployment {
        let series = panel::read_state_year_series(path)?;
        let u = (0..p.len())
            .map(|i| series.get(&(p.states()[i].clone(), p.years()[i])).copied().unwrap_or(f64::NAN))
            .collect();
        p.set_column(panel::UNEMPLOYMENT, u)?;
    }
    p.write_csv_path(&cfg.out_path(CLEAN_PANEL_FILE))?;
    let cols: Vec<String> = p.column_names().filter(|c| *c != WEIGHT).map(str::to_string).collect();
    let summary = panel::weighted_summary(&p, &cols, cfg.weight_column())?;
    panel::write_summary_csv(&summary, create(&cfg.out_path(SUMMARY_FILE))?)?;
    let mut d = BTreeMap::new();
    d.insert("rows".into(), p.len().to_string());
    d.insert("individuals".into(), p.individual_groups().len().to_string());
    d.insert("cpi_base_year".into(), base.to_string());
    record_diagnostics(cfg, "ingest", &d)?;
    Ok(p)
}

/// Both SPI variants for every policy record.
pub fn build_spi(cfg: &PipelineConfig) -> Result<Vec<spi::SpiRow>> {
    ensure_out(cfg)?;
    let records = spi::load_policy(&cfg.inputs.policy)?;
    let issues = spi::validate_policy_panel(&records);
    if let Some(first) = issues.iter().find(|i| !matches!(i, spi::PolicyIssue::YearGap { .. })) {
        return Err(Error::InvalidArgument(format!("policy panel: {first:?}")));
    }
    let rows = spi::spi_table(&records, &SpiWeights::default())?;
    spi::write_spi_csv(&rows, create(&cfg.out_path(SPI_FILE))?)?;
    let mut d = BTreeMap::new();
    d.insert("records".into(), rows.len().to_string());
    d.insert("year_gaps".into(), issues.len().to_string());
    record_diagnostics(cfg, "spi", &d)?;
    Ok(rows)
}

fn clean_panel(cfg: &PipelineConfig) -> Result<PanelDataset> {
    let path = require(cfg, CLEAN_PANEL_FILE, "ingest")?;
    panel::load_panel(&path, &ColumnSchema::default())
}

fn present_covariates(p: &PanelDataset) -> Vec<String> {
    COVARIATES.iter().filter(|c| p.has_column(c)).map(|c| c.to_string()).collect()
}

/// Expenditure mean and variance fits, PFS, and cutoffs calibrated to the
/// prevalence targets.
pub fn build_pfs(cfg: &PipelineConfig) -> Result<Vec<pfs::PfsRecord>> {
    let p = clean_panel(cfg)?;
    let mut pc = PfsConfig {
        covariates: present_covariates(&p),
        weight: cfg.weight_column().map(str::to_string),
        ..PfsConfig::default()
    };
    let probe = ModelSpec {
        regressors: pc.covariates.clone(),
        fe_dims: pc.fe_dims.clone(),
        weight: pc.weight.clone(),
        ..ModelSpec::new(FOOD_EXP, &[])
    };
    let dropped = absorbed_regressors(&probe, &p, &[])?;
    pc.covariates.retain(|c| !dropped.contains(c));
    let out = pfs::construct_pfs(&p, &pc)?;
    let mut records = out.records;
    let calibration = calibrate(cfg, &p, &mut records).map_err(|e| e.in_stage("calibration"))?;
    pfs::write_pfs_csv(&records, create(&cfg.out_path(PFS_FILE))?)?;
    pfs::write_calibration_csv(&calibration, create(&cfg.out_path(CALIBRATION_FILE))?)?;

    let mut d = BTreeMap::new();
    d.insert("records".into(), records.len().to_string());
    d.insert("dropped_covariates".into(), dropped.join(" "));
    d.insert("mean_fit_iterations".into(), out.mean_fit.diagnostics.get("iterations").map_or(String::new(), |v| fmt_f64(*v)));
    d.insert("point_mass_rows".into(), records.iter().filter(|r| r.alpha.is_nan()).count().to_string());
    let values: Vec<f64> = records.iter().map(|r| r.pfs).collect();
    let p20 = stats::weighted_quantile(&values, None, 0.2)?;
    let flagged = records.iter().filter(|r| r.food_insecure).count();
    let in_bottom = records.iter().filter(|r| r.food_insecure && r.pfs <= p20).count();
    d.insert("flagged".into(), flagged.to_string());
    d.insert("flagged_in_bottom_20pct".into(), in_bottom.to_string());
    record_diagnostics(cfg, "pfs", &d)?;
    let mut c = BTreeMap::new();
    for k in &calibration {
        c.insert(format!("gap_{}", k.year), fmt_f64(k.achieved - k.target));
    }
    c.insert("all_attainable".into(), calibration.iter().all(|k| k.attainable).to_string());
    record_diagnostics(cfg, "calibration", &c)?;
    Ok(records)
}

fn calibrate(cfg: &PipelineConfig, p: &PanelDataset, records: &mut [pfs::PfsRecord]) -> Result<Vec<pfs::Calibration>> {
    let targets = panel::read_year_series(&cfg.inputs.prevalence)?;
    let index = p.key_index();
    let weights: Vec<f64> = match cfg.weight_column() {
        Some(c) => {
            let w = p.column(c)?;
            records.iter().map(|r| w[index[&(r.individual_id, r.wave_year)]]).collect()
        }
        None => vec![1.0; records.len()],
    };
    let values: Vec<f64> = records.iter().map(|r| r.pfs).collect();
    let years: Vec<i32> = records.iter().map(|r| r.wave_year).collect();
    let used: BTreeMap<i32, f64> = targets.into_iter().filter(|(y, _)| years.contains(y)).collect();
    let (schedule, report) = pfs::calibrate_cutoffs(&values, &weights, &years, &used)?;
    pfs::apply_cutoffs(records, &schedule)?;
    Ok(report)
}

/// Clean panel with both SPI variants, the chosen instrument and PFS joined.
pub fn analysis_panel(cfg: &PipelineConfig) -> Result<PanelDataset> {
    let p = clean_panel(cfg)?;
    let spi_rows = spi::read_spi_csv(open(&require(cfg, SPI_FILE, "spi")?)?)?;
    let records = pfs::read_pfs_csv(open(&require(cfg, PFS_FILE, "pfs")?)?)?;
    let mut p = pfs::join_pfs(&spi::join_spi(&p, &spi_rows)?, &records)?;
    let source = match cfg.spi {
        SpiVariant::Weighted => spi::SPI_WEIGHTED,
        SpiVariant::Unweighted => spi::SPI_UNWEIGHTED,
    };
    let z = p.column(source)?.to_vec();
    p.set_column(INSTRUMENT, z)?;
    Ok(p)
}

/// Structural controls, fixed effects, weights and clustering for the PFS
/// equations, without controls the fixed effects absorb.
pub fn estimation_spec(cfg: &PipelineConfig, p: &PanelDataset) -> Result<(ModelSpec, Vec<String>)> {
    let covs = present_covariates(p);
    let covs: Vec<&str> = covs.iter().map(String::as_str).collect();
    let mut spec = ModelSpec::new(OUTCOME, &covs).cluster(ClusterBy::Individual);
    spec = match cfg.fe {
        FeMode::Absorb => spec.fe(&[FeDim::Individual, FeDim::Year]),
        FeMode::Mundlak => spec.fe(&[FeDim::Year]).mundlak(true),
    };
    if let Some(w) = cfg.weight_column() {
        spec = spec.weight(w);
    }
    prune_absorbed(&spec, p, &[SNAP.to_string(), INSTRUMENT.to_string()])
}

pub enum Estimate {
    Ols(Box<crate::regress::FitResult>),
    Iv(Box<IVResult>),
}

/// Every configured estimator of the participation effect on PFS.
pub fn estimate(cfg: &PipelineConfig) -> Result<Vec<(EstimatorKind, Estimate)>> {
    let p = analysis_panel(cfg)?;
    let (spec, pruned) = estimation_spec(cfg, &p)?;
    let snap = SNAP.to_string();
    let inst = [INSTRUMENT.to_string()];
    let mut d = BTreeMap::new();
    d.insert("pruned_controls".into(), pruned.join(" "));
    let mut results = vec![];
    for &kind in &cfg.estimators {
        let est = match kind {
            EstimatorKind::Ols => {
                let mut s = spec.clone();
                s.regressors.insert(0, snap.clone());
                Estimate::Ols(Box::new(wls_fit(&s, &p)?))
            }
            EstimatorKind::Tsls => Estimate::Iv(Box::new(tsls_fit(&spec, std::slice::from_ref(&snap), &inst, &p)?)),
            EstimatorKind::Interaction => {
                Estimate::Iv(Box::new(interaction_iv(&spec, &snap, std::slice::from_ref(&cfg.group), INSTRUMENT, &p)?))
            }
            EstimatorKind::ThreeStep => {
                Estimate::Iv(Box::new(three_step_iv_with(&spec, &snap, &inst, cfg.threestep_logit, &p)?))
            }
        };
        let path = cfg.out_path(&kind.file_name());
        match &est {
            Estimate::Ols(f) => {
                f.write_csv(create(&path)?)?;
                d.insert(format!("{}_n_obs", kind.name()), f.n_obs.to_string());
            }
            Estimate::Iv(iv) => {
                iv.write_csv(create(&path)?)?;
                d.insert(format!("{}_n_obs", kind.name()), iv.n_obs.to_string());
                d.insert(format!("{}_kp_f", kind.name()), fmt_f64(iv.kp_f));
                d.insert(format!("{}_weak", kind.name()), iv.weak.to_string());
            }
        }
        results.push((kind, est));
    }
    if p.has_column(panel::UNEMPLOYMENT) {
        if let Some((r, pv)) = exogeneity(&p)? {
            d.insert("exogeneity_r".into(), fmt_f64(r));
            d.insert("exogeneity_p".into(), fmt_f64(pv));
        }
    }
    record_diagnostics(cfg, "estimate", &d)?;
    Ok(results)
}

/// Correlation of state-year changes in the instrument and unemployment.
fn exogeneity(p: &PanelDataset) -> Result<Option<(f64, f64)>> {
    let z = p.column(INSTRUMENT)?;
    let u = p.column(panel::UNEMPLOYMENT)?;
    let mut zs = BTreeMap::new();
    let mut us = BTreeMap::new();
    for i in 0..p.len() {
        let key = (p.states()[i].clone(), p.years()[i]);
        zs.entry(key.clone()).or_insert(z[i]);
        us.entry(key).or_insert(u[i]);
    }
    let dz = state_year_changes(&zs);
    let du = state_year_changes(&us);
    let (a, b): (Vec<f64>, Vec<f64>) = dz.iter().filter_map(|(k, v)| du.get(k).map(|w| (*v, *w))).unzip();
    if a.len() < 3 {
        return Ok(None);
    }
    match exogeneity_diag(&a, &b) {
        Ok(r) => Ok(Some(r)),
        Err(Error::ZeroVariance(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Quantile profile of predicted participation and first-stage effects by
/// PFS bin.
pub fn quantiles(cfg: &PipelineConfig) -> Result<(quantile::QuantileProfile, Vec<quantile::BinEffect>)> {
    let p = analysis_panel(cfg)?;
    let (spec, _) = estimation_spec(cfg, &p)?;
    let p = add_first_stage_prediction(&p, &spec, INSTRUMENT)?;
    let profile = quantile::quantile_effect_profile(&spec, SNAP_HAT, &cfg.taus, &p)?;
    quantile::write_profile_csv(&profile, create(&cfg.out_path(PROFILE_FILE))?)?;
    let bins = quantile::pfs_bin_first_stage(&spec, SNAP, INSTRUMENT, OUTCOME, cfg.pfs_bins, &p)?;
    quantile::write_bins_csv(&bins, create(&cfg.out_path(BINS_FILE))?)?;
    let mut d = BTreeMap::new();
    d.insert("n_obs".into(), profile.n_obs.to_string());
    let (k, _) = profile
        .estimates
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
    d.insert("peak_tau".into(), fmt_f64(profile.taus[k]));
    record_diagnostics(cfg, "quantile", &d)?;
    Ok((profile, bins))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub versions: BTreeMap<String, String>,
}

/// Files every complete run leaves in the output directory.
pub fn expected_outputs(cfg: &PipelineConfig) -> Vec<String> {
    let mut v: Vec<String> = [CLEAN_PANEL_FILE, SUMMARY_FILE, SPI_FILE, PFS_FILE, CALIBRATION_FILE, PROFILE_FILE, BINS_FILE]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(cfg.estimators.iter().map(|k| k.file_name()));
    v.push(DIAGNOSTICS_FILE.to_string());
    v.sort();
    v
}

/// Check every output is present and write the manifest.
pub fn report(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut outputs = vec![];
    for name in expected_outputs(cfg) {
        let producer = match name.as_str() {
            CLEAN_PANEL_FILE | SUMMARY_FILE => "ingest",
            SPI_FILE => "spi",
            PFS_FILE | CALIBRATION_FILE => "pfs",
            PROFILE_FILE | BINS_FILE => "quantile",
            DIAGNOSTICS_FILE => "ingest",
            _ => "estimate",
        };
        let path = require(cfg, &name, producer)?;
        outputs.push(FileDigest {
            sha256: sha256_file(&path)?,
            name,
        });
    }
    let inputs = cfg
        .inputs
        .named()
        .into_iter()
        .map(|(role, path)| {
            Ok(FileDigest {
                name: format!("{role}:{}", file_name(path)),
                sha256: sha256_file(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let canonical = cfg.canonical_json()?;
    let mut versions = BTreeMap::new();
    versions.insert("pfsnap".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("manifest_format".to_string(), "1".to_string());
    let manifest = Manifest {
        config_sha256: cfg.hash()?,
        config: serde_json::from_str(&canonical).map_err(|e| Error::Config(e.to_string()))?,
        inputs,
        outputs,
        versions,
    };
    let path = cfg.out_path(MANIFEST_FILE);
    let mut f = create(&path)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    f.write_all(text.as_bytes()).and_then(|_| f.write_all(b"\n")).and_then(|_| f.flush()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Run every stage in order; errors carry the failing stage's name.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    ensure_out(cfg)?;
    let diag = cfg.out_path(DIAGNOSTICS_FILE);
    if diag.is_file() {
        std::fs::remove_file(&diag).map_err(|e| Error::io(&diag, e))?;
    }
    ingest(cfg).map_err(|e| e.in_stage("ingest"))?;
    build_spi(cfg).map_err(|e| e.in_stage("spi"))?;
    build_pfs(cfg).map_err(|e| e.in_stage("pfs"))?;
    estimate(cfg).map_err(|e| e.in_stage("estimate"))?;
    quantiles(cfg).map_err(|e| e.in_stage("quantile"))?;
    report(cfg).map_err(|e| e.in_stage("report"))
}
