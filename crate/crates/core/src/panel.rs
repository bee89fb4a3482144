//! Individual-by-wave panel storage, ingestion and the usual cleaning steps
//! (top winsorization, CPI deflation, lag joins, weighted summaries).
//!
//! Rows are always kept sorted by `(individual_id, wave_year)`. Numeric
//! columns are `f64` with `NaN` standing in for a missing value; CSV input
//! encodes missing values as empty fields and CSV output writes them back the
//! same way.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const INDIVIDUAL_ID: &str = "individual_id";
pub const WAVE_YEAR: &str = "wave_year";
pub const STATE_ID: &str = "state_id";
pub const FOOD_EXP: &str = "food_exp_pc";
pub const INCOME: &str = "income_pc";
pub const SNAP: &str = "snap";
pub const WEIGHT: &str = "weight";
pub const HH_SIZE: &str = "hh_size";
pub const PCT_CHILDREN: &str = "pct_children";
pub const TFP_COST: &str = "tfp_cost";
pub const COLI: &str = "coli";
pub const UNEMPLOYMENT: &str = "unemployment_rate";
pub const LOW_INCOME: &str = "low_income_flag";
pub const INCOME_TO_FPL: &str = "income_to_fpl_ratio";

/// Reference-person covariates entering every conditioning set by default.
pub const COVARIATES: [&str; 8] = [
    "rp_female",
    "rp_age",
    "rp_age_sq",
    "rp_white",
    "rp_married",
    "rp_employed",
    "rp_disabled",
    "rp_college",
];

/// Income below 130% of the poverty line marks a low-income wave.
pub const LOW_INCOME_FPL_RATIO: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Integer,
    Text,
    Real,
    NonNegative,
    Positive,
    Binary,
    UnitInterval,
}

impl Domain {
    fn admits(self, v: f64) -> bool {
        if v.is_nan() {
            return true;
        }
        match self {
            Domain::Integer | Domain::Text | Domain::Real => v.is_finite(),
            Domain::NonNegative => v >= 0.0 && v.is_finite(),
            Domain::Positive => v > 0.0 && v.is_finite(),
            Domain::Binary => v == 0.0 || v == 1.0,
            Domain::UnitInterval => (0.0..=1.0).contains(&v),
        }
    }

    fn rule(self) -> &'static str {
        match self {
            Domain::Integer => "integer",
            Domain::Text => "text",
            Domain::Real => "finite real",
            Domain::NonNegative => "value >= 0",
            Domain::Positive => "value > 0",
            Domain::Binary => "value in {0, 1}",
            Domain::UnitInterval => "value in [0, 1]",
        }
    }
}

/// One semantic role and the file column that carries it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRole {
    pub role: String,
    pub column: String,
    pub required: bool,
    pub domain: Domain,
}

/// Mapping from semantic roles to input file columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    roles: Vec<ColumnRole>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        let mut roles = vec![];
        let mut push = |role: &str, required: bool, domain: Domain| {
            roles.push(ColumnRole {
                role: role.to_string(),
                column: role.to_string(),
                required,
                domain,
            })
        };
        push(INDIVIDUAL_ID, true, Domain::Integer);
        push(WAVE_YEAR, true, Domain::Integer);
        push(STATE_ID, true, Domain::Text);
        push(FOOD_EXP, true, Domain::NonNegative);
        push(INCOME, false, Domain::Real);
        push(SNAP, true, Domain::Binary);
        push(WEIGHT, true, Domain::NonNegative);
        for c in ["rp_female", "rp_white", "rp_married", "rp_employed", "rp_disabled", "rp_college"] {
            push(c, false, Domain::Binary);
        }
        push("rp_age", false, Domain::NonNegative);
        push("rp_age_sq", false, Domain::NonNegative);
        push(HH_SIZE, false, Domain::Positive);
        push(PCT_CHILDREN, false, Domain::UnitInterval);
        push(TFP_COST, true, Domain::Positive);
        push(COLI, true, Domain::Positive);
        push(UNEMPLOYMENT, false, Domain::Real);
        push(LOW_INCOME, false, Domain::Binary);
        push(INCOME_TO_FPL, false, Domain::NonNegative);
        ColumnSchema { roles }
    }
}

impl ColumnSchema {
    /// Default schema with some roles mapped to differently named file columns.
    pub fn with_overrides(overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut schema = ColumnSchema::default();
        for (role, column) in overrides {
            let entry = schema
                .roles
                .iter_mut()
                .find(|r| &r.role == role)
                .ok_or_else(|| Error::Config(format!("unknown schema role `{role}`")))?;
            entry.column = column.clone();
        }
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for r in &self.roles {
            if let Some(prev) = seen.insert(r.column.as_str(), r.role.as_str()) {
                return Err(Error::Config(format!(
                    "column `{}` mapped to both `{prev}` and `{}`",
                    r.column, r.role
                )));
            }
        }
        Ok(())
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn column_for(&self, role: &str) -> Option<&str> {
        self.roles.iter().find(|r| r.role == role).map(|r| r.column.as_str())
    }
}

/// Rectangular individual x wave table.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    ids: Vec<i64>,
    years: Vec<i32>,
    states: Vec<String>,
    columns: BTreeMap<String, Vec<f64>>,
}

impl PanelDataset {
    /// Build a panel from key vectors; rows are re-sorted by key.
    pub fn new(ids: Vec<i64>, years: Vec<i32>, states: Vec<String>) -> Result<Self> {
        if ids.len() != years.len() || ids.len() != states.len() {
            return Err(Error::InvalidArgument("key vectors differ in length".into()));
        }
        let order = sorted_order(&ids, &years)?;
        Ok(Self::from_order(&order, &ids, &years, &states))
    }

    fn from_order(order: &[usize], ids: &[i64], years: &[i32], states: &[String]) -> Self {
        PanelDataset {
            ids: order.iter().map(|&i| ids[i]).collect(),
            years: order.iter().map(|&i| years[i]).collect(),
            states: order.iter().map(|&i| states[i].clone()).collect(),
            columns: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Insert or replace a column (values in current row order).
    pub fn set_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "column `{name}` has {} values, panel has {} rows",
                values.len(),
                self.len()
            )));
        }
        self.columns.insert(name, values);
        Ok(())
    }

    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.set_column(name, values)?;
        Ok(self)
    }

    pub fn remove_column(&mut self, name: &str) -> Option<Vec<f64>> {
        self.columns.remove(name)
    }

    /// Keep only rows where `keep` is true.
    pub fn filter_rows(&self, keep: &[bool]) -> PanelDataset {
        let pick = |i: &usize| keep[*i];
        let idx: Vec<usize> = (0..self.len()).filter(pick).collect();
        PanelDataset {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            years: idx.iter().map(|&i| self.years[i]).collect(),
            states: idx.iter().map(|&i| self.states[i].clone()).collect(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    pub fn key_index(&self) -> HashMap<(i64, i32), usize> {
        self.ids
            .iter()
            .zip(&self.years)
            .enumerate()
            .map(|(i, (&id, &y))| ((id, y), i))
            .collect()
    }

    /// Row indices grouped by individual, in key order.
    pub fn individual_groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = vec![];
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.ids[i] != self.ids[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Write the panel as CSV: key columns first, then numeric columns in name order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec![INDIVIDUAL_ID.to_string(), WAVE_YEAR.to_string(), STATE_ID.to_string()];
        header.extend(self.columns.keys().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].to_string(), self.years[i].to_string(), self.states[i].clone()];
            rec.extend(self.columns.values().map(|c| fmt_f64(c[i])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Shortest round-trip formatting; missing values become empty fields.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    t.parse::<f64>().ok()
}

/// Read a panel CSV, mapping schema roles onto canonical column names.
///
/// Every non-key column is parsed as numeric. Row numbers in errors count
/// data rows from 1 (the header is not counted).
pub fn load_panel(path: &Path, schema: &ColumnSchema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, schema)
}

pub fn read_panel<R: std::io::Read>(input: R, schema: &ColumnSchema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let position = |col: &str| header.iter().position(|h| h == col);

    for r in schema.roles() {
        if r.required && position(&r.column).is_none() {
            return Err(Error::MissingColumn(r.column.clone()));
        }
    }
    let id_pos = position(schema.column_for(INDIVIDUAL_ID).unwrap()).unwrap();
    let year_pos = position(schema.column_for(WAVE_YEAR).unwrap()).unwrap();
    let state_pos = position(schema.column_for(STATE_ID).unwrap()).unwrap();

    // canonical name and domain per numeric header column
    let numeric: Vec<(usize, String, Domain)> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| ![id_pos, year_pos, state_pos].contains(i))
        .map(|(i, h)| match schema.roles().iter().find(|r| &r.column == h) {
            Some(r) => (i, r.role.clone(), r.domain),
            None => (i, h.clone(), Domain::Real),
        })
        .collect();

    let mut ids = vec![];
    let mut years = vec![];
    let mut states = vec![];
    let mut cols: Vec<Vec<f64>> = vec![vec![]; numeric.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id = field(id_pos).parse::<i64>().map_err(|_| Error::NonNumeric {
            column: header[id_pos].clone(),
            row,
            value: field(id_pos).to_string(),
        })?;
        let year = field(year_pos).parse::<i32>().map_err(|_| Error::NonNumeric {
            column: header[year_pos].clone(),
            row,
            value: field(year_pos).to_string(),
        })?;
        ids.push(id);
        years.push(year);
        states.push(field(state_pos).to_string());
        for (k, (pos, _, _)) in numeric.iter().enumerate() {
            let raw = field(*pos);
            let v = parse_f64(raw).ok_or_else(|| Error::NonNumeric {
                column: header[*pos].clone(),
                row,
                value: raw.to_string(),
            })?;
            cols[k].push(v);
        }
    }

    for ((_, name, domain), values) in numeric.iter().zip(&cols) {
        let bad: Vec<usize> = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| !domain.admits(v))
            .map(|(i, _)| i + 1)
            .collect();
        if !bad.is_empty() {
            let column = schema.column_for(name).unwrap_or(name).to_string();
            return Err(Error::Domain {
                column,
                rows: bad,
                rule: domain.rule().to_string(),
            });
        }
    }

    let order = sorted_order(&ids, &years)?;
    let mut panel = PanelDataset::from_order(&order, &ids, &years, &states);
    for ((_, name, _), values) in numeric.into_iter().zip(cols) {
        panel.columns.insert(name, order.iter().map(|&i| values[i]).collect());
    }
    finish_low_income(&mut panel)?;
    Ok(panel)
}

fn sorted_order(ids: &[i64], years: &[i32]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (ids[i], years[i], i));
    for w in order.windows(2) {
        if (ids[w[0]], years[w[0]]) == (ids[w[1]], years[w[1]]) {
            return Err(Error::DuplicateKey {
                id: ids[w[0]],
                year: years[w[0]],
                first: w[0] + 1,
                second: w[1] + 1,
            });
        }
    }
    Ok(order)
}

/// Derive `low_income_flag` from `income_to_fpl_ratio` when present, else
/// check the supplied flag is constant within individual.
fn finish_low_income(panel: &mut PanelDataset) -> Result<()> {
    if panel.has_column(INCOME_TO_FPL) {
        let ratio = panel.column(INCOME_TO_FPL)?.to_vec();
        let mut flag = vec![0.0; panel.len()];
        for g in panel.individual_groups() {
            let low = ratio[g.clone()].iter().any(|&r| r < LOW_INCOME_FPL_RATIO);
            for i in g {
                flag[i] = if low { 1.0 } else { 0.0 };
            }
        }
        panel.set_column(LOW_INCOME, flag)?;
    } else if panel.has_column(LOW_INCOME) {
        let flag = panel.column(LOW_INCOME)?;
        let mut bad = vec![];
        for g in panel.individual_groups() {
            let first = flag[g.start];
            if flag[g.clone()].iter().any(|&f| f != first && !(f.is_nan() && first.is_nan())) {
                bad.extend(g.map(|i| i + 1));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Domain {
                column: LOW_INCOME.into(),
                rows: bad,
                rule: "constant within individual".into(),
            });
        }
    }
    Ok(())
}

/// Cap values above the `(1 - fraction)` weighted quantile at that quantile.
///
/// Uses the left-continuous weighted empirical quantile; values equal to the
/// quantile are left alone. Missing values pass through.
pub fn winsorize_top(values: &[f64], fraction: f64, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("winsorize_top on empty input".into()));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("winsorize fraction {fraction} not in [0, 1)")));
    }
    if fraction == 0.0 {
        return Ok(values.to_vec());
    }
    let cap = stats::weighted_quantile(values, weights, 1.0 - fraction)?;
    Ok(values.iter().map(|&v| if v > cap { cap } else { v }).collect())
}

/// Convert a nominal amount to base-period currency: `nominal * cpi_base / cpi_t`.
pub fn deflate(nominal: f64, cpi_t: f64, cpi_base: f64) -> Result<f64> {
    if !(cpi_t > 0.0) || !(cpi_base > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "CPI values must be positive (cpi_t {cpi_t}, cpi_base {cpi_base})"
        )));
    }
    Ok(nominal * cpi_base / cpi_t)
}

/// Winsorize the named columns in place, optionally using survey weights.
pub fn winsorize_columns(
    panel: &mut PanelDataset,
    columns: &[String],
    fraction: f64,
    weight_column: Option<&str>,
) -> Result<()> {
    let weights = match weight_column {
        Some(w) => Some(panel.column(w)?.to_vec()),
        None => None,
    };
    for c in columns {
        let out = winsorize_top(panel.column(c)?, fraction, weights.as_deref())?;
        panel.set_column(c.clone(), out)?;
    }
    Ok(())
}

/// Deflate the named columns using a year -> CPI series.
pub fn deflate_columns(
    panel: &mut PanelDataset,
    columns: &[String],
    cpi: &BTreeMap<i32, f64>,
    base_year: i32,
) -> Result<()> {
    let base = *cpi
        .get(&base_year)
        .ok_or_else(|| Error::InvalidArgument(format!("CPI series has no base year {base_year}")))?;
    let factors: Vec<f64> = panel
        .years()
        .iter()
        .map(|y| {
            cpi.get(y)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("CPI series has no year {y}")))
        })
        .collect::<Result<_>>()?;
    for c in columns {
        let out = panel
            .column(c)?
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| deflate(v, f, base))
            .collect::<Result<Vec<_>>>()?;
        panel.set_column(c.clone(), out)?;
    }
    Ok(())
}

pub fn lag_column_name(column: &str, lag_years: i32) -> String {
    format!("{column}_lag{lag_years}")
}

/// Add `<column>_lag<k>` holding the value at `(id, year - k)`.
///
/// Rows whose lagged wave is absent get `NaN` (missing-lag); downstream fits
/// drop them. Row count never changes.
pub fn lag_join(panel: &PanelDataset, column: &str, lag_years: i32) -> Result<PanelDataset> {
    if lag_years <= 0 {
        return Err(Error::InvalidArgument(format!("lag must be positive, got {lag_years}")));
    }
    let values = panel.column(column)?;
    let index = panel.key_index();
    let lagged: Vec<f64> = (0..panel.len())
        .map(|i| {
            index
                .get(&(panel.ids[i], panel.years[i] - lag_years))
                .map_or(f64::NAN, |&j| values[j])
        })
        .collect();
    panel.clone().with_column(lag_column_name(column, lag_years), lagged)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub column: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Weighted mean and standard deviation per column (population convention,
/// divisor is the total weight). `None` weight column means unit weights.
pub fn weighted_summary(
    panel: &PanelDataset,
    columns: &[String],
    weight_column: Option<&str>,
) -> Result<Vec<SummaryRow>> {
    let unit;
    let weights = match weight_column {
        Some(w) => panel.column(w)?,
        None => {
            unit = vec![1.0; panel.len()];
            &unit
        }
    };
    columns
        .iter()
        .map(|c| {
            let x = panel.column(c)?;
            let mut sw = 0.0;
            let mut n = 0;
            for (&v, &w) in x.iter().zip(weights) {
                if !v.is_nan() && !w.is_nan() {
                    sw += w;
                    n += 1;
                }
            }
            if sw <= 0.0 {
                return Err(Error::ZeroWeight);
            }
            let mean = x
                .iter()
                .zip(weights)
                .filter(|(v, w)| !v.is_nan() && !w.is_nan())
                .map(|(v, w)| v * w)
                .sum::<f64>()
                / sw;
            let var = x
                .iter()
                .zip(weights)
                .filter(|(v, w)| !v.is_nan() && !w.is_nan())
                .map(|(v, w)| w * (v - mean) * (v - mean))
                .sum::<f64>()
                / sw;
            Ok(SummaryRow {
                column: c.clone(),
                n,
                mean,
                sd: var.sqrt(),
            })
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["column", "n", "mean", "sd"])?;
    for r in rows {
        w.write_record([r.column.clone(), r.n.to_string(), fmt_f64(r.mean), fmt_f64(r.sd)])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Read a two-column `year,value` CSV into a map.
pub fn read_year_series(path: &Path) -> Result<BTreeMap<i32, f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut out = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let year = rec.get(0).unwrap_or("").parse::<i32>().map_err(|_| Error::NonNumeric {
            column: "year".into(),
            row: row + 1,
            value: rec.get(0).unwrap_or("").into(),
        })?;
        let raw = rec.get(1).unwrap_or("");
        let v = raw.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
            column: "value".into(),
            row: row + 1,
            value: raw.into(),
        })?;
        out.insert(year, v);
    }
    Ok(out)
}

/// Read a `state_id,wave_year,value` CSV into a map keyed by (state, year).
pub fn read_state_year_series(path: &Path) -> Result<BTreeMap<(String, i32), f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut out = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let year = field(1).parse::<i32>().map_err(|_| Error::NonNumeric {
            column: WAVE_YEAR.into(),
            row: row + 1,
            value: field(1).into(),
        })?;
        let v = parse_f64(field(2)).ok_or_else(|| Error::NonNumeric {
            column: "value".into(),
            row: row + 1,
            value: field(2).into(),
        })?;
        if out.insert((field(0).to_string(), year), v).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate state-year {}-{year} in {}", field(0), path.display())));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "individual_id,wave_year,state_id,food_exp_pc,snap,weight,tfp_cost,coli";

    fn csv_of(rows: &[&str]) -> String {
        let mut s = HEADER.to_string();
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s
    }

    #[test]
    fn loads_three_rows() {
        let text = csv_of(&["2,2001,AL,150,0,1.5,200,100", "1,2003,AL,120,1,1.0,210,101", "1,2001,AL,,0,1.0,200,100"]);
        let p = read_panel(text.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.ids(), &[1, 1, 2]);
        assert_eq!(p.years(), &[2001, 2003, 2001]);
        assert!(p.column(FOOD_EXP).unwrap()[0].is_nan());
        assert_eq!(p.column(WEIGHT).unwrap()[2], 1.5);
    }

    #[test]
    fn missing_weight_column_is_named() {
        let text = "individual_id,wave_year,state_id,food_exp_pc,snap,tfp_cost,coli\n1,2001,AL,1,0,1,100";
        match read_panel(text.as_bytes(), &ColumnSchema::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_renamed_column_names_file_column() {
        let mut o = BTreeMap::new();
        o.insert(WEIGHT.to_string(), "wgt_long".to_string());
        let schema = ColumnSchema::with_overrides(&o).unwrap();
        let err = read_panel(csv_of(&["1,2001,AL,1,0,1,1,100"]).as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("wgt_long"));
    }

    #[test]
    fn duplicate_key_cites_both_rows() {
        let text = csv_of(&["7,2001,AL,1,0,1,1,100", "3,2001,AL,1,0,1,1,100", "7,2001,AL,2,0,1,1,100"]);
        match read_panel(text.as_bytes(), &ColumnSchema::default()) {
            Err(Error::DuplicateKey { id, year, first, second }) => {
                assert_eq!((id, year, first, second), (7, 2001, 1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_domain_errors() {
        let text = csv_of(&["1,2001,AL,abc,0,1,1,100"]);
        assert!(matches!(
            read_panel(text.as_bytes(), &ColumnSchema::default()),
            Err(Error::NonNumeric { row: 1, .. })
        ));
        let text = csv_of(&["1,2001,AL,1,0,1,1,100", "2,2001,AL,1,0,-1,1,100"]);
        match read_panel(text.as_bytes(), &ColumnSchema::default()) {
            Err(Error::Domain { column, rows, .. }) => {
                assert_eq!(column, "weight");
                assert_eq!(rows, vec![2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn low_income_flag_from_fpl_ratio() {
        let text = "individual_id,wave_year,state_id,food_exp_pc,snap,weight,tfp_cost,coli,income_to_fpl_ratio\n\
                    1,2001,AL,1,0,1,1,100,2.0\n1,2003,AL,1,0,1,1,100,1.2\n2,2001,AL,1,0,1,1,100,3.0";
        let p = read_panel(text.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(p.column(LOW_INCOME).unwrap(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn low_income_flag_must_be_constant() {
        let text = "individual_id,wave_year,state_id,food_exp_pc,snap,weight,tfp_cost,coli,low_income_flag\n\
                    1,2001,AL,1,0,1,1,100,1\n1,2003,AL,1,0,1,1,100,0";
        assert!(matches!(
            read_panel(text.as_bytes(), &ColumnSchema::default()),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn winsorize_examples() {
        assert_eq!(winsorize_top(&[5.0; 10], 0.01, None).unwrap(), vec![5.0; 10]);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        // sort-based oracle: the 99th order statistic of 1..100 is 99
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let cap = sorted[(0.99 * 100.0_f64).ceil() as usize - 1];
        let w = winsorize_top(&v, 0.01, None).unwrap();
        assert_eq!(cap, 99.0);
        assert_eq!(w[99], 99.0);
        assert_eq!(&w[..99], &v[..99]);
        assert_eq!(winsorize_top(&[3.0, 1.0, 8.0], 0.0, None).unwrap(), vec![3.0, 1.0, 8.0]);
        assert!(winsorize_top(&[], 0.01, None).is_err());
        assert!(winsorize_top(&[1.0], 1.0, None).is_err());
    }

    #[test]
    fn deflate_examples() {
        assert_eq!(deflate(100.0, 250.0, 250.0).unwrap(), 100.0);
        assert!((deflate(110.0, 110.0, 100.0).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(deflate(0.0, 120.0, 100.0).unwrap(), 0.0);
        assert!(deflate(1.0, 0.0, 100.0).is_err());
        assert!(deflate(1.0, 100.0, -1.0).is_err());
    }

    fn two_person_panel(years_a: &[i32], values: &[f64]) -> PanelDataset {
        let n = years_a.len();
        PanelDataset::new(vec![1; n], years_a.to_vec(), vec!["AL".into(); n])
            .unwrap()
            .with_column("x", values.to_vec())
            .unwrap()
    }

    #[test]
    fn lag_join_examples() {
        let p = two_person_panel(&[1999, 2001], &[10.0, 20.0]);
        let l = lag_join(&p, "x", 2).unwrap();
        let lag = l.column("x_lag2").unwrap();
        assert!(lag[0].is_nan());
        assert_eq!(lag[1], 10.0);

        let p = two_person_panel(&[1999, 2003], &[10.0, 20.0]);
        let lag = lag_join(&p, "x", 2).unwrap().column("x_lag2").unwrap().to_vec();
        assert!(lag.iter().all(|v| v.is_nan()));

        let p = two_person_panel(&[1999, 2001, 2003, 2005], &[4.0; 4]);
        let l = lag_join(&p, "x", 2).unwrap();
        assert_eq!(l.len(), 4);
        assert!(l.column("x_lag2").unwrap().iter().all(|&v| v.is_nan() || v == 4.0));
        assert!(matches!(lag_join(&p, "nope", 2), Err(Error::UnknownColumn(_))));
        assert!(lag_join(&p, "x", 0).is_err());
    }

    #[test]
    fn summary_examples() {
        let p = PanelDataset::new(vec![1, 2], vec![2001, 2001], vec!["A".into(), "A".into()])
            .unwrap()
            .with_column("v", vec![1.0, 3.0])
            .unwrap()
            .with_column("w", vec![3.0, 1.0])
            .unwrap()
            .with_column("z", vec![0.0, 0.0])
            .unwrap();
        let s = weighted_summary(&p, &["v".into()], None).unwrap();
        assert_eq!(s[0].mean, 2.0);
        let s = weighted_summary(&p, &["v".into()], Some("w")).unwrap();
        assert_eq!(s[0].mean, 1.5);
        assert!(matches!(weighted_summary(&p, &["v".into()], Some("z")), Err(Error::ZeroWeight)));
        let single = p.filter_rows(&[true, false]);
        assert_eq!(weighted_summary(&single, &["v".into()], None).unwrap()[0].sd, 0.0);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let p = PanelDataset::new(vec![2, 1], vec![2001, 2003], vec!["B".into(), "A".into()])
            .unwrap()
            .with_column(FOOD_EXP, vec![0.1 + 0.2, f64::NAN])
            .unwrap()
            .with_column(SNAP, vec![1.0, 0.0])
            .unwrap()
            .with_column(WEIGHT, vec![1.0, 2.5])
            .unwrap()
            .with_column(TFP_COST, vec![180.0, 1e-3])
            .unwrap()
            .with_column(COLI, vec![88.0, 166.0])
            .unwrap();
        let mut buf = vec![];
        p.write_csv(&mut buf).unwrap();
        let q = read_panel(buf.as_slice(), &ColumnSchema::default()).unwrap();
        assert_eq!(p.ids(), q.ids());
        for c in [FOOD_EXP, SNAP, WEIGHT, TFP_COST, COLI] {
            let bits = |d: &PanelDataset| d.column(c).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p), bits(&q), "{c}");
        }
    }

    proptest! {
        #[test]
        fn winsorize_idempotent(v in proptest::collection::vec(0.0f64..1e4, 1..200),
                                w in proptest::collection::vec(0.01f64..5.0, 200),
                                frac in 0.0f64..0.3) {
            let w = &w[..v.len()];
            let once = winsorize_top(&v, frac, Some(w)).unwrap();
            let twice = winsorize_top(&once, frac, Some(w)).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn deflate_round_trip(x in -1e6f64..1e6, a in 1.0f64..500.0, b in 1.0f64..500.0) {
            let back = deflate(deflate(x, a, b).unwrap(), b, a).unwrap();
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1e-300));
        }

        #[test]
        fn unit_weights_match_textbook_moments(v in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
            let n = v.len();
            let p = PanelDataset::new((0..n as i64).collect(), vec![2001; n], vec!["A".into(); n])
                .unwrap()
                .with_column("v", v.clone())
                .unwrap()
                .with_column("one", vec![1.0; n])
                .unwrap();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let a = &weighted_summary(&p, &["v".into()], None).unwrap()[0];
            let b = &weighted_summary(&p, &["v".into()], Some("one")).unwrap()[0];
            prop_assert!((a.mean - mean).abs() < 1e-9 && (a.sd - sd).abs() < 1e-9);
            prop_assert_eq!(a, b);
        }
    }
}
