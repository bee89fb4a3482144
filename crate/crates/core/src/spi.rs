//! State policy index on a 1-10 scale, unweighted and weighted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{fmt_f64, parse_f64, PanelDataset};

pub const SPI_UNWEIGHTED: &str = "spi_unweighted";
pub const SPI_WEIGHTED: &str = "spi_weighted";
/// Offset that moves the unweighted signed count from [-3, 6] to [1, 10].
pub const UNWEIGHTED_OFFSET: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub state_id: String,
    pub year: i32,
    pub vehicle_exempt_some: f64,
    pub vehicle_exempt_all: f64,
    pub bbce: f64,
    pub noncitizen_restriction: f64,
    pub short_recert_share: f64,
    pub simplified_reporting: f64,
    pub online_application: f64,
    pub ebt_share: f64,
    pub fingerprint_required: f64,
    pub outreach_ad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Generous,
    Restrictive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Binary,
    Share,
}

/// Policy components in index order: name, direction, value kind.
const COMPONENTS: [(&str, Direction, Kind); 10] = [
    ("vehicle_exempt_some", Direction::Generous, Kind::Binary),
    ("vehicle_exempt_all", Direction::Generous, Kind::Binary),
    ("bbce", Direction::Generous, Kind::Binary),
    ("noncitizen_restriction", Direction::Restrictive, Kind::Binary),
    ("short_recert_share", Direction::Restrictive, Kind::Share),
    ("simplified_reporting", Direction::Generous, Kind::Binary),
    ("online_application", Direction::Generous, Kind::Binary),
    ("ebt_share", Direction::Generous, Kind::Share),
    ("fingerprint_required", Direction::Restrictive, Kind::Binary),
    ("outreach_ad", Direction::Generous, Kind::Binary),
];

impl PolicyRecord {
    fn values(&self) -> [f64; 10] {
        [
            self.vehicle_exempt_some,
            self.vehicle_exempt_all,
            self.bbce,
            self.noncitizen_restriction,
            self.short_recert_share,
            self.simplified_reporting,
            self.online_application,
            self.ebt_share,
            self.fingerprint_required,
            self.outreach_ad,
        ]
    }

    fn with_values(state_id: &str, year: i32, v: [f64; 10]) -> Self {
        PolicyRecord {
            state_id: state_id.to_string(),
            year,
            vehicle_exempt_some: v[0],
            vehicle_exempt_all: v[1],
            bbce: v[2],
            noncitizen_restriction: v[3],
            short_recert_share: v[4],
            simplified_reporting: v[5],
            online_application: v[6],
            ebt_share: v[7],
            fingerprint_required: v[8],
            outreach_ad: v[9],
        }
    }

    /// Every generous policy adopted (partial vehicle exemption), nothing restrictive.
    pub fn all_generous(state_id: &str, year: i32) -> Self {
        Self::with_values(state_id, year, [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0])
    }

    pub fn all_restrictive(state_id: &str, year: i32) -> Self {
        Self::with_values(state_id, year, [0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn none_adopted(state_id: &str, year: i32) -> Self {
        Self::with_values(state_id, year, [0.0; 10])
    }

    /// Field-level problems with this record.
    pub fn violations(&self) -> Vec<String> {
        let mut out = vec![];
        for ((name, _, kind), v) in COMPONENTS.iter().zip(self.values()) {
            let ok = match kind {
                Kind::Binary => v == 0.0 || v == 1.0,
                Kind::Share => (0.0..=1.0).contains(&v),
            };
            if !ok {
                out.push(format!("{name} = {v} outside its domain"));
            }
        }
        if self.vehicle_exempt_some == 1.0 && self.vehicle_exempt_all == 1.0 {
            out.push("vehicle_exempt_some and vehicle_exempt_all both set".into());
        }
        out
    }

    fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::PolicyInvariant {
                state: self.state_id.clone(),
                year: self.year,
                rule: v.join("; "),
            })
        }
    }
}

/// Magnitudes of each component's contribution; signs are fixed by direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiWeights {
    pub vehicle_exempt_some: f64,
    pub vehicle_exempt_all: f64,
    pub bbce: f64,
    pub noncitizen_restriction: f64,
    pub short_recert_share: f64,
    pub simplified_reporting: f64,
    pub online_application: f64,
    pub ebt_share: f64,
    pub fingerprint_required: f64,
    pub outreach_ad: f64,
}

impl Default for SpiWeights {
    fn default() -> Self {
        SpiWeights {
            vehicle_exempt_some: 1.624,
            vehicle_exempt_all: 1.552,
            bbce: 1.828,
            noncitizen_restriction: 4.800,
            short_recert_share: 3.180,
            simplified_reporting: 1.132,
            online_application: 0.456,
            ebt_share: 0.276,
            fingerprint_required: 1.864,
            outreach_ad: 0.148,
        }
    }
}

impl SpiWeights {
    fn magnitudes(&self) -> [f64; 10] {
        [
            self.vehicle_exempt_some,
            self.vehicle_exempt_all,
            self.bbce,
            self.noncitizen_restriction,
            self.short_recert_share,
            self.simplified_reporting,
            self.online_application,
            self.ebt_share,
            self.fingerprint_required,
            self.outreach_ad,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, _, _), w) in COMPONENTS.iter().zip(self.magnitudes()) {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("SPI weight for {name} must be positive, got {w}")));
            }
        }
        Ok(())
    }

    /// Raw sums of the all-generous and all-restrictive records. The
    /// generous bound uses the larger of the two vehicle weights.
    pub fn bounds(&self) -> (f64, f64) {
        let mut top = PolicyRecord::all_generous("", 0);
        if self.vehicle_exempt_all > self.vehicle_exempt_some {
            top.vehicle_exempt_some = 0.0;
            top.vehicle_exempt_all = 1.0;
        }
        let bottom = PolicyRecord::all_restrictive("", 0);
        (signed_sum(&bottom, &self.magnitudes()), signed_sum(&top, &self.magnitudes()))
    }
}

fn signed_sum(record: &PolicyRecord, magnitudes: &[f64; 10]) -> f64 {
    let mut s = 0.0;
    for (((_, dir, _), v), m) in COMPONENTS.iter().zip(record.values()).zip(magnitudes) {
        match dir {
            Direction::Generous => s += m * v,
            Direction::Restrictive => s -= m * v,
        }
    }
    s
}

/// Generous count minus restrictive count (shares count fractionally) plus 4.
pub fn unweighted_spi(record: &PolicyRecord) -> Result<f64> {
    record.check()?;
    Ok(signed_sum(record, &[1.0; 10]) + UNWEIGHTED_OFFSET)
}

/// Signed weighted sum before scaling.
pub fn weighted_raw(record: &PolicyRecord, weights: &SpiWeights) -> Result<f64> {
    record.check()?;
    weights.validate()?;
    Ok(signed_sum(record, &weights.magnitudes()))
}

/// Weighted sum mapped affinely from its theoretical bounds onto [1, 10].
pub fn weighted_spi(record: &PolicyRecord, weights: &SpiWeights) -> Result<f64> {
    let s = weighted_raw(record, weights)?;
    let (lo, hi) = weights.bounds();
    Ok(1.0 + 9.0 * (s - lo) / (hi - lo))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum PolicyIssue {
    Duplicate { state: String, year: i32 },
    Invariant { state: String, year: i32, rule: String },
    YearGap { state: String, missing: Vec<i32> },
}

/// Duplicate state-years, per-record invariant violations, and years absent
/// from a state's series that other states report within its span.
pub fn validate_policy_panel(records: &[PolicyRecord]) -> Vec<PolicyIssue> {
    let mut issues = vec![];
    let mut seen: BTreeMap<(String, i32), usize> = BTreeMap::new();
    let mut by_state: BTreeMap<String, BTreeSet<i32>> = BTreeMap::new();
    let mut all_years = BTreeSet::new();
    for r in records {
        let count = seen.entry((r.state_id.clone(), r.year)).or_default();
        *count += 1;
        if *count == 2 {
            issues.push(PolicyIssue::Duplicate {
                state: r.state_id.clone(),
                year: r.year,
            });
        }
        for rule in r.violations() {
            issues.push(PolicyIssue::Invariant {
                state: r.state_id.clone(),
                year: r.year,
                rule,
            });
        }
        by_state.entry(r.state_id.clone()).or_default().insert(r.year);
        all_years.insert(r.year);
    }
    for (state, years) in by_state {
        let (lo, hi) = (*years.first().unwrap(), *years.last().unwrap());
        let missing: Vec<i32> = all_years.range(lo..=hi).filter(|y| !years.contains(y)).copied().collect();
        if !missing.is_empty() {
            issues.push(PolicyIssue::YearGap { state, missing });
        }
    }
    issues
}

pub fn read_policy<R: Read>(input: R) -> Result<Vec<PolicyRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = vec![];
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn load_policy(path: &Path) -> Result<Vec<PolicyRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_policy(file)
}

pub fn write_policy_csv<W: Write>(records: &[PolicyRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(
        ["state_id", "year"]
            .into_iter()
            .chain(COMPONENTS.iter().map(|c| c.0)),
    )?;
    for r in records {
        let mut row = vec![r.state_id.clone(), r.year.to_string()];
        row.extend(r.values().iter().map(|v| fmt_f64(*v)));
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpiRow {
    pub state_id: String,
    pub year: i32,
    pub spi_unweighted: f64,
    pub spi_weighted: f64,
}

/// Both indices for every record, sorted by (state, year).
pub fn spi_table(records: &[PolicyRecord], weights: &SpiWeights) -> Result<Vec<SpiRow>> {
    let mut rows = records
        .iter()
        .map(|r| {
            Ok(SpiRow {
                state_id: r.state_id.clone(),
                year: r.year,
                spi_unweighted: unweighted_spi(r)?,
                spi_weighted: weighted_spi(r, weights)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (&a.state_id, a.year).cmp(&(&b.state_id, b.year)));
    Ok(rows)
}

pub fn write_spi_csv<W: Write>(rows: &[SpiRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["state_id", "year", SPI_UNWEIGHTED, SPI_WEIGHTED])?;
    for r in rows {
        w.write_record([r.state_id.clone(), r.year.to_string(), fmt_f64(r.spi_unweighted), fmt_f64(r.spi_weighted)])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Inverse of [`write_spi_csv`].
pub fn read_spi_csv<R: Read>(input: R) -> Result<Vec<SpiRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = vec![];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |i: usize, column: &str| Error::NonNumeric {
            column: column.to_string(),
            row: row + 1,
            value: field(i).to_string(),
        };
        out.push(SpiRow {
            state_id: field(0).to_string(),
            year: field(1).parse().map_err(|_| bad(1, "year"))?,
            spi_unweighted: parse_f64(field(2)).ok_or_else(|| bad(2, SPI_UNWEIGHTED))?,
            spi_weighted: parse_f64(field(3)).ok_or_else(|| bad(3, SPI_WEIGHTED))?,
        });
    }
    Ok(out)
}

/// Attach both indices to the panel by (state_id, wave_year); unmatched rows get NaN.
pub fn join_spi(panel: &PanelDataset, rows: &[SpiRow]) -> Result<PanelDataset> {
    let index: HashMap<(&str, i32), &SpiRow> = rows.iter().map(|r| ((r.state_id.as_str(), r.year), r)).collect();
    let mut unw = vec![f64::NAN; panel.len()];
    let mut wtd = vec![f64::NAN; panel.len()];
    for i in 0..panel.len() {
        if let Some(r) = index.get(&(panel.states()[i].as_str(), panel.years()[i])) {
            unw[i] = r.spi_unweighted;
            wtd[i] = r.spi_weighted;
        }
    }
    panel.clone().with_column(SPI_UNWEIGHTED, unw)?.with_column(SPI_WEIGHTED, wtd)
}
