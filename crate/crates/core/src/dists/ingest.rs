use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::DistsError;
use crate::model::{Bounds, CounterPmf, Counts, EmpiricalPmf, ObservationModel, PhaseKey, Pmf};

pub const MEASUREMENT_HEADER: &str = "t,intrusion_active,attacker_step,dx,dy,dz";

/// One row of the measurement CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub t: u64,
    pub intrusion_active: bool,
    pub attacker_step: u32,
    pub dx: u32,
    pub dy: u32,
    pub dz: u32,
}

impl MeasurementRecord {
    pub fn key(&self, max_phase: Option<u32>) -> PhaseKey {
        let phase = match max_phase {
            Some(m) => self.attacker_step.min(m),
            None => self.attacker_step,
        };
        PhaseKey { intrusion: self.intrusion_active, phase }
    }

    pub fn counts(&self) -> Counts {
        Counts::new(self.dx, self.dy, self.dz)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Product of three per-counter marginals.
    #[default]
    Product,
    /// Sparse joint table over observed triples.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub bounds: Bounds,
    pub representation: Representation,
    /// Add-one smoothing. For the product form every value in `0..=bound`
    /// gets one pseudo-count; for the joint form every triple observed under
    /// any key does.
    pub laplace_smoothing: bool,
    /// Attacker steps beyond this are folded into the last phase.
    pub max_phase: Option<u32>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { bounds: Bounds::default(), representation: Representation::Product, laplace_smoothing: false, max_phase: None }
    }
}

#[derive(Default)]
struct Tally {
    x: BTreeMap<u32, u64>,
    y: BTreeMap<u32, u64>,
    z: BTreeMap<u32, u64>,
    joint: BTreeMap<Counts, u64>,
    n: u64,
}

/// Relative-frequency distributions for every (intrusion, phase) key present
/// in the CSV.
pub fn ingest_measurements<R: Read>(source: R, opts: &IngestOptions) -> Result<BTreeMap<PhaseKey, EmpiricalPmf>, DistsError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(source);
    let mut rows = reader.records();
    let header = match rows.next() {
        None => return Err(DistsError::EmptySource),
        Some(h) => h.map_err(|e| DistsError::MalformedRow { line: 1, reason: e.to_string() })?,
    };
    let found = header.iter().collect::<Vec<_>>().join(",");
    if found != MEASUREMENT_HEADER {
        return Err(DistsError::BadHeader { found, expected: MEASUREMENT_HEADER });
    }

    let mut tallies: BTreeMap<PhaseKey, Tally> = BTreeMap::new();
    for row in rows {
        let row = row.map_err(|e| DistsError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let rec = parse_row(&row, line)?;
        let c = rec.counts();
        if !opts.bounds.contains(&c) {
            return Err(DistsError::CounterOutOfRange { line });
        }
        let tally = tallies.entry(rec.key(opts.max_phase)).or_default();
        tally.n += 1;
        match opts.representation {
            Representation::Product => {
                *tally.x.entry(c.dx).or_insert(0) += 1;
                *tally.y.entry(c.dy).or_insert(0) += 1;
                *tally.z.entry(c.dz).or_insert(0) += 1;
            }
            Representation::Joint => *tally.joint.entry(c).or_insert(0) += 1,
        }
    }
    if tallies.is_empty() {
        return Err(DistsError::EmptySource);
    }

    let joint_support: BTreeSet<Counts> = tallies.values().flat_map(|t| t.joint.keys().copied()).collect();
    let b = opts.bounds;
    let smooth = opts.laplace_smoothing;
    let marginal = |counts: &BTreeMap<u32, u64>, max: u32| -> Result<Pmf<u32>, DistsError> {
        let pmf = if smooth {
            Pmf::from_weights((0..=max).map(|v| (v, (counts.get(&v).copied().unwrap_or(0) + 1) as f64)))
        } else {
            Pmf::from_weights(counts.iter().map(|(&v, &n)| (v, n as f64)))
        };
        Ok(pmf?)
    };

    let mut out = BTreeMap::new();
    for (key, t) in tallies {
        let dist = match opts.representation {
            Representation::Product => CounterPmf::Product {
                x: marginal(&t.x, b.x_max)?,
                y: marginal(&t.y, b.y_max)?,
                z: marginal(&t.z, b.z_max)?,
            },
            Representation::Joint if smooth => CounterPmf::Joint(Pmf::from_weights(
                joint_support.iter().map(|c| (*c, (t.joint.get(c).copied().unwrap_or(0) + 1) as f64)),
            )?),
            Representation::Joint => CounterPmf::Joint(Pmf::from_weights(t.joint.iter().map(|(c, &n)| (*c, n as f64)))?),
        };
        out.insert(key, EmpiricalPmf { dist, sample_count: t.n });
    }
    Ok(out)
}

/// Ingest and assemble a full observation model. The data must contain the
/// no-intrusion key and at least one intrusion phase.
pub fn ingest_model<R: Read>(source: R, opts: &IngestOptions) -> Result<ObservationModel, DistsError> {
    let entries = ingest_measurements(source, opts)?;
    Ok(ObservationModel::new(opts.bounds, entries)?)
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<MeasurementRecord, DistsError> {
    let malformed = |reason: String| DistsError::MalformedRow { line, reason };
    if row.len() != 6 {
        return Err(malformed(format!("expected 6 fields, found {}", row.len())));
    }
    let int = |i: usize| -> Result<u64, DistsError> {
        row[i].trim().parse::<u64>().map_err(|e| malformed(format!("field {}: {e}", i + 1)))
    };
    let counter = |i: usize| -> Result<u32, DistsError> {
        // too large for u32 is certainly out of any bound
        int(i).map(|v| u32::try_from(v).unwrap_or(u32::MAX))
    };
    let intrusion_active = match row[1].trim() {
        "0" => false,
        "1" => true,
        other => return Err(malformed(format!("intrusion_active must be 0 or 1, found {other:?}"))),
    };
    let attacker_step = u32::try_from(int(2)?).map_err(|_| malformed("attacker_step too large".into()))?;
    if intrusion_active == (attacker_step == 0) {
        return Err(malformed("attacker_step must be 0 exactly when no intrusion is active".into()));
    }
    Ok(MeasurementRecord { t: int(0)?, intrusion_active, attacker_step, dx: counter(3)?, dy: counter(4)?, dz: counter(5)? })
}
