//! JSON model file.
//!
//! ```json
//! {
//!   "format": "optstop-observation-model/1",
//!   "bounds": {"x_max": 5, "y_max": 0, "z_max": 0},
//!   "keys": [{"intrusion": false, "phase": 0}, {"intrusion": true, "phase": 1}],
//!   "entries": [
//!     {"intrusion": false, "phase": 0, "sample_count": 1, "representation": "product",
//!      "x": {"support": [0, 1], "probs": ["5.00000000000000000e-1", "5.00000000000000000e-1"]},
//!      "y": {...}, "z": {...}},
//!     {"intrusion": true, "phase": 1, "sample_count": 1, "representation": "joint",
//!      "support": [[0, 0, 0]], "probs": ["1.00000000000000000e0"]}
//!   ]
//! }
//! ```
//!
//! Probabilities are written with 18 significant digits, enough for every
//! `f64` to survive a save/load cycle bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DistsError;
use crate::model::{Bounds, CounterPmf, Counts, EmpiricalPmf, ObservationModel, PhaseKey, Pmf};

pub const MODEL_FORMAT: &str = "optstop-observation-model/1";

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    bounds: Bounds,
    keys: Vec<PhaseKey>,
    entries: Vec<EntryDoc>,
}

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    intrusion: bool,
    phase: u32,
    sample_count: u64,
    #[serde(flatten)]
    dist: DistDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "representation", rename_all = "snake_case")]
enum DistDoc {
    Product { x: TableDoc<u32>, y: TableDoc<u32>, z: TableDoc<u32> },
    Joint { support: Vec<[u32; 3]>, probs: Vec<String> },
}

#[derive(Serialize, Deserialize)]
struct TableDoc<T> {
    support: Vec<T>,
    probs: Vec<String>,
}

fn fmt_prob(p: f64) -> String {
    format!("{p:.17e}")
}

fn parse_prob(s: &str) -> Result<f64, DistsError> {
    s.parse::<f64>().map_err(|_| DistsError::Format(format!("bad probability {s:?}")))
}

fn table_doc(p: &Pmf<u32>) -> TableDoc<u32> {
    TableDoc { support: p.support().to_vec(), probs: p.probs().iter().map(|&v| fmt_prob(v)).collect() }
}

fn table_from_doc(d: TableDoc<u32>) -> Result<Pmf<u32>, DistsError> {
    let probs = d.probs.iter().map(|s| parse_prob(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(Pmf::from_probs(d.support, probs)?)
}

pub fn write_model<W: Write>(model: &ObservationModel, out: W) -> Result<(), DistsError> {
    let entries = model
        .entries()
        .map(|(k, e)| EntryDoc {
            intrusion: k.intrusion,
            phase: k.phase,
            sample_count: e.sample_count,
            dist: match &e.dist {
                CounterPmf::Product { x, y, z } => DistDoc::Product { x: table_doc(x), y: table_doc(y), z: table_doc(z) },
                CounterPmf::Joint(j) => DistDoc::Joint {
                    support: j.support().iter().map(|c| [c.dx, c.dy, c.dz]).collect(),
                    probs: j.probs().iter().map(|&v| fmt_prob(v)).collect(),
                },
            },
        })
        .collect();
    let doc = ModelDoc {
        format: MODEL_FORMAT.into(),
        bounds: model.bounds(),
        keys: model.entries().map(|(k, _)| *k).collect(),
        entries,
    };
    serde_json::to_writer_pretty(out, &doc)?;
    Ok(())
}

pub fn read_model<R: Read>(input: R) -> Result<ObservationModel, DistsError> {
    let doc: ModelDoc = serde_json::from_reader(input)?;
    if doc.format != MODEL_FORMAT {
        return Err(DistsError::Format(format!("unsupported format {:?}", doc.format)));
    }
    let mut entries = Vec::with_capacity(doc.entries.len());
    for e in doc.entries {
        let dist = match e.dist {
            DistDoc::Product { x, y, z } => CounterPmf::Product { x: table_from_doc(x)?, y: table_from_doc(y)?, z: table_from_doc(z)? },
            DistDoc::Joint { support, probs } => {
                let probs = probs.iter().map(|s| parse_prob(s)).collect::<Result<Vec<_>, _>>()?;
                let support = support.into_iter().map(|[dx, dy, dz]| Counts { dx, dy, dz }).collect();
                CounterPmf::Joint(Pmf::from_probs(support, probs)?)
            }
        };
        entries.push((PhaseKey { intrusion: e.intrusion, phase: e.phase }, EmpiricalPmf { dist, sample_count: e.sample_count }));
    }
    let listed: Vec<PhaseKey> = entries.iter().map(|(k, _)| *k).collect();
    let mut sorted_keys = doc.keys.clone();
    sorted_keys.sort();
    let mut sorted_listed = listed.clone();
    sorted_listed.sort();
    if sorted_keys != sorted_listed {
        return Err(DistsError::Format("key list does not match the entries".into()));
    }
    Ok(ObservationModel::new(doc.bounds, entries)?)
}

pub fn save_model(model: &ObservationModel, path: &Path) -> Result<(), DistsError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ObservationModel, DistsError> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::ingest::{ingest_model, IngestOptions, Representation};
    use crate::dists::synthetic::{appendix_uniform, synthetic_model, PoissonLike, SyntheticPreset};
    use proptest::prelude::*;

    fn round_trip(m: &ObservationModel) -> ObservationModel {
        let mut buf = Vec::new();
        write_model(m, &mut buf).unwrap();
        read_model(buf.as_slice()).unwrap()
    }

    #[test]
    fn presets_round_trip_exactly() {
        let m = appendix_uniform();
        assert_eq!(round_trip(&m), m);
        let p = synthetic_model(&SyntheticPreset::OverlappingPoissonlike(PoissonLike::default())).unwrap();
        assert_eq!(round_trip(&p), p);
    }

    #[test]
    fn probabilities_have_enough_digits() {
        let mut buf = Vec::new();
        write_model(&appendix_uniform(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"2.00000000000000011e-1\""), "{text}");
    }

    #[test]
    fn rejects_wrong_format_tag() {
        let mut buf = Vec::new();
        write_model(&appendix_uniform(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(MODEL_FORMAT, "other/9");
        assert!(matches!(read_model(text.as_bytes()), Err(DistsError::Format(_))));
    }

    proptest! {
        #[test]
        fn ingested_models_round_trip(
            rows in proptest::collection::vec((0u32..4, 0u32..6, 0u32..6, 0u32..6), 1..60),
            joint in any::<bool>(),
        ) {
            let mut csv = String::from("t,intrusion_active,attacker_step,dx,dy,dz\n0,0,0,0,0,0\n1,1,1,1,1,1\n");
            for (i, (phase, dx, dy, dz)) in rows.iter().enumerate() {
                let active = u32::from(*phase > 0);
                csv.push_str(&format!("{},{},{},{},{},{}\n", i + 2, active, phase, dx, dy, dz));
            }
            let opts = IngestOptions {
                bounds: Bounds::new(5, 5, 5),
                representation: if joint { Representation::Joint } else { Representation::Product },
                ..Default::default()
            };
            let m = ingest_model(csv.as_bytes(), &opts).unwrap();
            prop_assert_eq!(round_trip(&m), m);
        }
    }
}
