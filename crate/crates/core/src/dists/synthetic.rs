use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DistsError;
use crate::model::{Bounds, CounterPmf, ObservationModel, Pmf};

/// Per-counter Poisson laws truncated to the counter bounds and renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonLike {
    /// Means of (dx, dy, dz) before the intrusion.
    pub no_intrusion: [f64; 3],
    /// Means of (dx, dy, dz) during the intrusion.
    pub intrusion: [f64; 3],
    pub bounds: Bounds,
}

impl PoissonLike {
    /// Same mean on every counter.
    pub fn uniform_means(mean0: f64, mean1: f64, bounds: Bounds) -> Self {
        Self { no_intrusion: [mean0; 3], intrusion: [mean1; 3], bounds }
    }
}

impl Default for PoissonLike {
    /// Alerts occur before the intrusion too (client traffic trips warning
    /// rules), but the intrusion raises all three rates.
    fn default() -> Self {
        Self { no_intrusion: [2.0, 6.0, 3.0], intrusion: [8.0, 14.0, 5.0], bounds: Bounds::default() }
    }
}

/// Explicit per-counter weights. An empty table is a point mass at zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    #[serde(default)]
    pub x: BTreeMap<u32, f64>,
    #[serde(default)]
    pub y: BTreeMap<u32, f64>,
    #[serde(default)]
    pub z: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum SyntheticPreset {
    /// Scalar observation in {0..5}: uniform on {0..4} without intrusion and
    /// on {0..5} with intrusion.
    AppendixUniform,
    OverlappingPoissonlike(PoissonLike),
    CustomTable { bounds: Bounds, no_intrusion: TableSpec, intrusion: TableSpec },
}

impl SyntheticPreset {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "appendix_uniform" => Some(Self::AppendixUniform),
            "overlapping_poissonlike" => Some(Self::OverlappingPoissonlike(PoissonLike::default())),
            _ => None,
        }
    }
}

pub fn synthetic_model(preset: &SyntheticPreset) -> Result<ObservationModel, DistsError> {
    match preset {
        SyntheticPreset::AppendixUniform => Ok(appendix_uniform()),
        SyntheticPreset::OverlappingPoissonlike(params) => {
            let b = params.bounds;
            let maxes = [b.x_max, b.y_max, b.z_max];
            let side = |means: &[f64; 3]| -> Result<CounterPmf, DistsError> {
                let mut pmfs = means.iter().zip(maxes).map(|(&m, max)| truncated_poisson(m, max));
                Ok(CounterPmf::Product {
                    x: pmfs.next().unwrap()?,
                    y: pmfs.next().unwrap()?,
                    z: pmfs.next().unwrap()?,
                })
            };
            Ok(ObservationModel::two_state(b, side(&params.no_intrusion)?, side(&params.intrusion)?)?)
        }
        SyntheticPreset::CustomTable { bounds, no_intrusion, intrusion } => {
            Ok(ObservationModel::two_state(*bounds, table(no_intrusion)?, table(intrusion)?)?)
        }
    }
}

pub fn appendix_uniform() -> ObservationModel {
    let uniform = |hi: u32| CounterPmf::Product {
        x: Pmf::from_weights((0..=hi).map(|v| (v, 1.0))).expect("non-empty"),
        y: Pmf::point(0),
        z: Pmf::point(0),
    };
    ObservationModel::two_state(Bounds::new(5, 0, 0), uniform(4), uniform(5)).expect("valid preset")
}

fn truncated_poisson(mean: f64, max: u32) -> Result<Pmf<u32>, DistsError> {
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(DistsError::BadParameters(format!("poisson mean must be positive, got {mean}")));
    }
    let ln_mean = mean.ln();
    let mut ln_fact = 0.0;
    let weights = (0..=max).map(|k| {
        if k > 0 {
            ln_fact += (k as f64).ln();
        }
        (k, (k as f64 * ln_mean - mean - ln_fact).exp())
    });
    Ok(Pmf::from_weights(weights.collect::<Vec<_>>())?)
}

fn table(spec: &TableSpec) -> Result<CounterPmf, DistsError> {
    let one = |m: &BTreeMap<u32, f64>| -> Result<Pmf<u32>, DistsError> {
        if m.is_empty() {
            Ok(Pmf::point(0))
        } else {
            Ok(Pmf::from_weights(m.iter().map(|(&k, &w)| (k, w)))?)
        }
    };
    Ok(CounterPmf::Product { x: one(&spec.x)?, y: one(&spec.y)?, z: one(&spec.z)? })
}
