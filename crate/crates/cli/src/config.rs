//! Run configuration: defaults, then a JSON file of flat dotted keys, then
//! command-line overrides. Later sources win.

use std::path::{Path, PathBuf};

use optstop_core::dists::{load_model, synthetic_model, IngestOptions, SyntheticPreset};
use optstop_core::learner::TrainerConfig;
use optstop_core::sim::EnvConfig;
use optstop_core::{Bounds, ObservationModel, RewardParams, SolverConfig, TransitionModel};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSettings {
    pub p: f64,
    pub attacker_sequence_length: u32,
    pub max_steps: u32,
    pub rewards: RewardParams,
}

impl Default for EnvSettings {
    fn default() -> Self {
        Self {
            p: TransitionModel::default().p,
            attacker_sequence_length: EnvConfig::DEFAULT_SEQUENCE_LENGTH,
            max_steps: EnvConfig::DEFAULT_MAX_STEPS,
            rewards: RewardParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub episodes: usize,
    /// Compact policy spec, e.g. `fixed:6`; ignored when `policy_file` is set.
    pub policy: String,
    pub policy_file: Option<PathBuf>,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { episodes: 200, policy: "fixed:6".into(), policy_file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    /// `start:stop:step` (inclusive) or a comma-separated list.
    pub x: String,
    pub y: String,
    pub z: String,
    pub t: String,
    /// Belief grid size for belief-driven policies.
    pub beliefs: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { x: "0:200:10".into(), y: "0:400:20".into(), z: "0".into(), t: "5,10,20".into(), beliefs: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Seeds of independent training runs; empty means the run seed only.
    pub seeds: Vec<u64>,
    /// Write a policy checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { seeds: Vec::new(), checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSettings {
    pub input: Option<PathBuf>,
    pub options: IngestOptions,
}

impl Default for IngestSettings {
    fn default() -> Self {
        Self { input: None, options: IngestOptions::default() }
    }
}

/// Everything a subcommand needs. Embedded in every output bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Preset name (`appendix_uniform`, `overlapping_poissonlike`) or the
    /// path of a model file.
    pub model: String,
    pub env: EnvSettings,
    pub solver: SolverConfig,
    pub trainer: TrainerConfig,
    pub train: TrainSettings,
    pub sim: SimSettings,
    pub probe: ProbeSettings,
    pub ingest: IngestSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: "appendix_uniform".into(),
            env: EnvSettings::default(),
            solver: SolverConfig::default(),
            trainer: TrainerConfig::default(),
            train: TrainSettings::default(),
            sim: SimSettings::default(),
            probe: ProbeSettings::default(),
            ingest: IngestSettings::default(),
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Config(format!("unknown config key {key:?}"));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        if parts.peek().is_none() {
            if !obj.contains_key(part) {
                return Err(unknown());
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(part).ok_or_else(unknown)?;
    }
    Err(unknown())
}

/// Parses an override value as JSON, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Defaults, then `file`, then `overrides`, all as dotted keys.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let flat: Map<String, Value> =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in flat {
            set_dotted(&mut tree, &k, v)?;
        }
    }
    for (k, v) in overrides {
        set_dotted(&mut tree, k, v.clone())?;
    }
    let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.trainer.seed = cfg.seed;
    Ok(cfg)
}

impl RunConfig {
    pub fn observation_model(&self) -> Result<ObservationModel, CliError> {
        match SyntheticPreset::from_name(&self.model) {
            Some(preset) => Ok(synthetic_model(&preset)?),
            None => {
                let path = Path::new(&self.model);
                if !path.exists() {
                    return Err(CliError::Config(format!("model {:?} is neither a preset nor a file", self.model)));
                }
                Ok(load_model(path)?)
            }
        }
    }

    pub fn env(&self) -> Result<EnvConfig, CliError> {
        let env = EnvConfig {
            transition: TransitionModel::new(self.env.p).map_err(|e| CliError::Config(e.to_string()))?,
            observations: self.observation_model()?,
            rewards: self.env.rewards,
            attacker_sequence_length: self.env.attacker_sequence_length,
            max_steps: self.env.max_steps,
        };
        env.validate()?;
        Ok(env)
    }
}

/// `start:stop:step` (inclusive) or `a,b,c`.
pub fn parse_range(spec: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("bad range {spec:?}"));
    if let Some((a, rest)) = spec.split_once(':') {
        let (b, step) = rest.split_once(':').unwrap_or((rest, "1"));
        let (a, b, step): (u64, u64, u64) =
            (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?, step.trim().parse().map_err(|_| bad())?);
        if step == 0 || b < a {
            return Err(bad());
        }
        Ok((a..=b).step_by(step as usize).collect())
    } else {
        spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
    }
}

pub fn parse_bounds(spec: &str) -> Result<Bounds, CliError> {
    let v = parse_range(spec)?;
    match v[..] {
        [x, y, z] => {
            let c = |n: u64| u32::try_from(n).map_err(|_| CliError::Config(format!("bound {n} too large")));
            Ok(Bounds::new(c(x)?, c(y)?, c(z)?))
        }
        _ => Err(CliError::Config(format!("bounds need three values, got {spec:?}"))),
    }
}
