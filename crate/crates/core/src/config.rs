//! Experiment configuration: one JSON document, Example 1 defaults, named
//! profiles and dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::benchmarks::{PsorSpec, TreeSpec};
use crate::consistency::{ControlTiming, SimConfig};
use crate::jetnet::NetworkConfig;
use crate::loss::{BatchSizes, DomainSpec, LossKind};
use crate::market::{MarketParams, UtilityFamily};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("override `{0}`: expected key=value")]
    OverrideSyntax(String),
    #[error("override `{key}`: {reason}")]
    OverridePath { key: String, reason: String },
    #[error("unknown profile `{0}` (expected desk or paper)")]
    Profile(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(ConfigError::Profile(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub batch: BatchSizes,
    pub depth: usize,
    pub width: usize,
    /// Feed the network `(tau / tau_max, z / C_z)` instead of raw `(tau, z)`.
    pub scale_inputs: bool,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainSection {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                epochs: 3000,
                lr0: 2e-3,
                halve_every: 600,
                batch: BatchSizes::DESK,
                depth: 4,
                width: 64,
                scale_inputs: false,
                seeds: (0..5).collect(),
                checkpoint_every: 0,
            },
            Profile::Paper => Self {
                epochs: 20_000,
                lr0: 2e-3,
                halve_every: 4000,
                batch: BatchSizes::PAPER,
                depth: 8,
                width: 128,
                scale_inputs: false,
                seeds: (0..5).collect(),
                checkpoint_every: 4000,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub c_z: f64,
    pub c_z_eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub paths: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub control_timing: ControlTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: MarketParams,
    pub utility: UtilityFamily,
    pub loss_kind: LossKind,
    pub train: TrainSection,
    pub domain: DomainSection,
    pub x0: Vec<f64>,
    pub btm_steps: usize,
    pub sim: SimSection,
    pub psor: PsorSpec,
    pub out_dir: PathBuf,
}

/// `1.1, 1.2, ..., 2.0`, built from integers so the values print cleanly.
pub fn example_one_x0() -> Vec<f64> {
    (11..=20).map(|i| i as f64 / 10.0).collect()
}

impl ExperimentConfig {
    pub fn with_profile(profile: Profile) -> Self {
        Self {
            market: MarketParams::example_one(),
            utility: UtilityFamily::default(),
            loss_kind: LossKind::Fbr,
            train: TrainSection::profile(profile),
            domain: DomainSection { c_z: 1.5, c_z_eval: 1.0 },
            x0: example_one_x0(),
            btm_steps: 2000,
            sim: SimSection {
                dt: 0.01,
                paths: 100,
                seeds: (60..65).collect(),
                control_timing: ControlTiming::default(),
            },
            psor: PsorSpec::default(),
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Loads `path` (or the profile defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, profile: Profile, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                // a partial document is layered over the profile defaults
                let user: Value = serde_json::from_str(&text)?;
                let mut base = serde_json::to_value(Self::with_profile(profile))?;
                merge(&mut base, user);
                base
            }
            None => serde_json::to_value(Self::with_profile(profile))?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.market.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.utility.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.domain_spec()?;
        if self.x0.is_empty() {
            return inv("x0 list is empty".into());
        }
        if let Some(x) = self.x0.iter().find(|&&x| !(x > self.market.k)) {
            return inv(format!("x0 = {x} must exceed K = {}", self.market.k));
        }
        if self.train.seeds.is_empty() || self.sim.seeds.is_empty() {
            return inv("training and simulation seed lists must be non-empty".into());
        }
        if self.btm_steps == 0 {
            return inv("btm_steps must be positive".into());
        }
        self.psor.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config(self.train.seeds[0])?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sim_config(self.x0[0], self.sim.seeds[0])
            .steps(self.market.horizon)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn domain_spec(&self) -> Result<DomainSpec, ConfigError> {
        let consts = self.market.derived().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        DomainSpec::new(self.domain.c_z, consts.tau_max, self.domain.c_z_eval).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn network_config(&self, seed: u64) -> Result<NetworkConfig, ConfigError> {
        let net = NetworkConfig::new(self.train.depth, self.train.width, seed);
        if self.train.scale_inputs {
            let d = self.domain_spec()?;
            Ok(net.with_domain_scaling(d.tau_max, d.c_z))
        } else {
            Ok(net)
        }
    }

    /// Training run for one seed; the seed drives both initialisation and sampling.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            market: self.market,
            utility: self.utility,
            loss_kind: self.loss_kind,
            epochs: self.train.epochs,
            lr0: self.train.lr0,
            halve_every: self.train.halve_every,
            batch: self.train.batch,
            net: self.network_config(seed)?,
            domain: self.domain_spec()?,
            seed,
            checkpoint_every: self.train.checkpoint_every,
        })
    }

    pub fn tree_spec(&self) -> TreeSpec {
        TreeSpec::new(self.btm_steps, self.market, self.utility)
    }

    pub fn sim_config(&self, x0: f64, seed: u64) -> SimConfig {
        SimConfig {
            x0,
            dt: self.sim.dt,
            paths: self.sim.paths,
            seed,
            control_timing: self.sim.control_timing,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    // tagged enums are replaced whole so a family switch drops stale fields
                    Some(slot) if slot.is_object() && v.is_object() && !v.get("family").is_some() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, else taken as a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::OverrideSyntax(spec.to_string()));
    }
    let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut slot = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = slot.as_object_mut().ok_or_else(|| ConfigError::OverridePath {
            key: key.to_string(),
            reason: format!("`{}` is not an object", parts[..i].join(".")),
        })?;
        if i + 1 == parts.len() {
            // the utility tag selects the variant, so replacing it resets the payload
            if !obj.contains_key(*part) && !(parts.len() >= 2 && parts[parts.len() - 2] == "utility") {
                return Err(ConfigError::OverridePath {
                    key: key.to_string(),
                    reason: format!("unknown key `{part}`"),
                });
            }
            obj.insert(part.to_string(), value);
            if *part == "family" {
                if let Some(Value::String(f)) = obj.get("family").cloned() {
                    if f != "power" {
                        obj.remove("gamma");
                    } else if !obj.contains_key("gamma") {
                        obj.insert("gamma".into(), Value::from(0.5));
                    }
                }
            }
            return Ok(());
        }
        slot = obj.get_mut(*part).ok_or_else(|| ConfigError::OverridePath {
            key: key.to_string(),
            reason: format!("unknown key `{part}`"),
        })?;
    }
    unreachable!("split yields at least one part")
}
