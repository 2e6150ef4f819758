//! Run configuration: defaults, then `URSK_SEED`, then a JSON file, then
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ablation::{AblationConfig, Recipe, Variant};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "URSK_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("override {0:?}: expected key=value")]
    OverrideSyntax(String),
    #[error("override {key:?}: {detail}")]
    Override { key: String, detail: String },
    #[error("{SEED_ENV}={0:?} is not an unsigned integer")]
    Seed(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub train_per_kind: usize,
    pub test_per_kind: usize,
    pub variants: Vec<Variant>,
    /// Worker threads; the host's parallelism when absent.
    pub threads: Option<usize>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        let a = AblationConfig::default();
        AblationSettings { seeds: a.seeds, train_per_kind: a.train_per_kind, test_per_kind: a.test_per_kind, variants: a.variants, threads: None }
    }
}

/// Everything a command needs. The top-level `seed` is copied into every
/// stage when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub use_clue: bool,
    pub max_new: usize,
    pub manifests: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = Recipe::default();
        RunConfig {
            seed: 0,
            model: r.model,
            pretrain: r.pretrain,
            train: r.joint,
            use_clue: r.use_clue,
            max_new: r.max_new,
            manifests: Vec::new(),
            checkpoint: None,
            out: None,
            ablation: AblationSettings::default(),
        }
    }
}

impl RunConfig {
    /// Training settings at published full scale; model dimensions stay toy.
    pub fn full_scale() -> Self {
        RunConfig { pretrain: TrainConfig::default(), train: TrainConfig::default(), ..Default::default() }
    }

    pub fn recipe(&self) -> Recipe {
        Recipe { model: self.model, pretrain: self.pretrain.clone(), joint: self.train.clone(), use_clue: self.use_clue, max_new: self.max_new }
            .with_seed(self.seed)
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            seeds: self.ablation.seeds.clone(),
            train_per_kind: self.ablation.train_per_kind,
            test_per_kind: self.ablation.test_per_kind,
            recipe: self.recipe(),
            variants: self.ablation.variants.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        self.pretrain.validate().map_err(|e| ConfigError::Invalid(format!("pretrain: {e}")))?;
        if self.max_new == 0 {
            return Err(ConfigError::Invalid("max_new must be at least 1".into()));
        }
        Ok(())
    }

    /// Resolve in precedence order. `env_seed` is the value of `URSK_SEED`.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(s) = env_seed {
            let seed: u64 = s.trim().parse().map_err(|_| ConfigError::Seed(s.to_string()))?;
            v["seed"] = Value::from(seed);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), detail: e.to_string() })?;
            if !patch.is_object() {
                return Err(ConfigError::Parse { path: path.to_path_buf(), detail: "top level must be an object".into() });
            }
            merge(&mut v, patch);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(file, env.as_deref(), overrides)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

const SECTIONS: [&str; 4] = ["model", "pretrain", "train", "ablation"];

/// `a.b=v` sets one field; a bare `k=v` sets the top-level field or, failing
/// that, `k` in every section that has it. `v` is parsed as JSON, else taken
/// as a string.
pub fn apply_override(v: &mut Value, o: &str) -> Result<(), ConfigError> {
    let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(o.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::OverrideSyntax(o.to_string()));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let unknown = || ConfigError::Override { key: key.to_string(), detail: "no such field".into() };
    if let Some((section, field)) = key.split_once('.') {
        let slot = v.get_mut(section).and_then(|s| s.get_mut(field)).ok_or_else(unknown)?;
        *slot = value;
        return Ok(());
    }
    if let Some(slot) = v.get_mut(key) {
        *slot = value;
        return Ok(());
    }
    let mut hit = false;
    for s in SECTIONS {
        if let Some(slot) = v.get_mut(s).and_then(|s| s.get_mut(key)) {
            *slot = value.clone();
            hit = true;
        }
    }
    if hit { Ok(()) } else { Err(unknown()) }
}
