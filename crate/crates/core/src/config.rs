//! System configuration: one TOML document, optionally split across files
//! with a top-level `include = ["other.toml", ...]` list. Included files are
//! merged first, in order; keys in the including file win. Paths are relative
//! to the including file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceError, EnergyCoefficients, NpuSpec, TierConfig, TierSpec};
use crate::kv::mapping::MappingPolicy;
use crate::kv::scheduler::{SchedulerConfig, SchedulerConfigError};
use crate::model::{ModelError, ModelSpec};
use crate::tier::{PerTier, Tier};
use crate::workload::locality::{LocalityError, LocalityModel};

const DEFAULT_MAIN: &str = include_str!("../configs/default.toml");
const DEFAULT_TIERS: &str = include_str!("../configs/tiers.toml");
const TINY: &str = include_str!("../configs/tiny.toml");
const MAX_INCLUDE_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("config include depth exceeds {MAX_INCLUDE_DEPTH} (cycle?)")]
    IncludeDepth,
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerConfigError),
    #[error(transparent)]
    Locality(#[from] LocalityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierConfigs {
    pub hbm: TierConfig,
    pub ddr: TierConfig,
    pub ssd: TierConfig,
}

impl TierConfigs {
    pub fn get(&self, t: Tier) -> &TierConfig {
        match t {
            Tier::Hbm => &self.hbm,
            Tier::Ddr => &self.ddr,
            Tier::Ssd => &self.ssd,
        }
    }

    pub fn get_mut(&mut self, t: Tier) -> &mut TierConfig {
        match t {
            Tier::Hbm => &mut self.hbm,
            Tier::Ddr => &mut self.ddr,
            Tier::Ssd => &mut self.ssd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    /// Keep `ceil(n / compression)` tokens per request and step.
    pub compression: f64,
    /// Tile width used when attention runs on fixed tiles instead of tokens.
    pub attention_tile_tokens: u32,
}

/// How a request that does not fit on arrival is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    /// The run fails with out-of-memory.
    Strict,
    /// The request waits until enough capacity is released.
    Queue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub slo_ms: Vec<f64>,
    /// Fraction of intra-tier reduction that may overlap PU work.
    pub reduction_overlap: f64,
    pub max_batch: usize,
    pub admission: Admission,
    /// Model weights occupy HBM capacity.
    pub weights_in_hbm: bool,
    /// Limit per-step swap traffic to what the links move during the step.
    pub migration_budget: bool,
    /// Bank-group mapping used by the full system.
    pub mapping: MappingPolicy,
    /// Run exact attention on small embeddings and check every step.
    #[serde(default)]
    pub verify_numerics: bool,
    /// Drive sparsity and importance from the embeddings' true attention
    /// weights instead of the synthetic score process.
    #[serde(default)]
    pub numeric_scores: bool,
    #[serde(default = "default_numeric_dim")]
    pub numeric_dim: usize,
    #[serde(default = "default_numeric_rho")]
    pub numeric_rho: f64,
}

fn default_numeric_dim() -> usize {
    8
}

fn default_numeric_rho() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub model: ModelSpec,
    pub npu: NpuSpec,
    pub tiers: TierConfigs,
    pub energy: EnergyCoefficients,
    pub scheduler: SchedulerConfig,
    pub sparsity: SparsityConfig,
    pub locality: LocalityModel,
    pub sim: SimParams,
}

impl Default for SystemConfig {
    fn default() -> Self {
        parse_config_with(DEFAULT_MAIN, "default.toml", &|name: &str| match name {
            "tiers.toml" => Ok(DEFAULT_TIERS.to_string()),
            other => Err(ConfigError::Parse {
                origin: "default.toml".into(),
                message: format!("unknown embedded include `{other}`"),
            }),
        })
        .expect("embedded default config is valid")
    }
}

impl SystemConfig {
    /// A small self-contained system for tests and smoke runs.
    pub fn tiny() -> Self {
        parse_config(TINY).expect("embedded tiny config is valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.npu.validate()?;
        self.energy.validate()?;
        self.scheduler.validate()?;
        self.locality.validate()?;
        self.tier_specs()?;
        if !(self.sparsity.compression >= 1.0 && self.sparsity.compression.is_finite()) {
            return Err(ConfigError::Invalid("sparsity.compression must be at least 1".into()));
        }
        if self.sparsity.attention_tile_tokens == 0 {
            return Err(ConfigError::Invalid("sparsity.attention_tile_tokens must be positive".into()));
        }
        if self.sim.slo_ms.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(ConfigError::Invalid("sim.slo_ms thresholds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sim.reduction_overlap) {
            return Err(ConfigError::Invalid("sim.reduction_overlap must lie in [0, 1]".into()));
        }
        if self.sim.max_batch == 0 {
            return Err(ConfigError::Invalid("sim.max_batch must be positive".into()));
        }
        if (self.sim.verify_numerics || self.sim.numeric_scores) && self.sim.numeric_dim == 0 {
            return Err(ConfigError::Invalid("sim.numeric_dim must be positive".into()));
        }
        if self.sim.weights_in_hbm && self.model.weight_bytes() > self.tier_specs()?.hbm.capacity_bytes {
            return Err(ConfigError::Invalid("model weights exceed HBM capacity".into()));
        }
        Ok(())
    }

    pub fn tier_specs(&self) -> Result<PerTier<TierSpec>, ConfigError> {
        Ok(PerTier {
            hbm: self.tiers.hbm.derive(Tier::Hbm)?,
            ddr: self.tiers.ddr.derive(Tier::Ddr)?,
            ssd: self.tiers.ssd.derive(Tier::Ssd)?,
        })
    }

    /// Fully expanded TOML (no includes).
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_error(origin: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Parse {
        origin: origin.to_string(),
        message: e.to_string(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(
    text: &str,
    origin: &str,
    read: &dyn Fn(&str) -> Result<String, ConfigError>,
    depth: usize,
) -> Result<toml::Table, ConfigError> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(ConfigError::IncludeDepth);
    }
    let mut table: toml::Table = text.parse().map_err(|e| parse_error(origin, e))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(parse_error(origin, format!("include entries must be strings, got {other}"))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => return Err(parse_error(origin, format!("include must be an array, got {other}"))),
    };
    let mut merged = toml::Table::new();
    for name in includes {
        let sub = read(&name)?;
        merge(&mut merged, resolve(&sub, &name, read, depth + 1)?);
    }
    merge(&mut merged, table);
    Ok(merged)
}

/// Parses config text, resolving includes through `read`.
pub fn parse_config_with(
    text: &str,
    origin: &str,
    read: &dyn Fn(&str) -> Result<String, ConfigError>,
) -> Result<SystemConfig, ConfigError> {
    let table = resolve(text, origin, read, 0)?;
    let cfg: SystemConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| parse_error(origin, e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses self-contained config text; includes are rejected.
pub fn parse_config(text: &str) -> Result<SystemConfig, ConfigError> {
    parse_config_with(text, "<string>", &|name: &str| {
        Err(parse_error("<string>", format!("include `{name}` needs a file-based config")))
    })
}

pub fn load_config(path: &Path) -> Result<SystemConfig, ConfigError> {
    fn read_file(path: &Path) -> Result<String, ConfigError> {
        std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
    let text = read_file(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let read = move |name: &str| read_file(&base.join(name));
    parse_config_with(&text, &path.display().to_string(), &read)
}

/// The shipped default config files, for writing to disk.
pub fn default_config_files() -> [(&'static str, &'static str); 3] {
    [("default.toml", DEFAULT_MAIN), ("tiers.toml", DEFAULT_TIERS), ("tiny.toml", TINY)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = SystemConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.tier_specs().unwrap(), cfg.tier_specs().unwrap());
    }

    #[test]
    fn include_merges_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in default_config_files() {
            std::fs::write(dir.path().join(name), text).unwrap();
        }
        let main = dir.path().join("custom.toml");
        std::fs::write(
            &main,
            "include = [\"default.toml\"]\n[scheduler]\nx = 0.5\n[tiers.ssd]\ndevices = 4\n",
        )
        .unwrap();
        let cfg = load_config(&main).unwrap();
        let def = SystemConfig::default();
        assert_eq!(cfg.scheduler.x, 0.5);
        assert_eq!(cfg.scheduler.y, def.scheduler.y);
        assert_eq!(cfg.tiers.ssd.devices, 4);
        assert_eq!(cfg.tiers.ssd.flash, def.tiers.ssd.flash);
    }

    #[test]
    fn reports_unknown_keys_and_bad_values() {
        let mut text = SystemConfig::default().to_toml_string();
        text.push_str("\n[bogus]\nx = 1\n");
        assert!(matches!(parse_config(&text), Err(ConfigError::Parse { .. })));
        let mut cfg = SystemConfig::default();
        cfg.sparsity.compression = 0.5;
        assert!(parse_config(&cfg.to_toml_string()).is_err());
    }

    #[test]
    fn missing_file_and_include_cycle() {
        let e = load_config(Path::new("/no/such/config.toml")).unwrap_err();
        assert!(e.to_string().contains("/no/such/config.toml"));
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        std::fs::write(&a, "include = [\"a.toml\"]\n").unwrap();
        assert!(matches!(load_config(&a), Err(ConfigError::IncludeDepth)));
    }
}
