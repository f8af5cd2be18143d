//! Declarative experiment configuration.
//!
//! Layers apply in order: built-in defaults, then a TOML file, then
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::downstream::DownstreamConfig;
use super::synthetic::SyntheticSpec;
use crate::assignment::SupervisionMode;
use crate::error::{Error, Result};
use crate::longterm::{InputMode, LongtermTrainConfig, ProbeConfig};
use crate::optim::{OptimizerConfig, StepDecay};
use crate::segment_model::{Objective, Trunk};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    Synthetic(SyntheticSpec),
    /// An experiment directory as written by `ExperimentData::write_dir`.
    Files { dir: PathBuf },
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Hash-provider width; ignored when both tables are given.
    pub dim: usize,
    pub seed: u64,
    /// Precomputed step table, one row per global step id.
    pub steps_table: Option<PathBuf>,
    /// Precomputed narration table keyed `video#i`.
    pub narrations_table: Option<PathBuf>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            seed: 0,
            steps_table: None,
            narrations_table: None,
        }
    }
}

/// Label source name: `full`, `task_restricted`, `task_id` or `kmeans`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Full,
    TaskRestricted,
    TaskId,
    Kmeans,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Full => "full",
            ModeName::TaskRestricted => "task_restricted",
            ModeName::TaskId => "task_id",
            ModeName::Kmeans => "kmeans",
        }
    }
}

impl FromStr for ModeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(ModeName::Full),
            "task_restricted" => Ok(ModeName::TaskRestricted),
            "task_id" => Ok(ModeName::TaskId),
            "kmeans" | "asr_kmeans" => Ok(ModeName::Kmeans),
            _ => Err(Error::Config(format!(
                "unknown supervision mode {s:?}; expected full, task_restricted, task_id or kmeans"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    pub k: usize,
    pub mode: ModeName,
    /// k-means cluster count; defaults to the number of KB steps.
    pub clusters: Option<usize>,
    pub kmeans_iters: usize,
    /// Extra modes run through the same pipeline for a comparison table.
    pub compare: Vec<ModeName>,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            k: 3,
            mode: ModeName::Full,
            clusters: None,
            kmeans_iters: 50,
            compare: Vec::new(),
        }
    }
}

impl AssignConfig {
    pub fn supervision(&self, mode: ModeName, num_steps: usize, seed: u64) -> SupervisionMode {
        match mode {
            ModeName::Full => SupervisionMode::Full,
            ModeName::TaskRestricted => SupervisionMode::TaskRestricted,
            ModeName::TaskId => SupervisionMode::TaskId,
            ModeName::Kmeans => SupervisionMode::AsrKmeans {
                clusters: self.clusters.unwrap_or(num_steps),
                iters: self.kmeans_iters,
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub trunk: Trunk,
    /// Width of `f(x)`; defaults to the language embedding width so KB
    /// vectors and features share a space.
    pub embed_dim: Option<usize>,
    /// `ce`, `klK`, `nce` or `nce:M`.
    pub objective: String,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepDecay,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            trunk: Trunk::Linear,
            embed_dim: None,
            objective: "kl3".into(),
            optimizer: OptimizerConfig::sgd(0.01).with_weight_decay(1e-4),
            epochs: 30,
            batch_size: 32,
            schedule: StepDecay::default(),
        }
    }
}

impl SegmentConfig {
    pub fn objective(&self) -> Result<Objective> {
        self.objective.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongtermConfig {
    /// `small` or `paper`; an input projection adapts to the feature width.
    pub preset: String,
    pub mode: InputMode,
    pub window: usize,
    pub clips: usize,
    pub forecast: bool,
    pub forecast_history: usize,
    pub forecast_mode: InputMode,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepDecay,
}

impl Default for LongtermConfig {
    fn default() -> Self {
        Self {
            preset: "small".into(),
            mode: InputMode::Basic,
            window: crate::longterm::DEFAULT_WINDOW,
            clips: 4,
            forecast: true,
            forecast_history: crate::longterm::DEFAULT_WINDOW,
            forecast_mode: InputMode::Basic,
            optimizer: OptimizerConfig::adamw(1e-3),
            epochs: 40,
            batch_size: 16,
            schedule: StepDecay::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for every trained stage; the synthetic source has its own.
    pub seed: u64,
    pub source: SourceConfig,
    pub embed: EmbedConfig,
    pub assign: AssignConfig,
    pub segment: SegmentConfig,
    pub longterm: LongtermConfig,
    pub probe: ProbeConfig,
    /// Falls back to `STEPWELD_CACHE_DIR`; no caching when both are unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: SourceConfig::default(),
            embed: EmbedConfig::default(),
            assign: AssignConfig::default(),
            segment: SegmentConfig::default(),
            longterm: LongtermConfig::default(),
            probe: ProbeConfig {
                shots: Some(4),
                ..ProbeConfig::default()
            },
            cache_dir: None,
        }
    }
}

fn to_value(config: &PipelineConfig) -> Result<toml::Value> {
    toml::Value::try_from(config).map_err(|e| Error::Config(e.to_string()))
}

fn from_value(v: toml::Value) -> Result<PipelineConfig> {
    v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// is replaced. A changed source `kind` replaces the whole source table.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            let kind_changed = matches!((b.get("kind"), t.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl PipelineConfig {
    /// Settings for the downstream transformer stages.
    pub fn downstream(&self) -> DownstreamConfig {
        let lt = &self.longterm;
        DownstreamConfig {
            preset: lt.preset.clone(),
            window: lt.window,
            clips: lt.clips,
            history: lt.forecast_history,
            train: LongtermTrainConfig {
                optimizer: lt.optimizer,
                epochs: lt.epochs,
                batch_size: lt.batch_size,
                seed: self.seed,
                schedule: lt.schedule.clone(),
                parallel: true,
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::layered(Some(text), &[])
    }

    /// Defaults, then the TOML document, then each `a.b.c=value` override.
    pub fn layered(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = to_value(&Self::default())?;
        if let Some(text) = text {
            let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(file));
        }
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let mut patch = parse_override_value(raw.trim());
            for key in path.trim().rsplit('.') {
                if key.is_empty() {
                    return Err(Error::Config(format!("override {o:?} has an empty key")));
                }
                let mut t = toml::Table::new();
                t.insert(key.to_string(), patch);
                patch = toml::Value::Table(t);
            }
            merge(&mut value, patch);
        }
        let config = from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::layered(Some(&text), overrides)?;
        // Relative data paths resolve against the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let SourceConfig::Files { dir } = &mut config.source {
            resolve(dir);
        }
        config.embed.steps_table.as_mut().map(resolve);
        config.embed.narrations_table.as_mut().map(resolve);
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let SourceConfig::Synthetic(s) = &self.source {
            s.validate()?;
        }
        if self.embed.dim == 0 {
            return Err(Error::Config("embed.dim must be >= 1".into()));
        }
        if self.embed.steps_table.is_some() != self.embed.narrations_table.is_some() {
            return Err(Error::Config(
                "embed.steps_table and embed.narrations_table must be given together".into(),
            ));
        }
        if self.assign.k == 0 {
            return Err(Error::Config("assign.k must be >= 1".into()));
        }
        self.segment.objective()?;
        self.segment.optimizer.validate()?;
        self.longterm.optimizer.validate()?;
        self.probe.optimizer.validate()?;
        if self.segment.embed_dim == Some(0) {
            return Err(Error::Config("segment.embed_dim must be >= 1".into()));
        }
        for (name, v) in [
            ("segment.batch_size", self.segment.batch_size),
            ("longterm.batch_size", self.longterm.batch_size),
            ("longterm.window", self.longterm.window),
            ("longterm.clips", self.longterm.clips),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        crate::longterm::TransformerSpec::preset(&self.longterm.preset, 1)?;
        Ok(())
    }

    /// Modes to run: the primary one first, then comparisons without
    /// repeats.
    pub fn modes(&self) -> Vec<ModeName> {
        let mut out = vec![self.assign.mode];
        for &m in &self.assign.compare {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    pub fn resolved_cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os("STEPWELD_CACHE_DIR").map(PathBuf::from))
            .filter(|p| !p.as_os_str().is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn layers_apply_in_order() {
        let file = r#"
            seed = 4
            [assign]
            mode = "task_id"
            compare = ["full", "kmeans"]
            [source]
            kind = "synthetic"
            tasks = 3
        "#;
        let c = PipelineConfig::layered(
            Some(file),
            &["seed=9".into(), "source.noise=0.5".into(), "segment.objective=ce".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.assign.mode, ModeName::TaskId);
        assert_eq!(c.modes(), vec![ModeName::TaskId, ModeName::Full, ModeName::Kmeans]);
        let SourceConfig::Synthetic(s) = &c.source else { panic!() };
        assert_eq!((s.tasks, s.noise, s.videos_per_task), (3, 0.5, 60));
        assert_eq!(c.segment.objective().unwrap(), Objective::StepCe);
    }

    #[test]
    fn switching_source_kind_drops_synthetic_fields() {
        let c = PipelineConfig::from_toml_str("[source]\nkind = \"files\"\ndir = \"data\"").unwrap();
        assert_eq!(c.source, SourceConfig::Files { dir: "data".into() });
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "sed = 1",
            "[assign]\nmode = \"psychic\"",
            "[segment]\nobjective = \"kl0\"",
            "[source]\nkind = \"synthetic\"\ndrop_prob = 2.0",
            "[longterm]\npreset = \"huge\"",
            "[source]\nkind = \"synthetic\"\ntypo = 1",
        ] {
            assert!(PipelineConfig::from_toml_str(text).is_err(), "{text}");
        }
        assert!(PipelineConfig::layered(None, &["seed".into()]).is_err());
    }
}
