//! Run configuration: typed sections with defaults, flat dotted-key JSON
//! files, `key=value` overrides and path-only environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{SplitManifest, SplitSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::DEFAULT_FIX_KEYWORDS;
use crate::predict::FinetuneSettings;
use crate::pretrain::PretrainSettings;

/// Encoder dimensions; the vocabulary size is taken from the built
/// vocabulary and the initialization seed from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self::from_config(&EncoderConfig::default())
    }
}

impl EncoderSection {
    fn from_config(c: &EncoderConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            hidden_dim: c.hidden_dim,
            ff_dim: c.ff_dim,
            max_len: c.max_len,
            dropout: c.dropout,
            init_std: c.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    /// Maximum vocabulary size including the special tokens.
    pub vocab_cap: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_cap: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub fix_keywords: Vec<String>,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            fix_keywords: DEFAULT_FIX_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// train / valid / test fractions, used when no split manifest is given.
    pub split_ratios: [f64; 3],
    /// Reject malformed corpus lines instead of skipping them.
    pub strict: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            split_ratios: [0.8, 0.1, 0.1],
            strict: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    /// JSON object mapping commit id to expert features; overrides any
    /// features embedded in the corpus.
    pub features: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub tokenizer: TokenizerSection,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    pub features: FeatureSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            encoder: EncoderSection::default(),
            tokenizer: TokenizerSection::default(),
            pretrain: PretrainSettings::default(),
            finetune: FinetuneSettings::default(),
            features: FeatureSection::default(),
            data: DataSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small dimensions that train in minutes on one CPU.
    Desk,
    /// Published hyperparameters; recorded for provenance, far too large for
    /// a laptop.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(vec![format!("unknown preset {other:?} (expected desk or paper)")])),
        }
    }
}

/// Environment variables that may override path settings.
pub const PATH_ENV_VARS: [(&str, &str); 4] = [
    ("BIMODAL_JIT_CORPUS", "paths.corpus"),
    ("BIMODAL_JIT_FEATURES", "paths.features"),
    ("BIMODAL_JIT_SPLITS", "paths.splits"),
    ("BIMODAL_JIT_OUTPUT_DIR", "paths.output_dir"),
];

impl RunConfig {
    pub const FILE_NAME: &'static str = "config.json";

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::default(),
            Preset::Paper => {
                let mut c = Self {
                    encoder: EncoderSection::from_config(&EncoderConfig::paper_scale()),
                    ..Self::default()
                };
                c.tokenizer.vocab_cap = 50_267;
                c.pretrain.epochs = 100;
                c.pretrain.batch_size = 16;
                c.pretrain.grad_accumulation = 32;
                c.pretrain.peak_lr = 5e-4;
                c.finetune.batch_size = 16;
                c.finetune.peak_lr = 1e-5;
                c
            }
        }
    }

    /// Full encoder configuration for a vocabulary of `vocab_size` entries.
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            num_layers: e.num_layers,
            num_heads: e.num_heads,
            hidden_dim: e.hidden_dim,
            ff_dim: e.ff_dim,
            max_len: e.max_len,
            vocab_size,
            dropout: e.dropout,
            init_std: e.init_std,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(match &self.paths.splits {
            Some(p) => SplitSpec::Manifest(SplitManifest::load(p)?),
            None => SplitSpec::Ratio(self.data.split_ratios),
        })
    }

    /// Flattened `dotted.key -> value` view of the configuration.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies flat (or nested) overrides, reporting every unknown key and
    /// every ill-typed value together.
    pub fn apply(&self, overrides: &Map<String, Value>) -> Result<Self> {
        let mut incoming = BTreeMap::new();
        flatten("", &Value::Object(overrides.clone()), &mut incoming);
        let mut flat = self.to_flat();
        let mut problems: Vec<String> = incoming
            .keys()
            .filter(|k| !flat.contains_key(*k))
            .map(|k| format!("unknown key {k}"))
            .collect();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        flat.extend(incoming.clone());
        // check each changed key in isolation so all type errors are reported
        for (key, value) in &incoming {
            let mut single = self.to_flat();
            single.insert(key.clone(), value.clone());
            if let Err(e) = serde_json::from_value::<Self>(unflatten(&single)) {
                problems.push(format!("bad value for {key}: {e}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let config: Self = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    /// Parses `key=value` pairs; values are JSON when they parse as JSON and
    /// strings otherwise.
    pub fn apply_assignments<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut map = Map::new();
        let mut problems = Vec::new();
        for a in assignments {
            match a.as_ref().split_once('=') {
                Some((k, v)) => {
                    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
                    map.insert(k.trim().to_string(), value);
                }
                None => problems.push(format!("override {:?} is not key=value", a.as_ref())),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        self.apply(&map)
    }

    /// Applies path overrides from the process environment.
    pub fn apply_env(&self) -> Result<Self> {
        self.apply_env_from(|k| std::env::var(k).ok())
    }

    pub fn apply_env_from(&self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut map = Map::new();
        for (var, key) in PATH_ENV_VARS {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                map.insert(key.to_string(), Value::String(v));
            }
        }
        self.apply(&map)
    }

    /// Loads a config file on top of `self`.
    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<Value>(&text)? {
            Value::Object(map) => self.apply(&map),
            _ => Err(Error::Config(vec![format!("{} must hold a JSON object", path.display())])),
        }
    }

    /// Writes the resolved configuration as flat dotted-key JSON.
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_json(dir.join(Self::FILE_NAME), &self.to_flat())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        Self::default().merge_file(&file)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let check = |r: Result<()>, problems: &mut Vec<String>| match r {
            Err(Error::Config(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
            Ok(()) => {}
        };
        check(self.encoder_config(self.tokenizer.vocab_cap).validate(), &mut problems);
        check(self.pretrain.validate(), &mut problems);
        check(self.finetune.validate(), &mut problems);
        if self.tokenizer.vocab_cap <= crate::tokenize::NUM_SPECIALS as usize {
            problems.push("tokenizer.vocab_cap must exceed the number of special tokens".into());
        }
        let total: f64 = self.data.split_ratios.iter().sum();
        if self.data.split_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (total - 1.0).abs() > 1e-9 {
            problems.push("data.split_ratios must be three fractions summing to 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted prefixes are objects");
            }
        }
    }
    Value::Object(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip_through_flat_json() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::default().apply_assignments(&["seed=7", "pretrain.order=mlm-then-rmi"]).unwrap();
        c.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(RunConfig::FILE_NAME)).unwrap();
        assert!(text.contains("\"pretrain.mlm_weight\""));
        assert_eq!(RunConfig::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::default()
            .apply(json!({"encoder.hidden": 3, "pretrain.ratio": 2, "seed": 1}).as_object().unwrap())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("encoder.hidden") && msg.contains("pretrain.ratio"), "{msg}");
    }

    #[test]
    fn nested_and_flat_inputs_agree() {
        let base = RunConfig::default();
        let a = base.apply(json!({"finetune": {"peak_lr": 0.001}}).as_object().unwrap()).unwrap();
        let b = base.apply(json!({"finetune.peak_lr": 0.001}).as_object().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.finetune.peak_lr, 0.001);
    }

    #[test]
    fn bad_values_are_reported_per_key() {
        let err = RunConfig::default()
            .apply_assignments(&["seed=minus", "finetune.epochs=-3"])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("seed") && msg.contains("finetune.epochs"), "{msg}");
        let err = RunConfig::default().apply_assignments(&["finetune.threshold=2"]).unwrap_err();
        assert!(err.to_string().contains("finetune.threshold"));
    }

    #[test]
    fn env_overrides_only_paths() {
        let c = RunConfig::default()
            .apply_env_from(|k| (k == "BIMODAL_JIT_OUTPUT_DIR").then(|| "/tmp/out".to_string()))
            .unwrap();
        assert_eq!(c.paths.output_dir, Some(PathBuf::from("/tmp/out")));
        assert_eq!(c.seed, RunConfig::default().seed);
    }

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!(c.pretrain.batch_size, 16);
        assert_eq!(c.pretrain.grad_accumulation, 32);
        assert_eq!(c.pretrain.epochs, 100);
        assert_eq!(c.pretrain.peak_lr, 5e-4);
        assert_eq!(c.finetune.peak_lr, 1e-5);
        assert_eq!(c.encoder.max_len, 512);
        c.validate().unwrap();
    }
}
