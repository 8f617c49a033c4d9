//! Change-level expert metrics: the 14-feature vector, its building blocks,
//! and train-fitted standardization.

mod miner;

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use miner::{mine_repository, MinedCommit, MinerOptions};

pub const NUM_FEATURES: usize = 14;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "NS", "ND", "NF", "Entropy", "LA", "LD", "LT", "FIX", "NDEV", "AGE", "NUC", "EXP", "REXP",
    "SEXP",
];

pub const DEFAULT_FIX_KEYWORDS: [&str; 7] = ["bug", "fix", "fixes", "fixed", "defect", "patch", "fault"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertFeatureVector {
    #[serde(rename = "NS")]
    pub ns: f64,
    #[serde(rename = "ND")]
    pub nd: f64,
    #[serde(rename = "NF")]
    pub nf: f64,
    #[serde(rename = "Entropy")]
    pub entropy: f64,
    #[serde(rename = "LA")]
    pub la: f64,
    #[serde(rename = "LD")]
    pub ld: f64,
    #[serde(rename = "LT")]
    pub lt: f64,
    #[serde(rename = "FIX")]
    pub fix: f64,
    #[serde(rename = "NDEV")]
    pub ndev: f64,
    #[serde(rename = "AGE")]
    pub age: f64,
    #[serde(rename = "NUC")]
    pub nuc: f64,
    #[serde(rename = "EXP")]
    pub exp: f64,
    #[serde(rename = "REXP")]
    pub rexp: f64,
    #[serde(rename = "SEXP")]
    pub sexp: f64,
}

impl ExpertFeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.ns,
            self.nd,
            self.nf,
            self.entropy,
            self.la,
            self.ld,
            self.lt,
            self.fix,
            self.ndev,
            self.age,
            self.nuc,
            self.exp,
            self.rexp,
            self.sexp,
        ]
    }

    pub fn from_array(v: [f64; NUM_FEATURES]) -> Self {
        let [ns, nd, nf, entropy, la, ld, lt, fix, ndev, age, nuc, exp, rexp, sexp] = v;
        Self {
            ns,
            nd,
            nf,
            entropy,
            la,
            ld,
            lt,
            fix,
            ndev,
            age,
            nuc,
            exp,
            rexp,
            sexp,
        }
    }
}

/// Normalized Shannon entropy of the modified-line distribution over files.
///
/// Files with a zero count are ignored; a single contributing file gives 0.
pub fn compute_entropy(modified_line_counts: &[u64]) -> Result<f64> {
    let nonzero: Vec<f64> = modified_line_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64)
        .collect();
    if nonzero.is_empty() {
        return Err(Error::invalid("entropy needs at least one nonzero count"));
    }
    if nonzero.len() == 1 {
        return Ok(0.0);
    }
    let total: f64 = nonzero.iter().sum();
    let h: f64 = nonzero
        .iter()
        .map(|c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum();
    Ok((h / (nonzero.len() as f64).log2()).clamp(0.0, 1.0))
}

/// Whole-word, case-insensitive keyword predicate for defect-fixing messages.
#[derive(Debug, Clone)]
pub struct FixDetector {
    pattern: Option<Regex>,
}

impl FixDetector {
    pub fn new<S: AsRef<str>>(keywords: &[S]) -> Self {
        let alternatives: Vec<String> = keywords
            .iter()
            .map(|k| k.as_ref().trim().to_lowercase())
            .filter(|k| !k.is_empty())
            .map(|k| regex::escape(&k))
            .collect();
        let pattern = (!alternatives.is_empty())
            .then(|| Regex::new(&format!(r"\b(?:{})\b", alternatives.join("|"))).unwrap());
        Self { pattern }
    }

    pub fn is_fix(&self, message: &str) -> bool {
        self.pattern
            .as_ref()
            .is_some_and(|re| re.is_match(&message.to_lowercase()))
    }
}

impl Default for FixDetector {
    fn default() -> Self {
        Self::new(&DEFAULT_FIX_KEYWORDS)
    }
}

/// [`FixDetector`] with the default keyword list.
pub fn detect_fix(message: &str) -> bool {
    static DEFAULT: OnceLock<FixDetector> = OnceLock::new();
    DEFAULT.get_or_init(FixDetector::default).is_fix(message)
}

/// Per-feature mean and population standard deviation, fitted on training
/// data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizerStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
    pub epsilon: f64,
}

impl StandardizerStats {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn fit(rows: &[ExpertFeatureVector]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot fit standardizer on zero rows"));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.to_array()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; NUM_FEATURES];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.to_array()).zip(mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.map(|v| (v / n).sqrt());
        Ok(Self {
            mean,
            std,
            epsilon: Self::DEFAULT_EPSILON,
        })
    }

    /// `(x - mean) / std` per feature; features that were constant in training
    /// (std below epsilon) map to 0.
    pub fn standardize(&self, v: &ExpertFeatureVector) -> [f64; NUM_FEATURES] {
        let mut out = v.to_array();
        for (i, x) in out.iter_mut().enumerate() {
            *x = if self.std[i] <= self.epsilon {
                0.0
            } else {
                (*x - self.mean[i]) / self.std[i]
            };
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Free-function form of [`StandardizerStats::standardize`].
pub fn standardize(v: &ExpertFeatureVector, stats: &StandardizerStats) -> [f64; NUM_FEATURES] {
    stats.standardize(v)
}

/// Commit id to raw feature vector, as written by feature extraction.
pub type FeatureMap = std::collections::BTreeMap<String, ExpertFeatureVector>;

pub fn save_feature_map(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    crate::io::write_json(path, map)
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    crate::io::read_json(path)
}

/// Sets `expert_features` on every commit found in `map`, replacing any
/// embedded vector. Commits absent from the map keep what they had.
pub fn attach_features(commits: &mut [crate::corpus::CodeCommit], map: &FeatureMap) {
    for c in commits {
        if let Some(f) = map.get(&c.commit_id) {
            c.expert_features = Some(*f);
        }
    }
}
