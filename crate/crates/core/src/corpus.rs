//! Commit records, JSONL loading and dataset splitting.
//!
//! Label convention used across the crate: `1` = defect-inducing, `0` = clean.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features::ExpertFeatureVector;

/// Field names every record must carry, in the order they are checked.
pub const REQUIRED_FIELDS: [&str; 8] = [
    "commit_id",
    "project",
    "timestamp",
    "author",
    "message",
    "added_lines",
    "deleted_lines",
    "label",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCommit {
    pub commit_id: String,
    pub project: String,
    pub timestamp: i64,
    pub author: String,
    pub message: String,
    pub added_lines: Vec<String>,
    pub deleted_lines: Vec<String>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_features: Option<ExpertFeatureVector>,
}

impl CodeCommit {
    pub fn is_defective(&self) -> bool {
        self.label == 1
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if self.message.is_empty() && self.added_lines.is_empty() && self.deleted_lines.is_empty()
        {
            return Err("record has empty message and empty diff".into());
        }
        Ok(())
    }
}

/// Result of [`load_commits`]: the accepted records plus the lines skipped in
/// lenient mode.
#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub commits: Vec<CodeCommit>,
    pub skipped: Vec<(usize, String)>,
}

fn parse_record(text: &str) -> std::result::Result<CodeCommit, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| "record is not a JSON object".to_string())?;
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(format!("missing field {field}"));
        }
    }
    match obj["label"].as_i64() {
        Some(0) | Some(1) => {}
        _ => return Err(format!("label must be 0 or 1, got {}", obj["label"])),
    }
    let commit: CodeCommit = serde_json::from_value(value).map_err(|e| e.to_string())?;
    commit.validate()?;
    Ok(commit)
}

/// Reads a JSONL commit file. Blank lines are ignored. In strict mode the
/// first malformed line aborts; otherwise it is recorded in
/// [`LoadedCorpus::skipped`].
pub fn load_commits(path: impl AsRef<Path>, strict: bool) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedCorpus::default();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_record(&line).and_then(|c| {
            if seen.contains(&c.commit_id) {
                Err(format!("duplicate commit_id {}", c.commit_id))
            } else {
                Ok(c)
            }
        });
        match parsed {
            Ok(commit) => {
                seen.insert(commit.commit_id.clone());
                out.commits.push(commit);
            }
            Err(message) if strict => {
                return Err(Error::Record {
                    line: line_no,
                    message,
                })
            }
            Err(message) => {
                log::warn!("{}: skipping line {line_no}: {message}", path.display());
                out.skipped.push((line_no, message));
            }
        }
    }
    Ok(out)
}

pub fn write_commits(path: impl AsRef<Path>, commits: &[CodeCommit]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for c in commits {
        serde_json::to_writer(&mut buf, c)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitProvenance {
    Manifest,
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub provenance: SplitProvenance,
}

/// On-disk manifest layout: `{"train": [...], "valid": [...], "test": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub enum SplitSpec {
    Ratio([f64; 3]),
    Manifest(SplitManifest),
}

/// Splits a corpus either by seeded shuffle-then-slice or by an explicit
/// manifest.
pub fn split_dataset(commits: &[CodeCommit], spec: &SplitSpec, seed: u64) -> Result<DatasetSplit> {
    match spec {
        SplitSpec::Ratio(ratios) => {
            if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::Split(format!("ratios out of range: {ratios:?}")));
            }
            let total: f64 = ratios.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Split(format!("ratios sum to {total}, expected 1")));
            }
            let n = commits.len();
            let mut ids: Vec<String> = commits.iter().map(|c| c.commit_id.clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            let n_train = ((n as f64) * ratios[0]).round() as usize;
            let n_train = n_train.min(n);
            let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
            let test = ids.split_off(n_train + n_valid);
            let valid = ids.split_off(n_train);
            Ok(DatasetSplit {
                train: ids,
                valid,
                test,
                seed,
                provenance: SplitProvenance::Ratio,
            })
        }
        SplitSpec::Manifest(m) => {
            let known: HashSet<&str> = commits.iter().map(|c| c.commit_id.as_str()).collect();
            let missing: Vec<String> = m
                .train
                .iter()
                .chain(&m.valid)
                .chain(&m.test)
                .filter(|id| !known.contains(id.as_str()))
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingIds(missing));
            }
            let mut owner: HashMap<&str, &str> = HashMap::new();
            for (name, ids) in [("train", &m.train), ("valid", &m.valid), ("test", &m.test)] {
                for id in ids {
                    if let Some(prev) = owner.insert(id, name) {
                        return Err(Error::Split(format!(
                            "commit {id} assigned to both {prev} and {name}"
                        )));
                    }
                }
            }
            Ok(DatasetSplit {
                train: m.train.clone(),
                valid: m.valid.clone(),
                test: m.test.clone(),
                seed,
                provenance: SplitProvenance::Manifest,
            })
        }
    }
}

impl DatasetSplit {
    /// Resolves the id lists against `commits`, returning (train, valid, test).
    pub fn materialize(
        &self,
        commits: &[CodeCommit],
    ) -> (Vec<CodeCommit>, Vec<CodeCommit>, Vec<CodeCommit>) {
        let index: HashMap<&str, &CodeCommit> =
            commits.iter().map(|c| (c.commit_id.as_str(), c)).collect();
        let pick = |ids: &[String]| -> Vec<CodeCommit> {
            ids.iter()
                .filter_map(|id| index.get(id.as_str()).map(|c| (*c).clone()))
                .collect()
        };
        (pick(&self.train), pick(&self.valid), pick(&self.test))
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            train: self.train.clone(),
            valid: self.valid.clone(),
            test: self.test.clone(),
        }
    }
}
