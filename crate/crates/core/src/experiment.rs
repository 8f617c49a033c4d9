//! End-to-end pipeline (split, vocabulary, pre-training, fine-tuning,
//! evaluation) and the ablation grids built on top of it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{split_dataset, CodeCommit, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::io::{write_json, write_jsonl};
use crate::par;
use crate::predict::{run_finetune, EpochLog, FinetuneInputs, FinetuneStepLog, ModelBundle};
use crate::pretrain::{run_pretraining, OrderMode, StepLog};
use crate::tokenize::{build_vocabulary, RuleTokenizer, Vocabulary};

pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.jsonl";
pub const FINETUNE_LOG_FILE: &str = "finetune_log.jsonl";
pub const EPOCH_LOG_FILE: &str = "finetune_epochs.jsonl";

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub pretrain_log: Vec<StepLog>,
    pub finetune_log: Vec<FinetuneStepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub bundle: ModelBundle,
    pub report: EvalReport,
    /// `(commit_id, p_defective)` over the test split.
    pub scores: Vec<(String, f64)>,
}

/// Whether the configuration calls for a pre-training phase.
pub fn pretraining_active(config: &RunConfig) -> bool {
    config.pretrain.enabled && config.finetune.use_semantic && config.finetune.use_pretrained
}

/// Runs the whole pipeline on `commits`. When `out_dir` is given, every
/// artifact is written there next to the resolved configuration.
pub fn run_pipeline(config: &RunConfig, commits: &[CodeCommit], out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    config.validate()?;
    if let Some(dir) = out_dir {
        config.save(dir)?;
    }
    let split = split_dataset(commits, &config.split_spec()?, config.seed)?;
    let (train, valid, test) = split.materialize(commits);
    let vocab = build_vocabulary(&train, config.tokenizer.vocab_cap, &RuleTokenizer)?;
    let encoder_config = config.encoder_config(vocab.len());

    let pretrained = if pretraining_active(config) {
        log::info!("pre-training on {} commits", train.len());
        let ckpt_dir = out_dir.map(|d| d.join("pretrain"));
        Some(run_pretraining(
            &encoder_config,
            &config.pretrain,
            config.seed,
            &train,
            &vocab,
            ckpt_dir.as_deref(),
            None,
        )?)
    } else {
        None
    };

    let run_config = serde_json::to_value(config.to_flat())?;
    let finetuned = run_finetune(
        FinetuneInputs {
            train: &train,
            valid: &valid,
            vocab: &vocab,
            encoder_config: &encoder_config,
            pretrained: pretrained.as_ref().map(|p| &p.model.encoder),
            run_config,
            seed: config.seed,
        },
        &config.finetune,
        out_dir,
    )?;
    let (report, raw_scores) = evaluate_model(&finetuned.bundle, &test, config.finetune.threshold)?;
    let scores: Vec<(String, f64)> = test.iter().map(|c| c.commit_id.clone()).zip(raw_scores).collect();

    let outcome = PipelineOutcome {
        split,
        vocab,
        pretrain_log: pretrained.map(|p| p.log).unwrap_or_default(),
        finetune_log: finetuned.steps,
        epochs: finetuned.epochs,
        best_epoch: finetuned.best_epoch,
        bundle: finetuned.bundle,
        report,
        scores,
    };
    if let Some(dir) = out_dir {
        write_artifacts(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_artifacts(dir: &Path, o: &PipelineOutcome) -> Result<()> {
    write_json(dir.join(SPLIT_FILE), &o.split)?;
    o.vocab.save(dir.join(VOCAB_FILE))?;
    write_jsonl(dir.join(PRETRAIN_LOG_FILE), &o.pretrain_log)?;
    write_jsonl(dir.join(FINETUNE_LOG_FILE), &o.finetune_log)?;
    write_jsonl(dir.join(EPOCH_LOG_FILE), &o.epochs)?;
    o.bundle.save(dir)?;
    write_json(dir.join(REPORT_FILE), &o.report)?;
    write_scores_csv(&dir.join(SCORES_FILE), &o.scores)
}

/// Writes `commit_id,p_defective` rows for external plotting.
pub fn write_scores_csv(path: &Path, scores: &[(String, f64)]) -> Result<()> {
    let mut text = String::from("commit_id,p_defective\n");
    for (id, p) in scores {
        let _ = writeln!(text, "{id},{p}");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    /// Both objectives, MLM only, RMI only, no pre-training.
    Objectives,
    /// Alternating, MLM then RMI, RMI then MLM.
    Orders,
    /// MLM:RMI sampling ratios 1:1, 2:1, 3:1.
    Ratios,
    /// Fused, semantic branch only, expert branch only.
    Branches,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "objectives" => Ok(Self::Objectives),
            "orders" => Ok(Self::Orders),
            "ratios" => Ok(Self::Ratios),
            "branches" => Ok(Self::Branches),
            other => Err(Error::Config(vec![format!(
                "unknown grid {other:?} (expected objectives, orders, ratios or branches)"
            )])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    /// `key=value` overrides applied to the base configuration.
    pub overrides: Vec<String>,
}

fn cell(name: &str, overrides: &[&str]) -> GridCell {
    GridCell {
        name: name.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

impl Grid {
    pub fn cells(self) -> Vec<GridCell> {
        let order = |o: OrderMode| format!("pretrain.order={}", serde_json::to_string(&o).expect("order serializes"));
        match self {
            Grid::Objectives => vec![
                cell("both", &["pretrain.enabled=true", "pretrain.mlm_weight=2", "pretrain.rmi_weight=1"]),
                cell("mlm-only", &["pretrain.enabled=true", "pretrain.mlm_weight=1", "pretrain.rmi_weight=0"]),
                cell("rmi-only", &["pretrain.enabled=true", "pretrain.mlm_weight=0", "pretrain.rmi_weight=1"]),
                cell("none", &["pretrain.enabled=false"]),
            ],
            Grid::Orders => [
                ("alternating", OrderMode::Alternating),
                ("mlm-then-rmi", OrderMode::MlmThenRmi),
                ("rmi-then-mlm", OrderMode::RmiThenMlm),
            ]
            .into_iter()
            .map(|(name, o)| GridCell {
                name: name.to_string(),
                overrides: vec!["pretrain.enabled=true".into(), order(o)],
            })
            .collect(),
            Grid::Ratios => [(1, 1), (2, 1), (3, 1)]
                .into_iter()
                .map(|(m, r)| GridCell {
                    name: format!("ratio-{m}-{r}"),
                    overrides: vec![
                        "pretrain.enabled=true".into(),
                        order(OrderMode::Alternating),
                        format!("pretrain.mlm_weight={m}"),
                        format!("pretrain.rmi_weight={r}"),
                    ],
                })
                .collect(),
            Grid::Branches => vec![
                cell("fused", &["finetune.use_semantic=true", "finetune.use_expert=true"]),
                cell("semantic-only", &["finetune.use_semantic=true", "finetune.use_expert=false"]),
                cell("expert-only", &["finetune.use_semantic=false", "finetune.use_expert=true"]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub output_dir: Option<PathBuf>,
    pub report: EvalReport,
}

/// Runs every cell of `grid`, each in its own subdirectory of `out_dir`,
/// and writes `summary.json` plus a markdown table.
pub fn run_ablation(base: &RunConfig, grid: Grid, commits: &[CodeCommit], out_dir: Option<&Path>) -> Result<Vec<CellResult>> {
    let cells = grid.cells();
    let configs: Vec<RunConfig> = cells
        .iter()
        .map(|c| base.apply_assignments(&c.overrides))
        .collect::<Result<_>>()?;
    let jobs: Vec<(GridCell, RunConfig)> = cells.into_iter().zip(configs).collect();
    let results = par::map(&jobs, |(cell, config)| -> Result<CellResult> {
        let dir = out_dir.map(|d| d.join(&cell.name));
        let mut config = config.clone();
        if dir.is_some() {
            config.paths.output_dir.clone_from(&dir);
        }
        let outcome = run_pipeline(&config, commits, dir.as_deref())?;
        Ok(CellResult {
            cell: cell.clone(),
            output_dir: dir,
            report: outcome.report,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        write_json(dir.join("summary.json"), &results)?;
        let path = dir.join("summary.md");
        std::fs::write(&path, summary_table(&results)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(results)
}

pub fn summary_table(results: &[CellResult]) -> String {
    let mut out = String::from("| cell | F1 | AUC | precision | recall |\n|---|---|---|---|---|\n");
    for r in results {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.cell.name, r.report.f1, r.report.auc, r.report.precision, r.report.recall
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_expected_cells() {
        assert_eq!(Grid::Objectives.cells().len(), 4);
        assert_eq!(Grid::Orders.cells().len(), 3);
        let ratios = Grid::Ratios.cells();
        assert_eq!(ratios.len(), 3);
        let base = RunConfig::default();
        let weights: Vec<(u32, u32)> = ratios
            .iter()
            .map(|c| {
                let cfg = base.apply_assignments(&c.overrides).unwrap();
                (cfg.pretrain.mlm_weight, cfg.pretrain.rmi_weight)
            })
            .collect();
        assert_eq!(weights, vec![(1, 1), (2, 1), (3, 1)]);
        for grid in [Grid::Objectives, Grid::Orders, Grid::Branches] {
            for c in grid.cells() {
                base.apply_assignments(&c.overrides).unwrap();
            }
        }
    }

    #[test]
    fn summary_table_lists_cells() {
        let report = EvalReport {
            f1: 0.5,
            precision: 0.5,
            recall: 0.5,
            auc: 0.75,
            threshold: 0.5,
            confusion: Default::default(),
            n_examples: 4,
            model_id: "m".into(),
        };
        let table = summary_table(&[CellResult {
            cell: cell("both", &[]),
            output_dir: None,
            report,
        }]);
        assert!(table.contains("| both | 0.5000 | 0.7500 |"));
    }
}
