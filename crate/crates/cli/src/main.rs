use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bimodal_jit::config::{Preset, RunConfig};
use bimodal_jit::corpus::{load_commits, split_dataset, CodeCommit};
use bimodal_jit::eval::evaluate_model;
use bimodal_jit::experiment::{self, run_ablation, run_pipeline, summary_table, write_scores_csv, Grid};
use bimodal_jit::features::{attach_features, load_feature_map, mine_repository, save_feature_map, FeatureMap, MinerOptions};
use bimodal_jit::io::{write_json, write_jsonl};
use bimodal_jit::predict::{predict_batch, run_finetune, FinetuneInputs, ModelBundle};
use bimodal_jit::pretrain::{run_pretraining, PretrainCheckpoint};
use bimodal_jit::tokenize::{build_vocabulary, RuleTokenizer, Vocabulary};
use bimodal_jit::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bimodal-jit", version, about = "Bi-modal commit representation learning and just-in-time defect prediction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct GlobalArgs {
    /// Base configuration (flat dotted-key JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hyperparameter preset applied before the config file.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Override one setting, e.g. `--set finetune.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct DataArgs {
    /// Commit corpus (JSONL).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Expert features as a JSON object keyed by commit id.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mine the 14 expert features from a git repository.
    ExtractFeatures {
        #[arg(long)]
        repo: PathBuf,
        /// Output JSON file (commit id -> features).
        #[arg(long)]
        out: PathBuf,
        /// Ignore commits after this Unix timestamp.
        #[arg(long)]
        until: Option<i64>,
    },
    /// Build a token vocabulary from a corpus.
    BuildVocab {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoder with MLM and RMI.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Vocabulary file; built from the corpus when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output directory (checkpoint, logs, config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune the defect classifier on the train/valid splits.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        /// Split manifest (train/valid/test commit ids).
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Pre-training output directory to start from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a labelled corpus and report F1 and AUC.
    Evaluate {
        /// Model bundle file or directory.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Decision threshold; defaults to the model's.
        #[arg(long)]
        threshold: Option<f64>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-commit scores as CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Score commits and write `{commit_id, p_defective, label}` JSONL.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: split, vocabulary, pre-train, fine-tune, evaluate.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid of full pipelines.
    Ablate {
        #[arg(long, value_parser = ["objectives", "orders", "ratios", "branches"])]
        grid: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Preset, then config file, then path environment variables, then `--set`,
/// then explicit path flags.
fn resolve_config(global: &GlobalArgs, paths: &[(&str, &Option<PathBuf>)]) -> bimodal_jit::Result<RunConfig> {
    let preset = match &global.preset {
        Some(p) => p.parse()?,
        None => Preset::Desk,
    };
    let mut config = RunConfig::preset(preset);
    if let Some(file) = &global.config {
        config = config.merge_file(file)?;
    }
    config = config.apply_env()?.apply_assignments(&global.overrides)?;
    let flags: Vec<String> = paths
        .iter()
        .filter_map(|(key, value)| value.as_ref().map(|v| format!("{key}={}", v.display())))
        .collect();
    config.apply_assignments(&flags)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> bimodal_jit::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(vec![format!("{what} is required (flag or config)")]))
}

fn load_corpus(config: &RunConfig) -> bimodal_jit::Result<Vec<CodeCommit>> {
    let path = required(&config.paths.corpus, "paths.corpus / --data")?;
    let loaded = load_commits(path, config.data.strict)?;
    if !loaded.skipped.is_empty() {
        log::warn!("skipped {} malformed records in {}", loaded.skipped.len(), path.display());
    }
    let mut commits = loaded.commits;
    if let Some(f) = &config.paths.features {
        let map: FeatureMap = load_feature_map(f)?;
        attach_features(&mut commits, &map);
    }
    Ok(commits)
}

/// Writes the resolved configuration next to a single-file artifact.
fn save_sidecar_config(config: &RunConfig, artifact: &Path) -> bimodal_jit::Result<()> {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    write_json(artifact.with_file_name(name), &config.to_flat())
}

fn run(cli: Cli) -> bimodal_jit::Result<()> {
    let g = &cli.global;
    match cli.command {
        Cmd::ExtractFeatures { repo, out, until } => {
            let config = resolve_config(g, &[])?;
            let mined = mine_repository(
                &repo,
                &MinerOptions {
                    until,
                    fix_keywords: Some(config.features.fix_keywords.clone()),
                },
            )?;
            let map: FeatureMap = mined.into_iter().map(|m| (m.commit_id, m.features)).collect();
            save_feature_map(&out, &map)?;
            save_sidecar_config(&config, &out)?;
            println!("{}", json!({"commits": map.len(), "out": out}));
        }
        Cmd::BuildVocab { data, out } => {
            let config = resolve_config(g, &[("paths.corpus", &data.data), ("paths.features", &data.features)])?;
            let commits = load_corpus(&config)?;
            let vocab = build_vocabulary(&commits, config.tokenizer.vocab_cap, &RuleTokenizer)?;
            vocab.save(&out)?;
            save_sidecar_config(&config, &out)?;
            println!("{}", json!({"vocab_size": vocab.len(), "out": out}));
        }
        Cmd::Pretrain {
            data,
            vocab,
            out,
            resume,
        } => {
            let config = resolve_config(
                g,
                &[
                    ("paths.corpus", &data.data),
                    ("paths.features", &data.features),
                    ("paths.output_dir", &out),
                ],
            )?;
            let out = required(&config.paths.output_dir, "paths.output_dir / --out")?;
            let commits = load_corpus(&config)?;
            let vocab = match vocab {
                Some(p) => Vocabulary::load(p)?,
                None => build_vocabulary(&commits, config.tokenizer.vocab_cap, &RuleTokenizer)?,
            };
            let checkpoint = if resume {
                Some(PretrainCheckpoint::load(out)?)
            } else {
                None
            };
            config.save(out)?;
            vocab.save(out.join(experiment::VOCAB_FILE))?;
            let encoder_config = config.encoder_config(vocab.len());
            let outcome = run_pretraining(
                &encoder_config,
                &config.pretrain,
                config.seed,
                &commits,
                &vocab,
                Some(out),
                checkpoint,
            )?;
            write_jsonl(out.join(experiment::PRETRAIN_LOG_FILE), &outcome.log)?;
            println!("{}", json!({"steps": outcome.log.len(), "final_loss": outcome.log.last().map(|l| l.loss)}));
        }
        Cmd::Finetune {
            data,
            splits,
            pretrained,
            out,
        } => {
            let config = resolve_config(
                g,
                &[
                    ("paths.corpus", &data.data),
                    ("paths.features", &data.features),
                    ("paths.splits", &splits),
                    ("paths.output_dir", &out),
                ],
            )?;
            let out = required(&config.paths.output_dir, "paths.output_dir / --out")?;
            let commits = load_corpus(&config)?;
            let split = split_dataset(&commits, &config.split_spec()?, config.seed)?;
            let (train, valid, _) = split.materialize(&commits);
            let (vocab, encoder) = match &pretrained {
                Some(dir) => {
                    let ckpt = PretrainCheckpoint::load(dir)?;
                    (Vocabulary::load(dir.join(experiment::VOCAB_FILE))?, Some(ckpt.model.encoder))
                }
                None => (build_vocabulary(&train, config.tokenizer.vocab_cap, &RuleTokenizer)?, None),
            };
            let encoder_config = match &encoder {
                Some(e) => e.config.clone(),
                None => config.encoder_config(vocab.len()),
            };
            config.save(out)?;
            write_json(out.join(experiment::SPLIT_FILE), &split)?;
            vocab.save(out.join(experiment::VOCAB_FILE))?;
            let outcome = run_finetune(
                FinetuneInputs {
                    train: &train,
                    valid: &valid,
                    vocab: &vocab,
                    encoder_config: &encoder_config,
                    pretrained: encoder.as_ref(),
                    run_config: serde_json::to_value(config.to_flat())?,
                    seed: config.seed,
                },
                &config.finetune,
                Some(out),
            )?;
            outcome.bundle.save(out)?;
            write_jsonl(out.join(experiment::FINETUNE_LOG_FILE), &outcome.steps)?;
            write_jsonl(out.join(experiment::EPOCH_LOG_FILE), &outcome.epochs)?;
            println!(
                "{}",
                json!({"best_epoch": outcome.best_epoch, "best_valid_f1": outcome.best_valid_f1})
            );
        }
        Cmd::Evaluate {
            model,
            data,
            threshold,
            out,
            scores,
        } => {
            let config = resolve_config(g, &[("paths.corpus", &data.data), ("paths.features", &data.features)])?;
            let bundle = ModelBundle::load(&model)?;
            let commits = load_corpus(&config)?;
            let threshold = threshold.unwrap_or(bundle.threshold);
            let (report, raw) = evaluate_model(&bundle, &commits, threshold)?;
            if let Some(path) = &scores {
                let rows: Vec<(String, f64)> = commits.iter().map(|c| c.commit_id.clone()).zip(raw).collect();
                write_scores_csv(path, &rows)?;
            }
            match &out {
                Some(path) => {
                    write_json(path, &report)?;
                    save_sidecar_config(&config, path)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Cmd::Predict {
            model,
            data,
            threshold,
            out,
        } => {
            let config = resolve_config(g, &[("paths.corpus", &data.data), ("paths.features", &data.features)])?;
            let bundle = ModelBundle::load(&model)?;
            let commits = load_corpus(&config)?;
            let threshold = threshold.unwrap_or(bundle.threshold);
            let results = predict_batch(&bundle, &commits, threshold)?;
            let rows: Vec<serde_json::Value> = commits
                .iter()
                .zip(&results)
                .map(|(c, r)| json!({"commit_id": c.commit_id, "p_defective": r.p_defective, "label": r.predicted_label}))
                .collect();
            write_jsonl(&out, &rows)?;
            save_sidecar_config(&config, &out)?;
        }
        Cmd::Run { data, splits, out } => {
            let config = resolve_config(
                g,
                &[
                    ("paths.corpus", &data.data),
                    ("paths.features", &data.features),
                    ("paths.splits", &splits),
                    ("paths.output_dir", &out),
                ],
            )?;
            let commits = load_corpus(&config)?;
            let outcome = run_pipeline(&config, &commits, config.paths.output_dir.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
        }
        Cmd::Ablate {
            grid,
            data,
            splits,
            out,
        } => {
            let config = resolve_config(
                g,
                &[
                    ("paths.corpus", &data.data),
                    ("paths.features", &data.features),
                    ("paths.splits", &splits),
                    ("paths.output_dir", &out),
                ],
            )?;
            let grid: Grid = grid.parse()?;
            let commits = load_corpus(&config)?;
            let out = config.paths.output_dir.as_deref();
            if let Some(dir) = out {
                config.save(dir)?;
            }
            let results = run_ablation(&config, grid, &commits, out)?;
            print!("{}", summary_table(&results));
        }
    }
    Ok(())
}
