//! Defect classifier over fused semantic and expert features, its joint
//! fine-tuning loop, and the persisted model bundle.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CodeCommit;
use crate::encoder::{change_representation, Encoder, EncoderCache, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{f1_score, Scorer};
use crate::features::{ExpertFeatureVector, StandardizerStats, NUM_FEATURES};
use crate::nn::{clip_global_norm, softmax, Adam, AdamConfig, Linear, LrSchedule, Params};
use crate::par;
use crate::pretrain::{binary_cross_entropy, reduce, PROB_EPS};
use crate::seeding::{self, rng_for};
use crate::tokenize::{serialize_commit, TokenSequence, Vocabulary};

const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub p_defective: f64,
    pub p_clean: f64,
    pub predicted_label: u8,
}

/// Expansion layer plus the two-layer MLP classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectHead {
    /// 14 -> H dense expansion of the standardized expert vector.
    pub expand: Linear,
    /// 2H -> H.
    pub hidden: Linear,
    /// H -> 2 logits ordered (defective, clean).
    pub out: Linear,
}

impl DefectHead {
    pub fn new<R: rand::Rng + ?Sized>(hidden_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            expand: Linear::new(NUM_FEATURES, hidden_dim, std, rng),
            hidden: Linear::new(2 * hidden_dim, hidden_dim, std, rng),
            out: Linear::new(hidden_dim, 2, std, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.expand.output_dim()
    }
}

impl Params for DefectHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.expand.tensors();
        v.extend(self.hidden.tensors());
        v.extend(self.out.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.expand.tensors_mut();
        v.extend(self.hidden.tensors_mut());
        v.extend(self.out.tensors_mut());
        v
    }
}

/// `concat(s, expand(e))`.
pub fn fuse_features(s: &Array1<f64>, e: &[f64], expand: &Linear) -> Result<Array1<f64>> {
    if e.len() != NUM_FEATURES || expand.input_dim() != NUM_FEATURES {
        return Err(Error::invalid(format!(
            "expert vector must have {NUM_FEATURES} entries, got {}",
            e.len()
        )));
    }
    if s.len() != expand.output_dim() {
        return Err(Error::invalid(format!(
            "change representation has {} entries, expansion produces {}",
            s.len(),
            expand.output_dim()
        )));
    }
    let e = Array2::from_shape_vec((1, NUM_FEATURES), e.to_vec()).expect("shape");
    let expanded = expand.forward(e.view()).index_axis_move(Axis(0), 0);
    Ok(concatenate![Axis(0), s.view(), expanded.view()])
}

fn mlp_logits(fused: &Array1<f64>, head: &DefectHead) -> (Array2<f64>, Array2<f64>, [f64; 2]) {
    let x = fused.view().insert_axis(Axis(0)).to_owned();
    let act = head.hidden.forward(x.view()).mapv(f64::tanh);
    let z = head.out.forward(act.view());
    (x, act, [z[[0, 0]], z[[0, 1]]])
}

/// Probabilities from a pair of (defective, clean) logits.
pub fn probabilities_from_logits(logits: [f64; 2], threshold: f64) -> PredictionResult {
    let p = softmax(&logits);
    PredictionResult {
        p_defective: p[0],
        p_clean: p[1],
        predicted_label: u8::from(p[0] >= threshold),
    }
}

/// MLP (2H -> H, tanh, -> 2) followed by softmax.
pub fn classify(fused: &Array1<f64>, head: &DefectHead, threshold: f64) -> Result<PredictionResult> {
    if fused.len() != head.hidden.input_dim() {
        return Err(Error::invalid(format!(
            "fused vector has {} entries, classifier expects {}",
            fused.len(),
            head.hidden.input_dim()
        )));
    }
    Ok(probabilities_from_logits(mlp_logits(fused, head).2, threshold))
}

/// Binary cross-entropy of `p_defective` against `label` (1 = defective).
pub fn dp_loss(result: &PredictionResult, label: u8) -> f64 {
    binary_cross_entropy(result.p_defective, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub semantic: bool,
    pub expert: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            semantic: true,
            expert: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectModel {
    pub encoder: Encoder,
    pub head: DefectHead,
    pub branches: Branches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DefectGrads {
    encoder: Encoder,
    head: DefectHead,
}

impl Params for DefectGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors();
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

struct ForwardCache {
    encoder: Option<(EncoderCache, usize)>,
    expert_in: Array2<f64>,
    fused: Array2<f64>,
    act: Array2<f64>,
}

impl DefectModel {
    pub fn new(encoder: Encoder, branches: Branches, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[seeding::STREAM_HEAD_INIT, 7]);
        let head = DefectHead::new(encoder.hidden_dim(), encoder.config.init_std, &mut rng);
        Self {
            encoder,
            head,
            branches,
        }
    }

    fn forward(
        &self,
        seq: &TokenSequence,
        expert: &[f64; NUM_FEATURES],
        dropout: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<([f64; 2], ForwardCache)> {
        let h = self.encoder.hidden_dim();
        let (s, enc_cache) = if self.branches.semantic {
            let seq = seq.unpadded();
            let (hidden, cache) = self.encoder.forward(&seq.ids, &seq.attention_mask, dropout)?;
            (change_representation(&hidden)?, Some((cache, hidden.nrows())))
        } else {
            (Array1::zeros(h), None)
        };
        let expert_in = Array2::from_shape_vec((1, NUM_FEATURES), expert.to_vec()).expect("shape");
        let fused = if self.branches.expert {
            fuse_features(&s, expert, &self.head.expand)?
        } else {
            concatenate![Axis(0), s.view(), Array1::zeros(h).view()]
        };
        let (fused, act, logits) = mlp_logits(&fused, &self.head);
        Ok((
            logits,
            ForwardCache {
                encoder: enc_cache,
                expert_in,
                fused,
                act,
            },
        ))
    }

    fn backward(&self, cache: &ForwardCache, d_logits: [f64; 2], grads: &mut DefectGrads) {
        let h = self.encoder.hidden_dim();
        let dz = Array2::from_shape_vec((1, 2), d_logits.to_vec()).expect("shape");
        let d_act = self.head.out.backward(cache.act.view(), dz.view(), &mut grads.head.out);
        let d_pre = d_act * &cache.act.mapv(|a| 1.0 - a * a);
        let d_fused = self
            .head
            .hidden
            .backward(cache.fused.view(), d_pre.view(), &mut grads.head.hidden);
        if self.branches.expert {
            let d_expanded = d_fused.slice(s![.., h..]).to_owned();
            self.head
                .expand
                .backward(cache.expert_in.view(), d_expanded.view(), &mut grads.head.expand);
        }
        if let Some((enc_cache, n)) = &cache.encoder {
            let mut d_hidden = Array2::zeros((*n, h));
            d_hidden.row_mut(0).assign(&d_fused.slice(s![0, ..h]));
            self.encoder.backward(enc_cache, d_hidden.view(), &mut grads.encoder);
        }
    }

    pub fn predict(&self, seq: &TokenSequence, expert: &[f64; NUM_FEATURES], threshold: f64) -> Result<PredictionResult> {
        let (logits, _) = self.forward(seq, expert, None)?;
        Ok(probabilities_from_logits(logits, threshold))
    }

    /// Unweighted loss of one example with its full gradient, dropout
    /// disabled. Returns (loss, encoder gradient, head gradient).
    pub fn loss_with_gradients(
        &self,
        seq: &TokenSequence,
        expert: &[f64; NUM_FEATURES],
        label: u8,
    ) -> Result<(f64, Encoder, DefectHead)> {
        let mut g = DefectGrads {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        };
        let loss = self.example_loss(seq, expert, label, 1.0, None, 1.0, Some(&mut g))?;
        Ok((loss, g.encoder, g.head))
    }

    /// Loss for one example; accumulates gradients scaled by `grad_scale`.
    #[allow(clippy::too_many_arguments)]
    fn example_loss(
        &self,
        seq: &TokenSequence,
        expert: &[f64; NUM_FEATURES],
        label: u8,
        pos_weight: f64,
        dropout: Option<&mut rand_chacha::ChaCha8Rng>,
        grad_scale: f64,
        grads: Option<&mut DefectGrads>,
    ) -> Result<f64> {
        let (logits, cache) = self.forward(seq, expert, dropout)?;
        let result = probabilities_from_logits(logits, 0.5);
        let weight = if label == 1 { pos_weight } else { 1.0 };
        if let Some(g) = grads {
            let p = result.p_defective;
            let dp = if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                weight * grad_scale * (p - f64::from(label))
            } else {
                0.0
            };
            self.backward(&cache, [dp, -dp], g);
        }
        Ok(weight * dp_loss(&result, label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub threshold: f64,
    /// Loss weight on defective examples; 1 disables weighting.
    pub pos_weight: f64,
    pub grad_clip: f64,
    pub use_semantic: bool,
    pub use_expert: bool,
    /// Start from the pre-trained encoder when one is available.
    pub use_pretrained: bool,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 12,
            peak_lr: 1e-5,
            warmup_fraction: 0.1,
            threshold: 0.5,
            pos_weight: 1.0,
            grad_clip: 1.0,
            use_semantic: true,
            use_expert: true,
            use_pretrained: true,
        }
    }
}

impl FinetuneSettings {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("finetune.batch_size must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            problems.push("finetune.threshold must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            problems.push("finetune.warmup_fraction must lie in [0, 1]".into());
        }
        if self.pos_weight.is_nan() || self.pos_weight <= 0.0 {
            problems.push("finetune.pos_weight must be positive".into());
        }
        if !self.use_semantic && !self.use_expert {
            problems.push("finetune.use_semantic and finetune.use_expert are both false".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn branches(&self) -> Branches {
        Branches {
            semantic: self.use_semantic,
            expert: self.use_expert,
        }
    }
}

/// Everything needed to score new commits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub model: DefectModel,
    pub vocab: Vocabulary,
    pub standardizer: StandardizerStats,
    pub threshold: f64,
    /// Resolved run configuration that produced the bundle.
    pub run_config: serde_json::Value,
    pub encoder_config_hash: String,
    pub standardizer_hash: String,
}

pub fn standardizer_hash(stats: &StandardizerStats) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(stats).expect("stats serialize")))
}

impl ModelBundle {
    pub const FILE_NAME: &'static str = "model.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_json(dir.join(Self::FILE_NAME), self)
    }

    /// Loads `path`, which may be the bundle file or its directory, and
    /// verifies the stored hashes.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let bundle: Self = crate::io::read_json(&file)?;
        bundle.verify()?;
        Ok(bundle)
    }

    pub fn verify(&self) -> Result<()> {
        if self.model.encoder.config.hash() != self.encoder_config_hash {
            return Err(Error::Checkpoint("encoder config does not match checkpoint hash".into()));
        }
        self.check_stats(&self.standardizer)
    }

    /// Errors unless `stats` are the statistics this model was trained with.
    pub fn check_stats(&self, stats: &StandardizerStats) -> Result<()> {
        if standardizer_hash(stats) != self.standardizer_hash {
            return Err(Error::Checkpoint(
                "standardizer statistics do not match the model checkpoint".into(),
            ));
        }
        Ok(())
    }

    fn expert_input(&self, features: Option<&ExpertFeatureVector>, commit_id: &str) -> Result<[f64; NUM_FEATURES]> {
        match features {
            Some(f) => Ok(self.standardizer.standardize(f)),
            None if !self.model.branches.expert => Ok([0.0; NUM_FEATURES]),
            None => Err(Error::MissingFeatures(vec![commit_id.to_string()])),
        }
    }
}

/// Scores one commit. `features` are raw (unstandardized) metrics; the
/// bundle's persisted statistics are applied. The label is 1 iff
/// `p_defective >= threshold`.
pub fn predict_commit(
    bundle: &ModelBundle,
    commit: &CodeCommit,
    features: Option<&ExpertFeatureVector>,
    threshold: f64,
) -> Result<PredictionResult> {
    let expert = bundle.expert_input(features.or(commit.expert_features.as_ref()), &commit.commit_id)?;
    let seq = serialize_commit(commit, &bundle.vocab, bundle.model.encoder.config.max_len);
    bundle.model.predict(&seq, &expert, threshold)
}

/// Scores many commits in parallel; identical to calling [`predict_commit`]
/// on each.
pub fn predict_batch(bundle: &ModelBundle, commits: &[CodeCommit], threshold: f64) -> Result<Vec<PredictionResult>> {
    par::map(commits, |c| predict_commit(bundle, c, None, threshold))
        .into_iter()
        .collect()
}

impl Scorer for ModelBundle {
    fn score(&self, commits: &[CodeCommit]) -> Result<Vec<f64>> {
        Ok(predict_batch(self, commits, self.threshold)?
            .into_iter()
            .map(|r| r.p_defective)
            .collect())
    }

    fn id(&self) -> String {
        format!("bundle-{}", &self.encoder_config_hash[..12])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub bundle: ModelBundle,
    /// 1-based epoch whose checkpoint was kept.
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<FinetuneStepLog>,
}

pub struct FinetuneInputs<'a> {
    pub train: &'a [CodeCommit],
    pub valid: &'a [CodeCommit],
    pub vocab: &'a Vocabulary,
    /// Used when no pre-trained encoder is supplied (or it is disabled).
    pub encoder_config: &'a EncoderConfig,
    pub pretrained: Option<&'a Encoder>,
    pub run_config: serde_json::Value,
    pub seed: u64,
}

fn require_features(commits: &[&CodeCommit]) -> Result<()> {
    let missing: Vec<String> = commits
        .iter()
        .filter(|c| c.expert_features.is_none())
        .map(|c| c.commit_id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFeatures(missing))
    }
}

/// Jointly trains encoder, expansion and classifier; keeps the checkpoint
/// with the best validation F1 (earliest epoch on ties) and writes it to
/// `out_dir` when given.
pub fn run_finetune(inputs: FinetuneInputs<'_>, settings: &FinetuneSettings, out_dir: Option<&Path>) -> Result<FinetuneOutcome> {
    settings.validate()?;
    let FinetuneInputs {
        train,
        valid,
        vocab,
        encoder_config,
        pretrained,
        run_config,
        seed,
    } = inputs;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("fine-tuning needs non-empty train and validation splits"));
    }
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|c| c.commit_id.as_str()).collect();
    if valid.iter().any(|c| train_ids.contains(c.commit_id.as_str())) {
        return Err(Error::Split("train and validation splits overlap".into()));
    }
    if settings.use_expert {
        require_features(&train.iter().chain(valid).collect::<Vec<_>>())?;
    }
    let train_features: Vec<ExpertFeatureVector> = train
        .iter()
        .map(|c| c.expert_features.unwrap_or_default())
        .collect();
    let standardizer = StandardizerStats::fit(&train_features)?;

    let encoder = match pretrained {
        Some(enc) if settings.use_pretrained => enc.clone(),
        _ => Encoder::new(encoder_config.clone())?,
    };
    if vocab.len() > encoder.config.vocab_size {
        return Err(Error::invalid("vocabulary larger than the encoder embedding table"));
    }
    let max_len = encoder.config.max_len;
    let mut model = DefectModel::new(encoder, settings.branches(), seed);

    let prepare = |commits: &[CodeCommit]| -> Vec<(TokenSequence, [f64; NUM_FEATURES], u8)> {
        par::map(commits, |c| {
            (
                serialize_commit(c, vocab, max_len),
                standardizer.standardize(&c.expert_features.unwrap_or_default()),
                c.label,
            )
        })
    };
    let train_data = prepare(train);
    let valid_data = prepare(valid);

    let mut enc_opt = Adam::new(&model.encoder, AdamConfig::default());
    let mut head_opt = Adam::new(&model.head, AdamConfig::default());
    let steps_per_epoch = train.len().div_ceil(settings.batch_size) as u64;
    let schedule = LrSchedule::new(
        settings.peak_lr,
        settings.warmup_fraction,
        steps_per_epoch * settings.epochs as u64,
    );

    let make_bundle = |model: &DefectModel| ModelBundle {
        model: model.clone(),
        vocab: vocab.clone(),
        standardizer: standardizer.clone(),
        threshold: settings.threshold,
        run_config: run_config.clone(),
        encoder_config_hash: model.encoder.config.hash(),
        standardizer_hash: standardizer_hash(&standardizer),
    };

    let mut best: Option<(usize, f64, DefectModel)> = None;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut step = 0u64;
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng_for(seed, &[seeding::STREAM_SHUFFLE, 1_000 + epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let snapshot = &model;
            let parts = par::map_chunks(batch, GRAD_CHUNK, |chunk| -> Result<_> {
                let mut g = DefectGrads {
                    encoder: snapshot.encoder.zeros_like(),
                    head: snapshot.head.zeros_like(),
                };
                let mut loss = 0.0;
                for &i in chunk {
                    let (seq, e, y) = &train_data[i];
                    let mut rng = rng_for(seed, &[seeding::STREAM_EXAMPLE, 1 << 40 | step, i as u64]);
                    loss += snapshot.example_loss(seq, e, *y, settings.pos_weight, Some(&mut rng), scale, Some(&mut g))?;
                }
                Ok((loss, g, EmptyParams))
            });
            let (loss, mut g, _) = reduce(parts)?;
            let factor = clip_global_norm(g.sq_norm(), settings.grad_clip);
            g.scale(factor);
            let lr = schedule.lr(step);
            if model.branches.semantic {
                enc_opt.update(&mut model.encoder, &g.encoder, lr);
            }
            head_opt.update(&mut model.head, &g.head, lr);
            steps.push(FinetuneStepLog {
                step,
                loss: loss * scale,
                lr,
            });
            epoch_loss += loss;
            step += 1;
        }

        let preds = par::map(&valid_data, |(seq, e, _)| model.predict(seq, e, settings.threshold));
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (p, (_, _, y)) in preds.into_iter().zip(&valid_data) {
            match (p?.predicted_label, *y) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        let f1 = f1_score(tp, fp, fn_).2;
        epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: epoch_loss / train_data.len() as f64,
            valid_f1: f1,
        });
        log::info!("finetune epoch {} valid F1 {f1:.4}", epoch + 1);
        if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
            best = Some((epoch + 1, f1, model.clone()));
            if let Some(dir) = out_dir {
                make_bundle(&model).save(dir)?;
            }
        }
    }

    let (best_epoch, best_valid_f1, best_model) = match best {
        Some(b) => b,
        None => (0, 0.0, model),
    };
    Ok(FinetuneOutcome {
        bundle: make_bundle(&best_model),
        best_epoch,
        best_valid_f1,
        epochs,
        steps,
    })
}

/// Zero-sized stand-in for the second gradient slot of [`reduce`].
#[derive(Clone)]
struct EmptyParams;

impl Params for EmptyParams {
    fn tensors(&self) -> Vec<&[f64]> {
        Vec::new()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::nn::normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fusion_shapes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = DefectHead::new(128, 0.02, &mut rng);
        let s = Array1::from_iter((0..128).map(|i| i as f64));
        let fused = fuse_features(&s, &[1.0; NUM_FEATURES], &head.expand).unwrap();
        assert_eq!(fused.len(), 256);
        assert_eq!(fused.slice(s![..128]), s);

        let zero = Linear::zeros(NUM_FEATURES, 128);
        let fused = fuse_features(&s, &[3.0; NUM_FEATURES], &zero).unwrap();
        assert!(fused.slice(s![128..]).iter().all(|&x| x == 0.0));

        assert!(fuse_features(&s, &[1.0; 13], &head.expand).is_err());
        assert!(fuse_features(&Array1::zeros(64), &[1.0; NUM_FEATURES], &head.expand).is_err());
    }

    #[test]
    fn softmax_examples() {
        let r = probabilities_from_logits([0.0, 0.0], 0.5);
        assert_eq!((r.p_defective, r.p_clean), (0.5, 0.5));
        assert_eq!(r.predicted_label, 1);
        let r = probabilities_from_logits([2.0, 0.0], 0.5);
        assert!((r.p_defective - 0.8808).abs() < 1e-4);
        assert!((r.p_clean - 0.1192).abs() < 1e-4);
        let r = probabilities_from_logits([40.0, 0.0], 1.0);
        assert_eq!(r.predicted_label, 1);
        let r = probabilities_from_logits([3.0, 0.0], 1.0);
        assert_eq!(r.predicted_label, 0);
    }

    #[test]
    fn dp_loss_examples() {
        let p = |d: f64| PredictionResult {
            p_defective: d,
            p_clean: 1.0 - d,
            predicted_label: 0,
        };
        assert!((dp_loss(&p(0.5), 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((dp_loss(&p(0.9), 1) - 0.1054).abs() < 1e-4);
        assert!((dp_loss(&p(0.9), 0) - std::f64::consts::LN_10).abs() < 1e-4);
    }

    #[derive(Clone)]
    struct FusionParams {
        s: Array1<f64>,
        head: DefectHead,
    }

    impl Params for FusionParams {
        fn tensors(&self) -> Vec<&[f64]> {
            let mut v = vec![self.s.as_slice().unwrap()];
            v.extend(self.head.tensors());
            v
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            let mut v = vec![self.s.as_slice_mut().unwrap()];
            v.extend(self.head.tensors_mut());
            v
        }
    }

    #[test]
    fn fusion_classifier_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 6;
        let p = FusionParams {
            s: normal_matrix(1, h, 1.0, &mut rng).index_axis_move(Axis(0), 0),
            head: DefectHead::new(h, 0.5, &mut rng),
        };
        let e: Vec<f64> = (0..NUM_FEATURES).map(|i| (i as f64 - 6.0) / 4.0).collect();
        for label in [0u8, 1] {
            let loss = |p: &FusionParams| {
                let fused = fuse_features(&p.s, &e, &p.head.expand).unwrap();
                dp_loss(&classify(&fused, &p.head, 0.5).unwrap(), label)
            };
            // analytic path shared with training
            let fused = fuse_features(&p.s, &e, &p.head.expand).unwrap();
            let (x, act, logits) = mlp_logits(&fused, &p.head);
            let r = probabilities_from_logits(logits, 0.5);
            let dp = r.p_defective - f64::from(label);
            let model = DefectModel {
                encoder: Encoder::new(EncoderConfig {
                    hidden_dim: h,
                    num_heads: 1,
                    ff_dim: 4,
                    num_layers: 1,
                    max_len: 4,
                    vocab_size: 8,
                    ..EncoderConfig::default()
                })
                .unwrap(),
                head: p.head.clone(),
                branches: Branches {
                    semantic: false,
                    expert: true,
                },
            };
            let cache = ForwardCache {
                encoder: None,
                expert_in: Array2::from_shape_vec((1, NUM_FEATURES), e.clone()).unwrap(),
                fused: x,
                act,
            };
            let mut grads = DefectGrads {
                encoder: model.encoder.zeros_like(),
                head: model.head.zeros_like(),
            };
            model.backward(&cache, [dp, -dp], &mut grads);
            // gradient w.r.t. s is the first H entries of d(fused)
            let dz = Array2::from_shape_vec((1, 2), vec![dp, -dp]).unwrap();
            let d_act = p.head.out.weight.dot(&dz.t()).t().to_owned() * &cache.act.mapv(|a| 1.0 - a * a);
            let d_fused = d_act.dot(&p.head.hidden.weight.t());
            let analytic = FusionParams {
                s: d_fused.slice(s![0, ..h]).to_owned(),
                head: grads.head,
            };
            let numeric = gradcheck::numeric_grad(&p, 1e-6, loss);
            gradcheck::assert_grads_match(&analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn disabled_branches_are_structural() {
        let cfg = EncoderConfig {
            hidden_dim: 8,
            num_heads: 2,
            ff_dim: 8,
            num_layers: 1,
            max_len: 8,
            vocab_size: 12,
            dropout: 0.0,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg).unwrap();
        let seq_a = TokenSequence {
            ids: vec![2, 7, 8],
            attention_mask: vec![1, 1, 1],
            mlm_labels: None,
            add_positions: vec![],
            del_positions: vec![],
        };
        let mut seq_b = seq_a.clone();
        seq_b.ids[1] = 9;
        let e1 = [0.5; NUM_FEATURES];
        let e2 = [-2.0; NUM_FEATURES];

        let semantic_only = DefectModel::new(enc.clone(), Branches { semantic: true, expert: false }, 1);
        assert_eq!(
            semantic_only.predict(&seq_a, &e1, 0.5).unwrap(),
            semantic_only.predict(&seq_a, &e2, 0.5).unwrap()
        );
        let expert_only = DefectModel::new(enc.clone(), Branches { semantic: false, expert: true }, 1);
        assert_eq!(
            expert_only.predict(&seq_a, &e1, 0.5).unwrap(),
            expert_only.predict(&seq_b, &e1, 0.5).unwrap()
        );
        let both = DefectModel::new(enc, Branches::default(), 1);
        assert_ne!(both.predict(&seq_a, &e1, 0.5).unwrap(), both.predict(&seq_b, &e1, 0.5).unwrap());
        assert_ne!(both.predict(&seq_a, &e1, 0.5).unwrap(), both.predict(&seq_a, &e2, 0.5).unwrap());
    }

    #[test]
    fn full_model_gradients() {
        let cfg = EncoderConfig {
            hidden_dim: 6,
            num_heads: 2,
            ff_dim: 8,
            num_layers: 1,
            max_len: 8,
            vocab_size: 12,
            dropout: 0.0,
            init_std: 0.4,
            seed: 9,
        };
        let model = DefectModel::new(Encoder::new(cfg).unwrap(), Branches::default(), 3);
        let seq = TokenSequence {
            ids: vec![2, 7, 4, 8, 9],
            attention_mask: vec![1, 1, 1, 1, 1],
            mlm_labels: None,
            add_positions: vec![2],
            del_positions: vec![],
        };
        let e: [f64; NUM_FEATURES] = std::array::from_fn(|i| (i as f64 - 7.0) / 5.0);
        let params = DefectGrads {
            encoder: model.encoder.clone(),
            head: model.head.clone(),
        };
        let mut grads = DefectGrads {
            encoder: model.encoder.zeros_like(),
            head: model.head.zeros_like(),
        };
        model.example_loss(&seq, &e, 1, 1.0, None, 1.0, Some(&mut grads)).unwrap();
        let numeric = gradcheck::numeric_grad(&params, 1e-5, |p| {
            let m = DefectModel {
                encoder: p.encoder.clone(),
                head: p.head.clone(),
                branches: Branches::default(),
            };
            m.example_loss(&seq, &e, 1, 1.0, None, 0.0, None).unwrap()
        });
        gradcheck::assert_grads_match(&grads, &numeric, 1e-4);
    }
}
