//! Pre-training: masked language modeling (MLM), replaced message
//! identification (RMI), the per-batch objective sampler and the training
//! loop.
//!
//! RMI label polarity: `1` means the message is the commit's own, `0` means
//! it was swapped in from another commit.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CodeCommit;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{
    clip_global_norm, gelu, gelu_grad, log_sum_exp, sigmoid, softmax, Adam, AdamConfig, LayerNorm,
    LayerNormCache, Linear, LrSchedule, Params,
};
use crate::par;
use crate::seeding::{self, rng_for};
use crate::tokenize::{apply_mlm_mask_with, serialize_commit, MaskStrategy, TokenSequence, Vocabulary};

/// Probability clamp applied before every binary cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Examples per gradient-accumulation chunk; fixed so results do not depend
/// on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmiExample {
    pub commit: CodeCommit,
    pub rmi_label: u8,
    pub donor_commit_id: Option<String>,
}

/// With probability `p_replace`, swaps in the message of a uniformly drawn
/// different commit from `pool`.
pub fn make_rmi_example<R: Rng + ?Sized>(
    commit: &CodeCommit,
    pool: &[CodeCommit],
    p_replace: f64,
    rng: &mut R,
) -> Result<RmiExample> {
    if !(0.0..=1.0).contains(&p_replace) {
        return Err(Error::invalid(format!("p_replace {p_replace} outside [0, 1]")));
    }
    if p_replace > 0.0 && !pool.iter().any(|c| c.commit_id != commit.commit_id) {
        return Err(Error::invalid("cannot draw non-corresponding message"));
    }
    let u: f64 = rng.random();
    if u >= p_replace {
        return Ok(RmiExample {
            commit: commit.clone(),
            rmi_label: 1,
            donor_commit_id: None,
        });
    }
    let donor = loop {
        let candidate = &pool[rng.random_range(0..pool.len())];
        if candidate.commit_id != commit.commit_id {
            break candidate;
        }
    };
    let mut replaced = commit.clone();
    replaced.message = donor.message.clone();
    Ok(RmiExample {
        commit: replaced,
        rmi_label: 0,
        donor_commit_id: Some(donor.commit_id.clone()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Rmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSchedule {
    pub mlm_weight: u32,
    pub rmi_weight: u32,
    pub seed: u64,
}

impl ObjectiveSchedule {
    pub fn mlm_probability(&self) -> Result<f64> {
        let total = self.mlm_weight + self.rmi_weight;
        if total == 0 {
            return Err(Error::invalid("both objective weights are zero"));
        }
        Ok(self.mlm_weight as f64 / total as f64)
    }
}

/// MLM when `u < mlm_weight / (mlm_weight + rmi_weight)`, RMI otherwise.
pub fn objective_for_draw(schedule: &ObjectiveSchedule, u: f64) -> Result<Objective> {
    Ok(if u < schedule.mlm_probability()? {
        Objective::Mlm
    } else {
        Objective::Rmi
    })
}

pub fn sample_objective<R: Rng + ?Sized>(schedule: &ObjectiveSchedule, rng: &mut R) -> Result<Objective> {
    schedule.mlm_probability()?;
    objective_for_draw(schedule, rng.random())
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (one row per masked position).
pub fn mlm_loss(logits: ArrayView2<f64>, labels: &[u32]) -> Result<f64> {
    if labels.is_empty() || logits.nrows() == 0 {
        return Err(Error::invalid("mlm_loss needs at least one masked position"));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::invalid("logit rows and labels differ in length"));
    }
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let row = row.to_vec();
            log_sum_exp(&row) - row[y as usize]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Binary cross-entropy on the not-replaced probability.
pub fn rmi_loss(p_not_replaced: f64, label: u8) -> f64 {
    binary_cross_entropy(p_not_replaced, label)
}

pub(crate) fn binary_cross_entropy(p: f64, label: u8) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// d(BCE)/dz for `p = sigmoid(z)`; zero where the clamp is active.
pub(crate) fn bce_logit_grad(p: f64, label: u8) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        0.0
    } else {
        p - f64::from(label)
    }
}

/// Vocabulary projection head: dense, GELU, layer norm, decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmHead {
    pub dense: Linear,
    pub norm: LayerNorm,
    pub decoder: Linear,
}

pub struct MlmHeadCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    norm: LayerNormCache,
    normed: Array2<f64>,
}

impl MlmHead {
    pub fn new<R: Rng + ?Sized>(hidden: usize, vocab: usize, std: f64, rng: &mut R) -> Self {
        Self {
            dense: Linear::new(hidden, hidden, std, rng),
            norm: LayerNorm::new(hidden),
            decoder: Linear::new(hidden, vocab, std, rng),
        }
    }

    pub fn forward(&self, rows: Array2<f64>) -> (Array2<f64>, MlmHeadCache) {
        let pre = self.dense.forward(rows.view());
        let act = pre.mapv(gelu);
        let (normed, norm) = self.norm.forward(act.view());
        let logits = self.decoder.forward(normed.view());
        (
            logits,
            MlmHeadCache {
                input: rows,
                pre,
                norm,
                normed,
            },
        )
    }

    pub fn backward(&self, c: &MlmHeadCache, d_logits: ArrayView2<f64>, g: &mut MlmHead) -> Array2<f64> {
        let d_normed = self.decoder.backward(c.normed.view(), d_logits, &mut g.decoder);
        let d_act = self.norm.backward(&c.norm, d_normed.view(), &mut g.norm);
        let d_pre = d_act * &c.pre.mapv(gelu_grad);
        self.dense.backward(c.input.view(), d_pre.view(), &mut g.dense)
    }
}

impl Params for MlmHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.dense.tensors();
        v.extend(self.norm.tensors());
        v.extend(self.decoder.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.dense.tensors_mut();
        v.extend(self.norm.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }
}

/// Binary head on the `[CLS]` vector: dense, tanh, single logit, sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmiHead {
    pub dense: Linear,
    pub out: Linear,
}

pub struct RmiHeadCache {
    input: Array2<f64>,
    act: Array2<f64>,
    pub p: f64,
}

impl RmiHead {
    pub fn new<R: Rng + ?Sized>(hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            dense: Linear::new(hidden, hidden, std, rng),
            out: Linear::new(hidden, 1, std, rng),
        }
    }

    /// Probability that the message was not replaced.
    pub fn forward(&self, cls: ArrayView1<f64>) -> RmiHeadCache {
        let input = cls.to_owned().insert_axis(Axis(0));
        let act = self.dense.forward(input.view()).mapv(f64::tanh);
        let z = self.out.forward(act.view())[[0, 0]];
        RmiHeadCache {
            input,
            act,
            p: sigmoid(z),
        }
    }

    /// Returns dL/d(cls) given dL/dz.
    pub fn backward(&self, c: &RmiHeadCache, dz: f64, g: &mut RmiHead) -> Array1<f64> {
        let dz = Array2::from_elem((1, 1), dz);
        let d_act = self.out.backward(c.act.view(), dz.view(), &mut g.out);
        let d_pre = d_act * &c.act.mapv(|a| 1.0 - a * a);
        self.dense
            .backward(c.input.view(), d_pre.view(), &mut g.dense)
            .index_axis_move(Axis(0), 0)
    }
}

impl Params for RmiHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.dense.tensors();
        v.extend(self.out.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.dense.tensors_mut();
        v.extend(self.out.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainModel {
    pub encoder: Encoder,
    pub mlm_head: MlmHead,
    pub rmi_head: RmiHead,
}

impl PretrainModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let encoder = Encoder::new(config.clone())?;
        let mut rng = rng_for(config.seed, &[seeding::STREAM_HEAD_INIT]);
        let h = config.hidden_dim;
        Ok(Self {
            mlm_head: MlmHead::new(h, config.vocab_size, config.init_std, &mut rng),
            rmi_head: RmiHead::new(h, config.init_std, &mut rng),
            encoder,
        })
    }

    /// Summed MLM loss and masked-token hit count for one masked sequence.
    /// Gradients, scaled by `grad_scale`, are accumulated when `grads` is
    /// given.
    fn mlm_example(
        &self,
        seq: &TokenSequence,
        dropout: Option<&mut ChaCha8Rng>,
        grad_scale: f64,
        grads: Option<(&mut Encoder, &mut MlmHead)>,
    ) -> Result<(f64, usize, usize)> {
        let seq = seq.unpadded();
        let labels = seq.mlm_labels.as_ref().expect("masked sequence");
        let (positions, targets): (Vec<usize>, Vec<u32>) = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|t| (i, t)))
            .unzip();
        if positions.is_empty() {
            return Ok((0.0, 0, 0));
        }
        let (hidden, cache) = self.encoder.forward(&seq.ids, &seq.attention_mask, dropout)?;
        let rows = hidden.select(Axis(0), &positions);
        let (logits, head_cache) = self.mlm_head.forward(rows);
        let mut loss = 0.0;
        let mut hits = 0;
        let mut d_logits = Array2::zeros(logits.raw_dim());
        for (r, (row, &t)) in logits.rows().into_iter().zip(&targets).enumerate() {
            let row = row.to_vec();
            loss += log_sum_exp(&row) - row[t as usize];
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            hits += usize::from(argmax == t as usize);
            let probs = softmax(&row);
            for (j, p) in probs.into_iter().enumerate() {
                d_logits[[r, j]] = grad_scale * (p - f64::from(u8::from(j == t as usize)));
            }
        }
        if let Some((enc_grad, head_grad)) = grads {
            let d_rows = self.mlm_head.backward(&head_cache, d_logits.view(), head_grad);
            let mut d_hidden = Array2::zeros(hidden.raw_dim());
            for (r, &pos) in positions.iter().enumerate() {
                let mut row = d_hidden.row_mut(pos);
                row += &d_rows.row(r);
            }
            self.encoder.backward(&cache, d_hidden.view(), enc_grad);
        }
        Ok((loss, hits, positions.len()))
    }

    /// RMI loss and not-replaced probability for one serialized example.
    fn rmi_example(
        &self,
        seq: &TokenSequence,
        label: u8,
        dropout: Option<&mut ChaCha8Rng>,
        grad_scale: f64,
        grads: Option<(&mut Encoder, &mut RmiHead)>,
    ) -> Result<(f64, f64)> {
        let seq = seq.unpadded();
        let (hidden, cache) = self.encoder.forward(&seq.ids, &seq.attention_mask, dropout)?;
        let head_cache = self.rmi_head.forward(hidden.row(0));
        let p = head_cache.p;
        if let Some((enc_grad, head_grad)) = grads {
            let dz = grad_scale * bce_logit_grad(p, label);
            let d_cls = self.rmi_head.backward(&head_cache, dz, head_grad);
            let mut d_hidden = Array2::zeros(hidden.raw_dim());
            d_hidden.row_mut(0).assign(&d_cls);
            self.encoder.backward(&cache, d_hidden.view(), enc_grad);
        }
        Ok((rmi_loss(p, label), p))
    }

    /// RMI loss of one serialized example with its full gradient, dropout
    /// disabled. Returns (loss, encoder gradient, RMI-head gradient).
    pub fn rmi_loss_with_gradients(&self, seq: &TokenSequence, label: u8) -> Result<(f64, Encoder, RmiHead)> {
        let mut enc_g = self.encoder.zeros_like();
        let mut head_g = self.rmi_head.zeros_like();
        let (loss, _) = self.rmi_example(seq, label, None, 1.0, Some((&mut enc_g, &mut head_g)))?;
        Ok((loss, enc_g, head_g))
    }

    /// Probability that `commit`'s message is its own.
    pub fn rmi_probability(&self, commit: &CodeCommit, vocab: &Vocabulary, max_len: usize) -> Result<f64> {
        let seq = serialize_commit(commit, vocab, max_len.min(self.encoder.config.max_len));
        Ok(self.rmi_example(&seq, 1, None, 0.0, None)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderMode {
    /// One objective sampled per batch by the weight ratio.
    Alternating,
    /// MLM for the first half of the epochs, RMI for the rest.
    MlmThenRmi,
    /// RMI for the first half of the epochs, MLM for the rest.
    RmiThenMlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub mask_rate: f64,
    pub mask_strategy: MaskStrategy,
    pub p_replace: f64,
    pub mlm_weight: u32,
    pub rmi_weight: u32,
    pub order: OrderMode,
    pub grad_clip: f64,
    pub grad_accumulation: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 30,
            batch_size: 16,
            peak_lr: 5e-4,
            warmup_fraction: 0.1,
            mask_rate: 0.15,
            mask_strategy: MaskStrategy::Pure,
            p_replace: 0.5,
            mlm_weight: 2,
            rmi_weight: 1,
            order: OrderMode::Alternating,
            grad_clip: 1.0,
            grad_accumulation: 1,
        }
    }
}

impl PretrainSettings {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("pretrain.batch_size must be positive".to_string());
        }
        if self.grad_accumulation == 0 {
            problems.push("pretrain.grad_accumulation must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            problems.push("pretrain.mask_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.p_replace) {
            problems.push("pretrain.p_replace must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            problems.push("pretrain.warmup_fraction must lie in [0, 1]".into());
        }
        if self.enabled && self.order == OrderMode::Alternating && self.mlm_weight + self.rmi_weight == 0 {
            problems.push("pretrain.mlm_weight and pretrain.rmi_weight are both zero".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn objective_for_epoch(&self, epoch: usize) -> Option<Objective> {
        let first_half = epoch < self.epochs.div_ceil(2);
        match (self.order, first_half) {
            (OrderMode::Alternating, _) => None,
            (OrderMode::MlmThenRmi, true) | (OrderMode::RmiThenMlm, false) => Some(Objective::Mlm),
            _ => Some(Objective::Rmi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub objective: Objective,
    pub loss: f64,
    pub lr: f64,
}

/// Everything needed to resume pre-training at an epoch boundary. Random
/// streams are derived from `seed` and the step/epoch counters, so the
/// counters are the RNG state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainCheckpoint {
    pub model: PretrainModel,
    pub encoder_opt: Adam,
    pub mlm_opt: Adam,
    pub rmi_opt: Adam,
    pub settings: PretrainSettings,
    pub schedule: ObjectiveSchedule,
    pub encoder_config_hash: String,
    pub epochs_completed: usize,
    pub step: u64,
    pub log: Vec<StepLog>,
}

impl PretrainCheckpoint {
    pub const FILE_NAME: &'static str = "pretrain_checkpoint.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_json(dir.join(Self::FILE_NAME), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt: Self = crate::io::read_json(dir.join(Self::FILE_NAME))?;
        if ckpt.model.encoder.config.hash() != ckpt.encoder_config_hash {
            return Err(Error::Checkpoint("encoder config hash mismatch".into()));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub log: Vec<StepLog>,
}

enum Batch {
    Mlm(Vec<TokenSequence>),
    Rmi(Vec<(TokenSequence, u8)>),
}

/// Runs (or resumes) pre-training over `corpus`. A checkpoint is written to
/// `checkpoint_dir` after every epoch when one is given.
pub fn run_pretraining(
    encoder_config: &EncoderConfig,
    settings: &PretrainSettings,
    seed: u64,
    corpus: &[CodeCommit],
    vocab: &Vocabulary,
    checkpoint_dir: Option<&Path>,
    resume: Option<PretrainCheckpoint>,
) -> Result<PretrainOutcome> {
    settings.validate()?;
    encoder_config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    if vocab.len() > encoder_config.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary of {} exceeds encoder vocab_size {}",
            vocab.len(),
            encoder_config.vocab_size
        )));
    }
    let schedule = ObjectiveSchedule {
        mlm_weight: settings.mlm_weight,
        rmi_weight: settings.rmi_weight,
        seed,
    };
    let mut state = match resume {
        Some(ckpt) => {
            if ckpt.encoder_config_hash != encoder_config.hash() {
                return Err(Error::Checkpoint(
                    "resume checkpoint was produced with a different encoder config".into(),
                ));
            }
            if ckpt.settings != *settings || ckpt.schedule != schedule {
                return Err(Error::Checkpoint(
                    "resume checkpoint was produced with different pre-training settings".into(),
                ));
            }
            ckpt
        }
        None => {
            let model = PretrainModel::new(encoder_config.clone())?;
            PretrainCheckpoint {
                encoder_opt: Adam::new(&model.encoder, AdamConfig::default()),
                mlm_opt: Adam::new(&model.mlm_head, AdamConfig::default()),
                rmi_opt: Adam::new(&model.rmi_head, AdamConfig::default()),
                model,
                settings: settings.clone(),
                schedule,
                encoder_config_hash: encoder_config.hash(),
                epochs_completed: 0,
                step: 0,
                log: Vec::new(),
            }
        }
    };

    run_epochs(&mut state, settings, seed, corpus, vocab, encoder_config.max_len, checkpoint_dir, settings.epochs)?;
    Ok(PretrainOutcome {
        model: state.model,
        log: state.log,
    })
}

/// Trains from `state.epochs_completed` up to (excluding) epoch `stop_at`.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    state: &mut PretrainCheckpoint,
    settings: &PretrainSettings,
    seed: u64,
    corpus: &[CodeCommit],
    vocab: &Vocabulary,
    max_len: usize,
    checkpoint_dir: Option<&Path>,
    stop_at: usize,
) -> Result<()> {
    let effective = settings.batch_size * settings.grad_accumulation;
    let steps_per_epoch = corpus.len().div_ceil(effective) as u64;
    let lr = LrSchedule::new(
        settings.peak_lr,
        settings.warmup_fraction,
        steps_per_epoch * settings.epochs as u64,
    );
    let schedule = state.schedule;
    for epoch in state.epochs_completed..stop_at.min(settings.epochs) {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng_for(seed, &[seeding::STREAM_SHUFFLE, epoch as u64]));
        let fixed = settings.objective_for_epoch(epoch);
        for batch_ids in order.chunks(effective) {
            let step = state.step;
            let objective = match fixed {
                Some(o) => o,
                None => sample_objective(&schedule, &mut rng_for(seed, &[seeding::STREAM_OBJECTIVE, step]))?,
            };
            let batch = prepare_batch(objective, batch_ids, corpus, vocab, settings, seed, step, max_len)?;
            let rate = lr.lr(step);
            if let Some(loss) = train_step(state, &batch, seed, step, rate, settings.grad_clip)? {
                state.log.push(StepLog {
                    step,
                    objective,
                    loss,
                    lr: rate,
                });
            }
            state.step += 1;
        }
        state.epochs_completed = epoch + 1;
        if let Some(dir) = checkpoint_dir {
            state.save(dir)?;
        }
        log::info!(
            "pretrain epoch {} done, last loss {:?}",
            epoch + 1,
            state.log.last().map(|l| l.loss)
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn prepare_batch(
    objective: Objective,
    ids: &[usize],
    corpus: &[CodeCommit],
    vocab: &Vocabulary,
    settings: &PretrainSettings,
    seed: u64,
    step: u64,
    max_len: usize,
) -> Result<Batch> {
    let example_rng = |k: usize| rng_for(seed, &[seeding::STREAM_EXAMPLE, step, k as u64, 0]);
    Ok(match objective {
        Objective::Mlm => Batch::Mlm(par::map_range(ids.len(), |k| {
            let seq = serialize_commit(&corpus[ids[k]], vocab, max_len);
            apply_mlm_mask_with(
                &seq,
                settings.mask_rate,
                settings.mask_strategy,
                vocab.len(),
                &mut example_rng(k),
            )
        })),
        Objective::Rmi => {
            let made: Vec<Result<(TokenSequence, u8)>> = par::map_range(ids.len(), |k| {
                let ex = make_rmi_example(&corpus[ids[k]], corpus, settings.p_replace, &mut example_rng(k))?;
                Ok((serialize_commit(&ex.commit, vocab, max_len), ex.rmi_label))
            });
            Batch::Rmi(made.into_iter().collect::<Result<_>>()?)
        }
    })
}

/// One optimizer step; returns the batch loss, or `None` when the batch has
/// nothing to learn from (no masked positions).
fn train_step(
    state: &mut PretrainCheckpoint,
    batch: &Batch,
    seed: u64,
    step: u64,
    lr: f64,
    grad_clip: f64,
) -> Result<Option<f64>> {
    let model = &state.model;
    let dropout_rng = |k: usize| rng_for(seed, &[seeding::STREAM_EXAMPLE, step, k as u64, 1]);
    match batch {
        Batch::Mlm(seqs) => {
            let total_masked: usize = seqs.iter().map(TokenSequence::masked_count).sum();
            if total_masked == 0 {
                return Ok(None);
            }
            let scale = 1.0 / total_masked as f64;
            let indexed: Vec<(usize, &TokenSequence)> = seqs.iter().enumerate().collect();
            let parts = par::map_chunks(&indexed, GRAD_CHUNK, |chunk| -> Result<_> {
                let mut enc_g = model.encoder.zeros_like();
                let mut head_g = model.mlm_head.zeros_like();
                let mut loss = 0.0;
                for &(k, seq) in chunk {
                    let mut rng = dropout_rng(k);
                    loss += model
                        .mlm_example(seq, Some(&mut rng), scale, Some((&mut enc_g, &mut head_g)))?
                        .0;
                }
                Ok((loss, enc_g, head_g))
            });
            let (loss, mut enc_g, mut head_g) = reduce(parts)?;
            let factor = clip_global_norm(enc_g.sq_norm() + head_g.sq_norm(), grad_clip);
            enc_g.scale(factor);
            head_g.scale(factor);
            state.encoder_opt.update(&mut state.model.encoder, &enc_g, lr);
            state.mlm_opt.update(&mut state.model.mlm_head, &head_g, lr);
            Ok(Some(loss * scale))
        }
        Batch::Rmi(examples) => {
            let scale = 1.0 / examples.len() as f64;
            let indexed: Vec<(usize, &(TokenSequence, u8))> = examples.iter().enumerate().collect();
            let parts = par::map_chunks(&indexed, GRAD_CHUNK, |chunk| -> Result<_> {
                let mut enc_g = model.encoder.zeros_like();
                let mut head_g = model.rmi_head.zeros_like();
                let mut loss = 0.0;
                for &(k, (seq, label)) in chunk {
                    let mut rng = dropout_rng(k);
                    loss += model
                        .rmi_example(seq, *label, Some(&mut rng), scale, Some((&mut enc_g, &mut head_g)))?
                        .0;
                }
                Ok((loss, enc_g, head_g))
            });
            let (loss, mut enc_g, mut head_g) = reduce(parts)?;
            let factor = clip_global_norm(enc_g.sq_norm() + head_g.sq_norm(), grad_clip);
            enc_g.scale(factor);
            head_g.scale(factor);
            state.encoder_opt.update(&mut state.model.encoder, &enc_g, lr);
            state.rmi_opt.update(&mut state.model.rmi_head, &head_g, lr);
            Ok(Some(loss * scale))
        }
    }
}

pub(crate) fn reduce<A: Params, B: Params>(parts: Vec<Result<(f64, A, B)>>) -> Result<(f64, A, B)> {
    let mut iter = parts.into_iter();
    let (mut loss, mut a, mut b) = iter.next().expect("non-empty batch")?;
    for part in iter {
        let (l, pa, pb) = part?;
        loss += l;
        a.add_assign(&pa);
        b.add_assign(&pb);
    }
    Ok((loss, a, b))
}

/// MLM loss and masked-token top-1 accuracy over `commits`, with masks drawn
/// from `seed` and dropout disabled.
pub fn evaluate_mlm(
    model: &PretrainModel,
    commits: &[CodeCommit],
    vocab: &Vocabulary,
    mask_rate: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let max_len = model.encoder.config.max_len;
    let results = par::map_range(commits.len(), |k| {
        let seq = serialize_commit(&commits[k], vocab, max_len);
        let masked = apply_mlm_mask_with(
            &seq,
            mask_rate,
            MaskStrategy::Pure,
            vocab.len(),
            &mut rng_for(seed, &[seeding::STREAM_EVAL, k as u64]),
        );
        model.mlm_example(&masked, None, 0.0, None)
    });
    let (mut loss, mut hits, mut total) = (0.0, 0, 0);
    for r in results {
        let (l, h, t) = r?;
        loss += l;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::invalid("no masked positions to evaluate"));
    }
    Ok((loss / total as f64, hits as f64 / total as f64))
}

/// RMI accuracy (threshold 0.5) over examples built from `commits` with
/// donors drawn from `pool`.
pub fn evaluate_rmi(
    model: &PretrainModel,
    commits: &[CodeCommit],
    pool: &[CodeCommit],
    vocab: &Vocabulary,
    p_replace: f64,
    seed: u64,
) -> Result<f64> {
    if commits.is_empty() {
        return Err(Error::invalid("no commits to evaluate"));
    }
    let max_len = model.encoder.config.max_len;
    let correct = par::map_range(commits.len(), |k| -> Result<bool> {
        let mut rng = rng_for(seed, &[seeding::STREAM_EVAL, k as u64]);
        let ex = make_rmi_example(&commits[k], pool, p_replace, &mut rng)?;
        let p = model.rmi_probability(&ex.commit, vocab, max_len)?;
        Ok(u8::from(p >= 0.5) == ex.rmi_label)
    });
    let mut hits = 0usize;
    for c in correct {
        hits += usize::from(c?);
    }
    Ok(hits as f64 / commits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::tokenize::{build_vocabulary, RuleTokenizer};
    use ndarray::array;
    use rand::SeedableRng;

    fn commit(id: &str, message: &str, added: &[&str]) -> CodeCommit {
        CodeCommit {
            commit_id: id.into(),
            project: "p".into(),
            timestamp: 0,
            author: "a".into(),
            message: message.into(),
            added_lines: added.iter().map(|s| s.to_string()).collect(),
            deleted_lines: vec![],
            label: 0,
            expert_features: None,
        }
    }

    #[test]
    fn rmi_example_probabilities() {
        let pool = vec![commit("a", "one", &["x"]), commit("b", "two", &["y"]), commit("c", "three", &["z"])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kept = make_rmi_example(&pool[0], &pool, 0.0, &mut rng).unwrap();
        assert_eq!(kept.rmi_label, 1);
        assert_eq!(kept.commit, pool[0]);
        assert!(kept.donor_commit_id.is_none());
        for _ in 0..50 {
            let r = make_rmi_example(&pool[0], &pool, 1.0, &mut rng).unwrap();
            assert_eq!(r.rmi_label, 0);
            let donor = r.donor_commit_id.unwrap();
            assert_ne!(donor, "a");
            assert_ne!(r.commit.message, "one");
            assert_eq!(r.commit.added_lines, pool[0].added_lines);
        }
        let err = make_rmi_example(&pool[0], &pool[..1], 0.5, &mut rng).unwrap_err();
        assert_eq!(err.to_string(), "cannot draw non-corresponding message");
    }

    #[test]
    fn rmi_replacement_frequency() {
        let pool: Vec<_> = (0..10).map(|i| commit(&i.to_string(), &format!("m{i}"), &["x"])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let replaced = (0..10_000)
            .filter(|i| make_rmi_example(&pool[i % 10], &pool, 0.5, &mut rng).unwrap().rmi_label == 0)
            .count();
        let frac = replaced as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn sampler_mapping() {
        let s = ObjectiveSchedule {
            mlm_weight: 2,
            rmi_weight: 1,
            seed: 0,
        };
        assert_eq!(objective_for_draw(&s, 0.5).unwrap(), Objective::Mlm);
        assert_eq!(objective_for_draw(&s, 0.9).unwrap(), Objective::Rmi);
        let zero = ObjectiveSchedule {
            mlm_weight: 0,
            rmi_weight: 0,
            seed: 0,
        };
        assert!(sample_objective(&zero, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let only_rmi = ObjectiveSchedule { mlm_weight: 0, ..s };
        assert_eq!(objective_for_draw(&only_rmi, 0.0).unwrap(), Objective::Rmi);
    }

    #[test]
    fn loss_values() {
        let v = 7usize;
        let uniform = Array2::zeros((3, v));
        assert!((mlm_loss(uniform.view(), &[0, 3, 6]).unwrap() - (v as f64).ln()).abs() < 1e-12);
        let mut sharp = Array2::zeros((1, v));
        sharp[[0, 2]] = 30.0;
        assert!(mlm_loss(sharp.view(), &[2]).unwrap() < 1e-3);
        // probabilities 0.5 and 0.25 on the true tokens
        let two = array![[0.0, 0.0, f64::NEG_INFINITY], [(2f64).ln(), 0.0, 0.0]];
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((mlm_loss(two.view(), &[0, 1]).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.0397).abs() < 1e-4);
        assert!(mlm_loss(Array2::zeros((0, v)).view(), &[]).is_err());

        assert!((rmi_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-4);
        assert!((rmi_loss(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-4);
        assert!((rmi_loss(0.9, 1) - 0.1054).abs() < 1e-4);
        let clamped = rmi_loss(1.0, 0);
        assert!(clamped.is_finite() && (clamped - 16.118).abs() < 1e-3);
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            max_len: 16,
            vocab_size: 20,
            dropout: 0.0,
            init_std: 0.5,
            seed: 3,
        }
    }

    #[derive(Clone)]
    struct RmiStack(PretrainModel);

    impl Params for RmiStack {
        fn tensors(&self) -> Vec<&[f64]> {
            let mut v = self.0.encoder.tensors();
            v.extend(self.0.rmi_head.tensors());
            v
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            let mut v = self.0.encoder.tensors_mut();
            v.extend(self.0.rmi_head.tensors_mut());
            v
        }
    }

    #[derive(Clone)]
    struct MlmStack(PretrainModel);

    impl Params for MlmStack {
        fn tensors(&self) -> Vec<&[f64]> {
            let mut v = self.0.encoder.tensors();
            v.extend(self.0.mlm_head.tensors());
            v
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            let mut v = self.0.encoder.tensors_mut();
            v.extend(self.0.mlm_head.tensors_mut());
            v
        }
    }

    fn tiny_seq() -> TokenSequence {
        TokenSequence {
            ids: vec![2, 9, 4, 10, 11, 5, 12, 0],
            attention_mask: vec![1, 1, 1, 1, 1, 1, 1, 0],
            mlm_labels: None,
            add_positions: vec![2],
            del_positions: vec![5],
        }
    }

    #[test]
    fn rmi_stack_gradients() {
        let model = PretrainModel::new(tiny()).unwrap();
        let seq = tiny_seq();
        for label in [0u8, 1] {
            let mut enc_g = model.encoder.zeros_like();
            let mut head_g = model.rmi_head.zeros_like();
            model
                .rmi_example(&seq, label, None, 1.0, Some((&mut enc_g, &mut head_g)))
                .unwrap();
            let mut analytic = RmiStack(model.clone());
            analytic.0.encoder = enc_g;
            analytic.0.rmi_head = head_g;
            let numeric = gradcheck::numeric_grad(&RmiStack(model.clone()), 1e-5, |m| {
                m.0.rmi_example(&seq, label, None, 0.0, None).unwrap().0
            });
            gradcheck::assert_grads_match(&analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn mlm_stack_gradients() {
        let model = PretrainModel::new(tiny()).unwrap();
        let mut seq = tiny_seq();
        seq.mlm_labels = Some(vec![None, Some(9), None, Some(10), None, None, Some(12), None]);
        seq.ids[1] = 3;
        seq.ids[3] = 3;
        seq.ids[6] = 3;
        let mut enc_g = model.encoder.zeros_like();
        let mut head_g = model.mlm_head.zeros_like();
        model
            .mlm_example(&seq, None, 1.0, Some((&mut enc_g, &mut head_g)))
            .unwrap();
        let mut analytic = MlmStack(model.clone());
        analytic.0.encoder = enc_g;
        analytic.0.mlm_head = head_g;
        let numeric = gradcheck::numeric_grad(&MlmStack(model.clone()), 1e-5, |m| {
            m.0.mlm_example(&seq, None, 0.0, None).unwrap().0
        });
        gradcheck::assert_grads_match(&analytic, &numeric, 1e-4);
    }

    fn tiny_corpus() -> Vec<CodeCommit> {
        (0..12)
            .map(|i| commit(&format!("c{i}"), &format!("msg{} common", i % 5), &[&format!("v{} = {}", i % 4, i % 3)]))
            .collect()
    }

    fn tiny_settings() -> PretrainSettings {
        PretrainSettings {
            epochs: 2,
            batch_size: 4,
            peak_lr: 1e-3,
            ..PretrainSettings::default()
        }
    }

    #[test]
    fn objective_isolation() {
        let corpus = tiny_corpus();
        let vocab = build_vocabulary(&corpus, 100, &RuleTokenizer).unwrap();
        let mut cfg = tiny();
        cfg.vocab_size = vocab.len();
        let model = PretrainModel::new(cfg.clone()).unwrap();
        let fresh = || PretrainCheckpoint {
            encoder_opt: Adam::new(&model.encoder, AdamConfig::default()),
            mlm_opt: Adam::new(&model.mlm_head, AdamConfig::default()),
            rmi_opt: Adam::new(&model.rmi_head, AdamConfig::default()),
            model: model.clone(),
            settings: tiny_settings(),
            schedule: ObjectiveSchedule {
                mlm_weight: 2,
                rmi_weight: 1,
                seed: 0,
            },
            encoder_config_hash: cfg.hash(),
            epochs_completed: 0,
            step: 0,
            log: vec![],
        };
        let ids: Vec<usize> = (0..4).collect();
        let settings = tiny_settings();

        let mut state = fresh();
        let batch = prepare_batch(Objective::Mlm, &ids, &corpus, &vocab, &settings, 0, 0, cfg.max_len).unwrap();
        train_step(&mut state, &batch, 0, 0, 1e-2, 1.0).unwrap().unwrap();
        assert_eq!(state.model.rmi_head, model.rmi_head);
        assert_ne!(state.model.mlm_head, model.mlm_head);
        assert_ne!(state.model.encoder, model.encoder);

        let mut state = fresh();
        let batch = prepare_batch(Objective::Rmi, &ids, &corpus, &vocab, &settings, 0, 0, cfg.max_len).unwrap();
        train_step(&mut state, &batch, 0, 0, 1e-2, 1.0).unwrap().unwrap();
        assert_eq!(state.model.mlm_head, model.mlm_head);
        assert_ne!(state.model.rmi_head, model.rmi_head);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = tiny_corpus();
        let vocab = build_vocabulary(&corpus, 100, &RuleTokenizer).unwrap();
        let mut cfg = tiny();
        cfg.vocab_size = vocab.len();
        cfg.dropout = 0.1;
        let settings = tiny_settings();
        let full = run_pretraining(&cfg, &settings, 5, &corpus, &vocab, None, None).unwrap();

        let model = PretrainModel::new(cfg.clone()).unwrap();
        let mut state = PretrainCheckpoint {
            encoder_opt: Adam::new(&model.encoder, AdamConfig::default()),
            mlm_opt: Adam::new(&model.mlm_head, AdamConfig::default()),
            rmi_opt: Adam::new(&model.rmi_head, AdamConfig::default()),
            model,
            settings: settings.clone(),
            schedule: ObjectiveSchedule {
                mlm_weight: settings.mlm_weight,
                rmi_weight: settings.rmi_weight,
                seed: 5,
            },
            encoder_config_hash: cfg.hash(),
            epochs_completed: 0,
            step: 0,
            log: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        run_epochs(&mut state, &settings, 5, &corpus, &vocab, cfg.max_len, Some(dir.path()), 1).unwrap();
        let ckpt = PretrainCheckpoint::load(dir.path()).unwrap();
        assert_eq!(ckpt.epochs_completed, 1);
        let resumed = run_pretraining(&cfg, &settings, 5, &corpus, &vocab, None, Some(ckpt)).unwrap();
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.log, full.log);
    }

    #[test]
    fn resume_rejects_mismatched_settings() {
        let corpus = tiny_corpus();
        let vocab = build_vocabulary(&corpus, 100, &RuleTokenizer).unwrap();
        let mut cfg = tiny();
        cfg.vocab_size = vocab.len();
        let dir = tempfile::tempdir().unwrap();
        let settings = tiny_settings();
        run_pretraining(&cfg, &settings, 5, &corpus, &vocab, Some(dir.path()), None).unwrap();
        let ckpt = PretrainCheckpoint::load(dir.path()).unwrap();
        let mut other = settings.clone();
        other.peak_lr = 0.1;
        assert!(matches!(
            run_pretraining(&cfg, &other, 5, &corpus, &vocab, None, Some(ckpt)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn ordered_modes_use_one_objective_per_half() {
        let corpus = tiny_corpus();
        let vocab = build_vocabulary(&corpus, 100, &RuleTokenizer).unwrap();
        let mut cfg = tiny();
        cfg.vocab_size = vocab.len();
        let settings = PretrainSettings {
            order: OrderMode::RmiThenMlm,
            epochs: 4,
            ..tiny_settings()
        };
        let out = run_pretraining(&cfg, &settings, 1, &corpus, &vocab, None, None).unwrap();
        let per_epoch = 3;
        for l in &out.log {
            let expect = if (l.step as usize) < 2 * per_epoch { Objective::Rmi } else { Objective::Mlm };
            assert_eq!(l.objective, expect);
        }
        assert_eq!(out.log.len(), 12);
    }
}
