//! Bidirectional post-LayerNorm transformer encoder.
//!
//! Token embedding plus learned absolute position embedding, then
//! `num_layers` blocks of masked multi-head self-attention and a GELU
//! feed-forward network, each wrapped in a residual connection followed by
//! layer normalization. Keys at padded positions (attention mask 0) receive
//! zero attention weight.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, normal_matrix, slice2, slice2_mut, LayerNorm, LayerNormCache, Linear, Params};
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 128,
            ff_dim: 256,
            max_len: 128,
            vocab_size: 5000,
            dropout: 0.1,
            init_std: 0.02,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    /// RoBERTa-base dimensions.
    pub fn paper_scale() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_dim: 768,
            ff_dim: 3072,
            max_len: 512,
            vocab_size: 50_267,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                problems.push(format!("encoder.{name} must be positive"));
            }
        }
        if self.num_heads > 0 && !self.hidden_dim.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "encoder.hidden_dim {} is not divisible by encoder.num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push("encoder.dropout must lie in [0, 1)".into());
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            problems.push("encoder.init_std must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (h, f, std) = (cfg.hidden_dim, cfg.ff_dim, cfg.init_std);
        Self {
            query: Linear::new(h, h, std, rng),
            key: Linear::new(h, h, std, rng),
            value: Linear::new(h, h, std, rng),
            attn_out: Linear::new(h, h, std, rng),
            attn_norm: LayerNorm::new(h),
            ff_in: Linear::new(h, f, std, rng),
            ff_out: Linear::new(f, h, std, rng),
            ff_norm: LayerNorm::new(h),
        }
    }
}

impl Params for EncoderLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for lin in [&self.query, &self.key, &self.value, &self.attn_out] {
            v.extend(lin.tensors());
        }
        v.extend(self.attn_norm.tensors());
        v.extend(self.ff_in.tensors());
        v.extend(self.ff_out.tensors());
        v.extend(self.ff_norm.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        v.extend(self.query.tensors_mut());
        v.extend(self.key.tensors_mut());
        v.extend(self.value.tensors_mut());
        v.extend(self.attn_out.tensors_mut());
        v.extend(self.attn_norm.tensors_mut());
        v.extend(self.ff_in.tensors_mut());
        v.extend(self.ff_out.tensors_mut());
        v.extend(self.ff_norm.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

impl Params for Encoder {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![slice2(&self.token_embedding), slice2(&self.position_embedding)];
        v.extend(self.embedding_norm.tensors());
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            slice2_mut(&mut self.token_embedding),
            slice2_mut(&mut self.position_embedding),
        ];
        v.extend(self.embedding_norm.tensors_mut());
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v
    }
}

/// Activations kept from a forward pass for [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<u32>,
    embedding_norm: LayerNormCache,
    embedding_dropout: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_dropout: Option<Array2<f64>>,
    attn_norm: LayerNormCache,
    h1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_dropout: Option<Array2<f64>>,
    ff_norm: LayerNormCache,
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, h, std) = (config.vocab_size, config.hidden_dim, config.init_std);
        let token_embedding = normal_matrix(v, h, std, &mut rng);
        let position_embedding = normal_matrix(config.max_len, h, std, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::new(&config, &mut rng))
            .collect();
        Ok(Self {
            embedding_norm: LayerNorm::new(h),
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn check_input(&self, ids: &[u32], mask: &[u8]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if mask.len() != ids.len() {
            return Err(Error::invalid("attention mask length differs from ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if mask.first() != Some(&1) {
            return Err(Error::invalid("position 0 must be a real token"));
        }
        Ok(())
    }

    /// Hidden states (len x H) for one sequence, in inference mode.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        Ok(self.forward(&seq.ids, &seq.attention_mask, None)?.0)
    }

    /// Forward pass. Passing an RNG enables dropout (training mode).
    pub fn forward(
        &self,
        ids: &[u32],
        attention_mask: &[u8],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        self.check_input(ids, attention_mask)?;
        let n = ids.len();
        let h = self.config.hidden_dim;
        let p = self.config.dropout;

        let mut emb = Array2::zeros((n, h));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = emb.row_mut(i);
            row += &self.token_embedding.row(id as usize);
            row += &self.position_embedding.row(i);
        }
        let (x, embedding_norm) = self.embedding_norm.forward(emb.view());
        let embedding_dropout = dropout_mask((n, h), p, dropout_rng.as_deref_mut());
        let mut x = apply_mask(x, &embedding_dropout);

        let key_bias: Vec<f64> = attention_mask
            .iter()
            .map(|&m| if m == 1 { 0.0 } else { f64::NEG_INFINITY })
            .collect();

        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = self.layer_forward(layer, x, &key_bias, dropout_rng.as_deref_mut());
            layers.push(cache);
            x = out;
        }
        Ok((
            x,
            EncoderCache {
                ids: ids.to_vec(),
                embedding_norm,
                embedding_dropout,
                layers,
            },
        ))
    }

    fn layer_forward(
        &self,
        layer: &EncoderLayer,
        input: Array2<f64>,
        key_bias: &[f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, LayerCache) {
        let n = input.nrows();
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = self.config.dropout;

        let q = layer.query.forward(input.view());
        let k = layer.key.forward(input.view());
        let v = layer.value.forward(input.view());
        let mut context = Array2::zeros((n, self.config.hidden_dim));
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            for mut row in scores.rows_mut() {
                let mut max = f64::NEG_INFINITY;
                for (s, b) in row.iter_mut().zip(key_bias) {
                    *s = *s * scale + b;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                row.mapv_inplace(|s| {
                    let e = (s - max).exp();
                    sum += e;
                    e
                });
                row.mapv_inplace(|e| e / sum);
            }
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }

        let attn = layer.attn_out.forward(context.view());
        let attn_dropout = dropout_mask(attn.dim(), p, rng.as_deref_mut());
        let attn = apply_mask(attn, &attn_dropout);
        let (h1, attn_norm) = layer.attn_norm.forward((&input + &attn).view());

        let ff_pre = layer.ff_in.forward(h1.view());
        let ff_act = ff_pre.mapv(gelu);
        let ff = layer.ff_out.forward(ff_act.view());
        let ff_dropout = dropout_mask(ff.dim(), p, rng);
        let ff = apply_mask(ff, &ff_dropout);
        let (out, ff_norm) = layer.ff_norm.forward((&h1 + &ff).view());

        (
            out,
            LayerCache {
                input,
                q,
                k,
                v,
                probs,
                context,
                attn_dropout,
                attn_norm,
                h1,
                ff_pre,
                ff_act,
                ff_dropout,
                ff_norm,
            },
        )
    }

    /// Backpropagates dL/d(hidden) through the encoder, accumulating
    /// parameter gradients into `grad`.
    pub fn backward(&self, cache: &EncoderCache, d_hidden: ArrayView2<f64>, grad: &mut Encoder) {
        let mut d = d_hidden.to_owned();
        for ((layer, lc), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            d = self.layer_backward(layer, lc, d, lg);
        }
        let d = apply_mask(d, &cache.embedding_dropout);
        let d_emb = self
            .embedding_norm
            .backward(&cache.embedding_norm, d.view(), &mut grad.embedding_norm);
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut tok = grad.token_embedding.row_mut(id as usize);
            tok += &d_emb.row(i);
            let mut pos = grad.position_embedding.row_mut(i);
            pos += &d_emb.row(i);
        }
    }

    fn layer_backward(
        &self,
        layer: &EncoderLayer,
        c: &LayerCache,
        d_out: Array2<f64>,
        g: &mut EncoderLayer,
    ) -> Array2<f64> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let d_res2 = layer.ff_norm.backward(&c.ff_norm, d_out.view(), &mut g.ff_norm);
        let d_ff = apply_mask(d_res2.clone(), &c.ff_dropout);
        let d_act = layer.ff_out.backward(c.ff_act.view(), d_ff.view(), &mut g.ff_out);
        let d_pre = d_act * &c.ff_pre.mapv(gelu_grad);
        let d_h1 = d_res2 + layer.ff_in.backward(c.h1.view(), d_pre.view(), &mut g.ff_in);

        let d_res1 = layer.attn_norm.backward(&c.attn_norm, d_h1.view(), &mut g.attn_norm);
        let d_attn = apply_mask(d_res1.clone(), &c.attn_dropout);
        let d_context = layer.attn_out.backward(c.context.view(), d_attn.view(), &mut g.attn_out);

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (hd, probs) in c.probs.iter().enumerate() {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let d_ctx_h = d_context.slice(cols);
            let d_probs = d_ctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&d_ctx_h));
            let row_dot = (&d_probs * probs).sum_axis(Axis(1));
            let mut d_scores = d_probs;
            d_scores -= &row_dot.insert_axis(Axis(1));
            d_scores *= probs;
            d_scores *= scale;
            dq.slice_mut(cols).assign(&d_scores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&c.q.slice(cols)));
        }

        let x = c.input.view();
        let mut d_in = d_res1;
        d_in += &layer.query.backward(x, dq.view(), &mut g.query);
        d_in += &layer.key.backward(x, dk.view(), &mut g.key);
        d_in += &layer.value.backward(x, dv.view(), &mut g.value);
        d_in
    }
}

/// The `[CLS]` row of a hidden-state matrix.
pub fn change_representation(hidden: &Array2<f64>) -> Result<Array1<f64>> {
    if hidden.nrows() == 0 {
        return Err(Error::invalid("empty hidden-state matrix"));
    }
    Ok(hidden.row(TokenSequence::CLS_POSITION).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::tokenize::{CLS, PAD};

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            max_len: 12,
            vocab_size: 20,
            dropout: 0.0,
            init_std: 0.5,
            seed: 11,
        }
    }

    fn seq(ids: &[u32], real: usize) -> TokenSequence {
        let mut mask = vec![0u8; ids.len()];
        mask[..real].fill(1);
        TokenSequence {
            ids: ids.to_vec(),
            attention_mask: mask,
            mlm_labels: None,
            add_positions: vec![],
            del_positions: vec![],
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let s = seq(&[CLS, 7, 8, 9, PAD], 4);
        let h = enc.encode(&s).unwrap();
        assert_eq!(h.dim(), (5, 8));
        let again = Encoder::new(tiny_config()).unwrap().encode(&s).unwrap();
        assert_eq!(h, again);
        assert_eq!(change_representation(&h).unwrap().len(), 8);
        assert!(change_representation(&Array2::zeros((0, 8))).is_err());
    }

    #[test]
    fn padding_does_not_leak() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let short = enc.encode(&seq(&[CLS, 7, 8, 9], 4)).unwrap();
        let padded = enc.encode(&seq(&[CLS, 7, 8, 9, PAD, PAD, PAD], 4)).unwrap();
        let other_pad = enc.encode(&seq(&[CLS, 7, 8, 9, 13, 19, 4], 4)).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                assert!((short[[i, j]] - padded[[i, j]]).abs() < 1e-12);
                assert!((padded[[i, j]] - other_pad[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let enc = Encoder::new(tiny_config()).unwrap();
        assert!(enc.encode(&seq(&[CLS, 25], 2)).is_err());
        assert!(enc.encode(&seq(&[CLS; 13], 13)).is_err());
        let mut bad = tiny_config();
        bad.num_heads = 3;
        assert!(Encoder::new(bad).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let s = seq(&[CLS, 7, 8, 9, 3, PAD], 5);
        let weights = normal_matrix(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let loss = |e: &Encoder| {
            let (h, _) = e.forward(&s.ids, &s.attention_mask, None).unwrap();
            (&h * &weights).sum()
        };
        let (_, cache) = enc.forward(&s.ids, &s.attention_mask, None).unwrap();
        let mut grad = enc.zeros_like();
        enc.backward(&cache, weights.view(), &mut grad);
        let numeric = gradcheck::numeric_grad(&enc, 1e-5, loss);
        gradcheck::assert_grads_match(&grad, &numeric, 1e-4);
    }

    #[test]
    fn dropout_gradients_match_with_fixed_masks() {
        let mut cfg = tiny_config();
        cfg.dropout = 0.3;
        let enc = Encoder::new(cfg).unwrap();
        let s = seq(&[CLS, 7, 8, 9], 4);
        let weights = normal_matrix(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let run = |e: &Encoder| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            e.forward(&s.ids, &s.attention_mask, Some(&mut rng)).unwrap()
        };
        let (_, cache) = run(&enc);
        let mut grad = enc.zeros_like();
        enc.backward(&cache, weights.view(), &mut grad);
        let numeric = gradcheck::numeric_grad(&enc, 1e-5, |e| (&run(e).0 * &weights).sum());
        gradcheck::assert_grads_match(&grad, &numeric, 1e-4);
    }
}
