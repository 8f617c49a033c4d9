//! Vocabulary construction, bi-modal commit serialization and MLM masking.
//!
//! A serialized commit has the layout
//!
//! ```text
//! [CLS] message-tokens ([ADD] line-tokens)* ([DEL] line-tokens)* [PAD]*
//! ```
//!
//! truncated so that `[CLS]` always survives, the message takes at most a
//! quarter of `max_len`, and added then deleted lines fill what is left
//! (a line may be cut part way).

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CodeCommit;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const MASK: u32 = 3;
pub const ADD: u32 = 4;
pub const DEL: u32 = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "[ADD]", "[DEL]"];
pub const NUM_SPECIALS: u32 = SPECIAL_TOKENS.len() as u32;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

/// Splits raw text into tokens. Implementations may substitute a trained
/// subword model for the built-in rule.
pub trait Tokenizer: Send + Sync {
    fn message_tokens(&self, text: &str) -> Vec<String>;
    fn code_tokens(&self, line: &str) -> Vec<String>;
}

/// Whitespace split, then every non-alphanumeric, non-underscore character
/// becomes its own token. Message tokens are lowercased; code keeps case.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleTokenizer;

impl RuleTokenizer {
    fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut current = String::new();
            for ch in word.chars() {
                if ch.is_alphanumeric() || ch == '_' {
                    current.push(ch);
                } else {
                    if !current.is_empty() {
                        out.push(std::mem::take(&mut current));
                    }
                    out.push(ch.to_string());
                }
            }
            if !current.is_empty() {
                out.push(current);
            }
        }
        out
    }
}

impl Tokenizer for RuleTokenizer {
    fn message_tokens(&self, text: &str) -> Vec<String> {
        Self::split(&text.to_lowercase())
    }

    fn code_tokens(&self, line: &str) -> Vec<String> {
        Self::split(line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Serializes as a JSON object `{token: id}`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), serde_json::Value::from(i as u64)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_value(value.clone())?;
        let mut id_to_token = vec![None; map.len()];
        for (tok, &id) in &map {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::invalid(format!("vocabulary id {id} out of range")))?;
            if slot.is_some() {
                return Err(Error::invalid(format!("vocabulary id {id} used twice")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::invalid(format!("special {special} must have id {i}")));
            }
        }
        Ok(Self {
            token_to_id: map,
            id_to_token,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_json())?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Vocabulary::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// Specials plus the most frequent corpus tokens (ties broken
/// lexicographically), at most `size_cap` entries in total.
pub fn build_vocabulary(
    corpus: &[CodeCommit],
    size_cap: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    if size_cap <= NUM_SPECIALS as usize {
        return Err(Error::invalid(format!(
            "vocabulary size cap must exceed {NUM_SPECIALS}"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for c in corpus {
        let toks = tokenizer.message_tokens(&c.message).into_iter().chain(
            c.added_lines
                .iter()
                .chain(&c.deleted_lines)
                .flat_map(|l| tokenizer.code_tokens(l)),
        );
        for t in toks {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut vocab = Vocabulary::with_specials();
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !vocab.token_to_id.contains_key(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (tok, _) in ranked.into_iter().take(size_cap - NUM_SPECIALS as usize) {
        let id = vocab.id_to_token.len() as u32;
        vocab.token_to_id.insert(tok.clone(), id);
        vocab.id_to_token.push(tok);
    }
    Ok(vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Original id at masked positions, `None` (ignore) elsewhere.
    pub mlm_labels: Option<Vec<Option<u32>>>,
    pub add_positions: Vec<usize>,
    pub del_positions: Vec<usize>,
}

impl TokenSequence {
    pub const CLS_POSITION: usize = 0;

    /// Number of real (unpadded) tokens.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The sequence with padding removed.
    pub fn unpadded(&self) -> TokenSequence {
        let n = self.real_len();
        TokenSequence {
            ids: self.ids[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
            mlm_labels: self.mlm_labels.as_ref().map(|l| l[..n].to_vec()),
            add_positions: self.add_positions.clone(),
            del_positions: self.del_positions.clone(),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mlm_labels
            .as_ref()
            .map_or(0, |l| l.iter().filter(|x| x.is_some()).count())
    }
}

/// Tokenizes and lays out one commit with the default rule tokenizer.
pub fn serialize_commit(commit: &CodeCommit, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    serialize_commit_with(&RuleTokenizer, commit, vocab, max_len)
}

pub fn serialize_commit_with(
    tokenizer: &dyn Tokenizer,
    commit: &CodeCommit,
    vocab: &Vocabulary,
    max_len: usize,
) -> TokenSequence {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    let message_budget = max_len / 4;
    ids.extend(
        tokenizer
            .message_tokens(&commit.message)
            .iter()
            .take(message_budget.min(max_len - 1))
            .map(|t| vocab.id(t)),
    );

    let mut add_positions = Vec::new();
    let mut del_positions = Vec::new();
    let channels = [
        (&commit.added_lines, ADD, &mut add_positions),
        (&commit.deleted_lines, DEL, &mut del_positions),
    ];
    'outer: for (lines, marker, positions) in channels {
        for line in lines {
            if ids.len() >= max_len {
                break 'outer;
            }
            positions.push(ids.len());
            ids.push(marker);
            for tok in tokenizer.code_tokens(line) {
                if ids.len() >= max_len {
                    break 'outer;
                }
                ids.push(vocab.id(&tok));
            }
        }
    }

    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..real].fill(1);
    TokenSequence {
        ids,
        attention_mask,
        mlm_labels: None,
        add_positions,
        del_positions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Every chosen position becomes `[MASK]`.
    #[default]
    Pure,
    /// 80% `[MASK]`, 10% random non-special token, 10% unchanged.
    Bert,
}

/// Number of positions to mask among `eligible` candidates.
pub fn mask_count(eligible: usize, rate: f64) -> usize {
    if eligible == 0 || rate <= 0.0 {
        return 0;
    }
    ((rate * eligible as f64).round() as usize).clamp(1, eligible)
}

/// Pure `[MASK]` substitution over real, non-special positions.
pub fn apply_mlm_mask<R: Rng + ?Sized>(seq: &TokenSequence, rate: f64, rng: &mut R) -> TokenSequence {
    apply_mlm_mask_with(seq, rate, MaskStrategy::Pure, 0, rng)
}

/// Masking with a selectable corruption strategy. `vocab_size` is only used
/// by [`MaskStrategy::Bert`] to draw random replacement tokens.
pub fn apply_mlm_mask_with<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    strategy: MaskStrategy,
    vocab_size: usize,
    rng: &mut R,
) -> TokenSequence {
    assert!(seq.mlm_labels.is_none(), "sequence is already masked");
    let eligible: Vec<usize> = (0..seq.ids.len())
        .filter(|&i| seq.attention_mask[i] == 1 && !is_special(seq.ids[i]))
        .collect();
    let m = mask_count(eligible.len(), rate);
    let mut out = seq.clone();
    let mut labels = vec![None; seq.ids.len()];
    if m > 0 {
        let mut chosen: Vec<usize> = index::sample(rng, eligible.len(), m)
            .into_iter()
            .map(|k| eligible[k])
            .collect();
        chosen.sort_unstable();
        for pos in chosen {
            labels[pos] = Some(seq.ids[pos]);
            out.ids[pos] = match strategy {
                MaskStrategy::Pure => MASK,
                MaskStrategy::Bert => {
                    let u: f64 = rng.random();
                    if u < 0.8 || vocab_size <= NUM_SPECIALS as usize {
                        MASK
                    } else if u < 0.9 {
                        rng.random_range(NUM_SPECIALS..vocab_size as u32)
                    } else {
                        seq.ids[pos]
                    }
                }
            };
        }
    }
    out.mlm_labels = Some(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn commit(message: &str, added: &[&str], deleted: &[&str]) -> CodeCommit {
        CodeCommit {
            commit_id: "c".into(),
            project: "p".into(),
            timestamp: 0,
            author: "a".into(),
            message: message.into(),
            added_lines: added.iter().map(|s| s.to_string()).collect(),
            deleted_lines: deleted.iter().map(|s| s.to_string()).collect(),
            label: 0,
            expert_features: None,
        }
    }

    #[test]
    fn rule_tokenizer_splits_operators() {
        let t = RuleTokenizer;
        assert_eq!(t.code_tokens("a=b+1;"), vec!["a", "=", "b", "+", "1", ";"]);
        assert_eq!(t.code_tokens("  foo_bar(x) "), vec!["foo_bar", "(", "x", ")"]);
        assert_eq!(t.message_tokens("Fix NPE"), vec!["fix", "npe"]);
        assert_eq!(t.code_tokens("NPE"), vec!["NPE"]);
    }

    #[test]
    fn small_corpus_vocabulary() {
        let c = commit("a b", &[], &[]);
        let v = build_vocabulary(std::slice::from_ref(&c), 100, &RuleTokenizer).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), 7);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(build_vocabulary(&[c], 100, &RuleTokenizer).unwrap(), v);
        assert!(build_vocabulary(&[], 100, &RuleTokenizer).is_err());
    }

    #[test]
    fn vocabulary_ranks_by_frequency_then_lexicographically() {
        let c = commit("b b c a a", &["d"], &[]);
        let v = build_vocabulary(&[c], 8, &RuleTokenizer).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.token(7), Some("b"));
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = build_vocabulary(&[commit("x y", &["z"], &[])], 50, &RuleTokenizer).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(v.to_json()["[ADD]"], 4);
    }

    #[test]
    fn layout_matches_cls_add_del_convention() {
        let c = commit("fix", &["a=1"], &["a=0"]);
        let v = build_vocabulary(std::slice::from_ref(&c), 100, &RuleTokenizer).unwrap();
        let s = serialize_commit(&c, &v, 16);
        let expect: Vec<u32> = vec![
            CLS,
            v.id("fix"),
            ADD,
            v.id("a"),
            v.id("="),
            v.id("1"),
            DEL,
            v.id("a"),
            v.id("="),
            v.id("0"),
        ];
        assert_eq!(&s.ids[..10], &expect[..]);
        assert!(s.ids[10..].iter().all(|&i| i == PAD));
        assert_eq!(s.real_len(), 10);
        assert_eq!(s.add_positions, vec![2]);
        assert_eq!(s.del_positions, vec![6]);
    }

    #[test]
    fn message_only_commit() {
        let c = commit("doc", &[], &[]);
        let v = build_vocabulary(std::slice::from_ref(&c), 100, &RuleTokenizer).unwrap();
        let s = serialize_commit(&c, &v, 6);
        assert_eq!(s.ids, vec![CLS, v.id("doc"), PAD, PAD, PAD, PAD]);
        assert_eq!(s.attention_mask, vec![1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_message_has_no_tokens_after_cls() {
        let c = commit("", &["x"], &[]);
        let v = build_vocabulary(std::slice::from_ref(&c), 100, &RuleTokenizer).unwrap();
        let s = serialize_commit(&c, &v, 4);
        assert_eq!(&s.ids[..3], &[CLS, ADD, v.id("x")]);
    }

    #[test]
    fn truncation_respects_message_budget() {
        let c = commit("one two three four", &["a b c", "d"], &["e"]);
        let v = build_vocabulary(std::slice::from_ref(&c), 100, &RuleTokenizer).unwrap();
        let s = serialize_commit(&c, &v, 8);
        // budget 8/4 = 2 message tokens, then "[ADD] a b c [ADD]" fills the rest
        let expect = vec![CLS, v.id("one"), v.id("two"), ADD, v.id("a"), v.id("b"), v.id("c"), ADD];
        assert_eq!(s.ids, expect);
        assert_eq!(s.add_positions, vec![3, 7]);
        assert!(s.del_positions.is_empty());
        let s2 = serialize_commit(&c, &v, 2);
        assert_eq!(s2.ids, vec![CLS, ADD]);
    }

    fn seq_with_eligible(n: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend((0..n).map(|i| NUM_SPECIALS + i as u32));
        ids.push(PAD);
        let mut mask = vec![1u8; ids.len()];
        *mask.last_mut().unwrap() = 0;
        TokenSequence {
            ids,
            attention_mask: mask,
            mlm_labels: None,
            add_positions: vec![],
            del_positions: vec![],
        }
    }

    #[test]
    fn masking_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = seq_with_eligible(20);
        let m = apply_mlm_mask(&s, 0.15, &mut rng);
        let labels = m.mlm_labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|l| l.is_some()).count(), 3);
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(orig) => {
                    assert_eq!(m.ids[i], MASK);
                    assert_eq!(*orig, s.ids[i]);
                }
                None => assert_eq!(m.ids[i], s.ids[i]),
            }
        }

        let z = apply_mlm_mask(&s, 0.0, &mut rng);
        assert_eq!(z.ids, s.ids);
        assert_eq!(z.masked_count(), 0);

        let only_specials = seq_with_eligible(0);
        assert_eq!(apply_mlm_mask(&only_specials, 0.5, &mut rng).masked_count(), 0);
        assert_eq!(mask_count(3, 0.01), 1);
    }

    #[test]
    fn masking_is_seed_reproducible() {
        let s = seq_with_eligible(40);
        let a = apply_mlm_mask(&s, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        let b = apply_mlm_mask(&s, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn bert_strategy_keeps_labels_at_chosen_positions() {
        let s = seq_with_eligible(200);
        let m = apply_mlm_mask_with(&s, 0.5, MaskStrategy::Bert, 300, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m.masked_count(), 100);
        let masks = m.ids.iter().filter(|&&i| i == MASK).count();
        assert!(masks > 60 && masks < 95, "{masks}");
    }

    proptest! {
        #[test]
        fn specials_never_masked(
            msg in "[a-z ]{0,30}",
            added in prop::collection::vec("[a-z=+ ]{0,15}", 0..6),
            deleted in prop::collection::vec("[a-z=+ ]{0,15}", 0..6),
            max_len in 2usize..40,
            seed in any::<u64>(),
        ) {
            let added: Vec<&str> = added.iter().map(String::as_str).collect();
            let deleted: Vec<&str> = deleted.iter().map(String::as_str).collect();
            let c = commit(&msg, &added, &deleted);
            let v = build_vocabulary(std::slice::from_ref(&c), 1000, &RuleTokenizer).unwrap();
            let s = serialize_commit(&c, &v, max_len);
            prop_assert_eq!(s.ids.len(), max_len);
            prop_assert_eq!(s.ids[0], CLS);
            prop_assert_eq!(s.ids.iter().filter(|&&i| i == CLS).count(), 1);
            prop_assert_eq!(s.ids.iter().filter(|&&i| i == ADD).count(), s.add_positions.len());
            prop_assert_eq!(s.ids.iter().filter(|&&i| i == DEL).count(), s.del_positions.len());
            let m = apply_mlm_mask(&s, 0.15, &mut ChaCha8Rng::seed_from_u64(seed));
            for i in 0..s.ids.len() {
                if is_special(s.ids[i]) {
                    prop_assert_eq!(m.ids[i], s.ids[i]);
                }
            }
        }
    }
}
