//! Constructed corpora with known structure, for smoke tests, benchmarks and
//! sanity checks of the training objectives.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::CodeCommit;
use crate::features::{ExpertFeatureVector, NUM_FEATURES};

fn commit(id: String, message: String, added: Vec<String>, deleted: Vec<String>, label: u8) -> CodeCommit {
    CodeCommit {
        commit_id: id,
        project: "synthetic".into(),
        timestamp: 0,
        author: "dev@example.com".into(),
        message,
        added_lines: added,
        deleted_lines: deleted,
        label,
        expert_features: None,
    }
}

/// `n` commits whose tokens are unique to each commit: message
/// `alpha_i beta_i`, added line `x_i = y_i + z_i`. Every masked token is
/// recoverable from the rest of its own commit, so MLM can be driven to
/// (near) zero loss.
pub fn memorization_corpus(n: usize) -> Vec<CodeCommit> {
    (0..n)
        .map(|i| {
            commit(
                format!("m{i:04}"),
                format!("alpha_{i} beta_{i}"),
                vec![format!("x_{i} = y_{i} + z_{i}")],
                Vec::new(),
                0,
            )
        })
        .collect()
}

/// Commits whose message repeats their first added line, built from every
/// ordered pair of distinct words in a `words`-word lexicon, shuffled by
/// `seed`. A second added line of filler follows. A message is therefore
/// "matched" exactly when it equals the first added line.
pub fn matched_message_corpus(words: usize, seed: u64) -> Vec<CodeCommit> {
    let lexicon: Vec<String> = (0..words).map(|w| format!("w{w}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (0..words)
        .flat_map(|a| (0..words).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let text = format!("{} {}", lexicon[a], lexicon[b]);
            let filler = format!("{} ;", lexicon.choose(&mut rng).expect("non-empty lexicon"));
            commit(format!("r{i:04}"), text.clone(), vec![text, filler], Vec::new(), 0)
        })
        .collect()
}

const NEUTRAL_WORDS: [&str; 8] = ["update", "parser", "cache", "config", "cleanup", "docs", "render", "io"];
const CODE_LINES: [&str; 6] = [
    "int x = 0 ;",
    "return value ;",
    "call ( a , b ) ;",
    "if ( ok ) {",
    "}",
    "log . info ( msg ) ;",
];

/// Commits labelled defective exactly when the message contains the token
/// `bug` AND the LA expert feature exceeds 10. The four (bug, LA > 10)
/// combinations are equally frequent, and LA keeps a margin around the
/// boundary (1..=8 or 14..=30). LA is carried only by
/// `expert_features` (the shown lines are unrelated filler), and all other
/// features are noise, so neither modality alone determines the label.
pub fn conjunctive_corpus(n: usize, seed: u64) -> Vec<CodeCommit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let has_bug = i % 2 == 0;
            let large = (i / 2) % 2 == 0;
            let mut words: Vec<&str> = (0..3).map(|_| *NEUTRAL_WORDS.choose(&mut rng).expect("words")).collect();
            if has_bug {
                let at = rng.random_range(0..=words.len());
                words.insert(at, "bug");
            }
            let added = (0..rng.random_range(1..4))
                .map(|_| CODE_LINES.choose(&mut rng).expect("lines").to_string())
                .collect();
            let deleted = (0..rng.random_range(0..2))
                .map(|_| CODE_LINES.choose(&mut rng).expect("lines").to_string())
                .collect();
            let mut features: [f64; NUM_FEATURES] = std::array::from_fn(|_| rng.random_range(0.0..5.0));
            features[4] = if large {
                rng.random_range(14..=30) as f64
            } else {
                rng.random_range(1..=8) as f64
            };
            let mut c = commit(
                format!("f{i:04}"),
                words.join(" "),
                added,
                deleted,
                u8::from(has_bug && large),
            );
            c.expert_features = Some(ExpertFeatureVector::from_array(features));
            c
        })
        .collect()
}

/// Random commits over a mixed lexicon, with random lengths, empty messages
/// and empty diffs; roughly a quarter are labelled defective.
pub fn random_corpus(n: usize, seed: u64) -> Vec<CodeCommit> {
    const LEXICON: [&str; 16] = [
        "fix", "Add", "parser", "x", "=", "(", ")", ";", "return", "null", "foo_bar", "42", "if", "{", "}", "Bug",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = |rng: &mut ChaCha8Rng, max: usize| -> String {
        let len = rng.random_range(0..=max);
        (0..len).map(|_| *LEXICON.choose(rng).expect("lexicon")).collect::<Vec<_>>().join(" ")
    };
    (0..n)
        .map(|i| {
            let message = text(&mut rng, 12);
            let added: Vec<String> = (0..rng.random_range(0..8)).map(|_| text(&mut rng, 10)).collect();
            let mut deleted: Vec<String> = (0..rng.random_range(0..6)).map(|_| text(&mut rng, 10)).collect();
            if message.is_empty() && added.is_empty() && deleted.is_empty() {
                deleted.push("x ;".into());
            }
            let label = u8::from(rng.random_bool(0.25));
            let features: [f64; NUM_FEATURES] = std::array::from_fn(|_| rng.random_range(0.0..20.0));
            let mut c = commit(format!("c{i:05}"), message, added, deleted, label);
            c.expert_features = Some(ExpertFeatureVector::from_array(features));
            c
        })
        .collect()
}
