//! Control tasks: random per-word-type multi-hot targets that follow the
//! training-set label marginals.
//!
//! Bit `j` of a word type's vector is Bernoulli(`p_j`), drawn from a stream
//! keyed only by `(seed, word type)`. The assignment is therefore independent
//! of vocabulary order and stays fixed across layers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{Corpus, Sentence, Vocabulary};
use crate::labels::{LabelSpace, TargetVector};
use crate::rng::{derive_seed, rng_from_seed, stable_hash};

/// Minimum per-label probability.
pub const DEFAULT_FLOOR: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("training corpus has no tokens")]
    EmptyCorpus,
    #[error("probability floor {0} must lie in (0, 0.5)")]
    InvalidFloor(f64),
    #[error("marginal {value} at index {index} is not a probability")]
    InvalidMarginal { index: usize, value: f64 },
    #[error("word type {0:?} has no control vector")]
    UnknownWordType(String),
}

/// `p_j = max(floor, tokens bearing f_j / tokens)` over the training corpus.
pub fn compute_marginals(
    train_corpus: &Corpus,
    space: &LabelSpace,
    floor: f64,
) -> Result<Vec<f64>, ControlError> {
    if !(floor > 0.0 && floor < 0.5) {
        return Err(ControlError::InvalidFloor(floor));
    }
    let mut counts = alloc::vec![0u64; space.len()];
    let mut total = 0u64;
    for token in train_corpus.tokens() {
        total += 1;
        for j in space.encode_token(token).ones() {
            counts[j] += 1;
        }
    }
    if total == 0 {
        return Err(ControlError::EmptyCorpus);
    }
    Ok(counts
        .into_iter()
        .map(|c| (c as f64 / total as f64).max(floor))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAssignment {
    pub vectors: BTreeMap<String, TargetVector>,
    pub marginals: Vec<f64>,
    pub seed: u64,
}

/// Control vector for a single word type.
pub fn control_vector(word_type: &str, marginals: &[f64], seed: u64) -> TargetVector {
    let mut rng = rng_from_seed(derive_seed(seed, stable_hash(word_type)));
    marginals
        .iter()
        .map(|&p| rng.random::<f64>() < p)
        .collect::<Vec<bool>>()
        .into()
}

pub fn generate_control(
    vocab: &Vocabulary,
    marginals: &[f64],
    seed: u64,
) -> Result<ControlAssignment, ControlError> {
    if let Some((index, &value)) = marginals
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(ControlError::InvalidMarginal { index, value });
    }
    let vectors = vocab
        .iter()
        .map(|w| (String::from(w), control_vector(w, marginals, seed)))
        .collect();
    Ok(ControlAssignment {
        vectors,
        marginals: marginals.to_vec(),
        seed,
    })
}

impl ControlAssignment {
    pub fn n_labels(&self) -> usize {
        self.marginals.len()
    }

    pub fn get(&self, word_type: &str) -> Option<&TargetVector> {
        self.vectors.get(word_type)
    }

    pub fn control_targets(&self, sentence: &Sentence) -> Result<Vec<TargetVector>, ControlError> {
        sentence
            .tokens
            .iter()
            .map(|t| {
                self.get(&t.surface_form)
                    .cloned()
                    .ok_or_else(|| ControlError::UnknownWordType(t.surface_form.clone()))
            })
            .collect()
    }

    pub fn corpus_targets(&self, corpus: &Corpus) -> Result<Vec<TargetVector>, ControlError> {
        let mut out = Vec::with_capacity(corpus.token_count());
        for s in &corpus.sentences {
            out.extend(self.control_targets(s)?);
        }
        Ok(out)
    }
}
