//! Synthetic lexicons and corpora for desk-scale runs.
//!
//! Each word type gets a fixed UPOS tag and a fixed random bundle of
//! features, so gold labels are a function of the word type. Together with
//! [`crate::embedding::synth_embeddings`] this yields data where diagnostic
//! labels are linearly recoverable and control labels are not.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::conllu::{Corpus, Sentence, Split, Token};
use crate::rng::{derive_seed, rng_from_seed};

const UPOS_TAGS: [&str; 8] = ["ADJ", "ADP", "ADV", "DET", "NOUN", "PRON", "PUNCT", "VERB"];
const FEATURES: [(&str, [&str; 2]); 6] = [
    ("Case", ["Acc", "Nom"]),
    ("Definite", ["Def", "Ind"]),
    ("Gender", ["Fem", "Masc"]),
    ("Number", ["Plur", "Sing"]),
    ("Person", ["1", "3"]),
    ("Tense", ["Past", "Pres"]),
];

/// Number of distinct labels a synthetic lexicon can produce.
pub const SYNTHETIC_LABELS: usize = UPOS_TAGS.len() + 2 * FEATURES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLexicon {
    pub types: Vec<Token>,
}

impl SyntheticLexicon {
    /// `n_types` word types named `w00000`, `w00001`, ...
    pub fn generate(n_types: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let types = (0..n_types)
            .map(|i| {
                let upos = UPOS_TAGS[rng.random_range(0..UPOS_TAGS.len())];
                let feats: Vec<(&str, &str)> = FEATURES
                    .iter()
                    .filter_map(|(name, values)| {
                        let present = rng.random_bool(0.5);
                        let value = values[rng.random_range(0..2)];
                        present.then_some((*name, value))
                    })
                    .collect();
                Token::word(&format!("w{i:05}"), upos, &feats)
            })
            .collect();
        SyntheticLexicon { types }
    }

    /// Sentences of `sentence_len` tokens drawn uniformly from the lexicon.
    pub fn sample_corpus(
        &self,
        language_code: &str,
        split: Split,
        n_sentences: usize,
        sentence_len: usize,
        seed: u64,
    ) -> Corpus {
        let mut rng = rng_from_seed(derive_seed(seed, split as u64));
        let sentences = (0..n_sentences)
            .map(|i| Sentence {
                source_id: format!("{language_code}-{split}-{}", i + 1),
                tokens: (0..sentence_len)
                    .map(|_| self.types[rng.random_range(0..self.types.len())].clone())
                    .collect(),
            })
            .collect();
        Corpus {
            language_code: language_code.to_string(),
            split,
            sentences,
        }
    }
}
