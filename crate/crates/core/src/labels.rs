//! Feature labels, label spaces and multi-hot targets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{Corpus, Sentence, Split, Token};

/// Feature name used for part-of-speech labels.
pub const UPOS: &str = "UPOS";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("at least one corpus or label space is required")]
    NoInput,
    #[error("no training corpus among the inputs")]
    NoTrainCorpus,
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("resulting label set is empty")]
    EmptyLabelSet,
    #[error("duplicate label {0}")]
    Duplicate(String),
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("score {value} at index {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} scores, got {found}")]
    LengthMismatch { expected: usize, found: usize },
}

/// A `Name=Value` feature label, or a bare UPOS tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureLabel {
    pub feature_name: String,
    pub value: String,
}

impl FeatureLabel {
    pub fn upos(tag: &str) -> Self {
        FeatureLabel {
            feature_name: UPOS.to_string(),
            value: tag.to_string(),
        }
    }

    pub fn feat(name: &str, value: &str) -> Self {
        FeatureLabel {
            feature_name: name.to_string(),
            value: value.to_string(),
        }
    }

    pub fn is_upos(&self) -> bool {
        self.feature_name == UPOS
    }

    /// Parses a rendered label: `Name=Value`, or a bare tag for UPOS.
    pub fn parse(rendered: &str) -> Result<Self, LabelError> {
        let invalid = || LabelError::InvalidLabel(rendered.to_string());
        match rendered.split_once('=') {
            Some((name, value)) if !name.is_empty() && !value.is_empty() && name != UPOS => {
                Ok(FeatureLabel::feat(name, value))
            }
            Some(_) => Err(invalid()),
            None if !rendered.is_empty() => Ok(FeatureLabel::upos(rendered)),
            None => Err(invalid()),
        }
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    fn rendered_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        let prefix: &[u8] = if self.is_upos() {
            &[]
        } else {
            self.feature_name.as_bytes()
        };
        let sep: &[u8] = if self.is_upos() { &[] } else { b"=" };
        prefix
            .iter()
            .chain(sep)
            .chain(self.value.as_bytes())
            .copied()
    }

    /// Whether the token carries this label.
    pub fn describes(&self, token: &Token) -> bool {
        if self.is_upos() {
            token.upos_set.contains(&self.value)
        } else {
            token.has_feat(&self.feature_name, &self.value)
        }
    }
}

impl fmt::Display for FeatureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_upos() {
            f.write_str(&self.value)
        } else {
            write!(f, "{}={}", self.feature_name, self.value)
        }
    }
}

/// Labels order by their rendered form.
impl Ord for FeatureLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rendered_bytes().cmp(other.rendered_bytes())
    }
}

impl PartialOrd for FeatureLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl TryFrom<String> for FeatureLabel {
    type Error = LabelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        FeatureLabel::parse(&s)
    }
}

impl From<FeatureLabel> for String {
    fn from(l: FeatureLabel) -> String {
        l.render()
    }
}

/// All labels carried by a token: its UPOS tags and its features.
pub fn token_labels(token: &Token) -> impl Iterator<Item = FeatureLabel> + '_ {
    token
        .upos_set
        .iter()
        .map(|u| FeatureLabel::upos(u))
        .chain(token.feats.iter().map(|(n, v)| FeatureLabel::feat(n, v)))
}

/// Occurrence counts of every label in a set of corpora.
pub fn label_inventory<'a>(
    corpora: impl IntoIterator<Item = &'a Corpus>,
) -> BTreeMap<FeatureLabel, u64> {
    let mut counts = BTreeMap::new();
    for corpus in corpora {
        for token in corpus.tokens() {
            for label in token_labels(token) {
                *counts.entry(label).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Multi-hot target `y` over a label space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetVector {
    pub bits: Vec<bool>,
}

impl TargetVector {
    pub fn zeros(len: usize) -> Self {
        TargetVector {
            bits: alloc::vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(j, b)| b.then_some(j))
    }
}

impl From<Vec<bool>> for TargetVector {
    fn from(bits: Vec<bool>) -> Self {
        TargetVector { bits }
    }
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceRepr {
    labels: Vec<FeatureLabel>,
    language_scope: Vec<String>,
}

/// The ordered label set `F`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRepr", into = "LabelSpaceRepr")]
pub struct LabelSpace {
    labels: Vec<FeatureLabel>,
    index: BTreeMap<FeatureLabel, usize>,
    language_scope: Vec<String>,
}

impl TryFrom<LabelSpaceRepr> for LabelSpace {
    type Error = LabelError;
    fn try_from(r: LabelSpaceRepr) -> Result<Self, LabelError> {
        let mut seen = BTreeSet::new();
        for l in &r.labels {
            if !seen.insert(l) {
                return Err(LabelError::Duplicate(l.render()));
            }
        }
        LabelSpace::new(r.labels, r.language_scope)
    }
}

impl From<LabelSpace> for LabelSpaceRepr {
    fn from(s: LabelSpace) -> Self {
        LabelSpaceRepr {
            labels: s.labels,
            language_scope: s.language_scope,
        }
    }
}

impl LabelSpace {
    /// Sorts and deduplicates `labels`; rejects an empty set.
    pub fn new(
        labels: impl IntoIterator<Item = FeatureLabel>,
        language_scope: impl IntoIterator<Item = String>,
    ) -> Result<Self, LabelError> {
        let labels: Vec<FeatureLabel> = labels
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if labels.is_empty() {
            return Err(LabelError::EmptyLabelSet);
        }
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        let language_scope = language_scope
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(LabelSpace {
            labels,
            index,
            language_scope,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[FeatureLabel] {
        &self.labels
    }

    pub fn label(&self, j: usize) -> &FeatureLabel {
        &self.labels[j]
    }

    pub fn index_of(&self, label: &FeatureLabel) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn language_scope(&self) -> &[String] {
        &self.language_scope
    }

    pub fn encode_token(&self, token: &Token) -> TargetVector {
        let mut t = TargetVector::zeros(self.len());
        for label in token_labels(token) {
            if let Some(j) = self.index_of(&label) {
                t.bits[j] = true;
            }
        }
        t
    }

    /// One target per probe token; labels outside the space are dropped.
    pub fn encode_targets(&self, sentence: &Sentence) -> Vec<TargetVector> {
        sentence.tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn encode_corpus(&self, corpus: &Corpus) -> Vec<TargetVector> {
        corpus.tokens().map(|t| self.encode_token(t)).collect()
    }

    /// Thresholds scores (`score >= threshold`) into a multi-hot vector.
    pub fn threshold_scores(&self, scores: &[f64], threshold: f64) -> Result<TargetVector, LabelError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(LabelError::InvalidThreshold(threshold));
        }
        if scores.len() != self.len() {
            return Err(LabelError::LengthMismatch {
                expected: self.len(),
                found: scores.len(),
            });
        }
        scores
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                if (0.0..=1.0).contains(&value) {
                    Ok(value >= threshold)
                } else {
                    Err(LabelError::ScoreOutOfRange { index, value })
                }
            })
            .collect::<Result<Vec<bool>, _>>()
            .map(TargetVector::from)
    }

    /// Labels whose score reaches `threshold`, in space order.
    pub fn decode_predictions(
        &self,
        scores: &[f64],
        threshold: f64,
    ) -> Result<Vec<FeatureLabel>, LabelError> {
        let bits = self.threshold_scores(scores, threshold)?;
        Ok(bits.ones().map(|j| self.labels[j].clone()).collect())
    }

    pub fn decode_bits(&self, bits: &TargetVector) -> Vec<FeatureLabel> {
        bits.ones().map(|j| self.labels[j].clone()).collect()
    }
}

fn parse_whitelist(whitelist: &[String]) -> Result<BTreeSet<FeatureLabel>, LabelError> {
    whitelist.iter().map(|s| FeatureLabel::parse(s)).collect()
}

/// Labels occurring at least `min_count` times in the training corpora among
/// `corpora`, optionally intersected with a whitelist of rendered labels.
pub fn build_label_space(
    corpora: &[&Corpus],
    min_count: u64,
    whitelist: Option<&[String]>,
) -> Result<LabelSpace, LabelError> {
    if corpora.is_empty() {
        return Err(LabelError::NoInput);
    }
    if min_count == 0 {
        return Err(LabelError::InvalidMinCount);
    }
    let train: Vec<&Corpus> = corpora
        .iter()
        .copied()
        .filter(|c| c.split == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(LabelError::NoTrainCorpus);
    }
    let keep = whitelist.map(parse_whitelist).transpose()?;
    let labels = label_inventory(train.iter().copied())
        .into_iter()
        .filter(|(_, n)| *n >= min_count)
        .map(|(l, _)| l)
        .filter(|l| keep.as_ref().is_none_or(|k| k.contains(l)));
    let scope = train.iter().map(|c| c.language_code.clone());
    LabelSpace::new(labels, scope)
}

pub fn merge_label_spaces(
    spaces: &[&LabelSpace],
    keep: Option<&[String]>,
) -> Result<LabelSpace, LabelError> {
    if spaces.is_empty() {
        return Err(LabelError::NoInput);
    }
    let keep = keep.map(parse_whitelist).transpose()?;
    let labels = spaces
        .iter()
        .flat_map(|s| s.labels.iter().cloned())
        .filter(|l| keep.as_ref().is_none_or(|k| k.contains(l)));
    let scope = spaces.iter().flat_map(|s| s.language_scope.iter().cloned());
    LabelSpace::new(labels, scope)
}
