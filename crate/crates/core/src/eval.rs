//! Per-label and aggregate multilabel metrics.
//!
//! Micro-averaged scores sum TP/FP/FN over all labels before computing
//! precision and recall; true negatives are never counted. Every ratio uses
//! the convention `0 / 0 = 0`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{Corpus, Token, Vocabulary};
use crate::embedding::EmbeddingCache;
use crate::labels::{label_inventory, FeatureLabel, LabelSpace, TargetVector};
use crate::probe::{predict, ProbeError, ProbeModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {targets} targets")]
    Misaligned { predictions: usize, targets: usize },
    #[error("token {token}: vector of width {found}, expected {expected}")]
    Width {
        token: usize,
        expected: usize,
        found: usize,
    },
    #[error("reports describe different runs: {0}")]
    MetadataMismatch(String),
    #[error("label {0} is not in the label space")]
    UnknownLabel(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Diagnostic,
    Control,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Diagnostic => "diagnostic",
            TaskKind::Control => "control",
        }
    }
}

/// Per-label confusion counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTally {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
    pub tokens: u64,
}

impl LabelTally {
    pub fn zeros(n_labels: usize) -> Self {
        LabelTally {
            tp: alloc::vec![0; n_labels],
            fp: alloc::vec![0; n_labels],
            fn_: alloc::vec![0; n_labels],
            tokens: 0,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.tp.len()
    }

    pub fn add_token(&mut self, predicted: &TargetVector, gold: &TargetVector) {
        self.tokens += 1;
        for j in 0..self.tp.len() {
            match (predicted.get(j), gold.get(j)) {
                (true, true) => self.tp[j] += 1,
                (true, false) => self.fp[j] += 1,
                (false, true) => self.fn_[j] += 1,
                (false, false) => {}
            }
        }
    }

    pub fn merge(&mut self, other: &LabelTally) {
        for j in 0..self.tp.len() {
            self.tp[j] += other.tp[j];
            self.fp[j] += other.fp[j];
            self.fn_[j] += other.fn_[j];
        }
        self.tokens += other.tokens;
    }

    /// `(sum TP, sum FP, sum FN)`.
    pub fn totals(&self) -> (u64, u64, u64) {
        (
            self.tp.iter().sum(),
            self.fp.iter().sum(),
            self.fn_.iter().sum(),
        )
    }

    /// Keeps the listed label columns, in the given order.
    pub fn restrict(&self, columns: &[usize]) -> LabelTally {
        LabelTally {
            tp: columns.iter().map(|&j| self.tp[j]).collect(),
            fp: columns.iter().map(|&j| self.fp[j]).collect(),
            fn_: columns.iter().map(|&j| self.fn_[j]).collect(),
            tokens: self.tokens,
        }
    }

    pub fn label_scores(&self, j: usize) -> Prf {
        prf(self.tp[j], self.fp[j], self.fn_[j])
    }
}

fn check_aligned(
    predictions: &[TargetVector],
    targets: &[TargetVector],
    n_labels: usize,
) -> Result<(), EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::Misaligned {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    for (token, (p, t)) in predictions.iter().zip(targets).enumerate() {
        for v in [p, t] {
            if v.len() != n_labels {
                return Err(EvalError::Width {
                    token,
                    expected: n_labels,
                    found: v.len(),
                });
            }
        }
    }
    Ok(())
}

pub fn tally(
    predictions: &[TargetVector],
    targets: &[TargetVector],
    space: &LabelSpace,
) -> Result<LabelTally, EvalError> {
    check_aligned(predictions, targets, space.len())?;
    let mut t = LabelTally::zeros(space.len());
    for (p, g) in predictions.iter().zip(targets) {
        t.add_token(p, g);
    }
    Ok(t)
}

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn prf(tp: u64, fp: u64, fn_: u64) -> Prf {
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Prf {
        precision,
        recall,
        f1,
    }
}

pub fn micro_f1(tally: &LabelTally) -> Prf {
    let (tp, fp, fn_) = tally.totals();
    prf(tp, fp, fn_)
}

/// Mean per-label F1 over labels with any gold or predicted occurrence.
pub fn macro_f1(tally: &LabelTally) -> f64 {
    let scores: Vec<f64> = (0..tally.n_labels())
        .filter(|&j| tally.tp[j] + tally.fp[j] + tally.fn_[j] > 0)
        .map(|j| tally.label_scores(j).f1)
        .collect();
    ratio(scores.iter().sum(), scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMeta {
    /// Language set the probe was trained on, e.g. `he` or `multi`.
    pub probe: String,
    pub probe_kind: String,
    pub layer: i64,
    /// Evaluation corpus, e.g. `he/test`.
    pub corpus: String,
    pub task: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub tokens: u64,
    pub labels: Vec<LabelScore>,
    pub tally_totals: [u64; 3],
    pub micro: Prf,
    pub macro_f1: f64,
}

impl EvalReport {
    pub fn from_tally(meta: EvalMeta, tally: &LabelTally, space: &LabelSpace) -> Self {
        let labels = (0..tally.n_labels())
            .map(|j| {
                let s = tally.label_scores(j);
                LabelScore {
                    label: space.label(j).render(),
                    tp: tally.tp[j],
                    fp: tally.fp[j],
                    fn_: tally.fn_[j],
                    support: tally.tp[j] + tally.fn_[j],
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                }
            })
            .collect();
        let (tp, fp, fn_) = tally.totals();
        EvalReport {
            meta,
            tokens: tally.tokens,
            labels,
            tally_totals: [tp, fp, fn_],
            micro: micro_f1(tally),
            macro_f1: macro_f1(tally),
        }
    }

    pub fn evaluate(
        meta: EvalMeta,
        predictions: &[TargetVector],
        targets: &[TargetVector],
        space: &LabelSpace,
    ) -> Result<Self, EvalError> {
        Ok(Self::from_tally(meta, &tally(predictions, targets, space)?, space))
    }

    /// Micro scores recomputed from the stored totals.
    pub fn micro_from_totals(&self) -> Prf {
        let [tp, fp, fn_] = self.tally_totals;
        prf(tp, fp, fn_)
    }
}

/// Diagnostic micro-F1 minus control micro-F1 for the same probe, layer
/// and corpus.
pub fn selectivity(diagnostic: &EvalReport, control: &EvalReport) -> Result<f64, EvalError> {
    let (a, b) = (&diagnostic.meta, &control.meta);
    let mismatch = if a.probe != b.probe {
        Some("probe")
    } else if a.probe_kind != b.probe_kind {
        Some("probe kind")
    } else if a.layer != b.layer {
        Some("layer")
    } else if a.corpus != b.corpus {
        Some("corpus")
    } else {
        None
    };
    if let Some(field) = mismatch {
        return Err(EvalError::MetadataMismatch(field.to_string()));
    }
    Ok(diagnostic.micro.f1 - control.micro.f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvOovReports {
    pub iv: EvalReport,
    pub oov: EvalReport,
    /// IV micro-F1 minus OOV micro-F1; absent when either side has no tokens.
    pub gap: Option<f64>,
}

/// Splits tokens by whether their surface form occurs in `train_vocab`.
pub fn iv_oov_reports(
    predictions: &[TargetVector],
    targets: &[TargetVector],
    corpus: &Corpus,
    train_vocab: &Vocabulary,
    space: &LabelSpace,
    meta: EvalMeta,
) -> Result<IvOovReports, EvalError> {
    check_aligned(predictions, targets, space.len())?;
    if corpus.token_count() != targets.len() {
        return Err(EvalError::Misaligned {
            predictions: corpus.token_count(),
            targets: targets.len(),
        });
    }
    let mut iv = LabelTally::zeros(space.len());
    let mut oov = LabelTally::zeros(space.len());
    for ((token, p), g) in corpus.tokens().zip(predictions).zip(targets) {
        if train_vocab.contains(&token.surface_form) {
            iv.add_token(p, g);
        } else {
            oov.add_token(p, g);
        }
    }
    let with_corpus = |suffix: &str| EvalMeta {
        corpus: alloc::format!("{}#{suffix}", meta.corpus),
        ..meta.clone()
    };
    let iv_report = EvalReport::from_tally(with_corpus("iv"), &iv, space);
    let oov_report = EvalReport::from_tally(with_corpus("oov"), &oov, space);
    let gap = (iv.tokens > 0 && oov.tokens > 0).then(|| iv_report.micro.f1 - oov_report.micro.f1);
    Ok(IvOovReports {
        iv: iv_report,
        oov: oov_report,
        gap,
    })
}

/// Token selectors for construction-filtered evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TokenPredicate {
    All,
    /// Multiword tokens whose component tags match the pattern; a trailing
    /// `?` marks an optional element, e.g. `["ADP", "DET?", "NOUN"]`.
    MwtComponents(Vec<String>),
    Deprel(String),
    Upos(String),
}

fn match_pattern(pattern: &[String], tags: &[String]) -> bool {
    match pattern.split_first() {
        None => tags.is_empty(),
        Some((head, rest)) => {
            let (tag, optional) = match head.strip_suffix('?') {
                Some(t) => (t, true),
                None => (head.as_str(), false),
            };
            let here = tags.first().is_some_and(|t| t == tag) && match_pattern(rest, &tags[1..]);
            here || (optional && match_pattern(rest, tags))
        }
    }
}

impl TokenPredicate {
    pub fn matches(&self, token: &Token) -> bool {
        match self {
            TokenPredicate::All => true,
            TokenPredicate::MwtComponents(p) => token.is_mwt && match_pattern(p, &token.component_upos),
            TokenPredicate::Deprel(d) => token.deprel.as_deref() == Some(d.as_str()),
            TokenPredicate::Upos(u) => token.upos_set.contains(u),
        }
    }
}

/// For one error type (FN or FP) on the focus label: how many tokens had it,
/// how many of those had further mispredicted labels, and which.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoErrors {
    pub tokens: u64,
    pub with_additional_errors: u64,
    pub co_labels: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredResult {
    pub label: String,
    pub matched_tokens: u64,
    /// Gold occurrences of the label among matched tokens.
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub false_negative_co_errors: CoErrors,
    pub false_positive_co_errors: CoErrors,
}

/// Scores of a single label over the tokens selected by `predicate`.
pub fn filtered_eval(
    predictions: &[TargetVector],
    targets: &[TargetVector],
    corpus: &Corpus,
    predicate: impl Fn(&Token) -> bool,
    label: &FeatureLabel,
    space: &LabelSpace,
) -> Result<FilteredResult, EvalError> {
    check_aligned(predictions, targets, space.len())?;
    if corpus.token_count() != targets.len() {
        return Err(EvalError::Misaligned {
            predictions: corpus.token_count(),
            targets: targets.len(),
        });
    }
    let focus = space
        .index_of(label)
        .ok_or_else(|| EvalError::UnknownLabel(label.render()))?;
    let (mut matched, mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let mut fn_co = CoErrors::default();
    let mut fp_co = CoErrors::default();
    for ((token, p), g) in corpus.tokens().zip(predictions).zip(targets) {
        if !predicate(token) {
            continue;
        }
        matched += 1;
        let bucket = match (p.get(focus), g.get(focus)) {
            (true, true) => {
                tp += 1;
                None
            }
            (true, false) => {
                fp += 1;
                Some(&mut fp_co)
            }
            (false, true) => {
                fn_ += 1;
                Some(&mut fn_co)
            }
            (false, false) => None,
        };
        if let Some(co) = bucket {
            co.tokens += 1;
            let others: Vec<usize> = (0..space.len())
                .filter(|&j| j != focus && p.get(j) != g.get(j))
                .collect();
            if !others.is_empty() {
                co.with_additional_errors += 1;
            }
            for j in others {
                *co.co_labels.entry(space.label(j).render()).or_insert(0) += 1;
            }
        }
    }
    let s = prf(tp, fp, fn_);
    Ok(FilteredResult {
        label: label.render(),
        matched_tokens: matched,
        support: tp + fn_,
        tp,
        fp,
        fn_,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        false_negative_co_errors: fn_co,
        false_positive_co_errors: fp_co,
    })
}

/// Label name of the aggregate transfer cell.
pub const MICRO: &str = "micro";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub probe: String,
    pub target_language: String,
    pub label: String,
    pub applicable: bool,
    pub f1: Option<f64>,
    pub support: Option<u64>,
}

/// Zero-shot transfer cells for labels of `space`. Labels missing from the
/// target's annotation inventory are marked inapplicable; the micro cell
/// covers only applicable labels. Empty when nothing is shared.
pub fn transfer_cells(
    probe: &str,
    target_language: &str,
    predictions: &[TargetVector],
    targets: &[TargetVector],
    space: &LabelSpace,
    target_inventory: &BTreeSet<FeatureLabel>,
) -> Result<Vec<TransferCell>, EvalError> {
    let full = tally(predictions, targets, space)?;
    let applicable: Vec<usize> = (0..space.len())
        .filter(|&j| target_inventory.contains(space.label(j)))
        .collect();
    if applicable.is_empty() {
        return Ok(Vec::new());
    }
    let mut cells: Vec<TransferCell> = (0..space.len())
        .map(|j| {
            let ok = target_inventory.contains(space.label(j));
            TransferCell {
                probe: probe.to_string(),
                target_language: target_language.to_string(),
                label: space.label(j).render(),
                applicable: ok,
                f1: ok.then(|| full.label_scores(j).f1),
                support: ok.then(|| full.tp[j] + full.fn_[j]),
            }
        })
        .collect();
    let shared = full.restrict(&applicable);
    let (tp, _, fn_) = shared.totals();
    cells.push(TransferCell {
        probe: probe.to_string(),
        target_language: target_language.to_string(),
        label: MICRO.to_string(),
        applicable: true,
        f1: Some(micro_f1(&shared).f1),
        support: Some(tp + fn_),
    });
    Ok(cells)
}

/// Runs a trained probe over a target-language cache and scores it against
/// the target corpus's own annotations.
pub fn transfer_eval(
    probe_id: &str,
    model: &ProbeModel,
    cache: &EmbeddingCache,
    corpus: &Corpus,
    space: &LabelSpace,
    threshold: f64,
) -> Result<Vec<TransferCell>, EvalError> {
    let inventory: BTreeSet<FeatureLabel> = label_inventory([corpus]).into_keys().collect();
    let predictions = predict(model, cache, space, threshold)?;
    let targets = space.encode_corpus(corpus);
    transfer_cells(
        probe_id,
        &corpus.language_code,
        &predictions.predicted,
        &targets,
        space,
        &inventory,
    )
}
