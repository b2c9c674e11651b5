//! CoNLL-U ingestion.
//!
//! Sentences are read into probe tokens: plain word rows become one token
//! each, and every multiword-token range row becomes a single token that
//! carries the union of its components' UPOS tags and features. Component
//! rows are consumed, and empty nodes (decimal ids) are skipped.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::num::NonZeroUsize;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConlluError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: invalid token id {id:?}")]
    InvalidId { line: usize, id: String },
    #[error("line {line}: multiword range {range} does not match its component rows")]
    MissingComponents { line: usize, range: String },
    #[error("line {line}: word row has no UPOS tag")]
    MissingUpos { line: usize },
    #[error("line {line}: malformed FEATS entry {entry:?}")]
    MalformedFeats { line: usize, entry: String },
    #[error("line {line}: HEAD {head:?} does not refer to a word of the sentence")]
    InvalidHead { line: usize, head: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("at least one corpus is required")]
    NoCorpora,
    #[error("corpus has no sentences")]
    EmptyCorpus,
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    InvalidRatios((f64, f64, f64)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl core::fmt::Display for Split {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A probe token: one surface word, or one flattened multiword token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface_form: String,
    pub upos_set: BTreeSet<String>,
    pub feats: BTreeSet<(String, String)>,
    pub deprel: Option<String>,
    /// `0` for the root, otherwise the 1-based position of the head probe
    /// token within the sentence.
    pub head_index: Option<usize>,
    pub is_mwt: bool,
    pub component_upos: Vec<String>,
}

impl Token {
    /// A plain single-word token.
    pub fn word(form: &str, upos: &str, feats: &[(&str, &str)]) -> Self {
        Token {
            surface_form: form.to_string(),
            upos_set: BTreeSet::from([upos.to_string()]),
            feats: feats
                .iter()
                .map(|(n, v)| (n.to_string(), v.to_string()))
                .collect(),
            deprel: None,
            head_index: None,
            is_mwt: false,
            component_upos: Vec::new(),
        }
    }

    pub fn has_feat(&self, name: &str, value: &str) -> bool {
        self.feats
            .iter()
            .any(|(n, v)| n == name && v == value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub source_id: String,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub language_code: String,
    pub split: Split,
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(language_code: &str, split: Split, sentences: Vec<Sentence>) -> Self {
        Corpus {
            language_code: language_code.to_string(),
            split,
            sentences,
        }
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> + '_ {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }

    /// Serializes back to CoNLL-U.
    ///
    /// Multiword tokens are written as a range row followed by component rows
    /// with `_` forms. The first component carries all features and the
    /// token's HEAD/DEPREL; the remaining components attach to it, so that
    /// re-parsing yields the same probe tokens.
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        for sentence in &self.sentences {
            let _ = writeln!(out, "# sent_id = {}", sentence.source_id);
            // first word id of every probe token, 1-based by token position
            let mut first_word = Vec::with_capacity(sentence.tokens.len() + 1);
            first_word.push(0usize);
            let mut next = 1usize;
            for token in &sentence.tokens {
                first_word.push(next);
                next += token.component_upos.len().max(1);
            }
            let head_col = |t: &Token| match t.head_index {
                None => "_".to_string(),
                Some(0) => "0".to_string(),
                Some(h) => first_word
                    .get(h)
                    .map(|w| w.to_string())
                    .unwrap_or_else(|| "_".to_string()),
            };
            for (pos, token) in sentence.tokens.iter().enumerate() {
                let start = first_word[pos + 1];
                let deprel = token.deprel.as_deref().unwrap_or("_");
                if token.is_mwt {
                    let end = start + token.component_upos.len() - 1;
                    let _ = writeln!(
                        out,
                        "{start}-{end}\t{}\t_\t_\t_\t_\t_\t_\t_\t_",
                        token.surface_form
                    );
                    for (k, upos) in token.component_upos.iter().enumerate() {
                        if k == 0 {
                            let _ = writeln!(
                                out,
                                "{}\t_\t_\t{upos}\t_\t{}\t{}\t{deprel}\t_\t_",
                                start,
                                render_feats(&token.feats),
                                head_col(token)
                            );
                        } else {
                            let _ = writeln!(
                                out,
                                "{}\t_\t_\t{upos}\t_\t_\t{start}\tdep\t_\t_",
                                start + k
                            );
                        }
                    }
                } else {
                    let upos = token.upos_set.iter().next().map(String::as_str).unwrap_or("_");
                    let _ = writeln!(
                        out,
                        "{start}\t{}\t_\t{upos}\t_\t{}\t{}\t{deprel}\t_\t_",
                        token.surface_form,
                        render_feats(&token.feats),
                        head_col(token)
                    );
                }
            }
            out.push('\n');
        }
        out
    }
}

fn render_feats(feats: &BTreeSet<(String, String)>) -> String {
    if feats.is_empty() {
        return "_".to_string();
    }
    let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (name, value) in feats {
        grouped.entry(name).or_default().push(value);
    }
    grouped
        .into_iter()
        .map(|(name, values)| format!("{name}={}", values.join(",")))
        .collect::<Vec<_>>()
        .join("|")
}

/// Case-sensitive set of surface forms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub word_types: BTreeSet<String>,
}

impl Vocabulary {
    pub fn contains(&self, form: &str) -> bool {
        self.word_types.contains(form)
    }

    pub fn len(&self) -> usize {
        self.word_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_types.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> + '_ {
        self.word_types.iter().map(String::as_str)
    }
}

impl FromIterator<String> for Vocabulary {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        Vocabulary {
            word_types: iter.into_iter().collect(),
        }
    }
}

pub fn build_vocabulary(corpora: &[&Corpus]) -> Result<Vocabulary, CorpusError> {
    if corpora.is_empty() {
        return Err(CorpusError::NoCorpora);
    }
    Ok(corpora
        .iter()
        .flat_map(|c| c.tokens())
        .map(|t| t.surface_form.clone())
        .collect())
}

/// Randomly partitions sentences into train/dev/test.
///
/// Dev and test sizes are `floor(n * ratio)`; the remainder goes to train.
/// Each part keeps the original corpus order.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let (r_train, r_dev, r_test) = ratios;
    let valid = [r_train, r_dev, r_test]
        .iter()
        .all(|r| r.is_finite() && *r >= 0.0)
        && libm::fabs(r_train + r_dev + r_test - 1.0) <= 1e-9;
    if !valid {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    let n = corpus.sentences.len();
    if n == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let portion = |r: f64| (libm::floor(n as f64 * r + 1e-9) as usize).min(n);
    let n_dev = portion(r_dev);
    let n_test = portion(r_test).min(n - n_dev);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut assignment = alloc::vec![Split::Train; n];
    for &i in &order[..n_dev] {
        assignment[i] = Split::Dev;
    }
    for &i in &order[n_dev..n_dev + n_test] {
        assignment[i] = Split::Test;
    }
    let part = |split: Split| {
        let sentences = corpus
            .sentences
            .iter()
            .zip(&assignment)
            .filter(|(_, s)| **s == split)
            .map(|(sent, _)| sent.clone())
            .collect();
        Corpus::new(&corpus.language_code, split, sentences)
    };
    Ok((part(Split::Train), part(Split::Dev), part(Split::Test)))
}

/// Keeps the first `n_sentences` sentences.
pub fn truncate_train(corpus: &Corpus, n_sentences: NonZeroUsize) -> Corpus {
    let mut out = corpus.clone();
    out.sentences.truncate(n_sentences.get());
    out
}

enum RowId {
    Word(usize),
    Range(usize, usize),
    Empty,
}

fn parse_id(field: &str, line: usize) -> Result<RowId, ConlluError> {
    let invalid = || ConlluError::InvalidId {
        line,
        id: field.to_string(),
    };
    let positive = |s: &str| s.parse::<usize>().ok().filter(|v| *v > 0);
    if let Some((a, b)) = field.split_once('-') {
        let (a, b) = (positive(a).ok_or_else(invalid)?, positive(b).ok_or_else(invalid)?);
        if b < a {
            return Err(invalid());
        }
        Ok(RowId::Range(a, b))
    } else if let Some((a, b)) = field.split_once('.') {
        a.parse::<usize>().map_err(|_| invalid())?;
        positive(b).ok_or_else(invalid)?;
        Ok(RowId::Empty)
    } else {
        positive(field).map(RowId::Word).ok_or_else(invalid)
    }
}

fn parse_feats(
    field: &str,
    line: usize,
    into: &mut BTreeSet<(String, String)>,
) -> Result<(), ConlluError> {
    if field == "_" {
        return Ok(());
    }
    for entry in field.split('|') {
        let malformed = || ConlluError::MalformedFeats {
            line,
            entry: entry.to_string(),
        };
        let (name, values) = entry.split_once('=').ok_or_else(malformed)?;
        if name.is_empty() || values.is_empty() {
            return Err(malformed());
        }
        for value in values.split(',') {
            if value.is_empty() {
                return Err(malformed());
            }
            into.insert((name.to_string(), value.to_string()));
        }
    }
    Ok(())
}

struct WordRow<'a> {
    line: usize,
    id: usize,
    form: &'a str,
    upos: &'a str,
    feats: &'a str,
    head: &'a str,
    deprel: &'a str,
}

enum Row<'a> {
    Word(WordRow<'a>),
    Range {
        line: usize,
        start: usize,
        end: usize,
        form: &'a str,
    },
}

/// Parses a CoNLL-U document into a corpus of probe tokens.
pub fn parse_conllu(
    raw_text: &str,
    language_code: &str,
    split: Split,
) -> Result<Corpus, ConlluError> {
    let text = raw_text.strip_prefix('\u{feff}').unwrap_or(raw_text);
    let mut sentences = Vec::new();
    let mut rows: Vec<Row<'_>> = Vec::new();
    let mut sent_id: Option<String> = None;

    for (idx, raw_line) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() {
            flush_sentence(&mut rows, &mut sent_id, &mut sentences)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim_start().strip_prefix("sent_id") {
                if let Some(id) = id.trim_start().strip_prefix('=') {
                    sent_id = Some(id.trim().to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ConlluError::ColumnCount {
                line: line_no,
                found: cols.len(),
            });
        }
        match parse_id(cols[0], line_no)? {
            RowId::Empty => {}
            RowId::Range(start, end) => rows.push(Row::Range {
                line: line_no,
                start,
                end,
                form: cols[1],
            }),
            RowId::Word(id) => rows.push(Row::Word(WordRow {
                line: line_no,
                id,
                form: cols[1],
                upos: cols[3],
                feats: cols[5],
                head: cols[6],
                deprel: cols[7],
            })),
        }
    }
    flush_sentence(&mut rows, &mut sent_id, &mut sentences)?;
    Ok(Corpus::new(language_code, split, sentences))
}

fn flush_sentence(
    rows: &mut Vec<Row<'_>>,
    sent_id: &mut Option<String>,
    sentences: &mut Vec<Sentence>,
) -> Result<(), ConlluError> {
    if rows.is_empty() {
        *sent_id = None;
        return Ok(());
    }
    let source_id = sent_id
        .take()
        .unwrap_or_else(|| format!("s{}", sentences.len() + 1));
    let tokens = assemble_tokens(rows)?;
    rows.clear();
    sentences.push(Sentence { source_id, tokens });
    Ok(())
}

/// Groups rows into probe tokens, then resolves heads to token positions.
fn assemble_tokens(rows: &[Row<'_>]) -> Result<Vec<Token>, ConlluError> {
    // (range row, component words) per probe token
    let mut groups: Vec<(Option<(usize, &str)>, Vec<&WordRow<'_>>)> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        match &rows[i] {
            Row::Word(w) => {
                groups.push((None, alloc::vec![w]));
                i += 1;
            }
            Row::Range {
                line,
                start,
                end,
                form,
            } => {
                let span = end - start + 1;
                let mut parts = Vec::with_capacity(span);
                for (k, expected) in (*start..=*end).enumerate() {
                    match rows.get(i + 1 + k) {
                        Some(Row::Word(w)) if w.id == expected => parts.push(w),
                        _ => {
                            return Err(ConlluError::MissingComponents {
                                line: *line,
                                range: format!("{start}-{end}"),
                            })
                        }
                    }
                }
                groups.push((Some((*line, *form)), parts));
                i += 1 + span;
            }
        }
    }

    let mut token_of_word: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, (_, words)) in groups.iter().enumerate() {
        for w in words {
            token_of_word.insert(w.id, pos + 1);
        }
    }

    let mut tokens = Vec::with_capacity(groups.len());
    for (range, words) in &groups {
        let mut feats = BTreeSet::new();
        let mut upos_set = BTreeSet::new();
        let mut component_upos = Vec::new();
        for w in words {
            if w.upos == "_" || w.upos.is_empty() {
                return Err(ConlluError::MissingUpos { line: w.line });
            }
            parse_feats(w.feats, w.line, &mut feats)?;
            upos_set.insert(w.upos.to_string());
            if range.is_some() {
                component_upos.push(w.upos.to_string());
            }
        }
        let (first_id, last_id) = (words[0].id, words[words.len() - 1].id);
        let head_word = |w: &WordRow<'_>| w.head.parse::<usize>().ok();
        // syntactic head: first component attached outside the span
        let head_row = words
            .iter()
            .find(|w| match head_word(w) {
                Some(h) => h < first_id || h > last_id,
                None => true,
            })
            .unwrap_or(&words[0]);
        let head_index = match head_row.head {
            "_" => None,
            h => {
                let invalid = || ConlluError::InvalidHead {
                    line: head_row.line,
                    head: h.to_string(),
                };
                match h.parse::<usize>().map_err(|_| invalid())? {
                    0 => Some(0),
                    word => Some(*token_of_word.get(&word).ok_or_else(invalid)?),
                }
            }
        };
        let deprel = match head_row.deprel {
            "_" | "" => None,
            d => Some(d.to_string()),
        };
        tokens.push(Token {
            surface_form: match range {
                Some((_, form)) => form.to_string(),
                None => words[0].form.to_string(),
            },
            upos_set,
            feats,
            deprel,
            head_index,
            is_mwt: range.is_some(),
            component_upos,
        });
    }
    Ok(tokens)
}
