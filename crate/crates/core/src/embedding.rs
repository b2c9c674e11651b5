//! Word-level embedding caches and token-level batching.

use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Corpus;
use crate::labels::{LabelSpace, TargetVector};
use crate::rng::{derive_seed, rng_from_seed, stable_hash};

/// Probe batch size in tokens.
pub const DEFAULT_BATCH_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("layer {0} is not one of 0, 2, 4, 6, 8, 10, 12")]
    InvalidLayer(i64),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("sentence {sentence}: expected {expected} token vectors, found {found}")]
    Misaligned {
        sentence: usize,
        expected: usize,
        found: usize,
    },
    #[error("expected {expected} sentences, found {found}")]
    SentenceCount { expected: usize, found: usize },
    #[error("vector {token} has length {found}, expected {expected}")]
    DimMismatch {
        token: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at token {token}")]
    NonFinite { token: usize },
    #[error("cannot aggregate an empty list of subword vectors")]
    NoSubwords,
    #[error("synthetic embeddings need dim >= |F| ({dim} < {labels})")]
    DimTooSmall { dim: usize, labels: usize },
    #[error("expected {expected} targets, found {found}")]
    TargetCount { expected: usize, found: usize },
    #[error("target {token} has {found} labels, expected {expected}")]
    TargetWidth {
        token: usize,
        expected: usize,
        found: usize,
    },
}

/// Encoder layer: 0 is the initial embedding layer, then even transformer
/// layers up to 12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct LayerId(u8);

impl LayerId {
    pub const ALL: [LayerId; 7] = [
        LayerId(0),
        LayerId(2),
        LayerId(4),
        LayerId(6),
        LayerId(8),
        LayerId(10),
        LayerId(12),
    ];

    pub fn new(layer: i64) -> Result<Self, EmbeddingError> {
        if (0..=12).contains(&layer) && layer % 2 == 0 {
            Ok(LayerId(layer as u8))
        } else {
            Err(EmbeddingError::InvalidLayer(layer))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for LayerId {
    type Error = EmbeddingError;
    fn try_from(v: i64) -> Result<Self, Self::Error> {
        LayerId::new(v)
    }
}

impl From<LayerId> for i64 {
    fn from(l: LayerId) -> i64 {
        i64::from(l.0)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How subword vectors are combined into one word vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        }
    }
}

pub fn aggregate_subwords(
    subword_vectors: &[&[f32]],
    mode: Aggregation,
) -> Result<Vec<f32>, EmbeddingError> {
    let first = subword_vectors.first().ok_or(EmbeddingError::NoSubwords)?;
    let dim = first.len();
    let mut out = alloc::vec![0.0f32; dim];
    for (token, v) in subword_vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(EmbeddingError::DimMismatch {
                token,
                expected: dim,
                found: v.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += *x;
        }
    }
    if mode == Aggregation::Mean {
        let n = subword_vectors.len() as f32;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

pub fn sum_subwords(subword_vectors: &[&[f32]]) -> Result<Vec<f32>, EmbeddingError> {
    aggregate_subwords(subword_vectors, Aggregation::Sum)
}

/// Per-layer word vectors for a corpus, stored contiguously in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    layer: LayerId,
    dim: usize,
    token_counts: Vec<u32>,
    data: Vec<f32>,
}

impl EmbeddingCache {
    /// Validates lengths and finiteness of a flat buffer.
    pub fn from_parts(
        layer: LayerId,
        dim: usize,
        token_counts: Vec<u32>,
        data: Vec<f32>,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        let n_tokens: usize = token_counts.iter().map(|&c| c as usize).sum();
        if data.len() != n_tokens * dim {
            return Err(EmbeddingError::DimMismatch {
                token: data.len() / dim,
                expected: n_tokens * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite { token: pos / dim });
        }
        Ok(EmbeddingCache {
            layer,
            dim,
            token_counts,
            data,
        })
    }

    /// Builds a cache from one vector per probe token of `corpus`.
    pub fn for_corpus(
        corpus: &Corpus,
        layer: LayerId,
        dim: usize,
        vectors: &[Vec<f32>],
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        let expected = corpus.token_count();
        if vectors.len() != expected {
            // report the first sentence boundary that desynchronizes
            let mut seen = 0;
            let last = corpus.sentences.len().saturating_sub(1);
            for (i, s) in corpus.sentences.iter().enumerate() {
                let n = s.tokens.len();
                if seen + n > vectors.len() || i == last {
                    return Err(EmbeddingError::Misaligned {
                        sentence: i,
                        expected: n,
                        found: vectors.len() - seen.min(vectors.len()),
                    });
                }
                seen += n;
            }
            return Err(EmbeddingError::SentenceCount {
                expected: 0,
                found: vectors.len(),
            });
        }
        let mut data = Vec::with_capacity(expected * dim);
        for (token, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::DimMismatch {
                    token,
                    expected: dim,
                    found: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        let token_counts = corpus
            .sentences
            .iter()
            .map(|s| s.tokens.len() as u32)
            .collect();
        Self::from_parts(layer, dim, token_counts, data)
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_counts(&self) -> &[u32] {
        &self.token_counts
    }

    pub fn n_sentences(&self) -> usize {
        self.token_counts.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[f32]> + '_ {
        let dim = self.dim;
        let mut offset = 0;
        self.token_counts.iter().map(move |&c| {
            let start = offset;
            offset += c as usize * dim;
            &self.data[start..offset]
        })
    }

    /// Checks the per-sentence token counts against the corpus.
    pub fn check_alignment(&self, corpus: &Corpus) -> Result<(), EmbeddingError> {
        if self.token_counts.len() != corpus.sentences.len() {
            return Err(EmbeddingError::SentenceCount {
                expected: corpus.sentences.len(),
                found: self.token_counts.len(),
            });
        }
        for (i, (s, &c)) in corpus.sentences.iter().zip(&self.token_counts).enumerate() {
            if s.tokens.len() != c as usize {
                return Err(EmbeddingError::Misaligned {
                    sentence: i,
                    expected: s.tokens.len(),
                    found: c as usize,
                });
            }
        }
        Ok(())
    }

    /// Sentences in the given order; a partial order selects a subset.
    pub fn reorder(&self, order: &[usize]) -> Self {
        let offsets: Vec<usize> = self
            .token_counts
            .iter()
            .scan(0usize, |acc, &c| {
                let start = *acc;
                *acc += c as usize * self.dim;
                Some(start)
            })
            .collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut token_counts = Vec::with_capacity(order.len());
        for &i in order {
            let len = self.token_counts[i] as usize * self.dim;
            data.extend_from_slice(&self.data[offsets[i]..offsets[i] + len]);
            token_counts.push(self.token_counts[i]);
        }
        EmbeddingCache {
            layer: self.layer,
            dim: self.dim,
            token_counts,
            data,
        }
    }
}

/// Concatenates corpora (with their caches, all at the same layer) and
/// shuffles the sentences with `seed`. Caches stay aligned with the pooled
/// corpus.
pub fn pool_corpora(
    language_code: &str,
    parts: &[(&Corpus, &[&EmbeddingCache])],
    seed: u64,
) -> Result<(Corpus, Vec<EmbeddingCache>), EmbeddingError> {
    let n_layers = parts.first().map(|p| p.1.len()).unwrap_or(0);
    let mut sentences = Vec::new();
    let mut caches: Vec<EmbeddingCache> = Vec::with_capacity(n_layers);
    for (corpus, layer_caches) in parts {
        for c in layer_caches.iter() {
            c.check_alignment(corpus)?;
        }
        sentences.extend(corpus.sentences.iter().cloned());
        for (k, c) in layer_caches.iter().enumerate() {
            match caches.get_mut(k) {
                Some(acc) => {
                    if acc.dim != c.dim {
                        return Err(EmbeddingError::DimMismatch {
                            token: 0,
                            expected: acc.dim,
                            found: c.dim,
                        });
                    }
                    acc.token_counts.extend_from_slice(&c.token_counts);
                    acc.data.extend_from_slice(&c.data);
                }
                None => caches.push((*c).clone()),
            }
        }
    }
    let split = parts.first().map(|p| p.0.split).unwrap_or(crate::conllu::Split::Train);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let pooled = Corpus {
        language_code: language_code.to_string(),
        split,
        sentences: order.iter().map(|&i| sentences[i].clone()).collect(),
    };
    let caches = caches.iter().map(|c| c.reorder(&order)).collect();
    Ok((pooled, caches))
}

/// Rank of a row-major `rows x cols` matrix's columns, via modified
/// Gram-Schmidt.
fn column_rank(m: &[f64], rows: usize, cols: usize) -> usize {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| m[i * cols + j]).collect();
        let norm0 = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-8 * norm0.max(1.0) {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis.len()
}

/// Synthetic caches with linearly recoverable labels: each token vector is
/// `M y + noise * e`, with `M` a seeded Gaussian `dim x |F|` matrix of full
/// column rank (one per layer) and `e` standard Gaussian.
pub fn synth_embeddings(
    corpus: &Corpus,
    space: &LabelSpace,
    dim: usize,
    seed: u64,
    noise: f64,
    layers: &[LayerId],
) -> Result<Vec<EmbeddingCache>, EmbeddingError> {
    let n_labels = space.len();
    if dim < n_labels {
        return Err(EmbeddingError::DimTooSmall {
            dim,
            labels: n_labels,
        });
    }
    let targets = space.encode_corpus(corpus);
    // the mixing matrix depends on (seed, layer) only; the noise stream also
    // on the corpus, so different corpora do not share noise draws
    let noise_key = stable_hash(&alloc::format!("{}/{}", corpus.language_code, corpus.split));
    let token_counts: Vec<u32> = corpus
        .sentences
        .iter()
        .map(|s| s.tokens.len() as u32)
        .collect();
    layers
        .iter()
        .map(|&layer| {
            let layer_seed = derive_seed(seed, u64::from(layer.get()));
            let mut draw = 0u64;
            let mixing = loop {
                let mut rng = rng_from_seed(derive_seed(layer_seed, draw));
                let m: Vec<f64> = (0..dim * n_labels)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                if column_rank(&m, dim, n_labels) == n_labels {
                    break m;
                }
                draw += 1;
            };
            let mut noise_rng = rng_from_seed(derive_seed(layer_seed, noise_key));
            let mut data = Vec::with_capacity(targets.len() * dim);
            for y in &targets {
                for i in 0..dim {
                    let row = &mixing[i * n_labels..(i + 1) * n_labels];
                    let signal: f64 = y.ones().map(|j| row[j]).sum();
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    data.push((signal + noise * e) as f32);
                }
            }
            EmbeddingCache::from_parts(layer, dim, token_counts.clone(), data)
        })
        .collect()
}

/// Flattened training data: one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    n_labels: usize,
    inputs: Vec<f32>,
    targets: Vec<bool>,
}

impl Dataset {
    pub fn new(cache: &EmbeddingCache, targets: &[TargetVector], n_labels: usize) -> Result<Self, EmbeddingError> {
        Self::from_rows(cache.dim, n_labels, cache.data.clone(), targets)
    }

    pub fn from_rows(
        dim: usize,
        n_labels: usize,
        inputs: Vec<f32>,
        targets: &[TargetVector],
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        let n = inputs.len() / dim;
        if inputs.len() % dim != 0 {
            return Err(EmbeddingError::DimMismatch {
                token: n,
                expected: dim,
                found: inputs.len() % dim,
            });
        }
        if targets.len() != n {
            return Err(EmbeddingError::TargetCount {
                expected: n,
                found: targets.len(),
            });
        }
        let mut flat = Vec::with_capacity(n * n_labels);
        for (token, t) in targets.iter().enumerate() {
            if t.len() != n_labels {
                return Err(EmbeddingError::TargetWidth {
                    token,
                    expected: n_labels,
                    found: t.len(),
                });
            }
            flat.extend_from_slice(&t.bits);
        }
        Ok(Dataset {
            dim,
            n_labels,
            inputs,
            targets: flat,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> &[bool] {
        &self.targets[i * self.n_labels..(i + 1) * self.n_labels]
    }

    /// Gathers the rows named by `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> TokenBatch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut targets = Vec::with_capacity(indices.len() * self.n_labels);
        for &i in indices {
            inputs.extend(self.input(i).iter().map(|&x| f64::from(x)));
            targets.extend(self.target(i).iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        TokenBatch {
            rows: indices.len(),
            dim: self.dim,
            n_labels: self.n_labels,
            inputs,
            targets,
        }
    }

    /// Token-level batches over `order`, each at most `batch_size` rows.
    pub fn batches<'a>(
        &'a self,
        order: &'a [usize],
        batch_size: usize,
    ) -> impl Iterator<Item = TokenBatch> + 'a {
        order.chunks(batch_size.max(1)).map(|idx| self.gather(idx))
    }
}

/// `B x d` inputs and `B x |F|` targets, row-major, no padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub rows: usize,
    pub dim: usize,
    pub n_labels: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TokenBatch {
    pub fn input(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.dim..(r + 1) * self.dim]
    }

    pub fn target(&self, r: usize) -> &[f64] {
        &self.targets[r * self.n_labels..(r + 1) * self.n_labels]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{Sentence, Split, Token};
    use crate::labels::FeatureLabel;
    use alloc::string::String;
    use alloc::vec;

    fn corpus(lens: &[usize]) -> Corpus {
        let sentences = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| Sentence {
                source_id: alloc::format!("{i}"),
                tokens: (0..n)
                    .map(|k| Token::word("w", if k % 2 == 0 { "NOUN" } else { "VERB" }, &[]))
                    .collect(),
            })
            .collect();
        Corpus::new("xx", Split::Train, sentences)
    }

    #[test]
    fn layer_ids() {
        assert!(LayerId::new(6).is_ok());
        assert!(LayerId::new(7).is_err());
        assert!(LayerId::new(14).is_err());
        assert!(LayerId::new(-2).is_err());
        assert_eq!(LayerId::ALL.len(), 7);
    }

    #[test]
    fn subword_aggregation() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        assert_eq!(sum_subwords(&[&a]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sum_subwords(&[&a, &b]).unwrap(), vec![4.0, 6.0]);
        assert_eq!(
            aggregate_subwords(&[&a, &b], Aggregation::Mean).unwrap(),
            vec![2.0, 3.0]
        );
        assert_eq!(sum_subwords(&[]), Err(EmbeddingError::NoSubwords));
        assert!(sum_subwords(&[&a, &[1.0f32][..]]).is_err());
        assert_eq!(Aggregation::default(), Aggregation::Sum);
    }

    #[test]
    fn misaligned_vectors_rejected() {
        let c = corpus(&[2, 3]);
        let l = LayerId::new(0).unwrap();
        let v = vec![vec![0.0f32; 4]; 4];
        assert!(matches!(
            EmbeddingCache::for_corpus(&c, l, 4, &v),
            Err(EmbeddingError::Misaligned { sentence: 1, .. })
        ));
        let mut v = vec![vec![0.0f32; 4]; 5];
        v[3][1] = f32::NAN;
        assert_eq!(
            EmbeddingCache::for_corpus(&c, l, 4, &v),
            Err(EmbeddingError::NonFinite { token: 3 })
        );
        let cache = EmbeddingCache::for_corpus(&c, l, 4, &vec![vec![1.0f32; 4]; 5]).unwrap();
        assert!(cache.check_alignment(&c).is_ok());
        assert!(cache.check_alignment(&corpus(&[3, 2])).is_err());
        assert!(cache.check_alignment(&corpus(&[5])).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_checked() {
        let c = corpus(&[3, 4]);
        let space = LabelSpace::new(
            [FeatureLabel::upos("NOUN"), FeatureLabel::upos("VERB")],
            [String::from("xx")],
        )
        .unwrap();
        let layers = [LayerId::new(0).unwrap(), LayerId::new(6).unwrap()];
        let a = synth_embeddings(&c, &space, 3, 9, 0.1, &layers).unwrap();
        let b = synth_embeddings(&c, &space, 3, 9, 0.1, &layers).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].data(), a[1].data());
        assert!(a[0].check_alignment(&c).is_ok());
        assert_eq!(
            synth_embeddings(&c, &space, 1, 9, 0.1, &layers),
            Err(EmbeddingError::DimTooSmall { dim: 1, labels: 2 })
        );
        // noiseless: identical labels give identical vectors
        let z = synth_embeddings(&c, &space, 3, 9, 0.0, &layers[..1]).unwrap();
        assert_eq!(z[0].token(0), z[0].token(2));
        assert_ne!(z[0].token(0), z[0].token(1));
    }

    #[test]
    fn rank_check() {
        assert_eq!(column_rank(&[1.0, 2.0, 2.0, 4.0], 2, 2), 1);
        assert_eq!(column_rank(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3, 2), 2);
    }

    #[test]
    fn pooling_keeps_alignment() {
        let (a, b) = (corpus(&[1, 2]), corpus(&[3]));
        let l = LayerId::new(2).unwrap();
        let mk = |c: &Corpus, base: f32| {
            let v: Vec<Vec<f32>> = (0..c.token_count()).map(|i| vec![base + i as f32]).collect();
            EmbeddingCache::for_corpus(c, l, 1, &v).unwrap()
        };
        let (ca, cb) = (mk(&a, 0.0), mk(&b, 100.0));
        let (pooled, caches) =
            pool_corpora("multi", &[(&a, &[&ca][..]), (&b, &[&cb][..])], 5).unwrap();
        assert_eq!(pooled.token_count(), a.token_count() + b.token_count());
        assert!(caches[0].check_alignment(&pooled).is_ok());
        let mut values: Vec<i32> = caches[0].data().iter().map(|&x| x as i32).collect();
        values.sort();
        assert_eq!(values, vec![0, 1, 2, 100, 101, 102]);
    }

    #[test]
    fn batches_cover_every_token_once() {
        let c = corpus(&[3, 4]);
        let cache = EmbeddingCache::for_corpus(
            &c,
            LayerId::new(0).unwrap(),
            2,
            &(0..7).map(|i| vec![i as f32, 0.0]).collect::<Vec<_>>(),
        )
        .unwrap();
        let targets = vec![TargetVector::zeros(1); 7];
        let ds = Dataset::new(&cache, &targets, 1).unwrap();
        let order = [6, 0, 5, 1, 4, 2, 3];
        let rows: Vec<f64> = ds
            .batches(&order, 3)
            .inspect(|b| assert!(b.rows <= 3))
            .flat_map(|b| (0..b.rows).map(move |r| b.input(r)[0]).collect::<Vec<_>>())
            .collect();
        assert_eq!(rows, order.iter().map(|&i| i as f64).collect::<Vec<_>>());
        assert!(Dataset::new(&cache, &targets[..6], 1).is_err());
    }
}
