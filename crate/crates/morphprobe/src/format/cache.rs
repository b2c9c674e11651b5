//! Embedding cache files (`.mpec`) and their JSON manifests.
//!
//! ```text
//! "MPEC" | version u32 = 1 | dim u32 | layer_id i32 | sentences u64
//! per sentence: tokens u32 | tokens x dim f32
//! crc32 u32
//! ```

use morphprobe_core::embedding::{Aggregation, EmbeddingCache, LayerId};
use serde::{Deserialize, Serialize};

use super::{open, FormatError, Writer};

pub const MAGIC: [u8; 4] = *b"MPEC";
pub const VERSION: u32 = 1;
/// Bytes before the first sentence record.
pub const HEADER_LEN: usize = 24;

pub fn encode_cache(cache: &EmbeddingCache) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&MAGIC)
        .u32(VERSION)
        .u32(cache.dim() as u32)
        .i32(i32::from(cache.layer().get()))
        .u64(cache.n_sentences() as u64);
    for (count, sentence) in cache.token_counts().iter().zip(cache.sentences()) {
        w.u32(*count);
        for &x in sentence {
            w.f32(x);
        }
    }
    w.finish()
}

pub fn decode_cache(bytes: &[u8]) -> Result<EmbeddingCache, FormatError> {
    let mut r = open(bytes, MAGIC, VERSION)?;
    let dim = r.u32()? as usize;
    let layer_raw = r.i32()?;
    let layer = LayerId::new(i64::from(layer_raw)).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let n_sentences = r.u64()?;
    let mut token_counts = Vec::new();
    let mut data = Vec::with_capacity(r.remaining() / 4);
    for _ in 0..n_sentences {
        let count = r.u32()?;
        token_counts.push(count);
        let n = (count as usize)
            .checked_mul(dim)
            .ok_or_else(|| FormatError::Invalid("token count overflows".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| FormatError::Invalid("token count overflows".into()))?)?;
        data.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))));
    }
    r.finish()?;
    EmbeddingCache::from_parts(layer, dim, token_counts, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

/// A token the extractor could not embed normally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFlag {
    pub sentence: usize,
    pub token: Option<usize>,
    pub reason: String,
}

/// Sidecar describing where a cache came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub corpus_path: String,
    pub language_code: String,
    pub extractor: String,
    pub aggregation: Aggregation,
    pub layer: LayerId,
    pub dim: usize,
    pub sentences: usize,
    pub tokens: usize,
    #[serde(default)]
    pub flags: Vec<ManifestFlag>,
}

impl CacheManifest {
    pub fn describe(cache: &EmbeddingCache, corpus_path: &str, language_code: &str, extractor: &str) -> Self {
        CacheManifest {
            corpus_path: corpus_path.to_string(),
            language_code: language_code.to_string(),
            extractor: extractor.to_string(),
            aggregation: Aggregation::Sum,
            layer: cache.layer(),
            dim: cache.dim(),
            sentences: cache.n_sentences(),
            tokens: cache.n_tokens(),
            flags: Vec::new(),
        }
    }

    /// Whether the manifest's shape fields agree with `cache`.
    pub fn matches(&self, cache: &EmbeddingCache) -> bool {
        self.layer == cache.layer()
            && self.dim == cache.dim()
            && self.sentences == cache.n_sentences()
            && self.tokens == cache.n_tokens()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(layer: i64, dim: usize, counts: &[u32]) -> EmbeddingCache {
        let n: usize = counts.iter().map(|&c| c as usize).sum();
        let data = (0..n * dim).map(|i| i as f32 * 0.25 - 3.0).collect();
        EmbeddingCache::from_parts(LayerId::new(layer).unwrap(), dim, counts.to_vec(), data).unwrap()
    }

    #[test]
    fn golden_header_for_d768_two_sentences() {
        let c = cache(6, 768, &[3, 1]);
        let bytes = encode_cache(&c);
        let expect_header: [u8; HEADER_LEN] = [
            b'M', b'P', b'E', b'C', // magic
            1, 0, 0, 0, // version
            0x00, 0x03, 0, 0, // dim 768
            6, 0, 0, 0, // layer
            2, 0, 0, 0, 0, 0, 0, 0, // sentences
        ];
        assert_eq!(bytes[..HEADER_LEN], expect_header);
        assert_eq!(bytes[HEADER_LEN..HEADER_LEN + 4], [3, 0, 0, 0]);
        let second = HEADER_LEN + 4 + 3 * 768 * 4;
        assert_eq!(bytes[second..second + 4], [1, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 4 + 4 * 768 * 4 + 4);
        assert_eq!(decode_cache(&bytes).unwrap(), c);
    }

    #[test]
    fn layer_zero_and_empty_sentences_roundtrip() {
        let c = cache(0, 1, &[1, 0, 2]);
        assert_eq!(decode_cache(&encode_cache(&c)).unwrap(), c);
    }

    #[test]
    fn distinct_errors_for_magic_version_checksum() {
        let bytes = encode_cache(&cache(2, 4, &[2]));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_cache(&magic), Err(FormatError::BadMagic { .. })));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(decode_cache(&version), Err(FormatError::UnsupportedVersion { found: 2, .. })));
        assert!(matches!(
            decode_cache(&bytes[..bytes.len() - 9]),
            Err(FormatError::Checksum { .. })
        ));
    }

    #[test]
    fn rejects_invalid_layer_with_valid_checksum() {
        let mut w = Writer::default();
        w.bytes(&MAGIC).u32(VERSION).u32(1).i32(3).u64(0);
        assert!(matches!(decode_cache(&w.finish()), Err(FormatError::Invalid(_))));
    }

    #[test]
    fn manifest_json_shape() {
        let c = cache(4, 2, &[1]);
        let m = CacheManifest::describe(&c, "he/train.conllu", "he", "synthetic");
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["aggregation"], "sum");
        assert_eq!(v["layer"], 4);
        assert!(m.matches(&c));
        let back: CacheManifest = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
