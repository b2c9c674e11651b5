//! Control-task assignments (`.mpct`) plus a JSON manifest for audit.
//!
//! ```text
//! "MPCT" | version u32 = 1 | labels u32 | seed u64 | types u64
//! per type (sorted): byte length u32 | UTF-8 form | ceil(labels / 8) bitset bytes, LSB first
//! crc32 u32
//! ```

use std::collections::BTreeMap;

use morphprobe_core::control::ControlAssignment;
use morphprobe_core::labels::TargetVector;
use serde::{Deserialize, Serialize};

use super::{open, FormatError, Writer};

pub const MAGIC: [u8; 4] = *b"MPCT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlManifest {
    pub seed: u64,
    pub floor: f64,
    pub marginals: Vec<f64>,
    /// Rendered labels, one per marginal.
    pub labels: Vec<String>,
    pub types: usize,
}

pub fn encode_control(ctl: &ControlAssignment) -> Vec<u8> {
    let n_labels = ctl.n_labels();
    let mut w = Writer::default();
    w.bytes(&MAGIC)
        .u32(VERSION)
        .u32(n_labels as u32)
        .u64(ctl.seed)
        .u64(ctl.vectors.len() as u64);
    for (form, bits) in &ctl.vectors {
        w.u32(form.len() as u32).bytes(form.as_bytes());
        let mut packed = vec![0u8; n_labels.div_ceil(8)];
        for j in bits.ones() {
            packed[j / 8] |= 1 << (j % 8);
        }
        w.bytes(&packed);
    }
    w.finish()
}

pub fn decode_control(bytes: &[u8], manifest: &ControlManifest) -> Result<ControlAssignment, FormatError> {
    let mut r = open(bytes, MAGIC, VERSION)?;
    let n_labels = r.u32()? as usize;
    let seed = r.u64()?;
    if n_labels != manifest.marginals.len() || seed != manifest.seed {
        return Err(FormatError::Invalid(format!(
            "file has {n_labels} labels and seed {seed}, manifest has {} and {}",
            manifest.marginals.len(),
            manifest.seed
        )));
    }
    let n_types = r.u64()?;
    let mut vectors = BTreeMap::new();
    for _ in 0..n_types {
        let len = r.u32()? as usize;
        let form = std::str::from_utf8(r.take(len)?)
            .map_err(|e| FormatError::Invalid(e.to_string()))?
            .to_string();
        let packed = r.take(n_labels.div_ceil(8))?;
        let bits: Vec<bool> = (0..n_labels).map(|j| packed[j / 8] >> (j % 8) & 1 == 1).collect();
        if vectors.insert(form.clone(), TargetVector::from(bits)).is_some() {
            return Err(FormatError::Invalid(format!("duplicate word type {form:?}")));
        }
    }
    r.finish()?;
    Ok(ControlAssignment {
        vectors,
        marginals: manifest.marginals.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use morphprobe_core::conllu::Vocabulary;
    use morphprobe_core::control::generate_control;

    #[test]
    fn roundtrip_with_odd_label_count() {
        let vocab: Vocabulary = ["der", "Haus", "ה", "."].iter().map(|s| s.to_string()).collect();
        let marginals = vec![0.5, 0.2, 0.9, 0.001, 0.4, 0.6, 0.3, 0.5, 0.7, 0.1, 0.8];
        let ctl = generate_control(&vocab, &marginals, 7).unwrap();
        let manifest = ControlManifest {
            seed: 7,
            floor: 0.001,
            marginals: marginals.clone(),
            labels: (0..marginals.len()).map(|j| format!("F=v{j}")).collect(),
            types: 4,
        };
        let bytes = encode_control(&ctl);
        assert_eq!(decode_control(&bytes, &manifest).unwrap(), ctl);

        let wrong_seed = ControlManifest { seed: 8, ..manifest };
        assert!(matches!(decode_control(&bytes, &wrong_seed), Err(FormatError::Invalid(_))));
    }
}
