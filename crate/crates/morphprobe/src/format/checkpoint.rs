//! Probe checkpoints (`.mpck`).
//!
//! ```text
//! "MPCK" | version u32 = 1 | kind u8 (0 linear, 1 mlp1) | dim u32 | labels u32
//! | hidden u32 | label-space sha256 [32] | params u64 | params x f64
//! crc32 u32
//! ```

use morphprobe_core::labels::LabelSpace;
use morphprobe_core::probe::{ProbeKind, ProbeModel};
use sha2::{Digest, Sha256};

use super::{open, FormatError, Writer};

pub const MAGIC: [u8; 4] = *b"MPCK";
pub const VERSION: u32 = 1;

/// SHA-256 over the rendered labels in order, each followed by a newline.
pub fn label_space_digest(space: &LabelSpace) -> [u8; 32] {
    let mut h = Sha256::new();
    for label in space.labels() {
        h.update(label.render().as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

pub fn encode_checkpoint(model: &ProbeModel, space: &LabelSpace) -> Vec<u8> {
    assert_eq!(model.n_labels, space.len(), "checkpoint label space does not fit the model");
    let mut w = Writer::default();
    let kind = match model.kind {
        ProbeKind::Linear => 0,
        ProbeKind::Mlp1 { .. } => 1,
    };
    w.bytes(&MAGIC)
        .u32(VERSION)
        .u8(kind)
        .u32(model.dim as u32)
        .u32(model.n_labels as u32)
        .u32(model.kind.hidden() as u32)
        .bytes(&label_space_digest(space))
        .u64(model.params.len() as u64);
    for &p in &model.params {
        w.f64(p);
    }
    w.finish()
}

/// Decodes a checkpoint and checks that it was trained against `space`.
pub fn decode_checkpoint(bytes: &[u8], space: &LabelSpace) -> Result<ProbeModel, FormatError> {
    let mut r = open(bytes, MAGIC, VERSION)?;
    let kind_tag = r.u8()?;
    let dim = r.u32()? as usize;
    let n_labels = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let kind = match (kind_tag, hidden) {
        (0, 0) => ProbeKind::Linear,
        (1, h) if h > 0 => ProbeKind::Mlp1 { hidden: h },
        _ => return Err(FormatError::Invalid(format!("probe kind {kind_tag} with hidden width {hidden}"))),
    };
    let digest = r.take(32)?;
    let expected = label_space_digest(space);
    if digest != expected {
        return Err(FormatError::LabelDigest {
            expected: hex::encode(expected),
            found: hex::encode(digest),
        });
    }
    let n = r.u64()? as usize;
    if n != ProbeModel::param_count(kind, dim, n_labels) {
        return Err(FormatError::Invalid(format!("{n} parameters for {kind:?} with d={dim}, |F|={n_labels}")));
    }
    let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    ProbeModel::from_params(kind, dim, n_labels, params).map_err(|e| FormatError::Invalid(e.to_string()))
}
