use std::collections::BTreeMap;

use morphprobe::format::cache::{decode_cache, encode_cache};
use morphprobe::format::checkpoint::{decode_checkpoint, encode_checkpoint};
use morphprobe::format::control::{decode_control, encode_control, ControlManifest};
use morphprobe::format::FormatError;
use morphprobe_core::control::ControlAssignment;
use morphprobe_core::embedding::{EmbeddingCache, LayerId};
use morphprobe_core::labels::{FeatureLabel, LabelSpace, TargetVector};
use morphprobe_core::probe::{ProbeKind, ProbeModel};
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(|b| f32::from_bits(b & 0xBFFF_FFFF))
}

fn cache() -> impl Strategy<Value = EmbeddingCache> {
    (1usize..6, prop::collection::vec(0u32..5, 0..6), 0usize..7).prop_flat_map(|(dim, counts, layer)| {
        let n: usize = counts.iter().map(|&c| c as usize).sum();
        prop::collection::vec(finite_f32(), n * dim).prop_map(move |data| {
            EmbeddingCache::from_parts(LayerId::ALL[layer], dim, counts.clone(), data).unwrap()
        })
    })
}

fn space(n: usize) -> LabelSpace {
    LabelSpace::new((0..n).map(|j| FeatureLabel::feat("Case", &format!("C{j}"))), ["xx".to_string()]).unwrap()
}

fn model() -> impl Strategy<Value = ProbeModel> {
    (1usize..5, 1usize..5, prop_oneof![Just(ProbeKind::Linear), (1usize..4).prop_map(|hidden| ProbeKind::Mlp1 { hidden })])
        .prop_flat_map(|(dim, labels, kind)| {
            let n = ProbeModel::param_count(kind, dim, labels);
            prop::collection::vec(any::<f64>(), n).prop_map(move |params| ProbeModel {
                kind,
                dim,
                n_labels: labels,
                params,
            })
        })
}

fn control() -> impl Strategy<Value = ControlAssignment> {
    (1usize..20).prop_flat_map(|labels| {
        prop::collection::btree_map(
            "\\PC{1,6}",
            prop::collection::vec(any::<bool>(), labels).prop_map(TargetVector::from),
            0..12,
        )
        .prop_map(move |vectors: BTreeMap<String, TargetVector>| ControlAssignment {
            vectors,
            marginals: vec![0.5; labels],
            seed: labels as u64 * 31,
        })
    })
}

fn manifest_for(ctl: &ControlAssignment) -> ControlManifest {
    ControlManifest {
        seed: ctl.seed,
        floor: 0.001,
        marginals: ctl.marginals.clone(),
        labels: (0..ctl.n_labels()).map(|j| format!("Case=C{j}")).collect(),
        types: ctl.vectors.len(),
    }
}

proptest! {
    #[test]
    fn cache_roundtrips_bit_exact(c in cache()) {
        let back = decode_cache(&encode_cache(&c)).unwrap();
        prop_assert_eq!(back.layer(), c.layer());
        prop_assert_eq!(back.dim(), c.dim());
        prop_assert_eq!(back.token_counts(), c.token_counts());
        let bits = |x: &EmbeddingCache| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn any_flipped_byte_is_detected(c in cache(), at in any::<prop::sample::Index>(), mask in 1u8..) {
        let mut bytes = encode_cache(&c);
        let i = at.index(bytes.len());
        bytes[i] ^= mask;
        prop_assert!(decode_cache(&bytes).is_err());
    }

    #[test]
    fn truncated_cache_is_rejected(c in cache(), at in any::<prop::sample::Index>()) {
        let bytes = encode_cache(&c);
        let cut = at.index(bytes.len());
        prop_assert!(decode_cache(&bytes[..cut]).is_err());
    }

    #[test]
    fn checkpoint_roundtrips(m in model()) {
        let sp = space(m.n_labels);
        let back = decode_checkpoint(&encode_checkpoint(&m, &sp), &sp).unwrap();
        prop_assert_eq!(back.kind, m.kind);
        prop_assert_eq!(back.dim, m.dim);
        let bits = |x: &ProbeModel| x.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn checkpoint_is_bound_to_its_label_space(m in model()) {
        let bytes = encode_checkpoint(&m, &space(m.n_labels));
        let other = LabelSpace::new(
            (0..m.n_labels).map(|j| FeatureLabel::feat("Number", &format!("N{j}"))),
            ["xx".to_string()],
        ).unwrap();
        let is_digest_error = matches!(decode_checkpoint(&bytes, &other), Err(FormatError::LabelDigest { .. }));
        prop_assert!(is_digest_error);
    }

    #[test]
    fn control_roundtrips(ctl in control()) {
        let back = decode_control(&encode_control(&ctl), &manifest_for(&ctl)).unwrap();
        prop_assert_eq!(back.vectors, ctl.vectors);
        prop_assert_eq!(back.seed, ctl.seed);
    }
}
