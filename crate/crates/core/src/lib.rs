//! Multilabel morphosyntactic probing of contextual word embeddings.
//!
//! This crate holds the allocation-only algorithmic core: CoNLL-U ingestion
//! with multiword-token flattening, feature-label spaces and multi-hot
//! targets, control-task generation, in-memory embedding caches, linear and
//! MLP-1 probes trained with Adam on mean binary cross-entropy, and the
//! evaluation metrics (micro/macro F1, selectivity, IV/OOV, construction
//! filtered scores, zero-shot transfer cells).
//!
//! File formats, configuration and the command line live in the `morphprobe`
//! companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod conllu;
pub mod control;
pub mod embedding;
pub mod eval;
pub mod labels;
pub mod probe;
pub mod rng;
pub mod synth;

pub use conllu::{parse_conllu, Corpus, Sentence, Split, Token, Vocabulary};
pub use control::ControlAssignment;
pub use embedding::{EmbeddingCache, LayerId, TokenBatch};
pub use eval::{EvalReport, LabelTally, TaskKind, TransferCell};
pub use labels::{FeatureLabel, LabelSpace, TargetVector};
pub use probe::{ProbeKind, ProbeModel, TrainConfig, TrainRecord};
