//! Multiple-choice QA over a knowledge graph: context encoding, static and
//! generated path evidence, attention pooling and choice scoring.

mod data;
mod model;
mod pipeline;
mod retrieval;

pub use data::{ground, read_dataset, write_dataset, Grounding, QaExample};
pub use model::{
    aggregate_knowledge, argmax, batch_loss, encode_contexts, encode_static_paths, example_loss, forward, text_words,
    ChoiceEvidence, Forward, Layout, Prepared, Variant, WordVocab, SEP_WORD, UNK,
};
pub use pipeline::{
    build_evidence, fit, prepare, train_qa, EvidenceSource, EvidenceStats, Prediction, QaConfig, QaEpoch, QaEvaluation,
    QaModel, QaReport,
};
pub use retrieval::{retrieve_static_paths, DEFAULT_PATH_CAP, MAX_RETRIEVAL_HOPS};
