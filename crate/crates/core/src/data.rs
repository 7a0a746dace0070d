//! File formats and the synthetic corpus.

pub mod checkpoint;
pub mod dataset;
pub mod embeddings;
pub mod features;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{load_dataset, parse_record, read_records, write_records, AnswerRecord, GroupRecord, Tagging};
pub use embeddings::{load_embeddings, save_embeddings};
pub use features::{write_feature_file, FeatureStore};
pub use synth::{make_synthetic_corpus, verify_planted_rule, PlantedRule, SynthCorpus, SynthSpec};
