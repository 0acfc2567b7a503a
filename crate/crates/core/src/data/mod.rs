//! Embedding container, class manifest and open-set protocol, and the
//! synthetic generator.

mod container;
mod protocol;
mod synth;

pub use container::{
    decode, encode, read_embeddings, write_embeddings, EmbeddingFile, EmbeddingRecord,
    FORMAT_VERSION, MAGIC, UNLABELED,
};
pub use protocol::{
    class_context_from_records, class_context_to_records, source_samples, split_protocol,
    target_samples, Manifest, OpenSetProtocol, Sample,
};
pub use synth::{synth_generate, SynthConfig, SynthData};
