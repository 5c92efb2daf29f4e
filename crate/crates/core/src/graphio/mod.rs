//! Corpus records, line-delimited JSON ingestion, vocabulary, and the
//! synthetic scene generator.

mod records;
pub mod synth;
mod vocab;

pub use records::{
    load_corpus, write_corpus, Corpus, ImageRecord, PairSample, Region, RetrievalSplit, Split,
    TextRecord, IMAGES_FILE, PAIRS_FILE, TEXTS_FILE,
};
pub use synth::{generate_synthetic, generate_synthetic_with, synthesize_to_dir, SynthOptions, SynthReport};
pub use vocab::{Vocabulary, PAD_INDEX, PAD_TOKEN, UNK_INDEX, UNK_TOKEN};
