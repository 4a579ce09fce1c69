//! Synthetic person-description corpus: attribute-coded patch grids paired
//! with sentences that mix attribute words and filler words.

mod attributes;
mod generate;
mod io;
mod vocab;

pub use attributes::{AttributeSlot, AttributeSpec};
pub use generate::{generate_corpus, Corpus, CorpusOptions, SampleRecord};
pub use io::{ratio_vacuous, read_corpus, read_vocab, write_corpus, CORPUS_FILE, PATCH_FILE, PATCH_MAGIC, PATCH_VERSION, SPEC_FILE, VOCAB_FILE};
pub use vocab::{special, Vocabulary, WordClass};
