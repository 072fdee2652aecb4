//! Corpus ingestion: vocabulary with frequency bins, token streams, and
//! training/evaluation windowing.

mod stream;
pub mod synthetic;
mod vocab;
mod windows;

pub use stream::{DataManifest, Split, TokenStream};
pub use synthetic::SyntheticCorpus;
pub use vocab::{bins_from_ends, bins_from_fractions, tokenize, BinRange, TokenId, Vocabulary, EOS, UNK};
pub use windows::{sample_training_windows, sample_window_starts, sample_windows_with, sequential_eval_iter, EvalWindow};
