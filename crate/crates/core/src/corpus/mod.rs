//! Synthetic paired prompt/grid/caption task with exact checkers, and a
//! pure-text grammar corpus.

pub mod io;
pub mod task;
pub mod text;

pub use io::{read_pairs, read_text, write_pairs, write_text, CorpusHeader};
pub use task::{
    generate_pairs, verify_caption, verify_image, Attributes, CaptionVerdict, PairExample, ToyTaskSpec,
};
pub use text::{accepts, generate_pure_text};
