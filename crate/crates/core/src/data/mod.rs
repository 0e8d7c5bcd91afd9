//! Corpus ingestion, tokenization, train/validation splitting, seeded batch
//! orders and retrospective per-batch evaluation.

mod corpus;
mod order;
mod synthetic;

pub use corpus::{load_corpus, write_pretokenized, ByteTokenizer, Dataset, DataConfig, TokenCorpus, Tokenizer};
pub use order::{moving_average, permute, permute_with_repetition, retrospective_eval, series_to_csv, BatchPlan};
pub use synthetic::synthetic_text;
