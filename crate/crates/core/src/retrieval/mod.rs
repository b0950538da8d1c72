//! Out-of-sample binarization, Hamming search and retrieval metrics.

pub mod codes;
pub mod eval;

pub use codes::{binarize, hamming_distance, hamming_rank, load_codes, write_codes, CodeMatrix};
pub use eval::{average_precision, evaluate, interpolated_pr, precision_at, RetrievalReport};
