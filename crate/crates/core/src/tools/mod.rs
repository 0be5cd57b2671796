//! Dataset procedures: word-vector fold splitting, pair-fold classification
//! and hypernym-based lexical profiles.

mod folds;
mod lexical;
mod vectors;

pub use folds::{
    camel_tokens, classify_pairs, descriptor_for, pairs_from_instances, split_folds,
    CategoryInput, FoldRow, ObjectPair, PairFoldReport, PairUsability, SplitConfig, SplitOutcome,
    table_percent,
};
pub use lexical::{lexical_profile, normalize_token, HypernymClosure, LexicalProfile, ModeProfile};
pub use vectors::{cosine, WordVectorTable};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{locator}: {message}")]
    Malformed { locator: String, message: String },
    #[error("category `{0}` has no fold assignment")]
    Unassigned(String),
    #[error("fold `{0}` has no anchor word in the vector table")]
    NoAnchor(String),
    #[error("invalid split config: {0}")]
    Config(String),
}

impl ToolError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ToolError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
