//! Referent selection between two 3D objects from a referring expression,
//! over precomputed language and multi-view image embeddings.
//!
//! - [`data`]: objects, expressions, task instances, folds and dataset files
//! - [`store`]: the binary feature store
//! - [`heads`]: match and view heads, Adam, checkpoints, gradient checks
//! - [`grounding`]: view selection, maxpool, zero-shot and trained scorers
//! - [`training`]: match and LaGOR training loops
//! - [`evaluation`]: accuracy reports, prediction logs, rotation deltas
//! - [`tools`]: fold splitting, pair classification, lexical profiles
//! - [`synth`]: separable synthetic fixtures
//! - [`manifest`]: run manifests

pub mod cli;
pub mod data;
pub mod evaluation;
pub mod grounding;
pub mod heads;
pub mod manifest;
pub mod store;
pub mod synth;
pub mod tools;
pub mod training;
