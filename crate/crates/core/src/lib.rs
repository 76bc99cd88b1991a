//! Self-training cleanup of identity-labeled face embedding corpora, plus a
//! time-budgeted 1:1 verification evaluation harness.
//!
//! A corpus is a set of identity folders over unit-norm embeddings. Cleaning
//! alternates intra-class DBSCAN filtering and inter-class merge/delete over
//! a few teacher iterations, then drops near-duplicates and folders that
//! overlap an evaluation set.

pub mod cast;
pub mod cluster;
pub mod corpus;
pub mod dedup;
pub mod error;
pub mod fruits;
pub mod merge;
pub mod pairwise;
pub mod stats;
pub mod synth;
pub mod unionfind;

pub use cast::{run_cast, CastConfig, CastOutcome, EmbeddingProvider};
pub use corpus::{
    load_corpus, write_corpus, AttributeSet, Corpus, EmbeddingStore, FaceId, FaceRecord,
    IdentityFolder, IdentityId,
};
pub use error::{CurateError, Result};
pub use stats::{Histogram, StageStats};
