//! Honeypot-augmented sequential detection for agent memory stores:
//! plant optimized decoy embeddings among real documents, watch which
//! side of the store each retrieval round pulls from, and run a
//! sequential probability ratio test over the per-round evidence to
//! flag extraction attacks in as few rounds as the error budgets allow.

pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod io;
pub mod memory;
pub mod optimizer;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod simulate;
pub mod sprt;

pub use embedding::{cosine_similarity, top_k, EmbeddingVector, TopKResult};
pub use error::{MempotError, Result};
pub use memory::{AugmentedMemory, ClusterAssignment, MemoryEntry, RetrievalObservation};
pub use simulate::{Trajectory, TrajectoryLabel, TrajectorySource};
pub use sprt::{Decision, LlrEstimator, SprtConfig, SprtSession};
