//! Multi-level memory network for unsupervised cross-domain embedding
//! learning: instance, part and domain memories over a small linear encoder,
//! with a synthetic re-identification benchmark to train and evaluate on.

pub mod core_math;
pub mod density_clustering;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod memory_bank;
pub mod reciprocal_similarity;
pub mod synth_data;
pub mod trainer;

pub use core_math::{Hyperparams, Matrix, ProbVector, UnitVector};
pub use density_clustering::{cluster, ClusterConfig, ClusterLabel, PseudoLabeling};
pub use encoder::{EmbeddingTriple, EncoderParams, Sgd};
pub use error::{MmnError, Result};
pub use evaluation::{evaluate_retrieval, RetrievalResult};
pub use memory_bank::{Level, MemoryBank};
pub use reciprocal_similarity::{build_similarity, reorder_and_select, NeighborSelection, ReRankConfig, SimilarityMatrix};
pub use synth_data::{generate, SynthConfig, SynthDataset};
pub use trainer::{run, run_ablation, Checkpoint, EpochMetrics, RunResult, TrainConfig, Trainer, Variant};
