//! Continual learning over frozen pre-trained embeddings.
//!
//! The pipeline is: an [`EmbeddingStore`] of encoder outputs is split into a
//! [`TaskStream`] by one of three scenario generators; for every task a
//! capacity-bounded [`MemoryBuffer`] is updated, the [`DynNan`] head grows to
//! cover every class seen so far and is trained on the buffer alone; the
//! snapshot after each task fills one row of an [`AccuracyMatrix`], from which
//! accuracy and forgetting metrics are computed.
//!
//! The `book/` directory next to this crate walks through each stage; its
//! code listings are compiled and run as doc-tests of this crate.

pub mod dynnan;
pub mod embedstore;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod runner;
pub mod scenario;
pub mod seed;

pub use dynnan::{DynNan, Targets};
pub use embedstore::{generate_synthetic, EmbeddingRecord, EmbeddingStore, Split, SynthSpec};
pub use error::{Error, Result};
pub use memory::{MemoryBuffer, MemoryPolicy, TrainingSet};
pub use metrics::{aggregate_runs, compute_metrics, evaluate_snapshot, AccuracyMatrix, RunMetrics};
pub use optim::{lr_at, train_task, OptimConfig, Strategy};
pub use runner::{run_experiment, validate_stream, RunConfig};
pub use scenario::{gen_realcl, gen_semireal, gen_unrealistic, seen_classes, ScenarioKind, TaskSpec, TaskStream};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
