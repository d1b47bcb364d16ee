//! cavlab-core: a self-contained laboratory for studying what linear concept
//! probes actually learn.
//!
//! The crate bundles a deterministic synthetic concept corpus with planted
//! spurious cues, a small embedded CNN with analytic forward/backward passes,
//! five probing methods producing concept activation vectors (CAVs), a
//! false-positive probe construction for demonstrating misalignment, and a
//! set of alignment metrics and visualization emitters for diagnosing it.

pub mod cnn;
pub mod corpus;
pub mod error;
pub mod rng;
pub mod tensor;

pub use cnn::{MicroCnn, PretrainTask, ProbeLayer};
pub use corpus::{ConceptCorpus, ConceptSpec, CorpusCounts, ShapeKind, SpuriousSpec};
pub use error::{Error, Result};
pub use tensor::{PoolMode, Tensor};
