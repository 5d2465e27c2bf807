//! Cross-modal adaptive prompting for multi-domain task-incremental learning.
//!
//! A frozen pair of toy transformer encoders is adapted per task through
//! prefix prompts on both towers. At inference an input is routed to a task
//! by cosine similarity to frozen text prototypes, a multi-prototype
//! visual-textual confidence sets a prompting weight through per-task
//! calibrated thresholds, and Hard Gumbel gates on both encoders decide which
//! layers receive prompts.
//!
//! The library is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases below fix it for the common cases.

// NaN-rejecting checks are written as `!(x > 0)` on purpose.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

pub mod benchmark;
pub mod confidence;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod io;
pub mod numerics;
pub mod routing;
pub mod tape;
pub mod trainer;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use numerics::{cosine, percentile_nearest_rank, softmax, Embedding, Mat, Rng, Scalar};

/// Task identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

/// Class identifier, unique across all tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.0)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class{}", self.0)
    }
}

pub type Mat64 = Mat<f64>;
pub type Mat32 = Mat<f32>;
pub type Embedding64 = Embedding<f64>;
pub type Embedding32 = Embedding<f32>;
pub type Backbone64 = encoder::FrozenBackbone<f64>;
pub type Backbone32 = encoder::FrozenBackbone<f32>;
pub type PromptPool64 = encoder::PromptPool<f64>;
pub type GateBank64 = gating::GateBank<f64>;
pub type TextPrototypeBook64 = routing::TextPrototypeBook<f64>;
pub type TaskState64 = trainer::TaskState<f64>;
