//! Curriculum reinforcement learning over a quantized world model.
//!
//! An agent in a 2D maze discretizes what it has seen into landmarks with a
//! vector-quantized codebook, links the landmarks by learned temporal
//! distances, and practices on goals drawn from the uncertain frontier of
//! that graph until the achieved goals cover the final goals.

pub mod agent;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod mazes;
pub mod mlp;
pub mod planner;
pub mod quantizer;
pub mod replay;

pub use error::{CqmError, Result};
pub use exec::Execution;
