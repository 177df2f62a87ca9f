//! Passivity-based formation control: network steady states, closed-loop
//! simulation and data-driven gain synthesis.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod graph;
pub mod numerics;
pub mod relations;
pub mod simulation;
pub mod synthesis;
pub mod systems;

pub use error::{Error, Result};
pub use graph::{IncidenceMatrix, UndirectedGraph};
