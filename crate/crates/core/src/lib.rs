//! Discrete-event model of GPU-offloaded molecular dynamics on MI250X nodes.

// Validation writes `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod comm;
pub mod config;
pub mod cost;
pub mod des;
pub mod exec;
pub mod pipeline;
pub mod runtime;
pub mod topology;
