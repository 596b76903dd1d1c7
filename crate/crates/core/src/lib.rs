//! Compiler passes and a cycle-approximate GPU execution model for running
//! deep-learning operator graphs as spatial dataflow pipelines.
//!
//! The crate is `no_std` (with `alloc`). It covers the whole flow from an
//! [`graph::OperatorGraph`] to an [`sim::ExecTrace`]:
//!
//! 1. [`select`] marks contiguous subgraphs (sf-nodes) by pattern matching
//!    over the deterministic topological order.
//! 2. [`pipeline`] rewrites each sf-node into stages joined by ring queues.
//! 3. [`balance`] assigns CTA counts to stages by solving the max-min
//!    throughput integer program exactly.
//! 4. [`sim`] executes a graph in bulk-synchronous, vertical-fusion or
//!    dataflow mode on a parameterized [`machine::MachineConfig`].
//! 5. [`metrics`] turns traces into traffic, speedup and utilization reports.
//!
//! [`queue`] holds the ring-queue protocol state machine, its exhaustive
//! interleaving checker and the calibrated queue bandwidth model.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod balance;
pub mod error;
pub mod graph;
pub mod machine;
pub mod metrics;
pub mod pipeline;
pub mod queue;
pub mod select;
pub mod sim;

mod math;

pub use error::{Error, Result};
