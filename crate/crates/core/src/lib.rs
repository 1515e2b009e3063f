//! Person-search re-identification toolkit: annotation model, mask codec,
//! ingestion filters and splits, loss kernels with hand-derived gradients,
//! retrieval metrics, a decision harness, and a toy adapter trainer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod fixtures;
pub mod ingest;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod report;
pub mod retrieval;
pub mod rng;
pub mod toy;
