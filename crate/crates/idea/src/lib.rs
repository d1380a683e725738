//! An embedded data-ingestion and enrichment engine.
//!
//! The crate wires a layered feed pipeline out of small pieces: an open
//! record data model, a partitioned dataflow runtime with partition holders
//! for cross-job handoff, predeployed (prepared) job templates, a
//! hash-partitioned store with B-tree and R-tree indexes, a declarative and
//! native UDF framework with per-record, per-batch, and stream evaluation
//! models, and a benchmark harness that drives the whole stack at desk
//! scale.

pub mod bench;
pub mod data;
pub mod deploy;
pub mod eval;
pub mod feed;
pub mod holders;
pub mod query;
pub mod runtime;
pub mod storage;
pub mod system;
