//! Chunked, gated KV-cache compression for autoregressive attention.
//!
//! Tokens that age out of an uncompressed recent window are folded into
//! fixed-size chunks. Each completed chunk is mean-aggregated into a single
//! key/value pair, scored by a recurrent (LSTM) gate and either retained as
//! one compressed position or dropped. The crate also carries the analytical
//! FLOPs / memory / Amdahl cost model for the mechanism and a small
//! deterministic decoder that runs the compressed cache against a full cache.
//!
//! The crate is `no_std` and only needs `alloc`. Wall-clock timing, file
//! formats and the CLI live in the `kveff` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod cache;
pub mod cost;
pub mod decode;
mod error;
pub mod linalg;
pub mod rng;

pub use attention::{attend, FullKvCache, KvSeq, ModelDims};
pub use cache::{
    aggregate_chunk, CacheConfig, CacheDump, CompressedEntry, EfficientKvCache, GateDecision,
};
pub use cost::{CostParams, CostReport, GateTerm};
pub use decode::{divergence, run_decode, sweep, Backend, DecodeTrace, SimConfig, SweepGrid};
pub use error::{Error, Result};
pub use linalg::{lstm_step, mean_rows, softmax_row, LstmParams, LstmState, Matrix};
