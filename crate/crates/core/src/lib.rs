//! Differentially-private oblivious outsourced database engine.
//!
//! Records live in PathORAM instances on an untrusted key-value store, so the
//! server never learns which records a query touches. The number of records
//! fetched per query is padded with differentially-private noise drawn from a
//! sanitizer (a noisy histogram for point queries, a noisy k-ary aggregate
//! tree for range queries), so the communication volume leaks only a DP view
//! of the data distribution.

pub mod crypto;
pub mod dp;
pub mod engine;
pub mod index;
pub mod oram;
pub mod storage;
pub mod verify;
