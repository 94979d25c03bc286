//! Concurrent execution of smart-contract transactions (SCTs).
//!
//! A multi-threaded miner runs a block of SCTs over an object-based software
//! transactional memory ([`stm::Svostm`] or [`stm::Mvostm`]) and records every
//! object conflict in a lock-free [`graph::BlockGraph`]. The graph ships with the
//! block, and multi-threaded validators replay the SCTs in an order the graph
//! allows, without any concurrency control of their own. The smart validator
//! additionally guards each key with lookup/update counters so that a block
//! whose graph is missing dependency edges is detected and rejected.
//!
//! Module map:
//!
//! * [`sct`] and [`workload`]: contract step programs and workload generation.
//! * [`stm`]: the shared STM interface plus the single- and multi-version
//!   implementations.
//! * [`graph`]: the block graph and its wire format.
//! * [`miner`] and [`block`]: block production, encoding and hashing.
//! * [`validator`]: serial, decentralized and fork-join replay, and the counter
//!   table of the smart validator.
//! * [`adversary`]: malicious block construction.
//! * [`harness`]: sweeps, timing and CSV reporting.

pub mod adversary;
pub mod block;
pub mod graph;
pub mod harness;
pub mod lockfree;
pub mod miner;
pub mod sct;
pub mod stm;
pub mod validator;
pub mod workload;

use std::collections::BTreeMap;

/// Identifier of a shared data item (hash-table key).
pub type Key = u32;

/// Value stored under a key.
pub type Value = i64;

/// Transaction timestamp.
pub type Ts = u64;

/// Timestamp of the pseudo-transaction that created the initial state.
///
/// Pre-loaded values behave as if a transaction `T0` inserted them and
/// committed before anything else ran. `T0` never appears as a block-graph
/// vertex.
pub const GENESIS_TS: Ts = 0;

/// A complete shared-state snapshot: every present key with its value.
pub type State = BTreeMap<Key, Value>;

pub use block::{block_hash, Block, BlockMeta};
pub use graph::BlockGraph;
pub use miner::{mine_block, mine_serial, MinerConfig, Protocol};
pub use sct::{Call, Executor, Halt, Outcome, Sct};
pub use validator::{Strategy, Verdict};
pub use workload::{generate_workload, initial_state, ContractMix, WorkloadSpec};
