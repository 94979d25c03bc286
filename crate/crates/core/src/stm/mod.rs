//! Object-based software transactional memory.
//!
//! Both protocols expose the same interface: [`ObjectStm::begin`] hands out a
//! [`TxnHandle`] with a fresh timestamp, `lookup`/`insert`/`delete` operate on
//! hash-table keys, and [`ObjectStm::try_commit`] validates the transaction and
//! returns its conflict list: the committed transactions it object-conflicts
//! with. The miner turns those lists into block-graph edges.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::Mutex;
use thiserror::Error;

use crate::sct::{Executor, Halt};
use crate::{Key, State, Ts, Value, GENESIS_TS};

mod mv;
mod sv;
mod table;

pub use mv::{MvKeyRecord, Mvostm, Version};
pub use sv::{SvKeyRecord, SvRecordView, Svostm};
pub use table::HashTable;

/// Default number of hash-table buckets.
pub const DEFAULT_BUCKETS: usize = 30;

/// Committed transactions a transaction conflicts with, ascending, without
/// itself.
pub type ConflictList = Arc<[Ts]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpResult {
    Ok(Value),
    NotFound,
    Abort,
}

impl OpResult {
    fn from_value(value: Option<Value>) -> Self {
        value.map_or(OpResult::NotFound, OpResult::Ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("transaction aborted")]
pub struct Aborted;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StmError {
    #[error("transaction T{0} has not committed")]
    UnknownTransaction(Ts),
    #[error("key {0} does not exist")]
    UnknownKey(Key),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnState {
    Live,
    Committed,
    Aborted,
}

/// A value read from committed state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadEntry {
    pub value: Option<Value>,
    /// Single-version: the key's last committed updater when it was read.
    /// Multi-version: the timestamp of the version that was read.
    pub stamp: Option<Ts>,
}

/// Per-transaction read and update sets.
#[derive(Debug)]
pub struct TxnHandle {
    ts: Ts,
    rv_set: BTreeMap<Key, ReadEntry>,
    upd_set: BTreeMap<Key, Option<Value>>,
    state: TxnState,
}

impl TxnHandle {
    fn new(ts: Ts) -> Self {
        Self { ts, rv_set: BTreeMap::new(), upd_set: BTreeMap::new(), state: TxnState::Live }
    }

    pub fn ts(&self) -> Ts {
        self.ts
    }

    pub fn state(&self) -> TxnState {
        self.state
    }

    pub fn rv_set(&self) -> &BTreeMap<Key, ReadEntry> {
        &self.rv_set
    }

    /// Pending updates; `None` is a buffered delete.
    pub fn upd_set(&self) -> &BTreeMap<Key, Option<Value>> {
        &self.upd_set
    }

    /// Value visible to this transaction without touching shared memory.
    fn local(&self, key: Key) -> Option<Option<Value>> {
        self.upd_set
            .get(&key)
            .copied()
            .or_else(|| self.rv_set.get(&key).map(|e| e.value))
    }

    fn buffer(&mut self, key: Key, value: Option<Value>) {
        self.upd_set.insert(key, value);
    }

    /// Every key touched by the transaction, ascending: the lock order.
    fn footprint(&self) -> Vec<Key> {
        let mut keys: Vec<Key> = self.rv_set.keys().chain(self.upd_set.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }
}

/// Common interface of the single- and multi-version object STMs.
pub trait ObjectStm: Send + Sync {
    fn name(&self) -> &'static str;

    fn begin(&self) -> TxnHandle;

    fn lookup(&self, h: &mut TxnHandle, key: Key) -> OpResult;

    /// Buffers an insert; visible to others only after commit.
    fn insert(&self, h: &mut TxnHandle, key: Key, value: Value) -> OpResult {
        if h.state != TxnState::Live {
            return OpResult::Abort;
        }
        h.buffer(key, Some(value));
        if let Some(log) = self.history() {
            log.record(h.ts, Method::Insert, Some(key), Some(value), EventOutcome::Ok);
        }
        OpResult::Ok(value)
    }

    /// Buffers a delete and returns the value it removes, as seen by `h`.
    fn delete(&self, h: &mut TxnHandle, key: Key) -> OpResult;

    fn try_commit(&self, h: &mut TxnHandle) -> Result<ConflictList, Aborted>;

    /// Conflict list materialized when `ts` committed.
    fn conf_list(&self, ts: Ts) -> Result<ConflictList, StmError>;

    /// Installs `state` as the values written by the genesis transaction.
    fn load(&self, state: &State);

    /// Latest committed value of every present key. Requires quiescence.
    fn snapshot(&self) -> State;

    fn history(&self) -> Option<&HistoryLog>;
}

/// Source of unique, increasing transaction timestamps for one STM.
#[derive(Debug)]
pub(crate) struct TsClock(AtomicU64);

impl TsClock {
    pub(crate) fn new() -> Self {
        Self(AtomicU64::new(GENESIS_TS + 1))
    }

    pub(crate) fn next(&self) -> Ts {
        self.0.fetch_add(1, Ordering::AcqRel)
    }
}

/// Conflict lists of committed transactions; written once at commit.
#[derive(Debug, Default)]
pub(crate) struct ConflictStore(DashMap<Ts, ConflictList>);

impl ConflictStore {
    pub(crate) fn publish(&self, ts: Ts, mut conflicts: Vec<Ts>) -> ConflictList {
        conflicts.sort_unstable();
        conflicts.dedup();
        conflicts.retain(|&c| c != ts);
        let list: ConflictList = conflicts.into();
        self.0.insert(ts, Arc::clone(&list));
        list
    }

    pub(crate) fn get(&self, ts: Ts) -> Result<ConflictList, StmError> {
        if ts == GENESIS_TS {
            return Ok(Arc::from([]));
        }
        self.0
            .get(&ts)
            .map(|l| Arc::clone(&l))
            .ok_or(StmError::UnknownTransaction(ts))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Begin,
    Lookup,
    Insert,
    Delete,
    TryCommit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventOutcome {
    Ok,
    NotFound,
    Abort,
    Commit,
}

impl From<OpResult> for EventOutcome {
    fn from(r: OpResult) -> Self {
        match r {
            OpResult::Ok(_) => EventOutcome::Ok,
            OpResult::NotFound => EventOutcome::NotFound,
            OpResult::Abort => EventOutcome::Abort,
        }
    }
}

/// One method call with its response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub ts: Ts,
    pub method: Method,
    pub key: Option<Key>,
    pub value: Option<Value>,
    pub outcome: EventOutcome,
}

/// Sequential record of STM method calls, for correctness checks.
#[derive(Debug, Default)]
pub struct HistoryLog {
    events: Mutex<Vec<Event>>,
}

impl HistoryLog {
    pub fn record(&self, ts: Ts, method: Method, key: Option<Key>, value: Option<Value>, outcome: EventOutcome) {
        self.events.lock().push(Event { ts, method, key, value, outcome });
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().clone()
    }

    /// Checks that every transaction begins first, ends at most once, and
    /// issues nothing after it ends.
    pub fn check_well_formed(&self) -> Result<(), String> {
        #[derive(PartialEq)]
        enum Phase {
            Live,
            Done,
        }
        let mut phases: BTreeMap<Ts, Phase> = BTreeMap::new();
        for (i, e) in self.events.lock().iter().enumerate() {
            match (phases.get(&e.ts), e.method) {
                (None, Method::Begin) => {
                    phases.insert(e.ts, Phase::Live);
                }
                (None, _) => return Err(format!("event {i}: T{} used before begin", e.ts)),
                (Some(_), Method::Begin) => return Err(format!("event {i}: T{} began twice", e.ts)),
                (Some(Phase::Done), _) => return Err(format!("event {i}: T{} used after it ended", e.ts)),
                (Some(Phase::Live), m) => {
                    if e.outcome == EventOutcome::Abort || m == Method::TryCommit {
                        phases.insert(e.ts, Phase::Done);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs contract code inside an STM transaction.
pub struct StmExecutor<'a, S: ?Sized> {
    stm: &'a S,
    txn: &'a mut TxnHandle,
}

impl<'a, S: ObjectStm + ?Sized> StmExecutor<'a, S> {
    pub fn new(stm: &'a S, txn: &'a mut TxnHandle) -> Self {
        Self { stm, txn }
    }
}

fn to_step(r: OpResult) -> Result<Option<Value>, Halt> {
    match r {
        OpResult::Ok(v) => Ok(Some(v)),
        OpResult::NotFound => Ok(None),
        OpResult::Abort => Err(Halt::Abort),
    }
}

impl<S: ObjectStm + ?Sized> Executor for StmExecutor<'_, S> {
    fn lookup(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        to_step(self.stm.lookup(self.txn, key))
    }

    fn insert(&mut self, key: Key, value: Value) -> Result<(), Halt> {
        to_step(self.stm.insert(self.txn, key, value)).map(drop)
    }

    fn delete(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        to_step(self.stm.delete(self.txn, key))
    }
}
