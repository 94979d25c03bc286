//! Single-version object STM.
//!
//! Each key keeps one committed value plus the timestamps of the committed
//! transactions that looked it up (`cL`) or updated it (`cU`). Validation is
//! timestamp ordering: an update by `T_i` commits only if no younger
//! transaction has committed a lookup or update of the key, and a lookup stays
//! valid only while no other update of the key commits.

use arc_swap::ArcSwap;
use parking_lot::Mutex;
use std::sync::Arc;

use super::{
    Aborted, ConflictList, ConflictStore, EventOutcome, HashTable, HistoryLog, Method, ObjectStm, OpResult,
    ReadEntry, StmError, TsClock, TxnHandle, TxnState,
};
use crate::{Key, State, Ts, Value, GENESIS_TS};

/// Committed value and the last committed updater, published together so that
/// lookups read both without locking.
#[derive(Debug, Clone, Copy, Default)]
struct Committed {
    val: Option<Value>,
    max_u: Option<Ts>,
}

#[derive(Debug, Default)]
struct Lists {
    max_l: Option<Ts>,
    cl: Vec<Ts>,
    cu: Vec<Ts>,
}

/// `⟨key, val, lock, max_L, max_U, cL, cU⟩`; the bucket chain supplies `next`.
pub struct SvKeyRecord {
    lock: Mutex<Lists>,
    committed: ArcSwap<Committed>,
}

impl SvKeyRecord {
    fn absent() -> Self {
        Self { lock: Mutex::new(Lists::default()), committed: ArcSwap::from_pointee(Committed::default()) }
    }

    fn genesis(value: Value) -> Self {
        let lists = Lists { cu: vec![GENESIS_TS], ..Lists::default() };
        Self {
            lock: Mutex::new(lists),
            committed: ArcSwap::from_pointee(Committed { val: Some(value), max_u: Some(GENESIS_TS) }),
        }
    }
}

/// Copy of a key record for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SvRecordView {
    pub val: Option<Value>,
    pub max_l: Option<Ts>,
    pub max_u: Option<Ts>,
    pub cl: Vec<Ts>,
    pub cu: Vec<Ts>,
}

pub struct Svostm {
    table: HashTable<SvKeyRecord>,
    clock: TsClock,
    conflicts: ConflictStore,
    history: Option<HistoryLog>,
}

impl Svostm {
    pub fn new(buckets: usize) -> Self {
        Self { table: HashTable::new(buckets), clock: TsClock::new(), conflicts: ConflictStore::default(), history: None }
    }

    pub fn with_history(buckets: usize) -> Self {
        Self { history: Some(HistoryLog::default()), ..Self::new(buckets) }
    }

    pub fn record(&self, key: Key) -> Option<SvRecordView> {
        let rec = self.table.get(key)?;
        let lists = rec.lock.lock();
        let committed = **rec.committed.load();
        Some(SvRecordView {
            val: committed.val,
            max_l: lists.max_l,
            max_u: committed.max_u,
            cl: lists.cl.clone(),
            cu: lists.cu.clone(),
        })
    }

    pub fn table(&self) -> &HashTable<SvKeyRecord> {
        &self.table
    }

    fn log(&self, ts: Ts, method: Method, key: Option<Key>, value: Option<Value>, outcome: EventOutcome) {
        if let Some(log) = &self.history {
            log.record(ts, method, key, value, outcome);
        }
    }

    fn read_committed(&self, key: Key) -> Committed {
        self.table.get(key).map(|r| **r.committed.load()).unwrap_or_default()
    }

    fn abort(&self, h: &mut TxnHandle, method: Method, key: Option<Key>) -> OpResult {
        h.state = TxnState::Aborted;
        self.log(h.ts, method, key, None, EventOutcome::Abort);
        OpResult::Abort
    }
}

fn is_at_least(max: Option<Ts>, ts: Ts) -> bool {
    max.is_some_and(|m| m >= ts)
}

impl ObjectStm for Svostm {
    fn name(&self) -> &'static str {
        "svostm"
    }

    fn begin(&self) -> TxnHandle {
        let h = TxnHandle::new(self.clock.next());
        self.log(h.ts, Method::Begin, None, None, EventOutcome::Ok);
        h
    }

    fn lookup(&self, h: &mut TxnHandle, key: Key) -> OpResult {
        if h.state != TxnState::Live {
            return OpResult::Abort;
        }
        let value = match h.local(key) {
            Some(v) => v,
            None => {
                let c = self.read_committed(key);
                // A younger transaction already committed an update of `key`.
                if is_at_least(c.max_u, h.ts) {
                    return self.abort(h, Method::Lookup, Some(key));
                }
                h.rv_set.insert(key, ReadEntry { value: c.val, stamp: c.max_u });
                c.val
            }
        };
        let r = OpResult::from_value(value);
        self.log(h.ts, Method::Lookup, Some(key), value, r.into());
        r
    }

    fn delete(&self, h: &mut TxnHandle, key: Key) -> OpResult {
        if h.state != TxnState::Live {
            return OpResult::Abort;
        }
        let previous = match h.local(key) {
            Some(v) => v,
            None => {
                let c = self.read_committed(key);
                h.rv_set.insert(key, ReadEntry { value: c.val, stamp: c.max_u });
                c.val
            }
        };
        h.buffer(key, None);
        let r = OpResult::from_value(previous);
        self.log(h.ts, Method::Delete, Some(key), previous, r.into());
        r
    }

    fn try_commit(&self, h: &mut TxnHandle) -> Result<ConflictList, Aborted> {
        if h.state != TxnState::Live {
            return Err(Aborted);
        }
        let ts = h.ts;
        let keys = h.footprint();
        let records: Vec<&SvKeyRecord> =
            keys.iter().map(|&k| self.table.get_or_create(k, SvKeyRecord::absent)).collect();
        let mut guards: Vec<_> = records.iter().map(|r| r.lock.lock()).collect();

        let mut conflicts = Vec::new();
        for ((key, rec), lists) in keys.iter().zip(&records).zip(&guards) {
            let committed = rec.committed.load();
            let read = h.rv_set.get(key);
            let updated = h.upd_set.contains_key(key);
            if let Some(entry) = read {
                if committed.max_u != entry.stamp {
                    drop(guards);
                    self.abort(h, Method::TryCommit, None);
                    return Err(Aborted);
                }
            }
            if updated && (is_at_least(lists.max_l, ts) || is_at_least(committed.max_u, ts)) {
                drop(guards);
                self.abort(h, Method::TryCommit, None);
                return Err(Aborted);
            }
            conflicts.extend_from_slice(&lists.cu);
            if updated {
                conflicts.extend_from_slice(&lists.cl);
            }
        }

        for ((key, rec), lists) in keys.iter().zip(&records).zip(guards.iter_mut()) {
            if h.rv_set.contains_key(key) {
                lists.cl.push(ts);
                lists.max_l = lists.max_l.max(Some(ts));
            }
            if let Some(&val) = h.upd_set.get(key) {
                lists.cu.push(ts);
                rec.committed.store(Arc::new(Committed { val, max_u: Some(ts) }));
            }
        }
        let list = self.conflicts.publish(ts, conflicts);
        drop(guards);
        h.state = TxnState::Committed;
        self.log(ts, Method::TryCommit, None, None, EventOutcome::Commit);
        Ok(list)
    }

    fn conf_list(&self, ts: Ts) -> Result<ConflictList, StmError> {
        self.conflicts.get(ts)
    }

    fn load(&self, state: &State) {
        for (&k, &v) in state {
            self.table.get_or_create(k, || SvKeyRecord::genesis(v));
        }
    }

    fn snapshot(&self) -> State {
        self.table
            .iter()
            .filter_map(|(k, r)| r.committed.load().val.map(|v| (k, v)))
            .collect()
    }

    fn history(&self) -> Option<&HistoryLog> {
        self.history.as_ref()
    }
}
