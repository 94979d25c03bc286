//! Multi-version object STM.
//!
//! Every key keeps an ascending list of versions, one per committed updater,
//! starting with the genesis version 0. A lookup by `T_i` returns the version
//! with the largest timestamp below `i`, so it never aborts. Commit-time
//! validation keeps the committed history equivalent to timestamp order.

use std::collections::BTreeMap;
use std::sync::Arc;

use arc_swap::ArcSwap;
use parking_lot::Mutex;

use super::{
    Aborted, ConflictList, ConflictStore, EventOutcome, HashTable, HistoryLog, Method, ObjectStm, OpResult,
    ReadEntry, StmError, TsClock, TxnHandle, TxnState,
};
use crate::{Key, State, Ts, Value, GENESIS_TS};

/// A committed version. `val == None` is a delete tombstone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Version {
    pub ts: Ts,
    pub val: Option<Value>,
}

/// `rvl` of every version: committed transactions that looked it up.
#[derive(Debug, Default)]
struct ReturnValueLists(BTreeMap<Ts, Vec<Ts>>);

impl ReturnValueLists {
    fn readers(&self, version: Ts) -> &[Ts] {
        self.0.get(&version).map_or(&[], Vec::as_slice)
    }
}

/// `⟨key, lock, vl⟩`. Readers traverse `versions` without the lock; committers
/// publish a new list while holding it.
pub struct MvKeyRecord {
    lock: Mutex<ReturnValueLists>,
    versions: ArcSwap<Vec<Version>>,
}

impl MvKeyRecord {
    fn with_genesis(val: Option<Value>) -> Self {
        Self {
            lock: Mutex::new(ReturnValueLists::default()),
            versions: ArcSwap::from_pointee(vec![Version { ts: GENESIS_TS, val }]),
        }
    }

    /// Largest version visible to a transaction with timestamp `ts`.
    fn visible(versions: &[Version], ts: Ts) -> Version {
        let idx = versions.partition_point(|v| v.ts < ts);
        versions[idx.checked_sub(1).expect("genesis version precedes every transaction")]
    }

    fn successor(versions: &[Version], ts: Ts) -> Option<Ts> {
        let idx = versions.partition_point(|v| v.ts <= ts);
        versions.get(idx).map(|v| v.ts)
    }
}

pub struct Mvostm {
    table: HashTable<MvKeyRecord>,
    clock: TsClock,
    conflicts: ConflictStore,
    history: Option<HistoryLog>,
}

impl Mvostm {
    pub fn new(buckets: usize) -> Self {
        Self { table: HashTable::new(buckets), clock: TsClock::new(), conflicts: ConflictStore::default(), history: None }
    }

    pub fn with_history(buckets: usize) -> Self {
        Self { history: Some(HistoryLog::default()), ..Self::new(buckets) }
    }

    /// Full version history of `key`, ascending, genesis first.
    pub fn version_chain(&self, key: Key) -> Result<Vec<Version>, StmError> {
        let rec = self.table.get(key).ok_or(StmError::UnknownKey(key))?;
        Ok(rec.versions.load().to_vec())
    }

    /// Committed readers of `version` of `key`, with their maximum.
    pub fn return_value_list(&self, key: Key, version: Ts) -> Option<(Vec<Ts>, Option<Ts>)> {
        let rec = self.table.get(key)?;
        let rvl = rec.lock.lock();
        let readers = rvl.readers(version).to_vec();
        let max_l = readers.iter().copied().max();
        Some((readers, max_l))
    }

    fn log(&self, ts: Ts, method: Method, key: Option<Key>, value: Option<Value>, outcome: EventOutcome) {
        if let Some(log) = &self.history {
            log.record(ts, method, key, value, outcome);
        }
    }

    fn read_visible(&self, key: Key, ts: Ts) -> Version {
        match self.table.get(key) {
            Some(rec) => MvKeyRecord::visible(&rec.versions.load(), ts),
            None => Version { ts: GENESIS_TS, val: None },
        }
    }

    fn read_through(&self, h: &mut TxnHandle, key: Key) -> Option<Value> {
        match h.local(key) {
            Some(v) => v,
            None => {
                let v = self.read_visible(key, h.ts);
                h.rv_set.insert(key, ReadEntry { value: v.val, stamp: Some(v.ts) });
                v.val
            }
        }
    }

    fn fail(&self, h: &mut TxnHandle) -> Aborted {
        h.state = TxnState::Aborted;
        self.log(h.ts, Method::TryCommit, None, None, EventOutcome::Abort);
        Aborted
    }
}

impl ObjectStm for Mvostm {
    fn name(&self) -> &'static str {
        "mvostm"
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
        let value = self.read_through(h, key);
        let r = OpResult::from_value(value);
        self.log(h.ts, Method::Lookup, Some(key), value, r.into());
        r
    }

    fn delete(&self, h: &mut TxnHandle, key: Key) -> OpResult {
        if h.state != TxnState::Live {
            return OpResult::Abort;
        }
        let previous = self.read_through(h, key);
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
        let records: Vec<&MvKeyRecord> =
            keys.iter().map(|&k| self.table.get_or_create(k, || MvKeyRecord::with_genesis(None))).collect();
        let mut guards: Vec<_> = records.iter().map(|r| r.lock.lock()).collect();

        let mut conflicts = Vec::new();
        for ((key, rec), rvl) in keys.iter().zip(&records).zip(&guards) {
            let versions = rec.versions.load();
            if let Some(read) = h.rv_set.get(key) {
                let seen = read.stamp.expect("multi-version reads carry a version");
                // A version between the one read and our own timestamp
                // committed after the read: the read is no longer the latest.
                if MvKeyRecord::visible(&versions, ts).ts != seen {
                    drop(guards);
                    return Err(self.fail(h));
                }
                conflicts.push(seen);
                conflicts.extend(MvKeyRecord::successor(&versions, seen));
            }
            if h.upd_set.contains_key(key) {
                let prev = MvKeyRecord::visible(&versions, ts).ts;
                let readers = rvl.readers(prev);
                // A younger committed reader of `prev` would miss our version.
                if readers.iter().any(|&r| r > ts) {
                    drop(guards);
                    return Err(self.fail(h));
                }
                if readers.is_empty() {
                    conflicts.push(prev);
                } else {
                    conflicts.extend_from_slice(readers);
                }
                // Keeps blind writes ordered behind an already committed
                // younger version of the key.
                conflicts.extend(MvKeyRecord::successor(&versions, ts));
            }
        }

        for ((key, rec), rvl) in keys.iter().zip(&records).zip(guards.iter_mut()) {
            if let Some(read) = h.rv_set.get(key) {
                rvl.0.entry(read.stamp.unwrap_or(GENESIS_TS)).or_default().push(ts);
            }
            if let Some(&val) = h.upd_set.get(key) {
                let mut versions = rec.versions.load().to_vec();
                let at = versions.partition_point(|v| v.ts < ts);
                versions.insert(at, Version { ts, val });
                rec.versions.store(Arc::new(versions));
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
            self.table.get_or_create(k, || MvKeyRecord::with_genesis(Some(v)));
        }
    }

    fn snapshot(&self) -> State {
        self.table
            .iter()
            .filter_map(|(k, r)| r.versions.load().last().and_then(|v| v.val).map(|v| (k, v)))
            .collect()
    }

    fn history(&self) -> Option<&HistoryLog> {
        self.history.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    const A1: Key = 1;
    const A2: Key = 2;

    fn begin_at(stm: &Mvostm, ts: Ts) -> TxnHandle {
        loop {
            let h = stm.begin();
            if h.ts() == ts {
                return h;
            }
            assert!(h.ts() < ts, "clock already past T{ts}");
        }
    }

    fn tss(chain: &[Version]) -> Vec<Ts> {
        chain.iter().map(|v| v.ts).collect()
    }

    #[test]
    fn conflict_lists_with_an_intermediate_reader() {
        // T0 created A1; T5 inserts; T7 looks up while T10 inserts and
        // commits before T7 does.
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 0)].into_iter().collect());
        let mut t5 = begin_at(&stm, 5);
        let mut t7 = begin_at(&stm, 7);
        let mut t10 = begin_at(&stm, 10);
        stm.insert(&mut t5, A1, 5);
        assert_eq!(&*stm.try_commit(&mut t5).unwrap(), &[0]);
        assert_eq!(stm.lookup(&mut t7, A1), OpResult::Ok(5));
        stm.insert(&mut t10, A1, 10);
        assert_eq!(&*stm.try_commit(&mut t10).unwrap(), &[5]);
        assert_eq!(&*stm.try_commit(&mut t7).unwrap(), &[5, 10]);

        assert_eq!(&*stm.conf_list(10).unwrap(), &[5]);
        assert_eq!(&*stm.conf_list(7).unwrap(), &[5, 10]);
        assert_eq!(tss(&stm.version_chain(A1).unwrap()), vec![0, 5, 10]);
        assert_eq!(stm.return_value_list(A1, 5), Some((vec![7], Some(7))));
    }

    #[test]
    fn stale_reader_commits_on_older_versions() {
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 10), (A2, 10)].into_iter().collect());
        let mut t1 = stm.begin();
        let mut t2 = stm.begin();
        assert_eq!(stm.lookup(&mut t1, A1), OpResult::Ok(10));
        assert_eq!(stm.lookup(&mut t2, A1), OpResult::Ok(10));
        stm.insert(&mut t2, A1, 5);
        assert_eq!(stm.lookup(&mut t2, A2), OpResult::Ok(10));
        stm.insert(&mut t2, A2, 15);
        stm.try_commit(&mut t2).unwrap();
        assert_eq!(stm.lookup(&mut t1, A2), OpResult::Ok(10));
        assert_eq!(&*stm.try_commit(&mut t1).unwrap(), &[0, 2]);
        assert_eq!(stm.snapshot(), [(A1, 5), (A2, 15)].into_iter().collect());
    }

    #[test]
    fn first_transaction_sees_genesis() {
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 42)].into_iter().collect());
        let mut t1 = stm.begin();
        assert_eq!(t1.ts(), 1);
        assert_eq!(stm.lookup(&mut t1, A1), OpResult::Ok(42));
        assert_eq!(stm.lookup(&mut t1, 99), OpResult::NotFound);
    }

    #[test]
    fn disjoint_transactions_do_not_conflict() {
        let stm = Mvostm::new(30);
        let mut a = stm.begin();
        let mut b = stm.begin();
        stm.insert(&mut a, 1, 1);
        stm.insert(&mut b, 2, 2);
        // Only the (unlisted) genesis versions.
        assert_eq!(&*stm.try_commit(&mut a).unwrap(), &[0]);
        assert_eq!(&*stm.try_commit(&mut b).unwrap(), &[0]);
    }

    #[test]
    fn untouched_and_unknown_keys() {
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 1)].into_iter().collect());
        assert_eq!(tss(&stm.version_chain(A1).unwrap()), vec![0]);
        assert_eq!(stm.version_chain(5), Err(StmError::UnknownKey(5)));
    }

    #[test]
    fn writer_behind_a_younger_reader_aborts() {
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 1)].into_iter().collect());
        let mut old = stm.begin();
        let mut young = stm.begin();
        stm.lookup(&mut young, A1);
        stm.try_commit(&mut young).unwrap();
        stm.insert(&mut old, A1, 2);
        assert!(stm.try_commit(&mut old).is_err());
    }

    #[test]
    fn reader_overtaken_by_an_intermediate_version_aborts() {
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 1)].into_iter().collect());
        let mut mid = stm.begin();
        let mut reader = stm.begin();
        assert_eq!(stm.lookup(&mut reader, A1), OpResult::Ok(1));
        stm.insert(&mut mid, A1, 2);
        stm.try_commit(&mut mid).unwrap();
        assert!(stm.try_commit(&mut reader).is_err());
    }

    #[test]
    fn blind_write_behind_a_younger_version_is_ordered_before_it() {
        let stm = Mvostm::new(30);
        let mut old = stm.begin();
        let mut young = stm.begin();
        stm.insert(&mut young, A1, 2);
        stm.try_commit(&mut young).unwrap();
        stm.insert(&mut old, A1, 1);
        assert_eq!(&*stm.try_commit(&mut old).unwrap(), &[0, 2]);
        assert_eq!(stm.snapshot()[&A1], 2);
    }

    #[test]
    fn delete_writes_a_tombstone() {
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 3)].into_iter().collect());
        let mut d = stm.begin();
        assert_eq!(stm.delete(&mut d, A1), OpResult::Ok(3));
        stm.try_commit(&mut d).unwrap();
        let chain = stm.version_chain(A1).unwrap();
        assert_eq!(chain.last(), Some(&Version { ts: 1, val: None }));
        assert!(stm.snapshot().is_empty());
        let mut after = stm.begin();
        assert_eq!(stm.lookup(&mut after, A1), OpResult::NotFound);
    }

    #[test]
    fn version_chains_stay_sorted_under_contention() {
        let stm = Mvostm::new(30);
        stm.load(&[(A1, 0)].into_iter().collect());
        thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let mut committed = 0;
                    while committed < 100 {
                        let mut h = stm.begin();
                        let v = h.ts() as Value;
                        stm.insert(&mut h, A1, v);
                        if stm.try_commit(&mut h).is_ok() {
                            committed += 1;
                        }
                    }
                });
            }
        });
        let chain = tss(&stm.version_chain(A1).unwrap());
        assert_eq!(chain.len(), 801);
        assert!(chain.windows(2).all(|w| w[0] < w[1]));
    }
}
