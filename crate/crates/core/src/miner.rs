//! Block production.
//!
//! Concurrent miner threads take SCTs from a shared atomic index, execute
//! each one as an STM transaction (retrying with a fresh timestamp on abort),
//! and add the committed transaction and its conflicts to the block graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockMeta};
use crate::graph::BlockGraph;
use crate::sct::{Halt, MapExecutor, RecordingExecutor, Sct, StepOp};
use crate::stm::{Mvostm, ObjectStm, StmExecutor, Svostm, TxnHandle, DEFAULT_BUCKETS};
use crate::{Key, State, Ts, GENESIS_TS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Serial,
    Svostm,
    Mvostm,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Serial, Protocol::Svostm, Protocol::Mvostm];

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Serial => "serial",
            Protocol::Svostm => "svostm",
            Protocol::Mvostm => "mvostm",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Protocol::Serial => 0,
            Protocol::Svostm => 1,
            Protocol::Mvostm => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Protocol> {
        Protocol::ALL.into_iter().find(|p| p.tag() == tag)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown protocol `{s}` (expected serial, svostm or mvostm)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinerConfig {
    pub protocol: Protocol,
    /// Ignored by the serial miner.
    pub threads: usize,
    pub buckets: usize,
}

impl MinerConfig {
    pub fn new(protocol: Protocol, threads: usize) -> Self {
        Self { protocol, threads, buckets: DEFAULT_BUCKETS }
    }
}

/// Keys a committed transaction read and updated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    /// Index of the SCT in the block.
    pub sct: usize,
    pub ts: Ts,
    pub reads: BTreeSet<Key>,
    pub writes: BTreeSet<Key>,
}

#[derive(Debug, Clone)]
pub struct Mined {
    pub block: Block,
    /// Commit records, ordered by SCT index.
    pub commits: Vec<Commit>,
    /// Transactions begun, including aborted attempts.
    pub begins: u64,
}

pub fn mine_block(cfg: &MinerConfig, scts: &[Sct], init: &State, prev_hash: u64) -> Block {
    mine(cfg, scts, init, prev_hash).block
}

/// Like [`mine_block`], also returning per-transaction footprints.
pub fn mine(cfg: &MinerConfig, scts: &[Sct], init: &State, prev_hash: u64) -> Mined {
    match cfg.protocol {
        Protocol::Serial => mine_serial_detailed(scts, init, prev_hash),
        Protocol::Svostm => mine_concurrent(&Svostm::new(cfg.buckets), cfg, scts, init, prev_hash),
        Protocol::Mvostm => mine_concurrent(&Mvostm::new(cfg.buckets), cfg, scts, init, prev_hash),
    }
}

fn commit_record(sct: usize, h: &TxnHandle) -> Commit {
    let reads = h.rv_set().keys().copied().collect();
    let writes = h.upd_set().keys().copied().collect();
    Commit { sct, ts: h.ts(), reads, writes }
}

fn mine_concurrent<S: ObjectStm>(stm: &S, cfg: &MinerConfig, scts: &[Sct], init: &State, prev_hash: u64) -> Mined {
    stm.load(init);
    let bg = BlockGraph::new();
    let next = AtomicUsize::new(0);
    let begins = AtomicU64::new(0);
    let commits = Mutex::new(Vec::with_capacity(scts.len()));

    std::thread::scope(|s| {
        for _ in 0..cfg.threads.max(1) {
            s.spawn(|| {
                let mut local = Vec::new();
                let mut attempts = 0;
                loop {
                    let idx = next.fetch_add(1, Ordering::AcqRel);
                    let Some(sct) = scts.get(idx) else { break };
                    loop {
                        attempts += 1;
                        let mut h = stm.begin();
                        match sct.execute(&mut StmExecutor::new(stm, &mut h)) {
                            Ok(_) => {}
                            Err(Halt::Abort) => continue,
                            Err(other) => unreachable!("STM execution halted with {other:?}"),
                        }
                        let Ok(conflicts) = stm.try_commit(&mut h) else { continue };
                        bg.add_vertex(h.ts(), Some(idx as u32));
                        let conflicts: Vec<Ts> =
                            conflicts.iter().copied().filter(|&t| t != GENESIS_TS).collect();
                        bg.build_bg(h.ts(), &conflicts);
                        local.push(commit_record(idx, &h));
                        break;
                    }
                }
                begins.fetch_add(attempts, Ordering::AcqRel);
                commits.lock().extend(local);
            });
        }
    });

    let mut commits = commits.into_inner();
    commits.sort_by_key(|c| c.sct);
    let begins = begins.into_inner();
    let block = Block {
        scts: scts.to_vec(),
        bg: bg.serialize(),
        final_state: stm.snapshot(),
        prev_hash,
        meta: BlockMeta { protocol: cfg.protocol, threads: cfg.threads, aborts: begins - scts.len() as u64 },
    };
    Mined { block, commits, begins }
}

/// Executes the SCTs in block order on one thread. SCT `i` gets timestamp
/// `i + 1`; the graph orders every pair that touches a common key where at
/// least one side updates it.
pub fn mine_serial(scts: &[Sct], init: &State, prev_hash: u64) -> Block {
    mine_serial_detailed(scts, init, prev_hash).block
}

#[derive(Default)]
struct KeyHistory {
    last_writer: Option<Ts>,
    readers: Vec<Ts>,
}

fn mine_serial_detailed(scts: &[Sct], init: &State, prev_hash: u64) -> Mined {
    let mut state = init.clone();
    let bg = BlockGraph::new();
    let mut keys: BTreeMap<Key, KeyHistory> = BTreeMap::new();
    let mut commits = Vec::with_capacity(scts.len());
    for (idx, sct) in scts.iter().enumerate() {
        let ts = idx as Ts + 1;
        let mut ex = RecordingExecutor::new(MapExecutor::new(&mut state));
        sct.execute(&mut ex).expect("map executor never halts");
        let (_, steps) = ex.into_inner();
        let mut reads = BTreeSet::new();
        let mut writes = BTreeSet::new();
        for step in &steps {
            match *step {
                StepOp::Lookup(k) => {
                    reads.insert(k);
                }
                StepOp::Insert(k, _) => {
                    writes.insert(k);
                }
                StepOp::Delete(k) => {
                    reads.insert(k);
                    writes.insert(k);
                }
                StepOp::Compute(_) => {}
            }
        }
        let mut conflicts = BTreeSet::new();
        for &k in reads.union(&writes) {
            let hist = keys.entry(k).or_default();
            conflicts.extend(hist.last_writer);
            if writes.contains(&k) {
                conflicts.extend(hist.readers.drain(..));
                hist.last_writer = Some(ts);
            } else {
                hist.readers.push(ts);
            }
        }
        bg.add_vertex(ts, Some(idx as u32));
        bg.build_bg(ts, &conflicts.into_iter().collect::<Vec<_>>());
        commits.push(Commit { sct: idx, ts, reads, writes });
    }
    let block = Block {
        scts: scts.to_vec(),
        bg: bg.serialize(),
        final_state: state,
        prev_hash,
        meta: BlockMeta { protocol: Protocol::Serial, threads: 1, aborts: 0 },
    };
    Mined { block, commits, begins: scts.len() as u64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sct::{execute_serially, Call};

    fn coin_state(n: Key) -> State {
        (0..n).map(|k| (k, 100)).collect()
    }

    fn send(id: u32, sender: Key, receiver: Key, amount: i64) -> Sct {
        Sct::new(id, Call::CoinSend { sender, receiver, amount })
    }

    #[test]
    fn protocol_names_and_tags() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>(), Ok(p));
            assert_eq!(Protocol::from_tag(p.tag()), Some(p));
        }
        assert!("bto".parse::<Protocol>().is_err());
    }

    #[test]
    fn two_conflicting_and_one_independent() {
        let scts = [send(0, 0, 1, 10), send(1, 1, 2, 5), send(2, 3, 4, 1)];
        let init = coin_state(5);
        let mut serial = init.clone();
        execute_serially(&scts, &mut serial);
        for p in [Protocol::Svostm, Protocol::Mvostm] {
            let mined = mine(&MinerConfig::new(p, 1), &scts, &init, 0);
            let g = mined.block.graph().unwrap();
            assert_eq!(g.num_vertices(), 3);
            assert_eq!(g.num_edges(), 1, "{p}: {:?}", g);
            assert_eq!(mined.block.final_state, serial);
        }
    }

    #[test]
    fn empty_block() {
        let init = coin_state(3);
        for p in Protocol::ALL {
            let b = mine_block(&MinerConfig::new(p, 4), &[], &init, 7);
            assert!(b.graph().unwrap().is_empty());
            assert_eq!(b.final_state, init);
            assert_eq!(b.prev_hash, 7);
        }
    }

    #[test]
    fn read_only_block_has_no_aborts_or_edges() {
        let scts: Vec<Sct> = (0..64).map(|i| Sct::new(i, Call::CoinGetBalance { account: i % 4 })).collect();
        let init = coin_state(4);
        for p in [Protocol::Svostm, Protocol::Mvostm] {
            let b = mine_block(&MinerConfig::new(p, 8), &scts, &init, 0);
            assert_eq!(b.meta.aborts, 0);
            assert_eq!(b.graph().unwrap().num_edges(), 0);
        }
    }

    #[test]
    fn serial_miner_orders_conflicts() {
        let scts = [send(0, 0, 1, 10), send(1, 2, 3, 5), send(2, 1, 2, 1), Sct::new(3, Call::CoinGetBalance { account: 2 })];
        let b = mine_serial(&scts, &coin_state(4), 0);
        let g = b.graph().unwrap();
        assert_eq!(g.edges(), vec![(1, 3), (2, 3), (3, 4)]);
        let mut expected = coin_state(4);
        execute_serially(&scts, &mut expected);
        assert_eq!(b.final_state, expected);
    }

    #[test]
    fn concurrent_blocks_conserve_coins() {
        let init = coin_state(6);
        let scts: Vec<Sct> = (0..120u32).map(|i| send(i, i % 6, (i * 7 + 1) % 6, i64::from(i % 30))).collect();
        for p in [Protocol::Svostm, Protocol::Mvostm] {
            let mined = mine(&MinerConfig::new(p, 6), &scts, &init, 0);
            assert_eq!(mined.block.final_state.values().sum::<i64>(), 600);
            assert_eq!(mined.begins - 120, mined.block.meta.aborts);
            assert_eq!(mined.commits.len(), 120);
            let g = mined.block.graph().unwrap();
            assert!(g.edges().iter().all(|(a, b)| a < b));
            let vertex_funs: BTreeSet<u32> = g.vertices().map(|v| v.sc_fun().unwrap()).collect();
            assert_eq!(vertex_funs, (0..120).collect());
        }
    }
}
