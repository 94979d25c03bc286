//! Block validation by replay.
//!
//! Validators execute the block's SCTs directly on shared memory, with no
//! concurrency control, in an order the block graph allows, and accept the
//! block only if the resulting state equals the miner's final state.
//!
//! * Serial: one thread, topological order.
//! * Decentralized: symmetric workers claim source vertices themselves.
//! * Fork-join: a master harvests all current sources into a wave and slave
//!   threads execute the wave.
//!
//! With `smv` enabled every access goes through a [`CounterTable`]; a counter
//! mismatch means two SCTs that touch a common key ran concurrently, so the
//! graph is missing an edge and the miner is malicious.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU32, AtomicUsize, Ordering};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{Block, BlockError};
use crate::graph::{BlockGraph, GraphError, VertexNode};
use crate::sct::{Executor, Halt, Sct};
use crate::{Key, State, Value};

mod counters;

pub use counters::{CounterTable, TxnCounters};

/// Keys above this bound are rejected instead of allocating shared memory.
pub const MAX_KEY: Key = 1 << 24;

const ABSENT: Value = Value::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Serial,
    #[serde(rename = "dec")]
    Decentralized,
    #[serde(rename = "forkjoin")]
    ForkJoin,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Serial => "serial",
            Strategy::Decentralized => "dec",
            Strategy::ForkJoin => "forkjoin",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "serial" => Ok(Strategy::Serial),
            "dec" | "decentralized" => Ok(Strategy::Decentralized),
            "forkjoin" | "fork-join" => Ok(Strategy::ForkJoin),
            _ => Err(format!("unknown strategy `{s}` (expected serial, dec or forkjoin)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept(State),
    RejectStateMismatch,
    RejectMaliciousMiner { key: Key, sct_id: u32 },
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Accept(_) => "accept",
            Verdict::RejectStateMismatch => "reject_state_mismatch",
            Verdict::RejectMaliciousMiner { .. } => "reject_malicious_miner",
        }
    }
}

/// The block cannot be replayed at all; distinct from a rejection verdict.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidateError {
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("malformed block graph: {0}")]
    Graph(#[from] GraphError),
    #[error("graph vertices do not match the block's SCTs: {0}")]
    VertexMismatch(String),
    #[error("key {0} exceeds the supported key range")]
    KeyOutOfRange(Key),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidatorConfig {
    pub strategy: Strategy,
    pub threads: usize,
    pub smv: bool,
}

impl ValidatorConfig {
    pub fn new(strategy: Strategy, threads: usize, smv: bool) -> Self {
        Self { strategy, threads, smv }
    }
}

#[derive(Debug, Clone)]
pub struct Validation {
    pub verdict: Verdict,
    pub elapsed: Duration,
    /// All global counters were zero after the run (always true without SMV).
    pub counters_clean: bool,
    /// How many times each SCT (by block index) was executed.
    pub executions: Vec<u32>,
    /// Fork-join wave sizes; empty for other strategies.
    pub waves: Vec<usize>,
}

impl Validation {
    /// One machine-readable summary line.
    pub fn record_line(&self, cfg: &ValidatorConfig, protocol: &str) -> String {
        let signal = match self.verdict {
            Verdict::RejectMaliciousMiner { key, .. } => key.to_string(),
            _ => "-".into(),
        };
        format!(
            "verdict={} ms={:.3} threads={} protocol={} strategy={} smv={} signal_key={}",
            self.verdict.label(),
            self.elapsed.as_secs_f64() * 1e3,
            cfg.threads,
            protocol,
            cfg.strategy,
            cfg.smv,
            signal
        )
    }
}

/// Validates `block` starting from `init`.
pub fn validate(block: &Block, init: &State, cfg: &ValidatorConfig) -> Result<Validation, ValidateError> {
    let start = Instant::now();
    let bg = block.graph()?;
    let order = prevalidate(block, &bg)?;
    let mem = SharedState::new(block, init)?;
    let counters = cfg.smv.then(|| CounterTable::new(mem.cells.len()));
    let run = Run {
        scts: &block.scts,
        mem: &mem,
        counters: counters.as_ref(),
        halt: AtomicBool::new(false),
        signal: Mutex::new(None),
        executions: (0..block.scts.len()).map(|_| AtomicU32::new(0)).collect(),
    };
    let mut waves = Vec::new();
    match cfg.strategy {
        Strategy::Serial => {
            for ts in order {
                let idx = bg.vertex(ts).and_then(VertexNode::sc_fun).expect("prevalidated") as usize;
                if !run.execute(idx) {
                    break;
                }
            }
        }
        Strategy::Decentralized => run.decentralized(&bg, cfg.threads.max(1)),
        Strategy::ForkJoin => waves = run.fork_join(&bg, cfg.threads.max(1)),
    }
    let signal = *run.signal.lock();
    let verdict = match signal {
        Some((key, idx)) => Verdict::RejectMaliciousMiner { key, sct_id: block.scts[idx].id },
        None => {
            let fs = mem.snapshot();
            if fs == block.final_state {
                Verdict::Accept(fs)
            } else {
                Verdict::RejectStateMismatch
            }
        }
    };
    Ok(Validation {
        verdict,
        elapsed: start.elapsed(),
        counters_clean: counters.as_ref().is_none_or(CounterTable::is_clean),
        executions: run.executions.iter().map(|e| e.load(Ordering::Acquire)).collect(),
        waves,
    })
}

pub fn validate_serial(block: &Block, init: &State) -> Result<Verdict, ValidateError> {
    validate(block, init, &ValidatorConfig::new(Strategy::Serial, 1, false)).map(|v| v.verdict)
}

pub fn validate_decentralized(block: &Block, threads: usize, smv: bool, init: &State) -> Result<Verdict, ValidateError> {
    validate(block, init, &ValidatorConfig::new(Strategy::Decentralized, threads, smv)).map(|v| v.verdict)
}

pub fn validate_forkjoin(block: &Block, threads: usize, smv: bool, init: &State) -> Result<Verdict, ValidateError> {
    validate(block, init, &ValidatorConfig::new(Strategy::ForkJoin, threads, smv)).map(|v| v.verdict)
}

/// Checks that vertices and SCTs correspond one to one and that the graph is
/// acyclic. Returns a topological order.
fn prevalidate(block: &Block, bg: &BlockGraph) -> Result<Vec<crate::Ts>, ValidateError> {
    let n = block.scts.len();
    if bg.num_vertices() != n {
        return Err(ValidateError::VertexMismatch(format!("{} vertices for {n} SCTs", bg.num_vertices())));
    }
    let mut seen = vec![false; n];
    for v in bg.vertices() {
        let idx = v.sc_fun().ok_or_else(|| ValidateError::VertexMismatch(format!("T{} has no SCT", v.ts())))?;
        match seen.get_mut(idx as usize) {
            Some(s) if !*s => *s = true,
            _ => return Err(ValidateError::VertexMismatch(format!("T{} refers to SCT {idx}", v.ts()))),
        }
    }
    Ok(bg.topo_order()?)
}

/// Dense shared memory, one cell per key; `ABSENT` marks a missing key.
struct SharedState {
    cells: Box<[AtomicI64]>,
}

impl SharedState {
    fn new(block: &Block, init: &State) -> Result<Self, ValidateError> {
        let max_key = init
            .keys()
            .chain(block.final_state.keys())
            .copied()
            .chain(block.scts.iter().map(|s| s.call.max_key()))
            .max();
        let size = match max_key {
            Some(k) if k > MAX_KEY => return Err(ValidateError::KeyOutOfRange(k)),
            Some(k) => k as usize + 1,
            None => 0,
        };
        let cells: Box<[AtomicI64]> = (0..size).map(|_| AtomicI64::new(ABSENT)).collect();
        for (&k, &v) in init {
            cells[k as usize].store(v, Ordering::Relaxed);
        }
        Ok(Self { cells })
    }

    fn load(&self, key: Key) -> Option<Value> {
        match self.cells[key as usize].load(Ordering::Acquire) {
            ABSENT => None,
            v => Some(v),
        }
    }

    fn store(&self, key: Key, value: Option<Value>) -> Option<Value> {
        match self.cells[key as usize].swap(value.unwrap_or(ABSENT), Ordering::AcqRel) {
            ABSENT => None,
            v => Some(v),
        }
    }

    fn snapshot(&self) -> State {
        (0..self.cells.len() as Key).filter_map(|k| self.load(k).map(|v| (k, v))).collect()
    }
}

/// Direct access to shared memory, optionally under counter checks.
struct ReplayExecutor<'a> {
    mem: &'a SharedState,
    counters: Option<TxnCounters<'a>>,
    halt: &'a AtomicBool,
}

impl ReplayExecutor<'_> {
    fn check(&self) -> Result<(), Halt> {
        if self.halt.load(Ordering::Acquire) {
            Err(Halt::Cancelled)
        } else {
            Ok(())
        }
    }
}

impl Executor for ReplayExecutor<'_> {
    fn lookup(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        self.check()?;
        if let Some(c) = &mut self.counters {
            c.lookup(key)?;
        }
        Ok(self.mem.load(key))
    }

    fn insert(&mut self, key: Key, value: Value) -> Result<(), Halt> {
        self.check()?;
        if let Some(c) = &mut self.counters {
            c.update(key)?;
        }
        self.mem.store(key, Some(value));
        Ok(())
    }

    fn delete(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        self.check()?;
        if let Some(c) = &mut self.counters {
            c.update(key)?;
        }
        Ok(self.mem.store(key, None))
    }
}

struct Run<'a> {
    scts: &'a [Sct],
    mem: &'a SharedState,
    counters: Option<&'a CounterTable>,
    halt: AtomicBool,
    /// First counter violation: key and SCT index.
    signal: Mutex<Option<(Key, usize)>>,
    executions: Box<[AtomicU32]>,
}

impl Run<'_> {
    /// Executes SCT `idx`; returns false once the run has been stopped.
    fn execute(&self, idx: usize) -> bool {
        self.executions[idx].fetch_add(1, Ordering::AcqRel);
        let mut ex = ReplayExecutor { mem: self.mem, counters: self.counters.map(TxnCounters::begin), halt: &self.halt };
        let result = self.scts[idx].execute(&mut ex);
        if let Some(c) = ex.counters.take() {
            c.end();
        }
        match result {
            Ok(_) => !self.halt.load(Ordering::Acquire),
            Err(Halt::Malicious { key }) => {
                self.signal.lock().get_or_insert((key, idx));
                self.halt.store(true, Ordering::Release);
                false
            }
            Err(Halt::Cancelled) => false,
            Err(Halt::Abort) => unreachable!("replay never aborts"),
        }
    }

    fn sct_of(v: &VertexNode) -> usize {
        v.sc_fun().expect("prevalidated") as usize
    }

    fn decentralized(&self, bg: &BlockGraph, threads: usize) {
        let n = bg.num_vertices();
        let done = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| {
                    let mut rng = rand::rng();
                    let mut log = Vec::new();
                    while done.load(Ordering::Acquire) < n && !self.halt.load(Ordering::Acquire) {
                        let claimed = bg.local_search(&mut log).or_else(|| bg.global_search_from(rng.random_range(0..n)));
                        let Some(v) = claimed else {
                            std::thread::yield_now();
                            continue;
                        };
                        if !self.execute(Self::sct_of(v)) {
                            break;
                        }
                        bg.rem_exec_node(v, &mut log);
                        done.fetch_add(1, Ordering::AcqRel);
                    }
                });
            }
        });
    }

    fn fork_join(&self, bg: &BlockGraph, threads: usize) -> Vec<usize> {
        let wave: Mutex<Vec<&VertexNode>> = Mutex::new(Vec::new());
        let next = AtomicUsize::new(0);
        let finished = AtomicBool::new(false);
        let barrier = Barrier::new(threads + 1);
        let mut sizes = Vec::new();
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    barrier.wait();
                    if finished.load(Ordering::Acquire) {
                        break;
                    }
                    let current = wave.lock().clone();
                    let mut released = Vec::new();
                    while let Some(&v) = current.get(next.fetch_add(1, Ordering::AcqRel)) {
                        if self.execute(Self::sct_of(v)) {
                            bg.rem_exec_node(v, &mut released);
                        }
                    }
                    barrier.wait();
                });
            }
            loop {
                let mut harvest = Vec::new();
                if !self.halt.load(Ordering::Acquire) {
                    while let Some(v) = bg.global_search() {
                        harvest.push(v);
                    }
                }
                if harvest.is_empty() {
                    finished.store(true, Ordering::Release);
                    barrier.wait();
                    break;
                }
                sizes.push(harvest.len());
                *wave.lock() = harvest;
                next.store(0, Ordering::Release);
                barrier.wait();
                barrier.wait();
            }
        });
        sizes
    }
}
