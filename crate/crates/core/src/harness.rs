//! Experiment driver: workload sweeps, timing, speedups, block-graph sizes and
//! malicious-block acceptance rates.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, AttackError};
use crate::block::Block;
use crate::graph::SizeStats;
use crate::miner::{mine_block, mine_serial, MinerConfig, Protocol};
use crate::validator::{validate, Strategy, ValidateError, ValidatorConfig, Verdict};
use crate::workload::{generate_workload, initial_state, ContractMix, WorkloadError, WorkloadSpec};
use crate::State;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("honest {protocol} block rejected ({verdict}) at {point}")]
    HonestRejected { protocol: Protocol, verdict: &'static str, point: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sweep {
    W1,
    W2,
    W3,
    Custom,
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::W1 => "W1",
            Sweep::W2 => "W2",
            Sweep::W3 => "W3",
            Sweep::Custom => "custom",
        })
    }
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "w1" => Ok(Sweep::W1),
            "w2" => Ok(Sweep::W2),
            "w3" => Ok(Sweep::W3),
            "custom" => Ok(Sweep::Custom),
            _ => Err(format!("unknown sweep `{s}` (expected w1, w2, w3 or custom)")),
        }
    }
}

/// One sweep point: SCT count, miner/validator threads and shared items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Point {
    pub scts: usize,
    pub threads: usize,
    pub shared: u32,
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scts={} threads={} shared={}", self.scts, self.threads, self.shared)
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sweep: Sweep,
    /// Runs per point; the first is a discarded warm-up when there are two or
    /// more.
    pub repeats: usize,
    pub protocols: Vec<Protocol>,
    /// Base workload; the sweep overrides the varied dimension.
    pub workload: WorkloadSpec,
    pub strategy: Strategy,
    pub smv: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sweep: Sweep::W1,
            repeats: 26,
            protocols: vec![Protocol::Svostm, Protocol::Mvostm],
            workload: WorkloadSpec::default(),
            strategy: Strategy::Decentralized,
            smv: true,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn points(&self) -> Vec<Point> {
        let w = &self.workload;
        match self.sweep {
            Sweep::W1 => (50..=300).step_by(50).map(|scts| Point { scts, threads: 50, shared: w.shared_items }).collect(),
            Sweep::W2 => (10..=60).step_by(10).map(|threads| Point { scts: 100, threads, shared: w.shared_items }).collect(),
            Sweep::W3 => (100..=600u32).step_by(100).map(|shared| Point { scts: 100, threads: 50, shared }).collect(),
            Sweep::Custom => vec![Point { scts: w.num_scts, threads: w.num_threads, shared: w.shared_items }],
        }
    }

    fn spec_at(&self, p: Point) -> WorkloadSpec {
        WorkloadSpec { num_scts: p.scts, num_threads: p.threads, shared_items: p.shared, ..self.workload.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Miner,
    Validator,
}

/// One CSV row: a sweep point, protocol and role, averaged over the measured
/// repeats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub sweep: String,
    pub contract: String,
    pub scts: usize,
    pub threads: usize,
    pub shared: u32,
    pub buckets: usize,
    pub seed: u64,
    pub protocol: String,
    pub role: Role,
    pub strategy: String,
    pub smv: bool,
    pub samples: usize,
    pub serial_ms: f64,
    pub concurrent_ms: f64,
    pub speedup: f64,
    pub aborts: f64,
    pub bg_edges: f64,
    pub bg_bytes: f64,
    pub bg_pct: f64,
    pub accepted: usize,
}

/// Raw measurements of one repeat.
#[derive(Debug, Clone, Serialize)]
struct Sample<'a> {
    point: Point,
    protocol: &'a str,
    repeat: usize,
    warmup: bool,
    serial_miner_ms: f64,
    miner_ms: f64,
    serial_validator_ms: f64,
    validator_ms: f64,
    aborts: u64,
    bg_edges: usize,
    verdict: &'static str,
}

fn ms(d: Duration) -> f64 {
    // Never report a zero duration; speedups divide by it.
    (d.as_secs_f64() * 1e3).max(1e-6)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

#[derive(Default)]
struct Acc {
    serial_miner: f64,
    miner: f64,
    serial_validator: f64,
    validator: f64,
    aborts: f64,
    edges: f64,
    bg_bytes: f64,
    bg_pct: f64,
    accepted: usize,
    n: usize,
}

/// Runs every sweep point for every protocol and returns the aggregated rows.
/// Writes the CSV (and a `.jsonl` stream of raw samples) when `cfg.out` is set.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<RunRecord>, HarnessError> {
    let mut debug = match &cfg.out {
        Some(path) => Some(BufWriter::new(File::create(path.with_extension("jsonl"))?)),
        None => None,
    };
    let mut rows = Vec::new();
    for point in cfg.points() {
        let spec = cfg.spec_at(point);
        let scts = generate_workload(&spec)?;
        let init = initial_state(&spec)?;
        for &protocol in &cfg.protocols {
            let miner_cfg = MinerConfig { protocol, threads: point.threads, buckets: spec.hash_buckets };
            let val_cfg = ValidatorConfig::new(cfg.strategy, point.threads, cfg.smv);
            let mut acc = Acc::default();
            for repeat in 0..cfg.repeats {
                let (_, serial_miner) = timed(|| mine_serial(&scts, &init, 0));
                let (block, miner) = timed(|| mine_block(&miner_cfg, &scts, &init, 0));
                let v = validate(&block, &init, &val_cfg)?;
                if !v.verdict.is_accept() {
                    return Err(HarnessError::HonestRejected {
                        protocol,
                        verdict: v.verdict.label(),
                        point: point.to_string(),
                    });
                }
                let serial_v = validate(&block, &init, &ValidatorConfig::new(Strategy::Serial, 1, false))?;
                let edges = block.graph()?.num_edges();
                let warmup = cfg.repeats > 1 && repeat == 0;
                if let Some(out) = debug.as_mut() {
                    let sample = Sample {
                        point,
                        protocol: protocol.name(),
                        repeat,
                        warmup,
                        serial_miner_ms: ms(serial_miner),
                        miner_ms: ms(miner),
                        serial_validator_ms: ms(serial_v.elapsed),
                        validator_ms: ms(v.elapsed),
                        aborts: block.meta.aborts,
                        bg_edges: edges,
                        verdict: v.verdict.label(),
                    };
                    serde_json::to_writer(&mut *out, &sample)?;
                    out.write_all(b"\n")?;
                }
                if warmup {
                    continue;
                }
                let size = SizeStats::new(scts.len() as u64, edges as u64);
                acc.serial_miner += ms(serial_miner);
                acc.miner += ms(miner);
                acc.serial_validator += ms(serial_v.elapsed);
                acc.validator += ms(v.elapsed);
                acc.aborts += block.meta.aborts as f64;
                acc.edges += edges as f64;
                acc.bg_bytes += size.bg_bytes as f64;
                acc.bg_pct += size.bg_pct;
                acc.accepted += 1;
                acc.n += 1;
            }
            let n = acc.n.max(1) as f64;
            let row = |role: Role, serial: f64, concurrent: f64| RunRecord {
                sweep: cfg.sweep.to_string(),
                contract: spec.contract.name().into(),
                scts: point.scts,
                threads: point.threads,
                shared: point.shared,
                buckets: spec.hash_buckets,
                seed: spec.seed,
                protocol: protocol.name().into(),
                role,
                strategy: match role {
                    Role::Miner => "-".into(),
                    Role::Validator => cfg.strategy.name().into(),
                },
                smv: role == Role::Validator && cfg.smv,
                samples: acc.n,
                serial_ms: serial / n,
                concurrent_ms: concurrent / n,
                speedup: if acc.n == 0 { 0.0 } else { serial / concurrent },
                aborts: acc.aborts / n,
                bg_edges: acc.edges / n,
                bg_bytes: acc.bg_bytes / n,
                bg_pct: acc.bg_pct / n,
                accepted: acc.accepted,
            };
            rows.push(row(Role::Miner, acc.serial_miner, acc.miner));
            rows.push(row(Role::Validator, acc.serial_validator, acc.validator));
        }
    }
    if let Some(out) = debug.as_mut() {
        out.flush()?;
    }
    if let Some(path) = &cfg.out {
        write_csv(path, &rows)?;
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Which malicious block an adversary experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackBlock {
    DoubleSpend,
    DoubleVote,
}

impl FromStr for AttackBlock {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "double_spend" | "coin" => Ok(AttackBlock::DoubleSpend),
            "double_vote" | "ballot" => Ok(AttackBlock::DoubleVote),
            _ => Err(format!("unknown attack `{s}` (expected double-spend or double-vote)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdversaryConfig {
    pub attack: AttackBlock,
    pub threads: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdversaryRow {
    pub attack: String,
    pub mode: String,
    pub strategy: String,
    pub threads: usize,
    pub trials: usize,
    pub accepted: usize,
    pub rejected_malicious: usize,
    pub rejected_mismatch: usize,
    pub acceptance_pct: f64,
    pub counters_clean: bool,
}

/// Validates a malicious block `trials` times without and with counter
/// checks. Empty when `trials == 0`.
pub fn run_adversary_experiment(cfg: &AdversaryConfig, trials: usize) -> Result<Vec<AdversaryRow>, HarnessError> {
    if trials == 0 {
        return Ok(Vec::new());
    }
    let (block, init, name): (Block, State, &str) = match cfg.attack {
        AttackBlock::DoubleSpend => {
            (adversary::make_double_spend_block(0), adversary::double_spend_init(), "double_spend")
        }
        AttackBlock::DoubleVote => {
            let a = adversary::make_double_vote_block(0, cfg.seed)?;
            (a.block, a.init, "double_vote")
        }
    };
    let mut rows = Vec::new();
    for smv in [false, true] {
        let vcfg = ValidatorConfig::new(cfg.strategy, cfg.threads, smv);
        let mut row = AdversaryRow {
            attack: name.into(),
            mode: if smv { "smv" } else { "nonsmv" }.into(),
            strategy: cfg.strategy.name().into(),
            threads: cfg.threads,
            trials,
            accepted: 0,
            rejected_malicious: 0,
            rejected_mismatch: 0,
            acceptance_pct: 0.0,
            counters_clean: true,
        };
        for _ in 0..trials {
            let v = validate(&block, &init, &vcfg)?;
            row.counters_clean &= v.counters_clean;
            match v.verdict {
                Verdict::Accept(_) => row.accepted += 1,
                Verdict::RejectMaliciousMiner { .. } => row.rejected_malicious += 1,
                Verdict::RejectStateMismatch => row.rejected_mismatch += 1,
            }
        }
        row.acceptance_pct = 100.0 * row.accepted as f64 / trials as f64;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BgStatsRow {
    pub protocol: String,
    pub scts: usize,
    pub bg_edges: usize,
    pub block_bytes: u64,
    pub bg_bytes: u64,
    pub bg_pct: f64,
}

/// Size-model rows for each block, followed by one mean row per protocol
/// (`scts` and `bg_edges` rounded, sizes averaged).
pub fn report_bg_stats(blocks: &[Block]) -> Result<Vec<BgStatsRow>, HarnessError> {
    let mut rows = Vec::new();
    for b in blocks {
        let s = b.graph()?.size_stats(b.scts.len());
        rows.push(BgStatsRow {
            protocol: b.meta.protocol.name().into(),
            scts: b.scts.len(),
            bg_edges: s.num_edges as usize,
            block_bytes: s.block_bytes,
            bg_bytes: s.bg_bytes,
            bg_pct: s.bg_pct,
        });
    }
    let mut summary = Vec::new();
    for p in Protocol::ALL {
        let mine: Vec<&BgStatsRow> = rows.iter().filter(|r| r.protocol == p.name()).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let mean = |f: &dyn Fn(&BgStatsRow) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / n;
        summary.push(BgStatsRow {
            protocol: format!("{}-mean", p.name()),
            scts: mean(&|r| r.scts as f64).round() as usize,
            bg_edges: mean(&|r| r.bg_edges as f64).round() as usize,
            block_bytes: mean(&|r| r.block_bytes as f64).round() as u64,
            bg_bytes: mean(&|r| r.bg_bytes as f64).round() as u64,
            bg_pct: mean(&|r| r.bg_pct),
        });
    }
    rows.extend(summary);
    Ok(rows)
}

/// Mines one block per (SCT count, seed, protocol) for edge-count and size
/// comparisons.
pub fn mine_edge_sweep(
    contract: ContractMix,
    scts: &[usize],
    seeds: &[u64],
    threads: usize,
    protocols: &[Protocol],
) -> Result<Vec<Block>, HarnessError> {
    let mut blocks = Vec::new();
    for &n in scts {
        for &seed in seeds {
            let spec = WorkloadSpec { contract, num_scts: n, num_threads: threads, seed, ..WorkloadSpec::default() };
            let work = generate_workload(&spec)?;
            let init = initial_state(&spec)?;
            for &p in protocols {
                let cfg = MinerConfig { protocol: p, threads, buckets: spec.hash_buckets };
                blocks.push(mine_block(&cfg, &work, &init, 0));
            }
        }
    }
    Ok(blocks)
}
