use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use objsc::harness::{
    mine_edge_sweep, report_bg_stats, run_adversary_experiment, run_sweep, write_csv, AdversaryConfig, AttackBlock,
    RunConfig, Sweep,
};
use objsc::validator::{validate, ValidatorConfig};
use objsc::{generate_workload, initial_state, mine_block, Block, ContractMix, MinerConfig, Protocol, Strategy, WorkloadSpec};

#[derive(Parser)]
#[command(name = "objsc", version, about = "Concurrent smart-contract miner and validator experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine one block and write it in binary form.
    Mine {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value = "mvostm")]
        protocol: Protocol,
        /// Block output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a block (mined on the fly when no block file is given).
    Validate {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        validator: ValidatorArgs,
        /// Block produced by `mine` with the same workload flags.
        #[arg(long)]
        block: Option<PathBuf>,
        #[arg(long, default_value = "mvostm")]
        protocol: Protocol,
    },
    /// Run a workload sweep and write aggregated CSV rows.
    Sweep {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        validator: ValidatorArgs,
        #[arg(long, default_value = "w1")]
        sweep: Sweep,
        #[arg(long, default_value_t = 26)]
        repeats: usize,
        /// Restrict to one protocol (default: svostm and mvostm).
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Measure acceptance of a malicious block with and without counter checks.
    Attack {
        #[arg(long, default_value = "double-spend")]
        attack: AttackBlock,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value = "dec")]
        strategy: Strategy,
        #[arg(long, env = "OBJSC_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate block-graph sizes over a 50..300 SCT sweep.
    Bgstats {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// Seeds per point, starting at --seed.
        #[arg(long, default_value_t = 5)]
        repeats: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorkloadArgs {
    /// `key = value` workload file; flags override its entries.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    contract: Option<ContractMix>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    scts: Option<usize>,
    #[arg(long)]
    shared: Option<u32>,
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long, env = "OBJSC_SEED")]
    seed: Option<u64>,
    /// Compute units per SCT.
    #[arg(long)]
    work: Option<u32>,
}

impl WorkloadArgs {
    fn spec(&self) -> Result<WorkloadSpec> {
        let mut spec = match &self.workload {
            Some(path) => WorkloadSpec::from_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => WorkloadSpec::default(),
        };
        if let Some(c) = self.contract {
            spec.contract = c;
        }
        if let Some(t) = self.threads {
            spec.num_threads = t;
        }
        if let Some(n) = self.scts {
            spec.num_scts = n;
        }
        if let Some(s) = self.shared {
            spec.shared_items = s;
        }
        if let Some(b) = self.buckets {
            spec.hash_buckets = b;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(w) = self.work {
            spec.work = w;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct ValidatorArgs {
    #[arg(long, default_value = "dec")]
    strategy: Strategy,
    /// Enable counter checks (the default).
    #[arg(long, overrides_with = "no_smv")]
    smv: bool,
    /// Replay without counter checks.
    #[arg(long = "no-smv")]
    no_smv: bool,
}

impl ValidatorArgs {
    fn smv(&self) -> bool {
        !self.no_smv || self.smv
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Mine { workload, protocol, out } => {
            let spec = workload.spec()?;
            let block = mine(&spec, protocol)?;
            let g = block.graph()?;
            println!(
                "mined {} SCTs with {protocol}: {} edges, {} aborts, hash {:016x}",
                block.scts.len(),
                g.num_edges(),
                block.meta.aborts,
                block.hash()
            );
            if let Some(path) = out {
                fs::write(&path, block.to_bytes()).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { workload, validator, block, protocol } => {
            let spec = workload.spec()?;
            let init = initial_state(&spec)?;
            let block = match block {
                Some(path) => {
                    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                    Block::from_bytes(&bytes)?
                }
                None => mine(&spec, protocol)?,
            };
            let cfg = ValidatorConfig::new(validator.strategy, spec.num_threads, validator.smv());
            let v = validate(&block, &init, &cfg)?;
            println!("{}", v.record_line(&cfg, block.meta.protocol.name()));
            Ok(if v.verdict.is_accept() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Sweep { workload, validator, sweep, repeats, protocol, out } => {
            if repeats == 0 {
                bail!("--repeats must be at least 1");
            }
            let cfg = RunConfig {
                sweep,
                repeats,
                protocols: protocol.map_or_else(|| vec![Protocol::Svostm, Protocol::Mvostm], |p| vec![p]),
                workload: workload.spec()?,
                strategy: validator.strategy,
                smv: validator.smv(),
                out: Some(out.clone()),
            };
            let rows = run_sweep(&cfg)?;
            for r in &rows {
                println!(
                    "{} {:>3} SCTs {:>2} threads {:>3} items {:<6} {:<9} {:>9.3} ms  speedup {:>6.2}  edges {:>6.1}",
                    r.sweep,
                    r.scts,
                    r.threads,
                    r.shared,
                    r.protocol,
                    format!("{:?}", r.role).to_lowercase(),
                    r.concurrent_ms,
                    r.speedup,
                    r.bg_edges
                );
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack { attack, trials, threads, strategy, seed, out } => {
            let rows = run_adversary_experiment(&AdversaryConfig { attack, threads, strategy, seed }, trials)?;
            for r in &rows {
                println!(
                    "{} {:<6} accepted {:>4}/{} ({:.1}%), malicious {:>4}, mismatch {:>4}, counters clean: {}",
                    r.attack, r.mode, r.accepted, r.trials, r.acceptance_pct, r.rejected_malicious, r.rejected_mismatch, r.counters_clean
                );
            }
            if let Some(path) = out {
                write_csv(&path, &rows)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bgstats { workload, repeats, out } => {
            let spec = workload.spec()?;
            let seeds: Vec<u64> = (spec.seed..spec.seed + repeats.max(1)).collect();
            let sizes: Vec<usize> = (50..=300).step_by(50).collect();
            let blocks = mine_edge_sweep(
                spec.contract,
                &sizes,
                &seeds,
                spec.num_threads,
                &[Protocol::Svostm, Protocol::Mvostm],
            )?;
            let rows = report_bg_stats(&blocks)?;
            for r in rows.iter().filter(|r| r.protocol.ends_with("-mean")) {
                println!("{:<13} edges {:>5}  graph {:>6} B  {:.1}% of block", r.protocol, r.bg_edges, r.bg_bytes, r.bg_pct);
            }
            if let Some(path) = out {
                write_csv(&path, &rows)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn mine(spec: &WorkloadSpec, protocol: Protocol) -> Result<Block> {
    let scts = generate_workload(spec)?;
    let init = initial_state(spec)?;
    let cfg = MinerConfig { protocol, threads: spec.num_threads, buckets: spec.hash_buckets };
    Ok(mine_block(&cfg, &scts, &init, 0))
}
