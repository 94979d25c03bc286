//! Workload generation: initial (minted) state plus a block's worth of SCTs.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sct::{Auction, Call, Sct, NO_BIDDER};
use crate::{Key, State, Value};

/// Balance minted into every Coin account before a block runs.
pub const INITIAL_BALANCE: Value = 100;
/// Largest transfer or bid amount drawn by the generator.
pub const MAX_AMOUNT: Value = 100;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("cannot read workload file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse workload file: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContractMix {
    Coin,
    Ballot,
    Auction,
    Mix,
}

impl ContractMix {
    pub fn name(&self) -> &'static str {
        match self {
            ContractMix::Coin => "coin",
            ContractMix::Ballot => "ballot",
            ContractMix::Auction => "auction",
            ContractMix::Mix => "mix",
        }
    }
}

impl FromStr for ContractMix {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "coin" => Ok(ContractMix::Coin),
            "ballot" => Ok(ContractMix::Ballot),
            "auction" => Ok(ContractMix::Auction),
            "mix" => Ok(ContractMix::Mix),
            other => Err(WorkloadError::Invalid(format!("unknown contract `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub contract: ContractMix,
    pub num_scts: usize,
    pub num_threads: usize,
    pub shared_items: u32,
    pub hash_buckets: usize,
    pub seed: u64,
    /// Computation units per SCT (see [`crate::sct::burn`]).
    pub work: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            contract: ContractMix::Mix,
            num_scts: 100,
            num_threads: 50,
            shared_items: 500,
            hash_buckets: 30,
            seed: 0,
            work: 0,
        }
    }
}

impl WorkloadSpec {
    /// Reads a spec from a `key = value` file; absent keys keep their defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, WorkloadError> {
        let text = std::fs::read_to_string(path)?;
        let spec: WorkloadSpec = text.parse()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.num_threads == 0 {
            return Err(WorkloadError::Invalid("num_threads must be at least 1".into()));
        }
        if self.hash_buckets == 0 {
            return Err(WorkloadError::Invalid("hash_buckets must be at least 1".into()));
        }
        let min = match self.contract {
            ContractMix::Mix => 3 * MIN_REGION,
            _ => MIN_REGION,
        };
        if self.shared_items < min {
            return Err(WorkloadError::Invalid(format!(
                "{} needs at least {min} shared items, got {}",
                self.contract.name(),
                self.shared_items
            )));
        }
        Ok(())
    }

    fn regions(&self) -> Vec<Region> {
        let n = self.shared_items;
        match self.contract {
            ContractMix::Coin => vec![Region::new(ContractMix::Coin, 0, n)],
            ContractMix::Ballot => vec![Region::new(ContractMix::Ballot, 0, n)],
            ContractMix::Auction => vec![Region::new(ContractMix::Auction, 0, n)],
            ContractMix::Mix => {
                let third = n / 3;
                vec![
                    Region::new(ContractMix::Coin, 0, third),
                    Region::new(ContractMix::Ballot, third, third),
                    Region::new(ContractMix::Auction, 2 * third, n - 2 * third),
                ]
            }
        }
    }
}

impl FromStr for WorkloadSpec {
    type Err = toml::de::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        toml::from_str(s)
    }
}

/// Every region needs room for an auction's control keys plus a bidder pair.
const MIN_REGION: u32 = Auction::CONTROL_KEYS + 2;

/// A contiguous key range owned by one contract.
#[derive(Debug, Clone, Copy)]
struct Region {
    contract: ContractMix,
    base: Key,
    len: u32,
}

impl Region {
    fn new(contract: ContractMix, base: Key, len: u32) -> Self {
        Self { contract, base, len }
    }

    fn proposals(&self) -> u32 {
        (self.len / 50).max(1)
    }

    fn keys(&self) -> std::ops::Range<Key> {
        self.base..self.base + self.len
    }

    fn initial(&self, state: &mut State) {
        match self.contract {
            ContractMix::Coin => {
                for k in self.keys() {
                    state.insert(k, INITIAL_BALANCE);
                }
            }
            ContractMix::Ballot => {
                let p = self.proposals();
                for k in self.keys() {
                    state.insert(k, if k < self.base + p { 0 } else { 1 });
                }
            }
            ContractMix::Auction => {
                let a = Auction { base: self.base };
                state.insert(a.max_bid(), 0);
                state.insert(a.max_bidder(), NO_BIDDER);
                state.insert(a.ended(), 0);
                for k in self.base + Auction::CONTROL_KEYS..self.base + self.len {
                    state.insert(k, 0);
                }
            }
            ContractMix::Mix => unreachable!("mix is split into regions"),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Call {
        match self.contract {
            ContractMix::Coin => {
                if rng.random_bool(0.8) {
                    let (sender, receiver) = distinct_pair(rng, self.base, self.len);
                    Call::CoinSend { sender, receiver, amount: rng.random_range(1..=MAX_AMOUNT) }
                } else {
                    Call::CoinGetBalance { account: rng.random_range(self.keys()) }
                }
            }
            ContractMix::Ballot => {
                let p = self.proposals();
                let voters = self.base + p;
                if rng.random_bool(0.85) {
                    Call::BallotVote {
                        voter: rng.random_range(voters..self.base + self.len),
                        proposal: rng.random_range(self.base..voters),
                    }
                } else {
                    let (from, to) = distinct_pair(rng, voters, self.len - p);
                    Call::BallotDelegate { from, to }
                }
            }
            ContractMix::Auction => {
                let auction = Auction { base: self.base };
                let bidder = rng.random_range(self.base + Auction::CONTROL_KEYS..self.base + self.len);
                if rng.random_bool(0.8) {
                    Call::AuctionBid { auction, bidder, amount: rng.random_range(1..=MAX_AMOUNT) }
                } else {
                    Call::AuctionWithdraw { auction, bidder }
                }
            }
            ContractMix::Mix => unreachable!("mix is split into regions"),
        }
    }
}

fn distinct_pair(rng: &mut ChaCha8Rng, base: Key, len: u32) -> (Key, Key) {
    let a = rng.random_range(0..len);
    let b = (a + rng.random_range(1..len)) % len;
    (base + a, base + b)
}

/// The minted state every block of this workload starts from.
pub fn initial_state(spec: &WorkloadSpec) -> Result<State, WorkloadError> {
    spec.validate()?;
    let mut state = State::new();
    for region in spec.regions() {
        region.initial(&mut state);
    }
    Ok(state)
}

/// Generates `spec.num_scts` SCTs; deterministic in `spec.seed`.
///
/// Mix workloads cycle Coin, Ballot, Auction so the three contracts appear in
/// equal proportion.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Sct>, WorkloadError> {
    spec.validate()?;
    let regions = spec.regions();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scts = (0..spec.num_scts)
        .map(|i| {
            let region = &regions[i % regions.len()];
            Sct::new(i as u32, region.draw(&mut rng)).with_work(spec.work)
        })
        .collect();
    Ok(scts)
}
