//! Malicious blocks with edges missing from the block graph.
//!
//! A malicious miner drops an edge between two conflicting SCTs and ships the
//! final state of a racy interleaving of the two. Validators that replay
//! without counter checks accept the block whenever their own schedule
//! happens to reproduce that race; the smart validator always rejects it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{Block, BlockMeta};
use crate::graph::{BlockGraph, GraphError};
use crate::miner::{mine_serial, Protocol};
use crate::sct::{Call, Executor, Halt, MapExecutor, Sct};
use crate::{Key, State, Ts, Value};

pub const ACCOUNT_A: Key = 0;
pub const ACCOUNT_B: Key = 1;
pub const ACCOUNT_C: Key = 2;

/// Compute units spent by each double-spend send between reading and
/// debiting the sender; long enough that a validator thread is usually
/// preempted inside the window.
pub const DOUBLE_SPEND_WORK: u32 = 4_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no edge can be dropped to produce a detectable malicious block")]
    NoRemovableEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    /// Drop one edge of an honest block, chosen by seed.
    DropEdge,
    /// The canonical two-send double spend.
    DoubleSpend,
    /// One voter voting for two proposals.
    DoubleVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub seed: u64,
}

/// Racy outcome written into a double-spend block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fabrication {
    /// The $60 debit lands last: A=40, B=150, C=160.
    SixtyLast,
    /// The $50 debit lands last: A=50, B=150, C=160.
    FiftyLast,
}

/// A malicious block together with the state it starts from.
#[derive(Debug, Clone)]
pub struct Attack {
    pub block: Block,
    pub init: State,
    /// The dropped edge, as `(from, to)` timestamps.
    pub dropped: (Ts, Ts),
}

pub fn double_spend_init() -> State {
    [(ACCOUNT_A, 100), (ACCOUNT_B, 100), (ACCOUNT_C, 100)].into_iter().collect()
}

pub fn double_spend_scts(work: u32) -> Vec<Sct> {
    vec![
        Sct::new(0, Call::CoinSend { sender: ACCOUNT_A, receiver: ACCOUNT_B, amount: 50 }).with_work(work),
        Sct::new(1, Call::CoinSend { sender: ACCOUNT_A, receiver: ACCOUNT_C, amount: 60 }).with_work(work),
    ]
}

pub fn make_double_spend_block(prev_hash: u64) -> Block {
    make_double_spend_block_with(prev_hash, Fabrication::SixtyLast, DOUBLE_SPEND_WORK)
}

/// Two sends from A with no edge between them and a final state in which both
/// debits read A's original balance.
pub fn make_double_spend_block_with(prev_hash: u64, fabrication: Fabrication, work: u32) -> Block {
    let bg = BlockGraph::new();
    bg.add_vertex(1, Some(0));
    bg.add_vertex(2, Some(1));
    let a = match fabrication {
        Fabrication::SixtyLast => 40,
        Fabrication::FiftyLast => 50,
    };
    Block {
        scts: double_spend_scts(work),
        bg: bg.serialize(),
        final_state: [(ACCOUNT_A, a), (ACCOUNT_B, 150), (ACCOUNT_C, 160)].into_iter().collect(),
        prev_hash,
        meta: BlockMeta { protocol: Protocol::Svostm, threads: 2, aborts: 0 },
    }
}

/// Voter 2 votes for proposal 0 and for proposal 1; the honest block orders
/// the two votes and the malicious one drops that edge.
pub fn make_double_vote_block(prev_hash: u64, seed: u64) -> Result<Attack, AttackError> {
    let init: State = [(0, 0), (1, 0), (2, 1)].into_iter().collect();
    let scts = vec![
        Sct::new(0, Call::BallotVote { voter: 2, proposal: 0 }),
        Sct::new(1, Call::BallotVote { voter: 2, proposal: 1 }),
    ];
    let honest = mine_serial(&scts, &init, prev_hash);
    make_emb_block(&honest, &init, &AttackSpec { kind: AttackKind::DropEdge, seed })
}

/// Builds the attack described by `spec`; `honest` and `init` are used only
/// for [`AttackKind::DropEdge`].
pub fn make_attack(spec: &AttackSpec, honest: &Block, init: &State) -> Result<Attack, AttackError> {
    match spec.kind {
        AttackKind::DropEdge => make_emb_block(honest, init, spec),
        AttackKind::DoubleSpend => Ok(Attack {
            block: make_double_spend_block(honest.prev_hash),
            init: double_spend_init(),
            dropped: (1, 2),
        }),
        AttackKind::DoubleVote => make_double_vote_block(honest.prev_hash, spec.seed),
    }
}

/// Drops one edge of `honest` and fabricates a matching final state.
///
/// An edge `u → v` qualifies when dropping it leaves every other ordered pair
/// ordered, so the only new freedom is the relative order of `u` and `v`. The
/// fabricated state comes from running `u` and `v` in strict step-by-step
/// alternation and must differ from both serial orders of the pair; otherwise
/// the next candidate is tried.
pub fn make_emb_block(honest: &Block, init: &State, spec: &AttackSpec) -> Result<Attack, AttackError> {
    let bg = honest.graph()?;
    let topo = bg.topo_order()?;
    let position: BTreeMap<Ts, usize> = topo.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let index = |ts: Ts| position[&ts];
    let n = topo.len();
    let mut edges: Vec<(usize, usize)> = bg.edges().into_iter().map(|(a, b)| (index(a), index(b))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    edges.shuffle(&mut rng);
    let full = Reach::new(n, &edges, None);
    let sct_of = |i: usize| bg.vertex(topo[i]).and_then(|v| v.sc_fun()).expect("honest vertices carry SCTs") as usize;

    for &(u, v) in &edges {
        let cut = Reach::new(n, &edges, Some((u, v)));
        if !cut.only_pair_unordered(&full, u, v) {
            continue;
        }
        let order: Vec<usize> = (0..n).collect();
        let serial = |first: usize, second: usize| {
            let mut state = init.clone();
            let mut ex = MapExecutor::new(&mut state);
            for &i in cut.extension(&order, first, second).iter() {
                honest.scts[sct_of(i)].execute(&mut ex).expect("map executor never halts");
            }
            state
        };
        let honest_fs = serial(u, v);
        let swapped_fs = serial(v, u);
        for (lead, other) in [(u, v), (v, u)] {
            let fs = cut.interleaved(&order, lead, other, |i| honest.scts[sct_of(i)], init);
            if fs != honest_fs && fs != swapped_fs {
                let dropped = (topo[u], topo[v]);
                let tampered = BlockGraph::new();
                for vert in bg.vertices() {
                    tampered.add_vertex(vert.ts(), vert.sc_fun());
                }
                for (a, b) in bg.edges() {
                    if (a, b) != dropped {
                        tampered.add_edge(a, b)?;
                    }
                }
                let mut block = honest.clone();
                block.bg = tampered.serialize();
                block.final_state = fs;
                return Ok(Attack { block, init: init.clone(), dropped });
            }
        }
    }
    Err(AttackError::NoRemovableEdge)
}

/// Reachability over vertices `0..n` (indices in topological order).
struct Reach {
    desc: Vec<BTreeSet<usize>>,
    anc: Vec<BTreeSet<usize>>,
}

impl Reach {
    fn new(n: usize, edges: &[(usize, usize)], skip: Option<(usize, usize)>) -> Self {
        let mut succ = vec![Vec::new(); n];
        for &e in edges {
            if Some(e) != skip {
                succ[e.0].push(e.1);
            }
        }
        let mut desc: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for a in (0..n).rev() {
            let mut d = BTreeSet::new();
            for &b in &succ[a] {
                d.insert(b);
                d.extend(desc[b].iter().copied());
            }
            desc[a] = d;
        }
        let mut anc = vec![BTreeSet::new(); n];
        for (a, ds) in desc.iter().enumerate() {
            for &d in ds {
                anc[d].insert(a);
            }
        }
        Self { desc, anc }
    }

    fn ordered(&self, a: usize, b: usize) -> bool {
        self.desc[a].contains(&b) || self.desc[b].contains(&a)
    }

    /// Whether `(u, v)` is the only pair ordered in `full` but not in `self`.
    fn only_pair_unordered(&self, full: &Reach, u: usize, v: usize) -> bool {
        if self.ordered(u, v) {
            return false;
        }
        let above: Vec<usize> = full.anc[u].iter().copied().chain([u]).collect();
        let below: Vec<usize> = full.desc[v].iter().copied().chain([v]).collect();
        above.iter().all(|&a| below.iter().all(|&d| (a, d) == (u, v) || self.desc[a].contains(&d)))
    }

    /// A linear extension placing `first` before `second`: ancestors of the
    /// pair, the pair, then everything else, each part in topological order.
    fn extension(&self, order: &[usize], first: usize, second: usize) -> Vec<usize> {
        let (before, after) = self.split(order, first, second);
        before.into_iter().chain([first, second]).chain(after).collect()
    }

    fn split(&self, order: &[usize], u: usize, v: usize) -> (Vec<usize>, Vec<usize>) {
        let ancestors: BTreeSet<usize> = self.anc[u].union(&self.anc[v]).copied().collect();
        let before = order.iter().copied().filter(|i| ancestors.contains(i)).collect();
        let after = order.iter().copied().filter(|&i| i != u && i != v && !ancestors.contains(&i)).collect();
        (before, after)
    }

    fn interleaved(&self, order: &[usize], lead: usize, other: usize, sct: impl Fn(usize) -> Sct, init: &State) -> State {
        let (before, after) = self.split(order, lead, other);
        let mut state = init.clone();
        {
            let mut ex = MapExecutor::new(&mut state);
            for i in before {
                sct(i).execute(&mut ex).expect("map executor never halts");
            }
        }
        let state = lockstep(&state, sct(lead), sct(other));
        let mut state = state;
        let mut ex = MapExecutor::new(&mut state);
        for i in after {
            sct(i).execute(&mut ex).expect("map executor never halts");
        }
        state
    }
}

struct Turns {
    turn: usize,
    finished: [bool; 2],
}

/// Shared-state executor that lets two SCTs take strictly alternating steps.
struct LockstepExecutor {
    me: usize,
    state: Arc<Mutex<State>>,
    turns: Arc<(Mutex<Turns>, Condvar)>,
}

impl LockstepExecutor {
    fn step<R>(&mut self, op: impl FnOnce(&mut MapExecutor<'_>) -> R) -> R {
        let (lock, cv) = &*self.turns;
        let mut t = lock.lock();
        while t.turn != self.me && !t.finished[1 - self.me] {
            cv.wait(&mut t);
        }
        let r = op(&mut MapExecutor::new(&mut self.state.lock()));
        t.turn = 1 - self.me;
        cv.notify_all();
        r
    }

    fn finish(&self) {
        let (lock, cv) = &*self.turns;
        lock.lock().finished[self.me] = true;
        cv.notify_all();
    }
}

impl Executor for LockstepExecutor {
    fn lookup(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        self.step(|ex| ex.lookup(key))
    }

    fn insert(&mut self, key: Key, value: Value) -> Result<(), Halt> {
        self.step(|ex| ex.insert(key, value))
    }

    fn delete(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        self.step(|ex| ex.delete(key))
    }

    fn compute(&mut self, _work: u32) -> Result<(), Halt> {
        Ok(())
    }
}

/// Runs `lead` and `other` on two threads, alternating shared-memory steps
/// starting with `lead`. Deterministic.
pub fn lockstep(init: &State, lead: Sct, other: Sct) -> State {
    let state = Arc::new(Mutex::new(init.clone()));
    let turns = Arc::new((Mutex::new(Turns { turn: 0, finished: [false; 2] }), Condvar::new()));
    std::thread::scope(|s| {
        for (me, sct) in [(0, lead), (1, other)] {
            let mut ex = LockstepExecutor { me, state: Arc::clone(&state), turns: Arc::clone(&turns) };
            s.spawn(move || {
                sct.execute(&mut ex).expect("lockstep replay never halts");
                ex.finish();
            });
        }
    });
    let state = state.lock().clone();
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sct::execute_serially;

    #[test]
    fn double_spend_fabrications() {
        let b = make_double_spend_block(0);
        assert_eq!(b.final_state, [(0, 40), (1, 150), (2, 160)].into_iter().collect());
        let alt = make_double_spend_block_with(0, Fabrication::FiftyLast, 0);
        assert_eq!(alt.final_state, [(0, 50), (1, 150), (2, 160)].into_iter().collect());
        let g = b.graph().unwrap();
        assert_eq!((g.num_vertices(), g.num_edges()), (2, 0));
    }

    #[test]
    fn honest_double_spend_differs_from_fabrications() {
        let scts = double_spend_scts(0);
        let mut ij = double_spend_init();
        execute_serially(&scts, &mut ij);
        assert_eq!(ij, [(0, 50), (1, 150), (2, 100)].into_iter().collect());
        let mut ji = double_spend_init();
        execute_serially(&[scts[1], scts[0]], &mut ji);
        assert_eq!(ji, [(0, 40), (1, 100), (2, 160)].into_iter().collect());
        for f in [Fabrication::SixtyLast, Fabrication::FiftyLast] {
            let fs = make_double_spend_block_with(0, f, 0).final_state;
            assert!(fs != ij && fs != ji);
        }
    }

    #[test]
    fn lockstep_reproduces_the_race() {
        let scts = double_spend_scts(0);
        let fs = lockstep(&double_spend_init(), scts[0], scts[1]);
        assert_eq!(fs, [(0, 40), (1, 150), (2, 160)].into_iter().collect());
        let fs = lockstep(&double_spend_init(), scts[1], scts[0]);
        assert_eq!(fs, [(0, 50), (1, 150), (2, 160)].into_iter().collect());
    }

    #[test]
    fn double_vote_block() {
        let attack = make_double_vote_block(0, 1).unwrap();
        assert_eq!(attack.dropped, (1, 2));
        assert_eq!(attack.block.graph().unwrap().num_edges(), 0);
        // Both votes counted, which no serial order allows.
        assert_eq!(attack.block.final_state.get(&0), Some(&1));
        assert_eq!(attack.block.final_state.get(&1), Some(&1));
    }

    #[test]
    fn dropping_the_only_edge_leaves_three_sources() {
        let init: State = (0..5).map(|k| (k, 100)).collect();
        let scts = vec![
            Sct::new(0, Call::CoinSend { sender: 0, receiver: 1, amount: 30 }),
            Sct::new(1, Call::CoinSend { sender: 0, receiver: 2, amount: 20 }),
            Sct::new(2, Call::CoinSend { sender: 3, receiver: 4, amount: 10 }),
        ];
        let honest = mine_serial(&scts, &init, 0);
        assert_eq!(honest.graph().unwrap().num_edges(), 1);
        let attack = make_emb_block(&honest, &init, &AttackSpec { kind: AttackKind::DropEdge, seed: 0 }).unwrap();
        let g = attack.block.graph().unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.vertices().filter(|v| v.indegree() == 0).count(), 3);
        assert_eq!(attack.block.final_state[&0], 80);
        assert_ne!(attack.block.final_state, honest.final_state);
    }

    #[test]
    fn serializable_interleavings_are_not_usable() {
        // The second send reads key 1 before the first one writes it, which is
        // equivalent to running the second send first.
        let init: State = (0..3).map(|k| (k, 100)).collect();
        let scts = vec![
            Sct::new(0, Call::CoinSend { sender: 0, receiver: 1, amount: 30 }),
            Sct::new(1, Call::CoinSend { sender: 1, receiver: 2, amount: 20 }),
        ];
        let honest = mine_serial(&scts, &init, 0);
        let spec = AttackSpec { kind: AttackKind::DropEdge, seed: 0 };
        assert_eq!(make_emb_block(&honest, &init, &spec).unwrap_err(), AttackError::NoRemovableEdge);
    }

    #[test]
    fn transitively_ordered_edge_is_not_dropped() {
        // 1 -> 2 -> 3 plus the shortcut 1 -> 3 (the three sends share key 1).
        let init: State = (0..4).map(|k| (k, 100)).collect();
        let scts = vec![
            Sct::new(0, Call::CoinSend { sender: 1, receiver: 0, amount: 10 }),
            Sct::new(1, Call::CoinSend { sender: 1, receiver: 2, amount: 10 }),
            Sct::new(2, Call::CoinSend { sender: 1, receiver: 3, amount: 10 }),
        ];
        let mut honest = mine_serial(&scts, &init, 0);
        let g = honest.graph().unwrap();
        g.add_edge(1, 3).unwrap();
        assert_eq!(g.edges(), vec![(1, 2), (1, 3), (2, 3)]);
        honest.bg = g.serialize();
        for seed in 0..8 {
            let attack = make_emb_block(&honest, &init, &AttackSpec { kind: AttackKind::DropEdge, seed }).unwrap();
            assert_ne!(attack.dropped, (1, 3));
        }
    }

    #[test]
    fn block_without_edges_cannot_be_attacked() {
        let init: State = (0..4).map(|k| (k, 100)).collect();
        let honest = mine_serial(&[Sct::new(0, Call::CoinSend { sender: 0, receiver: 1, amount: 1 })], &init, 0);
        let spec = AttackSpec { kind: AttackKind::DropEdge, seed: 0 };
        assert_eq!(make_emb_block(&honest, &init, &spec).unwrap_err(), AttackError::NoRemovableEdge);
    }
}
