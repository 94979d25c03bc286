mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::thread;

use objsc::stm::{Mvostm, ObjectStm, OpResult, Svostm, TxnHandle};
use objsc::{BlockGraph, Key, State, Ts, Value, GENESIS_TS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
enum Op {
    Lookup(Key),
    Insert(Key, Value),
    Delete(Key),
}

impl Op {
    fn key(self) -> Key {
        match self {
            Op::Lookup(k) | Op::Insert(k, _) | Op::Delete(k) => k,
        }
    }

    fn writes(self) -> bool {
        !matches!(self, Op::Lookup(_))
    }
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..4u32).prop_map(Op::Lookup),
        2 => (0..4u32, 1..100i64).prop_map(|(k, v)| Op::Insert(k, v)),
        1 => (0..4u32).prop_map(Op::Delete),
    ]
}

fn script() -> impl Strategy<Value = (Vec<Vec<Op>>, Vec<usize>)> {
    prop::collection::vec(prop::collection::vec(op(), 1..5), 2..6)
        .prop_flat_map(|txns| {
            let steps: usize = txns.iter().map(|t| t.len() + 2).sum();
            (Just(txns), prop::collection::vec(any::<usize>(), steps))
        })
}

struct Committed {
    ts: Ts,
    ops: Vec<Op>,
    results: Vec<OpResult>,
    conflicts: Vec<Ts>,
}

enum Phase {
    Idle,
    Running(TxnHandle, usize, Vec<OpResult>),
    Done,
}

/// Runs the transactions on one thread, interleaving their steps as the
/// schedule dictates, and returns the committed ones in timestamp order.
fn run_script<S: ObjectStm>(stm: &S, txns: &[Vec<Op>], schedule: &[usize]) -> Vec<Committed> {
    let mut phases: Vec<Phase> = txns.iter().map(|_| Phase::Idle).collect();
    let mut committed = Vec::new();
    for &choice in schedule {
        let live: Vec<usize> = (0..txns.len()).filter(|&i| !matches!(phases[i], Phase::Done)).collect();
        let Some(&t) = live.get(choice % live.len().max(1)) else { break };
        phases[t] = match std::mem::replace(&mut phases[t], Phase::Done) {
            Phase::Idle => Phase::Running(stm.begin(), 0, Vec::new()),
            Phase::Running(mut h, pos, mut results) if pos < txns[t].len() => {
                let r = match txns[t][pos] {
                    Op::Lookup(k) => stm.lookup(&mut h, k),
                    Op::Insert(k, v) => stm.insert(&mut h, k, v),
                    Op::Delete(k) => stm.delete(&mut h, k),
                };
                results.push(r);
                if r == OpResult::Abort {
                    Phase::Done
                } else {
                    Phase::Running(h, pos + 1, results)
                }
            }
            Phase::Running(mut h, _, results) => {
                if let Ok(conf) = stm.try_commit(&mut h) {
                    committed.push(Committed { ts: h.ts(), ops: txns[t].clone(), results, conflicts: conf.to_vec() });
                }
                Phase::Done
            }
            Phase::Done => unreachable!("only live transactions are scheduled"),
        };
    }
    committed.sort_by_key(|c| c.ts);
    committed
}

fn init() -> State {
    [(0, 10), (1, 20)].into_iter().collect()
}

/// Committed transactions must behave exactly as if they ran one after another
/// in timestamp order, and the conflict lists must order every conflicting
/// pair.
fn check_committed<S: ObjectStm>(stm: &S, committed: &[Committed]) -> Result<(), TestCaseError> {
    let mut model = init();
    for c in committed {
        for (op, &got) in c.ops.iter().zip(&c.results) {
            let expected = match *op {
                Op::Lookup(k) => model.get(&k).copied().map_or(OpResult::NotFound, OpResult::Ok),
                Op::Insert(k, v) => {
                    model.insert(k, v);
                    OpResult::Ok(v)
                }
                Op::Delete(k) => model.remove(&k).map_or(OpResult::NotFound, OpResult::Ok),
            };
            prop_assert_eq!(got, expected, "T{} {:?}", c.ts, op);
        }
    }
    prop_assert_eq!(stm.snapshot(), model);

    let g = BlockGraph::new();
    let ts_set: BTreeSet<Ts> = committed.iter().map(|c| c.ts).collect();
    for c in committed {
        prop_assert_eq!(stm.conf_list(c.ts).unwrap().to_vec(), c.conflicts.clone());
        let conf: Vec<Ts> = c.conflicts.iter().copied().filter(|&t| t != GENESIS_TS).collect();
        prop_assert!(conf.iter().all(|t| ts_set.contains(t)), "conflict with uncommitted transaction");
        g.build_bg(c.ts, &conf);
    }
    prop_assert!(g.topo_order().is_ok());
    let edges = g.edges();
    for (i, a) in committed.iter().enumerate() {
        for b in &committed[i + 1..] {
            let conflicting = a.ops.iter().any(|x| b.ops.iter().any(|y| x.key() == y.key() && (x.writes() || y.writes())));
            if conflicting {
                prop_assert!(common::reaches(&edges, a.ts, b.ts), "T{} and T{} conflict but are unordered", a.ts, b.ts);
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn single_version_histories_are_serial_in_ts_order((txns, schedule) in script()) {
        let stm = Svostm::with_history(3);
        stm.load(&init());
        let committed = run_script(&stm, &txns, &schedule);
        check_committed(&stm, &committed)?;
        prop_assert!(stm.history().unwrap().check_well_formed().is_ok());
    }

    #[test]
    fn multi_version_histories_are_serial_in_ts_order((txns, schedule) in script()) {
        let stm = Mvostm::with_history(3);
        stm.load(&init());
        let committed = run_script(&stm, &txns, &schedule);
        check_committed(&stm, &committed)?;
        prop_assert!(stm.history().unwrap().check_well_formed().is_ok());
    }

    #[test]
    fn multi_version_operations_never_abort((txns, schedule) in script()) {
        let stm = Mvostm::new(3);
        stm.load(&init());
        for c in run_script(&stm, &txns, &schedule) {
            prop_assert!(c.results.iter().all(|&r| r != OpResult::Abort));
        }
    }

    #[test]
    fn read_only_transactions_always_commit((txns, schedule) in script()) {
        let ro: Vec<Vec<Op>> = txns.iter().map(|t| t.iter().map(|o| Op::Lookup(o.key())).collect()).collect();
        for committed in [run_script(&Svostm::new(2), &ro, &schedule), run_script(&Mvostm::new(2), &ro, &schedule)] {
            prop_assert_eq!(committed.len(), ro.len());
            prop_assert!(committed.iter().all(|c| c.conflicts.iter().all(|&t| t == GENESIS_TS)));
        }
    }
}

/// Concurrent transfers on real threads; committed transfers replayed in
/// timestamp order must reproduce the final state.
fn bank_stress<S: ObjectStm>(stm: &S) {
    const ACCOUNTS: Key = 6;
    let init: State = (0..ACCOUNTS).map(|k| (k, 1000)).collect();
    stm.load(&init);
    let log: Mutex<Vec<(Ts, Key, Key, Value)>> = Mutex::new(Vec::new());
    thread::scope(|s| {
        for seed in 0..8u64 {
            let log = &log;
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..150 {
                    let from = rng.random_range(0..ACCOUNTS);
                    let to = (from + rng.random_range(1..ACCOUNTS)) % ACCOUNTS;
                    let amount = rng.random_range(1..50);
                    loop {
                        let mut h = stm.begin();
                        let (OpResult::Ok(a), OpResult::Ok(b)) = (stm.lookup(&mut h, from), stm.lookup(&mut h, to)) else {
                            continue;
                        };
                        stm.insert(&mut h, from, a - amount);
                        stm.insert(&mut h, to, b + amount);
                        if stm.try_commit(&mut h).is_ok() {
                            log.lock().unwrap().push((h.ts(), from, to, amount));
                            break;
                        }
                    }
                }
            });
        }
    });
    let mut log = log.into_inner().unwrap();
    assert_eq!(log.len(), 1200);
    log.sort();
    let mut model: BTreeMap<Key, Value> = init;
    for (_, from, to, amount) in log {
        *model.get_mut(&from).unwrap() -= amount;
        *model.get_mut(&to).unwrap() += amount;
    }
    let fs = stm.snapshot();
    assert_eq!(fs, model);
    assert_eq!(fs.values().sum::<Value>(), 6000);
}

#[test]
fn single_version_concurrent_transfers() {
    bank_stress(&Svostm::new(4));
}

#[test]
fn multi_version_concurrent_transfers() {
    bank_stress(&Mvostm::new(4));
}

#[test]
fn stale_reader_scenario() {
    // T1 reads A1; T2 moves $5 from A1 to A2 and commits; T1 reads A2.
    let init: State = [(1, 10), (2, 10)].into_iter().collect();
    let run = |stm: &dyn ObjectStm| {
        stm.load(&init);
        let mut t1 = stm.begin();
        let mut t2 = stm.begin();
        assert_eq!(stm.lookup(&mut t1, 1), OpResult::Ok(10));
        let a1 = stm.lookup(&mut t2, 1);
        let a2 = stm.lookup(&mut t2, 2);
        let (OpResult::Ok(a1), OpResult::Ok(a2)) = (a1, a2) else { panic!("T2 lookups") };
        stm.insert(&mut t2, 1, a1 - 5);
        stm.insert(&mut t2, 2, a2 + 5);
        stm.try_commit(&mut t2).unwrap();
        let read = stm.lookup(&mut t1, 2);
        let committed = read != OpResult::Abort && stm.try_commit(&mut t1).is_ok();
        (read, committed, stm.snapshot())
    };
    let (read, committed, _) = run(&Svostm::new(2));
    assert_eq!(read, OpResult::Abort);
    assert!(!committed);
    let (read, committed, fs) = run(&Mvostm::new(2));
    assert_eq!(read, OpResult::Ok(10));
    assert!(committed);
    assert_eq!(fs, [(1, 5), (2, 15)].into_iter().collect());
}
