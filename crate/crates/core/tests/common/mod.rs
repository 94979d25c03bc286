#![allow(dead_code)]

use std::collections::BTreeSet;

use objsc::sct::execute_serially;
use objsc::{Block, Sct, State};

/// Structural checks every miner-built graph must pass.
pub fn check_bg(block: &Block) -> Result<(), String> {
    let g = block.graph().map_err(|e| e.to_string())?;
    if let Some((a, b)) = g.edges().into_iter().find(|(a, b)| a >= b) {
        return Err(format!("edge {a}->{b} is not low-to-high"));
    }
    g.topo_order().map_err(|e| e.to_string())?;
    let funs: BTreeSet<u32> = g.vertices().filter_map(|v| v.sc_fun()).collect();
    let expected: BTreeSet<u32> = (0..block.scts.len() as u32).collect();
    if g.num_vertices() != block.scts.len() || funs != expected {
        return Err(format!("vertex set {funs:?} does not match {} SCTs", block.scts.len()));
    }
    Ok(())
}

/// SCTs of `block` in the graph's topological order.
pub fn topo_scts(block: &Block) -> Vec<Sct> {
    let g = block.graph().unwrap();
    g.topo_order()
        .unwrap()
        .into_iter()
        .map(|ts| block.scts[g.vertex(ts).unwrap().sc_fun().unwrap() as usize])
        .collect()
}

pub fn topo_replay(block: &Block, init: &State) -> State {
    let mut state = init.clone();
    execute_serially(&topo_scts(block), &mut state);
    state
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            prefix.push(x);
            go(prefix, rest, out);
            prefix.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

/// Final states of every serial order of `scts`.
pub fn serial_outcomes(scts: &[Sct], init: &State) -> Vec<State> {
    permutations(scts.len())
        .into_iter()
        .map(|p| {
            let mut state = init.clone();
            let ordered: Vec<Sct> = p.iter().map(|&i| scts[i]).collect();
            execute_serially(&ordered, &mut state);
            state
        })
        .collect()
}

/// Whether `from` reaches `to` in `edges`.
pub fn reaches(edges: &[(u64, u64)], from: u64, to: u64) -> bool {
    let mut stack = vec![from];
    let mut seen = BTreeSet::new();
    while let Some(x) = stack.pop() {
        if x == to {
            return true;
        }
        if seen.insert(x) {
            stack.extend(edges.iter().filter(|(a, _)| *a == x).map(|&(_, b)| b));
        }
    }
    false
}
