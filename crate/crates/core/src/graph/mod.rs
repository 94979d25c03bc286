//! Lock-free block graph.
//!
//! Vertices are committed transactions, sorted by timestamp; each vertex owns a
//! sorted list of outgoing edges. Edges always point from the lower timestamp
//! to the higher one, so a graph built by the miner is acyclic. Validators
//! claim source vertices by swapping their indegree from 0 to −1 and release
//! successors by decrementing indegrees along outgoing edges.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicI64, AtomicU32, AtomicUsize, Ordering};

use thiserror::Error;

use crate::lockfree::SortedList;
use crate::Ts;

pub(crate) mod wire;

pub use wire::{MAGIC, WIRE_VERSION};

/// Indegree value of a vertex claimed for execution.
pub const CLAIMED: i64 = -1;

/// Bytes per vertex node in the size model.
pub const VERTEX_BYTES: u64 = 28;
/// Bytes per edge node in the size model.
pub const EDGE_BYTES: u64 = 20;
/// Bytes per SCT in the block size model.
pub const SCT_BYTES: u64 = 200;

const UNSET_FUN: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("vertex T{0} does not exist")]
    MissingVertex(Ts),
    #[error("edge T{from}->T{to} does not go from a lower to a higher timestamp")]
    Misoriented { from: Ts, to: Ts },
    #[error("graph contains a cycle")]
    Cycle,
    #[error("malformed graph encoding: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddVertex {
    Added,
    AlreadyExists,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddEdge {
    Added,
    AlreadyPresent,
}

/// `⟨ts, vrtRef, egNext⟩`; the link lives in the owning list.
pub struct EdgeNode {
    target: *const VertexNode,
}

// SAFETY: `target` points into the vertex list of the same graph, whose nodes
// are never freed or moved while the graph is alive.
unsafe impl Send for EdgeNode {}
unsafe impl Sync for EdgeNode {}

/// `⟨ts, scFun, indegree, egNext, vrtNext⟩`.
pub struct VertexNode {
    ts: Ts,
    sc_fun: AtomicU32,
    indegree: AtomicI64,
    edges: SortedList<Ts, EdgeNode>,
}

impl VertexNode {
    fn new(ts: Ts, sc_fun: Option<u32>) -> Self {
        Self {
            ts,
            sc_fun: AtomicU32::new(sc_fun.unwrap_or(UNSET_FUN)),
            indegree: AtomicI64::new(0),
            edges: SortedList::new(),
        }
    }

    pub fn ts(&self) -> Ts {
        self.ts
    }

    /// Index of the SCT this vertex executes. `None` while the vertex exists
    /// only as the endpoint of a conflict edge.
    pub fn sc_fun(&self) -> Option<u32> {
        match self.sc_fun.load(Ordering::Acquire) {
            UNSET_FUN => None,
            f => Some(f),
        }
    }

    pub fn indegree(&self) -> i64 {
        self.indegree.load(Ordering::Acquire)
    }

    pub fn out_degree(&self) -> usize {
        self.edges.len()
    }

    /// Targets of outgoing edges, ascending.
    pub fn successors(&self) -> impl Iterator<Item = Ts> + '_ {
        self.edges.iter().map(|(ts, _)| ts)
    }

    fn try_claim(&self) -> bool {
        self.indegree.compare_exchange(0, CLAIMED, Ordering::AcqRel, Ordering::Acquire).is_ok()
    }
}

/// Block graph shared by concurrent builders or concurrent validators.
#[derive(Default)]
pub struct BlockGraph {
    vertices: SortedList<Ts, VertexNode>,
    num_edges: AtomicUsize,
}

impl BlockGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex(&self, ts: Ts) -> Option<&VertexNode> {
        self.vertices.get(ts)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &VertexNode> {
        self.vertices.iter().map(|(_, v)| v)
    }

    /// All edges as `(from, to)` pairs, sorted.
    pub fn edges(&self) -> Vec<(Ts, Ts)> {
        self.vertices().flat_map(|v| v.successors().map(move |t| (v.ts, t))).collect()
    }

    /// Inserts vertex `ts`. `sc_fun` is recorded if this is the first call
    /// that provides one, even when the vertex already existed as an edge
    /// endpoint.
    pub fn add_vertex(&self, ts: Ts, sc_fun: Option<u32>) -> AddVertex {
        let (v, inserted) = self.vertices.get_or_insert_with(ts, || VertexNode::new(ts, sc_fun));
        if !inserted {
            if let Some(f) = sc_fun {
                let _ = v.sc_fun.compare_exchange(UNSET_FUN, f, Ordering::AcqRel, Ordering::Acquire);
            }
        }
        if inserted {
            AddVertex::Added
        } else {
            AddVertex::AlreadyExists
        }
    }

    /// Adds `from → to`, incrementing the indegree of `to` on first insertion.
    pub fn add_edge(&self, from: Ts, to: Ts) -> Result<AddEdge, GraphError> {
        if from >= to {
            return Err(GraphError::Misoriented { from, to });
        }
        self.link(from, to)
    }

    fn link(&self, from: Ts, to: Ts) -> Result<AddEdge, GraphError> {
        let src = self.vertices.get(from).ok_or(GraphError::MissingVertex(from))?;
        let dst = self.vertices.get(to).ok_or(GraphError::MissingVertex(to))?;
        let (_, inserted) = src.edges.get_or_insert_with(to, || EdgeNode { target: dst });
        if !inserted {
            return Ok(AddEdge::AlreadyPresent);
        }
        dst.indegree.fetch_add(1, Ordering::AcqRel);
        self.num_edges.fetch_add(1, Ordering::AcqRel);
        Ok(AddEdge::Added)
    }

    /// Records the conflicts of the committed transaction `ts`.
    pub fn build_bg(&self, ts: Ts, conflicts: &[Ts]) {
        self.add_vertex(ts, None);
        for &other in conflicts {
            if other == ts {
                continue;
            }
            self.add_vertex(other, None);
            self.add_edge(ts.min(other), ts.max(other)).expect("both endpoints were just ensured");
        }
    }

    /// Claims the first source vertex in timestamp order.
    pub fn global_search(&self) -> Option<&VertexNode> {
        self.global_search_from(0)
    }

    /// Claims a source vertex, scanning circularly from position `start`.
    pub fn global_search_from(&self, start: usize) -> Option<&VertexNode> {
        let n = self.vertices.len();
        if n == 0 {
            return None;
        }
        let start = start % n;
        let tail = self.vertices().skip(start);
        let head = self.vertices().take(start);
        tail.chain(head).find(|v| v.try_claim())
    }

    /// Claims a vertex released by this thread, dropping entries that another
    /// thread claimed first.
    pub fn local_search<'g>(&'g self, log: &mut Vec<&'g VertexNode>) -> Option<&'g VertexNode> {
        while let Some(v) = log.pop() {
            if v.try_claim() {
                return Some(v);
            }
        }
        None
    }

    /// Releases the successors of an executed vertex. Targets whose last
    /// incoming edge this call removed are appended to `log`.
    pub fn rem_exec_node<'g>(&'g self, v: &'g VertexNode, log: &mut Vec<&'g VertexNode>) {
        for (_, e) in v.edges.iter() {
            // SAFETY: see `EdgeNode`.
            let target = unsafe { &*e.target };
            if target.indegree.fetch_sub(1, Ordering::AcqRel) == 1 {
                log.push(target);
            }
        }
    }

    /// Topological order with ties broken by ascending timestamp.
    pub fn topo_order(&self) -> Result<Vec<Ts>, GraphError> {
        let mut indeg: BTreeMap<Ts, usize> = self.vertices().map(|v| (v.ts, 0)).collect();
        for (_, to) in self.edges() {
            *indeg.get_mut(&to).expect("edge targets are vertices") += 1;
        }
        let mut ready: BinaryHeap<Reverse<Ts>> =
            indeg.iter().filter(|(_, &d)| d == 0).map(|(&t, _)| Reverse(t)).collect();
        let mut order = Vec::with_capacity(indeg.len());
        while let Some(Reverse(ts)) = ready.pop() {
            order.push(ts);
            for next in self.vertices.get(ts).expect("vertex").successors() {
                let d = indeg.get_mut(&next).expect("edge targets are vertices");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(next));
                }
            }
        }
        if order.len() == indeg.len() {
            Ok(order)
        } else {
            Err(GraphError::Cycle)
        }
    }

    /// One `u->v` line per edge.
    pub fn dump_edges(&self) -> String {
        let mut out = String::new();
        for (u, v) in self.edges() {
            let _ = writeln!(out, "{u}->{v}");
        }
        out
    }

    pub fn size_stats(&self, num_scts: usize) -> SizeStats {
        SizeStats::new(num_scts as u64, self.num_edges() as u64)
    }
}

impl std::fmt::Debug for BlockGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockGraph")
            .field("vertices", &self.vertices().map(|v| v.ts).collect::<Vec<_>>())
            .field("edges", &self.edges())
            .finish()
    }
}

/// Block size `B`, graph size `β` and the overhead `β` as a percentage of `B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeStats {
    pub num_scts: u64,
    pub num_edges: u64,
    pub block_bytes: u64,
    pub bg_bytes: u64,
    pub bg_pct: f64,
}

impl SizeStats {
    pub fn new(num_scts: u64, num_edges: u64) -> Self {
        let block_bytes = SCT_BYTES * num_scts;
        let bg_bytes = if num_scts == 0 { 0 } else { VERTEX_BYTES * num_scts + EDGE_BYTES * num_edges };
        let bg_pct = if block_bytes == 0 { 0.0 } else { 100.0 * bg_bytes as f64 / block_bytes as f64 };
        Self { num_scts, num_edges, block_bytes, bg_bytes, bg_pct }
    }
}
