//! Binary encoding of a quiescent block graph.
//!
//! Little-endian: magic, version byte, vertex count, then per vertex
//! `ts, scFun, outDegree, targets[outDegree]`, all `u32`. Indegrees are not
//! stored; they are recomputed from the edges on load.

use super::{BlockGraph, GraphError, UNSET_FUN};
use crate::Ts;

pub const MAGIC: [u8; 4] = *b"OSBG";
pub const WIRE_VERSION: u8 = 1;

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], GraphError> {
        if self.buf.len() < n {
            return Err(GraphError::Malformed("truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, GraphError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, GraphError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, GraphError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn i64(&mut self) -> Result<i64, GraphError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

fn ts32(ts: Ts) -> u32 {
    u32::try_from(ts).expect("block timestamps fit in 32 bits")
}

impl BlockGraph {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 12 * self.num_vertices() + 4 * self.num_edges());
        out.extend_from_slice(&MAGIC);
        out.push(WIRE_VERSION);
        out.extend_from_slice(&(self.num_vertices() as u32).to_le_bytes());
        for v in self.vertices() {
            out.extend_from_slice(&ts32(v.ts).to_le_bytes());
            out.extend_from_slice(&v.sc_fun.load(std::sync::atomic::Ordering::Acquire).to_le_bytes());
            out.extend_from_slice(&(v.out_degree() as u32).to_le_bytes());
            for t in v.successors() {
                out.extend_from_slice(&ts32(t).to_le_bytes());
            }
        }
        out
    }

    /// Decodes a graph. Edge orientation is not checked here: a tampered
    /// graph may contain cycles, which [`BlockGraph::topo_order`] reports.
    pub fn deserialize(bytes: &[u8]) -> Result<BlockGraph, GraphError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(GraphError::Malformed("bad magic"));
        }
        if r.u8()? != WIRE_VERSION {
            return Err(GraphError::Malformed("unsupported version"));
        }
        let n = r.u32()?;
        let g = BlockGraph::new();
        let mut adjacency = Vec::new();
        let mut last: Option<Ts> = None;
        for _ in 0..n {
            let ts = Ts::from(r.u32()?);
            if last.is_some_and(|l| l >= ts) {
                return Err(GraphError::Malformed("vertices not strictly ascending"));
            }
            last = Some(ts);
            let fun = r.u32()?;
            g.add_vertex(ts, (fun != UNSET_FUN).then_some(fun));
            let deg = r.u32()?;
            let mut targets = Vec::new();
            for _ in 0..deg {
                targets.push(Ts::from(r.u32()?));
            }
            adjacency.push((ts, targets));
        }
        if !r.is_empty() {
            return Err(GraphError::Malformed("trailing bytes"));
        }
        for (from, targets) in adjacency {
            for to in targets {
                if g.vertex(to).is_none() {
                    return Err(GraphError::Malformed("edge to unknown vertex"));
                }
                if g.link(from, to)? == super::AddEdge::AlreadyPresent {
                    return Err(GraphError::Malformed("duplicate edge"));
                }
            }
        }
        Ok(g)
    }
}
