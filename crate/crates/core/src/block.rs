//! Blocks: SCTs, the serialized block graph, the miner's final state and the
//! previous-block hash.

use thiserror::Error;

use crate::graph::wire::Reader;
use crate::graph::{BlockGraph, GraphError};
use crate::miner::Protocol;
use crate::sct::{Call, Sct};
use crate::State;

pub const BLOCK_MAGIC: [u8; 4] = *b"OSBK";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("unknown contract call {fun} with {args} arguments")]
    UnknownCall { fun: u32, args: usize },
    #[error("unknown protocol tag {0}")]
    UnknownProtocol(u8),
}

/// Miner bookkeeping carried alongside a block. Only the protocol is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMeta {
    pub protocol: Protocol,
    pub threads: usize,
    pub aborts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub scts: Vec<Sct>,
    /// Block graph in its wire format.
    pub bg: Vec<u8>,
    pub final_state: State,
    pub prev_hash: u64,
    pub meta: BlockMeta,
}

impl Block {
    pub fn graph(&self) -> Result<BlockGraph, GraphError> {
        BlockGraph::deserialize(&self.bg)
    }

    pub fn hash(&self) -> u64 {
        block_hash(self)
    }

    /// Header, SCT section, length-prefixed graph section, sorted final state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&BLOCK_MAGIC);
        out.push(self.meta.protocol.tag());
        put_u32(&mut out, self.scts.len() as u32);
        out.extend_from_slice(&self.prev_hash.to_le_bytes());
        for sct in &self.scts {
            put_u32(&mut out, sct.id);
            put_u32(&mut out, sct.call.sc_fun_id());
            let args = sct.call.args();
            put_u32(&mut out, args.len() as u32);
            for a in args {
                out.extend_from_slice(&a.to_le_bytes());
            }
            put_u32(&mut out, sct.work);
        }
        put_u32(&mut out, self.bg.len() as u32);
        out.extend_from_slice(&self.bg);
        put_u32(&mut out, self.final_state.len() as u32);
        for (&k, &v) in &self.final_state {
            put_u32(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Block, BlockError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != BLOCK_MAGIC {
            return Err(GraphError::Malformed("bad block magic").into());
        }
        let tag = r.u8()?;
        let protocol = Protocol::from_tag(tag).ok_or(BlockError::UnknownProtocol(tag))?;
        let n = r.u32()?;
        let prev_hash = r.u64()?;
        let mut scts = Vec::new();
        for _ in 0..n {
            let id = r.u32()?;
            let fun = r.u32()?;
            let nargs = r.u32()? as usize;
            let mut args = Vec::new();
            for _ in 0..nargs {
                args.push(r.i64()?);
            }
            let work = r.u32()?;
            let call = Call::from_parts(fun, &args).ok_or(BlockError::UnknownCall { fun, args: nargs })?;
            scts.push(Sct { id, call, work });
        }
        let bg_len = r.u32()? as usize;
        let bg = r.take(bg_len)?.to_vec();
        let entries = r.u32()?;
        let mut final_state = State::new();
        let mut last = None;
        for _ in 0..entries {
            let k = r.u32()?;
            if last.is_some_and(|l| l >= k) {
                return Err(GraphError::Malformed("final state not sorted").into());
            }
            last = Some(k);
            final_state.insert(k, r.i64()?);
        }
        if !r.is_empty() {
            return Err(GraphError::Malformed("trailing bytes after block").into());
        }
        Ok(Block { scts, bg, final_state, prev_hash, meta: BlockMeta { protocol, threads: 0, aborts: 0 } })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// FNV-1a digest of the canonical block encoding.
pub fn block_hash(block: &Block) -> u64 {
    fnv1a(&block.to_bytes())
}
