//! Smart-contract transactions and the benchmark contracts.
//!
//! Contract code is written once against [`Executor`], so the same function
//! runs transactionally inside the miner, directly on shared memory inside the
//! validators, and under counter instrumentation inside the smart validator.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Key, State, Value};

/// One primitive step of an SCT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOp {
    Lookup(Key),
    Insert(Key, Value),
    Delete(Key),
    /// Transaction-local work; never touches shared state.
    Compute(u32),
}

impl StepOp {
    pub fn key(&self) -> Option<Key> {
        match *self {
            StepOp::Lookup(k) | StepOp::Insert(k, _) | StepOp::Delete(k) => Some(k),
            StepOp::Compute(_) => None,
        }
    }

    pub fn is_update(&self) -> bool {
        matches!(self, StepOp::Insert(..) | StepOp::Delete(_))
    }
}

/// Why a step program stopped before finishing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halt {
    /// The STM aborted the transaction; the caller restarts it.
    Abort,
    /// A counter check of the smart validator failed on `key`.
    Malicious { key: Key },
    /// Another worker stopped the run.
    Cancelled,
}

/// Result of a completed contract call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// Committed with no return value.
    Done,
    /// Committed and returned a value.
    Value(Value),
    /// Business-rule failure (insufficient balance, double vote, low bid).
    /// The transaction still commits; its updates are the identity.
    Fail,
}

impl Outcome {
    pub fn is_fail(&self) -> bool {
        matches!(self, Outcome::Fail)
    }
}

/// Shared-memory access used by contract code.
pub trait Executor {
    fn lookup(&mut self, key: Key) -> Result<Option<Value>, Halt>;
    fn insert(&mut self, key: Key, value: Value) -> Result<(), Halt>;
    fn delete(&mut self, key: Key) -> Result<Option<Value>, Halt>;

    fn compute(&mut self, work: u32) -> Result<(), Halt> {
        burn(work);
        Ok(())
    }
}

/// Deterministic CPU work standing in for contract computation.
pub fn burn(work: u32) -> u64 {
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    for i in 0..work {
        x = (x ^ u64::from(i)).rotate_left(17).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    std::hint::black_box(x)
}

/// Executes directly on an owned state map. Used by the serial miner, the
/// serial validator and test oracles.
pub struct MapExecutor<'a> {
    state: &'a mut State,
}

impl<'a> MapExecutor<'a> {
    pub fn new(state: &'a mut State) -> Self {
        Self { state }
    }
}

impl Executor for MapExecutor<'_> {
    fn lookup(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        Ok(self.state.get(&key).copied())
    }

    fn insert(&mut self, key: Key, value: Value) -> Result<(), Halt> {
        self.state.insert(key, value);
        Ok(())
    }

    fn delete(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        Ok(self.state.remove(&key))
    }
}

/// Wraps another executor and records every step it performs.
pub struct RecordingExecutor<E> {
    inner: E,
    pub steps: Vec<StepOp>,
}

impl<E: Executor> RecordingExecutor<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, steps: Vec::new() }
    }

    pub fn into_inner(self) -> (E, Vec<StepOp>) {
        (self.inner, self.steps)
    }
}

impl<E: Executor> Executor for RecordingExecutor<E> {
    fn lookup(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        self.steps.push(StepOp::Lookup(key));
        self.inner.lookup(key)
    }

    fn insert(&mut self, key: Key, value: Value) -> Result<(), Halt> {
        self.steps.push(StepOp::Insert(key, value));
        self.inner.insert(key, value)
    }

    fn delete(&mut self, key: Key) -> Result<Option<Value>, Halt> {
        self.steps.push(StepOp::Delete(key));
        self.inner.delete(key)
    }

    fn compute(&mut self, work: u32) -> Result<(), Halt> {
        self.steps.push(StepOp::Compute(work));
        self.inner.compute(work)
    }
}

/// Marker stored in an auction's max-bidder slot before the first bid.
pub const NO_BIDDER: Value = -1;

/// Key layout of one auction instance.
///
/// `base` holds the highest bid, `base + 1` the highest bidder, `base + 2` the
/// ended flag; bidder refund slots follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Auction {
    pub base: Key,
}

impl Auction {
    pub const CONTROL_KEYS: u32 = 3;

    pub fn max_bid(&self) -> Key {
        self.base
    }

    pub fn max_bidder(&self) -> Key {
        self.base + 1
    }

    pub fn ended(&self) -> Key {
        self.base + 2
    }
}

/// A contract function invocation with its arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Call {
    CoinSend { sender: Key, receiver: Key, amount: Value },
    CoinGetBalance { account: Key },
    BallotVote { voter: Key, proposal: Key },
    BallotDelegate { from: Key, to: Key },
    AuctionBid { auction: Auction, bidder: Key, amount: Value },
    AuctionWithdraw { auction: Auction, bidder: Key },
    AuctionEnd { auction: Auction },
}

/// Wire and graph identifiers of the contract functions.
pub mod fun {
    pub const COIN_SEND: u32 = 1;
    pub const COIN_GET_BALANCE: u32 = 2;
    pub const BALLOT_VOTE: u32 = 3;
    pub const BALLOT_DELEGATE: u32 = 4;
    pub const AUCTION_BID: u32 = 5;
    pub const AUCTION_WITHDRAW: u32 = 6;
    pub const AUCTION_END: u32 = 7;
}

impl Call {
    pub fn sc_fun_id(&self) -> u32 {
        match self {
            Call::CoinSend { .. } => fun::COIN_SEND,
            Call::CoinGetBalance { .. } => fun::COIN_GET_BALANCE,
            Call::BallotVote { .. } => fun::BALLOT_VOTE,
            Call::BallotDelegate { .. } => fun::BALLOT_DELEGATE,
            Call::AuctionBid { .. } => fun::AUCTION_BID,
            Call::AuctionWithdraw { .. } => fun::AUCTION_WITHDRAW,
            Call::AuctionEnd { .. } => fun::AUCTION_END,
        }
    }

    pub fn args(&self) -> Vec<i64> {
        match *self {
            Call::CoinSend { sender, receiver, amount } => {
                vec![sender.into(), receiver.into(), amount]
            }
            Call::CoinGetBalance { account } => vec![account.into()],
            Call::BallotVote { voter, proposal } => vec![voter.into(), proposal.into()],
            Call::BallotDelegate { from, to } => vec![from.into(), to.into()],
            Call::AuctionBid { auction, bidder, amount } => {
                vec![auction.base.into(), bidder.into(), amount]
            }
            Call::AuctionWithdraw { auction, bidder } => vec![auction.base.into(), bidder.into()],
            Call::AuctionEnd { auction } => vec![auction.base.into()],
        }
    }

    /// Rebuilds a call from its function id and argument list.
    pub fn from_parts(fun_id: u32, args: &[i64]) -> Option<Call> {
        let key = |i: usize| args.get(i).and_then(|&a| Key::try_from(a).ok());
        let call = match (fun_id, args.len()) {
            (fun::COIN_SEND, 3) => Call::CoinSend {
                sender: key(0)?,
                receiver: key(1)?,
                amount: args[2],
            },
            (fun::COIN_GET_BALANCE, 1) => Call::CoinGetBalance { account: key(0)? },
            (fun::BALLOT_VOTE, 2) => Call::BallotVote { voter: key(0)?, proposal: key(1)? },
            (fun::BALLOT_DELEGATE, 2) => Call::BallotDelegate { from: key(0)?, to: key(1)? },
            (fun::AUCTION_BID, 3) => Call::AuctionBid {
                auction: Auction { base: key(0)? },
                bidder: key(1)?,
                amount: args[2],
            },
            (fun::AUCTION_WITHDRAW, 2) => Call::AuctionWithdraw {
                auction: Auction { base: key(0)? },
                bidder: key(1)?,
            },
            (fun::AUCTION_END, 1) => Call::AuctionEnd { auction: Auction { base: key(0)? } },
            _ => return None,
        };
        Some(call)
    }

    /// Largest key this call can touch.
    pub fn max_key(&self) -> Key {
        match *self {
            Call::CoinSend { sender, receiver, .. } => sender.max(receiver),
            Call::CoinGetBalance { account } => account,
            Call::BallotVote { voter, proposal } => voter.max(proposal),
            Call::BallotDelegate { from, to } => from.max(to),
            Call::AuctionBid { auction, bidder, .. } | Call::AuctionWithdraw { auction, bidder } => {
                auction.ended().max(bidder)
            }
            Call::AuctionEnd { auction } => auction.ended(),
        }
    }
}

impl fmt::Display for Call {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Call::CoinSend { sender, receiver, amount } => {
                write!(f, "send({sender}->{receiver}, {amount})")
            }
            Call::CoinGetBalance { account } => write!(f, "get_balance({account})"),
            Call::BallotVote { voter, proposal } => write!(f, "vote({voter}, {proposal})"),
            Call::BallotDelegate { from, to } => write!(f, "delegate({from}->{to})"),
            Call::AuctionBid { bidder, amount, .. } => write!(f, "bid({bidder}, {amount})"),
            Call::AuctionWithdraw { bidder, .. } => write!(f, "withdraw({bidder})"),
            Call::AuctionEnd { .. } => write!(f, "auction_end()"),
        }
    }
}

/// A smart-contract transaction as it appears in a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sct {
    pub id: u32,
    pub call: Call,
    /// Units of transaction-local computation performed between the first
    /// lookup and the first update.
    pub work: u32,
}

impl Sct {
    pub fn new(id: u32, call: Call) -> Self {
        Self { id, call, work: 0 }
    }

    pub fn with_work(mut self, work: u32) -> Self {
        self.work = work;
        self
    }

    pub fn execute<E: Executor + ?Sized>(&self, ex: &mut E) -> Result<Outcome, Halt> {
        match self.call {
            Call::CoinSend { sender, receiver, amount } => {
                coin_send(ex, sender, receiver, amount, self.work)
            }
            Call::CoinGetBalance { account } => coin_get_balance(ex, account).map(Outcome::Value),
            Call::BallotVote { voter, proposal } => ballot_vote(ex, voter, proposal, self.work),
            Call::BallotDelegate { from, to } => ballot_delegate(ex, from, to, self.work),
            Call::AuctionBid { auction, bidder, amount } => {
                auction_bid(ex, auction, bidder, amount, self.work)
            }
            Call::AuctionWithdraw { bidder, .. } => auction_withdraw(ex, bidder).map(Outcome::Value),
            Call::AuctionEnd { auction } => auction_end(ex, auction),
        }
    }
}

/// Transfers `amount` from `sender` to `receiver`.
pub fn coin_send<E: Executor + ?Sized>(
    ex: &mut E,
    sender: Key,
    receiver: Key,
    amount: Value,
    work: u32,
) -> Result<Outcome, Halt> {
    if sender == receiver || amount < 0 {
        return Ok(Outcome::Fail);
    }
    let balance = ex.lookup(sender)?.unwrap_or(0);
    ex.compute(work)?;
    if balance < amount {
        return Ok(Outcome::Fail);
    }
    ex.insert(sender, balance - amount)?;
    let to = ex.lookup(receiver)?.unwrap_or(0);
    ex.insert(receiver, to + amount)?;
    Ok(Outcome::Done)
}

pub fn coin_get_balance<E: Executor + ?Sized>(ex: &mut E, account: Key) -> Result<Value, Halt> {
    Ok(ex.lookup(account)?.unwrap_or(0))
}

// Voter slots hold the remaining weight while the voter may still act, 0 once
// the weight was delegated, and -(proposal + 1) after a direct vote.

fn voted_marker(proposal: Key) -> Value {
    -Value::from(proposal) - 1
}

pub fn ballot_vote<E: Executor + ?Sized>(
    ex: &mut E,
    voter: Key,
    proposal: Key,
    work: u32,
) -> Result<Outcome, Halt> {
    let weight = match ex.lookup(voter)? {
        Some(w) if w > 0 => w,
        _ => return Ok(Outcome::Fail),
    };
    ex.compute(work)?;
    ex.insert(voter, voted_marker(proposal))?;
    let count = ex.lookup(proposal)?.unwrap_or(0);
    ex.insert(proposal, count + weight)?;
    Ok(Outcome::Done)
}

pub fn ballot_delegate<E: Executor + ?Sized>(
    ex: &mut E,
    from: Key,
    to: Key,
    work: u32,
) -> Result<Outcome, Halt> {
    if from == to {
        return Ok(Outcome::Fail);
    }
    let weight = match ex.lookup(from)? {
        Some(w) if w > 0 => w,
        _ => return Ok(Outcome::Fail),
    };
    ex.compute(work)?;
    match ex.lookup(to)? {
        Some(target) if target > 0 => {
            ex.insert(from, 0)?;
            ex.insert(to, target + weight)?;
        }
        Some(target) if target < 0 => {
            // Delegate already voted: the weight goes straight to that proposal.
            let proposal = Key::try_from(-(target + 1)).map_err(|_| Halt::Abort)?;
            ex.insert(from, 0)?;
            let count = ex.lookup(proposal)?.unwrap_or(0);
            ex.insert(proposal, count + weight)?;
        }
        _ => return Ok(Outcome::Fail),
    }
    Ok(Outcome::Done)
}

pub fn auction_bid<E: Executor + ?Sized>(
    ex: &mut E,
    auction: Auction,
    bidder: Key,
    amount: Value,
    work: u32,
) -> Result<Outcome, Halt> {
    if ex.lookup(auction.ended())?.unwrap_or(0) != 0 {
        return Ok(Outcome::Fail);
    }
    ex.compute(work)?;
    let max_bid = ex.lookup(auction.max_bid())?.unwrap_or(0);
    if amount <= max_bid {
        return Ok(Outcome::Fail);
    }
    let previous = ex.lookup(auction.max_bidder())?.unwrap_or(NO_BIDDER);
    if previous != NO_BIDDER {
        let refund_key = Key::try_from(previous).map_err(|_| Halt::Abort)?;
        let refund = ex.lookup(refund_key)?.unwrap_or(0);
        ex.insert(refund_key, refund + max_bid)?;
    }
    ex.insert(auction.max_bid(), amount)?;
    ex.insert(auction.max_bidder(), Value::from(bidder))?;
    Ok(Outcome::Done)
}

/// Pays out and clears the bidder's refundable amount.
pub fn auction_withdraw<E: Executor + ?Sized>(ex: &mut E, bidder: Key) -> Result<Value, Halt> {
    let refund = ex.lookup(bidder)?.unwrap_or(0);
    if refund > 0 {
        ex.insert(bidder, 0)?;
    }
    Ok(refund)
}

pub fn auction_end<E: Executor + ?Sized>(ex: &mut E, auction: Auction) -> Result<Outcome, Halt> {
    if ex.lookup(auction.ended())?.unwrap_or(0) != 0 {
        return Ok(Outcome::Fail);
    }
    ex.insert(auction.ended(), 1)?;
    Ok(Outcome::Done)
}

/// Runs `scts` one after another on `state`.
pub fn execute_serially(scts: &[Sct], state: &mut State) -> Vec<Outcome> {
    let mut ex = MapExecutor::new(state);
    scts.iter()
        .map(|sct| sct.execute(&mut ex).expect("map executor never halts"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Key = 0;
    const B: Key = 1;
    const C: Key = 2;

    fn state(pairs: &[(Key, Value)]) -> State {
        pairs.iter().copied().collect()
    }

    fn run(state: &mut State, call: Call) -> Outcome {
        Sct::new(0, call).execute(&mut MapExecutor::new(state)).unwrap()
    }

    #[test]
    fn send_moves_funds() {
        let mut s = state(&[(A, 100), (B, 100)]);
        let out = run(&mut s, Call::CoinSend { sender: A, receiver: B, amount: 50 });
        assert_eq!(out, Outcome::Done);
        assert_eq!(s, state(&[(A, 50), (B, 150)]));
    }

    #[test]
    fn send_with_insufficient_balance_fails_after_lookup() {
        let mut s = state(&[(A, 100)]);
        let mut rec = RecordingExecutor::new(MapExecutor::new(&mut s));
        let out = Sct::new(0, Call::CoinSend { sender: A, receiver: C, amount: 160 })
            .execute(&mut rec)
            .unwrap();
        let (_, steps) = rec.into_inner();
        assert_eq!(out, Outcome::Fail);
        assert_eq!(steps, vec![StepOp::Lookup(A), StepOp::Compute(0)]);
        assert_eq!(s, state(&[(A, 100)]));
    }

    #[test]
    fn zero_transfer_is_identity() {
        let mut s = state(&[(A, 100), (B, 100)]);
        let out = run(&mut s, Call::CoinSend { sender: A, receiver: B, amount: 0 });
        assert_eq!(out, Outcome::Done);
        assert_eq!(s, state(&[(A, 100), (B, 100)]));
    }

    #[test]
    fn get_balance_reads_once() {
        let mut s = state(&[(A, 100), (B, 0)]);
        assert_eq!(run(&mut s, Call::CoinGetBalance { account: A }), Outcome::Value(100));
        assert_eq!(run(&mut s, Call::CoinGetBalance { account: B }), Outcome::Value(0));
        run(&mut s, Call::CoinSend { sender: A, receiver: B, amount: 50 });
        let mut s2 = state(&[(A, 100), (B, 100)]);
        run(&mut s2, Call::CoinSend { sender: A, receiver: B, amount: 50 });
        let mut rec = RecordingExecutor::new(MapExecutor::new(&mut s2));
        let out = Sct::new(0, Call::CoinGetBalance { account: B }).execute(&mut rec).unwrap();
        assert_eq!(out, Outcome::Value(150));
        assert_eq!(rec.steps, vec![StepOp::Lookup(B)]);
    }

    #[test]
    fn vote_once_only() {
        let (p, v) = (0, 5);
        let mut s = state(&[(p, 0), (v, 1)]);
        assert_eq!(run(&mut s, Call::BallotVote { voter: v, proposal: p }), Outcome::Done);
        assert_eq!(s[&p], 1);
        assert!(s[&v] < 0);
        let before = s.clone();
        assert_eq!(run(&mut s, Call::BallotVote { voter: v, proposal: p }), Outcome::Fail);
        assert_eq!(s, before);
    }

    #[test]
    fn delegation_rules() {
        let (p, v, w) = (0, 5, 6);
        let mut s = state(&[(p, 0), (v, 1), (w, 1)]);
        assert_eq!(run(&mut s, Call::BallotDelegate { from: v, to: v }), Outcome::Fail);
        assert_eq!(run(&mut s, Call::BallotDelegate { from: v, to: w }), Outcome::Done);
        assert_eq!(s[&w], 2);
        assert_eq!(run(&mut s, Call::BallotVote { voter: v, proposal: p }), Outcome::Fail);
        assert_eq!(run(&mut s, Call::BallotVote { voter: w, proposal: p }), Outcome::Done);
        assert_eq!(s[&p], 2);
    }

    #[test]
    fn delegating_to_a_voter_who_voted_counts_for_their_proposal() {
        let (p, v, w) = (1, 5, 6);
        let mut s = state(&[(p, 0), (v, 1), (w, 1)]);
        run(&mut s, Call::BallotVote { voter: w, proposal: p });
        assert_eq!(run(&mut s, Call::BallotDelegate { from: v, to: w }), Outcome::Done);
        assert_eq!(s[&p], 2);
    }

    fn auction_state(a: Auction, bidders: &[Key]) -> State {
        let mut s = state(&[(a.max_bid(), 0), (a.max_bidder(), NO_BIDDER), (a.ended(), 0)]);
        for &b in bidders {
            s.insert(b, 0);
        }
        s
    }

    #[test]
    fn auction_bidding_and_refunds() {
        let a = Auction { base: 0 };
        let (b1, b2) = (3, 4);
        let mut s = auction_state(a, &[b1, b2]);
        assert_eq!(run(&mut s, Call::AuctionBid { auction: a, bidder: b1, amount: 10 }), Outcome::Done);
        assert_eq!((s[&a.max_bid()], s[&a.max_bidder()]), (10, 3));

        let before = s.clone();
        assert_eq!(run(&mut s, Call::AuctionBid { auction: a, bidder: b2, amount: 5 }), Outcome::Fail);
        assert_eq!(s, before);

        assert_eq!(run(&mut s, Call::AuctionBid { auction: a, bidder: b2, amount: 20 }), Outcome::Done);
        assert_eq!(run(&mut s, Call::AuctionWithdraw { auction: a, bidder: b1 }), Outcome::Value(10));
        assert_eq!(run(&mut s, Call::AuctionWithdraw { auction: a, bidder: b1 }), Outcome::Value(0));
    }

    #[test]
    fn bid_after_end_fails() {
        let a = Auction { base: 0 };
        let mut s = auction_state(a, &[3]);
        assert_eq!(run(&mut s, Call::AuctionEnd { auction: a }), Outcome::Done);
        assert_eq!(run(&mut s, Call::AuctionBid { auction: a, bidder: 3, amount: 10 }), Outcome::Fail);
    }

    #[test]
    fn call_parts_roundtrip() {
        let a = Auction { base: 7 };
        for call in [
            Call::CoinSend { sender: 1, receiver: 2, amount: 3 },
            Call::CoinGetBalance { account: 4 },
            Call::BallotVote { voter: 5, proposal: 0 },
            Call::BallotDelegate { from: 5, to: 6 },
            Call::AuctionBid { auction: a, bidder: 11, amount: 9 },
            Call::AuctionWithdraw { auction: a, bidder: 11 },
            Call::AuctionEnd { auction: a },
        ] {
            assert_eq!(Call::from_parts(call.sc_fun_id(), &call.args()), Some(call));
        }
        assert_eq!(Call::from_parts(99, &[]), None);
        assert_eq!(Call::from_parts(fun::COIN_SEND, &[-1, 2, 3]), None);
    }
}
