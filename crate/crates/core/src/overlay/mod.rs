//! Chord ring state and the local steps of lookup, stabilization and
//! failure detection. The message exchange that drives these steps lives in
//! the instance runtime; everything here is synchronous and side-effect free.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::wire::Address;

pub const DEFAULT_ID_BITS: u32 = 32;

/// Position on the identifier ring, in `[0, 2^bits)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

/// Top `bits` bits of the SHA-1 digest of `key`.
pub fn node_id(key: &str, bits: u32) -> NodeId {
    assert!((1..=64).contains(&bits), "id bits must be in 1..=64");
    let digest = Sha1::digest(key.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    NodeId(u64::from_be_bytes(head) >> (64 - bits))
}

/// `x` in the open ring interval `(a, b)`. With `a == b` this is every
/// point except `a`.
pub fn in_open(x: NodeId, a: NodeId, b: NodeId) -> bool {
    let (x, a, b) = (x.0, a.0, b.0);
    match a.cmp(&b) {
        core::cmp::Ordering::Less => a < x && x < b,
        core::cmp::Ordering::Greater => x > a || x < b,
        core::cmp::Ordering::Equal => x != a,
    }
}

/// `x` in the half-open ring interval `(a, b]`. With `a == b` this is the
/// whole ring.
pub fn in_half_open(x: NodeId, a: NodeId, b: NodeId) -> bool {
    a == b || x == b || in_open(x, a, b)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Peer {
    pub id: NodeId,
    pub addr: Address,
}

impl Peer {
    pub fn new(addr: Address, bits: u32) -> Self {
        Peer { id: node_id(addr.as_str(), bits), addr }
    }
}

/// Result of one local lookup step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hop {
    /// The key's successor is known.
    Done(Peer),
    /// Ask this node next.
    Next(Peer),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LookupError {
    #[error("lookup timed out")]
    LookupTimeout,
}

/// Reported by a node when its predecessor stops answering pings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureUpcall {
    pub failed: Address,
    pub detected_by: Address,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingState {
    pub me: Peer,
    /// Ordered by ring distance from `me`. Holds only `me` when alone.
    pub successors: Vec<Peer>,
    pub predecessor: Option<Peer>,
    pub succ_len: usize,
    pub ping_timeout_count: u32,
    pred_misses: u32,
}

impl RingState {
    /// The first node of a ring.
    pub fn singleton(me: Peer, succ_len: usize, ping_timeout_count: u32) -> Self {
        RingState {
            successors: alloc::vec![me.clone()],
            me,
            predecessor: None,
            succ_len: succ_len.max(1),
            ping_timeout_count: ping_timeout_count.max(1),
            pred_misses: 0,
        }
    }

    /// State right after a successful join lookup returned `successor`.
    pub fn joined(me: Peer, successor: Peer, succ_len: usize, ping_timeout_count: u32) -> Self {
        let mut ring = RingState::singleton(me, succ_len, ping_timeout_count);
        ring.set_successors(alloc::vec![successor]);
        ring
    }

    pub fn successor(&self) -> &Peer {
        self.successors.first().unwrap_or(&self.me)
    }

    pub fn is_alone(&self) -> bool {
        self.successor().addr == self.me.addr
    }

    fn set_successors(&mut self, list: Vec<Peer>) {
        let mut out: Vec<Peer> = Vec::with_capacity(self.succ_len);
        for p in list {
            if p.addr == self.me.addr || out.iter().any(|q| q.addr == p.addr) {
                continue;
            }
            out.push(p);
            if out.len() == self.succ_len {
                break;
            }
        }
        if out.is_empty() {
            out.push(self.me.clone());
        }
        self.successors = out;
    }

    /// One step of `find_successor(key)` evaluated at this node.
    pub fn lookup_step(&self, key: NodeId) -> Hop {
        let succ = self.successor();
        if in_half_open(key, self.me.id, succ.id) {
            return Hop::Done(succ.clone());
        }
        if let Some(pred) = &self.predecessor {
            if in_half_open(key, pred.id, self.me.id) {
                return Hop::Done(self.me.clone());
            }
        }
        // Farthest known successor that still precedes the key.
        let next = self.successors.iter().rev().find(|p| in_open(p.id, self.me.id, key)).unwrap_or(succ);
        Hop::Next(next.clone())
    }

    /// True if this node is responsible for `key`.
    pub fn owns(&self, key: NodeId) -> bool {
        match &self.predecessor {
            Some(pred) => in_half_open(key, pred.id, self.me.id),
            None => self.is_alone(),
        }
    }

    /// Handles a NOTIFY from `candidate`. Returns true if the predecessor
    /// changed.
    pub fn notify(&mut self, candidate: Peer) -> bool {
        if candidate.addr == self.me.addr {
            return false;
        }
        let adopt = match &self.predecessor {
            None => true,
            Some(p) => p.addr != candidate.addr && in_open(candidate.id, p.id, self.me.id),
        };
        if adopt {
            self.predecessor = Some(candidate);
            self.pred_misses = 0;
        }
        adopt
    }

    /// Applies the successor's answer to GET_PRED. Returns true if the
    /// successor list changed.
    pub fn stabilize(&mut self, succ_pred: Option<Peer>, succ_successors: Vec<Peer>) -> bool {
        let before = self.successors.clone();
        let succ = self.successor().clone();
        let mut list = Vec::new();
        if let Some(x) = succ_pred {
            if x.addr != self.me.addr && in_open(x.id, self.me.id, succ.id) {
                list.push(x);
            }
        }
        list.push(succ);
        list.extend(succ_successors);
        self.set_successors(list);
        self.successors != before
    }

    /// Adopts `candidate` as successor if it lies between this node and its
    /// current successor. This is how two rings that formed apart merge.
    pub fn consider(&mut self, candidate: Peer) -> bool {
        if candidate.addr == self.me.addr || !in_open(candidate.id, self.me.id, self.successor().id) {
            return false;
        }
        let mut list = alloc::vec![candidate];
        list.extend(self.successors.iter().cloned());
        self.set_successors(list);
        true
    }

    /// Drops an unresponsive successor, falling back to the next entry.
    pub fn successor_failed(&mut self, addr: &Address) -> bool {
        let before = self.successors.clone();
        let list: Vec<Peer> = self.successors.iter().filter(|p| &p.addr != addr).cloned().collect();
        self.set_successors(list);
        if self.predecessor.as_ref().is_some_and(|p| &p.addr == addr) && self.is_alone() {
            self.predecessor = None;
        }
        self.successors != before
    }

    /// Records the outcome of this round's predecessor ping. Returns the
    /// predecessor once it has missed `ping_timeout_count` consecutive
    /// rounds; it is removed from the local state at that point.
    pub fn ping_result(&mut self, answered: bool) -> Option<Peer> {
        if answered {
            self.pred_misses = 0;
            return None;
        }
        self.predecessor.as_ref()?;
        self.pred_misses += 1;
        if self.pred_misses >= self.ping_timeout_count {
            self.pred_misses = 0;
            let failed = self.predecessor.take();
            if let Some(f) = &failed {
                let list: Vec<Peer> = self.successors.iter().filter(|p| p.addr != f.addr).cloned().collect();
                self.set_successors(list);
            }
            return failed;
        }
        None
    }

    /// Replaces a departing predecessor without reporting a failure.
    pub fn predecessor_left(&mut self, leaving: &Address, replacement: Option<Peer>) {
        if self.predecessor.as_ref().is_some_and(|p| &p.addr == leaving) {
            self.predecessor = replacement.filter(|p| p.addr != self.me.addr);
            self.pred_misses = 0;
        }
        if self.successors.iter().any(|p| &p.addr == leaving) {
            let list: Vec<Peer> = self.successors.iter().filter(|p| &p.addr != leaving).cloned().collect();
            self.set_successors(list);
        }
    }

    /// Replaces a departing successor with the leaver's own successors.
    pub fn successor_left(&mut self, leaving: &Address, their_successors: Vec<Peer>) {
        if !self.successors.iter().any(|p| &p.addr == leaving) {
            return;
        }
        let mut list = Vec::new();
        for p in self.successors.clone() {
            if &p.addr == leaving {
                list.extend(their_successors.iter().cloned());
            } else {
                list.push(p);
            }
        }
        list.retain(|p| &p.addr != leaving);
        self.set_successors(list);
    }
}

/// Runs the iterative lookup against a set of ring states, fetched through
/// `peer_state`. `None` from the fetch models an unreachable node.
pub fn find_successor<'a, F>(start: &'a RingState, key: NodeId, mut peer_state: F, max_hops: usize) -> Result<Peer, LookupError>
where
    F: FnMut(&Address) -> Option<&'a RingState>,
{
    let mut at = start;
    for _ in 0..max_hops {
        match at.lookup_step(key) {
            Hop::Done(p) => return Ok(p),
            Hop::Next(p) => at = peer_state(&p.addr).ok_or(LookupError::LookupTimeout)?,
        }
    }
    Err(LookupError::LookupTimeout)
}
