//! Virtual queue pairs multiplexed over a per-CPU hybrid pool of physical
//! RC and DC queue pairs.
//!
//! Synchronous state transitions live in [`datapath`] and [`inbound`]; the
//! user-facing calls in [`ops`] are async because they wait on simulated time.

mod datapath;
pub mod header;
mod inbound;
mod kernel;
pub mod ops;
pub mod transfer;
pub mod wrid;

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::addr::{Gid, NodeId};
use crate::meta::MetaError;
use crate::nic::{DctTarget, NicError, Qpn, RecvBuffer, WcStatus};

pub use datapath::{poll_inner, PostCheck};
pub use inbound::{absorb_inbound, post_kernel_buffers};
pub use kernel::{CachedMr, Kernel, KernelStats, PhysState, SubPool};
pub use wrid::WrIdEncoding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VqpId(pub u32);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VqpError {
    #[error("virtual qp identifiers exhausted")]
    IdsExhausted,
    #[error("vqp {0:?} is not connected")]
    NotConnected(VqpId),
    #[error("vqp {0:?} already connected to a different address")]
    AlreadyConnected(VqpId),
    #[error("address {0:?} already bound")]
    AlreadyBound(NodeId),
    #[error("vqp {0:?} is not bound")]
    NotBound(VqpId),
    #[error("connect failed: {0}")]
    Meta(#[from] MetaError),
    #[error("request {index} rejected: {reason}")]
    Rejected { index: usize, reason: &'static str },
    #[error("empty work request list")]
    EmptyList,
    #[error("invalid argument: {0}")]
    Argument(&'static str),
    #[error("no kernel on node {0:?}")]
    NoKernel(Gid),
    #[error(transparent)]
    Nic(#[from] NicError),
}

/// One slot of a VQP's software completion queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompEntry {
    pub ready: bool,
    pub user_wr_id: u64,
    pub status: WcStatus,
}

/// What the user gets back from a virtual poll.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VCompletion {
    pub wr_id: u64,
    pub status: WcStatus,
}

/// A message held by the kernel until the user pops it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inbound {
    pub sender: NodeId,
    pub sender_meta: DctTarget,
    pub zero_copy: bool,
    /// Inline payload (copy path) or empty (zero-copy path).
    pub payload: Vec<u8>,
    /// Zero-copy source address and size on the sender.
    pub src_addr: u64,
    pub size: u32,
    /// Physical resource whose kernel buffer holds this message (reposted on pop).
    pub(crate) held: Option<HeldBuffer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct HeldBuffer {
    pub target: crate::nic::RecvTarget,
    pub buf: RecvBuffer,
}

/// A message delivered into a user buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Message {
    pub buf: RecvBuffer,
    pub byte_len: u32,
    pub status: WcStatus,
}

#[derive(Debug)]
pub struct Vqp {
    pub id: VqpId,
    pub home: Gid,
    pub cpu: usize,
    pub comp_queue: VecDeque<CompEntry>,
    pub recv_queue: VecDeque<RecvBuffer>,
    pub qp: Option<Qpn>,
    pub peer: Option<NodeId>,
    pub dct_meta: Option<DctTarget>,
    /// Address this VQP receives on (qbind, or ephemeral once it sends).
    pub bound_addr: Option<NodeId>,
    pub explicitly_bound: bool,
    pub inbox: VecDeque<Inbound>,
    /// Reply VQPs created by `qpop_msgs`, one per sender.
    pub senders: BTreeMap<NodeId, VqpId>,
    pub transferring: bool,
    pub(crate) fence_done: bool,
}

impl Vqp {
    fn new(id: VqpId, home: Gid, cpu: usize) -> Self {
        Self {
            id,
            home,
            cpu,
            comp_queue: VecDeque::new(),
            recv_queue: VecDeque::new(),
            qp: None,
            peer: None,
            dct_meta: None,
            bound_addr: None,
            explicitly_bound: false,
            inbox: VecDeque::new(),
            senders: BTreeMap::new(),
            transferring: false,
            fence_done: false,
        }
    }

    /// Pops the head iff it is Ready.
    pub fn pop_ready(&mut self) -> Option<VCompletion> {
        if self.comp_queue.front().is_some_and(|e| e.ready) {
            let e = self.comp_queue.pop_front().expect("head");
            Some(VCompletion {
                wr_id: e.user_wr_id,
                status: e.status,
            })
        } else {
            None
        }
    }

    pub fn pending(&self) -> usize {
        self.comp_queue.len()
    }
}
