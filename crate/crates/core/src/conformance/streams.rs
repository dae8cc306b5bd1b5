//! Random request streams shared by the property suites.

use proptest::prelude::*;
use crate::nic::{LocalBuf, Opcode, RemoteBuf, WorkRequest};

use super::{Cluster, USER_BASE, USER_LEN};

#[derive(Clone, Copy, Debug)]
pub enum Req {
    Read { off: u64, len: u32, signaled: bool },
    Write { off: u64, len: u32, signaled: bool },
    /// Remote range past the end of the target MR.
    OutOfBounds,
    BadRkey,
    Unsupported,
    /// Caller-supplied DC routing, which only the kernel may set.
    UserRoute,
}

impl Req {
    pub fn is_valid(&self) -> bool {
        matches!(self, Req::Read { .. } | Req::Write { .. })
    }

    pub fn signaled(&self) -> bool {
        match self {
            Req::Read { signaled, .. } | Req::Write { signaled, .. } => *signaled,
            _ => true,
        }
    }
}

fn valid_req() -> impl Strategy<Value = Req> {
    (any::<bool>(), 0u64..4096, 0u32..512, prop::bool::weighted(0.6)).prop_map(
        |(read, slot, len, signaled)| {
            let off = slot * 64;
            if read {
                Req::Read { off, len, signaled }
            } else {
                Req::Write { off, len, signaled }
            }
        },
    )
}

fn any_req() -> impl Strategy<Value = Req> {
    prop_oneof![
        20 => valid_req(),
        1 => Just(Req::OutOfBounds),
        1 => Just(Req::BadRkey),
        1 => Just(Req::Unsupported),
        1 => Just(Req::UserRoute),
    ]
}

/// Request lists of well-formed requests only; some exceed `depth`.
pub fn valid_lists(depth: usize, max_lists: usize) -> impl Strategy<Value = Vec<Vec<Req>>> {
    let list = prop_oneof![
        6 => prop::collection::vec(valid_req(), 1..=depth),
        1 => prop::collection::vec(valid_req(), depth + 1..=depth * 3),
    ];
    prop::collection::vec(list, 1..=max_lists)
}

/// Like [`valid_lists`] but some lists carry a malformed request.
pub fn mixed_lists(depth: usize, max_lists: usize) -> impl Strategy<Value = Vec<Vec<Req>>> {
    let list = prop_oneof![
        6 => prop::collection::vec(any_req(), 1..=depth),
        1 => prop::collection::vec(any_req(), depth + 1..=depth * 3),
    ];
    prop::collection::vec(list, 1..=max_lists)
}

impl Cluster {
    /// Materializes `r` as a request against node `to`.
    pub fn request(&self, r: Req, wr_id: u64, to: usize) -> WorkRequest {
        let rkey = self.mrs[to].rkey;
        let lbuf = |off: u64, len| LocalBuf {
            addr: USER_BASE + off,
            len,
        };
        let rbuf = |off: u64| RemoteBuf {
            addr: USER_BASE + off,
            rkey,
        };
        let wr = match r {
            Req::Read { off, len, .. } => WorkRequest::read(wr_id, lbuf(off, len), rbuf(off)),
            Req::Write { off, len, .. } => WorkRequest::write(wr_id, lbuf(off, len), rbuf(off)),
            Req::OutOfBounds => WorkRequest::read(wr_id, lbuf(0, 64), rbuf(USER_LEN - 32)),
            Req::BadRkey => WorkRequest::read(
                wr_id,
                lbuf(0, 8),
                RemoteBuf {
                    addr: USER_BASE,
                    rkey: 0x0bad_0bad,
                },
            ),
            Req::Unsupported => WorkRequest {
                op: Opcode::Unsupported(0x7f),
                ..WorkRequest::read(wr_id, lbuf(0, 8), rbuf(0))
            },
            Req::UserRoute => {
                let t = self.sim.with(|w| w.kernel(self.nodes[to]).node_target);
                WorkRequest::read(wr_id, lbuf(0, 8), rbuf(0)).via(t.into())
            }
        };
        if r.signaled() {
            wr
        } else {
            wr.unsignaled()
        }
    }
}
