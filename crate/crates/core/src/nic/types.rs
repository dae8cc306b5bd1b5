use crate::addr::{Gid, NodeId};
use crate::simcore::Nanos;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Qpn(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QpKind {
    Rc,
    Dc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QpState {
    Reset,
    Init,
    Rtr,
    Rts,
    Err,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueDepths {
    pub sq: u32,
    pub cq: u32,
    pub rq: u32,
}

impl QueueDepths {
    pub fn new(sq: u32, cq: u32, rq: u32) -> Self {
        Self { sq, cq, rq }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Opcode {
    Read,
    Write,
    Send,
    /// Anything the NIC does not implement (atomics etc.).
    Unsupported(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WcStatus {
    Ok,
    LocErr,
    RemAccessErr,
    FlushErr,
    OverflowErr,
    /// Receiver had no posted buffer.
    RnrErr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
}

impl Perms {
    pub const RW: Perms = Perms {
        read: true,
        write: true,
    };
    pub const RO: Perms = Perms {
        read: true,
        write: false,
    };
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryRegion {
    pub mr_id: u32,
    pub node: Gid,
    pub base: u64,
    pub length: u64,
    pub rkey: u32,
    pub perms: Perms,
    pub registered_at: Nanos,
    pub valid: bool,
}

impl MemoryRegion {
    pub fn covers(&self, addr: u64, len: u64) -> bool {
        addr >= self.base
            && addr
                .checked_add(len)
                .is_some_and(|end| end <= self.base + self.length)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DctTarget {
    pub dct_num: u32,
    pub dct_key: u64,
    pub owner: Gid,
}

/// Where a DC request goes: node plus the DCT metadata to present there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DctRoute {
    pub node: Gid,
    pub dct_num: u32,
    pub dct_key: u64,
}

impl From<DctTarget> for DctRoute {
    fn from(t: DctTarget) -> Self {
        DctRoute {
            node: t.owner,
            dct_num: t.dct_num,
            dct_key: t.dct_key,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LocalBuf {
    pub addr: u64,
    pub len: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RemoteBuf {
    pub addr: u64,
    pub rkey: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkRequest {
    pub wr_id: u64,
    pub op: Opcode,
    pub signaled: bool,
    pub local: LocalBuf,
    pub remote: Option<RemoteBuf>,
    pub dct_route: Option<DctRoute>,
    pub imm: u32,
}

impl WorkRequest {
    pub fn read(wr_id: u64, local: LocalBuf, remote: RemoteBuf) -> Self {
        Self {
            wr_id,
            op: Opcode::Read,
            signaled: true,
            local,
            remote: Some(remote),
            dct_route: None,
            imm: 0,
        }
    }

    pub fn write(wr_id: u64, local: LocalBuf, remote: RemoteBuf) -> Self {
        Self {
            op: Opcode::Write,
            ..Self::read(wr_id, local, remote)
        }
    }

    pub fn send(wr_id: u64, local: LocalBuf) -> Self {
        Self {
            wr_id,
            op: Opcode::Send,
            signaled: true,
            local,
            remote: None,
            dct_route: None,
            imm: 0,
        }
    }

    pub fn unsignaled(mut self) -> Self {
        self.signaled = false;
        self
    }

    pub fn via(mut self, route: DctRoute) -> Self {
        self.dct_route = Some(route);
        self
    }

    pub fn with_imm(mut self, imm: u32) -> Self {
        self.imm = imm;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub wr_id: u64,
    pub status: WcStatus,
    pub byte_len: u32,
    pub opcode: Opcode,
    pub qpn: Qpn,
    /// Send-queue slots released when this completion is polled.
    pub slots_freed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecvBuffer {
    pub addr: u64,
    pub len: u32,
    pub tag: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecvTarget {
    Qp(Qpn),
    Dct(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecvCompletion {
    pub target: RecvTarget,
    pub buf: RecvBuffer,
    pub src: Gid,
    pub imm: u32,
    pub byte_len: u32,
    pub data: Vec<u8>,
    pub at: Nanos,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QpInfo {
    pub qpn: Qpn,
    pub node: Gid,
    pub kind: QpKind,
    pub state: QpState,
    pub depths: QueueDepths,
    pub uncomp_cnt: u64,
    pub connected_peer: Option<NodeId>,
    pub remote_qpn: Option<Qpn>,
    pub pending_completions: usize,
    pub in_flight: usize,
    pub ever_errored: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Read,
    Write,
    Send,
    Datagram,
    Reconnect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub at: Nanos,
    pub kind: TraceKind,
    pub src: Gid,
    pub dst: Gid,
    pub qp: Option<Qpn>,
}
