//! Simulated RNICs: RC/DC queue pairs, memory regions, DCT targets and the
//! timing of every verb.
//!
//! The [`Fabric`] owns all NICs and the NIC-level event queue. It is a plain
//! synchronous state machine: `post_send` schedules events, [`Fabric::step`]
//! fires the next one, `poll_cq` reads whatever has been delivered so far.
//! Tasks that need to block register a [`Waker`] and are woken when a
//! completion or inbound message lands.

mod memory;
mod types;

pub use memory::Memory;
pub use types::*;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::task::Waker;

use thiserror::Error;

use crate::addr::{Gid, NodeId};
use crate::config::CostModel;
use crate::simcore::{Nanos, SimClock};

/// rkey that authorizes any range lying inside some valid MR of the target node.
pub const KERNEL_RKEY: u32 = 0x4b52_0001;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NicError {
    #[error("unknown node {0:?}")]
    UnknownNode(Gid),
    #[error("unknown qp {0:?}")]
    UnknownQp(Qpn),
    #[error("node {node:?} exceeded its QP budget of {budget}")]
    QpBudget { node: Gid, budget: usize },
    #[error("qp {qp:?} in state {state:?}, expected {expected}")]
    State {
        qp: Qpn,
        state: QpState,
        expected: &'static str,
    },
    #[error("invalid argument: {0}")]
    Argument(&'static str),
    #[error("dct number {0} already in use on this node")]
    DuplicateDct(u32),
    #[error("unknown dct target {0}")]
    UnknownDct(u32),
    #[error("unknown memory region rkey {0:#x}")]
    UnknownMr(u32),
}

/// Counts of operations that crossed the wire, observed at the fabric.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WireTap {
    pub reads: u64,
    pub writes: u64,
    pub sends: u64,
    /// Connectionless datagrams (handshakes, RPC requests/replies).
    pub datagrams: u64,
    pub dc_reconnects: u64,
    /// One-sided READs whose destination is a node flagged as meta server.
    pub meta_reads: u64,
}

impl WireTap {
    pub fn total_ops(&self) -> u64 {
        self.reads + self.writes + self.sends + self.datagrams
    }
}

#[derive(Debug)]
enum NicEvent {
    Arrive { qp: Qpn, epoch: u32, seq: u64 },
    Complete { qp: Qpn, epoch: u32, seq: u64 },
}

#[derive(Debug)]
struct InFlight {
    wr: WorkRequest,
    /// Set once the request has a final status (ok or error).
    status: Option<WcStatus>,
    done: bool,
    byte_len: u32,
    read_data: Option<Vec<u8>>,
    /// DCT key mismatch or unknown target; DC QPs stay usable after this.
    routing_fail: bool,
}

#[derive(Debug)]
struct QpCore {
    node: Gid,
    kind: QpKind,
    state: QpState,
    depths: QueueDepths,
    peer: Option<NodeId>,
    remote_qpn: Option<Qpn>,
    dc_connected: Option<Gid>,
    /// Next request may not start before this time (DC reconnect stalls it).
    pipe_free: Nanos,
    epoch: u32,
    next_seq: u64,
    /// Seq up to which sq slots have been claimed by delivered completions.
    claimed_upto: u64,
    /// Slots released by polled completions.
    freed: u64,
    inflight: BTreeMap<u64, InFlight>,
    next_to_deliver: u64,
    cq: VecDeque<Completion>,
    recv_buffers: VecDeque<RecvBuffer>,
    error_pending: bool,
    ever_errored: bool,
}

impl QpCore {
    fn uncomp_cnt(&self) -> u64 {
        self.next_seq - self.freed
    }
}

#[derive(Debug)]
struct DctState {
    target: DctTarget,
    recv_buffers: VecDeque<RecvBuffer>,
}

#[derive(Debug)]
struct NodeState {
    gid: Gid,
    memory: Memory,
    mrs: BTreeMap<u32, MemoryRegion>,
    next_key: u32,
    dcts: BTreeMap<u32, DctState>,
    next_dct: u32,
    qp_count: usize,
    mem_bytes: u64,
    ctrl_busy_until: Nanos,
    nic_free: Nanos,
    recv_cq: VecDeque<RecvCompletion>,
    is_meta: bool,
}

/// All simulated NICs plus the wire between them.
pub struct Fabric {
    pub cost: CostModel,
    clock: SimClock<NicEvent>,
    nodes: Vec<NodeState>,
    index: HashMap<Gid, usize>,
    qps: HashMap<Qpn, QpCore>,
    next_qpn: u32,
    latency_overrides: HashMap<(Gid, Gid), Nanos>,
    pub tap: WireTap,
    cq_waiters: HashMap<Qpn, Vec<Waker>>,
    recv_waiters: HashMap<Gid, Vec<Waker>>,
    trace: Option<Vec<TraceRecord>>,
}

impl std::fmt::Debug for Fabric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fabric")
            .field("now", &self.clock.now())
            .field("nodes", &self.nodes.len())
            .field("qps", &self.qps.len())
            .field("tap", &self.tap)
            .finish()
    }
}

impl Fabric {
    pub fn new(cost: CostModel) -> Self {
        Self {
            cost,
            clock: SimClock::new(),
            nodes: Vec::new(),
            index: HashMap::new(),
            qps: HashMap::new(),
            next_qpn: 1,
            latency_overrides: HashMap::new(),
            tap: WireTap::default(),
            cq_waiters: HashMap::new(),
            recv_waiters: HashMap::new(),
            trace: None,
        }
    }

    pub fn now(&self) -> Nanos {
        self.clock.now()
    }

    /// Keeps a record of every wire-level event (for determinism checks).
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn record(&mut self, kind: TraceKind, src: Gid, dst: Gid, qp: Option<Qpn>) {
        let at = self.clock.now();
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord {
                at,
                kind,
                src,
                dst,
                qp,
            });
        }
    }

    // ----- topology -------------------------------------------------------

    pub fn add_node(&mut self, gid: Gid) -> Gid {
        assert!(!self.index.contains_key(&gid), "node {gid:?} added twice");
        self.index.insert(gid, self.nodes.len());
        self.nodes.push(NodeState {
            gid,
            memory: Memory::default(),
            mrs: BTreeMap::new(),
            next_key: 0x100,
            dcts: BTreeMap::new(),
            next_dct: 1,
            qp_count: 0,
            mem_bytes: 0,
            ctrl_busy_until: 0,
            nic_free: 0,
            recv_cq: VecDeque::new(),
            is_meta: false,
        });
        gid
    }

    pub fn has_node(&self, gid: Gid) -> bool {
        self.index.contains_key(&gid)
    }

    pub fn node_gids(&self) -> Vec<Gid> {
        self.nodes.iter().map(|n| n.gid).collect()
    }

    /// Flags `gid` as a meta server; READs to it are counted in `tap.meta_reads`.
    pub fn mark_meta_server(&mut self, gid: Gid) {
        let i = self.index[&gid];
        self.nodes[i].is_meta = true;
        for other in self.node_gids() {
            if other != gid {
                let l = self.cost.meta_latency_ns;
                self.set_latency(gid, other, l);
            }
        }
    }

    pub fn set_latency(&mut self, a: Gid, b: Gid, one_way: Nanos) {
        assert!(one_way > 0, "latency must be positive");
        self.latency_overrides.insert((a, b), one_way);
        self.latency_overrides.insert((b, a), one_way);
    }

    pub fn latency(&self, a: Gid, b: Gid) -> Nanos {
        if let Some(l) = self.latency_overrides.get(&(a, b)) {
            return *l;
        }
        let meta = |g: &Gid| self.index.get(g).is_some_and(|&i| self.nodes[i].is_meta);
        if a != b && (meta(&a) || meta(&b)) {
            self.cost.meta_latency_ns
        } else {
            self.cost.wire_latency_ns
        }
    }

    fn node(&self, gid: Gid) -> Result<&NodeState, NicError> {
        self.index
            .get(&gid)
            .map(|&i| &self.nodes[i])
            .ok_or(NicError::UnknownNode(gid))
    }

    fn node_mut(&mut self, gid: Gid) -> Result<&mut NodeState, NicError> {
        match self.index.get(&gid) {
            Some(&i) => Ok(&mut self.nodes[i]),
            None => Err(NicError::UnknownNode(gid)),
        }
    }

    pub fn memory(&self, gid: Gid) -> &Memory {
        &self.node(gid).expect("unknown node").memory
    }

    pub fn memory_mut(&mut self, gid: Gid) -> &mut Memory {
        &mut self.node_mut(gid).expect("unknown node").memory
    }

    // ----- memory meter & rnic control unit ------------------------------

    pub fn mem_bytes(&self, gid: Gid) -> u64 {
        self.node(gid).map(|n| n.mem_bytes).unwrap_or(0)
    }

    pub fn charge_mem(&mut self, gid: Gid, bytes: u64) {
        self.node_mut(gid).expect("unknown node").mem_bytes += bytes;
    }

    pub fn refund_mem(&mut self, gid: Gid, bytes: u64) {
        let n = self.node_mut(gid).expect("unknown node");
        n.mem_bytes = n.mem_bytes.checked_sub(bytes).expect("memory meter underflow");
    }

    /// Reserves the node's serialized RNIC command unit for `dur`; returns the finish time.
    pub fn reserve_ctrl(&mut self, gid: Gid, dur: Nanos) -> Nanos {
        let now = self.clock.now();
        let n = self.node_mut(gid).expect("unknown node");
        let start = n.ctrl_busy_until.max(now);
        n.ctrl_busy_until = start + dur;
        n.ctrl_busy_until
    }

    /// Marks every node's command unit idle (used after boot-time setup).
    pub fn reset_control_units(&mut self) {
        let now = self.clock.now();
        for n in &mut self.nodes {
            n.ctrl_busy_until = now;
        }
    }

    /// Driver-context initialization (user-space verbs only).
    pub fn init_context(&mut self, gid: Gid) -> Nanos {
        let d = self.cost.init_ns;
        self.reserve_ctrl(gid, d)
    }

    // ----- queue pairs ----------------------------------------------------

    /// Creates a QP in INIT. Returns it with the time at which creation finishes.
    pub fn create_qp(
        &mut self,
        gid: Gid,
        kind: QpKind,
        depths: QueueDepths,
    ) -> Result<(Qpn, Nanos), NicError> {
        if depths.sq == 0 || depths.cq == 0 {
            return Err(NicError::Argument("queue depths must be positive"));
        }
        let budget = self.cost.qp_budget;
        let mem = match kind {
            QpKind::Rc => self.cost.rc_qp_mem_bytes,
            QpKind::Dc => self.cost.dc_qp_mem_bytes,
        };
        let node = self.node_mut(gid)?;
        if node.qp_count >= budget {
            return Err(NicError::QpBudget { node: gid, budget });
        }
        node.qp_count += 1;
        node.mem_bytes += mem;
        let ready = self.reserve_ctrl(gid, self.cost.create_qp_ns);
        let qpn = Qpn(self.next_qpn);
        self.next_qpn += 1;
        self.qps.insert(
            qpn,
            QpCore {
                node: gid,
                kind,
                state: QpState::Init,
                depths,
                peer: None,
                remote_qpn: None,
                dc_connected: None,
                pipe_free: 0,
                epoch: 0,
                next_seq: 0,
                claimed_upto: 0,
                freed: 0,
                inflight: BTreeMap::new(),
                next_to_deliver: 0,
                cq: VecDeque::new(),
                recv_buffers: VecDeque::new(),
                error_pending: false,
                ever_errored: false,
            },
        );
        Ok((qpn, ready))
    }

    /// RC only: INIT -> RTR -> RTS with the peer fixed. Includes the datagram
    /// handshake. Returns the time at which the QP is ready.
    pub fn configure_qp(
        &mut self,
        qpn: Qpn,
        peer: NodeId,
        remote_qpn: Option<Qpn>,
    ) -> Result<Nanos, NicError> {
        let now = self.clock.now();
        let cost = self.cost.configure_qp_ns + self.cost.handshake_ns;
        let qp = self.qps.get_mut(&qpn).ok_or(NicError::UnknownQp(qpn))?;
        if qp.kind != QpKind::Rc || qp.state != QpState::Init {
            return Err(NicError::State {
                qp: qpn,
                state: qp.state,
                expected: "RC in INIT",
            });
        }
        qp.state = QpState::Rts;
        qp.peer = Some(peer);
        qp.remote_qpn = remote_qpn;
        let src = qp.node;
        self.tap.datagrams += 2;
        self.record(TraceKind::Datagram, src, peer.gid, Some(qpn));
        self.record(TraceKind::Datagram, peer.gid, src, Some(qpn));
        Ok(now + cost)
    }

    /// Late binding of the remote QP number (both sides of an RC pair are
    /// created independently).
    pub fn set_remote_qpn(&mut self, qpn: Qpn, remote: Qpn) -> Result<(), NicError> {
        let qp = self.qps.get_mut(&qpn).ok_or(NicError::UnknownQp(qpn))?;
        qp.remote_qpn = Some(remote);
        Ok(())
    }

    pub fn destroy_qp(&mut self, qpn: Qpn) -> Result<(), NicError> {
        let qp = self.qps.remove(&qpn).ok_or(NicError::UnknownQp(qpn))?;
        let mem = match qp.kind {
            QpKind::Rc => self.cost.rc_qp_mem_bytes,
            QpKind::Dc => self.cost.dc_qp_mem_bytes,
        };
        let n = self.node_mut(qp.node)?;
        n.qp_count -= 1;
        n.mem_bytes -= mem;
        self.cq_waiters.remove(&qpn);
        Ok(())
    }

    pub fn qp_info(&self, qpn: Qpn) -> Result<QpInfo, NicError> {
        let qp = self.qps.get(&qpn).ok_or(NicError::UnknownQp(qpn))?;
        Ok(QpInfo {
            qpn,
            node: qp.node,
            kind: qp.kind,
            state: qp.state,
            depths: qp.depths,
            uncomp_cnt: qp.uncomp_cnt(),
            connected_peer: match qp.kind {
                QpKind::Rc => qp.peer,
                QpKind::Dc => qp.dc_connected.map(|g| NodeId::new(g, 0)),
            },
            remote_qpn: qp.remote_qpn,
            pending_completions: qp.cq.len(),
            in_flight: qp.inflight.len(),
            ever_errored: qp.ever_errored,
        })
    }

    pub fn qp_state(&self, qpn: Qpn) -> QpState {
        self.qps.get(&qpn).map(|q| q.state).unwrap_or(QpState::Reset)
    }

    pub fn qp_exists(&self, qpn: Qpn) -> bool {
        self.qps.contains_key(&qpn)
    }

    // ----- memory regions & dct targets -----------------------------------

    pub fn register_mr(
        &mut self,
        gid: Gid,
        base: u64,
        length: u64,
        perms: Perms,
    ) -> Result<MemoryRegion, NicError> {
        if length == 0 {
            return Err(NicError::Argument("zero-length memory region"));
        }
        if base.checked_add(length).is_none() {
            return Err(NicError::Argument("memory region wraps the address space"));
        }
        let now = self.clock.now();
        let node = self.node_mut(gid)?;
        let key = node.next_key;
        node.next_key += 1;
        let mr = MemoryRegion {
            mr_id: key,
            node: gid,
            base,
            length,
            rkey: key,
            perms,
            registered_at: now,
            valid: true,
        };
        node.mrs.insert(key, mr.clone());
        Ok(mr)
    }

    /// Invalidates immediately at the device level.
    pub fn deregister_mr(&mut self, gid: Gid, rkey: u32) -> Result<(), NicError> {
        let node = self.node_mut(gid)?;
        let mr = node.mrs.get_mut(&rkey).ok_or(NicError::UnknownMr(rkey))?;
        mr.valid = false;
        Ok(())
    }

    pub fn mr(&self, gid: Gid, rkey: u32) -> Option<&MemoryRegion> {
        self.node(gid).ok()?.mrs.get(&rkey)
    }

    pub fn create_dct_target(&mut self, gid: Gid, key: u64) -> Result<DctTarget, NicError> {
        let node = self.node_mut(gid)?;
        let num = node.next_dct;
        self.create_dct_target_with(gid, num, key)
    }

    pub fn create_dct_target_with(
        &mut self,
        gid: Gid,
        dct_num: u32,
        key: u64,
    ) -> Result<DctTarget, NicError> {
        let node = self.node_mut(gid)?;
        if node.dcts.contains_key(&dct_num) {
            return Err(NicError::DuplicateDct(dct_num));
        }
        node.next_dct = node.next_dct.max(dct_num + 1);
        let target = DctTarget {
            dct_num,
            dct_key: key,
            owner: gid,
        };
        node.dcts.insert(
            dct_num,
            DctState {
                target,
                recv_buffers: VecDeque::new(),
            },
        );
        Ok(target)
    }

    // ----- receive side ---------------------------------------------------

    pub fn post_recv(&mut self, qpn: Qpn, buf: RecvBuffer) -> Result<(), NicError> {
        if buf.len == 0 {
            return Err(NicError::Argument("zero-length receive buffer"));
        }
        let qp = self.qps.get_mut(&qpn).ok_or(NicError::UnknownQp(qpn))?;
        qp.recv_buffers.push_back(buf);
        Ok(())
    }

    pub fn post_dct_recv(&mut self, gid: Gid, dct_num: u32, buf: RecvBuffer) -> Result<(), NicError> {
        if buf.len == 0 {
            return Err(NicError::Argument("zero-length receive buffer"));
        }
        let node = self.node_mut(gid)?;
        let d = node.dcts.get_mut(&dct_num).ok_or(NicError::UnknownDct(dct_num))?;
        d.recv_buffers.push_back(buf);
        Ok(())
    }

    pub fn posted_recv_count(&self, target: RecvTarget, gid: Gid) -> usize {
        match target {
            RecvTarget::Qp(q) => self.qps.get(&q).map(|q| q.recv_buffers.len()).unwrap_or(0),
            RecvTarget::Dct(n) => self
                .node(gid)
                .ok()
                .and_then(|node| node.dcts.get(&n))
                .map(|d| d.recv_buffers.len())
                .unwrap_or(0),
        }
    }

    pub fn poll_recv(&mut self, gid: Gid) -> Option<RecvCompletion> {
        self.node_mut(gid).ok()?.recv_cq.pop_front()
    }

    pub fn recv_pending(&self, gid: Gid) -> usize {
        self.node(gid).map(|n| n.recv_cq.len()).unwrap_or(0)
    }

    // ----- send side ------------------------------------------------------

    /// Posts `wrs` in order. Malformed requests and send-queue overflow put the
    /// QP into ERR; everything after the offending request is flushed.
    pub fn post_send(&mut self, qpn: Qpn, wrs: Vec<WorkRequest>) -> Result<(), NicError> {
        let now = self.clock.now();
        if !self.qps.contains_key(&qpn) {
            return Err(NicError::UnknownQp(qpn));
        }
        let mut immediate = Vec::new();
        for wr in wrs {
            let qp = self.qps.get(&qpn).expect("checked");
            let seq = qp.next_seq;
            let state = qp.state;
            let kind = qp.kind;
            let overflow = qp.uncomp_cnt() >= qp.depths.sq as u64;
            let doomed = qp.error_pending || state == QpState::Err;
            let node_gid = qp.node;

            let verdict = if doomed {
                Some(WcStatus::FlushErr)
            } else if overflow {
                Some(WcStatus::OverflowErr)
            } else if !(state == QpState::Rts || (kind == QpKind::Dc && state == QpState::Init)) {
                Some(WcStatus::LocErr)
            } else {
                self.local_check(node_gid, kind, &wr).err()
            };

            let qp = self.qps.get_mut(&qpn).expect("checked");
            qp.next_seq += 1;
            match verdict {
                Some(status) => {
                    if status != WcStatus::FlushErr {
                        qp.error_pending = true;
                    }
                    qp.inflight.insert(
                        seq,
                        InFlight {
                            wr,
                            status: Some(status),
                            done: true,
                            byte_len: 0,
                            read_data: None,
                            routing_fail: false,
                        },
                    );
                    immediate.push(seq);
                }
                None => {
                    let epoch = qp.epoch;
                    let arrive = self.launch(qpn, &wr, now);
                    let qp = self.qps.get_mut(&qpn).expect("checked");
                    qp.inflight.insert(
                        seq,
                        InFlight {
                            wr,
                            status: None,
                            done: false,
                            byte_len: 0,
                            read_data: None,
                            routing_fail: false,
                        },
                    );
                    self.clock
                        .schedule_at(arrive, NicEvent::Arrive { qp: qpn, epoch, seq });
                }
            }
        }
        if !immediate.is_empty() {
            self.deliver_ready(qpn);
        }
        Ok(())
    }

    fn local_check(&self, gid: Gid, kind: QpKind, wr: &WorkRequest) -> Result<(), WcStatus> {
        match wr.op {
            Opcode::Read | Opcode::Write => {
                if wr.remote.is_none() {
                    return Err(WcStatus::LocErr);
                }
            }
            Opcode::Send => {
                if wr.remote.is_some() {
                    return Err(WcStatus::LocErr);
                }
            }
            Opcode::Unsupported(_) => return Err(WcStatus::LocErr),
        }
        if kind == QpKind::Dc && wr.dct_route.is_none() {
            return Err(WcStatus::LocErr);
        }
        if wr.local.len > 0 {
            let node = self.node(gid).map_err(|_| WcStatus::LocErr)?;
            let need_write = wr.op == Opcode::Read;
            let ok = node.mrs.values().any(|mr| {
                mr.valid
                    && mr.covers(wr.local.addr, wr.local.len as u64)
                    && (!need_write || mr.perms.write)
            });
            if !ok {
                return Err(WcStatus::LocErr);
            }
        }
        Ok(())
    }

    /// Computes when the request reaches the responder and charges pipeline occupancy.
    fn launch(&mut self, qpn: Qpn, wr: &WorkRequest, now: Nanos) -> Nanos {
        let (src, kind) = {
            let q = &self.qps[&qpn];
            (q.node, q.kind)
        };
        let dst = self.destination(qpn, wr);
        let reconnect = self.cost.dc_reconnect_ns;
        let nic_op = self.cost.nic_op_ns;
        let extra = if kind == QpKind::Dc { self.cost.dc_op_extra_ns } else { 0 };
        let fwd_bytes = match wr.op {
            Opcode::Write | Opcode::Send => wr.local.len as u64,
            _ => 0,
        };
        let fwd = self.cost.transfer_ns(fwd_bytes);
        let wire = self.latency(src, dst);

        let q = self.qps.get_mut(&qpn).expect("qp");
        let mut start = now.max(q.pipe_free);
        let mut reconnected = false;
        if kind == QpKind::Dc && q.dc_connected != Some(dst) {
            start += reconnect;
            q.dc_connected = Some(dst);
            reconnected = true;
        }
        let n = &mut self.nodes[self.index[&src]];
        let issue = start.max(n.nic_free);
        n.nic_free = issue + nic_op;
        let q = self.qps.get_mut(&qpn).expect("qp");
        q.pipe_free = issue;
        if reconnected {
            self.tap.dc_reconnects += 1;
            self.record(TraceKind::Reconnect, src, dst, Some(qpn));
        }
        issue + nic_op + extra + wire + fwd
    }

    fn destination(&self, qpn: Qpn, wr: &WorkRequest) -> Gid {
        let q = &self.qps[&qpn];
        match q.kind {
            QpKind::Rc => q.peer.map(|p| p.gid).unwrap_or(q.node),
            QpKind::Dc => wr.dct_route.map(|r| r.node).unwrap_or(q.node),
        }
    }

    // ----- event processing -----------------------------------------------

    pub fn next_event_time(&self) -> Option<Nanos> {
        self.clock.peek_time()
    }

    pub fn is_idle(&self) -> bool {
        self.clock.is_idle()
    }

    /// Advances the clock to `t` (no events may be skipped).
    pub fn advance_to(&mut self, t: Nanos) {
        self.clock.advance_to(t);
    }

    /// Fires the next NIC event. Returns false if none is pending.
    pub fn step(&mut self) -> bool {
        let Some((_, ev)) = self.clock.pop() else {
            return false;
        };
        match ev {
            NicEvent::Arrive { qp, epoch, seq } => self.on_arrive(qp, epoch, seq),
            NicEvent::Complete { qp, epoch, seq } => self.on_complete(qp, epoch, seq),
        }
        true
    }

    /// Runs NIC events until the queue is empty. Returns the final time.
    pub fn run_until_idle(&mut self) -> Nanos {
        let budget = self.cost.event_budget;
        let mut n = 0u64;
        while self.step() {
            n += 1;
            assert!(n <= budget, "fabric event budget exhausted");
        }
        self.clock.now()
    }

    /// Runs NIC events with fire time <= `t`, then advances the clock to `t`.
    pub fn run_until(&mut self, t: Nanos) {
        while self.next_event_time().is_some_and(|x| x <= t) {
            self.step();
        }
        if t > self.clock.now() {
            self.clock.advance_to(t);
        }
    }

    fn on_arrive(&mut self, qpn: Qpn, epoch: u32, seq: u64) {
        let Some(q) = self.qps.get(&qpn) else { return };
        if q.epoch != epoch {
            return;
        }
        let src = q.node;
        let kind = q.kind;
        let remote_qpn = q.remote_qpn;
        let wr = q.inflight[&seq].wr.clone();
        let dst = self.destination(qpn, &wr);
        let now = self.clock.now();

        let nic_op = self.cost.nic_op_ns;
        let dsti = match self.index.get(&dst) {
            Some(&i) => i,
            None => {
                self.finish(qpn, seq, WcStatus::RemAccessErr, 0, None, now + self.latency(src, src));
                return;
            }
        };
        let serve = now.max(self.nodes[dsti].nic_free);
        self.nodes[dsti].nic_free = serve + nic_op;
        let base = serve + nic_op + self.cost.data_op_base_ns;
        let back = self.latency(dst, src);

        match wr.op {
            Opcode::Read => self.tap.reads += 1,
            Opcode::Write => self.tap.writes += 1,
            Opcode::Send => self.tap.sends += 1,
            Opcode::Unsupported(_) => {}
        }
        if wr.op == Opcode::Read && self.nodes[dsti].is_meta {
            self.tap.meta_reads += 1;
        }
        let tk = match wr.op {
            Opcode::Read => TraceKind::Read,
            Opcode::Write => TraceKind::Write,
            _ => TraceKind::Send,
        };
        self.record(tk, src, dst, Some(qpn));

        // DCT routing check
        if kind == QpKind::Dc {
            let route = wr.dct_route.expect("checked at post");
            let ok = self.nodes[dsti]
                .dcts
                .get(&route.dct_num)
                .is_some_and(|d| d.target.dct_key == route.dct_key);
            if !ok {
                if let Some(f) = self.qps.get_mut(&qpn).and_then(|q| q.inflight.get_mut(&seq)) {
                    f.routing_fail = true;
                }
                self.finish(qpn, seq, WcStatus::RemAccessErr, 0, None, base + back);
                return;
            }
        }

        match wr.op {
            Opcode::Read | Opcode::Write => {
                let r = wr.remote.expect("checked at post");
                let len = wr.local.len as u64;
                let need_write = wr.op == Opcode::Write;
                if !self.remote_access_ok(dsti, r.rkey, r.addr, len, need_write) {
                    self.finish(qpn, seq, WcStatus::RemAccessErr, 0, None, base + back);
                    return;
                }
                if wr.op == Opcode::Write {
                    let data = self.nodes[self.index[&src]].memory.read(wr.local.addr, len);
                    self.nodes[dsti].memory.write(r.addr, &data);
                    self.finish(qpn, seq, WcStatus::Ok, wr.local.len, None, base + back);
                } else {
                    let data = self.nodes[dsti].memory.read(r.addr, len);
                    let t = base + self.cost.transfer_ns(len) + back;
                    self.finish(qpn, seq, WcStatus::Ok, wr.local.len, Some(data), t);
                }
            }
            Opcode::Send => {
                let len = wr.local.len as u64;
                let data = self.nodes[self.index[&src]].memory.read(wr.local.addr, len);
                let target = match (kind, wr.dct_route, remote_qpn) {
                    (QpKind::Dc, Some(r), _) => RecvTarget::Dct(r.dct_num),
                    (QpKind::Rc, _, Some(rq)) => RecvTarget::Qp(rq),
                    _ => {
                        self.finish(qpn, seq, WcStatus::RemAccessErr, 0, None, base + back);
                        return;
                    }
                };
                let buf = match target {
                    RecvTarget::Dct(n) => self.nodes[dsti]
                        .dcts
                        .get_mut(&n)
                        .and_then(|d| d.recv_buffers.pop_front()),
                    RecvTarget::Qp(rq) => self
                        .qps
                        .get_mut(&rq)
                        .filter(|q| q.node == dst)
                        .and_then(|q| q.recv_buffers.pop_front()),
                };
                let Some(buf) = buf else {
                    self.finish(qpn, seq, WcStatus::RnrErr, 0, None, base + back);
                    return;
                };
                if buf.len < wr.local.len {
                    self.finish(qpn, seq, WcStatus::RemAccessErr, 0, None, base + back);
                    return;
                }
                self.nodes[dsti].memory.write(buf.addr, &data);
                self.nodes[dsti].recv_cq.push_back(RecvCompletion {
                    target,
                    buf,
                    src,
                    imm: wr.imm,
                    byte_len: wr.local.len,
                    data,
                    at: now,
                });
                if let Some(ws) = self.recv_waiters.remove(&dst) {
                    ws.into_iter().for_each(Waker::wake);
                }
                self.finish(qpn, seq, WcStatus::Ok, wr.local.len, None, base + back);
            }
            Opcode::Unsupported(_) => unreachable!("rejected at post"),
        }
    }

    fn remote_access_ok(&self, dsti: usize, rkey: u32, addr: u64, len: u64, write: bool) -> bool {
        let node = &self.nodes[dsti];
        if rkey == KERNEL_RKEY {
            return len == 0
                || node
                    .mrs
                    .values()
                    .any(|mr| mr.valid && mr.covers(addr, len) && (!write || mr.perms.write));
        }
        match node.mrs.get(&rkey) {
            Some(mr) => {
                mr.valid
                    && mr.covers(addr, len)
                    && if write { mr.perms.write } else { mr.perms.read }
            }
            None => false,
        }
    }

    fn finish(
        &mut self,
        qpn: Qpn,
        seq: u64,
        status: WcStatus,
        byte_len: u32,
        read_data: Option<Vec<u8>>,
        at: Nanos,
    ) {
        let q = self.qps.get_mut(&qpn).expect("qp");
        let epoch = q.epoch;
        let f = q.inflight.get_mut(&seq).expect("inflight");
        f.status = Some(status);
        f.byte_len = byte_len;
        f.read_data = read_data;
        self.clock
            .schedule_at(at, NicEvent::Complete { qp: qpn, epoch, seq });
    }

    fn on_complete(&mut self, qpn: Qpn, epoch: u32, seq: u64) {
        let Some(q) = self.qps.get_mut(&qpn) else { return };
        if q.epoch != epoch {
            return;
        }
        if let Some(f) = q.inflight.get_mut(&seq) {
            f.done = true;
        }
        self.deliver_ready(qpn);
    }

    /// Delivers finished requests in post order, entering ERR on the first error.
    fn deliver_ready(&mut self, qpn: Qpn) {
        let mut woke = false;
        loop {
            let q = self.qps.get_mut(&qpn).expect("qp");
            let seq = q.next_to_deliver;
            let ready = q.inflight.get(&seq).is_some_and(|f| f.done);
            if !ready {
                break;
            }
            let f = q.inflight.remove(&seq).expect("present");
            q.next_to_deliver += 1;
            let status = f.status.unwrap_or(WcStatus::Ok);
            let src = q.node;
            if let Some(data) = f.read_data {
                if status == WcStatus::Ok {
                    let i = self.index[&src];
                    self.nodes[i].memory.write(f.wr.local.addr, &data);
                }
            }
            let q = self.qps.get_mut(&qpn).expect("qp");
            let is_error = status != WcStatus::Ok;
            if f.wr.signaled || is_error {
                if q.cq.len() >= q.depths.cq as usize {
                    // completion queue overflow: the entry is lost and the QP errs
                    q.state = QpState::Err;
                    q.ever_errored = true;
                    self.flush_all(qpn, WcStatus::OverflowErr);
                    woke = true;
                    break;
                }
                let slots = seq + 1 - q.claimed_upto;
                q.claimed_upto = seq + 1;
                q.cq.push_back(Completion {
                    wr_id: f.wr.wr_id,
                    status,
                    byte_len: f.byte_len,
                    opcode: f.wr.op,
                    qpn,
                    slots_freed: slots,
                });
                woke = true;
            }
            let enters_err = is_error
                && status != WcStatus::FlushErr
                && !f.routing_fail
                && status != WcStatus::RnrErr;
            if enters_err && q.state != QpState::Err {
                q.state = QpState::Err;
                q.ever_errored = true;
                q.error_pending = false;
                self.flush_all(qpn, WcStatus::FlushErr);
                break;
            }
        }
        if woke {
            if let Some(ws) = self.cq_waiters.remove(&qpn) {
                ws.into_iter().for_each(Waker::wake);
            }
        }
    }

    /// Flushes every undelivered request of an ERR QP (in post order).
    fn flush_all(&mut self, qpn: Qpn, status: WcStatus) {
        let q = self.qps.get_mut(&qpn).expect("qp");
        q.epoch += 1;
        let pending: Vec<(u64, InFlight)> = std::mem::take(&mut q.inflight).into_iter().collect();
        for (seq, f) in pending {
            let slots = seq + 1 - q.claimed_upto;
            q.claimed_upto = seq + 1;
            q.next_to_deliver = seq + 1;
            q.cq.push_back(Completion {
                wr_id: f.wr.wr_id,
                status: if status == WcStatus::OverflowErr { WcStatus::FlushErr } else { status },
                byte_len: 0,
                opcode: f.wr.op,
                qpn,
                slots_freed: slots,
            });
        }
        q.pipe_free = self.clock.now();
        if let Some(ws) = self.cq_waiters.remove(&qpn) {
            ws.into_iter().for_each(Waker::wake);
        }
    }

    /// Pops the oldest delivered completion and releases the send-queue slots it covers.
    pub fn poll_cq(&mut self, qpn: Qpn) -> Option<Completion> {
        let q = self.qps.get_mut(&qpn)?;
        let c = q.cq.pop_front()?;
        q.freed += c.slots_freed;
        Some(c)
    }

    pub fn cq_len(&self, qpn: Qpn) -> usize {
        self.qps.get(&qpn).map(|q| q.cq.len()).unwrap_or(0)
    }

    // ----- wakeups ----------------------------------------------------------

    pub fn wait_cq(&mut self, qpn: Qpn, waker: Waker) {
        self.cq_waiters.entry(qpn).or_default().push(waker);
    }

    pub fn wait_recv(&mut self, gid: Gid, waker: Waker) {
        self.recv_waiters.entry(gid).or_default().push(waker);
    }

    /// Connectionless datagram accounting (handshakes, RPC). Returns arrival time.
    pub fn datagram(&mut self, src: Gid, dst: Gid, bytes: u64) -> Nanos {
        self.tap.datagrams += 1;
        self.record(TraceKind::Datagram, src, dst, None);
        self.clock.now() + 2 * self.cost.nic_op_ns + self.latency(src, dst) + self.cost.transfer_ns(bytes)
    }
}

#[cfg(test)]
mod tests;
