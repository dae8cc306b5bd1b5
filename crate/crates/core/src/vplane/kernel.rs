use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::addr::{Gid, NodeId};
use crate::bgd::Bgd;
use crate::config::CostModel;
use crate::meta::MrEntry;
use crate::nic::{DctTarget, MemoryRegion, QpKind, Qpn};
use crate::simcore::Nanos;
use crate::world::KERNEL_BASE;

use super::VqpId;

/// Send-side staging ring for outgoing message headers and small payloads.
pub(crate) const SEND_RING_BASE: u64 = KERNEL_BASE;
pub(crate) const SEND_RING_SLOTS: u64 = 4096;
/// Receive buffers pre-posted by the kernel.
pub(crate) const RECV_BASE: u64 = KERNEL_BASE + (1 << 34);
/// Landing area for meta-server READs and transfer fences.
pub(crate) const SCRATCH_BASE: u64 = KERNEL_BASE + (1 << 35);
pub(crate) const FIRST_EPHEMERAL_PORT: u16 = 49152;

/// One CPU's share of the hybrid pool.
#[derive(Debug, Default)]
pub struct SubPool {
    pub dc: Vec<Qpn>,
    dc_next: usize,
    pub rc: BTreeMap<Gid, Vec<Qpn>>,
    rc_next: BTreeMap<Gid, usize>,
}

impl SubPool {
    pub fn next_dc(&mut self) -> Qpn {
        assert!(!self.dc.is_empty(), "DC sub-pool is empty");
        let q = self.dc[self.dc_next % self.dc.len()];
        self.dc_next = (self.dc_next + 1) % self.dc.len();
        q
    }

    pub fn next_rc(&mut self, peer: Gid) -> Option<Qpn> {
        let list = self.rc.get(&peer).filter(|l| !l.is_empty())?;
        let i = self.rc_next.entry(peer).or_insert(0);
        let q = list[*i % list.len()];
        *i = (*i + 1) % list.len();
        Some(q)
    }

    pub fn rc_count(&self) -> usize {
        self.rc.values().map(Vec::len).sum()
    }

    pub fn remove_rc(&mut self, qpn: Qpn) {
        for list in self.rc.values_mut() {
            list.retain(|q| *q != qpn);
        }
        self.rc.retain(|_, l| !l.is_empty());
    }
}

/// Software view of one physical QP.
#[derive(Clone, Debug)]
pub struct PhysState {
    pub kind: QpKind,
    pub cpu: usize,
    pub peer: Option<Gid>,
    /// The other end of an RC pair.
    pub pair: Option<Qpn>,
    pub uncomp_cnt: u64,
    /// min(sq, cq) depth.
    pub limit: u64,
    /// Slots of the current unsignaled run already released by an error completion.
    pub(crate) credit: u32,
    pub last_use: Nanos,
    pub users: BTreeSet<VqpId>,
    pub transfers_in_flight: u32,
    /// Kernel-held messages that arrived through this QP and are not yet consumed.
    pub held_msgs: u32,
    /// Sum of decoded comp_cnt values (slot conservation checks).
    pub decoded_total: u64,
    pub posted_total: u64,
}

impl PhysState {
    pub fn new(kind: QpKind, cpu: usize, peer: Option<Gid>, limit: u64) -> Self {
        Self {
            kind,
            cpu,
            peer,
            pair: None,
            uncomp_cnt: 0,
            limit,
            credit: 0,
            last_use: 0,
            users: BTreeSet::new(),
            transfers_in_flight: 0,
            held_msgs: 0,
            decoded_total: 0,
            posted_total: 0,
        }
    }

    pub fn free_slots(&self) -> u64 {
        self.limit.saturating_sub(self.uncomp_cnt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CachedMr {
    pub entry: MrEntry,
    pub cached_at: Nanos,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub meta_lookups: u64,
    pub mr_lookups: u64,
    pub drains: u64,
    pub copies: u64,
    pub copied_bytes: u64,
    pub zero_copy_reads: u64,
    pub dropped_msgs: u64,
    pub unattributed_errors: u64,
    pub transfers: u64,
    pub transfer_aborts: u64,
    pub promotions: u64,
    pub reclaims: u64,
}

#[derive(Debug)]
pub struct Kernel {
    pub gid: Gid,
    pub pools: Vec<SubPool>,
    pub phys: BTreeMap<Qpn, PhysState>,
    pub dccache: HashMap<NodeId, DctTarget>,
    pub mrstore: HashMap<(Gid, u32), CachedMr>,
    pub lease_ns: Nanos,
    /// Port -> VQP receiving on it.
    pub ports: BTreeMap<u16, VqpId>,
    pub node_target: DctTarget,
    pub meta_qp: Qpn,
    /// Kernel-private DC QP for zero-copy READs.
    pub kqp: Qpn,
    pub kernel_mr: MemoryRegion,
    pub(crate) lookups_in_flight: HashSet<NodeId>,
    pub(crate) mr_lookups_in_flight: HashSet<(Gid, u32)>,
    /// Completed kernel-internal request tokens (meta READs, zero-copy READs).
    pub(crate) kdone: HashMap<u64, crate::nic::WcStatus>,
    pub(crate) next_ephemeral: u16,
    pub(crate) send_ring_next: u64,
    pub(crate) scratch_next: u64,
    pub(crate) recv_next: u64,
    pub bgd: Bgd,
    pub stats: KernelStats,
    /// Test hook: swallow transfer notifications instead of acknowledging.
    pub drop_control: bool,
}

impl Kernel {
    pub(crate) fn new(
        gid: Gid,
        cost: &CostModel,
        dc_pools: Vec<Vec<Qpn>>,
        node_target: DctTarget,
        meta_qp: Qpn,
        kqp: Qpn,
        kernel_mr: MemoryRegion,
    ) -> Self {
        let limit = cost.sq_depth.min(cost.cq_depth) as u64;
        let mut phys = BTreeMap::new();
        let pools = dc_pools
            .into_iter()
            .enumerate()
            .map(|(cpu, qps)| {
                for q in &qps {
                    phys.insert(*q, PhysState::new(QpKind::Dc, cpu, None, limit));
                }
                SubPool {
                    dc: qps,
                    ..SubPool::default()
                }
            })
            .collect();
        Self {
            gid,
            pools,
            phys,
            dccache: HashMap::new(),
            mrstore: HashMap::new(),
            lease_ns: cost.lease_ns,
            ports: BTreeMap::new(),
            node_target,
            meta_qp,
            kqp,
            kernel_mr,
            lookups_in_flight: HashSet::new(),
            mr_lookups_in_flight: HashSet::new(),
            kdone: HashMap::new(),
            next_ephemeral: FIRST_EPHEMERAL_PORT,
            send_ring_next: 0,
            scratch_next: 0,
            recv_next: 0,
            bgd: Bgd::new(cost),
            stats: KernelStats::default(),
            drop_control: false,
        }
    }

    pub fn home_pool(&mut self, cpu: usize) -> &mut SubPool {
        let n = self.pools.len();
        &mut self.pools[cpu % n]
    }

    /// MRStore lookup; entries older than the lease are flushed first.
    pub fn cached_mr(&mut self, owner: Gid, rkey: u32, now: Nanos) -> Option<MrEntry> {
        let key = (owner, rkey);
        let e = *self.mrstore.get(&key)?;
        if now.saturating_sub(e.cached_at) > self.lease_ns {
            self.mrstore.remove(&key);
            return None;
        }
        Some(e.entry)
    }

    pub fn cache_mr(&mut self, owner: Gid, rkey: u32, entry: MrEntry, now: Nanos) {
        self.mrstore.insert(
            (owner, rkey),
            CachedMr {
                entry,
                cached_at: now,
            },
        );
    }

    /// Drops DCCache and MRStore entries (the "cleared caches" starting point).
    pub fn clear_caches(&mut self) {
        self.dccache.clear();
        self.mrstore.clear();
    }

    pub(crate) fn next_send_slot(&mut self, slot_bytes: u64) -> u64 {
        let i = self.send_ring_next % SEND_RING_SLOTS;
        self.send_ring_next += 1;
        SEND_RING_BASE + i * slot_bytes
    }

    pub(crate) fn next_scratch(&mut self, bytes: u64) -> u64 {
        // wraps every 64MiB; kernel reads never stay in flight that long
        let a = SCRATCH_BASE + (self.scratch_next % (1 << 26));
        self.scratch_next += bytes.max(64).next_multiple_of(64);
        a
    }

    pub(crate) fn alloc_ephemeral(&mut self) -> u16 {
        loop {
            let p = self.next_ephemeral;
            self.next_ephemeral = self.next_ephemeral.checked_add(1).unwrap_or(FIRST_EPHEMERAL_PORT);
            if !self.ports.contains_key(&p) {
                return p;
            }
        }
    }
}
