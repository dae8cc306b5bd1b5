//! The simulated cluster: fabric, meta server, and one kernel per node.

use std::collections::{BTreeMap, HashMap};
use std::task::Waker;

use crate::addr::{Gid, NodeId};
use crate::config::CostModel;
use crate::meta::{MetaServerState, RpcWorker};
use crate::nic::{Fabric, MemoryRegion, Perms, QpKind, Qpn, QueueDepths};
use crate::vplane::{Kernel, Vqp, VqpId};

/// Base of the per-node kernel-owned address range.
pub const KERNEL_BASE: u64 = 1 << 40;
pub const KERNEL_LEN: u64 = 1 << 36;
/// Base of the meta server's index region.
pub const META_BASE: u64 = 0x1000_0000;

/// What a blocked task is waiting on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WaitKey {
    Cq(Qpn),
    Recv(Gid),
    Inbox(VqpId),
    Vqp(VqpId),
    Lookup(Gid),
    Control(u64),
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub cost: CostModel,
    /// Worker nodes, gids 1..=nodes.
    pub nodes: u32,
    /// Boot a kernel (DC pool, DCT target, meta QP) on every worker node.
    pub kernels: bool,
}

impl WorldConfig {
    pub fn new(cost: CostModel, nodes: u32) -> Self {
        Self {
            cost,
            nodes,
            kernels: true,
        }
    }
}

pub struct World {
    pub fabric: Fabric,
    pub meta: MetaServerState,
    pub meta_node: Gid,
    pub meta_mr: MemoryRegion,
    pub rpc: RpcWorker,
    pub kernels: BTreeMap<Gid, Kernel>,
    pub vqps: BTreeMap<VqpId, Vqp>,
    pub(crate) next_vqp: u32,
    pub(crate) next_token: u64,
    /// Acknowledged control tokens (transfer notifications).
    pub(crate) control_done: std::collections::HashSet<u64>,
    waiters: HashMap<WaitKey, Vec<Waker>>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("fabric", &self.fabric)
            .field("kernels", &self.kernels.len())
            .field("vqps", &self.vqps.len())
            .finish()
    }
}

impl World {
    pub fn new(cfg: WorldConfig) -> Self {
        let cost = cfg.cost.clone();
        let mut fabric = Fabric::new(cost.clone());
        let meta_node = fabric.add_node(Gid::for_node(0));
        fabric.mark_meta_server(meta_node);
        let meta_mr = fabric
            .register_mr(meta_node, META_BASE, 1 << 24, Perms::RO)
            .expect("meta region");
        let mut w = World {
            fabric,
            meta: MetaServerState::new(cost.lookup_round_trips, cost.meta_entry_bytes),
            meta_node,
            meta_mr,
            rpc: RpcWorker::default(),
            kernels: BTreeMap::new(),
            vqps: BTreeMap::new(),
            next_vqp: 1,
            next_token: 1,
            control_done: Default::default(),
            waiters: HashMap::new(),
        };
        for n in 1..=cfg.nodes {
            let gid = w.fabric.add_node(Gid::for_node(n));
            w.fabric.set_latency(gid, meta_node, cost.meta_latency_ns);
            if cfg.kernels {
                w.boot_kernel(gid);
            }
        }
        w.fabric.reset_control_units();
        w
    }

    pub fn worker_gids(&self) -> Vec<Gid> {
        self.fabric
            .node_gids()
            .into_iter()
            .filter(|g| *g != self.meta_node)
            .collect()
    }

    /// Boot-time kernel setup; not part of any measured path.
    fn boot_kernel(&mut self, gid: Gid) {
        let cost = self.fabric.cost.clone();
        let depths = QueueDepths::new(cost.sq_depth, cost.cq_depth, cost.rq_depth);
        let kmr = self
            .fabric
            .register_mr(gid, KERNEL_BASE, KERNEL_LEN, Perms::RW)
            .expect("kernel region");
        let target = self
            .fabric
            .create_dct_target(gid, 0x6b72_0000_0000 ^ gid.node_index() as u64)
            .expect("node dct target");
        let mut dc_pools = Vec::new();
        for _ in 0..cost.cpus_per_node {
            let mut qps = Vec::new();
            for _ in 0..cost.dc_pool_size {
                let (q, _) = self.fabric.create_qp(gid, QpKind::Dc, depths).expect("dc pool");
                qps.push(q);
            }
            dc_pools.push(qps);
        }
        let (meta_qp, _) = self.fabric.create_qp(gid, QpKind::Rc, depths).expect("meta qp");
        self.fabric
            .configure_qp(meta_qp, NodeId::new(self.meta_node, 0), None)
            .expect("meta qp configure");
        let (kqp, _) = self.fabric.create_qp(gid, QpKind::Dc, depths).expect("kernel qp");
        let kernel = Kernel::new(gid, &cost, dc_pools, target, meta_qp, kqp, kmr);
        self.kernels.insert(gid, kernel);
        self.meta.record_mr(gid, crate::nic::KERNEL_RKEY, KERNEL_BASE, KERNEL_LEN, Perms::RW);
        crate::vplane::post_kernel_buffers(self, gid);
    }

    pub fn kernel(&self, gid: Gid) -> &Kernel {
        self.kernels.get(&gid).expect("no kernel on node")
    }

    pub fn kernel_mut(&mut self, gid: Gid) -> &mut Kernel {
        self.kernels.get_mut(&gid).expect("no kernel on node")
    }

    pub fn vqp(&self, id: VqpId) -> &Vqp {
        self.vqps.get(&id).expect("unknown vqp")
    }

    pub fn vqp_mut(&mut self, id: VqpId) -> &mut Vqp {
        self.vqps.get_mut(&id).expect("unknown vqp")
    }

    pub fn token(&mut self) -> u64 {
        let t = self.next_token;
        self.next_token += 1;
        t
    }

    pub fn register(&mut self, key: WaitKey, waker: Waker) {
        match key {
            WaitKey::Cq(q) => self.fabric.wait_cq(q, waker),
            WaitKey::Recv(g) => self.fabric.wait_recv(g, waker),
            k => self.waiters.entry(k).or_default().push(waker),
        }
    }

    pub fn notify(&mut self, key: WaitKey) {
        if let Some(ws) = self.waiters.remove(&key) {
            ws.into_iter().for_each(Waker::wake);
        }
    }

    /// Fires one fabric event, then lets kernels absorb any inbound messages.
    pub fn step(&mut self) {
        self.fabric.step();
        let gids: Vec<Gid> = self
            .kernels
            .keys()
            .copied()
            .filter(|g| self.fabric.recv_pending(*g) > 0)
            .collect();
        for g in gids {
            crate::vplane::absorb_inbound(self, g);
        }
    }
}
