//! Shared harness for the property suites: a small cluster, random request
//! streams, and the safety / equivalence / messaging probes. Used by the
//! integration tests and by the acceptance runner.

pub mod equivalence;
pub mod messaging;
pub mod safety;
pub mod streams;

use crate::nic::{LocalBuf, MemoryRegion, Perms, RemoteBuf, WorkRequest};
use crate::vplane::ops;
use crate::{CostModel, Gid, NodeId, Sim, World, WorldConfig};

pub const USER_BASE: u64 = 0x100_0000;
pub const USER_LEN: u64 = 1 << 24;

pub struct Cluster {
    pub sim: Sim,
    pub nodes: Vec<Gid>,
    /// One user MR per node, same index as `nodes`.
    pub mrs: Vec<MemoryRegion>,
}

pub fn cluster_with(cost: CostModel, n: u32) -> Cluster {
    let mut w = World::new(WorldConfig::new(cost, n));
    let nodes = w.worker_gids();
    let mrs = nodes
        .iter()
        .map(|g| ops::register_mr_now(&mut w, *g, USER_BASE, USER_LEN, Perms::RW).expect("setup"))
        .collect();
    Cluster {
        sim: Sim::new(w),
        nodes,
        mrs,
    }
}

pub fn cluster(n: u32) -> Cluster {
    cluster_with(CostModel::default(), n)
}

impl Cluster {
    pub fn addr(&self, i: usize, port: u16) -> NodeId {
        NodeId::new(self.nodes[i], port)
    }

    pub fn read(&self, wr_id: u64, target: usize, off: u64, len: u32) -> WorkRequest {
        WorkRequest::read(
            wr_id,
            LocalBuf {
                addr: USER_BASE + 0x80_0000 + off,
                len,
            },
            RemoteBuf {
                addr: USER_BASE + off,
                rkey: self.mrs[target].rkey,
            },
        )
    }

    pub fn write(&self, wr_id: u64, target: usize, off: u64, len: u32) -> WorkRequest {
        WorkRequest::write(
            wr_id,
            LocalBuf {
                addr: USER_BASE + off,
                len,
            },
            RemoteBuf {
                addr: USER_BASE + 0x40_0000 + off,
                rkey: self.mrs[target].rkey,
            },
        )
    }
}

impl Cluster {
    /// Creates a VQP on node `i` bound to `port` (no simulated time charged).
    pub fn server(&self, i: usize, port: u16) -> crate::vplane::VqpId {
        self.sim.with(|w| {
            let vq = ops::vqp_create_now(w, self.nodes[i], 0).expect("setup");
            ops::qbind_now(w, vq, port).expect("setup");
            vq
        })
    }
}

/// Small queues, one DC QP per node and no background promotion, so every
/// VQP of a node shares one physical QP.
pub fn shared_qp_cost() -> CostModel {
    CostModel {
        sq_depth: 16,
        cq_depth: 16,
        rq_depth: 16,
        cpus_per_node: 1,
        dc_pool_size: 1,
        kernel_backlog: 4,
        bgd_threshold: u64::MAX / 2,
        ..CostModel::default()
    }
}
