//! Scenario drivers. Each builds one simulation per baseline and reports
//! [`MetricRow`]s; all randomness comes from the configured seed.

mod connect;
mod data;
mod memory;
mod spike;
mod transfer_demo;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqp_core::nic::{
    LocalBuf, MemoryRegion, Perms, QpKind, Qpn, QueueDepths, RemoteBuf, WcStatus, WorkRequest,
};
use vqp_core::vplane::ops;
use vqp_core::world::WaitKey;
use vqp_core::{CostModel, Gid, NodeId, Sim, World, WorldConfig};

use crate::config::{Scenario, ScenarioConfig, ScenarioError};
use crate::metrics::MetricRow;

pub use memory::{krcore_model_bytes, lite_model_bytes, MODEL_DC_QPS, VQP_STATE_BYTES};

pub const USER_BASE: u64 = 0x100_0000;
pub const USER_LEN: u64 = 1 << 30;
/// Port every server binds.
pub const SERVER_PORT: u16 = 7;

pub fn run(cfg: &ScenarioConfig) -> Result<Vec<MetricRow>, ScenarioError> {
    cfg.validate()?;
    Ok(match cfg.scenario {
        Scenario::SingleConnect => connect::single_connect(cfg),
        Scenario::FullMesh => connect::full_mesh(cfg),
        Scenario::DataPath => data::data_path(cfg),
        Scenario::PoolSweep => data::pool_sweep(cfg),
        Scenario::TailLatency => data::tail_latency(cfg),
        Scenario::LoadSpike => spike::load_spike(cfg),
        Scenario::MemoryModel => memory::memory_model(cfg),
        Scenario::TransferDemo => transfer_demo::transfer_demo(cfg),
    })
}

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A simulated cluster: `nodes` workers, each with one large user MR.
pub(crate) struct Cluster {
    pub sim: Sim,
    pub nodes: Vec<Gid>,
    pub mrs: Vec<MemoryRegion>,
}

impl Cluster {
    pub fn new(cost: &CostModel, nodes: u64, kernels: bool) -> Self {
        let mut w = World::new(WorldConfig {
            cost: cost.clone(),
            nodes: nodes as u32,
            kernels,
        });
        let gids = w.worker_gids();
        let mrs = gids
            .iter()
            .map(|g| ops::register_mr_now(&mut w, *g, USER_BASE, USER_LEN, Perms::RW).expect("user mr"))
            .collect();
        Self {
            sim: Sim::new(w),
            nodes: gids,
            mrs,
        }
    }

    pub fn rkey(&self, gid: Gid) -> u32 {
        self.mrs[gid.node_index() as usize - 1].rkey
    }

    /// Wire operations seen by the fabric tap so far.
    pub fn wire_ops(&self) -> u64 {
        self.sim.with(|w| {
            let t = &w.fabric.tap;
            t.reads + t.writes + t.sends + t.datagrams
        })
    }

    pub fn mem_bytes(&self) -> u64 {
        self.sim
            .with(|w| self.nodes.iter().map(|g| w.fabric.mem_bytes(*g)).sum())
    }

    /// Turns off background promotion so a run keeps the transport it chose.
    pub fn disable_bgd(&self) {
        self.sim.with(|w| w.kernels.values_mut().for_each(|k| k.bgd.enabled = false));
    }

    /// Binds a server VQP on `gid` at [`SERVER_PORT`].
    pub fn bind_server(&self, gid: Gid) {
        self.sim.with(|w| {
            let vq = ops::vqp_create_now(w, gid, 0).expect("server vqp");
            ops::qbind_now(w, vq, SERVER_PORT).expect("server port");
        });
    }

    pub fn read(&self, wr_id: u64, local_off: u64, target: Gid, remote_off: u64, len: u32) -> WorkRequest {
        WorkRequest::read(
            wr_id,
            LocalBuf {
                addr: USER_BASE + local_off,
                len,
            },
            RemoteBuf {
                addr: USER_BASE + remote_off,
                rkey: self.rkey(target),
            },
        )
    }
}

pub(crate) fn depths(cost: &CostModel) -> QueueDepths {
    QueueDepths::new(cost.sq_depth, cost.cq_depth, cost.rq_depth)
}

/// User-space RC connection as the verbs and LITE baselines set it up:
/// optional driver init, QP creation on both ends, then configure and
/// handshake. Returns (client qp, server qp).
pub(crate) async fn rc_connect(sim: &Sim, client: Gid, server: Gid, init: bool) -> (Qpn, Qpn) {
    if init {
        let t = sim.with(|w| w.fabric.init_context(client));
        sim.sleep_until(t).await;
    }
    let (qa, qb, ready) = sim.with(|w| {
        let d = depths(&w.fabric.cost);
        let (qa, ta) = w.fabric.create_qp(client, QpKind::Rc, d).expect("client qp");
        let (qb, tb) = w.fabric.create_qp(server, QpKind::Rc, d).expect("server qp");
        (qa, qb, ta.max(tb))
    });
    sim.sleep_until(ready).await;
    let ready = sim.with(|w| {
        let ra = w.fabric.configure_qp(qa, NodeId::new(server, 0), Some(qb)).expect("configure");
        let rb = w.fabric.configure_qp(qb, NodeId::new(client, 0), Some(qa)).expect("configure");
        ra.max(rb)
    });
    sim.sleep_until(ready).await;
    (qa, qb)
}

/// Posts `wrs` on a raw QP and waits for the completion of the last one.
pub(crate) async fn raw_post_wait(sim: &Sim, qp: Qpn, wrs: Vec<WorkRequest>) {
    let last = wrs.last().expect("non-empty").wr_id;
    sim.with(|w| w.fabric.post_send(qp, wrs).expect("raw post"));
    loop {
        sim.wait_until(WaitKey::Cq(qp), move |w| w.fabric.cq_len(qp) > 0).await;
        let done = sim.with(|w| {
            let mut hit = false;
            while let Some(c) = w.fabric.poll_cq(qp) {
                assert_eq!(c.status, WcStatus::Ok, "raw request failed: {c:?}");
                hit |= c.wr_id == last;
            }
            hit
        });
        if done {
            return;
        }
    }
}

pub(crate) fn per_second(count: u64, elapsed_ns: u64) -> f64 {
    if elapsed_ns == 0 {
        0.0
    } else {
        count as f64 * 1e9 / elapsed_ns as f64
    }
}
