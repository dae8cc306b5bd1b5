//! Load spike: a burst of worker processes starts at t=0, each connects to
//! every storage node and then serves GETs (one-sided READs).

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use vqp_core::exec::join_all;
use vqp_core::nic::{Qpn, WcStatus};
use vqp_core::simcore::Nanos;
use vqp_core::vplane::{ops, VqpId};
use vqp_core::{Gid, NodeId, Sim};

use super::{raw_post_wait, rc_connect, rng, Cluster, SERVER_PORT, USER_LEN};
use crate::config::{Baseline, ScenarioConfig};
use crate::metrics::MetricRow;

/// Connections each worker opens to every storage node (one per serving
/// thread and index partition). Calibrated so LITE's startup lands near 1s.
pub const CONNS_PER_STORAGE: u64 = 11;
/// Gap between two GETs of one worker.
pub const THINK_NS: Nanos = 1_000_000;
pub const BUCKET_NS: Nanos = 100_000_000;
/// Simulated span of the timeline.
pub const HORIZON_NS: Nanos = 2_000_000_000;

#[derive(Clone, Copy)]
enum Conn {
    Raw(Qpn),
    Virt(VqpId),
}

#[derive(Default)]
struct Log {
    /// (completion time, latency)
    gets: Vec<(Nanos, Nanos)>,
    ready: Vec<Nanos>,
}

/// Timeline rows `<baseline>/t<ms>` per 100ms bucket (throughput and latency
/// of GETs completed in it), then `<baseline>/startup` whose samples are the
/// per-worker times at which all connections were up.
pub fn load_spike(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let cpus = cfg.cost.cpus_per_node as u64;
    let storage = cfg.servers;
    let computes = cfg.clients.div_ceil(cpus);
    let c = Cluster::new(&cfg.cost, storage + computes, cfg.baseline == Baseline::Krcore);
    let stores: Rc<Vec<Gid>> = Rc::new(c.nodes[..storage as usize].to_vec());
    if cfg.baseline == Baseline::Krcore {
        for s in stores.iter() {
            c.bind_server(*s);
        }
    }
    let log = Rc::new(RefCell::new(Log::default()));
    let rkeys: Rc<Vec<u32>> = Rc::new(stores.iter().map(|g| c.rkey(*g)).collect());
    let len = cfg.payload.clamp(1, USER_LEN / 4);

    for k in 0..cfg.clients {
        let sim = c.sim.clone();
        let node = c.nodes[(storage + k / cpus) as usize];
        let cpu = (k % cpus) as usize;
        let stores = stores.clone();
        let rkeys = rkeys.clone();
        let log = log.clone();
        let baseline = cfg.baseline;
        let start = (k + 1) * cfg.process_start_ns;
        let mut r = rng(cfg.seed, k + 1);
        c.sim.spawn(async move {
            sim.sleep_until(start).await;
            let conns = connect_all(&sim, baseline, node, cpu, &stores).await;
            log.borrow_mut().ready.push(sim.now());
            let local = USER_BASE_OFF + k * len.next_multiple_of(64);
            let per = CONNS_PER_STORAGE as usize;
            let mut id = 0u64;
            while sim.now() < HORIZON_NS {
                sim.sleep(THINK_NS).await;
                let s = r.gen_range(0..stores.len());
                let conn = conns[s * per + r.gen_range(0..per)];
                let remote = r.gen_range(0..(USER_LEN / 2) / len) * len;
                id += 1;
                let wr = vqp_core::nic::WorkRequest::read(
                    id,
                    vqp_core::nic::LocalBuf {
                        addr: super::USER_BASE + local,
                        len: len as u32,
                    },
                    vqp_core::nic::RemoteBuf {
                        addr: super::USER_BASE + USER_LEN / 2 + remote,
                        rkey: rkeys[s],
                    },
                );
                let t = sim.now();
                match conn {
                    Conn::Raw(q) => {
                        // LITE GETs go through its kernel module
                        let d = if baseline == Baseline::Lite { sim.with(|w| w.fabric.cost.syscall_half_ns()) } else { 0 };
                        sim.sleep(d).await;
                        raw_post_wait(&sim, q, vec![wr]).await;
                        sim.sleep(d).await;
                    }
                    Conn::Virt(vq) => {
                        ops::post_send(&sim, vq, vec![wr]).await.expect("get");
                        let c = ops::wait_completion(&sim, vq).await;
                        assert_eq!(c.status, WcStatus::Ok);
                    }
                }
                log.borrow_mut().gets.push((sim.now(), sim.now() - t));
            }
        });
    }
    c.sim.run_until_idle().expect("simulation");

    let log = log.borrow();
    let name = cfg.scenario.name();
    let b = cfg.baseline.name();
    let buckets = HORIZON_NS.div_ceil(BUCKET_NS);
    let mut per_bucket: Vec<Vec<u64>> = vec![Vec::new(); buckets as usize];
    for (t, lat) in &log.gets {
        if let Some(v) = per_bucket.get_mut((t / BUCKET_NS) as usize) {
            v.push(*lat);
        }
    }
    let mut rows: Vec<MetricRow> = per_bucket
        .iter()
        .enumerate()
        .map(|(i, lat)| MetricRow {
            throughput_per_s: lat.len() as f64 * 1e9 / BUCKET_NS as f64,
            ..MetricRow::from_samples(
                name,
                &format!("{b}/t{:04}", i as u64 * BUCKET_NS / 1_000_000),
                cfg.clients,
                cfg.payload,
                lat,
            )
        })
        .collect();
    rows.push(MetricRow {
        wire_ops: c.wire_ops(),
        mem_bytes: c.mem_bytes(),
        ..MetricRow::from_samples(name, &format!("{b}/startup"), cfg.clients, cfg.payload, &log.ready)
    });
    rows
}

/// Local buffers start past the first megabyte so they never overlap remote reads.
const USER_BASE_OFF: u64 = 1 << 20;

/// Opens [`CONNS_PER_STORAGE`] connections to every storage node, ordered by
/// storage node.
async fn connect_all(sim: &Sim, baseline: Baseline, node: Gid, cpu: usize, stores: &[Gid]) -> Vec<Conn> {
    let targets: Vec<Gid> = stores
        .iter()
        .flat_map(|s| std::iter::repeat_n(*s, CONNS_PER_STORAGE as usize))
        .collect();
    match baseline {
        Baseline::Krcore => {
            let ctrl = sim.with(|w| w.fabric.cost.ctrl_syscall_ns);
            sim.sleep(ctrl).await;
            let reqs: Vec<(VqpId, NodeId)> = sim.with(|w| {
                targets
                    .iter()
                    .map(|s| {
                        let vq = ops::vqp_create_now(w, node, cpu).expect("vqp");
                        (vq, NodeId::new(*s, SERVER_PORT))
                    })
                    .collect()
            });
            for r in ops::qconnect_batch(sim, &reqs).await {
                r.expect("connect");
            }
            reqs.into_iter().map(|(vq, _)| Conn::Virt(vq)).collect()
        }
        Baseline::Verbs | Baseline::Lite => {
            if baseline == Baseline::Verbs {
                let t = sim.with(|w| w.fabric.init_context(node));
                sim.sleep_until(t).await;
            }
            join_all(
                targets
                    .iter()
                    .map(|s| async move { Conn::Raw(rc_connect(sim, node, *s, false).await.0) })
                    .collect(),
            )
            .await
        }
    }
}
