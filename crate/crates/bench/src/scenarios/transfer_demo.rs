//! One client stream that crosses the promotion threshold mid-run: the VQP
//! starts on the DC pool and is transferred to a fresh RC QP in the
//! background while requests keep flowing.

use vqp_core::nic::{QpKind, WcStatus};
use vqp_core::vplane::ops;
use vqp_core::NodeId;

use super::{per_second, raw_post_wait, rc_connect, Cluster, SERVER_PORT};
use crate::config::{Baseline, ScenarioConfig};
use crate::metrics::MetricRow;

pub const DEMO_REQUESTS: usize = 400;
/// Gap between requests so the background promotion overlaps the stream.
pub const DEMO_GAP_NS: u64 = 10_000;

/// krcore rows: `krcore/dc` and `krcore/rc` split by the transport each
/// request was posted on, then `krcore` for the whole stream. Other
/// baselines report one row over their raw RC QP.
pub fn transfer_demo(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let c = Cluster::new(&cfg.cost, 2, cfg.baseline == Baseline::Krcore);
    let (server, client) = (c.nodes[0], c.nodes[1]);
    let len = cfg.payload.max(1) as u32;
    let wrs: Vec<_> = (0..DEMO_REQUESTS)
        .map(|k| c.read(k as u64 + 1, 0, server, 1 << 20, len))
        .collect();
    let name = cfg.scenario.name();
    let sim = c.sim.clone();
    if cfg.baseline != Baseline::Krcore {
        let lite = cfg.baseline == Baseline::Lite;
        let (lat, elapsed) = c
            .sim
            .run(async move {
                let (q, _) = rc_connect(&sim, client, server, false).await;
                let d = if lite { sim.with(|w| w.fabric.cost.syscall_half_ns()) } else { 0 };
                let t0 = sim.now();
                let mut lat = Vec::new();
                for wr in wrs {
                    let t = sim.now();
                    sim.sleep(d).await;
                    raw_post_wait(&sim, q, vec![wr]).await;
                    sim.sleep(d).await;
                    lat.push(sim.now() - t);
                    sim.sleep(DEMO_GAP_NS).await;
                }
                (lat, sim.now() - t0)
            })
            .expect("simulation");
        return vec![MetricRow {
            throughput_per_s: per_second(lat.len() as u64, elapsed),
            wire_ops: c.wire_ops(),
            mem_bytes: c.mem_bytes(),
            ..MetricRow::from_samples(name, cfg.baseline.name(), 1, cfg.payload, &lat)
        }];
    }
    c.bind_server(server);
    let (samples, elapsed) = c
        .sim
        .run(async move {
            let vq = ops::vqp_create(&sim, client, 0).await.expect("vqp");
            ops::qconnect(&sim, vq, NodeId::new(server, SERVER_PORT))
                .await
                .expect("connect");
            let t0 = sim.now();
            let mut out = Vec::new();
            for wr in wrs {
                let kind = sim.with(|w| {
                    let q = w.vqp(vq).qp.expect("connected");
                    w.kernel(client).phys[&q].kind
                });
                let t = sim.now();
                ops::post_send(&sim, vq, vec![wr]).await.expect("post");
                let c = ops::wait_completion(&sim, vq).await;
                assert_eq!(c.status, WcStatus::Ok);
                out.push((kind, sim.now() - t));
                sim.sleep(DEMO_GAP_NS).await;
            }
            (out, sim.now() - t0)
        })
        .expect("simulation");
    let pick = |k: QpKind| samples.iter().filter(|s| s.0 == k).map(|s| s.1).collect::<Vec<_>>();
    let all: Vec<u64> = samples.iter().map(|s| s.1).collect();
    vec![
        MetricRow::from_samples(name, "krcore/dc", 1, cfg.payload, &pick(QpKind::Dc)),
        MetricRow::from_samples(name, "krcore/rc", 1, cfg.payload, &pick(QpKind::Rc)),
        MetricRow {
            throughput_per_s: per_second(all.len() as u64, elapsed),
            wire_ops: c.wire_ops(),
            mem_bytes: c.mem_bytes(),
            ..MetricRow::from_samples(name, "krcore", 1, cfg.payload, &all)
        },
    ]
}
