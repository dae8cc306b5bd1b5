//! Connection setup: one client per server, and all-to-all meshes.

use std::cell::RefCell;
use std::rc::Rc;

use vqp_core::exec::join_all;
use vqp_core::vplane::ops;
use vqp_core::{Gid, NodeId};

use super::{per_second, rc_connect, Cluster, SERVER_PORT};
use crate::config::{Baseline, ScenarioConfig};
use crate::metrics::MetricRow;

fn row(cfg: &ScenarioConfig, label: &str, samples: &[u64], c: &Cluster, ops0: u64) -> MetricRow {
    let total = samples.iter().copied().max().unwrap_or(0);
    MetricRow {
        throughput_per_s: per_second(samples.len() as u64, total),
        wire_ops: c.wire_ops() - ops0,
        mem_bytes: c.mem_bytes(),
        ..MetricRow::from_samples(cfg.scenario.name(), label, cfg.clients, cfg.payload, samples)
    }
}

/// Clients (one per CPU, filling client nodes in order) each connect to
/// server `i % servers`. All start at t=0 on a cold cluster.
pub fn single_connect(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let cpus = cfg.cost.cpus_per_node as u64;
    let client_nodes = cfg.clients.div_ceil(cpus);
    let c = Cluster::new(&cfg.cost, cfg.servers + client_nodes, cfg.baseline == Baseline::Krcore);
    let servers: Vec<Gid> = c.nodes[..cfg.servers as usize].to_vec();
    let placement: Vec<(Gid, usize, Gid)> = (0..cfg.clients)
        .map(|i| {
            let node = c.nodes[(cfg.servers + i / cpus) as usize];
            (node, (i % cpus) as usize, servers[(i % cfg.servers) as usize])
        })
        .collect();
    let ops0 = c.wire_ops();
    match cfg.baseline {
        Baseline::Krcore => {
            for s in &servers {
                c.bind_server(*s);
            }
            let cold = krcore_pass(&c, &placement);
            let cold_row = row(cfg, "krcore", &cold, &c, ops0);
            let ops1 = c.wire_ops();
            let warm = krcore_pass(&c, &placement);
            vec![cold_row, row(cfg, "krcore-warm", &warm, &c, ops1)]
        }
        Baseline::Verbs | Baseline::Lite => {
            let init = cfg.baseline == Baseline::Verbs;
            let sim = c.sim.clone();
            let done = c
                .sim
                .run(async move {
                    let t0 = sim.now();
                    let futs = placement
                        .iter()
                        .map(|(node, _, server)| {
                            let sim = sim.clone();
                            let (node, server) = (*node, *server);
                            async move {
                                rc_connect(&sim, node, server, init).await;
                                sim.now() - t0
                            }
                        })
                        .collect();
                    join_all(futs).await
                })
                .expect("simulation");
            vec![row(cfg, cfg.baseline.name(), &done, &c, ops0)]
        }
    }
}

/// Every client creates one VQP and connects it; returns per-client latency.
fn krcore_pass(c: &Cluster, placement: &[(Gid, usize, Gid)]) -> Vec<u64> {
    let sim = c.sim.clone();
    let placement = placement.to_vec();
    c.sim
        .run(async move {
            let t0 = sim.now();
            let futs = placement
                .into_iter()
                .map(|(node, cpu, server)| {
                    let sim = sim.clone();
                    async move {
                        let vq = ops::vqp_create(&sim, node, cpu).await.expect("vqp");
                        ops::qconnect(&sim, vq, NodeId::new(server, SERVER_PORT))
                            .await
                            .expect("connect");
                        sim.now() - t0
                    }
                })
                .collect();
            join_all(futs).await
        })
        .expect("simulation")
}

/// All-to-all: every worker connects to every other worker. Samples are
/// per-worker completion times, so p999 is the total for up to 1000 workers.
pub fn full_mesh(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let cpus = cfg.cost.cpus_per_node;
    let n = cfg.clients as usize;
    let c = Cluster::new(&cfg.cost, cfg.clients.div_ceil(cpus as u64), cfg.baseline == Baseline::Krcore);
    let workers: Vec<(Gid, usize, u16)> = (0..n)
        .map(|i| (c.nodes[i / cpus], i % cpus, 1000 + i as u16))
        .collect();
    let ops0 = c.wire_ops();
    let done = match cfg.baseline {
        Baseline::Krcore => krcore_mesh(&c, &workers),
        Baseline::Verbs => rc_mesh(&c, &workers, true),
        Baseline::Lite => rc_mesh(&c, &workers, false),
    };
    vec![row(cfg, cfg.baseline.name(), &done, &c, ops0)]
}

/// Each worker creates its VQPs in one control crossing and connects them
/// all with one batched qconnect.
fn krcore_mesh(c: &Cluster, workers: &[(Gid, usize, u16)]) -> Vec<u64> {
    c.sim.with(|w| {
        for (node, cpu, port) in workers {
            let vq = ops::vqp_create_now(w, *node, *cpu).expect("vqp");
            ops::qbind_now(w, vq, *port).expect("worker port");
        }
    });
    let sim = c.sim.clone();
    let workers = Rc::new(workers.to_vec());
    c.sim
        .run(async move {
            let t0 = sim.now();
            let futs = (0..workers.len())
                .map(|i| {
                    let sim = sim.clone();
                    let workers = workers.clone();
                    async move {
                        let (node, cpu, _) = workers[i];
                        let ctrl = sim.with(|w| w.fabric.cost.ctrl_syscall_ns);
                        sim.sleep(ctrl).await;
                        let reqs = sim.with(|w| {
                            workers
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != i)
                                .map(|(_, (peer, _, port))| {
                                    let vq = ops::vqp_create_now(w, node, cpu).expect("vqp");
                                    (vq, NodeId::new(*peer, *port))
                                })
                                .collect::<Vec<_>>()
                        });
                        for r in ops::qconnect_batch(&sim, &reqs).await {
                            r.expect("connect");
                        }
                        sim.now() - t0
                    }
                })
                .collect();
            join_all(futs).await
        })
        .expect("simulation")
}

/// One RC pair per unordered worker pair, opened by the lower-numbered
/// worker after its own driver init (verbs only).
fn rc_mesh(c: &Cluster, workers: &[(Gid, usize, u16)], init: bool) -> Vec<u64> {
    let n = workers.len();
    let finish = Rc::new(RefCell::new(vec![0u64; n]));
    let nodes: Rc<Vec<Gid>> = Rc::new(workers.iter().map(|w| w.0).collect());
    for i in 0..n {
        let sim = c.sim.clone();
        let finish = finish.clone();
        let nodes = nodes.clone();
        c.sim.spawn(async move {
            if init {
                let t = sim.with(|w| w.fabric.init_context(nodes[i]));
                sim.sleep_until(t).await;
                let mut f = finish.borrow_mut();
                f[i] = f[i].max(t);
            }
            for j in i + 1..n {
                let s = sim.clone();
                let finish = finish.clone();
                let (a, b) = (nodes[i], nodes[j]);
                sim.spawn(async move {
                    rc_connect(&s, a, b, false).await;
                    let t = s.now();
                    let mut f = finish.borrow_mut();
                    f[i] = f[i].max(t);
                    f[j] = f[j].max(t);
                });
            }
        });
    }
    c.sim.run_until_idle().expect("simulation");
    let v = finish.borrow().clone();
    v
}
