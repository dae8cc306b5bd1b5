//! One-sided data path: per-request latency, batch throughput, DC pool size
//! and tail latency.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use vqp_core::exec::join_all;
use vqp_core::nic::{Qpn, WcStatus, WorkRequest};
use vqp_core::vplane::{ops, transfer, VqpId};
use vqp_core::{Gid, NodeId, Sim};

use super::{per_second, raw_post_wait, rc_connect, rng, Cluster, SERVER_PORT, USER_LEN};
use crate::config::{Baseline, Mode, ScenarioConfig};
use crate::metrics::MetricRow;

/// Requests per client in sync mode (the first one is reported separately).
pub const SYNC_REQUESTS: usize = 200;
/// Requests per list in async mode.
pub const ASYNC_BATCH: usize = 64;
pub const ASYNC_BATCHES: usize = 40;
/// Pool sweep: VQPs on the client CPU, each bound to a random server.
pub const SWEEP_VQPS: usize = 64;
pub const SWEEP_BATCHES: usize = 20;
pub const SWEEP_MAX_POOL: usize = 16;

/// How a client reaches the servers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    /// User-space RC QPs, no kernel crossing.
    Verbs,
    /// Kernel RC QPs: one crossing in each direction, no MR validation.
    Lite,
    /// VQPs over pooled RC QPs.
    KrcoreRc,
    /// VQPs over the DC pool.
    KrcoreDc,
}

impl Path {
    pub fn label(self) -> &'static str {
        match self {
            Path::Verbs => "verbs",
            Path::Lite => "lite",
            Path::KrcoreRc => "krcore-rc",
            Path::KrcoreDc => "krcore-dc",
        }
    }

    fn for_baseline(b: Baseline) -> Vec<Path> {
        match b {
            Baseline::Verbs => vec![Path::Verbs],
            Baseline::Lite => vec![Path::Lite],
            Baseline::Krcore => vec![Path::KrcoreRc, Path::KrcoreDc],
        }
    }
}

/// A connection from one client to one server.
#[derive(Clone, Copy, Debug)]
enum Conn {
    Raw(Qpn),
    Virt(VqpId),
}

/// Issues `wrs` and waits for the signaled tail.
async fn issue(sim: &Sim, path: Path, conn: Conn, wrs: Vec<WorkRequest>) {
    match conn {
        Conn::Raw(q) => {
            if path == Path::Lite {
                let d = sim.with(|w| w.fabric.cost.syscall_half_ns());
                sim.sleep(d).await;
                raw_post_wait(sim, q, wrs).await;
                sim.sleep(d).await;
            } else {
                raw_post_wait(sim, q, wrs).await;
            }
        }
        Conn::Virt(vq) => {
            ops::post_send(sim, vq, wrs).await.expect("post");
            let c = ops::wait_completion(sim, vq).await;
            assert_eq!(c.status, WcStatus::Ok, "request failed: {c:?}");
        }
    }
}

struct Bench {
    c: Rc<Cluster>,
    servers: Vec<Gid>,
    /// (node, cpu) per client.
    clients: Vec<(Gid, usize)>,
}

impl Bench {
    /// Client i runs on CPU i % cpus of the client nodes placed after the servers.
    fn new(cfg: &ScenarioConfig, clients: u64, servers: u64) -> Self {
        let cpus = cfg.cost.cpus_per_node as u64;
        let client_nodes = clients.div_ceil(cpus);
        let c = Cluster::new(&cfg.cost, servers + client_nodes, true);
        c.disable_bgd();
        let servers_v: Vec<Gid> = c.nodes[..servers as usize].to_vec();
        for s in &servers_v {
            c.bind_server(*s);
        }
        let clients = (0..clients)
            .map(|i| (c.nodes[(servers + i / cpus) as usize], (i % cpus) as usize))
            .collect();
        Self {
            c: Rc::new(c),
            servers: servers_v,
            clients,
        }
    }

    /// Opens `path` connections from each client to each listed server index.
    /// Setup time is not measured.
    fn connect(&self, path: Path, wanted: &[Vec<usize>]) -> Vec<HashMap<usize, Conn>> {
        let sim = self.c.sim.clone();
        let clients = self.clients.clone();
        let servers = self.servers.clone();
        let wanted = wanted.to_vec();
        self.c
            .sim
            .run(async move {
                let mut out = Vec::new();
                let mut rc_done = std::collections::HashSet::new();
                for (i, (node, cpu)) in clients.iter().copied().enumerate() {
                    let mut m = HashMap::new();
                    for &s in &wanted[i] {
                        let server = servers[s];
                        let conn = match path {
                            Path::Verbs | Path::Lite => Conn::Raw(rc_connect(&sim, node, server, false).await.0),
                            Path::KrcoreRc | Path::KrcoreDc => {
                                if path == Path::KrcoreRc && rc_done.insert((node, cpu, server)) {
                                    transfer::add_rc_pair(&sim, node, cpu, server).await.expect("rc pair");
                                }
                                let vq = sim.with(|w| ops::vqp_create_now(w, node, cpu)).expect("vqp");
                                ops::connect_inner(&sim, vq, NodeId::new(server, SERVER_PORT))
                                    .await
                                    .expect("connect");
                                Conn::Virt(vq)
                            }
                        };
                        m.insert(s, conn);
                    }
                    out.push(m);
                }
                out
            })
            .expect("simulation")
    }

    fn read(&self, client: usize, server: usize, payload: u64, wr_id: u64) -> WorkRequest {
        let len = payload.max(1);
        let span = USER_LEN / 2 - len;
        let local = (client as u64 * len.next_multiple_of(64)) % span.max(1);
        self.c
            .read(wr_id, local, self.servers[server], USER_LEN / 2, len as u32)
    }
}

fn targets_fixed(clients: usize, servers: usize) -> Vec<Vec<usize>> {
    (0..clients).map(|i| vec![i % servers]).collect()
}

/// Every client issues `n` sync READs, choosing the server with `pick`.
/// Returns per-client latency vectors and the run's elapsed time.
fn sync_loop(
    b: &Bench,
    path: Path,
    conns: Vec<HashMap<usize, Conn>>,
    picks: Vec<Vec<usize>>,
    payload: u64,
) -> (Vec<Vec<u64>>, u64) {
    let reqs: Vec<Vec<(Conn, WorkRequest)>> = picks
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.iter()
                .enumerate()
                .map(|(k, s)| (conns[i][s], b.read(i, *s, payload, k as u64 + 1)))
                .collect()
        })
        .collect();
    let sim = b.c.sim.clone();
    b.c.sim
        .run(async move {
            let t0 = sim.now();
            let futs = reqs
                .into_iter()
                .map(|list| {
                    let sim = sim.clone();
                    async move {
                        let mut lat = Vec::with_capacity(list.len());
                        for (conn, wr) in list {
                            let t = sim.now();
                            issue(&sim, path, conn, vec![wr]).await;
                            lat.push(sim.now() - t);
                        }
                        lat
                    }
                })
                .collect();
            let lat = join_all(futs).await;
            (lat, sim.now() - t0)
        })
        .expect("simulation")
}

/// Every client posts `batches` lists of [`ASYNC_BATCH`] READs with only the
/// tail signaled. Returns batch latencies and elapsed time.
fn async_loop(b: &Bench, path: Path, conns: Vec<HashMap<usize, Conn>>, payload: u64, batches: usize) -> (Vec<u64>, u64) {
    let depth = b.c.sim.with(|w| w.fabric.cost.sq_depth.min(w.fabric.cost.cq_depth)) as usize;
    let per = ASYNC_BATCH.min(depth);
    let jobs: Vec<(Conn, Vec<Vec<WorkRequest>>)> = conns
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (s, conn) = m.iter().next().map(|(s, c)| (*s, *c)).expect("one connection");
            let lists = (0..batches)
                .map(|k| {
                    (0..per)
                        .map(|j| {
                            let wr = b.read(i, s, payload, (k * per + j) as u64 + 1);
                            if j + 1 == per {
                                wr
                            } else {
                                wr.unsignaled()
                            }
                        })
                        .collect()
                })
                .collect();
            (conn, lists)
        })
        .collect();
    let sim = b.c.sim.clone();
    b.c.sim
        .run(async move {
            let t0 = sim.now();
            let futs = jobs
                .into_iter()
                .map(|(conn, lists)| {
                    let sim = sim.clone();
                    async move {
                        let mut lat = Vec::new();
                        for wrs in lists {
                            let t = sim.now();
                            issue(&sim, path, conn, wrs).await;
                            lat.push(sim.now() - t);
                        }
                        lat
                    }
                })
                .collect();
            let lat: Vec<u64> = join_all(futs).await.into_iter().flatten().collect();
            (lat, sim.now() - t0)
        })
        .expect("simulation")
}

fn row(cfg: &ScenarioConfig, label: &str, samples: &[u64]) -> MetricRow {
    MetricRow::from_samples(cfg.scenario.name(), label, cfg.clients, cfg.payload, samples)
}

/// Sync mode: steady-state latency rows plus `<path>/first` rows holding
/// each client's first request (cold MR cache, first DC contact).
/// Async mode: batch latency and READ throughput.
pub fn data_path(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for path in Path::for_baseline(cfg.baseline) {
        let b = Bench::new(cfg, cfg.clients, cfg.servers);
        let wanted = targets_fixed(b.clients.len(), b.servers.len());
        let conns = b.connect(path, &wanted);
        let ops0 = b.c.wire_ops();
        match cfg.mode {
            Mode::Sync => {
                let picks = wanted.iter().map(|w| vec![w[0]; SYNC_REQUESTS]).collect();
                let (lat, elapsed) = sync_loop(&b, path, conns, picks, cfg.payload);
                let first: Vec<u64> = lat.iter().map(|l| l[0]).collect();
                let rest: Vec<u64> = lat.iter().flat_map(|l| l[1..].iter().copied()).collect();
                let total = lat.iter().map(Vec::len).sum::<usize>() as u64;
                rows.push(MetricRow {
                    throughput_per_s: per_second(total, elapsed),
                    wire_ops: b.c.wire_ops() - ops0,
                    mem_bytes: b.c.mem_bytes(),
                    ..row(cfg, path.label(), &rest)
                });
                rows.push(row(cfg, &format!("{}/first", path.label()), &first));
            }
            Mode::Async => {
                let (lat, elapsed) = async_loop(&b, path, conns, cfg.payload, ASYNC_BATCHES);
                let per = (ASYNC_BATCH as u64).min(cfg.cost.sq_depth.min(cfg.cost.cq_depth) as u64);
                rows.push(MetricRow {
                    throughput_per_s: per_second(lat.len() as u64 * per, elapsed),
                    wire_ops: b.c.wire_ops() - ops0,
                    mem_bytes: b.c.mem_bytes(),
                    ..row(cfg, path.label(), &lat)
                });
            }
        }
    }
    rows
}

/// Batches of [`SWEEP_VQPS`] single-READ posts from one CPU, each VQP bound
/// to a random server, followed by one wait per VQP. krcore sweeps the DC
/// pool size 1..=16 (`krcore-dc-p<k>` rows) and adds a `krcore-rc` row.
pub fn pool_sweep(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let servers = cfg.servers as usize;
    let mut r = rng(cfg.seed, 0);
    let targets: Vec<usize> = (0..SWEEP_VQPS).map(|_| r.gen_range(0..servers)).collect();
    let mut runs: Vec<(String, Path, usize)> = Path::for_baseline(cfg.baseline)
        .into_iter()
        .filter(|p| *p != Path::KrcoreDc)
        .map(|p| (p.label().to_string(), p, cfg.cost.dc_pool_size))
        .collect();
    if cfg.baseline == Baseline::Krcore {
        runs.extend((1..=SWEEP_MAX_POOL).map(|k| (format!("krcore-dc-p{k}"), Path::KrcoreDc, k)));
    }
    runs.into_iter()
        .map(|(label, path, pool)| {
            let mut c = cfg.clone();
            c.cost.dc_pool_size = pool;
            let (lat, ops, mem) = sweep_once(&c, path, &targets);
            MetricRow {
                throughput_per_s: per_second((lat.len() * SWEEP_VQPS) as u64, lat.iter().sum()),
                wire_ops: ops,
                mem_bytes: mem,
                ..row(cfg, &label, &lat)
            }
        })
        .collect()
}

fn sweep_once(cfg: &ScenarioConfig, path: Path, targets: &[usize]) -> (Vec<u64>, u64, u64) {
    let b = Bench::new(cfg, 1, cfg.servers);
    // one connection per server; slots to the same server share it
    let mut uniq = targets.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let map = b.connect(path, &[uniq]).remove(0);
    let conns: Vec<Conn> = targets.iter().map(|s| map[s]).collect();
    let wrs: Vec<WorkRequest> = targets
        .iter()
        .enumerate()
        .map(|(k, s)| b.read(k, *s, cfg.payload, k as u64 + 1))
        .collect();
    let sim = b.c.sim.clone();
    let (w2, c2) = (wrs.clone(), conns.clone());
    // warm-up: MR cache and first DC contact
    b.c.sim
        .run(async move {
            for (conn, wr) in c2.into_iter().zip(w2) {
                issue(&sim, path, conn, vec![wr]).await;
            }
        })
        .expect("simulation");
    let ops0 = b.c.wire_ops();
    let sim = b.c.sim.clone();
    let lat = b
        .c
        .sim
        .run(async move {
            let mut lat = Vec::new();
            for _ in 0..SWEEP_BATCHES {
                let t = sim.now();
                batch(&sim, path, &conns, &wrs).await;
                lat.push(sim.now() - t);
            }
            lat
        })
        .expect("simulation");
    (lat, b.c.wire_ops() - ops0, b.c.mem_bytes())
}

/// Posts one READ per connection, then waits for each completion in order.
async fn batch(sim: &Sim, path: Path, conns: &[Conn], wrs: &[WorkRequest]) {
    match path {
        Path::KrcoreRc | Path::KrcoreDc => {
            for (conn, wr) in conns.iter().zip(wrs) {
                let Conn::Virt(vq) = conn else { unreachable!() };
                ops::post_send(sim, *vq, vec![wr.clone()]).await.expect("post");
            }
            for conn in conns {
                let Conn::Virt(vq) = conn else { unreachable!() };
                let c = ops::wait_completion(sim, *vq).await;
                assert_eq!(c.status, WcStatus::Ok);
            }
        }
        Path::Verbs | Path::Lite => {
            let d = if path == Path::Lite {
                sim.with(|w| w.fabric.cost.syscall_half_ns())
            } else {
                0
            };
            let mut qps = Vec::new();
            for (conn, wr) in conns.iter().zip(wrs) {
                let Conn::Raw(q) = conn else { unreachable!() };
                sim.sleep(d).await;
                sim.with(|w| w.fabric.post_send(*q, vec![wr.clone()]).expect("post"));
                qps.push((*q, wr.wr_id));
            }
            for (q, id) in qps {
                sim.sleep(d).await;
                let q2 = q;
                loop {
                    sim.wait_until(vqp_core::world::WaitKey::Cq(q2), move |w| w.fabric.cq_len(q2) > 0)
                        .await;
                    let hit = sim.with(|w| {
                        let c = w.fabric.poll_cq(q2).expect("completion");
                        assert_eq!(c.status, WcStatus::Ok);
                        c.wr_id == id
                    });
                    if hit {
                        break;
                    }
                }
            }
        }
    }
}

/// Sync READs from every client to a random server per request.
/// Each client keeps one connection per server.
pub fn tail_latency(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let servers = cfg.servers as usize;
    let mut rows = Vec::new();
    for path in Path::for_baseline(cfg.baseline) {
        let b = Bench::new(cfg, cfg.clients, cfg.servers);
        let n = b.clients.len();
        let all: Vec<Vec<usize>> = (0..n).map(|_| (0..servers).collect()).collect();
        let conns = b.connect(path, &all);
        let picks: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut r = rng(cfg.seed, i as u64 + 1);
                (0..SYNC_REQUESTS).map(|_| r.gen_range(0..servers)).collect()
            })
            .collect();
        let ops0 = b.c.wire_ops();
        let (lat, elapsed) = sync_loop(&b, path, conns, picks, cfg.payload);
        let all: Vec<u64> = lat.into_iter().flatten().collect();
        rows.push(MetricRow {
            throughput_per_s: per_second(all.len() as u64, elapsed),
            wire_ops: b.c.wire_ops() - ops0,
            mem_bytes: b.c.mem_bytes(),
            ..row(cfg, path.label(), &all)
        });
    }
    rows
}
