use proptest::prelude::*;
use vqp_bench::metrics::{read_csv, to_csv_string, MetricRow};
use vqp_bench::scenarios::{self, krcore_model_bytes, lite_model_bytes};
use vqp_bench::{Baseline, Mode, Scenario, ScenarioConfig};
use vqp_core::CostModel;

fn cfg(s: Scenario, b: Baseline) -> ScenarioConfig {
    ScenarioConfig::new(s, b, "fig3b").unwrap()
}

fn row<'a>(rows: &'a [MetricRow], label: &str) -> &'a MetricRow {
    rows.iter()
        .find(|r| r.baseline == label)
        .unwrap_or_else(|| panic!("no {label} row in {rows:?}"))
}

/// Independent model of one uncontended READ between two workers.
fn read_ns(c: &CostModel, bytes: u64) -> u64 {
    c.nic_op_ns * 2 + c.wire_latency_ns * 2 + c.data_op_base_ns + (bytes * c.per_byte_ps).div_ceil(1000)
}

#[test]
fn sync_read_rows_match_the_analytic_model() {
    let c = CostModel::preset("fig3b").unwrap();
    for payload in [8, 4096, 256 * 1024] {
        let mut v = cfg(Scenario::DataPath, Baseline::Verbs);
        v.payload = payload;
        let mut k = cfg(Scenario::DataPath, Baseline::Krcore);
        k.payload = payload;
        let (v, k) = (scenarios::run(&v).unwrap(), scenarios::run(&k).unwrap());
        let raw = read_ns(&c, payload);
        assert_eq!(row(&v, "verbs").p50_ns, raw);
        assert_eq!(row(&k, "krcore-rc").p50_ns, raw + c.syscall_overhead_ns);
        assert_eq!(row(&k, "krcore-dc").p50_ns, raw + c.syscall_overhead_ns + c.dc_op_extra_ns);
        // one READ per request, plus the two meta READs of the first one
        assert_eq!(row(&v, "verbs").wire_ops, 200);
        assert_eq!(row(&k, "krcore-rc").wire_ops, 202);
    }
}

#[test]
fn large_reads_hide_the_kernel_crossing() {
    let mut v = cfg(Scenario::DataPath, Baseline::Verbs);
    let mut k = cfg(Scenario::DataPath, Baseline::Krcore);
    v.payload = 256 * 1024;
    k.payload = 256 * 1024;
    let v = row(&scenarios::run(&v).unwrap(), "verbs").p50_ns as f64;
    let k = row(&scenarios::run(&k).unwrap(), "krcore-rc").p50_ns as f64;
    assert!(k / v <= 1.07, "{}", k / v);
}

#[test]
fn async_batches_beat_sync_throughput() {
    let sync = scenarios::run(&cfg(Scenario::DataPath, Baseline::Krcore)).unwrap();
    let mut a = cfg(Scenario::DataPath, Baseline::Krcore);
    a.mode = Mode::Async;
    let asyn = scenarios::run(&a).unwrap();
    for l in ["krcore-rc", "krcore-dc"] {
        assert!(row(&asyn, l).throughput_per_s > 10.0 * row(&sync, l).throughput_per_s);
    }
}

#[test]
fn two_worker_mesh_is_one_cold_connect_each() {
    let mut m = cfg(Scenario::FullMesh, Baseline::Krcore);
    m.clients = 2;
    let mesh = scenarios::run(&m).unwrap();
    let single = scenarios::run(&cfg(Scenario::SingleConnect, Baseline::Krcore)).unwrap();
    let (a, b) = (row(&mesh, "krcore").p999_ns as f64, row(&single, "krcore").p50_ns as f64);
    assert!((a / b - 1.0).abs() < 0.01, "{a} vs {b}");
    // each node looks the other up once
    assert_eq!(row(&mesh, "krcore").wire_ops, 4);
}

#[test]
fn single_client_tail_is_flat_after_warmup() {
    let mut t = cfg(Scenario::TailLatency, Baseline::Verbs);
    t.clients = 1;
    t.servers = 1;
    let r = scenarios::run(&t).unwrap();
    assert_eq!(row(&r, "verbs").p50_ns, row(&r, "verbs").p999_ns);
}

#[test]
fn tail_ordering_at_p999() {
    let k = scenarios::run(&cfg(Scenario::TailLatency, Baseline::Krcore)).unwrap();
    let v = scenarios::run(&cfg(Scenario::TailLatency, Baseline::Verbs)).unwrap();
    let (v, rc, dc) = (
        row(&v, "verbs").p999_ns,
        row(&k, "krcore-rc").p999_ns,
        row(&k, "krcore-dc").p999_ns,
    );
    assert!(v < rc && rc < dc, "{v} {rc} {dc}");
}

#[test]
fn transfer_demo_switches_transport() {
    let r = scenarios::run(&cfg(Scenario::TransferDemo, Baseline::Krcore)).unwrap();
    let (dc, rc) = (row(&r, "krcore/dc"), row(&r, "krcore/rc"));
    assert!(dc.p50_ns > 0 && rc.p50_ns > 0);
    assert!(rc.p50_ns < dc.p50_ns);
}

#[test]
fn small_spike_is_deterministic_and_complete() {
    let mut s = cfg(Scenario::LoadSpike, Baseline::Krcore);
    s.clients = 30;
    s.servers = 2;
    let a = to_csv_string(&scenarios::run(&s).unwrap());
    let b = to_csv_string(&scenarios::run(&s).unwrap());
    assert_eq!(a, b);
    let rows = read_csv(a.as_bytes()).unwrap();
    let st = row(&rows, "krcore/startup");
    // the last worker starts after every process creation
    assert!(st.p999_ns >= 30 * s.process_start_ns);
    s.seed = 2;
    assert_ne!(a, to_csv_string(&scenarios::run(&s).unwrap()));
}

#[test]
fn memory_rows_follow_the_closed_form() {
    let c = CostModel::preset("fig3b").unwrap();
    for b in [Baseline::Krcore, Baseline::Lite] {
        let rows = scenarios::run(&cfg(Scenario::MemoryModel, b)).unwrap();
        assert_eq!(rows.first().unwrap().clients, 0);
        assert_eq!(rows.last().unwrap().clients, 5000);
        for r in rows {
            let want = match b {
                Baseline::Krcore => krcore_model_bytes(&c, r.clients),
                _ => lite_model_bytes(&c, r.clients),
            };
            assert_eq!(r.mem_bytes, want);
        }
    }
    assert_eq!(lite_model_bytes(&c, 0), 0);
    assert_eq!(krcore_model_bytes(&c, 0), 48 * c.dc_qp_mem_bytes);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    /// Cold connects cost exactly two READs per distinct server per client node.
    #[test]
    fn connect_wire_ops_follow_distinct_servers(clients in 1u64..60, servers in 1u64..6) {
        let mut c = cfg(Scenario::SingleConnect, Baseline::Krcore);
        c.clients = clients;
        c.servers = servers;
        let rows = scenarios::run(&c).unwrap();
        let cpus = c.cost.cpus_per_node as u64;
        let expected: u64 = (0..clients.div_ceil(cpus))
            .map(|n| {
                let on_node = (n * cpus..((n + 1) * cpus).min(clients)).map(|i| i % servers);
                on_node.collect::<std::collections::BTreeSet<_>>().len() as u64
            })
            .sum::<u64>()
            * 2;
        prop_assert_eq!(row(&rows, "krcore").wire_ops, expected);
        prop_assert_eq!(row(&rows, "krcore-warm").wire_ops, 0);
    }

    /// Any seed gives the same CSV bytes twice.
    #[test]
    fn reruns_are_byte_identical(seed in any::<u64>()) {
        let mut c = cfg(Scenario::PoolSweep, Baseline::Krcore);
        c.seed = seed;
        prop_assert_eq!(to_csv_string(&scenarios::run(&c).unwrap()), to_csv_string(&scenarios::run(&c).unwrap()));
    }
}
