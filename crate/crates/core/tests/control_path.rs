use proptest::prelude::*;
use vqp_core::conformance::*;
use vqp_core::nic::WcStatus;
use vqp_core::vplane::{ops, transfer, VqpError};
use vqp_core::CostModel;

fn fig3b() -> CostModel {
    CostModel::preset("fig3b").unwrap()
}

/// Independent model of one uncontended READ: both NIC pipelines, the wire
/// both ways, the base op cost and serialization.
fn read_ns(c: &CostModel, wire: u64, bytes: u64) -> u64 {
    let ser = (bytes * c.per_byte_ps + 999) / 1000;
    c.nic_op_ns * 2 + wire * 2 + c.data_op_base_ns + ser
}

#[test]
fn cold_connect_is_two_meta_reads() {
    let c = cluster_with(fig3b(), 2);
    c.server(1, 7);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 7));
    let (dt, reads) = c
        .sim
        .run(async move {
            let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
            let (t0, r0) = (sim.now(), sim.with(|w| w.fabric.tap.reads));
            ops::qconnect(&sim, vq, b).await.unwrap();
            (sim.now() - t0, sim.with(|w| w.fabric.tap.reads) - r0)
        })
        .unwrap();
    let m = fig3b();
    assert_eq!(reads, 2);
    assert_eq!(
        dt,
        m.ctrl_syscall_ns + 2 * read_ns(&m, m.meta_latency_ns, m.meta_read_bytes)
    );
}

#[test]
fn warm_connect_reads_nothing() {
    let c = cluster_with(fig3b(), 2);
    c.server(1, 7);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 7));
    let (dt, reads) = c
        .sim
        .run(async move {
            let v1 = ops::vqp_create(&sim, a, 0).await.unwrap();
            ops::qconnect(&sim, v1, b).await.unwrap();
            let (t0, r0) = (sim.now(), sim.with(|w| w.fabric.tap.reads));
            let v2 = ops::vqp_create(&sim, a, 3).await.unwrap();
            ops::qconnect(&sim, v2, b).await.unwrap();
            (sim.now() - t0, sim.with(|w| w.fabric.tap.reads) - r0)
        })
        .unwrap();
    assert_eq!(reads, 0);
    assert_eq!(dt, 2 * fig3b().ctrl_syscall_ns);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Any sequence of connects does 2 READs per distinct address, no more.
    #[test]
    fn reads_track_distinct_addresses(targets in prop::collection::vec((1usize..4, 1u16..4), 1..12)) {
        let c = cluster(4);
        for i in 1..4 {
            for p in 1..4 {
                c.server(i, p);
            }
        }
        let addrs: Vec<_> = targets.iter().map(|(i, p)| c.addr(*i, *p)).collect();
        let distinct: std::collections::BTreeSet<_> = addrs.iter().copied().collect();
        let (sim, a) = (c.sim.clone(), c.nodes[0]);
        let r0 = sim.with(|w| w.fabric.tap.reads);
        let reads = c.sim.run(async move {
            for addr in addrs {
                let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
                ops::qconnect(&sim, vq, addr).await.unwrap();
            }
            sim.with(|w| w.fabric.tap.reads)
        }).unwrap() - r0;
        prop_assert_eq!(reads, 2 * distinct.len() as u64);
    }
}

#[test]
fn concurrent_cold_connects_share_one_lookup() {
    let c = cluster(2);
    c.server(1, 9);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 9));
    let reads = c
        .sim
        .run(async move {
            let mut vs = Vec::new();
            for cpu in 0..6 {
                vs.push((ops::vqp_create_now(&mut sim.world(), a, cpu).unwrap(), b));
            }
            let r0 = sim.with(|w| w.fabric.tap.reads);
            let rs = ops::qconnect_batch(&sim, &vs).await;
            assert!(rs.iter().all(Result::is_ok));
            sim.with(|w| w.fabric.tap.reads) - r0
        })
        .unwrap();
    assert_eq!(reads, 2);
}

#[test]
fn connect_to_unbound_port_fails() {
    let c = cluster(2);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 5));
    let r = c
        .sim
        .run(async move {
            let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
            ops::qconnect(&sim, vq, b).await
        })
        .unwrap();
    assert!(matches!(r, Err(VqpError::Meta(_))));
}

#[test]
fn duplicate_bind_rejected() {
    let c = cluster(2);
    c.server(1, 7);
    let r = c.sim.with(|w| {
        let vq = ops::vqp_create_now(w, c.nodes[1], 1).unwrap();
        ops::qbind_now(w, vq, 7)
    });
    assert!(r.is_err());
}

fn sync_read(c: &Cluster, rc: bool, n: usize) -> Vec<u64> {
    c.server(1, 7);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 7));
    let reads: Vec<_> = (0..n as u64).map(|i| c.read(i, 1, 64 * i, 8)).collect();
    c.sim
        .run(async move {
            if rc {
                transfer::promote(&sim, a, 0, b.gid).await;
            }
            let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
            ops::qconnect(&sim, vq, b).await.unwrap();
            let mut lat = Vec::new();
            for wr in reads {
                let t0 = sim.now();
                ops::post_send(&sim, vq, vec![wr]).await.unwrap();
                let done = ops::wait_completion(&sim, vq).await;
                assert_eq!(done.status, WcStatus::Ok);
                lat.push(sim.now() - t0);
            }
            lat
        })
        .unwrap()
}

#[test]
fn sync_read_latency_dc_and_rc() {
    let m = fig3b();
    let raw = read_ns(&m, m.wire_latency_ns, 8);
    assert_eq!(raw, 2150);
    let dc = sync_read(&cluster_with(fig3b(), 2), false, 4);
    let rc = sync_read(&cluster_with(fig3b(), 2), true, 4);
    let miss = 2 * read_ns(&m, m.meta_latency_ns, m.meta_read_bytes);
    // first request pays the MRStore miss; on DC also the first-contact reconnect
    assert_eq!(rc[1..], [raw + m.syscall_overhead_ns; 3]);
    assert_eq!(rc[0], rc[1] + miss);
    assert_eq!(dc[1..], [raw + m.syscall_overhead_ns + m.dc_op_extra_ns; 3]);
    assert_eq!(dc[0], dc[1] + miss + m.dc_reconnect_ns);
}
