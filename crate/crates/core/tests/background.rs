use vqp_core::conformance::*;
use vqp_core::nic::{LocalBuf, QpKind, RecvBuffer, WcStatus, WorkRequest};
use vqp_core::vplane::transfer::{self, TransferError};
use vqp_core::vplane::{ops, VqpId};
use vqp_core::{CostModel, Gid, Sim};

fn kind(sim: &Sim, vq: VqpId) -> QpKind {
    sim.with(|w| {
        let v = w.vqp(vq);
        w.kernel(v.home).phys[&v.qp.unwrap()].kind
    })
}

async fn reads(sim: &Sim, c: &[WorkRequest], vq: VqpId) {
    for wr in c {
        ops::post_send(sim, vq, vec![wr.clone()]).await.unwrap();
        assert_eq!(ops::wait_completion(sim, vq).await.status, WcStatus::Ok);
    }
}

#[test]
fn busy_peer_is_promoted_to_rc_on_both_sides() {
    let c = cluster(2);
    let srv = c.server(1, 7);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 7));
    let threshold = c.sim.with(|w| w.fabric.cost.bgd_threshold) as usize;
    let wrs: Vec<_> = (0..threshold as u64 - 1).map(|i| c.read(i, 1, 64 * i, 8)).collect();
    let last = c.read(999, 1, 0, 8);
    let mem0 = c.sim.with(|w| (w.fabric.mem_bytes(a), w.fabric.mem_bytes(b.gid)));
    let (client, reply) = c
        .sim
        .run({
            let sim = sim.clone();
            async move {
                let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
                ops::qconnect(&sim, vq, b).await.unwrap();
                // give the server a reply VQP toward the client
                ops::post_recv(&sim, srv, vec![RecvBuffer { addr: USER_BASE, len: 64, tag: 0 }])
                    .await
                    .unwrap();
                let hello = WorkRequest::send(1, LocalBuf { addr: USER_BASE, len: 8 });
                ops::post_send(&sim, vq, vec![hello]).await.unwrap();
                ops::wait_completion(&sim, vq).await;
                ops::wait_msgs(&sim, srv).await;
                let reply = ops::qpop_msgs(&sim, srv).await.unwrap()[0].0;
                reads(&sim, &wrs, vq).await;
                assert_eq!(sim.with(|w| w.kernel(a).stats.promotions), 0);
                reads(&sim, &[last], vq).await;
                (vq, reply)
            }
        })
        .unwrap();
    c.sim.run_until_idle().unwrap();
    assert_eq!(c.sim.with(|w| w.kernel(a).stats.promotions), 1);
    assert_eq!(kind(&sim, client), QpKind::Rc);
    assert_eq!(kind(&sim, reply), QpKind::Rc);
    let rc = c.sim.with(|w| w.fabric.cost.rc_qp_mem_bytes);
    let mem1 = c.sim.with(|w| (w.fabric.mem_bytes(a), w.fabric.mem_bytes(b.gid)));
    assert_eq!(mem1, (mem0.0 + rc, mem0.1 + rc));
}

#[test]
fn lru_reclaim_moves_users_back_and_frees_the_qp() {
    let cost = CostModel {
        bgd_rc_capacity: 1,
        ..CostModel::default()
    };
    let c = cluster_with(cost, 3);
    c.server(1, 7);
    c.server(2, 7);
    let (sim, a) = (c.sim.clone(), c.nodes[0]);
    let (b1, b2) = (c.addr(1, 7), c.addr(2, 7));
    let mem0 = c.sim.with(|w| w.fabric.mem_bytes(a));
    let (v1, v2) = c
        .sim
        .run({
            let sim = sim.clone();
            async move {
                let v1 = ops::vqp_create(&sim, a, 0).await.unwrap();
                ops::qconnect(&sim, v1, b1).await.unwrap();
                let v2 = ops::vqp_create(&sim, a, 0).await.unwrap();
                ops::qconnect(&sim, v2, b2).await.unwrap();
                transfer::promote(&sim, a, 0, b1.gid).await;
                assert_eq!(kind(&sim, v1), QpKind::Rc);
                // v1's QP is now the least recently used one
                transfer::promote(&sim, a, 0, b2.gid).await;
                (v1, v2)
            }
        })
        .unwrap();
    c.sim.run_until_idle().unwrap();
    let stats = c.sim.with(|w| w.kernel(a).stats.clone());
    assert_eq!((stats.promotions, stats.reclaims), (2, 1));
    assert_eq!(kind(&sim, v1), QpKind::Dc);
    assert_eq!(kind(&sim, v2), QpKind::Rc);
    let rc = c.sim.with(|w| w.fabric.cost.rc_qp_mem_bytes);
    assert_eq!(c.sim.with(|w| w.fabric.mem_bytes(a)), mem0 + rc);
    // peer 1 released and destroyed its side too
    let peer_rcs = c.sim.with(|w| {
        let k = w.kernel(b1.gid);
        k.phys.values().filter(|p| p.kind == QpKind::Rc).count()
    });
    assert_eq!(peer_rcs, 0);
    // and traffic still flows over DC
    let wr = c.read(5, 1, 0, 8);
    let st = c
        .sim
        .run(async move {
            ops::post_send(&sim, v1, vec![wr]).await.unwrap();
            ops::wait_completion(&sim, v1).await.status
        })
        .unwrap();
    assert_eq!(st, WcStatus::Ok);
}

#[test]
fn unacknowledged_transfer_keeps_the_old_qp() {
    let c = cluster(2);
    c.server(1, 7);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 7));
    let wr = c.read(1, 1, 0, 8);
    let (r, kind_after, st) = c
        .sim
        .run({
            let sim = sim.clone();
            async move {
                let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
                ops::qconnect(&sim, vq, b).await.unwrap();
                let (rc, _) = transfer::add_rc_pair(&sim, a, 0, b.gid).await.unwrap();
                sim.with(|w| w.kernel_mut(b.gid).drop_control = true);
                let r = transfer::transfer_physical_qp(&sim, vq, rc).await;
                let k = kind(&sim, vq);
                ops::post_send(&sim, vq, vec![wr]).await.unwrap();
                (r, k, ops::wait_completion(&sim, vq).await.status)
            }
        })
        .unwrap();
    assert!(matches!(r, Err(TransferError::Timeout(_))), "{r:?}");
    assert_eq!(kind_after, QpKind::Dc);
    assert_eq!(st, WcStatus::Ok);
    assert_eq!(c.sim.with(|w| w.kernel(a).stats.transfer_aborts), 1);
}

#[test]
fn transfer_to_foreign_qp_is_refused() {
    let c = cluster(3);
    c.server(1, 7);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 7));
    let other: Gid = c.nodes[2];
    let r = c
        .sim
        .run(async move {
            let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
            ops::qconnect(&sim, vq, b).await.unwrap();
            // an RC pair toward a different peer
            let (rc, _) = transfer::add_rc_pair(&sim, a, 0, other).await.unwrap();
            transfer::transfer_physical_qp(&sim, vq, rc).await
        })
        .unwrap();
    assert!(matches!(r, Err(TransferError::ForeignQp(_))), "{r:?}");
}
