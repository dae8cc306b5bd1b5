use vqp_core::conformance::messaging::{buf, lease_probe, one_message};
use vqp_core::conformance::*;
use vqp_core::nic::{LocalBuf, WcStatus, WorkRequest};
use vqp_core::vplane::{ops, VqpError};

#[test]
fn small_message_is_one_send() {
    let (got, sends, reads, st) = one_message(200);
    assert_eq!(st, WcStatus::Ok);
    assert_eq!(got, (0..200u32).map(|i| (i % 251) as u8).collect::<Vec<_>>());
    assert_eq!((sends, reads), (1, 0));
}

#[test]
fn threshold_message_is_still_inline() {
    let (got, sends, reads, _) = one_message(16 * 1024);
    assert_eq!(got.len(), 16 * 1024);
    assert_eq!((sends, reads), (1, 0));
}

#[test]
fn large_message_is_descriptor_plus_read() {
    let len = 16 * 1024 + 1;
    let (got, sends, reads, st) = one_message(len);
    assert_eq!(st, WcStatus::Ok);
    assert_eq!(got, (0..len).map(|i| (i % 251) as u8).collect::<Vec<_>>());
    assert_eq!((sends, reads), (1, 1));
}

#[test]
fn reply_reaches_original_sender_without_lookup() {
    let c = cluster(2);
    let srv = c.server(1, 80);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 80));
    c.sim.with(|w| {
        w.fabric.memory_mut(a).write(USER_BASE, b"ping");
        w.fabric.memory_mut(b.gid).write(USER_BASE, b"pong");
    });
    let (reply, lookups) = c
        .sim
        .run(async move {
            let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
            ops::qconnect(&sim, vq, b).await.unwrap();
            ops::post_recv(&sim, srv, vec![buf(USER_BASE + 4096, 64)]).await.unwrap();
            ops::post_recv(&sim, vq, vec![buf(USER_BASE + 4096, 64)]).await.unwrap();
            let send = |id, addr| WorkRequest::send(id, LocalBuf { addr, len: 4 });
            ops::post_send(&sim, vq, vec![send(1, USER_BASE)]).await.unwrap();
            ops::wait_msgs(&sim, srv).await;
            let (from, m) = ops::qpop_msgs(&sim, srv).await.unwrap()[0];
            assert_eq!(m.byte_len, 4);
            let before = sim.with(|w| w.kernel(b.gid).stats.meta_lookups);
            ops::post_send(&sim, from, vec![send(2, USER_BASE)]).await.unwrap();
            assert_eq!(ops::wait_completion(&sim, from).await.status, WcStatus::Ok);
            ops::wait_msgs(&sim, vq).await;
            let (back, m) = ops::qpop_msgs(&sim, vq).await.unwrap()[0];
            assert_eq!(back, vq);
            let after = sim.with(|w| w.kernel(b.gid).stats.meta_lookups);
            (
                sim.with(|w| w.fabric.memory(a).read(m.buf.addr, 4)),
                after - before,
            )
        })
        .unwrap();
    assert_eq!(reply, b"pong");
    assert_eq!(lookups, 0);
}

#[test]
fn truncated_copy_reports_local_error() {
    let c = cluster(2);
    let srv = c.server(1, 80);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 80));
    let st = c
        .sim
        .run(async move {
            let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
            ops::qconnect(&sim, vq, b).await.unwrap();
            ops::post_recv(&sim, srv, vec![buf(USER_BASE, 16)]).await.unwrap();
            let wr = WorkRequest::send(1, LocalBuf { addr: USER_BASE, len: 100 });
            ops::post_send(&sim, vq, vec![wr]).await.unwrap();
            ops::wait_msgs(&sim, srv).await;
            ops::qpop_msgs(&sim, srv).await.unwrap()[0].1.status
        })
        .unwrap();
    assert_eq!(st, WcStatus::LocErr);
}

#[test]
fn messages_to_unknown_port_are_dropped() {
    let c = cluster(2);
    let srv = c.server(1, 80);
    let (sim, a) = (c.sim.clone(), c.nodes[0]);
    let b = c.addr(1, 80);
    let dropped = c
        .sim
        .run(async move {
            let vq = ops::vqp_create(&sim, a, 0).await.unwrap();
            ops::qconnect(&sim, vq, b).await.unwrap();
            // the server goes away after the sender resolved it
            sim.with(|w| {
                let k = w.kernel_mut(b.gid);
                k.ports.remove(&80);
            });
            let wr = WorkRequest::send(1, LocalBuf { addr: USER_BASE, len: 8 });
            ops::post_send(&sim, vq, vec![wr]).await.unwrap();
            ops::wait_completion(&sim, vq).await;
            sim.run_until(sim.now() + 10_000).ok();
            sim.with(|w| w.kernel(b.gid).stats.dropped_msgs)
        })
        .unwrap();
    let _ = srv;
    assert_eq!(dropped, 1);
}

#[test]
fn lease_boundary() {
    let (early, late) = lease_probe();
    assert!(early.is_ok(), "{early:?}");
    assert!(matches!(late, Err(VqpError::Rejected { index: 0, .. })), "{late:?}");
}
