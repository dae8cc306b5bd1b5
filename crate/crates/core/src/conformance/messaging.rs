//! Two-sided messaging and MR lease probes.

use super::{cluster, USER_BASE};
use crate::nic::{LocalBuf, RecvBuffer, WcStatus, WorkRequest};
use crate::vplane::{ops, VqpError};

pub fn buf(addr: u64, len: u32) -> RecvBuffer {
    RecvBuffer { addr, len, tag: 0 }
}

/// Sends `len` patterned bytes from node 0 to a server on node 1 and pops
/// them there. Returns the received bytes, the sends and READs on the wire
/// during the exchange, and the receive status.
pub fn one_message(len: u32) -> (Vec<u8>, u64, u64, WcStatus) {
    let c = cluster(2);
    let srv = c.server(1, 80);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 80));
    let data: Vec<u8> = (0..len).map(|i| (i % 251) as u8).collect();
    c.sim.with(|w| w.fabric.memory_mut(a).write(USER_BASE, &data));
    c.sim
        .run(async move {
            let vq = ops::vqp_create(&sim, a, 0).await.expect("probe");
            ops::qconnect(&sim, vq, b).await.expect("probe");
            ops::post_recv(&sim, srv, vec![buf(USER_BASE, 1 << 20)])
                .await
                .expect("probe");
            let (s0, r0) = sim.with(|w| (w.fabric.tap.sends, w.fabric.tap.reads));
            let wr = WorkRequest::send(5, LocalBuf { addr: USER_BASE, len });
            ops::post_send(&sim, vq, vec![wr]).await.expect("probe");
            assert_eq!(ops::wait_completion(&sim, vq).await.wr_id, 5);
            ops::wait_msgs(&sim, srv).await;
            let msgs = ops::qpop_msgs(&sim, srv).await.expect("probe");
            assert_eq!(msgs.len(), 1);
            let m = msgs[0].1;
            let (s1, r1) = sim.with(|w| (w.fabric.tap.sends, w.fabric.tap.reads));
            let got = sim.with(|w| w.fabric.memory(b.gid).read(m.buf.addr, m.byte_len as u64));
            (got, s1 - s0, r1 - r0, m.status)
        })
        .expect("probe")
}

/// Deregisters a remote MR right after caching it, then posts a READ one ns
/// before and one ns after the cached entry's lease runs out.
pub fn lease_probe() -> (Result<(), VqpError>, Result<(), VqpError>) {
    let c = cluster(2);
    let (sim, a, b) = (c.sim.clone(), c.nodes[0], c.addr(1, 7));
    c.server(1, 7);
    let rkey = c.mrs[1].rkey;
    let read = c.read(1, 1, 0, 8);
    c
        .sim
        .run(async move {
            let lease = sim.with(|w| w.fabric.cost.lease_ns);
            let vq = ops::vqp_create(&sim, a, 0).await.expect("probe");
            ops::qconnect(&sim, vq, b).await.expect("probe");
            // warm the MRStore entry, then deregister at the same instant
            assert!(ops::check_remote_mr(&sim, a, b.gid, rkey).await.is_some());
            let cached_at = sim.now();
            ops::deregister_mr(&sim, b.gid, rkey);
            sim.sleep_until(cached_at + lease - 1).await;
            let early = ops::post_send_inner(&sim, vq, vec![read.clone()]).await;
            let done = ops::wait_completion_inner(&sim, vq).await;
            assert_eq!(done.status, WcStatus::Ok);
            sim.sleep_until(cached_at + lease + 1).await;
            let late = ops::post_send_inner(&sim, vq, vec![read]).await;
            (early, late)
        })
        .expect("simulation")
}
