//! Kernel receive path: pre-posted buffers and dispatch of inbound messages
//! to the VQP bound on the destination port.

use crate::addr::Gid;
use crate::nic::{Qpn, RecvBuffer, RecvTarget};
use crate::world::{WaitKey, World};

use super::datapath::slot_bytes;
use super::header::{Descriptor, Header};
use super::kernel::RECV_BASE;
use super::{HeldBuffer, Inbound};

/// Posts the node's kernel receive buffers on its DCT target.
pub fn post_kernel_buffers(w: &mut World, gid: Gid) {
    let n = w.fabric.cost.kernel_backlog as u64;
    let dct = w.kernel(gid).node_target.dct_num;
    for buf in alloc_buffers(w, gid, n) {
        w.fabric
            .post_dct_recv(gid, dct, buf)
            .expect("node dct target exists");
    }
}

/// Posts kernel receive buffers on a freshly pooled RC QP.
pub(crate) fn post_rc_buffers(w: &mut World, gid: Gid, qpn: Qpn) {
    let n = w.fabric.cost.kernel_backlog as u64;
    for buf in alloc_buffers(w, gid, n) {
        w.fabric.post_recv(qpn, buf).expect("rc qp exists");
    }
}

fn alloc_buffers(w: &mut World, gid: Gid, n: u64) -> Vec<RecvBuffer> {
    let slot = slot_bytes(w);
    let k = w.kernel_mut(gid);
    let first = k.recv_next;
    k.recv_next += n;
    (first..first + n)
        .map(|i| RecvBuffer {
            addr: RECV_BASE + i * slot,
            len: slot as u32,
            tag: i,
        })
        .collect()
}

pub(crate) fn repost(w: &mut World, gid: Gid, held: HeldBuffer) {
    match held.target {
        RecvTarget::Dct(n) => {
            let _ = w.fabric.post_dct_recv(gid, n, held.buf);
        }
        RecvTarget::Qp(q) => {
            if let Some(ps) = w.kernel_mut(gid).phys.get_mut(&q) {
                ps.held_msgs = ps.held_msgs.saturating_sub(1);
            }
            // the QP may have been reclaimed meanwhile
            if w.fabric.qp_exists(q) {
                let _ = w.fabric.post_recv(q, held.buf);
            }
        }
    }
}

/// Moves every received message on `gid` into the inbox of its destination VQP.
pub fn absorb_inbound(w: &mut World, gid: Gid) {
    while let Some(rc) = w.fabric.poll_recv(gid) {
        let held = HeldBuffer {
            target: rc.target,
            buf: rc.buf,
        };
        let port = rc.imm as u16;
        let parsed = Header::decode(&rc.data).ok().map(|(h, body)| (h, body.to_vec()));
        let dest = w.kernel(gid).ports.get(&port).copied();
        let (Some((h, body)), Some(vq)) = (parsed, dest) else {
            w.kernel_mut(gid).stats.dropped_msgs += 1;
            repost(w, gid, held);
            continue;
        };
        let sender_meta = crate::nic::DctTarget {
            dct_num: h.dct_num,
            dct_key: h.dct_key,
            owner: h.sender.gid,
        };
        let mut msg = Inbound {
            sender: h.sender,
            sender_meta,
            zero_copy: h.is_zero_copy(),
            payload: Vec::new(),
            src_addr: 0,
            size: 0,
            held: Some(held),
        };
        if msg.zero_copy {
            match Descriptor::decode(&body) {
                Some(d) => {
                    msg.src_addr = d.src_addr;
                    msg.size = d.size;
                }
                None => {
                    w.kernel_mut(gid).stats.dropped_msgs += 1;
                    repost(w, gid, held);
                    continue;
                }
            }
        } else {
            msg.size = body.len() as u32;
            msg.payload = body;
        }
        if let RecvTarget::Qp(q) = rc.target {
            if let Some(ps) = w.kernel_mut(gid).phys.get_mut(&q) {
                ps.held_msgs += 1;
            }
        }
        w.vqp_mut(vq).inbox.push_back(msg);
        w.notify(WaitKey::Inbox(vq));
    }
}
