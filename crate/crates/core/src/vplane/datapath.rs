//! Request validation, wr_id rewriting, posting and completion dispatch.

use crate::addr::Gid;
use crate::nic::{
    LocalBuf, Opcode, QpKind, Qpn, WcStatus, WorkRequest, KERNEL_RKEY,
};
use crate::world::{WaitKey, World};

use super::header::{Descriptor, Header, FLAG_ZERO_COPY, HEADER_BYTES};
use super::{CompEntry, VqpError, VqpId, WrIdEncoding};

/// Outcome of a non-blocking post attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PostCheck {
    /// Posted; carries the peer to promote if this post crossed the threshold.
    Posted { promote: Option<Gid> },
    /// Not enough free slots and the CQ is empty: wait for a completion.
    NeedDrain(Qpn),
    /// These remote MRs must be fetched from the meta server first.
    NeedMr(Vec<(Gid, u32)>),
}

/// Bytes reserved per kernel message buffer (header + inline payload).
pub(crate) fn slot_bytes(w: &World) -> u64 {
    (w.fabric.cost.kernel_buf_bytes + HEADER_BYTES as u64).next_multiple_of(64)
}

fn local_ok(w: &World, gid: Gid, addr: u64, len: u64, write: bool) -> bool {
    w.meta
        .mr_entries
        .range((gid, 0)..=(gid, u32::MAX))
        .any(|(_, e)| e.allows(addr, len, write))
}

/// Checks every request; nothing is posted if any fails. Remote MRs absent
/// from the MRStore are returned for lookup.
pub(crate) fn validate(
    w: &mut World,
    vq: VqpId,
    wrs: &[WorkRequest],
) -> Result<Vec<(Gid, u32)>, VqpError> {
    let now = w.fabric.now();
    let (home, peer) = {
        let v = w.vqp(vq);
        let peer = v.peer.ok_or(VqpError::NotConnected(vq))?;
        (v.home, peer)
    };
    let mut missing = Vec::new();
    for (index, wr) in wrs.iter().enumerate() {
        let reject = |reason| VqpError::Rejected { index, reason };
        match wr.op {
            Opcode::Read | Opcode::Write | Opcode::Send => {}
            Opcode::Unsupported(_) => return Err(reject("operation not supported")),
        }
        if wr.dct_route.is_some() {
            return Err(reject("routing is managed by the kernel"));
        }
        let len = wr.local.len as u64;
        if len > 0 && !local_ok(w, home, wr.local.addr, len, wr.op == Opcode::Read) {
            return Err(reject("local buffer outside a valid memory region"));
        }
        match wr.op {
            Opcode::Send => {
                if wr.remote.is_some() {
                    return Err(reject("send with remote address"));
                }
            }
            _ => {
                let r = wr.remote.ok_or_else(|| reject("missing remote address"))?;
                if r.rkey == KERNEL_RKEY {
                    return Err(reject("reserved rkey"));
                }
                let k = w.kernel_mut(home);
                match k.cached_mr(peer.gid, r.rkey, now) {
                    Some(e) => {
                        if !e.allows(r.addr, len, wr.op == Opcode::Write) {
                            return Err(reject("remote memory region invalid"));
                        }
                    }
                    None => {
                        if !missing.contains(&(peer.gid, r.rkey)) {
                            missing.push((peer.gid, r.rkey));
                        }
                    }
                }
            }
        }
    }
    Ok(missing)
}

/// Validates, drains until the list fits, then posts. Never blocks.
pub(crate) fn try_post(
    w: &mut World,
    vq: VqpId,
    wrs: &[WorkRequest],
) -> Result<PostCheck, VqpError> {
    if wrs.is_empty() {
        return Err(VqpError::EmptyList);
    }
    let missing = validate(w, vq, wrs)?;
    if !missing.is_empty() {
        return Ok(PostCheck::NeedMr(missing));
    }
    let (home, qpn) = {
        let v = w.vqp(vq);
        (v.home, v.qp.ok_or(VqpError::NotConnected(vq))?)
    };
    loop {
        let free = w.kernel(home).phys[&qpn].free_slots();
        if free >= wrs.len() as u64 {
            break;
        }
        w.kernel_mut(home).stats.drains += 1;
        if !poll_inner(w, home, qpn) {
            return Ok(PostCheck::NeedDrain(qpn));
        }
    }
    let promote = post_now(w, vq, wrs);
    Ok(PostCheck::Posted { promote })
}

/// Rewrites wr_ids, force-signals the tail, and hands the list to the NIC.
fn post_now(w: &mut World, vq: VqpId, wrs: &[WorkRequest]) -> Option<Gid> {
    let now = w.fabric.now();
    let (home, cpu, qpn, peer, route) = {
        let v = w.vqp(vq);
        (
            v.home,
            v.cpu,
            v.qp.expect("connected"),
            v.peer.expect("connected"),
            v.dct_meta,
        )
    };
    let is_dc = w.kernel(home).phys[&qpn].kind == QpKind::Dc;
    let mut out = Vec::with_capacity(wrs.len());
    let mut unsignaled_cnt: u32 = 0;
    for wr in wrs {
        let mut p = wr.clone();
        if wr.op == Opcode::Send {
            let (local, imm) = stage_message(w, vq, wr);
            p.local = local;
            p.imm = imm;
        }
        if is_dc {
            p.dct_route = Some(route.expect("DC vqp has metadata").into());
        }
        if wr.signaled {
            w.vqp_mut(vq).comp_queue.push_back(CompEntry {
                ready: false,
                user_wr_id: wr.wr_id,
                status: WcStatus::Ok,
            });
            p.wr_id = WrIdEncoding::new(Some(vq), unsignaled_cnt + 1).encode();
            unsignaled_cnt = 0;
        } else {
            unsignaled_cnt += 1;
            p.wr_id = WrIdEncoding {
                unsignaled: true,
                ..WrIdEncoding::new(Some(vq), unsignaled_cnt)
            }
            .encode();
        }
        out.push(p);
    }
    if unsignaled_cnt > 0 {
        let tail = out.last_mut().expect("non-empty");
        tail.signaled = true;
        tail.wr_id = WrIdEncoding::new(None, unsignaled_cnt).encode();
    }
    let n = out.len() as u64;
    let k = w.kernel_mut(home);
    let ps = k.phys.get_mut(&qpn).expect("pooled qp");
    ps.uncomp_cnt += n;
    ps.posted_total += n;
    ps.last_use = now;
    let mut promote = None;
    for _ in 0..n {
        if k.bgd.record(cpu, peer.gid, now) {
            promote = Some(peer.gid);
        }
    }
    w.fabric.post_send(qpn, out).expect("pooled qp exists");
    promote
}

/// Copies header + payload (or a zero-copy descriptor) into a kernel send slot.
fn stage_message(w: &mut World, vq: VqpId, wr: &WorkRequest) -> (LocalBuf, u32) {
    let slot = slot_bytes(w);
    let kernel_buf = w.fabric.cost.kernel_buf_bytes;
    let (home, peer) = {
        let v = w.vqp(vq);
        (v.home, v.peer.expect("connected"))
    };
    let sender = ensure_bound(w, vq);
    let target = w.kernel(home).node_target;
    let len = wr.local.len as u64;
    let (flags, body) = if len > kernel_buf {
        let d = Descriptor {
            src_addr: wr.local.addr,
            size: wr.local.len,
            dest_vqp: 0,
        };
        (FLAG_ZERO_COPY, d.encode().to_vec())
    } else {
        (0, w.fabric.memory(home).read(wr.local.addr, len))
    };
    let h = Header {
        sender,
        dct_num: target.dct_num,
        dct_key: target.dct_key,
        flags,
        payload_len: body.len() as u32,
    };
    let bytes = h.encode(&body);
    let addr = w.kernel_mut(home).next_send_slot(slot);
    w.fabric.memory_mut(home).write(addr, &bytes);
    (
        LocalBuf {
            addr,
            len: bytes.len() as u32,
        },
        peer.port as u32,
    )
}

/// Gives a sending VQP an address replies can reach (ephemeral if unbound).
pub(crate) fn ensure_bound(w: &mut World, vq: VqpId) -> crate::addr::NodeId {
    if let Some(a) = w.vqp(vq).bound_addr {
        return a;
    }
    let home = w.vqp(vq).home;
    let k = w.kernel_mut(home);
    let port = k.alloc_ephemeral();
    k.ports.insert(port, vq);
    let a = crate::addr::NodeId::new(home, port);
    w.vqp_mut(vq).bound_addr = Some(a);
    a
}

/// Polls the physical CQ once and dispatches the decoded completion.
/// Returns false if the CQ was empty.
pub fn poll_inner(w: &mut World, home: Gid, qpn: Qpn) -> bool {
    let Some(c) = w.fabric.poll_cq(qpn) else {
        return false;
    };
    let enc = WrIdEncoding::decode(c.wr_id);
    let k = w.kernel_mut(home);
    let ps = k.phys.get_mut(&qpn).expect("pooled qp");
    let freed = (enc.comp_cnt - ps.credit) as u64;
    ps.credit = if enc.unsignaled { enc.comp_cnt } else { 0 };
    debug_assert_eq!(freed, c.slots_freed, "wr_id slot count disagrees with the NIC");
    ps.uncomp_cnt -= freed;
    ps.decoded_total += freed;
    if freed > 0 {
        // posters waiting for room may not be the ones polling
        w.notify(WaitKey::Cq(qpn));
    }
    match enc.vqp {
        Some(id) if enc.fence => {
            if let Some(v) = w.vqps.get_mut(&id) {
                v.fence_done = true;
            }
            w.notify(WaitKey::Vqp(id));
        }
        Some(id) => {
            if let Some(v) = w.vqps.get_mut(&id) {
                let pos = v.comp_queue.iter().position(|e| !e.ready);
                if enc.unsignaled {
                    let e = CompEntry {
                        ready: true,
                        user_wr_id: 0,
                        status: c.status,
                    };
                    match pos {
                        Some(i) => v.comp_queue.insert(i, e),
                        None => v.comp_queue.push_back(e),
                    }
                } else {
                    let i = pos.expect("completion for a VQP with no outstanding entry");
                    v.comp_queue[i].ready = true;
                    v.comp_queue[i].status = c.status;
                }
            }
            w.notify(WaitKey::Vqp(id));
        }
        None => {
            if c.status != WcStatus::Ok {
                w.kernel_mut(home).stats.unattributed_errors += 1;
            }
        }
    }
    true
}
