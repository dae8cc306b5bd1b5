//! User-facing virtualized QP calls. Each charges its kernel-crossing cost
//! and waits on simulated time where the real call would block.

use crate::addr::{Gid, NodeId};
use crate::exec::{join_all, Sim};
use crate::meta::{MetaError, MrEntry};
use crate::nic::{
    DctTarget, LocalBuf, MemoryRegion, Perms, QpKind, Qpn, RecvBuffer, RemoteBuf, WcStatus,
    WorkRequest, KERNEL_RKEY,
};
use crate::world::{WaitKey, World, META_BASE};

use super::datapath::{poll_inner, try_post, validate, PostCheck};
use super::inbound::repost;
use super::wrid::MAX_VQP_ID;
use super::{Message, VCompletion, Vqp, VqpError, VqpId};

// ----- creation & connection ------------------------------------------------

/// Allocates a VQP with no cost (setup code outside measured paths).
pub fn vqp_create_now(w: &mut World, node: Gid, cpu: usize) -> Result<VqpId, VqpError> {
    if !w.kernels.contains_key(&node) {
        return Err(VqpError::NoKernel(node));
    }
    if w.next_vqp > MAX_VQP_ID {
        return Err(VqpError::IdsExhausted);
    }
    let id = VqpId(w.next_vqp);
    w.next_vqp += 1;
    w.vqps.insert(id, Vqp::new(id, node, cpu));
    Ok(id)
}

pub async fn vqp_create(sim: &Sim, node: Gid, cpu: usize) -> Result<VqpId, VqpError> {
    let d = sim.with(|w| w.fabric.cost.ctrl_syscall_ns);
    sim.sleep(d).await;
    sim.with(|w| vqp_create_now(w, node, cpu))
}

pub async fn qconnect(sim: &Sim, vq: VqpId, addr: NodeId) -> Result<(), VqpError> {
    let d = sim.with(|w| w.fabric.cost.ctrl_syscall_ns);
    sim.sleep(d).await;
    connect_inner(sim, vq, addr).await
}

/// Connects many VQPs in one kernel crossing; lookups proceed concurrently.
pub async fn qconnect_batch(sim: &Sim, reqs: &[(VqpId, NodeId)]) -> Vec<Result<(), VqpError>> {
    let d = sim.with(|w| w.fabric.cost.ctrl_syscall_ns);
    sim.sleep(d).await;
    join_all(reqs.iter().map(|(v, a)| connect_inner(sim, *v, *a)).collect()).await
}

/// Connection selection: an RC QP to the peer if pooled, else a DC QP plus metadata.
pub async fn connect_inner(sim: &Sim, vq: VqpId, addr: NodeId) -> Result<(), VqpError> {
    let (home, cpu) = sim.with(|w| -> Result<_, VqpError> {
        let v = w.vqps.get(&vq).ok_or(VqpError::NotConnected(vq))?;
        if v.qp.is_some() {
            return if v.peer == Some(addr) {
                Ok(None)
            } else {
                Err(VqpError::AlreadyConnected(vq))
            };
        }
        Ok(Some((v.home, v.cpu)))
    })?
    .map_or((None, 0), |(h, c)| (Some(h), c));
    let Some(home) = home else { return Ok(()) };

    let rc = sim.with(|w| {
        let k = w.kernel_mut(home);
        let q = k.home_pool(cpu).next_rc(addr.gid)?;
        let meta = k.dccache.get(&addr).copied();
        Some((q, meta))
    });
    if let Some((q, meta)) = rc {
        sim.with(|w| bind(w, vq, q, addr, meta));
        return Ok(());
    }
    let meta = lookup_dct(sim, home, addr).await?;
    sim.with(|w| {
        let q = w.kernel_mut(home).home_pool(cpu).next_dc();
        bind(w, vq, q, addr, Some(meta));
    });
    Ok(())
}

fn bind(w: &mut World, vq: VqpId, q: Qpn, addr: NodeId, meta: Option<DctTarget>) {
    let home = w.vqp(vq).home;
    w.kernel_mut(home)
        .phys
        .get_mut(&q)
        .expect("pooled")
        .users
        .insert(vq);
    let v = w.vqp_mut(vq);
    v.qp = Some(q);
    v.peer = Some(addr);
    if meta.is_some() {
        v.dct_meta = meta;
    }
}

/// DCCache lookup, falling back to the meta server (one lookup per address
/// per node even under concurrency).
pub async fn lookup_dct(sim: &Sim, home: Gid, addr: NodeId) -> Result<DctTarget, MetaError> {
    loop {
        let leader = sim.with(|w| {
            let k = w.kernel_mut(home);
            if let Some(t) = k.dccache.get(&addr) {
                return Err(*t);
            }
            Ok(k.lookups_in_flight.insert(addr))
        });
        match leader {
            Err(t) => return Ok(t),
            Ok(true) => break,
            Ok(false) => {
                sim.wait_until(WaitKey::Lookup(home), move |w| {
                    !w.kernel(home).lookups_in_flight.contains(&addr)
                })
                .await;
                let hit = sim.with(|w| w.kernel(home).dccache.get(&addr).copied());
                match hit {
                    Some(t) => return Ok(t),
                    None => return Err(MetaError::NotFound(addr)),
                }
            }
        }
    }
    let slot = addr_slot(addr);
    meta_reads(sim, home, slot).await;
    sim.with(|w| {
        let r = w.meta.lookup(addr);
        let k = w.kernel_mut(home);
        k.lookups_in_flight.remove(&addr);
        k.stats.meta_lookups += 1;
        if let Ok(t) = r {
            k.dccache.insert(addr, t);
        }
        w.notify(WaitKey::Lookup(home));
        r
    })
}

fn addr_slot(addr: NodeId) -> u64 {
    (addr.gid.node_index() as u64 * 131 + addr.port as u64) % 4096
}

/// `lookup_round_trips` dependent READs against the meta server index.
async fn meta_reads(sim: &Sim, home: Gid, slot: u64) {
    let (rounds, bytes) = sim.with(|w| (w.meta.lookup_round_trips, w.fabric.cost.meta_read_bytes));
    for r in 0..rounds as u64 {
        let (token, qpn) = sim.with(|w| {
            let token = w.token();
            let mr = w.meta_mr.clone();
            let k = w.kernel_mut(home);
            let local = k.next_scratch(bytes);
            let qpn = k.meta_qp;
            let off = ((slot + r * 977) * bytes) % (mr.length - bytes);
            let wr = WorkRequest::read(
                token,
                LocalBuf {
                    addr: local,
                    len: bytes as u32,
                },
                RemoteBuf {
                    addr: META_BASE + off,
                    rkey: mr.rkey,
                },
            );
            w.fabric.post_send(qpn, vec![wr]).expect("meta qp");
            (token, qpn)
        });
        await_kernel_op(sim, home, qpn, token).await;
    }
}

/// Waits for a kernel-internal request on `qpn` (meta or kernel QP).
async fn await_kernel_op(sim: &Sim, home: Gid, qpn: Qpn, token: u64) -> WcStatus {
    let mut status = WcStatus::Ok;
    let st = &mut status;
    sim.wait_until(WaitKey::Cq(qpn), move |w| {
        while let Some(c) = w.fabric.poll_cq(qpn) {
            w.kernel_mut(home).kdone.insert(c.wr_id, c.status);
        }
        match w.kernel_mut(home).kdone.remove(&token) {
            Some(s) => {
                *st = s;
                true
            }
            None => false,
        }
    })
    .await;
    status
}

/// RPC-based lookup used as a comparison baseline: request datagram, single
/// server worker, reply datagram.
pub async fn rpc_lookup_dct(sim: &Sim, home: Gid, addr: NodeId) -> Result<DctTarget, MetaError> {
    let arrive = sim.with(|w| {
        let m = w.meta_node;
        w.fabric.datagram(home, m, 64)
    });
    sim.sleep_until(arrive).await;
    let done = sim.with(|w| {
        w.meta.cpu_events += 1;
        let svc = w.fabric.cost.rpc_service_ns;
        w.rpc.serve(arrive, svc)
    });
    sim.sleep_until(done).await;
    let back = sim.with(|w| {
        let m = w.meta_node;
        w.fabric.datagram(m, home, 64)
    });
    sim.sleep_until(back).await;
    sim.with(|w| w.meta.lookup(addr))
}

// ----- binding ----------------------------------------------------------------

/// Binds `vq` to (home gid, port) and publishes the node's DCT metadata for it.
pub fn qbind_now(w: &mut World, vq: VqpId, port: u16) -> Result<(), VqpError> {
    let home = w.vqp(vq).home;
    let addr = NodeId::new(home, port);
    let k = w.kernel_mut(home);
    if k.ports.contains_key(&port) {
        return Err(VqpError::AlreadyBound(addr));
    }
    k.ports.insert(port, vq);
    let target = k.node_target;
    let v = w.vqp_mut(vq);
    if let Some(old) = v.bound_addr {
        // an ephemeral address is replaced by the explicit one
        w.kernel_mut(home).ports.remove(&old.port);
    }
    let v = w.vqp_mut(vq);
    v.bound_addr = Some(addr);
    v.explicitly_bound = true;
    w.meta.broadcast_meta(addr, target);
    Ok(())
}

pub async fn qbind(sim: &Sim, vq: VqpId, port: u16) -> Result<(), VqpError> {
    let d = sim.with(|w| w.fabric.cost.ctrl_syscall_ns);
    sim.sleep(d).await;
    sim.with(|w| qbind_now(w, vq, port))
}

// ----- memory regions -----------------------------------------------------------

/// Registers an MR and records it in ValidMR before returning.
pub fn register_mr_now(
    w: &mut World,
    gid: Gid,
    base: u64,
    length: u64,
    perms: Perms,
) -> Result<MemoryRegion, VqpError> {
    let mr = w.fabric.register_mr(gid, base, length, perms)?;
    w.meta.record_mr(gid, mr.rkey, base, length, perms);
    Ok(mr)
}

pub async fn register_mr(
    sim: &Sim,
    gid: Gid,
    base: u64,
    length: u64,
    perms: Perms,
) -> Result<MemoryRegion, VqpError> {
    let d = sim.with(|w| w.fabric.cost.register_mr_ns);
    sim.sleep(d).await;
    sim.with(|w| register_mr_now(w, gid, base, length, perms))
}

/// Invalidates the MR in ValidMR now; the device mapping is released once no
/// cached copy can still be trusted (two lease periods later).
pub fn deregister_mr(sim: &Sim, gid: Gid, rkey: u32) {
    let lease = sim.with(|w| {
        let now = w.fabric.now();
        w.meta.invalidate_mr(gid, rkey, now);
        w.fabric.cost.lease_ns
    });
    let s = sim.clone();
    sim.spawn(async move {
        s.sleep(2 * lease).await;
        s.with(|w| {
            let _ = w.fabric.deregister_mr(gid, rkey);
            w.meta.forget_mr(gid, rkey);
        });
    });
}

/// ValidMR query with MRStore caching. A miss costs `lookup_round_trips` READs.
pub async fn check_remote_mr(sim: &Sim, home: Gid, owner: Gid, rkey: u32) -> Option<MrEntry> {
    let now = sim.now();
    if let Some(e) = sim.with(|w| w.kernel_mut(home).cached_mr(owner, rkey, now)) {
        return Some(e).filter(|e| e.valid);
    }
    let key = (owner, rkey);
    let leader = sim.with(|w| w.kernel_mut(home).mr_lookups_in_flight.insert(key));
    if !leader {
        sim.wait_until(WaitKey::Lookup(home), move |w| {
            !w.kernel(home).mr_lookups_in_flight.contains(&key)
        })
        .await;
        let now = sim.now();
        return sim
            .with(|w| w.kernel_mut(home).cached_mr(owner, rkey, now))
            .filter(|e| e.valid);
    }
    let slot = (owner.node_index() as u64 * 7919 + rkey as u64) % 4096;
    meta_reads(sim, home, slot).await;
    sim.with(|w| {
        let now = w.fabric.now();
        let entry = w.meta.mr(owner, rkey).unwrap_or(MrEntry {
            base: 0,
            length: 0,
            perms: Perms::default(),
            valid: false,
            deregistered_at: None,
        });
        let k = w.kernel_mut(home);
        k.cache_mr(owner, rkey, entry, now);
        k.mr_lookups_in_flight.remove(&key);
        k.stats.mr_lookups += 1;
        w.notify(WaitKey::Lookup(home));
        Some(entry).filter(|e| e.valid)
    })
}

// ----- data path ------------------------------------------------------------------

/// Posts a request list: one kernel crossing, then the virtualized post.
pub async fn post_send(sim: &Sim, vq: VqpId, wrs: Vec<WorkRequest>) -> Result<(), VqpError> {
    let d = sim.with(|w| w.fabric.cost.syscall_half_ns());
    sim.sleep(d).await;
    post_send_inner(sim, vq, wrs).await
}

/// The virtualized post without crossing cost. Lists longer than the QP
/// depth are split into depth-sized segments, in order.
pub async fn post_send_inner(sim: &Sim, vq: VqpId, wrs: Vec<WorkRequest>) -> Result<(), VqpError> {
    if wrs.is_empty() {
        return Err(VqpError::EmptyList);
    }
    let home = sim.with(|w| w.vqps.get(&vq).map(|v| v.home)).ok_or(VqpError::NotConnected(vq))?;
    // validate the whole list up front so a bad request rejects everything
    loop {
        let missing = sim.with(|w| validate(w, vq, &wrs))?;
        if missing.is_empty() {
            break;
        }
        join_all(
            missing
                .iter()
                .map(|(g, r)| check_remote_mr(sim, home, *g, *r))
                .collect(),
        )
        .await;
    }
    let limit = sim.with(|w| (w.fabric.cost.sq_depth.min(w.fabric.cost.cq_depth)) as usize);
    for chunk in wrs.chunks(limit) {
        post_segment(sim, vq, chunk).await?;
    }
    Ok(())
}

async fn post_segment(sim: &Sim, vq: VqpId, wrs: &[WorkRequest]) -> Result<(), VqpError> {
    loop {
        sim.wait_until(WaitKey::Vqp(vq), move |w| !w.vqp(vq).transferring)
            .await;
        match sim.with(|w| try_post(w, vq, wrs))? {
            PostCheck::Posted { promote } => {
                if let Some(peer) = promote {
                    let (home, cpu) = sim.with(|w| (w.vqp(vq).home, w.vqp(vq).cpu));
                    let s = sim.clone();
                    sim.spawn(async move {
                        super::transfer::promote(&s, home, cpu, peer).await;
                    });
                }
                return Ok(());
            }
            PostCheck::NeedDrain(q) => {
                let (home, n) = (sim.with(|w| w.vqp(vq).home), wrs.len() as u64);
                sim.wait_until(WaitKey::Cq(q), move |w| {
                    w.fabric.cq_len(q) > 0
                        || w.kernel(home).phys.get(&q).is_none_or(|p| p.free_slots() >= n)
                })
                .await;
            }
            PostCheck::NeedMr(keys) => {
                let home = sim.with(|w| w.vqp(vq).home);
                join_all(
                    keys.iter()
                        .map(|(g, r)| check_remote_mr(sim, home, *g, *r))
                        .collect(),
                )
                .await;
            }
        }
    }
}

/// One poll_inner on the VQP's physical QP, then pop the head if Ready.
pub fn poll_cq_now(w: &mut World, vq: VqpId) -> Option<VCompletion> {
    let (home, qp) = {
        let v = w.vqp(vq);
        (v.home, v.qp)
    };
    if let Some(q) = qp {
        poll_inner(w, home, q);
    }
    w.vqp_mut(vq).pop_ready()
}

/// Non-blocking virtual poll with its kernel crossing.
pub async fn poll_cq(sim: &Sim, vq: VqpId) -> Option<VCompletion> {
    let d = sim.with(|w| w.fabric.cost.syscall_half_ns());
    sim.sleep(d).await;
    sim.with(|w| poll_cq_now(w, vq))
}

/// Blocks until the VQP's next completion is available (one crossing).
pub async fn wait_completion(sim: &Sim, vq: VqpId) -> VCompletion {
    let c = wait_completion_inner(sim, vq).await;
    let d = sim.with(|w| w.fabric.cost.syscall_half_ns());
    sim.sleep(d).await;
    c
}

pub async fn wait_completion_inner(sim: &Sim, vq: VqpId) -> VCompletion {
    loop {
        if let Some(c) = sim.with(|w| poll_cq_now(w, vq)) {
            return c;
        }
        let qp = sim.with(|w| w.vqp(vq).qp);
        let mut keys = vec![WaitKey::Vqp(vq)];
        if let Some(q) = qp {
            keys.push(WaitKey::Cq(q));
        }
        sim.wait_until_any(keys, move |w| {
            let v = w.vqp(vq);
            v.comp_queue.front().is_some_and(|e| e.ready)
                || v.qp != qp
                || v.qp.is_some_and(|q| w.fabric.cq_len(q) > 0)
        })
        .await;
    }
}

// ----- two-sided ----------------------------------------------------------------

pub fn post_recv_now(w: &mut World, vq: VqpId, bufs: &[RecvBuffer]) -> Result<(), VqpError> {
    if bufs.iter().any(|b| b.len == 0) {
        return Err(VqpError::Argument("zero-length receive buffer"));
    }
    let v = w.vqp_mut(vq);
    if v.bound_addr.is_none() && v.qp.is_none() {
        return Err(VqpError::NotBound(vq));
    }
    v.recv_queue.extend(bufs.iter().copied());
    w.notify(WaitKey::Inbox(vq));
    Ok(())
}

pub async fn post_recv(sim: &Sim, vq: VqpId, bufs: Vec<RecvBuffer>) -> Result<(), VqpError> {
    let d = sim.with(|w| w.fabric.cost.syscall_half_ns());
    sim.sleep(d).await;
    sim.with(|w| post_recv_now(w, vq, &bufs))
}

/// Blocks until `vq` has at least one kernel-held message.
pub async fn wait_msgs(sim: &Sim, vq: VqpId) {
    sim.wait_until(WaitKey::Inbox(vq), move |w| !w.vqp(vq).inbox.is_empty())
        .await;
}

/// Delivers held messages into posted user buffers. Each new sender gets a
/// VQP connected back to it from the piggybacked metadata (no lookup).
pub async fn qpop_msgs(sim: &Sim, vq: VqpId) -> Result<Vec<(VqpId, Message)>, VqpError> {
    let d = sim.with(|w| w.fabric.cost.syscall_half_ns());
    sim.sleep(d).await;
    let mut out = Vec::new();
    loop {
        let next = sim.with(|w| {
            let v = w.vqp_mut(vq);
            if v.inbox.is_empty() || v.recv_queue.is_empty() {
                return None;
            }
            Some((v.inbox.pop_front().expect("msg"), v.recv_queue.pop_front().expect("buf")))
        });
        let Some((msg, buf)) = next else { break };
        let src = sim.with(|w| sender_vqp(w, vq, msg.sender, msg.sender_meta))?;
        let home = sim.with(|w| w.vqp(vq).home);
        let message = if msg.zero_copy {
            recv_zero_copy(sim, home, &msg, buf).await
        } else {
            let n = msg.payload.len().min(buf.len as usize);
            let cost = sim.with(|w| {
                w.fabric.memory_mut(home).write(buf.addr, &msg.payload[..n]);
                let k = w.kernel_mut(home);
                k.stats.copies += 1;
                k.stats.copied_bytes += n as u64;
                w.fabric.cost.copy_ns(n as u64)
            });
            sim.sleep(cost).await;
            let status = if n < msg.payload.len() {
                WcStatus::LocErr
            } else {
                WcStatus::Ok
            };
            Message {
                buf,
                byte_len: n as u32,
                status,
            }
        };
        if let Some(h) = msg.held {
            sim.with(|w| repost(w, home, h));
        }
        out.push((src, message));
    }
    Ok(out)
}

/// The reply VQP for `sender`, creating and connecting one on first contact.
fn sender_vqp(w: &mut World, vq: VqpId, sender: NodeId, meta: DctTarget) -> Result<VqpId, VqpError> {
    let v = w.vqp(vq);
    if v.peer == Some(sender) {
        return Ok(vq);
    }
    if let Some(id) = v.senders.get(&sender) {
        return Ok(*id);
    }
    let (home, cpu, bound) = (v.home, v.cpu, v.bound_addr);
    let id = vqp_create_now(w, home, cpu)?;
    let k = w.kernel_mut(home);
    k.dccache.entry(sender).or_insert(meta);
    let pool = k.home_pool(cpu);
    let (q, m) = match pool.next_rc(sender.gid) {
        Some(q) => (q, Some(meta)),
        None => (pool.next_dc(), Some(meta)),
    };
    bind(w, id, q, sender, m);
    w.vqp_mut(id).bound_addr = bound;
    w.vqp_mut(vq).senders.insert(sender, id);
    Ok(id)
}

/// Large-message path: one READ from the sender's buffer straight into `buf`.
pub async fn recv_zero_copy(
    sim: &Sim,
    home: Gid,
    msg: &super::Inbound,
    buf: RecvBuffer,
) -> Message {
    if msg.size > buf.len {
        return Message {
            buf,
            byte_len: 0,
            status: WcStatus::LocErr,
        };
    }
    let (token, kqp) = sim.with(|w| {
        let token = w.token();
        let k = w.kernel_mut(home);
        k.stats.zero_copy_reads += 1;
        let kqp = k.kqp;
        let wr = WorkRequest::read(
            token,
            LocalBuf {
                addr: buf.addr,
                len: msg.size,
            },
            RemoteBuf {
                addr: msg.src_addr,
                rkey: KERNEL_RKEY,
            },
        )
        .via(msg.sender_meta.into());
        w.fabric.post_send(kqp, vec![wr]).expect("kernel qp");
        (token, kqp)
    });
    let status = await_kernel_op(sim, home, kqp, token).await;
    if status != WcStatus::Ok {
        sim.with(|w| replace_kernel_qp(w, home, kqp));
    }
    Message {
        buf,
        byte_len: if status == WcStatus::Ok { msg.size } else { 0 },
        status,
    }
}

/// A kernel QP that hit ERR is swapped for a fresh one.
fn replace_kernel_qp(w: &mut World, home: Gid, old: Qpn) {
    if w.fabric.qp_state(old) != crate::nic::QpState::Err || w.kernel(home).kqp != old {
        return;
    }
    let c = &w.fabric.cost;
    let depths = crate::nic::QueueDepths::new(c.sq_depth, c.cq_depth, c.rq_depth);
    let (q, _) = w.fabric.create_qp(home, QpKind::Dc, depths).expect("kernel qp");
    let _ = w.fabric.destroy_qp(old);
    w.kernel_mut(home).kqp = q;
}
