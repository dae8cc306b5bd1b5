//! Swapping a VQP's physical QP without breaking FIFO order, and the
//! background promotion/reclaim procedures built on it.

use thiserror::Error;

use crate::addr::{Gid, NodeId};
use crate::bgd::RcCandidate;
use crate::exec::{join_all, Sim};
use crate::nic::{LocalBuf, QpKind, Qpn, QueueDepths, RemoteBuf, WorkRequest, KERNEL_RKEY};
use crate::world::{WaitKey, World};

use super::datapath::poll_inner;
use super::inbound::post_rc_buffers;
use super::kernel::PhysState;
use super::ops::lookup_dct;
use super::{VqpId, WrIdEncoding};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransferError {
    #[error("vqp {0:?} is not connected")]
    NotConnected(VqpId),
    #[error("target qp {0:?} is outside the vqp's sub-pool or serves another peer")]
    ForeignQp(Qpn),
    #[error("peer did not acknowledge within {0}ns; old qp kept")]
    Timeout(u64),
    #[error("a transfer is already running on vqp {0:?}")]
    Busy(VqpId),
}

/// What the peer kernel must do when notified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PeerAction {
    /// Move the peer's VQPs that talk to us onto its end of this RC pair.
    AdoptRc(Qpn),
    /// Move the peer's VQPs off its end of this RC pair.
    ReleaseRc(Qpn),
    None,
}

/// Fenced swap of `vq` onto `new_qp`, with peer notification and acknowledgment.
pub async fn transfer_physical_qp(sim: &Sim, vq: VqpId, new_qp: Qpn) -> Result<(), TransferError> {
    let (home, old, peer) = begin(sim, vq, new_qp)?;
    let action = sim.with(|w| {
        let k = w.kernel(home);
        let new = &k.phys[&new_qp];
        let oldp = &k.phys[&old];
        match (new.kind, oldp.kind) {
            (QpKind::Rc, _) => new.pair.map_or(PeerAction::None, PeerAction::AdoptRc),
            (QpKind::Dc, QpKind::Rc) => oldp.pair.map_or(PeerAction::None, PeerAction::ReleaseRc),
            _ => PeerAction::None,
        }
    });
    fence(sim, vq, home, old).await;
    let (token, timeout) = sim.with(|w| (w.token(), w.fabric.cost.transfer_ack_timeout_ns));
    notify_peer(sim, home, peer.gid, action, token);
    let deadline = sim.now() + timeout;
    let acked = sim
        .wait_until_or_timeout(WaitKey::Control(token), deadline, move |w| {
            w.control_done.remove(&token)
        })
        .await;
    if !acked {
        sim.with(|w| {
            finish(w, vq, home, old, None);
            w.kernel_mut(home).stats.transfer_aborts += 1;
        });
        return Err(TransferError::Timeout(timeout));
    }
    sim.with(|w| finish(w, vq, home, old, Some(new_qp)));
    Ok(())
}

/// Fenced swap without involving the peer (used by the peer side itself).
async fn transfer_local(sim: &Sim, vq: VqpId, new_qp: Qpn) -> Result<(), TransferError> {
    let (home, old, _) = begin(sim, vq, new_qp)?;
    fence(sim, vq, home, old).await;
    sim.with(|w| finish(w, vq, home, old, Some(new_qp)));
    Ok(())
}

fn begin(sim: &Sim, vq: VqpId, new_qp: Qpn) -> Result<(Gid, Qpn, NodeId), TransferError> {
    sim.with(|w| {
        let v = w.vqp(vq);
        let (Some(old), Some(peer)) = (v.qp, v.peer) else {
            return Err(TransferError::NotConnected(vq));
        };
        if v.transferring {
            return Err(TransferError::Busy(vq));
        }
        let home = v.home;
        let cpu = v.cpu;
        let k = w.kernel_mut(home);
        let n = k.pools.len();
        match k.phys.get(&new_qp) {
            Some(p) if p.cpu % n == cpu % n && p.peer.is_none_or(|g| g == peer.gid) => {}
            _ => return Err(TransferError::ForeignQp(new_qp)),
        }
        k.phys.get_mut(&old).expect("pooled").transfers_in_flight += 1;
        let v = w.vqp_mut(vq);
        v.transferring = true;
        v.fence_done = false;
        Ok((home, old, peer))
    })
}

/// Posts a signaled zero-length READ on `old` and waits for its completion;
/// once it is seen every earlier request on `old` has completed.
async fn fence(sim: &Sim, vq: VqpId, home: Gid, old: Qpn) {
    loop {
        let posted = sim.with(|w| {
            while w.kernel(home).phys[&old].free_slots() == 0 {
                if !poll_inner(w, home, old) {
                    return false;
                }
            }
            let (peer, meta, dc) = {
                let v = w.vqp(vq);
                (v.peer.expect("connected"), v.dct_meta, w.kernel(home).phys[&old].kind == QpKind::Dc)
            };
            let scratch = w.kernel_mut(home).next_scratch(0);
            let mut wr = WorkRequest::read(
                WrIdEncoding {
                    fence: true,
                    ..WrIdEncoding::new(Some(vq), 1)
                }
                .encode(),
                LocalBuf {
                    addr: scratch,
                    len: 0,
                },
                RemoteBuf {
                    addr: 0,
                    rkey: KERNEL_RKEY,
                },
            );
            if dc {
                let m = meta.unwrap_or(crate::nic::DctTarget {
                    dct_num: 0,
                    dct_key: 0,
                    owner: peer.gid,
                });
                wr = wr.via(m.into());
            }
            let ps = w.kernel_mut(home).phys.get_mut(&old).expect("pooled");
            ps.uncomp_cnt += 1;
            ps.posted_total += 1;
            w.fabric.post_send(old, vec![wr]).expect("pooled qp");
            true
        });
        if posted {
            break;
        }
        sim.wait_until(WaitKey::Cq(old), move |w| w.fabric.cq_len(old) > 0)
            .await;
    }
    sim.wait_until_any(vec![WaitKey::Cq(old), WaitKey::Vqp(vq)], move |w| {
        while !w.vqp(vq).fence_done && poll_inner(w, home, old) {}
        w.vqp(vq).fence_done
    })
    .await;
}

fn finish(w: &mut World, vq: VqpId, home: Gid, old: Qpn, new: Option<Qpn>) {
    let now = w.fabric.now();
    let k = w.kernel_mut(home);
    if let Some(ps) = k.phys.get_mut(&old) {
        ps.transfers_in_flight -= 1;
    }
    if let Some(new) = new {
        if let Some(ps) = k.phys.get_mut(&old) {
            ps.users.remove(&vq);
        }
        let ps = k.phys.get_mut(&new).expect("pooled");
        ps.users.insert(vq);
        ps.last_use = now;
        k.stats.transfers += 1;
        w.vqp_mut(vq).qp = Some(new);
    }
    w.vqp_mut(vq).transferring = false;
    w.notify(WaitKey::Vqp(vq));
}

/// Sends the transfer notification; the peer acts and acknowledges.
fn notify_peer(sim: &Sim, home: Gid, peer: Gid, action: PeerAction, token: u64) {
    let arrive = sim.with(|w| w.fabric.datagram(home, peer, 64));
    let s = sim.clone();
    sim.spawn(async move {
        s.sleep_until(arrive).await;
        let drop = s.with(|w| w.kernels.get(&peer).is_none_or(|k| k.drop_control));
        if drop {
            return;
        }
        match action {
            PeerAction::AdoptRc(q) => adopt_rc(&s, peer, home, q).await,
            PeerAction::ReleaseRc(q) => release_users(&s, peer, q).await,
            PeerAction::None => {}
        }
        let back = s.with(|w| w.fabric.datagram(peer, home, 64));
        s.sleep_until(back).await;
        s.with(|w| {
            w.control_done.insert(token);
            w.notify(WaitKey::Control(token));
        });
    });
}

/// Peer side of a promotion: its VQPs toward `remote` on the RC's sub-pool move onto `rc`.
async fn adopt_rc(sim: &Sim, gid: Gid, remote: Gid, rc: Qpn) {
    let movers: Vec<VqpId> = sim.with(|w| {
        let Some(ps) = w.kernel(gid).phys.get(&rc) else {
            return Vec::new();
        };
        let n = w.kernel(gid).pools.len();
        let cpu = ps.cpu % n;
        w.vqps
            .values()
            .filter(|v| {
                v.home == gid
                    && v.cpu % n == cpu
                    && v.peer.is_some_and(|p| p.gid == remote)
                    && v.qp.is_some_and(|q| q != rc && w.kernel(gid).phys[&q].kind == QpKind::Dc)
                    && !v.transferring
            })
            .map(|v| v.id)
            .collect()
    });
    join_all(movers.into_iter().map(|v| transfer_local(sim, v, rc)).collect()).await;
}

/// Moves every VQP on `rc` back to DC QPs of its sub-pool.
async fn release_users(sim: &Sim, gid: Gid, rc: Qpn) {
    let users: Vec<VqpId> = sim.with(|w| {
        w.kernel(gid)
            .phys
            .get(&rc)
            .map(|p| p.users.iter().copied().collect())
            .unwrap_or_default()
    });
    sim.with(|w| {
        let k = w.kernel_mut(gid);
        for p in &mut k.pools {
            p.remove_rc(rc);
        }
    });
    join_all(users.into_iter().map(|v| move_to_dc(sim, v, false)).collect()).await;
}

async fn move_to_dc(sim: &Sim, vq: VqpId, notify: bool) -> Result<(), TransferError> {
    let (home, cpu, peer, meta) = sim.with(|w| {
        let v = w.vqp(vq);
        (v.home, v.cpu, v.peer, v.dct_meta)
    });
    let peer = peer.ok_or(TransferError::NotConnected(vq))?;
    if meta.is_none() {
        if let Ok(m) = lookup_dct(sim, home, peer).await {
            sim.with(|w| w.vqp_mut(vq).dct_meta = Some(m));
        }
    }
    let dc = sim.with(|w| w.kernel_mut(home).home_pool(cpu).next_dc());
    if notify {
        transfer_physical_qp(sim, vq, dc).await
    } else {
        transfer_local(sim, vq, dc).await
    }
}

// ----- background promotion & reclaim -----------------------------------------

/// Creates an RC pair with `peer` in the background, pools it on both nodes,
/// and moves this CPU's VQPs toward `peer` onto it.
pub async fn promote(sim: &Sim, home: Gid, cpu: usize, peer: Gid) {
    let Some((qa, qb)) = add_rc_pair(sim, home, cpu, peer).await else {
        return;
    };
    let movers = sim.with(|w| {
        let n = w.kernel(home).pools.len();
        w.vqps
            .values()
            .filter(|v| {
                v.home == home
                    && v.cpu % n == cpu % n
                    && v.peer.is_some_and(|p| p.gid == peer)
                    && v.qp.is_some_and(|q| w.kernel(home).phys[&q].kind == QpKind::Dc)
            })
            .map(|v| v.id)
            .collect::<Vec<_>>()
    });
    if movers.is_empty() {
        // still let the peer adopt its side
        let token = sim.with(|w| w.token());
        notify_peer(sim, home, peer, PeerAction::AdoptRc(qb), token);
    }
    join_all(
        movers
            .into_iter()
            .map(|v| transfer_physical_qp(sim, v, qa))
            .collect(),
    )
    .await;
    reclaim(sim, home, cpu).await;
}

/// Creates, connects and pools an RC pair between `home` and `peer`
/// (retrying with backoff). Returns (home side, peer side).
pub async fn add_rc_pair(sim: &Sim, home: Gid, cpu: usize, peer: Gid) -> Option<(Qpn, Qpn)> {
    let mut attempt = 0;
    let (qa, qb) = loop {
        let r = sim.with(|w| {
            if !w.kernels.contains_key(&peer) {
                return Err(None);
            }
            let c = &w.fabric.cost;
            let d = QueueDepths::new(c.sq_depth, c.cq_depth, c.rq_depth);
            let (qa, ta) = w.fabric.create_qp(home, QpKind::Rc, d).map_err(|_| Some(()))?;
            match w.fabric.create_qp(peer, QpKind::Rc, d) {
                Ok((qb, tb)) => Ok((qa, qb, ta.max(tb))),
                Err(_) => {
                    let _ = w.fabric.destroy_qp(qa);
                    Err(Some(()))
                }
            }
        });
        match r {
            Ok((qa, qb, ready)) => {
                sim.sleep_until(ready).await;
                break (qa, qb);
            }
            Err(None) => return None,
            Err(Some(())) => {
                let delay = sim.with(|w| w.kernel(home).bgd.backoff(attempt));
                attempt += 1;
                sim.sleep(delay).await;
            }
        }
    };
    let ready = sim.with(|w| {
        let ra = w
            .fabric
            .configure_qp(qa, NodeId::new(peer, 0), Some(qb))
            .expect("fresh qp");
        let rb = w
            .fabric
            .configure_qp(qb, NodeId::new(home, 0), Some(qa))
            .expect("fresh qp");
        ra.max(rb)
    });
    sim.sleep_until(ready).await;
    sim.with(|w| {
        let limit = (w.fabric.cost.sq_depth.min(w.fabric.cost.cq_depth)) as u64;
        for (gid, q, other, pair) in [(home, qa, peer, qb), (peer, qb, home, qa)] {
            let k = w.kernel_mut(gid);
            let n = k.pools.len();
            let c = cpu % n;
            let mut ps = PhysState::new(QpKind::Rc, c, Some(other), limit);
            ps.pair = Some(pair);
            ps.last_use = w.fabric.now();
            let k = w.kernel_mut(gid);
            k.phys.insert(q, ps);
            k.pools[c].rc.entry(other).or_default().push(q);
            k.bgd.mark_promoted(c, other);
            post_rc_buffers(w, gid, q);
        }
        w.kernel_mut(home).stats.promotions += 1;
    });
    Some((qa, qb))
}

/// Evicts the least recently used RC QP of the sub-pool while over capacity.
pub async fn reclaim(sim: &Sim, home: Gid, cpu: usize) {
    loop {
        let victim = sim.with(|w| {
            let k = w.kernel(home);
            let c = cpu % k.pools.len();
            let cands: Vec<RcCandidate> = k.pools[c]
                .rc
                .values()
                .flatten()
                .map(|q| {
                    let p = &k.phys[q];
                    RcCandidate {
                        qpn: *q,
                        last_use: p.last_use,
                        busy: p.transfers_in_flight > 0 || p.held_msgs > 0,
                    }
                })
                .collect();
            k.bgd.lru_victim(&cands)
        });
        let Some(victim) = victim else { return };
        let (users, peer, pair) = sim.with(|w| {
            let k = w.kernel_mut(home);
            for p in &mut k.pools {
                p.remove_rc(victim);
            }
            let p = &k.phys[&victim];
            (p.users.iter().copied().collect::<Vec<_>>(), p.peer, p.pair)
        });
        let results = join_all(users.into_iter().map(|v| move_to_dc(sim, v, true)).collect()).await;
        if results.iter().any(Result::is_err) {
            // a transfer was aborted: keep the QP pooled
            sim.with(|w| {
                let k = w.kernel_mut(home);
                let c = cpu % k.pools.len();
                if let Some(p) = peer {
                    k.pools[c].rc.entry(p).or_default().push(victim);
                }
            });
            return;
        }
        destroy_when_drained(sim, home, victim).await;
        if let (Some(peer), Some(pair)) = (peer, pair) {
            let arrive = sim.with(|w| w.fabric.datagram(home, peer, 64));
            let s = sim.clone();
            sim.spawn(async move {
                s.sleep_until(arrive).await;
                release_users(&s, peer, pair).await;
                destroy_when_drained(&s, peer, pair).await;
                s.with(|w| {
                    let k = w.kernel_mut(peer);
                    let c = cpu % k.pools.len();
                    k.bgd.forget(c, home);
                });
            });
        }
        sim.with(|w| {
            let k = w.kernel_mut(home);
            let c = cpu % k.pools.len();
            if let Some(p) = peer {
                k.bgd.forget(c, p);
            }
            k.stats.reclaims += 1;
        });
    }
}

async fn destroy_when_drained(sim: &Sim, gid: Gid, qpn: Qpn) {
    sim.wait_until(WaitKey::Cq(qpn), move |w| {
        while poll_inner(w, gid, qpn) {}
        w.kernel(gid)
            .phys
            .get(&qpn)
            .is_none_or(|p| p.uncomp_cnt == 0 && p.users.is_empty())
    })
    .await;
    sim.with(|w| {
        if w.kernel_mut(gid).phys.remove(&qpn).is_some() {
            let _ = w.fabric.destroy_qp(qpn);
        }
    });
}
