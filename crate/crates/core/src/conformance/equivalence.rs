//! Oracle equivalence: one VQP against a careful raw-verbs application, with
//! and without a physical QP transfer in the middle of the stream.

use std::collections::VecDeque;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use super::streams::{valid_lists, Req};
use super::{cluster_with, shared_qp_cost, Cluster};
use crate::nic::{QpKind, QueueDepths, WcStatus, WorkRequest};
use crate::vplane::{ops, transfer, VqpId};

const SENTINEL: u64 = u64::MAX;

pub fn depth() -> usize {
    shared_qp_cost().sq_depth as usize
}

pub fn materialize(c: &Cluster, lists: &[Vec<Req>]) -> Vec<Vec<WorkRequest>> {
    let mut n = 0;
    lists
        .iter()
        .map(|l| {
            l.iter()
                .map(|r| {
                    n += 1;
                    c.request(*r, 0x7700_0000 + n, 1)
                })
                .collect()
        })
        .collect()
}

/// A careful verbs application on its own DC QP: splits lists at the queue
/// depth, signals an unsignaled tail with a sentinel it filters out, and
/// polls until the next chunk fits.
pub fn raw_trace(lists: &[Vec<WorkRequest>]) -> Vec<(u64, WcStatus)> {
    let c = cluster_with(shared_qp_cost(), 2);
    let depth = depth();
    c.sim.with(|w| {
        let cost = w.fabric.cost.clone();
        let d = QueueDepths::new(cost.sq_depth, cost.cq_depth, cost.rq_depth);
        let (qp, ready) = w.fabric.create_qp(c.nodes[0], QpKind::Dc, d).expect("valid stream");
        w.fabric.advance_to(ready);
        let route = w.kernel(c.nodes[1]).node_target.into();
        // per posted request: whether its completion frees the run before it
        let mut pending: VecDeque<bool> = VecDeque::new();
        let mut trace = Vec::new();
        let poll = |w: &mut crate::World, pending: &mut VecDeque<bool>, trace: &mut Vec<_>| {
            while w.fabric.cq_len(qp) == 0 {
                w.fabric.step();
            }
            let c = w.fabric.poll_cq(qp).expect("valid stream");
            while let Some(signaled) = pending.pop_front() {
                if signaled {
                    break;
                }
            }
            if c.wr_id != SENTINEL {
                trace.push((c.wr_id, c.status));
            }
        };
        for list in lists {
            for chunk in list.chunks(depth) {
                let mut chunk: Vec<_> = chunk.iter().map(|r| r.clone().via(route)).collect();
                let tail = chunk.last_mut().expect("valid stream");
                if !tail.signaled {
                    tail.signaled = true;
                    tail.wr_id = SENTINEL;
                }
                while pending.len() + chunk.len() > depth {
                    poll(w, &mut pending, &mut trace);
                }
                pending.extend(chunk.iter().map(|r| r.signaled));
                w.fabric.post_send(qp, chunk).expect("valid stream");
            }
        }
        while !pending.is_empty() {
            poll(w, &mut pending, &mut trace);
        }
        trace
    })
}

/// User-visible trace of one VQP over a dedicated DC QP. `transfer_at`
/// moves it to a fresh RC QP at that time while the stream runs; returns
/// the trace plus the physical QP kind each list was posted on.
pub fn vqp_trace(
    lists: &[Vec<Req>],
    gaps: &[u64],
    transfer_at: Option<u64>,
) -> (Vec<(u64, WcStatus)>, Vec<QpKind>, bool) {
    let c = cluster_with(shared_qp_cost(), 2);
    c.server(1, 7);
    let (a, b) = (c.nodes[0], c.addr(1, 7));
    let wrs = materialize(&c, lists);
    let vq: VqpId = c.sim.with(|w| ops::vqp_create_now(w, a, 0).expect("valid stream"));
    let sim = c.sim.clone();
    let gaps = gaps.to_vec();
    let rkey = c.mrs[1].rkey;
    let out = c
        .sim
        .run(async move {
            ops::qconnect(&sim, vq, b).await.expect("valid stream");
            ops::check_remote_mr(&sim, a, b.gid, rkey).await.expect("valid stream");
            let rc = match transfer_at {
                Some(_) => Some(transfer::add_rc_pair(&sim, a, 0, b.gid).await.expect("valid stream").0),
                None => None,
            };
            let start = sim.now();
            if let (Some(t), Some(rc)) = (transfer_at, rc) {
                let s = sim.clone();
                sim.spawn(async move {
                    s.sleep_until(start + t).await;
                    transfer::transfer_physical_qp(&s, vq, rc).await.expect("valid stream");
                });
            }
            let mut kinds = Vec::new();
            let mut want = 0;
            for (i, list) in wrs.into_iter().enumerate() {
                want += list.iter().filter(|r| r.signaled).count();
                ops::post_send(&sim, vq, list).await.expect("valid stream");
                kinds.push(sim.with(|w| {
                    let q = w.vqp(vq).qp.expect("valid stream");
                    w.kernel(a).phys[&q].kind
                }));
                sim.sleep(gaps.get(i).copied().unwrap_or(0)).await;
            }
            let mut trace = Vec::new();
            for _ in 0..want {
                let c = ops::wait_completion(&sim, vq).await;
                trace.push((c.wr_id, c.status));
            }
            (trace, kinds)
        })
        .expect("valid stream");
    c.sim.run_until_idle().expect("valid stream");
    let extra = c.sim.with(|w| ops::poll_cq_now(w, vq)).is_some();
    (out.0, out.1, extra)
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

/// One case of the plain equivalence property.
pub fn check_equivalent(lists: &[Vec<Req>]) -> Result<(), TestCaseError> {
    let c = cluster_with(shared_qp_cost(), 2);
    let raw = raw_trace(&materialize(&c, lists));
    let (virt, _, extra) = vqp_trace(lists, &[], None);
    prop_assert_eq!(virt, raw);
    prop_assert!(!extra);
    Ok(())
}

/// One case of the transfer property; `Ok(true)` when the swap landed
/// inside the stream (some lists on DC, later ones on RC).
pub fn check_transparent(lists: &[Vec<Req>], gaps: &[u64], at: u64) -> Result<bool, TestCaseError> {
    let c = cluster_with(shared_qp_cost(), 2);
    let raw = raw_trace(&materialize(&c, lists));
    let (virt, kinds, extra) = vqp_trace(lists, gaps, Some(at));
    prop_assert_eq!(virt, raw);
    prop_assert!(!extra);
    // once on RC, never back
    let first_rc = kinds.iter().position(|k| *k == QpKind::Rc).unwrap_or(kinds.len());
    prop_assert!(kinds[first_rc..].iter().all(|k| *k == QpKind::Rc));
    Ok(first_rc > 0 && first_rc < kinds.len())
}

pub fn equivalence_suite(cases: u32) -> Result<u32, String> {
    runner(cases)
        .run(&valid_lists(depth(), 8), |lists| check_equivalent(&lists))
        .map_err(|e| e.to_string())?;
    Ok(cases)
}

/// Returns (cases, cases whose transfer landed mid-stream).
pub fn transparency_suite(cases: u32) -> Result<(u32, u32), String> {
    let mid = std::cell::Cell::new(0u32);
    let strategy = (
        valid_lists(depth(), 8),
        prop::collection::vec(0u64..3_000, 8),
        0u64..20_000,
    );
    runner(cases)
        .run(&strategy, |(lists, gaps, at)| {
            if check_transparent(&lists, &gaps, at)? {
                mid.set(mid.get() + 1);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok((cases, mid.get()))
}
