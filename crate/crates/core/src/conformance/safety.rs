//! Many VQPs sharing one DC QP under random valid and malformed request
//! lists, checked against a raw QP fed the same lists.

use std::cell::RefCell;
use std::rc::Rc;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use super::streams::{mixed_lists, valid_lists, Req};
use super::{cluster_with, shared_qp_cost};
use crate::nic::{QpKind, QpState, QueueDepths, WcStatus};
use crate::vplane::{ops, VqpError};

/// Result of one case: the shared QP passed every check (else `Err`) and
/// whether the raw replay reached ERR.
pub struct Outcome {
    pub raw_err: bool,
}

fn wr_id(v: usize, n: usize) -> u64 {
    ((v as u64) << 32) | n as u64 | 0x5000_0000_0000_0000
}

/// Runs every VQP's lists concurrently over one shared DC QP and checks
/// dispatch, FIFO and slot conservation. Then replays the same lists on a
/// raw QP and reports whether it reached ERR.
pub fn run_case(streams: &[Vec<Vec<Req>>]) -> Result<Outcome, TestCaseError> {
    let c = cluster_with(shared_qp_cost(), 2);
    c.server(1, 7);
    let (a, b) = (c.nodes[0], c.addr(1, 7));
    let vqps: Vec<_> = c.sim.with(|w| {
        (0..streams.len())
            .map(|_| ops::vqp_create_now(w, a, 0).expect("setup"))
            .collect()
    });
    let got: Rc<RefCell<Vec<Vec<(u64, WcStatus)>>>> =
        Rc::new(RefCell::new(vec![Vec::new(); streams.len()]));
    let mut expected = vec![Vec::new(); streams.len()];
    for (i, lists) in streams.iter().enumerate() {
        let sim = c.sim.clone();
        let vq = vqps[i];
        let mut posts = Vec::new();
        let mut n = 0;
        for list in lists {
            let valid = list.iter().all(Req::is_valid);
            let wrs: Vec<_> = list
                .iter()
                .map(|r| {
                    n += 1;
                    if valid && r.signaled() {
                        expected[i].push((wr_id(i, n), WcStatus::Ok));
                    }
                    c.request(*r, wr_id(i, n), 1)
                })
                .collect();
            posts.push((wrs, valid));
        }
        let want = expected[i].len();
        let got = got.clone();
        c.sim.spawn(async move {
            ops::qconnect(&sim, vq, b).await.expect("setup");
            for (wrs, valid) in posts {
                let r = ops::post_send(&sim, vq, wrs).await;
                match r {
                    Ok(()) => assert!(valid),
                    Err(VqpError::Rejected { .. }) => assert!(!valid),
                    Err(e) => panic!("unexpected {e}"),
                }
            }
            for _ in 0..want {
                let c = ops::wait_completion(&sim, vq).await;
                got.borrow_mut()[i].push((c.wr_id, c.status));
            }
        });
    }
    c.sim.run_until_idle().map_err(|e| TestCaseError::fail(e.to_string()))?;

    let qpn = c.sim.with(|w| w.vqp(vqps[0]).qp.expect("setup"));
    for v in &vqps {
        prop_assert_eq!(c.sim.with(|w| w.vqp(*v).qp), Some(qpn));
    }
    // dispatch totality and FIFO
    prop_assert_eq!(&*got.borrow(), &expected);
    // drain forced tails, then every slot must be back
    c.sim.with(|w| while crate::vplane::poll_inner(w, a, qpn) {});
    let (state, ps, stats) = c.sim.with(|w| {
        let k = w.kernel(a);
        (w.fabric.qp_state(qpn), k.phys[&qpn].clone(), k.stats.clone())
    });
    prop_assert_ne!(state, QpState::Err);
    prop_assert_eq!(ps.uncomp_cnt, 0);
    prop_assert_eq!(ps.free_slots(), ps.limit);
    prop_assert_eq!(ps.decoded_total, ps.posted_total);
    prop_assert_eq!(stats.unattributed_errors, 0);
    for v in &vqps {
        prop_assert!(c.sim.with(|w| w.vqp(*v).comp_queue.is_empty()));
    }

    // the same lists, round-robin across streams, straight to a raw DC QP
    let route = c.sim.with(|w| w.kernel(b.gid).node_target.into());
    let rounds = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut counters = vec![0; streams.len()];
    let mut raw_lists = Vec::new();
    for r in 0..rounds {
        for (i, lists) in streams.iter().enumerate() {
            let Some(list) = lists.get(r) else { continue };
            let wrs: Vec<_> = list
                .iter()
                .map(|q| {
                    counters[i] += 1;
                    let wr = c.request(*q, wr_id(i, counters[i]), 1);
                    if wr.dct_route.is_some() { wr } else { wr.via(route) }
                })
                .collect();
            raw_lists.push(wrs);
        }
    }
    let raw_err = c.sim.with(|w| {
        let cost = w.fabric.cost.clone();
        let d = QueueDepths::new(cost.sq_depth, cost.cq_depth, cost.rq_depth);
        let (raw, ready) = w.fabric.create_qp(a, QpKind::Dc, d).expect("setup");
        w.fabric.advance_to(ready);
        for wrs in raw_lists {
            w.fabric.post_send(raw, wrs).expect("setup");
        }
        w.fabric.run_until_idle();
        w.fabric.qp_state(raw) == QpState::Err
    });
    Ok(Outcome { raw_err })
}

/// Aggregate of a safety run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SafetyReport {
    pub cases: u32,
    pub raw_errs: u32,
}

/// Runs `cases` random cases (2-8 VQPs, up to 6 lists each, some lists
/// malformed) with a fixed generator seed. Any violated check on the shared
/// QP is an `Err`.
pub fn safety_suite(cases: u32) -> Result<SafetyReport, String> {
    let depth = shared_qp_cost().sq_depth as usize;
    run_suite(cases, (2usize..=8).prop_flat_map(move |n| prop::collection::vec(mixed_lists(depth, 6), n)))
}

/// Like [`safety_suite`] with well-formed lists only, so every signaled
/// request must surface exactly once on its own VQP.
pub fn dispatch_suite(cases: u32) -> Result<SafetyReport, String> {
    let depth = shared_qp_cost().sq_depth as usize;
    run_suite(cases, (2usize..=8).prop_flat_map(move |n| prop::collection::vec(valid_lists(depth, 6), n)))
}

fn run_suite(cases: u32, strategy: impl Strategy<Value = Vec<Vec<Vec<Req>>>>) -> Result<SafetyReport, String> {
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let report = Rc::new(RefCell::new(SafetyReport { cases: 0, raw_errs: 0 }));
    let r = report.clone();
    runner
        .run(&strategy, move |streams| {
            let o = run_case(&streams)?;
            let mut r = r.borrow_mut();
            r.cases += 1;
            r.raw_errs += o.raw_err as u32;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let out = *report.borrow();
    Ok(out)
}
