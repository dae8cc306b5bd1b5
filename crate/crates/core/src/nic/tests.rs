use super::*;
use proptest::prelude::*;

fn depths() -> QueueDepths {
    QueueDepths::new(16, 16, 16)
}

struct Pair {
    f: Fabric,
    a: Gid,
    b: Gid,
    mr_b: MemoryRegion,
}

fn pair() -> Pair {
    let mut f = Fabric::new(CostModel::default());
    let a = f.add_node(Gid::for_node(1));
    let b = f.add_node(Gid::for_node(2));
    f.register_mr(a, 0, 1 << 20, Perms::RW).unwrap();
    let mr_b = f.register_mr(b, 0x10_0000, 4096, Perms::RW).unwrap();
    Pair { f, a, b, mr_b }
}

fn rc(p: &mut Pair) -> Qpn {
    let (q, _) = p.f.create_qp(p.a, QpKind::Rc, depths()).unwrap();
    p.f.configure_qp(q, NodeId::new(p.b, 0), None).unwrap();
    q
}

fn read8(p: &Pair, wr_id: u64) -> WorkRequest {
    WorkRequest::read(
        wr_id,
        LocalBuf { addr: 0, len: 8 },
        RemoteBuf {
            addr: p.mr_b.base,
            rkey: p.mr_b.rkey,
        },
    )
}

fn drain(f: &mut Fabric, q: Qpn) -> Vec<Completion> {
    f.run_until_idle();
    std::iter::from_fn(|| f.poll_cq(q)).collect()
}

#[test]
fn rc_qp_charges_159_kib() {
    let mut p = pair();
    let before = p.f.mem_bytes(p.a);
    p.f.create_qp(p.a, QpKind::Rc, depths()).unwrap();
    assert_eq!(p.f.mem_bytes(p.a) - before, 162_816);
}

#[test]
fn create_takes_413_us_and_serializes() {
    let mut p = pair();
    let (_, t1) = p.f.create_qp(p.a, QpKind::Rc, depths()).unwrap();
    let (_, t2) = p.f.create_qp(p.a, QpKind::Rc, depths()).unwrap();
    assert_eq!(t1, 413_000);
    assert_eq!(t2, 826_000);
    let (_, t3) = p.f.create_qp(p.b, QpKind::Rc, depths()).unwrap();
    assert_eq!(t3, 413_000);
}

#[test]
fn configure_rejects_wrong_state() {
    let mut p = pair();
    let (dc, _) = p.f.create_qp(p.a, QpKind::Dc, depths()).unwrap();
    assert!(matches!(
        p.f.configure_qp(dc, NodeId::new(p.b, 0), None),
        Err(NicError::State { .. })
    ));
    let q = rc(&mut p);
    assert!(p.f.configure_qp(q, NodeId::new(p.b, 0), None).is_err());
}

#[test]
fn eight_byte_read_latency() {
    let mut p = pair();
    let q = rc(&mut p);
    p.f.memory_mut(p.b).write_u64(p.mr_b.base, 0xdead_beef);
    p.f.post_send(q, vec![read8(&p, 7)]).unwrap();
    let done = p.f.run_until_idle();
    assert_eq!(done, 2150);
    let c = p.f.poll_cq(q).unwrap();
    assert_eq!((c.wr_id, c.status, c.byte_len), (7, WcStatus::Ok, 8));
    assert_eq!(p.f.memory(p.a).read_u64(0), 0xdead_beef);
    assert_eq!(p.f.tap.reads, 1);
}

#[test]
fn read_past_mr_is_remote_access_error_and_errs_qp() {
    let mut p = pair();
    let q = rc(&mut p);
    let mut wr = read8(&p, 1);
    wr.remote.as_mut().unwrap().addr = p.mr_b.base + 4096 - 4;
    p.f.post_send(q, vec![wr, read8(&p, 2)]).unwrap();
    let cs = drain(&mut p.f, q);
    assert_eq!(cs[0].status, WcStatus::RemAccessErr);
    assert_eq!(cs[1].status, WcStatus::FlushErr);
    assert_eq!(p.f.qp_state(q), QpState::Err);
}

#[test]
fn deregistered_mr_rejects_access() {
    let mut p = pair();
    let q = rc(&mut p);
    p.f.deregister_mr(p.b, p.mr_b.rkey).unwrap();
    p.f.post_send(q, vec![read8(&p, 1)]).unwrap();
    assert_eq!(drain(&mut p.f, q)[0].status, WcStatus::RemAccessErr);
}

#[test]
fn kernel_rkey_reaches_any_registered_range() {
    let mut p = pair();
    let q = rc(&mut p);
    let mut wr = read8(&p, 1);
    wr.remote = Some(RemoteBuf {
        addr: p.mr_b.base + 100,
        rkey: KERNEL_RKEY,
    });
    let mut zero = read8(&p, 2);
    zero.local.len = 0;
    zero.remote = Some(RemoteBuf {
        addr: 0xffff_0000,
        rkey: KERNEL_RKEY,
    });
    p.f.post_send(q, vec![wr, zero]).unwrap();
    let cs = drain(&mut p.f, q);
    assert!(cs.iter().all(|c| c.status == WcStatus::Ok));
}

#[test]
fn wrong_dct_key_fails_request_but_not_qp() {
    let mut p = pair();
    let t = p.f.create_dct_target(p.b, 0xabc).unwrap();
    let (dc, _) = p.f.create_qp(p.a, QpKind::Dc, depths()).unwrap();
    let bad = DctRoute {
        dct_key: 0xabd,
        ..t.into()
    };
    p.f.post_send(dc, vec![read8(&p, 1).via(bad)]).unwrap();
    assert_eq!(drain(&mut p.f, dc)[0].status, WcStatus::RemAccessErr);
    assert_ne!(p.f.qp_state(dc), QpState::Err);
    p.f.post_send(dc, vec![read8(&p, 2).via(t.into())]).unwrap();
    assert_eq!(drain(&mut p.f, dc)[0].status, WcStatus::Ok);
}

#[test]
fn dc_without_route_is_local_error() {
    let mut p = pair();
    let (dc, _) = p.f.create_qp(p.a, QpKind::Dc, depths()).unwrap();
    p.f.post_send(dc, vec![read8(&p, 1)]).unwrap();
    assert_eq!(drain(&mut p.f, dc)[0].status, WcStatus::LocErr);
    assert_eq!(p.f.qp_state(dc), QpState::Err);
}

#[test]
fn dc_reconnects_only_on_target_change() {
    let mut p = pair();
    let c = p.f.add_node(Gid::for_node(3));
    p.f.register_mr(c, 0x10_0000, 4096, Perms::RW).unwrap();
    let tb = p.f.create_dct_target(p.b, 1).unwrap();
    let tc = p.f.create_dct_target(c, 2).unwrap();
    let (dc, _) = p.f.create_qp(p.a, QpKind::Dc, depths()).unwrap();
    let mut wrs = Vec::new();
    for (i, t) in [tb, tb, tc, tb, tb].into_iter().enumerate() {
        let mut wr = read8(&p, i as u64).via(t.into());
        wr.remote.as_mut().unwrap().rkey = KERNEL_RKEY;
        wrs.push(wr);
    }
    p.f.post_send(dc, wrs).unwrap();
    let cs = drain(&mut p.f, dc);
    assert!(cs.iter().all(|c| c.status == WcStatus::Ok));
    assert_eq!(p.f.tap.dc_reconnects, 3);
}

#[test]
fn send_queue_overflow_errs_and_flushes() {
    let mut p = pair();
    let (q, _) = p.f.create_qp(p.a, QpKind::Rc, QueueDepths::new(2, 8, 8)).unwrap();
    p.f.configure_qp(q, NodeId::new(p.b, 0), None).unwrap();
    let wrs = (0..4).map(|i| read8(&p, i)).collect();
    p.f.post_send(q, wrs).unwrap();
    let cs = drain(&mut p.f, q);
    let st: Vec<_> = cs.iter().map(|c| c.status).collect();
    assert_eq!(
        st,
        vec![
            WcStatus::Ok,
            WcStatus::Ok,
            WcStatus::OverflowErr,
            WcStatus::FlushErr
        ]
    );
    assert_eq!(p.f.qp_state(q), QpState::Err);
}

#[test]
fn signaled_completion_frees_preceding_unsignaled_slots() {
    let mut p = pair();
    let q = rc(&mut p);
    let mut wrs: Vec<_> = (0..3).map(|i| read8(&p, i).unsignaled()).collect();
    wrs.push(read8(&p, 3));
    p.f.post_send(q, wrs).unwrap();
    assert_eq!(p.f.qp_info(q).unwrap().uncomp_cnt, 4);
    p.f.run_until_idle();
    assert_eq!(p.f.qp_info(q).unwrap().uncomp_cnt, 4);
    let c = p.f.poll_cq(q).unwrap();
    assert_eq!((c.wr_id, c.slots_freed), (3, 4));
    assert_eq!(p.f.qp_info(q).unwrap().uncomp_cnt, 0);
    assert!(p.f.poll_cq(q).is_none());
}

#[test]
fn send_lands_in_posted_buffer() {
    let mut p = pair();
    let t = p.f.create_dct_target(p.b, 9).unwrap();
    let (dc, _) = p.f.create_qp(p.a, QpKind::Dc, depths()).unwrap();
    p.f.memory_mut(p.a).write(64, b"hello");
    let send = WorkRequest::send(1, LocalBuf { addr: 64, len: 5 })
        .via(t.into())
        .with_imm(42);
    p.f.post_send(dc, vec![send.clone()]).unwrap();
    assert_eq!(drain(&mut p.f, dc)[0].status, WcStatus::RnrErr);

    p.f.post_dct_recv(p.b, t.dct_num, RecvBuffer { addr: 0x10_0000, len: 64, tag: 5 })
        .unwrap();
    p.f.post_send(dc, vec![send]).unwrap();
    assert_eq!(drain(&mut p.f, dc)[0].status, WcStatus::Ok);
    let r = p.f.poll_recv(p.b).unwrap();
    assert_eq!((r.imm, r.byte_len, r.src), (42, 5, p.a));
    assert_eq!(p.f.memory(p.b).read(0x10_0000, 5), b"hello");
}

#[test]
fn register_mr_validates() {
    let mut p = pair();
    assert!(p.f.register_mr(p.a, 0, 0, Perms::RW).is_err());
    assert!(p.f.register_mr(p.a, u64::MAX, 2, Perms::RW).is_err());
}

#[test]
fn qp_budget_enforced() {
    let mut cost = CostModel::default();
    cost.qp_budget = 2;
    let mut f = Fabric::new(cost);
    let a = f.add_node(Gid::for_node(1));
    f.create_qp(a, QpKind::Dc, depths()).unwrap();
    f.create_qp(a, QpKind::Dc, depths()).unwrap();
    assert!(matches!(
        f.create_qp(a, QpKind::Dc, depths()),
        Err(NicError::QpBudget { .. })
    ));
}

proptest! {
    // Completions come out in post order and each request's status matches a
    // direct model of the access rules.
    #[test]
    fn polls_follow_post_order(reqs in proptest::collection::vec((0u64..5000, 1u32..64, any::<bool>()), 1..12)) {
        let mut p = pair();
        let q = rc(&mut p);
        let mut wrs = Vec::new();
        let mut expect = Vec::new();
        for (i, (off, len, signaled)) in reqs.iter().enumerate() {
            let mut wr = read8(&p, i as u64);
            wr.local.len = *len;
            wr.remote.as_mut().unwrap().addr = p.mr_b.base + off;
            wr.signaled = *signaled || i + 1 == reqs.len();
            wrs.push(wr);
            let ok = off + *len as u64 <= 4096;
            expect.push((i as u64, ok, *signaled || i + 1 == reqs.len()));
        }
        p.f.post_send(q, wrs).unwrap();
        let got = drain(&mut p.f, q);

        // oracle: signaled ok entries until the first failure; that failure
        // and all later entries (flushed) appear regardless of signaled.
        let mut want = Vec::new();
        let mut failed = false;
        for (id, ok, signaled) in expect {
            if failed {
                want.push((id, WcStatus::FlushErr));
            } else if !ok {
                want.push((id, WcStatus::RemAccessErr));
                failed = true;
            } else if signaled {
                want.push((id, WcStatus::Ok));
            }
        }
        let got: Vec<_> = got.iter().map(|c| (c.wr_id, c.status)).collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(p.f.qp_info(q).unwrap().uncomp_cnt, 0);
    }
}
