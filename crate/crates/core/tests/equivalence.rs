use proptest::prelude::*;
use vqp_core::conformance::equivalence::{check_equivalent, check_transparent, depth, vqp_trace};
use vqp_core::conformance::streams::{valid_lists, Req};
use vqp_core::nic::QpKind;

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn single_vqp_matches_raw_verbs(lists in valid_lists(depth(), 8)) {
        check_equivalent(&lists)?;
    }

    #[test]
    fn transfer_mid_stream_is_invisible(
        lists in valid_lists(depth(), 8),
        gaps in prop::collection::vec(0u64..3_000, 8),
        at in 0u64..20_000,
    ) {
        check_transparent(&lists, &gaps, at)?;
    }
}

#[test]
fn transfer_happens_mid_stream_for_some_streams() {
    // sanity for the property above: the swap point lands inside the stream
    let lists: Vec<Vec<Req>> = (0..8)
        .map(|i| {
            (0..10)
                .map(|j| Req::Read {
                    off: 64 * (i * 10 + j),
                    len: 64,
                    signaled: j % 3 == 0,
                })
                .collect()
        })
        .collect();
    let (_, kinds, _) = vqp_trace(&lists, &[1_000; 8], Some(3_000));
    assert_eq!(kinds.first(), Some(&QpKind::Dc));
    assert_eq!(kinds.last(), Some(&QpKind::Rc));
}
