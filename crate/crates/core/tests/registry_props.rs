mod common;

use common::{ops, Op};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn versions_are_dense(ops in ops()) {
        common::prop_dense_versions(&ops)?;
    }

    #[test]
    fn stale_bases_are_refused(ops in ops()) {
        common::prop_stale_base(&ops)?;
    }

    #[test]
    fn snapshot_ids_depend_only_on_heads(ops in ops()) {
        common::prop_snapshot_determinism(&ops)?;
    }

    #[test]
    fn restore_is_exact(ops in ops()) {
        common::prop_restore_exact(&ops)?;
    }
}

#[test]
fn model_refuses_patch_on_pruned_head() {
    let mut d = common::Drive::new();
    d.step(&Op::Put(0, 1)).unwrap();
    d.step(&Op::Prune(0)).unwrap();
    assert!(d.step(&Op::Patch(0, 0, 2)).unwrap().is_some());
    d.heads_match().unwrap();
}
