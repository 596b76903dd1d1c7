use std::time::Instant;

use kitsune_core::queue::check::{explore, CheckConfig, Fault, ViolationKind};

#[test]
fn all_small_configurations_are_safe_and_live() {
    let start = Instant::now();
    for consumers in [1, 2] {
        for depth in [2, 3] {
            for items in 1..=6 {
                let cfg = CheckConfig { consumers, depth, items, fault: Fault::None };
                let report = explore(&cfg);
                assert!(report.passed(), "{cfg:?}: {:?}", report.violations);
                assert!(report.terminal_states >= 1, "{cfg:?} never terminates");
            }
        }
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn injected_faults_are_caught_with_a_trace() {
    let base = CheckConfig { consumers: 1, depth: 2, items: 4, fault: Fault::None };
    let r = explore(&CheckConfig { fault: Fault::SkipConsumerCheck, ..base });
    // the lap invariant trips on the acquire, before the write lands
    let v = r
        .violations
        .iter()
        .find(|v| matches!(v.kind, ViolationKind::OverwriteBeforeConsume | ViolationKind::Invariant(_)))
        .unwrap_or_else(|| panic!("{:?}", r.violations));
    assert!(v.trace.last().unwrap().contains("wr_acquire"));
    let r = explore(&CheckConfig { fault: Fault::SkipPublishCheck, consumers: 2, ..base });
    assert!(r
        .violations
        .iter()
        .any(|v| matches!(v.kind, ViolationKind::ReadBeforePublish | ViolationKind::Invariant(_))));
}
