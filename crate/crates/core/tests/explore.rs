// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use cvm_model::harness::explore::{bounded_explore, random_schedule, ExploreConfig, ExploreError};
use cvm_model::harness::{run_scenario, RunOptions, Script};
use cvm_model::Mutation;

fn expected(m: Mutation) -> &'static str {
    match m {
        Mutation::SkipZeroizeOnDeallocate => "P3",
        Mutation::DuplicateToken => "S.MT.1",
        Mutation::SkipMicroarchClear => "I.FSM.5",
        Mutation::LeakRegisterOnRoute => "I.FSM.6",
        Mutation::InterruptsEnabledInSm => "I.FSM.1",
        Mutation::InboundWritesAll => "P2",
        Mutation::UndeclaredCallTerminatesOthers => "P4",
        Mutation::SkipIrqRestore => "I.FSM.3",
        Mutation::UntrackedPoolAccess => "I.MT.3",
    }
}

#[test]
fn single_hart_space_is_clean() {
    let r = bounded_explore(&ExploreConfig { harts: 1, cvms: 1, pages: 4, depth: 12, ..Default::default() }).unwrap();
    assert!(r.all_hold(), "{:?}", r.failed_ids());
    assert!(r.counterexample.is_none());
}

#[test]
fn every_mutation_is_caught_and_replays() {
    for m in Mutation::ALL {
        let config = ExploreConfig { mutations: [m].into(), ..Default::default() };
        let r = bounded_explore(&config).unwrap();
        assert_eq!(r.failed_ids(), [expected(m)], "{m}");
        let cex = r.counterexample.unwrap();
        assert_eq!(cex.steps.len(), r.depth);

        let replay = Script::parse(&cex.render()).unwrap();
        let run = run_scenario(&replay, 0, &RunOptions::default()).unwrap();
        let ids: Vec<&str> = run.violations().map(|v| v.id).collect();
        assert_eq!(ids, [expected(m)], "{m} replay");

        let mut fixed = replay.clone();
        fixed.mutations.clear();
        assert!(run_scenario(&fixed, 0, &RunOptions::default()).unwrap().all_hold(), "{m} fixed");
    }
}

/// Random schedules never report a violation the exhaustive search rules
/// out, and find the exhaustive result when given enough tries.
#[test]
fn random_schedules_agree_with_exhaustive_search() {
    for m in Mutation::ALL {
        let config = ExploreConfig { mutations: [m].into(), ..Default::default() };
        let mut seen = BTreeSet::new();
        for seed in 0..200 {
            let (verdicts, _) = random_schedule(&config, 30, seed).unwrap();
            seen.extend(verdicts.iter().filter(|v| !v.holds).map(|v| v.id));
            if seen.contains(expected(m)) {
                break;
            }
        }
        assert!(seen.contains(expected(m)), "{m}: random search found {seen:?}");
    }
    let clean = ExploreConfig::default();
    for seed in 0..50 {
        let (verdicts, path) = random_schedule(&clean, 40, seed).unwrap();
        assert!(verdicts.iter().all(|v| v.holds), "seed {seed}: {path:?}");
    }
}

#[test]
fn budget_and_bounds_are_enforced() {
    let tiny = ExploreConfig { depth: 10, max_states: 20, ..Default::default() };
    assert!(matches!(bounded_explore(&tiny), Err(ExploreError::StateSpaceBudgetExceeded { .. })));
    for bad in [
        ExploreConfig { harts: 3, ..Default::default() },
        ExploreConfig { cvms: 3, ..Default::default() },
        ExploreConfig { pages: 0, ..Default::default() },
    ] {
        assert!(matches!(bounded_explore(&bad), Err(ExploreError::Bounds(_))));
    }
}
