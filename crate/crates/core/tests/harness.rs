// SPDX-License-Identifier: Apache-2.0

use cvm_model::harness::explore::{bounded_explore, ExploreConfig};
use cvm_model::harness::faults::{fault_world, self_test, FaultId};
use cvm_model::harness::{run_scenario, Checker, RunOptions, Script, Snapshot};
use cvm_model::DomainId;

const NOMINAL: &str = "\
config harts=2 vms=2 vm_pages=1 pool_pages=8 mem_pages=48 seed=3
action promote(hart=1, vm=vm0)
action promote(hart=1, vm=vm1)
action resume(hart=0, cvm=cvm0)
action cvm_regs(hart=0, value=0x1234)
action cvm_store(hart=0, addr=0x10, value=0x77)
action cvm_load(hart=0, addr=0x10)
action cvm_call(hart=0, id=0x04, a0=8)
action cvm_call(hart=0, id=0x10, a0=0x41)
action probe_all(hart=1)
action impersonate(hart=1)
action resume(hart=1, cvm=cvm1)
action interrupt(hart=1, irq=5)
action resume(hart=0, cvm=cvm0, reply=5)
action cvm_store(hart=0, addr=0x40000, value=1)
action attest(hart=1, cvm=cvm1, nonce=9)
action resume(hart=0, cvm=cvm0)
action cvm_call(hart=0, id=0x03)
action terminate(hart=1, cvm=cvm1)
action dma_probe(addr=0x20000, write=1)
";

#[test]
fn nominal_scenario_holds_every_invariant() {
    let script = Script::parse(NOMINAL).unwrap();
    for seed in 0..8 {
        let r = run_scenario(&script, seed, &RunOptions::default()).unwrap();
        let bad: Vec<String> = r.violations().map(|v| v.to_string()).collect();
        assert!(bad.is_empty(), "seed {seed}: {bad:?}");
    }
}

#[test]
fn fault_world_is_clean() {
    let w = fault_world();
    let mut c = Checker::new(&w);
    c.observe_all(w.trace());
    c.check_snapshot(&Snapshot::capture(&w));
    assert!(c.failed_ids().is_empty(), "{:?}", c.verdicts());
    assert_eq!(w.sm().running_cvm(0), Some(DomainId::cvm(0)));
}

#[test]
fn every_fault_trips_exactly_its_target() {
    let outcomes = self_test();
    assert_eq!(outcomes.len(), FaultId::ALL.len());
    let bad: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.is_exact())
        .map(|o| format!("{} -> {:?} (want {}) {:?}", o.fault, o.tripped, o.target, o.error))
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn small_exploration_is_clean() {
    let cfg = ExploreConfig { harts: 2, cvms: 1, pages: 4, depth: 5, ..Default::default() };
    let r = bounded_explore(&cfg).unwrap();
    assert!(r.all_hold(), "{:?} {:?}", r.failed_ids(), r.counterexample.map(|s| s.render()));
    assert!(r.states > 10);
}
