// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use cvm_model::harness::explore::{random_schedule, ExploreConfig};
use cvm_model::harness::faults::FaultId;
use cvm_model::harness::{Action, Script, Step, World, WorldConfig};
use cvm_model::hw::IrqId;
use cvm_model::tracker::PageTable;
use cvm_model::{AddrRange, DomainId, Mutation, PrivilegeLevel, PAGE_SIZE};
use proptest::prelude::*;

fn small() -> impl Strategy<Value = u64> {
    prop_oneof![0..16u64, any::<u64>()]
}

fn action() -> impl Strategy<Value = Action> {
    let hart = 0..4usize;
    prop_oneof![
        (hart.clone(), 0..4u32).prop_map(|(hart, n)| Action::Promote { hart, vm: DomainId::vm(n) }),
        (hart.clone(), 0..4u32, small()).prop_map(|(hart, n, reply)| Action::Resume { hart, cvm: DomainId::cvm(n), reply }),
        (hart.clone(), 0..4u32).prop_map(|(hart, n)| Action::Terminate { hart, cvm: DomainId::cvm(n) }),
        (hart.clone(), 0..4u32, small()).prop_map(|(hart, n, nonce)| Action::Attest { hart, cvm: DomainId::cvm(n), nonce }),
        (hart.clone(), small(), any::<[u64; 3]>()).prop_map(|(hart, id, args)| Action::SmCall { hart, id, args }),
        (hart.clone(), small()).prop_map(|(hart, addr)| Action::ReadProbe { hart, addr }),
        (small(), any::<bool>()).prop_map(|(addr, write)| Action::DmaProbe { addr, write }),
        hart.clone().prop_map(|hart| Action::ProbeAll { hart }),
        (hart.clone(), 0..64u32).prop_map(|(hart, irq)| Action::Interrupt { hart, irq: IrqId(irq) }),
        (hart.clone(), small()).prop_map(|(hart, value)| Action::CvmRegs { hart, value }),
        (hart.clone(), small(), small()).prop_map(|(hart, addr, value)| Action::CvmStore { hart, addr, value }),
        (hart.clone(), small()).prop_map(|(hart, addr)| Action::CvmLoad { hart, addr }),
        (hart, small(), any::<[u64; 3]>()).prop_map(|(hart, id, args)| Action::CvmCall { hart, id, args }),
    ]
}

fn script() -> impl Strategy<Value = Script> {
    let step = prop_oneof![
        4 => action().prop_map(Step::Action),
        1 => prop::sample::select(FaultId::ALL.to_vec()).prop_map(Step::Fault),
    ];
    (
        1..4usize,
        0..4usize,
        1..4u64,
        any::<bool>(),
        prop::collection::vec(step, 0..12),
        prop::collection::btree_set(prop::sample::select(Mutation::ALL.to_vec()), 0..3),
        any::<u64>(),
    )
        .prop_map(|(harts, vms, vm_pages, victims, steps, mutations, seed)| Script {
            config: WorldConfig { harts, vms, vm_pages, pool_pages: Some(8), mem_pages: 64, seed },
            victims,
            steps,
            mutations,
            expect: Vec::new(),
        })
}

proptest! {
    #[test]
    fn scripts_round_trip(s in script()) {
        let text = s.render();
        let parsed = Script::parse(&text).unwrap();
        prop_assert_eq!(parsed.render(), text);
        prop_assert_eq!(parsed.steps, s.steps);
        prop_assert_eq!(parsed.mutations, s.mutations);
        prop_assert_eq!(parsed.config, s.config);
    }
}

#[derive(Clone, Debug)]
enum Op {
    Alloc,
    Free(usize),
    NewTable,
    Map(usize, usize, u64),
    Unmap(usize, u64),
    DropTable(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Alloc),
        any::<usize>().prop_map(Op::Free),
        Just(Op::NewTable),
        (any::<usize>(), any::<usize>(), 0..6u64).prop_map(|(t, k, g)| Op::Map(t, k, g)),
        (any::<usize>(), 0..6u64).prop_map(|(t, g)| Op::Unmap(t, g)),
        any::<usize>().prop_map(Op::DropTable),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Tokens are conserved and never overlap, whatever the operation order.
    #[test]
    fn tracker_conserves_tokens(ops in prop::collection::vec(op(), 1..120)) {
        let config = WorldConfig { harts: 1, vms: 1, pool_pages: Some(10), mem_pages: 64, ..Default::default() };
        let mut world = World::new(config, &BTreeSet::new()).unwrap();
        world.platform_mut().force_mode(0, PrivilegeLevel::Highest, DomainId::SM);
        let initial: BTreeSet<_> = world.sm().pool().free_tokens().collect();
        let mut loose = Vec::new();
        let mut tables: Vec<PageTable> = Vec::new();
        for op in ops {
            let (p, sm) = world.split_mut();
            let pool = sm.pool_mut();
            match op {
                Op::Alloc => {
                    if let Ok(t) = pool.allocate_zeroed(p, 0) {
                        loose.push(t);
                    }
                }
                Op::Free(i) if !loose.is_empty() => pool.deallocate(loose.swap_remove(i % loose.len()), p, 0).unwrap(),
                Op::NewTable => {
                    if let Ok(t) = PageTable::new(pool, DomainId::cvm(0), p, 0) {
                        tables.push(t);
                    }
                }
                Op::Map(t, k, g) if !tables.is_empty() && !loose.is_empty() => {
                    let tok = loose.swap_remove(k % loose.len());
                    let n = tables.len();
                    if let Err((_, tok)) = tables[t % n].map_page(g, tok, p, 0) {
                        loose.push(tok);
                    }
                }
                Op::Unmap(t, g) if !tables.is_empty() => {
                    let n = tables.len();
                    if let Ok(tok) = tables[t % n].unmap_page(g, p, 0) {
                        loose.push(tok);
                    }
                }
                Op::DropTable(t) if !tables.is_empty() => {
                    let (maps, root, _) = tables.swap_remove(t % tables.len()).into_parts();
                    for (_, tok) in maps {
                        pool.deallocate(tok, p, 0).unwrap();
                    }
                    pool.deallocate(root, p, 0).unwrap();
                }
                _ => {}
            }

            let mut live: Vec<_> = world.sm().pool().free_tokens().collect();
            live.extend(loose.iter().map(|t| (t.serial(), t.base())));
            for t in &tables {
                live.push((t.root().serial(), t.root().base()));
                live.extend(t.mappings().values().map(|m| (m.serial(), m.base())));
            }
            let set: BTreeSet<_> = live.iter().copied().collect();
            prop_assert_eq!(set.len(), live.len());
            prop_assert_eq!(&set, &initial);
            let mut ranges: Vec<AddrRange> = live.iter().map(|(_, b)| AddrRange::new(*b, PAGE_SIZE)).collect();
            ranges.sort_by_key(|r| r.start());
            for w in ranges.windows(2) {
                prop_assert!(!w[0].overlaps(&w[1]));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any schedule of untrusted actions against the unmodified monitor
    /// leaves every verdict holding.
    #[test]
    fn random_schedules_hold(seed in any::<u64>(), harts in 1..=2usize, cvms in 1..=2usize) {
        let config = ExploreConfig { harts, cvms, pages: 6, ..Default::default() };
        let (verdicts, path) = random_schedule(&config, 60, seed).unwrap();
        let failed: Vec<_> = verdicts.iter().filter(|v| !v.holds).map(|v| v.to_string()).collect();
        prop_assert!(failed.is_empty(), "{:?} after {:?}", failed, path);
    }
}
