// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Each criterion is checked by an oracle written here,
//! independent of the harness oracle where the criterion allows it, and
//! reported on one line.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use cvm_model::attestation::{derive_attestation_key, verify_report, Digest, Measurement};
use cvm_model::fsm::{apply_state_transformation, Direction};
use cvm_model::harness::explore::{bounded_explore, ExploreConfig};
use cvm_model::harness::faults::{self_test, FaultId};
use cvm_model::harness::{hv_image, run_scenario, sm_image, Action, RunOptions, Script, Snapshot, World, WorldConfig};
use cvm_model::sm::calls::{REG_A0, REG_A2};
use cvm_model::sm::{CallKind, CallTable};
use cvm_model::trace::{render, EventKind};
use cvm_model::tracker::{PageTable, TokenSerial};
use cvm_model::{
    secure_boot, AddrRange, Allocated, AttestationReport, BootOptions, DomainId, Mutation, PageToken, PhysAddr, Platform,
    PrivilegeLevel, NUM_GPRS, PAGE_SIZE, WORD_BYTES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. Token uniqueness under exhaustive interleaving.

fn token_uniqueness() -> Outcome {
    let clean = ExploreConfig { harts: 2, cvms: 2, pages: 8, depth: 14, ..Default::default() };
    let report = bounded_explore(&clean).map_err(|e| e.to_string())?;
    ensure(report.verdicts.iter().any(|v| v.id == "S.MT.1" && v.holds), || "S.MT.1 failed".into())?;
    ensure(report.all_hold(), || format!("violations {:?}", report.failed_ids()))?;

    let mutated = ExploreConfig { mutations: [Mutation::DuplicateToken].into(), ..clean.clone() };
    let bad = bounded_explore(&mutated).map_err(|e| e.to_string())?;
    ensure(bad.failed_ids() == ["S.MT.1"], || format!("mutation tripped {:?}", bad.failed_ids()))?;
    let cex = bad.counterexample.ok_or("no counterexample")?;
    ensure(cex.steps.len() <= mutated.depth, || format!("counterexample of {} steps", cex.steps.len()))?;

    // The counterexample replays from its text form.
    let replayed = Script::parse(&cex.render()).map_err(|e| e.to_string())?;
    let run = run_scenario(&replayed, 0, &RunOptions::default()).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = run.violations().map(|v| v.id).collect();
    ensure(ids == ["S.MT.1"], || format!("replay tripped {ids:?}"))?;
    Ok(format!("{} states clean at depth 14; mutation caught in {} steps", report.states, cex.steps.len()))
}

// 2. Memory tracker invariants under random operation sequences.

const TRACKER_STEPS: usize = 100_000;

struct Tracked {
    world: World,
    pool_range: AddrRange,
    initial: BTreeSet<(TokenSerial, PhysAddr)>,
    loose: Vec<PageToken<Allocated>>,
    tables: Vec<PageTable>,
}

impl Tracked {
    fn live(&self) -> Vec<(TokenSerial, PhysAddr)> {
        let mut out: Vec<_> = self.world.sm().pool().free_tokens().collect();
        out.extend(self.loose.iter().map(|t| (t.serial(), t.base())));
        for t in &self.tables {
            out.push((t.root().serial(), t.root().base()));
            out.extend(t.mappings().values().map(|m| (m.serial(), m.base())));
        }
        out
    }

    fn check(&mut self, step: usize) -> Result<(), String> {
        let total = self.world.sm().pool().total_created();
        ensure(total == self.initial.len() as u64, || format!("step {step}: I.MT.1 total_created {total}"))?;
        let live = self.live();
        let as_set: BTreeSet<_> = live.iter().copied().collect();
        ensure(live.len() == as_set.len() && as_set == self.initial, || format!("step {step}: I.MT.1 token set changed"))?;
        for (i, (sa, a)) in live.iter().enumerate() {
            let ra = AddrRange::new(*a, PAGE_SIZE);
            ensure(self.pool_range.contains_range(&ra), || format!("step {step}: I.MT.2 {sa} outside the pool"))?;
            for (sb, b) in &live[i + 1..] {
                ensure(!ra.overlaps(&AddrRange::new(*b, PAGE_SIZE)), || format!("step {step}: I.MT.2 {sa} and {sb} overlap"))?;
            }
        }

        // I.MT.3: every pool access is announced by a live token covering it.
        let events = self.world.platform_mut().drain_trace();
        let mut announced: Option<(TokenSerial, AddrRange)> = None;
        for e in &events {
            match &e.kind {
                EventKind::TokenAccess { serial, addr, len, .. } => announced = Some((*serial, AddrRange::new(*addr, *len))),
                EventKind::Read { addr, len } | EventKind::Write { addr, len } => {
                    let range = AddrRange::new(*addr, *len);
                    if self.pool_range.overlaps(&range) {
                        let joined = announced.is_some_and(|(s, r)| {
                            r.contains_range(&range)
                                && live.iter().any(|(ls, lb)| *ls == s && AddrRange::new(*lb, PAGE_SIZE).contains_range(&range))
                        });
                        ensure(joined, || format!("step {step}: I.MT.3 access {range} without an owning token"))?;
                    }
                    announced = None;
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn tracker_invariants() -> Outcome {
    let config = WorldConfig { harts: 1, vms: 1, pool_pages: Some(16), mem_pages: 64, ..Default::default() };
    let mut world = World::new(config, &BTreeSet::new()).map_err(|e| e.to_string())?;
    // The tracker is monitor code: run it on a hart in the monitor.
    world.platform_mut().force_mode(0, PrivilegeLevel::Highest, DomainId::SM);
    world.platform_mut().drain_trace();
    let pool_range = world.sm().pool().range();
    let initial: BTreeSet<_> = world.sm().pool().free_tokens().collect();
    let mut t = Tracked { world, pool_range, initial, loose: Vec::new(), tables: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    let mut counts = [0usize; 7];

    for step in 0..TRACKER_STEPS {
        let op = rng.gen_range(0..7);
        let (platform, sm) = t.world.split_mut();
        let pool = sm.pool_mut();
        let done = match op {
            0 => match pool.allocate_zeroed(platform, 0) {
                Ok(tok) => {
                    t.loose.push(tok);
                    true
                }
                Err(_) if pool.free_count() == 0 => false,
                Err(e) => return Err(format!("step {step}: allocate failed with free pages: {e}")),
            },
            1 if !t.loose.is_empty() => {
                let tok = t.loose.swap_remove(rng.gen_range(0..t.loose.len()));
                pool.deallocate(tok, platform, 0).map_err(|e| e.to_string())?;
                true
            }
            2 if t.tables.len() < 3 => match PageTable::new(pool, DomainId::cvm(t.tables.len() as u32), platform, 0) {
                Ok(pt) => {
                    t.tables.push(pt);
                    true
                }
                Err(_) => false,
            },
            3 if !t.loose.is_empty() && !t.tables.is_empty() => {
                let tok = t.loose.swap_remove(rng.gen_range(0..t.loose.len()));
                let k = rng.gen_range(0..t.tables.len());
                match t.tables[k].map_page(rng.gen_range(0..8), tok, platform, 0) {
                    Ok(()) => true,
                    Err((_, tok)) => {
                        t.loose.push(tok);
                        false
                    }
                }
            }
            4 if !t.tables.is_empty() => {
                let k = rng.gen_range(0..t.tables.len());
                match t.tables[k].unmap_page(rng.gen_range(0..8), platform, 0) {
                    Ok(tok) => {
                        t.loose.push(tok);
                        true
                    }
                    Err(_) => false,
                }
            }
            5 if !t.tables.is_empty() => {
                let pt = t.tables.swap_remove(rng.gen_range(0..t.tables.len()));
                let (maps, root, _) = pt.into_parts();
                for (_, tok) in maps {
                    pool.deallocate(tok, platform, 0).map_err(|e| e.to_string())?;
                }
                pool.deallocate(root, platform, 0).map_err(|e| e.to_string())?;
                true
            }
            6 if !t.loose.is_empty() => {
                let tok = &t.loose[rng.gen_range(0..t.loose.len())];
                let offset = rng.gen_range(0..PAGE_SIZE / WORD_BYTES) * WORD_BYTES;
                let value: u64 = rng.gen();
                tok.token_write(platform, 0, offset, value).map_err(|e| e.to_string())?;
                let back = tok.token_read(platform, 0, offset).map_err(|e| e.to_string())?;
                ensure(back == value, || format!("step {step}: token read back {back:#x}"))?;
                true
            }
            _ => false,
        };
        if done {
            counts[op] += 1;
        }
        t.check(step)?;
    }
    Ok(format!("{TRACKER_STEPS} steps, ops {counts:?}, 0 violations"))
}

// 3. Initialization over random boot configurations.

fn random_boots() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb007);
    for i in 0..100 {
        let harts = rng.gen_range(1..=4);
        let mem_pages = rng.gen_range(64..=160u64);
        let pool_pages = rng.gen_bool(0.5).then(|| rng.gen_range(2..=16));
        let mut sm = vec![0u8; rng.gen_range(1..=3 * PAGE_SIZE as usize)];
        let mut hv = vec![0u8; rng.gen_range(1..=2 * PAGE_SIZE as usize)];
        rng.fill(&mut sm[..]);
        rng.fill(&mut hv[..]);
        let mut platform = Platform::new(mem_pages * PAGE_SIZE, harts, rng.gen()).map_err(|e| e.to_string())?;
        let options = BootOptions { pool_pages, call_table: None };
        let (monitor, report) = secure_boot(&mut platform, &sm, &hv, options)
            .map_err(|e| format!("boot {i} ({harts} harts, {mem_pages} pages, pool {pool_pages:?}): {e}"))?;
        let violated = monitor.verify_init_invariants(&platform);
        ensure(violated.is_empty(), || format!("boot {i}: violated {violated:?}"))?;
        ensure(report.invariants_established.len() == 5, || {
            format!("boot {i}: report lists {:?}", report.invariants_established)
        })?;

        let events = platform.trace().events();
        let lock = events.iter().position(|e| matches!(e.kind, EventKind::LockSeed));
        let lower = events.iter().position(|e| e.privilege.is_some_and(|p| p != PrivilegeLevel::Highest));
        match (lock, lower) {
            (Some(l), Some(d)) if l < d => {}
            (Some(_), None) => {}
            other => return Err(format!("boot {i}: lock_seed/first lower event at {other:?}")),
        }
    }
    Ok("100 boots, no violated invariant, seed locked before any lower-privilege event".into())
}

// 4. Register sanitization on routed exits.

const ROUTED_EXITS: usize = 10_000;

fn sanitization() -> Outcome {
    let table = CallTable::from_toml(cvm_model::sm::calls::DEFAULT_CALL_TABLE).map_err(|e| e.to_string())?;
    let routed: Vec<_> = table.entries().filter(|e| e.kind.is_routed()).cloned().collect();
    let reason = table.exit_reason_register();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a71);

    // Pure transformation: visible words equal the source, everything else
    // equals the zero baseline.
    for i in 0..ROUTED_EXITS {
        let entry = &routed[rng.gen_range(0..routed.len())];
        let mut source = [0u64; NUM_GPRS];
        rng.fill(&mut source[..]);
        let view = apply_state_transformation(&table, entry.id, &source, Direction::CToNc).map_err(|e| e.to_string())?;
        for r in 0..NUM_GPRS {
            let expect = if r == reason {
                entry.id
            } else if entry.args.contains(&(r as u8)) {
                source[r]
            } else {
                0
            };
            ensure(view.words[r] == expect, || format!("transform {i}: call {:#x} x{r} = {:#x}", entry.id, view.words[r]))?;
        }
    }

    // End to end: the registers the hypervisor holds after a routed exit.
    let hypercalls: Vec<_> = routed.iter().filter(|e| e.kind == CallKind::Hypercall).cloned().collect();
    let config = WorldConfig { harts: 1, vms: 1, ..Default::default() };
    let mut world = World::new(config, &BTreeSet::new()).map_err(|e| e.to_string())?;
    let step = |w: &mut World, a: Action| w.step(&a).map(|_| ()).map_err(|e| format!("{a}: {e}"));
    step(&mut world, Action::Promote { hart: 0, vm: DomainId::vm(0) })?;
    for i in 0..ROUTED_EXITS {
        step(&mut world, Action::Resume { hart: 0, cvm: DomainId::cvm(0), reply: rng.gen() })?;
        step(&mut world, Action::CvmRegs { hart: 0, value: rng.gen() })?;
        let entry = &hypercalls[rng.gen_range(0..hypercalls.len())];
        let args = [rng.gen(), rng.gen(), rng.gen()];
        let cvm_regs = *world.platform().gprs(0);
        step(&mut world, Action::CvmCall { hart: 0, id: entry.id, args })?;
        let mut expected_cvm = cvm_regs;
        expected_cvm[REG_A0..=REG_A2].copy_from_slice(&args);
        expected_cvm[cvm_model::sm::calls::REG_CALL_ID] = entry.id;
        let hv = world.platform().gprs(0);
        for r in 1..NUM_GPRS {
            let expect = if r == reason {
                entry.id
            } else if entry.args.contains(&(r as u8)) {
                expected_cvm[r]
            } else {
                0
            };
            ensure(hv[r] == expect, || {
                format!("exit {i}: call {:#x} hypervisor x{r} = {:#x}, want {expect:#x}", entry.id, hv[r])
            })?;
        }
        world.drain_trace();
    }
    Ok(format!("{ROUTED_EXITS} transformations and {ROUTED_EXITS} routed exits match the baseline"))
}

// 5. Confidentiality sweeps and zero-after-terminate.

fn confidential_pages(world: &World) -> Vec<PhysAddr> {
    world.platform().isolation().confidential.iter().flat_map(|r| r.page_bases()).collect()
}

fn probe_sweeps() -> Outcome {
    let config = WorldConfig { harts: 2, vms: 2, pool_pages: Some(8), mem_pages: 48, ..Default::default() };
    let mut world = World::new(config, &BTreeSet::new()).map_err(|e| e.to_string())?;
    for a in [
        Action::Promote { hart: 1, vm: DomainId::vm(0) },
        Action::Promote { hart: 1, vm: DomainId::vm(1) },
        Action::Resume { hart: 0, cvm: DomainId::cvm(0), reply: 0 },
        Action::CvmStore { hart: 0, addr: 0, value: 0x5ec7 },
        Action::CvmRegs { hart: 0, value: 0x5ec7 },
    ] {
        world.step(&a).map_err(|e| format!("{a}: {e}"))?;
    }
    let pages = confidential_pages(&world);
    let before: Vec<Vec<u8>> = pages.iter().map(|p| world.platform().peek(*p, PAGE_SIZE)).collect();

    // Every non-confidential context a spare hart can be in, plus DMA.
    let contexts = [
        (PrivilegeLevel::Middle, DomainId::HYPERVISOR),
        (PrivilegeLevel::Lowest, DomainId::HYPERVISOR),
        (PrivilegeLevel::Lowest, DomainId::vm(0)),
        (PrivilegeLevel::Lowest, DomainId::vm(1)),
    ];
    let saved = world.platform().hart(1).clone();
    let mut attempts = 0u64;
    let p = world.platform_mut();
    for (privilege, domain) in contexts {
        p.force_mode(1, privilege, domain);
        for page in &pages {
            for w in 0..PAGE_SIZE / WORD_BYTES {
                let addr = page.add(w * WORD_BYTES);
                attempts += 2;
                ensure(p.read_phys(1, addr, WORD_BYTES).is_err(), || format!("{domain} read {addr}"))?;
                ensure(p.write_phys(1, addr, WORD_BYTES, !0).is_err(), || format!("{domain} wrote {addr}"))?;
            }
        }
    }
    p.force_mode(1, saved.privilege, saved.domain);
    for page in &pages {
        for w in 0..PAGE_SIZE / WORD_BYTES {
            let addr = page.add(w * WORD_BYTES);
            attempts += 2;
            ensure(p.dma_read(addr, WORD_BYTES).is_err(), || format!("DMA read {addr}"))?;
            ensure(p.dma_write(addr, WORD_BYTES, !0).is_err(), || format!("DMA wrote {addr}"))?;
        }
    }
    let after: Vec<Vec<u8>> = pages.iter().map(|p| world.platform().peek(*p, PAGE_SIZE)).collect();
    ensure(before == after, || "denied writes changed confidential memory".into())?;

    // The hypervisor's own sweep action agrees.
    let obs = world.step(&Action::ProbeAll { hart: 1 }).map_err(|e| e.to_string())?;
    ensure(obs.attempts > 0 && obs.denied == obs.attempts, || format!("probe_all denied {}/{}", obs.denied, obs.attempts))?;

    // Terminate CVMs holding secrets in every page; each former page reads
    // zero before the pool hands it out again.
    let mut rng = ChaCha8Rng::seed_from_u64(0x2e20);
    let mut checked = 0;
    let config = WorldConfig { harts: 1, vms: 2, vm_pages: 2, pool_pages: Some(8), mem_pages: 48, ..Default::default() };
    for round in 0..50 {
        let mut w = World::new(config.clone(), &BTreeSet::new()).map_err(|e| e.to_string())?;
        let vm = DomainId::vm(rng.gen_range(0..2));
        w.step(&Action::Promote { hart: 0, vm }).map_err(|e| e.to_string())?;
        let cvm = Snapshot::capture(&w).cvms[0].id;
        w.step(&Action::Resume { hart: 0, cvm, reply: 0 }).map_err(|e| e.to_string())?;
        for page in 0..config.vm_pages {
            for _ in 0..4 {
                let addr = page * PAGE_SIZE + rng.gen_range(0..PAGE_SIZE / WORD_BYTES) * WORD_BYTES;
                w.step(&Action::CvmStore { hart: 0, addr, value: rng.gen::<u64>() | 1 }).map_err(|e| e.to_string())?;
            }
        }
        let former = Snapshot::capture(&w).cvms[0].private_pages.clone();
        let terminate = if rng.gen_bool(0.5) {
            // Self-termination from inside the CVM.
            let id = w.sm().calls().entries().find(|e| e.kind == CallKind::Terminate).map(|e| e.id).unwrap();
            Action::CvmCall { hart: 0, id, args: [0; 3] }
        } else {
            w.step(&Action::CvmCall { hart: 0, id: 0x10, args: [0; 3] }).map_err(|e| e.to_string())?;
            Action::Terminate { hart: 0, cvm }
        };
        w.step(&terminate).map_err(|e| format!("round {round}: {terminate}: {e}"))?;
        for page in &former {
            ensure(w.platform().page_is_zero(*page), || format!("round {round}: former page {page} not zero"))?;
            checked += 1;
        }
    }
    Ok(format!("{attempts} probes over {} pages denied; {checked} former pages zero after terminate", pages.len()))
}

// 6. Attestation soundness.

fn mutate_report(r: &AttestationReport, rng: &mut ChaCha8Rng) -> AttestationReport {
    let mut m = r.clone();
    match rng.gen_range(0..5) {
        0 => {
            let mut bytes = m.key_id.into_bytes();
            let i = rng.gen_range(0..bytes.len());
            bytes[i] = if bytes[i] == b'0' { b'1' } else { b'0' };
            m.key_id = String::from_utf8(bytes).unwrap();
        }
        1 => m.measurement.0[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8),
        2 => match rng.gen_range(0..3) {
            0 if !m.nonce.is_empty() => {
                let i = rng.gen_range(0..m.nonce.len());
                m.nonce[i] ^= 1 << rng.gen_range(0..8);
            }
            1 if !m.nonce.is_empty() => {
                m.nonce.pop();
            }
            _ => m.nonce.push(rng.gen()),
        },
        3 => {
            let i = rng.gen_range(0..m.boot_chain.len());
            match rng.gen_range(0..3) {
                0 => m.boot_chain[i].digest.0[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8),
                1 => m.boot_chain[i].subject.push('x'),
                _ => {
                    m.boot_chain.remove(i);
                }
            }
        }
        _ => m.signature[rng.gen_range(0..64)] ^= 1 << rng.gen_range(0..8),
    }
    m
}

fn attestation() -> Outcome {
    let config = WorldConfig { harts: 1, vms: 1, ..Default::default() };
    let mut world = World::new(config.clone(), &BTreeSet::new()).map_err(|e| e.to_string())?;
    world.step(&Action::Promote { hart: 0, vm: DomainId::vm(0) }).map_err(|e| e.to_string())?;
    world.step(&Action::Attest { hart: 0, cvm: DomainId::cvm(0), nonce: 0xfeed }).map_err(|e| e.to_string())?;
    let report = world.sm().report(DomainId::cvm(0)).cloned().ok_or("no report issued")?;
    let public = world.boot().public_key();
    ensure(verify_report(&public, &report), || "honest report rejected".into())?;
    // Independent measurement: SHA-256 over the page count and the image pages.
    let mut h = Sha256::new();
    h.update(config.vm_pages.to_le_bytes());
    for page in 0..config.vm_pages {
        h.update(cvm_model::harness::vm_page(0, page));
    }
    let expected = Digest(h.finalize().into());
    ensure(report.measurement == expected, || "report measurement differs from the image digest".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xa77e);
    let mut accepted = 0;
    for _ in 0..1000 {
        let m = mutate_report(&report, &mut rng);
        if m != report && verify_report(&public, &m) {
            accepted += 1;
        }
    }
    ensure(accepted == 0, || format!("{accepted} mutated reports accepted"))?;

    // Keys from different seeds never cross-verify.
    let chain = vec![Measurement::of("sm", &sm_image()), Measurement::of("hypervisor", &hv_image())];
    let keys: Vec<_> = (0..16u8).map(|s| derive_attestation_key(&[s; 32], &chain)).collect();
    let mut pairs = 0;
    for (i, signer) in keys.iter().enumerate() {
        let r = signer.sign_report(Digest([i as u8; 32]), b"nonce", &chain);
        for (j, verifier) in keys.iter().enumerate() {
            ensure(verify_report(&verifier.public(), &r) == (i == j), || format!("seed {i} report vs seed {j} key"))?;
            pairs += 1;
        }
    }
    // The same holds for keys derived on booted platforms.
    let worlds: Vec<World> = (0..4)
        .map(|seed| World::new(WorldConfig { harts: 1, vms: 1, seed, ..Default::default() }, &BTreeSet::new()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for (i, a) in worlds.iter().enumerate() {
        for (j, b) in worlds.iter().enumerate() {
            ensure((a.boot().public_key == b.boot().public_key) == (i == j), || format!("platforms {i} and {j} share a key"))?;
        }
    }
    ensure(
        !verify_report(&worlds[1].boot().public_key(), &report) || worlds[1].boot().public_key == world.boot().public_key,
        || "report verified under another platform's key".into(),
    )?;
    Ok(format!("honest report verifies; 1000 mutations, 0 accepted; {pairs} cross-seed pairs separate"))
}

// 7. Fault catalog self-test.

fn oracle_self_test() -> Outcome {
    let outcomes = self_test();
    ensure(outcomes.len() >= 8 && outcomes.len() == FaultId::ALL.len(), || format!("{} faults", outcomes.len()))?;
    let inexact: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.is_exact())
        .map(|o| format!("{} -> {:?} (want {}) {:?}", o.fault, o.tripped, o.target, o.error))
        .collect();
    ensure(inexact.is_empty(), || inexact.join("; "))?;
    let families: BTreeSet<&str> = outcomes
        .iter()
        .map(|o| match o.target {
            t if t.starts_with("HW.") => "hardware",
            t if t.contains("Init") => "initialization",
            t if t.contains("FSM") => "state machine",
            t if t.contains("MT") => "memory tracker",
            t if t.starts_with('P') => "policy",
            _ => "attestation",
        })
        .collect();
    ensure(families.len() == 6, || format!("families covered: {families:?}"))?;
    Ok(format!("{} faults, each trips exactly its target, {} families", outcomes.len(), families.len()))
}

// 8. Determinism.

fn determinism() -> Outcome {
    let text = include_str!("../../../scenarios/nominal.scn");
    let script = Script::parse(text).map_err(|e| e.to_string())?;
    for seed in [0, 1, 0xdead_beef] {
        let a = run_scenario(&script, seed, &RunOptions::default()).map_err(|e| e.to_string())?;
        let b = run_scenario(&script, seed, &RunOptions::default()).map_err(|e| e.to_string())?;
        ensure(render(&a.trace) == render(&b.trace), || format!("seed {seed}: traces differ"))?;
        ensure(a.boot.to_record() == b.boot.to_record(), || format!("seed {seed}: boot reports differ"))?;
    }

    let boot = |seed: u64| -> Result<(String, String), String> {
        let mut p = Platform::new(64 * PAGE_SIZE, 2, seed).map_err(|e| e.to_string())?;
        let (_, report) = secure_boot(&mut p, &sm_image(), &hv_image(), BootOptions::default()).map_err(|e| e.to_string())?;
        Ok((p.trace().render(), report.to_record()))
    };
    ensure(boot(5)? == boot(5)?, || "platform boots differ".into())?;
    ensure(boot(5)?.1 != boot(6)?.1, || "different seeds gave the same boot report".into())?;

    let config = ExploreConfig { harts: 2, cvms: 2, pages: 8, depth: 9, workers: Some(1), ..Default::default() };
    let one = bounded_explore(&config).map_err(|e| e.to_string())?;
    let many = bounded_explore(&ExploreConfig { workers: Some(4), ..config }).map_err(|e| e.to_string())?;
    ensure(one.states == many.states && one.verdicts == many.verdicts, || "exploration depends on worker count".into())?;
    Ok("traces, boot reports and exploration results repeat exactly".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("token uniqueness", token_uniqueness),
        ("memory tracker invariants", tracker_invariants),
        ("initialization", random_boots),
        ("register sanitization", sanitization),
        ("confidentiality policy", probe_sweeps),
        ("attestation", attestation),
        ("oracle self-test", oracle_self_test),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {} {name}: {why}", i + 1);
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        println!("all {} criteria pass", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
