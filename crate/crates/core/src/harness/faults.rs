// SPDX-License-Identifier: Apache-2.0

//! Fault catalog: one seeded violation per checked invariant.
//!
//! Each fault breaks exactly one property, either by tampering with state
//! directly, by enabling a monitor mutation and driving it, or by forging
//! hardware behavior the model itself never produces. The catalog
//! self-test applies each fault to the same base world and expects the
//! oracle to flag exactly the targeted verdict.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::fsm::FsmNode;
use crate::harness::{adversary, Action, Checker, Role, Snapshot, StepError, World, WorldConfig};
use crate::hw::{AddrRange, DomainId, IrqId, PrivilegeLevel, Route};
use crate::sm::{CallKind, Mutation};
use crate::trace::EventKind;
use crate::PAGE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultId {
    RaisePrivilege,
    ForgedAccess,
    SeedReread,
    HvHandlerAtHighest,
    GrantControlToHv,
    DeclassifySm,
    UnpinIrq,
    SeedUnlock,
    SkipNode,
    InterruptsInSm,
    RetargetDropped,
    SkipIrqRestore,
    SaveOutsideControl,
    SkipMicroarchClear,
    LeakRegisters,
    ForgeToken,
    AliasToken,
    UntrackedPoolAccess,
    DuplicateToken,
    GrantCvmPageToHv,
    InboundWritesAll,
    SkipZeroize,
    UndeclaredTerminatesOthers,
    TamperMeasurement,
}

impl FaultId {
    pub const ALL: [FaultId; 24] = [
        FaultId::RaisePrivilege,
        FaultId::ForgedAccess,
        FaultId::SeedReread,
        FaultId::HvHandlerAtHighest,
        FaultId::GrantControlToHv,
        FaultId::DeclassifySm,
        FaultId::UnpinIrq,
        FaultId::SeedUnlock,
        FaultId::SkipNode,
        FaultId::InterruptsInSm,
        FaultId::RetargetDropped,
        FaultId::SkipIrqRestore,
        FaultId::SaveOutsideControl,
        FaultId::SkipMicroarchClear,
        FaultId::LeakRegisters,
        FaultId::ForgeToken,
        FaultId::AliasToken,
        FaultId::UntrackedPoolAccess,
        FaultId::DuplicateToken,
        FaultId::GrantCvmPageToHv,
        FaultId::InboundWritesAll,
        FaultId::SkipZeroize,
        FaultId::UndeclaredTerminatesOthers,
        FaultId::TamperMeasurement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultId::RaisePrivilege => "raise-privilege",
            FaultId::ForgedAccess => "forged-access",
            FaultId::SeedReread => "seed-reread",
            FaultId::HvHandlerAtHighest => "hv-handler-at-highest",
            FaultId::GrantControlToHv => "grant-control-to-hv",
            FaultId::DeclassifySm => "declassify-sm",
            FaultId::UnpinIrq => "unpin-irq",
            FaultId::SeedUnlock => "seed-unlock",
            FaultId::SkipNode => "skip-node",
            FaultId::InterruptsInSm => "interrupts-in-sm",
            FaultId::RetargetDropped => "retarget-dropped",
            FaultId::SkipIrqRestore => "skip-irq-restore",
            FaultId::SaveOutsideControl => "save-outside-control",
            FaultId::SkipMicroarchClear => "skip-microarch-clear",
            FaultId::LeakRegisters => "leak-registers",
            FaultId::ForgeToken => "forge-token",
            FaultId::AliasToken => "alias-token",
            FaultId::UntrackedPoolAccess => "untracked-pool-access",
            FaultId::DuplicateToken => "duplicate-token",
            FaultId::GrantCvmPageToHv => "grant-cvm-page-to-hv",
            FaultId::InboundWritesAll => "inbound-writes-all",
            FaultId::SkipZeroize => "skip-zeroize",
            FaultId::UndeclaredTerminatesOthers => "undeclared-terminates-others",
            FaultId::TamperMeasurement => "tamper-measurement",
        }
    }

    /// The verdict this fault must trip.
    pub fn target(self) -> &'static str {
        match self {
            FaultId::RaisePrivilege => "HW.PrivMonotonic",
            FaultId::ForgedAccess => "HW.IsolationSound",
            FaultId::SeedReread => "HW.SeedLock",
            FaultId::HvHandlerAtHighest => "I.Init.1",
            FaultId::GrantControlToHv => "I.Init.2",
            FaultId::DeclassifySm => "I.Init.3",
            FaultId::UnpinIrq => "I.Init.4",
            FaultId::SeedUnlock => "I.Init.5",
            FaultId::SkipNode => "FSM.Path",
            FaultId::InterruptsInSm => "I.FSM.1",
            FaultId::RetargetDropped => "I.FSM.2",
            FaultId::SkipIrqRestore => "I.FSM.3",
            FaultId::SaveOutsideControl => "I.FSM.4",
            FaultId::SkipMicroarchClear => "I.FSM.5",
            FaultId::LeakRegisters => "I.FSM.6",
            FaultId::ForgeToken => "I.MT.1",
            FaultId::AliasToken => "I.MT.2",
            FaultId::UntrackedPoolAccess => "I.MT.3",
            FaultId::DuplicateToken => "S.MT.1",
            FaultId::GrantCvmPageToHv => "P1",
            FaultId::InboundWritesAll => "P2",
            FaultId::SkipZeroize => "P3",
            FaultId::UndeclaredTerminatesOthers => "P4",
            FaultId::TamperMeasurement => "ATT.Sound",
        }
    }

    /// Monitor mutation the fault drives, if any.
    pub fn mutation(self) -> Option<Mutation> {
        Some(match self {
            FaultId::InterruptsInSm => Mutation::InterruptsEnabledInSm,
            FaultId::SkipIrqRestore => Mutation::SkipIrqRestore,
            FaultId::SkipMicroarchClear => Mutation::SkipMicroarchClear,
            FaultId::LeakRegisters => Mutation::LeakRegisterOnRoute,
            FaultId::UntrackedPoolAccess => Mutation::UntrackedPoolAccess,
            FaultId::DuplicateToken => Mutation::DuplicateToken,
            FaultId::InboundWritesAll => Mutation::InboundWritesAll,
            FaultId::SkipZeroize => Mutation::SkipZeroizeOnDeallocate,
            FaultId::UndeclaredTerminatesOthers => Mutation::UndeclaredCallTerminatesOthers,
            _ => return None,
        })
    }
}

impl fmt::Display for FaultId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("unknown fault `{0}`")]
pub struct UnknownFault(pub String);

impl FromStr for FaultId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultId::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| UnknownFault(s.to_string()).to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("fault {fault} needs {needs}")]
    Precondition { fault: FaultId, needs: &'static str },
    #[error("fault {fault}: {error}")]
    Step { fault: FaultId, error: StepError },
}

/// Word the victim CVM keeps in its registers and private memory.
pub const VICTIM_SECRET: u64 = 0x5ec7_e7ba_d0c0_ffee;

/// Guest page no CVM image maps; CVM accesses there exit as MMIO.
pub const MMIO_GUEST_PAGE: u64 = 0x40;

fn hypercall_id(world: &World) -> u64 {
    world.sm().calls().entries().find(|e| e.kind == CallKind::Hypercall).map_or(0x10, |e| e.id)
}

/// A call id absent from the call table.
pub fn undeclared_call_id(world: &World) -> u64 {
    (0x40..).find(|id| world.sm().calls().get(*id).is_none()).expect("finite table")
}

fn find_hart(world: &World, want: impl Fn(Role) -> bool) -> Option<usize> {
    (0..world.platform().hart_count()).find(|h| want(world.role(*h)))
}

fn hv_hart(world: &World, fault: FaultId) -> Result<usize, FaultError> {
    find_hart(world, |r| r == Role::Hypervisor).ok_or(FaultError::Precondition { fault, needs: "a hypervisor hart" })
}

fn cvm_hart(world: &World, fault: FaultId) -> Result<(usize, DomainId), FaultError> {
    (0..world.platform().hart_count())
        .find_map(|h| match world.role(h) {
            Role::Cvm(d) => Some((h, d)),
            _ => None,
        })
        .ok_or(FaultError::Precondition { fault, needs: "a hart running a CVM" })
}

/// A runnable CVM not running anywhere.
fn idle_cvm(world: &World, fault: FaultId) -> Result<DomainId, FaultError> {
    world
        .sm()
        .domains()
        .values()
        .find(|d| d.is_cvm() && d.is_runnable() && d.busy_on.is_none())
        .map(|d| d.id)
        .ok_or(FaultError::Precondition { fault, needs: "an idle runnable CVM" })
}

fn runnable_vm(world: &World, fault: FaultId) -> Result<DomainId, FaultError> {
    world
        .sm()
        .domains()
        .values()
        .find(|d| d.id.is_vm() && d.is_runnable())
        .map(|d| d.id)
        .ok_or(FaultError::Precondition { fault, needs: "a runnable VM" })
}

fn run(world: &mut World, fault: FaultId, action: Action) -> Result<(), FaultError> {
    world.step(&action).map(|_| ()).map_err(|error| FaultError::Step { fault, error })
}

/// Applies `fault` to `world`, driving it until the violation shows.
pub fn seeded_violation(world: &mut World, fault: FaultId) -> Result<(), FaultError> {
    if let Some(m) = fault.mutation() {
        world.sm_mut().set_mutation(m, true);
    }
    adversary(world, None, &format!("fault {fault}"));
    let layout = world.sm().layout().clone();
    match fault {
        FaultId::RaisePrivilege => {
            let h = hv_hart(world, fault)?;
            world.platform_mut().inject(
                Some(h),
                DomainId::HYPERVISOR,
                Some((PrivilegeLevel::Highest, false)),
                EventKind::Adversary { action: "privileged instruction".into() },
            );
        }
        FaultId::ForgedAccess => {
            let h = hv_hart(world, fault)?;
            world.platform_mut().inject(
                Some(h),
                DomainId::HYPERVISOR,
                Some((PrivilegeLevel::Middle, true)),
                EventKind::Read { addr: layout.control.start().add(PAGE_SIZE), len: 8 },
            );
        }
        FaultId::SeedReread => {
            world.platform_mut().inject(None, DomainId::SM, None, EventKind::ReadSeed);
        }
        FaultId::HvHandlerAtHighest => {
            let h = hv_hart(world, fault)?;
            let route = Route { target: PrivilegeLevel::Highest, handler: layout.hv_entry() };
            world.platform_mut().force_route(h, IrqId::EXTERNAL, route);
        }
        FaultId::GrantControlToHv => {
            let mut cfg = world.platform().isolation().clone();
            cfg.grant(DomainId::HYPERVISOR, layout.control);
            world.platform_mut().set_isolation_unchecked(cfg);
        }
        FaultId::DeclassifySm => {
            let mut cfg = world.platform().isolation().clone();
            cfg.confidential.retain(|r| *r != layout.sm_region());
            // Keep the monitor unreachable: only its classification changes.
            cfg.read_only.push(layout.sm_region());
            world.platform_mut().set_isolation_unchecked(cfg);
        }
        FaultId::UnpinIrq => {
            let h = hv_hart(world, fault)?;
            let moved = Route { target: PrivilegeLevel::Highest, handler: layout.sm_code.start().add(0x100) };
            world.platform_mut().force_route(h, IrqId::SM_SOFT, moved);
        }
        FaultId::SeedUnlock => world.platform_mut().force_seed_unlock(),
        FaultId::SkipNode => {
            let h = hv_hart(world, fault)?;
            world.platform_mut().inject(Some(h), DomainId::SM, None, EventKind::Node { node: FsmNode::CExit });
        }
        FaultId::InterruptsInSm => {
            let h = hv_hart(world, fault)?;
            let id = undeclared_call_id(world);
            run(world, fault, Action::SmCall { hart: h, id, args: [0; 3] })?;
        }
        FaultId::RetargetDropped => {
            let (h, _) = cvm_hart(world, fault)?;
            let route = Route { target: PrivilegeLevel::Middle, handler: layout.hv_entry() };
            world.platform_mut().force_route(h, IrqId::TIMER, route);
        }
        FaultId::SkipIrqRestore => {
            let (h, _) = cvm_hart(world, fault)?;
            let id = hypercall_id(world);
            run(world, fault, Action::CvmCall { hart: h, id, args: [0x41, 0, 0] })?;
        }
        FaultId::SaveOutsideControl => {
            world.platform_mut().inject(
                None,
                DomainId::SM,
                None,
                EventKind::TrapEntry {
                    cause: IrqId::SM_CALL,
                    node: FsmNode::NcEnter,
                    interrupted: DomainId::HYPERVISOR,
                    save_addr: layout.shared_window.start(),
                },
            );
        }
        FaultId::SkipMicroarchClear => {
            let (h, _) = cvm_hart(world, fault)?;
            run(world, fault, Action::CvmStore { hart: h, addr: 0, value: VICTIM_SECRET })?;
            let id = hypercall_id(world);
            run(world, fault, Action::CvmCall { hart: h, id, args: [0x41, 0, 0] })?;
        }
        FaultId::LeakRegisters => {
            let (h, _) = cvm_hart(world, fault)?;
            run(world, fault, Action::CvmRegs { hart: h, value: VICTIM_SECRET })?;
            let id = hypercall_id(world);
            run(world, fault, Action::CvmCall { hart: h, id, args: [0x41, 0, 0] })?;
        }
        FaultId::ForgeToken => {
            let base = world.sm().pool().range().start();
            let (platform, sm) = world.split_mut();
            sm.pool_mut().forge_new(platform, base);
        }
        FaultId::AliasToken => {
            if !world.sm_mut().pool_mut().alias_free_token() {
                return Err(FaultError::Precondition { fault, needs: "two free tokens" });
            }
        }
        FaultId::UntrackedPoolAccess => {
            let h = hv_hart(world, fault)?;
            let id = undeclared_call_id(world);
            run(world, fault, Action::SmCall { hart: h, id, args: [0; 3] })?;
        }
        FaultId::DuplicateToken => {
            let h = hv_hart(world, fault)?;
            let vm = runnable_vm(world, fault)?;
            run(world, fault, Action::Promote { hart: h, vm })?;
        }
        FaultId::GrantCvmPageToHv => {
            let cvm = idle_cvm(world, fault)?;
            let page = world
                .sm()
                .domain(cvm)
                .and_then(|d| d.page_table())
                .and_then(|pt| pt.mappings().values().next().map(|t| t.base()))
                .ok_or(FaultError::Precondition { fault, needs: "a CVM with a mapped page" })?;
            let mut cfg = world.platform().isolation().clone();
            cfg.grant(DomainId::HYPERVISOR, AddrRange::page_of(page));
            world.platform_mut().set_isolation_unchecked(cfg);
            let h = hv_hart(world, fault)?;
            run(world, fault, Action::ReadProbe { hart: h, addr: page.as_u64() })?;
        }
        FaultId::InboundWritesAll => {
            let (h, cvm) = cvm_hart(world, fault)?;
            let id = hypercall_id(world);
            run(world, fault, Action::CvmCall { hart: h, id, args: [0x41, 0, 0] })?;
            for r in 1..crate::NUM_GPRS {
                world.platform_mut().set_gpr(h, r, 0x6a7b_0000 + r as u64);
            }
            run(world, fault, Action::Resume { hart: h, cvm, reply: 0x6a7b })?;
        }
        FaultId::SkipZeroize => {
            let (h, cvm) = cvm_hart(world, fault)?;
            run(world, fault, Action::CvmStore { hart: h, addr: 0, value: VICTIM_SECRET })?;
            let id = hypercall_id(world);
            run(world, fault, Action::CvmCall { hart: h, id, args: [0x41, 0, 0] })?;
            run(world, fault, Action::Terminate { hart: h, cvm })?;
        }
        FaultId::UndeclaredTerminatesOthers => {
            let (h, _) = cvm_hart(world, fault)?;
            idle_cvm(world, fault)?;
            let id = undeclared_call_id(world);
            run(world, fault, Action::CvmCall { hart: h, id, args: [0; 3] })?;
        }
        FaultId::TamperMeasurement => {
            let cvm = idle_cvm(world, fault)?;
            world.sm_mut().tamper_measurement(cvm);
            let h = hv_hart(world, fault)?;
            run(world, fault, Action::Attest { hart: h, cvm, nonce: 0xa77e })?;
        }
    }
    Ok(())
}

/// The world every catalog fault starts from: two harts, `cvm0` running on
/// hart 0 with a secret in a private page, `cvm1` idle, `vm2` unpromoted,
/// hart 1 in the hypervisor.
pub fn fault_world() -> World {
    let config = WorldConfig { harts: 2, vms: 3, vm_pages: 1, pool_pages: Some(16), mem_pages: 64, seed: 11 };
    let mut w = World::new(config, &Default::default()).expect("base world boots");
    let steps = [
        Action::Promote { hart: 1, vm: DomainId::vm(0) },
        Action::Promote { hart: 1, vm: DomainId::vm(1) },
        Action::Resume { hart: 0, cvm: DomainId::cvm(0), reply: 0 },
        Action::CvmStore { hart: 0, addr: 8, value: VICTIM_SECRET },
    ];
    for a in steps {
        w.step(&a).expect("base world setup");
    }
    w
}

/// Result of applying one fault in the catalog self-test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultOutcome {
    pub fault: FaultId,
    pub target: &'static str,
    /// Verdicts the oracle flagged.
    pub tripped: Vec<&'static str>,
    pub error: Option<String>,
}

impl FaultOutcome {
    /// The fault tripped its target and nothing else.
    pub fn is_exact(&self) -> bool {
        self.error.is_none() && self.tripped == [self.target]
    }
}

/// Applies every catalog fault to a fresh copy of [`fault_world`].
pub fn self_test() -> Vec<FaultOutcome> {
    let base = fault_world();
    let mut checker = Checker::new(&base);
    checker.observe_all(base.trace());
    checker.check_snapshot(&Snapshot::capture(&base));
    let clean: Vec<&'static str> = checker.failed_ids();
    assert!(clean.is_empty(), "base world violates {clean:?}");
    let start = base.trace().len();

    FaultId::ALL
        .into_iter()
        .map(|fault| {
            let mut w = base.clone();
            let mut c = checker.clone();
            c.set_step(1);
            let error = seeded_violation(&mut w, fault).err().map(|e| e.to_string());
            c.observe_all(&w.trace()[start..]);
            c.check_snapshot(&Snapshot::capture(&w));
            FaultOutcome { fault, target: fault.target(), tripped: c.failed_ids(), error }
        })
        .collect()
}
