// SPDX-License-Identifier: Apache-2.0

//! Adversarial harness: untrusted software, fault injection and the
//! invariant oracle.
//!
//! A [`World`] is a booted platform plus monitor with a set of VMs already
//! registered by the hypervisor. [`Action`]s play the hypervisor, DMA
//! devices and CVM guests against it. Every action produces trace events
//! that the [`oracle::Checker`] consumes; after every step it also checks a
//! [`snapshot::Snapshot`] of the state.
//!
//! [`run_scenario`] drives a [`Script`]; [`explore::bounded_explore`] walks
//! every interleaving up to a depth.

pub mod explore;
pub mod faults;
pub mod oracle;
pub mod script;
pub mod snapshot;

use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attestation::{measure_pages, Digest};
use crate::boot::{secure_boot, BootError, BootOptions, BootReport};
use crate::fsm::DomainContext;
use crate::hw::{AddrRange, DomainId, HwError, IrqId, IsolationConfig, PhysAddr, Platform, PrivilegeLevel, ReturnTarget};
use crate::sm::calls::{REG_A0, REG_A1, REG_A2, REG_CALL_ID, REG_TARGET};
use crate::sm::{CallKind, CallTable, Mutation, SecurityMonitor, SmError};
use crate::trace::{EventKind, TraceEvent};
use crate::{NUM_GPRS, PAGE_SIZE, WORD_BYTES};

pub use faults::{FaultId, UnknownFault};
pub use oracle::{Checker, VERDICT_IDS};
pub use script::{Action, Script, ScriptError, Step};
pub use snapshot::Snapshot;

/// Outcome of one invariant check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub id: &'static str,
    pub holds: bool,
    pub counterexample: Option<Counterexample>,
}

impl Verdict {
    pub fn pass(id: &'static str) -> Self {
        Self { id, holds: true, counterexample: None }
    }

    pub fn fail(id: &'static str, counterexample: Counterexample) -> Self {
        Self { id, holds: false, counterexample: Some(counterexample) }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.counterexample {
            None => write!(f, "PASS {}", self.id),
            Some(c) => write!(f, "FAIL {} ({c})", self.id),
        }
    }
}

/// Where a check first failed. The offending trace prefix ends at `seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counterexample {
    /// Scenario step during which the violation appeared; 0 is boot and setup.
    pub step: usize,
    /// Sequence number of the offending event, if a trace event triggered it.
    pub seq: Option<u64>,
    pub detail: String,
}

impl Counterexample {
    pub fn trace_prefix<'a>(&self, trace: &'a [TraceEvent]) -> &'a [TraceEvent] {
        match self.seq {
            Some(seq) => {
                let end = trace.iter().position(|e| e.seq > seq).unwrap_or(trace.len());
                &trace[..end]
            }
            None => trace,
        }
    }
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}", self.step)?;
        if let Some(seq) = self.seq {
            write!(f, ", event {seq}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WorldConfig {
    pub harts: usize,
    /// VMs registered after boot; each may later be promoted.
    pub vms: usize,
    pub vm_pages: u64,
    pub pool_pages: Option<u64>,
    pub mem_pages: u64,
    /// Platform RNG and endorsement seed.
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { harts: 2, vms: 2, vm_pages: 2, pool_pages: None, mem_pages: 64, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Config(String),
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Boot(#[from] BootError),
    #[error("setup call failed with status {0}")]
    Setup(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("{action}: {reason}")]
    NotEnabled { action: String, reason: String },
    #[error("monitor failed: {0}")]
    Monitor(#[from] SmError),
    #[error(transparent)]
    Hw(#[from] HwError),
}

/// What the issuing software saw.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Observation {
    /// `x10` and `x11` after a monitor call returned to the caller.
    pub status: Option<u64>,
    pub value: Option<u64>,
    /// Value returned by a load.
    pub loaded: Option<u64>,
    /// Privileged or cross-domain operations attempted and how many the
    /// hardware refused.
    pub attempts: usize,
    pub denied: usize,
}

impl Observation {
    fn tally<T>(&mut self, result: Result<T, HwError>) -> Option<T> {
        self.attempts += 1;
        match result {
            Ok(v) => Some(v),
            Err(_) => {
                self.denied += 1;
                None
            }
        }
    }
}

/// Deterministic monitor image used by every world.
pub fn sm_image() -> Vec<u8> {
    (0..6000u32).map(|i| (i.wrapping_mul(31) ^ 0x5a) as u8).collect()
}

pub fn hv_image() -> Vec<u8> {
    (0..5000u32).map(|i| (i.wrapping_mul(17) ^ 0xa5) as u8).collect()
}

/// Page `page` of VM `vm`'s image.
pub fn vm_page(vm: usize, page: u64) -> Vec<u8> {
    let mut out = vec![0u8; PAGE_SIZE as usize];
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        let word = ((vm as u64 + 1) << 48) | (page << 32) | i as u64;
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    out
}

pub fn vm_digest(vm: usize, pages: u64) -> Digest {
    let pages: Vec<Vec<u8>> = (0..pages).map(|p| vm_page(vm, p)).collect();
    measure_pages(pages.iter().map(Vec::as_slice))
}

/// Secret-looking register contents derived from `value`; never zero.
pub fn secret_word(value: u64, reg: usize) -> u64 {
    (value ^ ((reg as u64) << 56)).rotate_left(reg as u32) | 1
}

/// Software role a hart currently plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Hypervisor,
    Cvm(DomainId),
    /// Inside the monitor or in any other state no untrusted software drives.
    Stuck,
}

/// Booted platform and monitor with the hypervisor's VMs registered.
#[derive(Clone, Debug)]
pub struct World {
    platform: Platform,
    sm: SecurityMonitor,
    boot: Arc<BootReport>,
    config: WorldConfig,
}

impl World {
    pub fn new(config: WorldConfig, mutations: &BTreeSet<Mutation>) -> Result<Self, WorldError> {
        Self::with_calls(config, mutations, None)
    }

    pub fn with_calls(config: WorldConfig, mutations: &BTreeSet<Mutation>, calls: Option<CallTable>) -> Result<Self, WorldError> {
        let mut platform = Platform::new(config.mem_pages * PAGE_SIZE, config.harts, config.seed)?;
        let options = BootOptions { pool_pages: config.pool_pages, call_table: calls };
        let (mut sm, boot) = secure_boot(&mut platform, &sm_image(), &hv_image(), options)?;
        for m in mutations {
            sm.set_mutation(*m, true);
        }
        let mut world = Self { platform, sm, boot: Arc::new(boot), config };
        world.register_vms()?;
        Ok(world)
    }

    fn register_vms(&mut self) -> Result<(), WorldError> {
        let c = self.config.clone();
        let first = self.sm.layout().vm_area.start().as_u64() / PAGE_SIZE;
        let available = self.sm.layout().vm_area.page_count();
        if c.vms as u64 * c.vm_pages > available {
            return Err(WorldError::Config(format!("{} VMs of {} pages exceed the {available}-page VM area", c.vms, c.vm_pages)));
        }
        for vm in 0..c.vms {
            let start = first + vm as u64 * c.vm_pages;
            for p in 0..c.vm_pages {
                self.platform.write_block(0, PhysAddr::new((start + p) * PAGE_SIZE), &vm_page(vm, p))?;
            }
            let obs = self
                .step(&Action::RegisterVm { hart: 0, first_page: start, pages: c.vm_pages })
                .map_err(|e| WorldError::Config(e.to_string()))?;
            match obs.status {
                Some(0) => {}
                other => return Err(WorldError::Setup(other.unwrap_or(u64::MAX))),
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    /// Raw platform access. Fault injection and tests only.
    pub fn platform_mut(&mut self) -> &mut Platform {
        &mut self.platform
    }

    pub fn sm(&self) -> &SecurityMonitor {
        &self.sm
    }

    /// Raw monitor access. Fault injection and tests only.
    pub fn sm_mut(&mut self) -> &mut SecurityMonitor {
        &mut self.sm
    }

    pub fn split_mut(&mut self) -> (&mut Platform, &mut SecurityMonitor) {
        (&mut self.platform, &mut self.sm)
    }

    pub fn boot(&self) -> &BootReport {
        &self.boot
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.platform.trace().events()
    }

    pub fn drain_trace(&mut self) -> Vec<TraceEvent> {
        self.platform.drain_trace()
    }

    /// Expected measurement of each registered VM's image.
    pub fn vm_digests(&self) -> Vec<(DomainId, Digest)> {
        (0..self.config.vms).map(|v| (DomainId::vm(v as u32), vm_digest(v, self.config.vm_pages))).collect()
    }

    /// Fingerprint of the whole model state; equal states hash equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.platform.fingerprint(&mut h);
        self.sm.fingerprint(&mut h);
        h.finish()
    }

    /// Fingerprint with general-purpose register contents left out, live or
    /// saved by the monitor. Harness actions write every register they pass
    /// to the monitor and the oracle judges register traffic by which
    /// registers move, not by their values, so two states that differ only in
    /// register contents have the same futures. The explorer deduplicates on
    /// this.
    pub fn abstract_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let harts: Vec<usize> = (0..self.platform.hart_count()).collect();
        let layout = self.sm.layout();
        let gprs = |slot: PhysAddr| AddrRange::new(slot.add(DomainContext::gpr_offset(0)), NUM_GPRS as u64 * WORD_BYTES);
        let mut saved: Vec<AddrRange> = harts.iter().map(|&i| gprs(layout.hv_ctx_slot(i))).collect();
        saved.extend(self.sm.domains().keys().filter_map(|&d| self.sm.cvm_slot_addr(d).ok()).map(gprs));
        self.platform.fingerprint_masked(&mut h, &harts, &saved);
        self.sm.fingerprint(&mut h);
        h.finish()
    }

    pub fn role(&self, hart: usize) -> Role {
        if hart >= self.platform.hart_count() {
            return Role::Stuck;
        }
        let h = self.platform.hart(hart);
        match (h.privilege, h.domain) {
            (PrivilegeLevel::Middle, DomainId::HYPERVISOR) => Role::Hypervisor,
            (PrivilegeLevel::Lowest, d) if d.is_confidential() => Role::Cvm(d),
            _ => Role::Stuck,
        }
    }

    fn call_id(&self, kind: CallKind) -> u64 {
        self.sm.calls().entries().find(|e| e.kind == kind).map_or(u64::MAX, |e| e.id)
    }

    fn require_hv(&self, action: &Action, hart: usize) -> Result<(), StepError> {
        match self.role(hart) {
            Role::Hypervisor => Ok(()),
            other => Err(StepError::NotEnabled {
                action: action.to_string(),
                reason: format!("hart {hart} is not running the hypervisor ({other:?})"),
            }),
        }
    }

    fn require_cvm(&self, action: &Action, hart: usize) -> Result<DomainId, StepError> {
        match self.role(hart) {
            Role::Cvm(d) => Ok(d),
            other => Err(StepError::NotEnabled {
                action: action.to_string(),
                reason: format!("hart {hart} is not running a CVM ({other:?})"),
            }),
        }
    }

    /// Issues a monitor call from whatever software runs on `hart`.
    fn monitor_call(&mut self, hart: usize, id: u64, regs: &[(usize, u64)]) -> Result<Observation, StepError> {
        let caller = self.platform.hart(hart).domain;
        for (r, v) in regs {
            self.platform.set_gpr(hart, *r, *v);
        }
        self.platform.set_gpr(hart, REG_CALL_ID, id);
        self.platform.deliver_interrupt(hart, IrqId::SM_CALL)?;
        self.sm.handle_trap(&mut self.platform, hart)?;
        let mut obs = Observation::default();
        if self.platform.hart(hart).domain == caller {
            let g = self.platform.gprs(hart);
            obs.status = Some(g[REG_A0]);
            obs.value = Some(g[REG_A1]);
        }
        Ok(obs)
    }

    /// A trap the guest took: the monitor handles it if routed there.
    fn take_trap(&mut self, hart: usize, to: PrivilegeLevel) -> Result<(), StepError> {
        match to {
            PrivilegeLevel::Highest => {
                self.sm.handle_trap(&mut self.platform, hart)?;
            }
            // The hypervisor's handler services it and re-enables interrupts.
            _ => self.platform.set_interrupts_enabled(hart, true),
        }
        Ok(())
    }

    fn guest_access(&mut self, hart: usize, addr: u64, store: Option<u64>) -> Result<Observation, StepError> {
        let mut obs = Observation::default();
        let result = match store {
            Some(v) => self.platform.guest_write(hart, addr, WORD_BYTES, v).map(|_| None),
            None => self.platform.guest_read(hart, addr, WORD_BYTES).map(Some),
        };
        match result {
            Ok(v) => obs.loaded = v,
            Err(HwError::GuestPageFault(fault)) => {
                let rec = self.platform.deliver_guest_fault(hart, fault)?;
                self.take_trap(hart, rec.to)?;
            }
            Err(_) => {
                obs.attempts = 1;
                obs.denied = 1;
            }
        }
        Ok(obs)
    }

    pub fn step(&mut self, action: &Action) -> Result<Observation, StepError> {
        match *action {
            Action::RegisterVm { hart, first_page, pages } => {
                self.require_hv(action, hart)?;
                let id = self.call_id(CallKind::RegisterVm);
                self.monitor_call(hart, id, &[(REG_A0, first_page), (REG_A1, pages)])
            }
            Action::Promote { hart, vm } => {
                self.require_hv(action, hart)?;
                let id = self.call_id(CallKind::Promote);
                self.monitor_call(hart, id, &[(REG_A0, vm.raw().into())])
            }
            Action::Resume { hart, cvm, reply } => {
                self.require_hv(action, hart)?;
                let id = self.call_id(CallKind::Resume);
                self.monitor_call(hart, id, &[(REG_TARGET, cvm.raw().into()), (REG_A0, reply), (REG_A1, reply)])
            }
            Action::Terminate { hart, cvm } => {
                self.require_hv(action, hart)?;
                let id = self.call_id(CallKind::Terminate);
                self.monitor_call(hart, id, &[(REG_A0, cvm.raw().into())])
            }
            Action::Attest { hart, cvm, nonce } => {
                self.require_hv(action, hart)?;
                let id = self.call_id(CallKind::Attest);
                self.monitor_call(hart, id, &[(REG_A0, cvm.raw().into()), (REG_A1, nonce), (REG_A2, 0)])
            }
            Action::SmCall { hart, id, args } => {
                self.require_hv(action, hart)?;
                self.monitor_call(hart, id, &[(REG_A0, args[0]), (REG_A1, args[1]), (REG_A2, args[2])])
            }
            Action::ReadProbe { hart, addr } => {
                self.require_hv(action, hart)?;
                let mut obs = Observation::default();
                obs.loaded = obs.tally(self.platform.read_phys(hart, PhysAddr::new(addr), WORD_BYTES));
                Ok(obs)
            }
            Action::WriteProbe { hart, addr, value } => {
                self.require_hv(action, hart)?;
                let mut obs = Observation::default();
                obs.tally(self.platform.write_phys(hart, PhysAddr::new(addr), WORD_BYTES, value));
                Ok(obs)
            }
            Action::DmaProbe { addr, write } => {
                let mut obs = Observation::default();
                let addr = PhysAddr::new(addr);
                if write {
                    obs.tally(self.platform.dma_write(addr, WORD_BYTES, 0xd3a));
                } else {
                    obs.loaded = obs.tally(self.platform.dma_read(addr, WORD_BYTES));
                }
                Ok(obs)
            }
            Action::ProbeAll { hart } => {
                self.require_hv(action, hart)?;
                let mut obs = Observation::default();
                let pages: Vec<PhysAddr> = self.sm.layout().confidential().page_bases().collect();
                for p in pages {
                    obs.tally(self.platform.read_phys(hart, p, WORD_BYTES));
                    obs.tally(self.platform.write_phys(hart, p, WORD_BYTES, 0xbad));
                    obs.tally(self.platform.dma_read(p, WORD_BYTES));
                    obs.tally(self.platform.dma_write(p, WORD_BYTES, 0xbad));
                }
                Ok(obs)
            }
            Action::SharedInput { hart, value } => {
                self.require_hv(action, hart)?;
                let mut obs = Observation::default();
                let pages: Vec<PhysAddr> = self.sm.layout().shared_window.page_bases().collect();
                for p in pages {
                    obs.tally(self.platform.write_phys(hart, p, WORD_BYTES, value));
                }
                Ok(obs)
            }
            Action::Impersonate { hart } => {
                self.require_hv(action, hart)?;
                let mut obs = Observation::default();
                let layout = self.sm.layout().clone();
                obs.tally(self.platform.set_isolation(hart, IsolationConfig::default()));
                obs.tally(self.platform.configure_interrupt(hart, IrqId::SM_CALL, PrivilegeLevel::Middle, layout.hv_entry()));
                obs.tally(self.platform.configure_interrupt(hart, IrqId::TIMER, PrivilegeLevel::Highest, layout.hv_entry()));
                obs.tally(self.platform.read_seed(hart));
                obs.tally(self.platform.return_from_trap(
                    hart,
                    ReturnTarget {
                        privilege: PrivilegeLevel::Lowest,
                        domain: DomainId::cvm(0),
                        pc: PhysAddr::new(0),
                        enable_interrupts: true,
                        guest_root: None,
                    },
                ));
                obs.tally(self.platform.enter_guest(hart, DomainId::cvm(0), PhysAddr::new(0)));
                // Back to the hypervisor if the guest entry was wrongly allowed.
                if self.platform.hart(hart).privilege != PrivilegeLevel::Middle {
                    return Ok(obs);
                }
                let id = self.call_id(CallKind::Share);
                let share = self.monitor_call(hart, id, &[(REG_A0, 8)])?;
                obs.attempts += 1;
                if share.status != Some(0) {
                    obs.denied += 1;
                }
                Ok(obs)
            }
            Action::Interrupt { hart, irq } => {
                if !matches!(self.role(hart), Role::Hypervisor | Role::Cvm(_)) {
                    return Err(StepError::NotEnabled {
                        action: action.to_string(),
                        reason: format!("hart {hart} runs no untrusted software"),
                    });
                }
                let mut obs = Observation::default();
                if let Some(rec) = obs.tally(self.platform.deliver_interrupt(hart, irq)) {
                    self.take_trap(hart, rec.to)?;
                }
                Ok(obs)
            }
            Action::CvmRegs { hart, value } => {
                self.require_cvm(action, hart)?;
                for r in 1..NUM_GPRS {
                    self.platform.set_gpr(hart, r, secret_word(value, r));
                }
                Ok(Observation::default())
            }
            Action::CvmStore { hart, addr, value } => {
                self.require_cvm(action, hart)?;
                self.guest_access(hart, addr, Some(value))
            }
            Action::CvmLoad { hart, addr } => {
                self.require_cvm(action, hart)?;
                self.guest_access(hart, addr, None)
            }
            Action::CvmCall { hart, id, args } => {
                self.require_cvm(action, hart)?;
                self.monitor_call(hart, id, &[(REG_A0, args[0]), (REG_A1, args[1]), (REG_A2, args[2])])
            }
        }
    }

    /// Background activity of whichever CVM runs: fresh secrets in its
    /// registers or a store to one of its private pages.
    pub fn victim_step(&mut self, rng: &mut ChaCha8Rng) -> Option<Action> {
        let running: Vec<(usize, DomainId)> = (0..self.platform.hart_count())
            .filter_map(|h| match self.role(h) {
                Role::Cvm(d) => Some((h, d)),
                _ => None,
            })
            .collect();
        if running.is_empty() {
            return None;
        }
        let (hart, cvm) = running[rng.gen_range(0..running.len())];
        let value: u64 = rng.gen::<u64>() | 1;
        let pages: Vec<u64> = self
            .sm
            .domain(cvm)
            .and_then(|d| d.page_table())
            .map(|pt| pt.mappings().keys().copied().collect())
            .unwrap_or_default();
        let action = if pages.is_empty() || rng.gen_bool(0.5) {
            Action::CvmRegs { hart, value }
        } else {
            let page = pages[rng.gen_range(0..pages.len())];
            let word = rng.gen_range(0..PAGE_SIZE / WORD_BYTES);
            Action::CvmStore { hart, addr: page * PAGE_SIZE + word * WORD_BYTES, value }
        };
        self.step(&action).ok()?;
        Some(action)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("step {index} ({step}): {error}")]
    Step { index: usize, step: String, error: StepError },
    #[error(transparent)]
    Fault(#[from] faults::FaultError),
}

#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub trace: Vec<TraceEvent>,
    pub verdicts: Vec<Verdict>,
    pub boot: BootReport,
    /// Victim steps the scheduler inserted, with the index of the scripted
    /// step they preceded.
    pub victim_steps: Vec<(usize, Action)>,
}

impl ScenarioResult {
    pub fn violations(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.holds)
    }

    pub fn all_hold(&self) -> bool {
        self.verdicts.iter().all(|v| v.holds)
    }

    /// `script` with the inserted victim steps written out, victims off and
    /// the violated verdicts as expectations. Replays without the seed.
    pub fn materialize(&self, script: &Script) -> Script {
        let mut steps = Vec::with_capacity(script.steps.len() + self.victim_steps.len());
        let mut victims = self.victim_steps.iter().peekable();
        for (i, step) in script.steps.iter().enumerate() {
            while let Some((_, a)) = victims.next_if(|(at, _)| *at == i) {
                steps.push(Step::Action(a.clone()));
            }
            steps.push(step.clone());
        }
        Script {
            config: script.config.clone(),
            victims: false,
            steps,
            mutations: script.mutations.clone(),
            expect: self.violations().map(|v| v.id.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub mutations: BTreeSet<Mutation>,
    pub calls: Option<CallTable>,
}

/// Runs `script` against a fresh world and checks every invariant after
/// every step. `seed` drives the victim scheduler. The script's mutations
/// are enabled along with those in `options`.
///
/// A monitor failure ends the run; the oracle reports it as a path
/// violation. Actions that are not enabled (e.g. a CVM step on a hart
/// running the hypervisor) are script errors.
pub fn run_scenario(script: &Script, seed: u64, options: &RunOptions) -> Result<ScenarioResult, ScenarioError> {
    let mutations: BTreeSet<Mutation> = options.mutations.union(&script.mutations).copied().collect();
    let mut world = World::with_calls(script.config.clone(), &mutations, options.calls.clone())?;
    let mut checker = Checker::new(&world);
    let mut cursor = 0;
    let observe = |world: &World, checker: &mut Checker, cursor: &mut usize| {
        let events = world.trace();
        checker.observe_all(&events[*cursor..]);
        *cursor = events.len();
        checker.check_snapshot(&Snapshot::capture(world));
    };
    observe(&world, &mut checker, &mut cursor);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut victim_steps = Vec::new();
    for (i, step) in script.steps.iter().enumerate() {
        checker.set_step(i + 1);
        if script.victims && rng.gen_bool(0.5) {
            if let Some(a) = world.victim_step(&mut rng) {
                victim_steps.push((i, a));
            }
        }
        let result = match step {
            Step::Action(a) => world.step(a).map(|_| ()),
            Step::Fault(f) => {
                faults::seeded_violation(&mut world, *f)?;
                Ok(())
            }
        };
        match result {
            Ok(()) => observe(&world, &mut checker, &mut cursor),
            Err(StepError::Monitor(e)) => {
                observe(&world, &mut checker, &mut cursor);
                checker.monitor_failed(&format!("{step}: {e}"));
                break;
            }
            Err(error) => return Err(ScenarioError::Step { index: i + 1, step: step.to_string(), error }),
        }
    }
    Ok(ScenarioResult { trace: world.trace().to_vec(), verdicts: checker.verdicts(), boot: world.boot().clone(), victim_steps })
}

impl Role {
    pub fn is_cvm(self) -> bool {
        matches!(self, Role::Cvm(_))
    }
}

pub(crate) fn adversary(world: &mut World, hart: Option<usize>, action: &str) {
    world.platform.annotate(hart, EventKind::Adversary { action: action.to_string() });
}
