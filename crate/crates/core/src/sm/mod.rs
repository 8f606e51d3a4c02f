// SPDX-License-Identifier: Apache-2.0

//! Security monitor: domain table, call dispatch and CVM lifecycle.
//!
//! # Call ABI
//!
//! Untrusted software calls the monitor with an `SM_CALL` trap, the call id
//! in `x17`. Hypervisor calls:
//!
//! | id   | call         | inputs                        | outputs                   |
//! |------|--------------|-------------------------------|---------------------------|
//! | 0x06 | register_vm  | x10 first page, x11 pages     | x10 status, x11 vm id     |
//! | 0x01 | promote      | x10 vm id                     | x10 status, x11 cvm id    |
//! | 0x02 | resume       | x16 cvm id, results of a pending exit | see below         |
//! | 0x03 | terminate    | x10 cvm id                    | x10 status                |
//! | 0x05 | attest       | x10 cvm id, x11/x12 nonce     | x10 status                |
//!
//! CVM calls: `share_page` (x10 guest page, returns x10 status and x11
//! physical address), `attest` (x10/x11 nonce), `terminate` (self), and the
//! hypercalls of the call table, which are routed to the hypervisor.
//!
//! Status is 0 on success and [`SmError::status_code`] otherwise. A
//! successful resume returns to the hypervisor only when the CVM exits: the
//! hypervisor then sees the exit's register view (call arguments and the
//! exit reason in `x5`, zero elsewhere).

pub mod calls;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

pub use calls::{CallEntry, CallKind, CallTable};

use crate::attestation::{measure_pages, AttestationKey, AttestationReport, Digest, Measurement, PublicKey, KEY_LABEL};
use crate::boot::{MemoryLayout, MAX_CVMS};
use crate::fsm::{transform_entry, Direction, DomainContext, ExitRecord, FsmNode, HartFsm, RegisterView};
use crate::hw::{
    AddrRange, DomainId, GuestFault, HwError, IrqId, IsolationConfig, PhysAddr, Platform, PrivilegeLevel, SharedPage,
};
use crate::trace::{EventKind, Outcome};
use crate::tracker::{PageTable, TokenPool, TrackerError};
use crate::{NUM_GPRS, PAGE_SIZE, WORD_BYTES};

use calls::{REG_A0, REG_A1, REG_A2, REG_CALL_ID, REG_TARGET};

/// Deliberate defects for mutation testing. A mutated monitor must be
/// caught by the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mutation {
    /// Deallocation skips zeroing the page.
    SkipZeroizeOnDeallocate,
    /// Promotion also maps a copy of another CVM's token.
    DuplicateToken,
    /// Exits skip the microarchitectural clear.
    SkipMicroarchClear,
    /// Routed exits expose every CVM register.
    LeakRegisterOnRoute,
    /// The monitor re-enables interrupts on entry.
    InterruptsEnabledInSm,
    /// Replies from the hypervisor overwrite every CVM register.
    InboundWritesAll,
    /// An undeclared CVM call terminates some other CVM.
    UndeclaredCallTerminatesOthers,
    /// C to NC transitions leave interrupts routed to the monitor.
    SkipIrqRestore,
    /// Every trap touches the pool without a token.
    UntrackedPoolAccess,
}

impl Mutation {
    pub const ALL: [Mutation; 9] = [
        Self::SkipZeroizeOnDeallocate,
        Self::DuplicateToken,
        Self::SkipMicroarchClear,
        Self::LeakRegisterOnRoute,
        Self::InterruptsEnabledInSm,
        Self::InboundWritesAll,
        Self::UndeclaredCallTerminatesOthers,
        Self::SkipIrqRestore,
        Self::UntrackedPoolAccess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SkipZeroizeOnDeallocate => "skip-zeroize",
            Self::DuplicateToken => "duplicate-token",
            Self::SkipMicroarchClear => "skip-microarch-clear",
            Self::LeakRegisterOnRoute => "leak-registers",
            Self::InterruptsEnabledInSm => "interrupts-in-sm",
            Self::InboundWritesAll => "inbound-writes-all",
            Self::UndeclaredCallTerminatesOthers => "undeclared-terminates-others",
            Self::SkipIrqRestore => "skip-irq-restore",
            Self::UntrackedPoolAccess => "untracked-pool-access",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown mutation `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SmError {
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Tracker(TrackerError),
    #[error("unknown trap cause {0}")]
    UnknownCause(IrqId),
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("domain {0} is not runnable")]
    DomainNotRunnable(DomainId),
    #[error("domain {0} is running on hart {1}")]
    DomainBusy(DomainId, usize),
    #[error("no saved hypervisor state on hart {0}")]
    NoSavedState(usize),
    #[error("exit to {target} not allowed from {node:?}")]
    WrongExitNode { node: Option<FsmNode>, target: DomainId },
    #[error("undeclared call {0:#x}")]
    UndeclaredCall(u64),
    #[error("call must come from the CVM itself")]
    NotFromCvm,
    #[error("call {0:#x} not permitted for {1}")]
    NotPermitted(u64, DomainId),
    #[error("guest page {0} already mapped")]
    AlreadyMapped(u64),
    #[error("out of memory")]
    OutOfMemory,
    #[error("monitor lock held (word {0:#x})")]
    LockContended(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("hart {0} has no pending trap")]
    NoTrap(usize),
}

impl From<TrackerError> for SmError {
    fn from(e: TrackerError) -> Self {
        match e {
            TrackerError::OutOfMemory => SmError::OutOfMemory,
            TrackerError::AlreadyMapped(g) => SmError::AlreadyMapped(g),
            TrackerError::Hw(h) => SmError::Hw(h),
            other => SmError::Tracker(other),
        }
    }
}

impl SmError {
    /// Value returned in `x10` to the caller.
    pub fn status_code(&self) -> u64 {
        match self {
            SmError::Hw(_) => 1,
            SmError::Tracker(_) => 2,
            SmError::UnknownCause(_) => 3,
            SmError::UnknownDomain(_) => 4,
            SmError::DomainNotRunnable(_) => 5,
            SmError::DomainBusy(..) => 6,
            SmError::NoSavedState(_) => 7,
            SmError::WrongExitNode { .. } => 8,
            SmError::UndeclaredCall(_) => 9,
            SmError::NotFromCvm => 10,
            SmError::NotPermitted(..) => 11,
            SmError::AlreadyMapped(_) => 12,
            SmError::OutOfMemory => 13,
            SmError::LockContended(_) => 14,
            SmError::Config(_) => 15,
            SmError::NoTrap(_) => 16,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            SmError::Hw(e) => e.code(),
            SmError::Tracker(_) => "TrackerError",
            SmError::UnknownCause(_) => "UnknownCause",
            SmError::UnknownDomain(_) => "UnknownDomain",
            SmError::DomainNotRunnable(_) => "DomainNotRunnable",
            SmError::DomainBusy(..) => "DomainBusy",
            SmError::NoSavedState(_) => "NoSavedState",
            SmError::WrongExitNode { .. } => "WrongExitNode",
            SmError::UndeclaredCall(_) => "UndeclaredCall",
            SmError::NotFromCvm => "NotFromCvm",
            SmError::NotPermitted(..) => "NotPermitted",
            SmError::AlreadyMapped(_) => "AlreadyMapped",
            SmError::OutOfMemory => "OutOfMemory",
            SmError::LockContended(_) => "LockContended",
            SmError::Config(_) => "ConfigError",
            SmError::NoTrap(_) => "NoTrap",
        }
    }
}

pub const STATUS_OK: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainKind {
    Hypervisor,
    Vm,
    Cvm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lifecycle {
    Created,
    Runnable,
    Terminated,
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lifecycle::Created => "created",
            Lifecycle::Runnable => "runnable",
            Lifecycle::Terminated => "terminated",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SecurityDomain {
    pub id: DomainId,
    pub kind: DomainKind,
    pub lifecycle: Lifecycle,
    page_table: Option<PageTable>,
    pub measurement: Option<Digest>,
    /// Non-confidential pages holding a VM's image.
    pub image: Option<AddrRange>,
    /// Hart the CVM currently runs on.
    pub busy_on: Option<usize>,
    pub(crate) slot: Option<usize>,
    /// Routed exit awaiting the hypervisor's reply.
    pub pending: Option<u64>,
}

impl SecurityDomain {
    pub fn page_table(&self) -> Option<&PageTable> {
        self.page_table.as_ref()
    }

    pub fn is_cvm(&self) -> bool {
        self.kind == DomainKind::Cvm
    }

    pub fn is_runnable(&self) -> bool {
        self.lifecycle == Lifecycle::Runnable
    }

    pub fn ctx_slot(&self) -> Option<usize> {
        self.slot
    }

    /// Physical ranges the CVM may touch while it runs: its private pages
    /// and its shared pages.
    fn grants(&self) -> Vec<AddrRange> {
        let Some(pt) = &self.page_table else { return Vec::new() };
        let mut out: Vec<AddrRange> = pt.mappings().values().map(|t| t.range()).collect();
        out.extend(pt.shared().values().map(|a| AddrRange::page_of(*a)));
        out.sort();
        out.dedup();
        out
    }

    fn fingerprint<H: Hasher>(&self, state: &mut H) {
        self.id.hash(state);
        self.kind.hash(state);
        self.lifecycle.hash(state);
        if let Some(pt) = &self.page_table {
            pt.fingerprint(state);
        }
        self.measurement.hash(state);
        self.image.hash(state);
        self.busy_on.hash(state);
        self.slot.hash(state);
        self.pending.hash(state);
    }
}

const MAX_VM_PAGES: u64 = 64;

#[derive(Clone)]
pub struct SecurityMonitor {
    pub(crate) layout: MemoryLayout,
    pub(crate) calls: Arc<CallTable>,
    pub(crate) pool: TokenPool,
    pub(crate) domains: BTreeMap<DomainId, SecurityDomain>,
    pub(crate) harts: Vec<HartFsm>,
    next_vm: u32,
    next_cvm: u32,
    boot_chain: Vec<Measurement>,
    key_id: String,
    public: PublicKey,
    reports: BTreeMap<DomainId, AttestationReport>,
    mutations: BTreeSet<Mutation>,
    free_shared: Vec<PhysAddr>,
}

impl fmt::Debug for SecurityMonitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecurityMonitor")
            .field("domains", &self.domains.keys().collect::<Vec<_>>())
            .field("free_tokens", &self.pool.free_count())
            .field("key_id", &self.key_id)
            .field("mutations", &self.mutations)
            .finish()
    }
}

fn status_and_value(result: &Result<u64, SmError>) -> (u64, Option<u64>) {
    match result {
        Ok(v) => (STATUS_OK, Some(*v)),
        Err(e) => (e.status_code(), None),
    }
}

impl SecurityMonitor {
    pub(crate) fn new(
        layout: MemoryLayout,
        calls: CallTable,
        pool: TokenPool,
        boot_chain: Vec<Measurement>,
        key: &AttestationKey,
        harts: usize,
    ) -> Self {
        let mut free_shared: Vec<PhysAddr> = layout.shared_window.page_bases().collect();
        free_shared.reverse();
        Self {
            layout,
            calls: Arc::new(calls),
            pool,
            domains: BTreeMap::new(),
            harts: vec![HartFsm::default(); harts],
            next_vm: 0,
            next_cvm: 0,
            boot_chain,
            key_id: key.id(),
            public: key.public(),
            reports: BTreeMap::new(),
            mutations: BTreeSet::new(),
            free_shared,
        }
    }

    // Queries.

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn calls(&self) -> &CallTable {
        &self.calls
    }

    pub fn pool(&self) -> &TokenPool {
        &self.pool
    }

    pub fn domains(&self) -> &BTreeMap<DomainId, SecurityDomain> {
        &self.domains
    }

    pub fn domain(&self, id: DomainId) -> Option<&SecurityDomain> {
        self.domains.get(&id)
    }

    pub fn boot_chain(&self) -> &[Measurement] {
        &self.boot_chain
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    pub fn report(&self, cvm: DomainId) -> Option<&AttestationReport> {
        self.reports.get(&cvm)
    }

    pub fn hart_node(&self, hart: usize) -> Option<FsmNode> {
        self.harts[hart].node
    }

    /// CVM currently entered on `hart`.
    pub fn running_cvm(&self, hart: usize) -> Option<DomainId> {
        self.harts[hart].cvm
    }

    pub fn free_shared_pages(&self) -> &[PhysAddr] {
        &self.free_shared
    }

    pub fn mutations(&self) -> &BTreeSet<Mutation> {
        &self.mutations
    }

    pub fn set_mutation(&mut self, mutation: Mutation, enabled: bool) {
        if enabled {
            self.mutations.insert(mutation);
        } else {
            self.mutations.remove(&mutation);
        }
    }

    pub(crate) fn has(&self, mutation: Mutation) -> bool {
        self.mutations.contains(&mutation)
    }

    pub(crate) fn cvm_slot_addr(&self, cvm: DomainId) -> Result<PhysAddr, SmError> {
        let slot = self.domains.get(&cvm).and_then(|d| d.slot).ok_or(SmError::UnknownDomain(cvm))?;
        Ok(self.layout.cvm_ctx_slot(slot))
    }

    /// Reads a CVM's saved context through the debug port. For oracles.
    pub fn peek_context(&self, platform: &Platform, cvm: DomainId) -> Option<DomainContext> {
        let addr = self.cvm_slot_addr(cvm).ok()?;
        DomainContext::from_bytes(&platform.peek(addr, DomainContext::BYTES)).ok()
    }

    pub fn peek_hv_context(&self, platform: &Platform, hart: usize) -> Option<DomainContext> {
        DomainContext::from_bytes(&platform.peek(self.layout.hv_ctx_slot(hart), DomainContext::BYTES)).ok()
    }

    /// Canonical fingerprint of monitor state.
    pub fn fingerprint<H: Hasher>(&self, state: &mut H) {
        self.pool.fingerprint(state);
        for d in self.domains.values() {
            d.fingerprint(state);
        }
        self.harts.hash(state);
        self.next_vm.hash(state);
        self.next_cvm.hash(state);
        self.reports.keys().collect::<Vec<_>>().hash(state);
        self.mutations.hash(state);
        self.free_shared.hash(state);
    }

    // Fault injection.

    /// Overwrites a CVM's stored measurement. Fault injection only.
    pub fn tamper_measurement(&mut self, cvm: DomainId) -> bool {
        match self.domains.get_mut(&cvm).and_then(|d| d.measurement.as_mut()) {
            Some(m) => {
                m.0[0] ^= 0xff;
                true
            }
            None => false,
        }
    }

    /// Direct access to the token pool. Fault injection only.
    pub fn pool_mut(&mut self) -> &mut TokenPool {
        &mut self.pool
    }

    // Lock.

    /// Acquires the monitor lock for `hart` with a compare-and-swap.
    pub fn try_lock(&self, platform: &mut Platform, hart: usize) -> Result<(), SmError> {
        let prior = platform.atomic_cas(hart, self.layout.lock_addr(), 0, hart as u64 + 1)?;
        if prior == 0 {
            Ok(())
        } else {
            Err(SmError::LockContended(prior))
        }
    }

    pub fn unlock(&self, platform: &mut Platform, hart: usize) -> Result<(), SmError> {
        platform.write_phys(hart, self.layout.lock_addr(), WORD_BYTES, 0)?;
        Ok(())
    }

    // Isolation.

    pub(crate) fn isolation_config(&self) -> IsolationConfig {
        let l = &self.layout;
        let mut cfg = IsolationConfig {
            confidential: vec![l.sm_region(), l.control, l.pool],
            read_only: vec![l.boot],
            ..Default::default()
        };
        for d in self.domains.values().filter(|d| d.is_cvm() && d.is_runnable()) {
            if let Some(pt) = &d.page_table {
                cfg.shared.extend(pt.shared().values().map(|a| SharedPage { range: AddrRange::page_of(*a), cvm: d.id }));
            }
            if d.busy_on.is_some() {
                for r in d.grants() {
                    cfg.grant(d.id, r);
                }
            }
        }
        cfg
    }

    pub(crate) fn apply_isolation(&self, platform: &mut Platform, hart: usize) -> Result<(), SmError> {
        platform.set_isolation(hart, self.isolation_config())?;
        Ok(())
    }

    // Trap handling.

    /// Runs the monitor for the trap just delivered to `hart` and returns to
    /// the chosen domain.
    pub fn handle_trap(&mut self, platform: &mut Platform, hart: usize) -> Result<ExitRecord, SmError> {
        let h = platform.hart(hart);
        if h.privilege != PrivilegeLevel::Highest || h.trap.is_none() {
            return Err(SmError::NoTrap(hart));
        }
        self.try_lock(platform, hart)?;
        let result = self.handle_locked(platform, hart);
        if result.is_err() {
            let _ = self.unlock(platform, hart);
        }
        result
    }

    fn handle_locked(&mut self, platform: &mut Platform, hart: usize) -> Result<ExitRecord, SmError> {
        if self.has(Mutation::InterruptsEnabledInSm) {
            platform.set_interrupts_enabled(hart, true);
        }
        if self.has(Mutation::UntrackedPoolAccess) {
            platform.write_phys(hart, PhysAddr::new(self.layout.pool.end().as_u64() - WORD_BYTES), WORD_BYTES, 0)?;
        }
        match self.trap_entry(platform, hart)? {
            FsmNode::NcEnter => self.nc_route(platform, hart),
            _ => self.c_route(platform, hart),
        }
    }

    fn reject(&self, platform: &mut Platform, hart: usize, caller: DomainId, call_id: u64, e: &SmError) {
        platform.record(Some(hart), EventKind::CallRejected { caller, call_id, reason: e.code().to_string() }, Outcome::Ok);
    }

    /// Writes status and optional value into a saved context slot.
    fn write_status(
        &self,
        platform: &mut Platform,
        hart: usize,
        slot: PhysAddr,
        status: u64,
        value: Option<u64>,
    ) -> Result<(), SmError> {
        platform.write_phys(hart, slot.add(DomainContext::gpr_offset(REG_A0)), WORD_BYTES, status)?;
        if let Some(v) = value {
            platform.write_phys(hart, slot.add(DomainContext::gpr_offset(REG_A1)), WORD_BYTES, v)?;
        }
        Ok(())
    }

    fn nc_route(&mut self, platform: &mut Platform, hart: usize) -> Result<ExitRecord, SmError> {
        self.enter_node(platform, hart, FsmNode::NcRoute);
        let trap = platform.hart(hart).trap.ok_or(SmError::NoTrap(hart))?;
        let caller = trap.from_domain;
        let slot = self.layout.hv_ctx_slot(hart);
        if trap.cause != IrqId::SM_CALL {
            self.enter_node(platform, hart, FsmNode::NcTransform);
            return self.exit_to_domain(platform, hart, caller);
        }
        let gprs = *platform.gprs(hart);
        let id = gprs[REG_CALL_ID];
        let Some(entry) = self.calls.get(id).cloned() else {
            let e = SmError::UndeclaredCall(id);
            self.reject(platform, hart, caller, id, &e);
            self.enter_node(platform, hart, FsmNode::NcTransform);
            self.write_status(platform, hart, slot, e.status_code(), None)?;
            return self.exit_to_domain(platform, hart, caller);
        };
        let hv_only = matches!(
            entry.kind,
            CallKind::Promote | CallKind::Resume | CallKind::Terminate | CallKind::Attest | CallKind::RegisterVm
        );
        let result: Result<u64, SmError> = if entry.kind == CallKind::Share {
            Err(SmError::NotFromCvm)
        } else if !hv_only || caller != DomainId::HYPERVISOR {
            Err(SmError::NotPermitted(id, caller))
        } else {
            let a0 = gprs[REG_A0];
            match entry.kind {
                CallKind::RegisterVm => self.register_vm(platform, hart, a0, gprs[REG_A1]).map(|d| d.raw().into()),
                CallKind::Promote => self.promote(platform, hart, DomainId::from_raw(a0 as u32)).map(|(d, _)| d.raw().into()),
                CallKind::Terminate => self.terminate(platform, hart, DomainId::from_raw(a0 as u32)).map(|_| 0),
                CallKind::Attest => {
                    let nonce = nonce_bytes(&[gprs[REG_A1], gprs[REG_A2]]);
                    self.attest(platform, hart, DomainId::from_raw(a0 as u32), &nonce).map(|_| 0)
                }
                CallKind::Resume => {
                    let target = DomainId::from_raw(gprs[REG_TARGET] as u32);
                    match self.transition_nc_to_c(platform, hart, target) {
                        Ok(_) => return self.enter_cvm(platform, hart, target, &gprs),
                        Err(e) => Err(e),
                    }
                }
                _ => unreachable!("hv_only kinds handled above"),
            }
        };
        if let Err(e) = &result {
            self.reject(platform, hart, caller, id, e);
        }
        let (status, value) = status_and_value(&result);
        self.enter_node(platform, hart, FsmNode::NcTransform);
        let value = value.filter(|_| entry.results.contains(&(REG_A1 as u8)));
        self.write_status(platform, hart, slot, status, value)?;
        self.exit_to_domain(platform, hart, caller)
    }

    /// CTransform after a successful resume: delivers the hypervisor's reply
    /// to a pending routed exit, then enters the CVM.
    fn enter_cvm(
        &mut self,
        platform: &mut Platform,
        hart: usize,
        cvm: DomainId,
        hv_gprs: &[u64; NUM_GPRS],
    ) -> Result<ExitRecord, SmError> {
        let pending = self.domains.get_mut(&cvm).and_then(|d| d.pending.take());
        if let Some(call_id) = pending {
            let entry = self.calls.get(call_id).ok_or(SmError::UndeclaredCall(call_id))?.clone();
            let view = if self.has(Mutation::InboundWritesAll) {
                RegisterView::everything(hv_gprs)
            } else {
                transform_entry(&entry, self.calls.exit_reason_register(), hv_gprs, Direction::NcToC)?
            };
            let slot = self.cvm_slot_addr(cvm)?;
            let written = view.visible_positions().into_iter().filter(|p| *p != 0).collect::<Vec<_>>();
            for p in &written {
                let off = DomainContext::gpr_offset(*p as usize);
                platform.write_phys(hart, slot.add(off), WORD_BYTES, view.words[*p as usize])?;
            }
            platform.record(Some(hart), EventKind::RouteIn { call_id, results: entry.results.clone(), written }, Outcome::Ok);
        }
        self.exit_to_domain(platform, hart, cvm)
    }

    fn c_route(&mut self, platform: &mut Platform, hart: usize) -> Result<ExitRecord, SmError> {
        self.enter_node(platform, hart, FsmNode::CRoute);
        let trap = platform.hart(hart).trap.ok_or(SmError::NoTrap(hart))?;
        let cvm = trap.from_domain;
        let gprs = *platform.gprs(hart);
        match trap.cause {
            IrqId::SM_CALL => {
                let id = gprs[REG_CALL_ID];
                let Some(entry) = self.calls.get(id).cloned() else {
                    let e = SmError::UndeclaredCall(id);
                    if self.has(Mutation::UndeclaredCallTerminatesOthers) {
                        let victim = self
                            .domains
                            .values()
                            .find(|d| d.id != cvm && d.is_cvm() && d.is_runnable() && d.busy_on.is_none())
                            .map(|d| d.id);
                        if let Some(v) = victim {
                            self.terminate(platform, hart, v)?;
                        }
                    }
                    self.reject(platform, hart, cvm, id, &e);
                    return self.c_reply(platform, hart, cvm, Err(e), &[]);
                };
                match entry.kind {
                    CallKind::Share => {
                        let r = self.share(platform, hart, cvm, gprs[REG_A0]).map(|a| a.as_u64());
                        self.c_reply(platform, hart, cvm, r, &entry.results)
                    }
                    CallKind::Attest => {
                        let nonce = nonce_bytes(&[gprs[REG_A0], gprs[REG_A1]]);
                        let r = self.attest(platform, hart, cvm, &nonce).map(|_| 0);
                        self.c_reply(platform, hart, cvm, r, &entry.results)
                    }
                    CallKind::Terminate => self.route_out(platform, hart, cvm, &entry, &gprs, true),
                    CallKind::Hypercall => self.route_out(platform, hart, cvm, &entry, &gprs, false),
                    _ => {
                        let e = SmError::NotPermitted(id, cvm);
                        self.reject(platform, hart, cvm, id, &e);
                        self.c_reply(platform, hart, cvm, Err(e), &[])
                    }
                }
            }
            IrqId::GUEST_PAGE_FAULT => {
                let GuestFault { guest_addr, write, width, value } = trap.fault.ok_or(SmError::UnknownCause(trap.cause))?;
                let kind = if write { CallKind::MmioStore } else { CallKind::MmioLoad };
                let entry = self.calls.synthetic(kind).clone();
                let mut source = gprs;
                source[REG_A0] = guest_addr;
                source[REG_A1] = width;
                source[REG_A2] = value;
                self.route_out(platform, hart, cvm, &entry, &source, false)
            }
            IrqId::TIMER | IrqId::EXTERNAL => {
                let entry = self.calls.synthetic(CallKind::Interrupt).clone();
                let mut source = [0u64; NUM_GPRS];
                source[REG_A0] = u64::from(trap.cause.0);
                self.route_out(platform, hart, cvm, &entry, &source, false)
            }
            IrqId::SM_SOFT => {
                self.enter_node(platform, hart, FsmNode::CTransform);
                self.exit_to_domain(platform, hart, cvm)
            }
            other => Err(SmError::UnknownCause(other)),
        }
    }

    /// CTransform for a call the monitor handled itself.
    fn c_reply(
        &mut self,
        platform: &mut Platform,
        hart: usize,
        cvm: DomainId,
        result: Result<u64, SmError>,
        results: &[u8],
    ) -> Result<ExitRecord, SmError> {
        if let Err(e) = &result {
            if !matches!(e, SmError::UndeclaredCall(_) | SmError::NotPermitted(..)) {
                let id = platform.gprs(hart)[REG_CALL_ID];
                self.reject(platform, hart, cvm, id, e);
            }
        }
        self.enter_node(platform, hart, FsmNode::CTransform);
        let (status, value) = status_and_value(&result);
        let value = value.filter(|_| results.contains(&(REG_A1 as u8)));
        let slot = self.cvm_slot_addr(cvm)?;
        self.write_status(platform, hart, slot, status, value)?;
        self.exit_to_domain(platform, hart, cvm)
    }

    /// Leaves the CVM for the hypervisor, exposing only the call's argument
    /// registers and the exit reason.
    fn route_out(
        &mut self,
        platform: &mut Platform,
        hart: usize,
        cvm: DomainId,
        entry: &CallEntry,
        source: &[u64; NUM_GPRS],
        terminate: bool,
    ) -> Result<ExitRecord, SmError> {
        let view = if self.has(Mutation::LeakRegisterOnRoute) {
            let mut v = RegisterView::everything(source);
            v.words[self.calls.exit_reason_register()] = entry.id;
            v
        } else {
            transform_entry(entry, self.calls.exit_reason_register(), source, Direction::CToNc)?
        };
        self.transition_c_to_nc(platform, hart)?;
        if terminate {
            self.terminate(platform, hart, cvm)?;
        } else if let Some(d) = self.domains.get_mut(&cvm) {
            d.pending = Some(entry.id);
        }
        let words: Vec<u8> = view.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        platform.write_block(hart, self.layout.hv_ctx_slot(hart), &words)?;
        platform.record(
            Some(hart),
            EventKind::RouteOut { call_id: entry.id, whitelist: entry.args.clone(), view: view.words.to_vec() },
            Outcome::Ok,
        );
        self.exit_to_domain(platform, hart, DomainId::HYPERVISOR)
    }

    // Calls.

    fn register_vm(&mut self, platform: &mut Platform, hart: usize, first_page: u64, pages: u64) -> Result<DomainId, SmError> {
        if pages == 0 || pages > MAX_VM_PAGES {
            return Err(SmError::Config(format!("VM of {pages} pages")));
        }
        let range = AddrRange::pages(first_page, pages);
        if !self.layout.vm_area.contains_range(&range) {
            return Err(SmError::Config(format!("VM image {range} outside the VM area")));
        }
        let id = DomainId::vm(self.next_vm);
        self.next_vm += 1;
        self.domains.insert(
            id,
            SecurityDomain {
                id,
                kind: DomainKind::Vm,
                lifecycle: Lifecycle::Runnable,
                page_table: None,
                measurement: None,
                image: Some(range),
                busy_on: None,
                slot: None,
                pending: None,
            },
        );
        platform.record(
            Some(hart),
            EventKind::Lifecycle { domain: id, from: "none".into(), to: Lifecycle::Runnable.to_string() },
            Outcome::Ok,
        );
        Ok(id)
    }

    fn free_slot(&self) -> Option<usize> {
        let used: BTreeSet<usize> =
            self.domains.values().filter(|d| d.lifecycle != Lifecycle::Terminated).filter_map(|d| d.slot).collect();
        (0..MAX_CVMS).find(|s| !used.contains(s))
    }

    fn release_table(&mut self, platform: &mut Platform, hart: usize, mut pt: PageTable) -> Result<(), SmError> {
        let zeroize = !self.has(Mutation::SkipZeroizeOnDeallocate);
        let guest_pages: Vec<u64> = pt.mappings().keys().copied().collect();
        for g in guest_pages {
            let token = pt.unmap_page(g, platform, hart)?;
            self.pool.release(token, platform, hart, zeroize)?;
        }
        let shared: Vec<u64> = pt.shared().keys().copied().collect();
        for g in shared {
            let addr = pt.unmap_shared(g, platform, hart)?;
            self.free_shared.push(addr);
        }
        let (_, root, _) = pt.into_parts();
        self.pool.release(root, platform, hart, zeroize)?;
        Ok(())
    }

    /// Moves a VM into confidential memory as a new CVM.
    pub(crate) fn promote(&mut self, platform: &mut Platform, hart: usize, vm: DomainId) -> Result<(DomainId, Digest), SmError> {
        let image = match self.domains.get(&vm) {
            Some(d) if d.kind == DomainKind::Vm && d.is_runnable() => d.image.expect("VMs carry an image"),
            _ => return Err(SmError::UnknownDomain(vm)),
        };
        let slot = self.free_slot().ok_or(SmError::OutOfMemory)?;
        let mut contents = Vec::with_capacity(image.page_count() as usize);
        for base in image.page_bases() {
            let mut page = vec![0u8; PAGE_SIZE as usize];
            platform.read_block(hart, base, &mut page)?;
            contents.push(page);
        }
        let cvm = DomainId::cvm(self.next_cvm);
        let mut pt = PageTable::new(&mut self.pool, cvm, platform, hart)?;
        for (g, bytes) in contents.iter().enumerate() {
            let token = match self.pool.allocate_zeroed(platform, hart) {
                Ok(t) => t,
                Err(e) => {
                    self.release_table(platform, hart, pt)?;
                    return Err(e.into());
                }
            };
            token.write_bytes(platform, hart, 0, bytes)?;
            if let Err((e, token)) = pt.map_page(g as u64, token, platform, hart) {
                self.pool.deallocate(token, platform, hart)?;
                self.release_table(platform, hart, pt)?;
                return Err(e.into());
            }
        }
        let digest = measure_pages(contents.iter().map(Vec::as_slice));

        if self.has(Mutation::DuplicateToken) {
            let victim = self
                .domains
                .values()
                .filter(|d| d.is_cvm() && d.is_runnable())
                .find_map(|d| d.page_table.as_ref()?.mappings().values().next().map(|t| t.forge()));
            if let Some(copy) = victim {
                pt.insert_unchecked(contents.len() as u64, copy);
            }
        }

        let ctx = DomainContext {
            domain: cvm,
            gprs: [0; NUM_GPRS],
            pc: PhysAddr::new(0),
            interrupts_enabled: true,
            privilege: PrivilegeLevel::Lowest,
            guest_root: Some(pt.root().base()),
        };
        platform.write_block(hart, self.layout.cvm_ctx_slot(slot), &ctx.to_bytes())?;

        self.next_cvm += 1;
        self.domains.insert(
            cvm,
            SecurityDomain {
                id: cvm,
                kind: DomainKind::Cvm,
                lifecycle: Lifecycle::Runnable,
                page_table: Some(pt),
                measurement: Some(digest),
                image: None,
                busy_on: None,
                slot: Some(slot),
                pending: None,
            },
        );
        let v = self.domains.get_mut(&vm).expect("checked above");
        v.lifecycle = Lifecycle::Terminated;
        platform.record(
            Some(hart),
            EventKind::Lifecycle { domain: vm, from: "runnable".into(), to: "terminated".into() },
            Outcome::Ok,
        );
        platform.record(
            Some(hart),
            EventKind::Lifecycle { domain: cvm, from: "created".into(), to: "runnable".into() },
            Outcome::Ok,
        );
        platform.record(Some(hart), EventKind::Promote { vm, cvm, digest: digest.to_hex() }, Outcome::Ok);
        Ok((cvm, digest))
    }

    /// Tears a CVM down and returns every page, zeroed, to the pool.
    /// Terminating a terminated CVM is a no-op.
    pub(crate) fn terminate(&mut self, platform: &mut Platform, hart: usize, cvm: DomainId) -> Result<(), SmError> {
        let d = self.domains.get_mut(&cvm).filter(|d| d.is_cvm()).ok_or(SmError::UnknownDomain(cvm))?;
        if d.lifecycle == Lifecycle::Terminated {
            return Ok(());
        }
        if let Some(h) = d.busy_on {
            return Err(SmError::DomainBusy(cvm, h));
        }
        let pt = d.page_table.take();
        let slot = d.slot;
        d.pending = None;
        d.lifecycle = Lifecycle::Terminated;
        if let Some(pt) = pt {
            self.release_table(platform, hart, pt)?;
        }
        if let Some(s) = slot {
            platform.fill(hart, self.layout.cvm_ctx_slot(s), DomainContext::BYTES, 0)?;
        }
        self.reports.remove(&cvm);
        platform.record(
            Some(hart),
            EventKind::Lifecycle { domain: cvm, from: "runnable".into(), to: "terminated".into() },
            Outcome::Ok,
        );
        self.apply_isolation(platform, hart)
    }

    /// Maps a zeroed non-confidential page at `guest_page` of the calling CVM.
    pub(crate) fn share(
        &mut self,
        platform: &mut Platform,
        hart: usize,
        cvm: DomainId,
        guest_page: u64,
    ) -> Result<PhysAddr, SmError> {
        let d = self.domains.get(&cvm).filter(|d| d.is_cvm()).ok_or(SmError::UnknownDomain(cvm))?;
        let pt = d.page_table.as_ref().ok_or(SmError::DomainNotRunnable(cvm))?;
        if pt.is_mapped(guest_page) {
            return Err(SmError::AlreadyMapped(guest_page));
        }
        let addr = self.free_shared.pop().ok_or(SmError::OutOfMemory)?;
        let mapped = platform.fill(hart, addr, PAGE_SIZE, 0).map_err(SmError::from).and_then(|_| {
            let pt = self.domains.get_mut(&cvm).and_then(|d| d.page_table.as_mut()).expect("checked above");
            pt.map_shared(guest_page, addr, platform, hart).map_err(SmError::from)
        });
        if let Err(e) = mapped {
            self.free_shared.push(addr);
            return Err(e);
        }
        platform.record(Some(hart), EventKind::Share { cvm, guest_page, addr }, Outcome::Ok);
        self.apply_isolation(platform, hart)?;
        Ok(addr)
    }

    /// Signs the CVM's measurement, `nonce` and the boot chain with the key
    /// held in control data.
    pub(crate) fn attest(
        &mut self,
        platform: &mut Platform,
        hart: usize,
        cvm: DomainId,
        nonce: &[u8],
    ) -> Result<AttestationReport, SmError> {
        let measurement = match self.domains.get(&cvm) {
            Some(d) if d.is_cvm() && d.is_runnable() => d.measurement.ok_or(SmError::UnknownDomain(cvm))?,
            _ => return Err(SmError::UnknownDomain(cvm)),
        };
        let mut secret = [0u8; 32];
        platform.read_block(hart, self.layout.key_addr(), &mut secret)?;
        let key = AttestationKey::from_secret(secret, KEY_LABEL);
        let report = key.sign_report(measurement, nonce, &self.boot_chain);
        platform.record(Some(hart), EventKind::AttestIssued { cvm, measurement: measurement.to_hex() }, Outcome::Ok);
        self.reports.insert(cvm, report.clone());
        Ok(report)
    }
}

fn nonce_bytes(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}
