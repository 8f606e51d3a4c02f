// SPDX-License-Identifier: Apache-2.0

//! Simulated hardware platform.
//!
//! The platform's behavior is the hardware contract the security monitor
//! relies on: three privilege levels where only the highest may reconfigure
//! security-critical state, an immutable boot page, an isolation component
//! denying processor and device accesses to confidential memory, a way to
//! clear microarchitectural state, interrupts delivered with interrupts
//! disabled and retargetable to the highest level only from that level, a
//! lockable endorsement seed, an atomic compare-and-swap and a random number
//! generator.
//!
//! Each public operation is one indivisible step and appends exactly one
//! event to the trace, whether it succeeds or fails.

mod addr;
mod domain;
mod hart;
mod irq;
mod isolation;
mod memory;

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use addr::{AddrRange, PhysAddr};
pub use domain::{DomainId, PrivilegeLevel};
pub use hart::{GuestFault, HartContext, MicroArchState, TrapInfo};
pub use irq::{InterruptController, IrqId, Route};
pub use isolation::{IsolationConfig, SharedPage};
pub use memory::PhysMemory;

pub(crate) use isolation::covered_by;

use crate::trace::{EventKind, Outcome, Trace};
use crate::{NUM_GPRS, PAGE_SIZE, SEED_LEN, WORD_BYTES};

/// Entries in a guest translation root page.
pub const GUEST_TABLE_ENTRIES: u64 = PAGE_SIZE / WORD_BYTES;
/// Valid bit of a guest translation entry.
pub const GUEST_ENTRY_VALID: u64 = 1;
/// Marks a guest entry that maps a shared non-confidential page.
pub const GUEST_ENTRY_SHARED: u64 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum HwError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("access to {addr} denied for {domain}")]
    AccessDenied { addr: PhysAddr, domain: DomainId },
    #[error("range {addr}+{len} beyond physical memory")]
    OutOfRange { addr: PhysAddr, len: u64 },
    #[error("operation requires the highest privilege")]
    PrivilegeViolation,
    #[error("interrupt {0} is pinned to the highest privilege")]
    PinnedInterrupt(IrqId),
    #[error("interrupt {0} has no route")]
    UnroutedInterrupt(IrqId),
    #[error("interrupt {0} is masked")]
    InterruptMasked(IrqId),
    #[error("endorsement seed is locked")]
    SeedLocked,
    #[error("misaligned access at {0}")]
    Misaligned(PhysAddr),
    #[error("no hart {0}")]
    InvalidHart(usize),
    #[error("unsupported access width {0}")]
    InvalidWidth(u64),
    #[error("guest page fault at {:#x}", .0.guest_addr)]
    GuestPageFault(GuestFault),
}

impl HwError {
    pub fn code(&self) -> &'static str {
        match self {
            HwError::Config(_) => "ConfigError",
            HwError::AccessDenied { .. } => "AccessDenied",
            HwError::OutOfRange { .. } => "OutOfRange",
            HwError::PrivilegeViolation => "PrivilegeViolation",
            HwError::PinnedInterrupt(_) => "PinnedInterrupt",
            HwError::UnroutedInterrupt(_) => "UnroutedInterrupt",
            HwError::InterruptMasked(_) => "InterruptMasked",
            HwError::SeedLocked => "SeedLocked",
            HwError::Misaligned(_) => "Misaligned",
            HwError::InvalidHart(_) => "InvalidHart",
            HwError::InvalidWidth(_) => "InvalidWidth",
            HwError::GuestPageFault(_) => "GuestPageFault",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EndorsementDevice {
    seed: [u8; SEED_LEN],
    locked: bool,
}

impl EndorsementDevice {
    pub fn is_locked(&self) -> bool {
        self.locked
    }
}

/// Result of presenting an interrupt to a hart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub hart: usize,
    pub irq: IrqId,
    pub from: PrivilegeLevel,
    pub to: PrivilegeLevel,
    pub handler: PhysAddr,
}

/// State installed on a hart when the monitor leaves the highest privilege.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReturnTarget {
    pub privilege: PrivilegeLevel,
    pub domain: DomainId,
    pub pc: PhysAddr,
    pub enable_interrupts: bool,
    pub guest_root: Option<PhysAddr>,
}

#[derive(Clone, Debug)]
pub struct Platform {
    memory: PhysMemory,
    harts: Vec<HartContext>,
    isolation: Arc<IsolationConfig>,
    isolation_version: u64,
    irqc: InterruptController,
    endorsement: EndorsementDevice,
    rng_seed: u64,
    rng: ChaCha8Rng,
    trace: Trace,
}

/// Address of the immutable boot code; also the reset vector.
pub const BOOT_VECTOR: PhysAddr = PhysAddr::new(0);

const ENDORSEMENT_STREAM: u64 = 0x656e_646f_7273_6564;

/// Builds a platform fresh out of reset.
pub fn create_platform(mem_size: u64, hart_count: usize, rng_seed: u64) -> Result<Platform, HwError> {
    Platform::new(mem_size, hart_count, rng_seed)
}

impl Platform {
    pub fn new(mem_size: u64, hart_count: usize, rng_seed: u64) -> Result<Self, HwError> {
        if mem_size == 0 || mem_size % PAGE_SIZE != 0 {
            return Err(HwError::Config(format!("memory size {mem_size} is not a positive multiple of the page size")));
        }
        if hart_count == 0 {
            return Err(HwError::Config("at least one hart required".into()));
        }
        let pages = mem_size / PAGE_SIZE;
        let mut seed = [0u8; SEED_LEN];
        ChaCha8Rng::seed_from_u64(rng_seed ^ ENDORSEMENT_STREAM).fill_bytes(&mut seed);
        let isolation = IsolationConfig { read_only: vec![AddrRange::pages(0, 1)], ..Default::default() };
        let mut platform = Self {
            memory: PhysMemory::new(pages as usize),
            harts: (0..hart_count).map(|h| HartContext::reset(h, BOOT_VECTOR)).collect(),
            isolation: Arc::new(isolation),
            isolation_version: 0,
            irqc: InterruptController::new(hart_count, BOOT_VECTOR),
            endorsement: EndorsementDevice { seed, locked: false },
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            trace: Trace::default(),
        };
        platform.trace.push(None, DomainId::SM, None, EventKind::Reset { harts: hart_count, mem_pages: pages }, Outcome::Ok);
        Ok(platform)
    }

    // Observation.

    pub fn mem_size(&self) -> u64 {
        self.memory.size()
    }

    pub fn page_count(&self) -> u64 {
        self.memory.page_count() as u64
    }

    pub fn hart_count(&self) -> usize {
        self.harts.len()
    }

    pub fn hart(&self, hart: usize) -> &HartContext {
        &self.harts[hart]
    }

    pub fn harts(&self) -> &[HartContext] {
        &self.harts
    }

    pub fn isolation(&self) -> &IsolationConfig {
        &self.isolation
    }

    pub fn isolation_version(&self) -> u64 {
        self.isolation_version
    }

    pub fn irqc(&self) -> &InterruptController {
        &self.irqc
    }

    pub fn endorsement(&self) -> &EndorsementDevice {
        &self.endorsement
    }

    pub fn seed_locked(&self) -> bool {
        self.endorsement.locked
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn drain_trace(&mut self) -> Vec<crate::trace::TraceEvent> {
        self.trace.drain()
    }

    /// Debug-port read of physical memory. Not an architectural access: no
    /// isolation check, no trace event, no taint. For oracles and tests.
    pub fn peek(&self, addr: PhysAddr, len: u64) -> Vec<u8> {
        let mut buf = vec![0u8; len as usize];
        self.memory.read(addr.as_u64(), &mut buf);
        buf
    }

    pub fn page_is_zero(&self, page_base: PhysAddr) -> bool {
        self.memory.page_is_zero(page_base.page_number() as usize)
    }

    /// Canonical fingerprint of architectural and memory state. The trace and
    /// its sequence counter are excluded.
    pub fn fingerprint<H: Hasher>(&self, state: &mut H) {
        self.memory.fingerprint(state);
        self.harts.hash(state);
        self.isolation.hash(state);
        self.irqc.hash(state);
        self.endorsement.locked.hash(state);
        self.rng_seed.hash(state);
        self.rng.get_word_pos().hash(state);
    }

    /// As [`Self::fingerprint`], ignoring the general-purpose registers of
    /// `masked_harts` and the contents of `masked` ranges.
    pub fn fingerprint_masked<H: Hasher>(&self, state: &mut H, masked_harts: &[usize], masked: &[AddrRange]) {
        let ranges: Vec<_> = masked.iter().map(|r| (r.start().as_u64(), r.end().as_u64())).collect();
        self.memory.fingerprint_masked(state, &ranges);
        for h in &self.harts {
            if masked_harts.contains(&h.hart_id) {
                HartContext { gprs: [0; NUM_GPRS], ..h.clone() }.hash(state);
            } else {
                h.hash(state);
            }
        }
        self.isolation.hash(state);
        self.irqc.hash(state);
        self.endorsement.locked.hash(state);
        self.rng_seed.hash(state);
        self.rng.get_word_pos().hash(state);
    }

    // Tracing helpers.

    fn mode(&self, hart: usize) -> Option<(PrivilegeLevel, bool)> {
        let h = &self.harts[hart];
        Some((h.privilege, h.interrupts_enabled))
    }

    /// Appends an event attributed to `hart`'s current domain and mode.
    pub(crate) fn record(&mut self, hart: Option<usize>, kind: EventKind, outcome: Outcome) {
        let (domain, mode) = match hart {
            Some(h) => (self.harts[h].domain, self.mode(h)),
            None => (DomainId::SM, None),
        };
        self.trace.push(hart, domain, mode, kind, outcome);
    }

    /// Appends a harness-level event (adversary actions) to the trace.
    pub fn annotate(&mut self, hart: Option<usize>, kind: EventKind) {
        self.record(hart, kind, Outcome::Ok);
    }

    /// Appends an arbitrary event. Fault injection of forged hardware
    /// behavior for oracle self-tests.
    pub(crate) fn inject(
        &mut self,
        hart: Option<usize>,
        domain: DomainId,
        mode: Option<(PrivilegeLevel, bool)>,
        kind: EventKind,
    ) {
        self.trace.push(hart, domain, mode, kind, Outcome::Ok);
    }

    fn record_result<T>(&mut self, hart: Option<usize>, kind: EventKind, result: &Result<T, HwError>) {
        let outcome = match result {
            Ok(_) => Outcome::Ok,
            Err(e) => Outcome::Err(e.code().to_string()),
        };
        self.record(hart, kind, outcome);
    }

    fn record_dma(&mut self, kind: EventKind, result: &Result<(), HwError>) {
        let outcome = match result {
            Ok(_) => Outcome::Ok,
            Err(e) => Outcome::Err(e.code().to_string()),
        };
        self.trace.push(None, DomainId::DMA, None, kind, outcome);
    }

    fn check_hart(&self, hart: usize) -> Result<(), HwError> {
        if hart < self.harts.len() {
            Ok(())
        } else {
            Err(HwError::InvalidHart(hart))
        }
    }

    // Memory.

    fn check_range(&self, addr: PhysAddr, len: u64) -> Result<AddrRange, HwError> {
        match addr.checked_add(len) {
            Some(end) if end.as_u64() <= self.memory.size() => Ok(AddrRange::new(addr, len)),
            _ => Err(HwError::OutOfRange { addr, len }),
        }
    }

    /// Isolation decision for an access by `hart` (or by DMA when `None`).
    fn check_access(&self, hart: Option<usize>, addr: PhysAddr, len: u64, write: bool) -> Result<AddrRange, HwError> {
        let range = self.check_range(addr, len)?;
        let (domain, privilege) = match hart {
            Some(h) => (self.harts[h].domain, self.harts[h].privilege),
            None => (DomainId::DMA, PrivilegeLevel::Lowest),
        };
        let allowed = if privilege == PrivilegeLevel::Highest {
            !(write && self.isolation.read_only.iter().any(|r| r.overlaps(&range)))
        } else {
            self.isolation.permits(domain, &range, write)
        };
        if allowed {
            Ok(range)
        } else {
            Err(HwError::AccessDenied { addr, domain })
        }
    }

    fn taint_if_confidential(&mut self, hart: usize, range: &AddrRange) {
        if self.isolation.is_confidential(range) {
            let domain = self.harts[hart].domain;
            self.harts[hart].microarch.touch(domain, range.start());
        }
    }

    fn check_width(width: u64) -> Result<(), HwError> {
        match width {
            1 | 2 | 4 | 8 => Ok(()),
            w => Err(HwError::InvalidWidth(w)),
        }
    }

    pub fn read_phys(&mut self, hart: usize, addr: PhysAddr, width: u64) -> Result<u64, HwError> {
        self.check_hart(hart)?;
        let result = Self::check_width(width).and_then(|_| self.check_access(Some(hart), addr, width, false));
        self.record_result(Some(hart), EventKind::Read { addr, len: width }, &result);
        let range = result?;
        let mut buf = [0u8; 8];
        self.memory.read(addr.as_u64(), &mut buf[..width as usize]);
        self.taint_if_confidential(hart, &range);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_phys(&mut self, hart: usize, addr: PhysAddr, width: u64, value: u64) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let result = Self::check_width(width).and_then(|_| self.check_access(Some(hart), addr, width, true));
        self.record_result(Some(hart), EventKind::Write { addr, len: width }, &result);
        let range = result?;
        self.memory.write(addr.as_u64(), &value.to_le_bytes()[..width as usize]);
        self.taint_if_confidential(hart, &range);
        Ok(())
    }

    pub fn read_block(&mut self, hart: usize, addr: PhysAddr, buf: &mut [u8]) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let len = buf.len() as u64;
        let result = self.check_access(Some(hart), addr, len, false);
        self.record_result(Some(hart), EventKind::Read { addr, len }, &result);
        let range = result?;
        self.memory.read(addr.as_u64(), buf);
        self.taint_if_confidential(hart, &range);
        Ok(())
    }

    pub fn write_block(&mut self, hart: usize, addr: PhysAddr, data: &[u8]) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let len = data.len() as u64;
        let result = self.check_access(Some(hart), addr, len, true);
        self.record_result(Some(hart), EventKind::Write { addr, len }, &result);
        let range = result?;
        self.memory.write(addr.as_u64(), data);
        self.taint_if_confidential(hart, &range);
        Ok(())
    }

    pub fn fill(&mut self, hart: usize, addr: PhysAddr, len: u64, byte: u8) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let result = self.check_access(Some(hart), addr, len, true);
        self.record_result(Some(hart), EventKind::Write { addr, len }, &result);
        let range = result?;
        self.memory.fill(addr.as_u64(), len, byte);
        self.taint_if_confidential(hart, &range);
        Ok(())
    }

    /// Device-originated read, attributed to the DMA pseudo-domain.
    pub fn dma_read(&mut self, addr: PhysAddr, width: u64) -> Result<u64, HwError> {
        let result = Self::check_width(width).and_then(|_| self.check_access(None, addr, width, false)).map(|_| ());
        self.record_dma(EventKind::Read { addr, len: width }, &result);
        result?;
        let mut buf = [0u8; 8];
        self.memory.read(addr.as_u64(), &mut buf[..width as usize]);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn dma_write(&mut self, addr: PhysAddr, width: u64, value: u64) -> Result<(), HwError> {
        let result = Self::check_width(width).and_then(|_| self.check_access(None, addr, width, true)).map(|_| ());
        self.record_dma(EventKind::Write { addr, len: width }, &result);
        result?;
        self.memory.write(addr.as_u64(), &value.to_le_bytes()[..width as usize]);
        Ok(())
    }

    /// Atomic compare-and-swap on an aligned word. Returns the prior value.
    pub fn atomic_cas(&mut self, hart: usize, addr: PhysAddr, expected: u64, new: u64) -> Result<u64, HwError> {
        self.check_hart(hart)?;
        let result = if addr.is_aligned(WORD_BYTES) {
            self.check_access(Some(hart), addr, WORD_BYTES, true)
        } else {
            Err(HwError::Misaligned(addr))
        };
        let prior = match &result {
            Ok(_) => {
                let mut buf = [0u8; 8];
                self.memory.read(addr.as_u64(), &mut buf);
                u64::from_le_bytes(buf)
            }
            Err(_) => 0,
        };
        self.record_result(Some(hart), EventKind::Cas { addr, expected, new, prior }, &result);
        let range = result?;
        if prior == expected {
            self.memory.write(addr.as_u64(), &new.to_le_bytes());
        }
        self.taint_if_confidential(hart, &range);
        Ok(prior)
    }

    // Guest-physical translation.

    /// Walks the hart's guest translation root. Hardware walk: not subject to
    /// the isolation component and not traced.
    fn translate(&self, hart: usize, guest_addr: u64) -> Option<PhysAddr> {
        let root = self.harts[hart].guest_root?;
        let page = guest_addr / PAGE_SIZE;
        if page >= GUEST_TABLE_ENTRIES {
            return None;
        }
        let mut buf = [0u8; 8];
        self.memory.read(root.as_u64() + page * WORD_BYTES, &mut buf);
        let entry = u64::from_le_bytes(buf);
        (entry & GUEST_ENTRY_VALID != 0).then(|| PhysAddr::new((entry & !(PAGE_SIZE - 1)) + guest_addr % PAGE_SIZE))
    }

    fn guest_fault(guest_addr: u64, write: bool, width: u64, value: u64) -> HwError {
        HwError::GuestPageFault(GuestFault { guest_addr, write, width, value })
    }

    /// Load issued by a guest running at the lowest privilege with a guest
    /// translation root installed. Unmapped addresses fault without touching
    /// memory; the caller delivers the fault as a trap.
    pub fn guest_read(&mut self, hart: usize, guest_addr: u64, width: u64) -> Result<u64, HwError> {
        self.check_hart(hart)?;
        Self::check_width(width)?;
        if guest_addr % width != 0 {
            return Err(HwError::Misaligned(PhysAddr::new(guest_addr)));
        }
        match self.translate(hart, guest_addr) {
            Some(pa) => self.read_phys(hart, pa, width),
            None => Err(Self::guest_fault(guest_addr, false, width, 0)),
        }
    }

    pub fn guest_write(&mut self, hart: usize, guest_addr: u64, width: u64, value: u64) -> Result<(), HwError> {
        self.check_hart(hart)?;
        Self::check_width(width)?;
        if guest_addr % width != 0 {
            return Err(HwError::Misaligned(PhysAddr::new(guest_addr)));
        }
        match self.translate(hart, guest_addr) {
            Some(pa) => self.write_phys(hart, pa, width, value),
            None => Err(Self::guest_fault(guest_addr, true, width, value)),
        }
    }

    // Registers of the software currently running on a hart. These are the
    // hart's own architectural state, so no isolation check applies.

    pub fn gprs(&self, hart: usize) -> &[u64; NUM_GPRS] {
        &self.harts[hart].gprs
    }

    pub fn set_gpr(&mut self, hart: usize, index: usize, value: u64) {
        if index != 0 {
            self.harts[hart].gprs[index] = value;
        }
    }

    pub fn load_gprs(&mut self, hart: usize, gprs: &[u64; NUM_GPRS]) {
        self.harts[hart].gprs = *gprs;
        self.harts[hart].gprs[0] = 0;
    }

    /// Interrupt-enable toggle of the running software (e.g. a trap handler
    /// re-enabling interrupts before it returns).
    pub fn set_interrupts_enabled(&mut self, hart: usize, enabled: bool) {
        self.harts[hart].interrupts_enabled = enabled;
    }

    /// Marks a hart's interrupted context as stopped (the running software
    /// moved on). Leaves architectural registers untouched.
    pub fn set_pc(&mut self, hart: usize, pc: PhysAddr) {
        self.harts[hart].pc = pc;
    }

    // Security-critical configuration.

    pub fn set_isolation(&mut self, hart: usize, config: IsolationConfig) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let result = if self.harts[hart].privilege != PrivilegeLevel::Highest {
            Err(HwError::PrivilegeViolation)
        } else {
            config.validate()
        };
        let next_version = if result.is_ok() { self.isolation_version + 1 } else { self.isolation_version };
        let config = Arc::new(config);
        self.record_result(Some(hart), EventKind::SetIsolation { version: next_version, config: Arc::clone(&config) }, &result);
        result?;
        self.isolation = config;
        self.isolation_version = next_version;
        Ok(())
    }

    /// Installs an isolation configuration without the privilege check or
    /// validation. Fault injection only: models a misconfigured isolation
    /// component. The change is still traced so the config in force is known.
    pub fn set_isolation_unchecked(&mut self, config: IsolationConfig) {
        self.isolation_version += 1;
        let config = Arc::new(config);
        self.trace.push(
            None,
            DomainId::SM,
            None,
            EventKind::SetIsolation { version: self.isolation_version, config: Arc::clone(&config) },
            Outcome::Ok,
        );
        self.isolation = config;
    }

    pub fn configure_interrupt(
        &mut self,
        hart: usize,
        irq: IrqId,
        target: PrivilegeLevel,
        handler: PhysAddr,
    ) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let caller = self.harts[hart].privilege;
        let current = self.irqc.route(hart, irq);
        let result = if !irq.is_known() {
            Err(HwError::UnroutedInterrupt(irq))
        } else if caller != PrivilegeLevel::Highest
            && (target == PrivilegeLevel::Highest || current.is_some_and(|r| r.target == PrivilegeLevel::Highest))
        {
            Err(HwError::PrivilegeViolation)
        } else if self.irqc.is_pinned(irq) && target != PrivilegeLevel::Highest {
            Err(HwError::PinnedInterrupt(irq))
        } else {
            Ok(())
        };
        self.record_result(Some(hart), EventKind::ConfigureIrq { irq, target, handler }, &result);
        result?;
        self.irqc.routes[hart].insert(irq, Route { target, handler });
        Ok(())
    }

    /// Rewrites a route bypassing every check. Fault injection only.
    pub fn force_route(&mut self, hart: usize, irq: IrqId, route: Route) {
        self.irqc.routes[hart].insert(irq, route);
    }

    /// Presents `irq` to `hart`: switches to the routed privilege, jumps to
    /// the handler and disables interrupts. The interrupted context is
    /// latched in the hart's trap info.
    pub fn deliver_interrupt(&mut self, hart: usize, irq: IrqId) -> Result<DeliveryRecord, HwError> {
        self.deliver(hart, irq, None)
    }

    /// Delivers a guest page fault previously reported by `guest_read` or
    /// `guest_write`.
    pub fn deliver_guest_fault(&mut self, hart: usize, fault: GuestFault) -> Result<DeliveryRecord, HwError> {
        self.deliver(hart, IrqId::GUEST_PAGE_FAULT, Some(fault))
    }

    fn deliver(&mut self, hart: usize, irq: IrqId, fault: Option<GuestFault>) -> Result<DeliveryRecord, HwError> {
        self.check_hart(hart)?;
        let h = &self.harts[hart];
        let from = h.privilege;
        let result = match self.irqc.route(hart, irq) {
            None => Err(HwError::UnroutedInterrupt(irq)),
            Some(route) if !irq.is_synchronous() && (!h.interrupts_enabled || route.target < from) => {
                Err(HwError::InterruptMasked(irq))
            }
            Some(route) => Ok(route),
        };
        let (to, handler) = match &result {
            Ok(r) => (r.target, r.handler),
            Err(_) => (from, h.pc),
        };
        if let Ok(route) = &result {
            let h = &mut self.harts[hart];
            h.trap = Some(TrapInfo {
                cause: irq,
                from_privilege: h.privilege,
                from_domain: h.domain,
                epc: h.pc,
                from_interrupts_enabled: h.interrupts_enabled,
                fault,
            });
            h.privilege = route.target;
            h.pc = route.handler;
            h.interrupts_enabled = false;
            match route.target {
                PrivilegeLevel::Highest => h.domain = DomainId::SM,
                PrivilegeLevel::Middle => h.domain = DomainId::HYPERVISOR,
                PrivilegeLevel::Lowest => {}
            }
        }
        self.record_result(Some(hart), EventKind::DeliverIrq { irq, from, to, handler }, &result);
        result.map(|r| DeliveryRecord { hart, irq, from, to: r.target, handler: r.handler })
    }

    /// Leaves the highest privilege (mret analog). Only the monitor may
    /// choose the domain label the hardware attaches to the hart.
    pub fn return_from_trap(&mut self, hart: usize, target: ReturnTarget) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let result = if self.harts[hart].privilege != PrivilegeLevel::Highest {
            Err(HwError::PrivilegeViolation)
        } else if target.privilege == PrivilegeLevel::Highest || target.domain == DomainId::SM {
            Err(HwError::Config("return target must leave the highest privilege".into()))
        } else {
            Ok(())
        };
        let taint = self.harts[hart].microarch.taint_owner;
        self.record_result(
            Some(hart),
            EventKind::ReturnFromTrap {
                to: target.privilege,
                target: target.domain,
                pc: target.pc,
                enable_interrupts: target.enable_interrupts,
                taint,
                guest_root: target.guest_root,
            },
            &result,
        );
        result?;
        let h = &mut self.harts[hart];
        h.privilege = target.privilege;
        h.domain = target.domain;
        h.pc = target.pc;
        h.interrupts_enabled = target.enable_interrupts;
        h.guest_root = target.guest_root;
        h.trap = None;
        Ok(())
    }

    /// Hypervisor entry into one of its legacy VMs (sret analog). The
    /// hardware only lets the middle privilege hand a hart to a VM label.
    pub fn enter_guest(&mut self, hart: usize, vm: DomainId, pc: PhysAddr) -> Result<(), HwError> {
        self.check_hart(hart)?;
        let result = if self.harts[hart].privilege != PrivilegeLevel::Middle {
            Err(HwError::PrivilegeViolation)
        } else if !vm.is_vm() {
            Err(HwError::Config(format!("{vm} is not a legacy VM")))
        } else {
            Ok(())
        };
        self.record_result(Some(hart), EventKind::EnterGuest { target: vm, pc }, &result);
        result?;
        let h = &mut self.harts[hart];
        h.privilege = PrivilegeLevel::Lowest;
        h.domain = vm;
        h.pc = pc;
        h.interrupts_enabled = true;
        Ok(())
    }

    pub fn clear_microarch(&mut self, hart: usize) -> Result<(), HwError> {
        self.check_hart(hart)?;
        self.harts[hart].microarch.clear();
        self.record(Some(hart), EventKind::ClearMicroarch, Outcome::Ok);
        Ok(())
    }

    /// Taints a hart's microarchitectural buffer directly. Fault injection.
    pub fn taint_microarch(&mut self, hart: usize, owner: DomainId) {
        self.harts[hart].microarch.touch(owner, PhysAddr::new(0x40));
    }

    /// Forces a hart's privilege and domain label. Fault injection.
    pub fn force_mode(&mut self, hart: usize, privilege: PrivilegeLevel, domain: DomainId) {
        self.harts[hart].privilege = privilege;
        self.harts[hart].domain = domain;
    }

    /// Unlocks the endorsement seed without a reset. Fault injection.
    pub fn force_seed_unlock(&mut self) {
        self.endorsement.locked = false;
    }

    /// Raw write bypassing isolation and tracing. Fault injection.
    pub fn poke(&mut self, addr: PhysAddr, data: &[u8]) {
        self.memory.write(addr.as_u64(), data);
    }

    pub fn read_seed(&mut self, hart: usize) -> Result<[u8; SEED_LEN], HwError> {
        self.check_hart(hart)?;
        let result = if self.harts[hart].privilege != PrivilegeLevel::Highest {
            Err(HwError::PrivilegeViolation)
        } else if self.endorsement.locked {
            Err(HwError::SeedLocked)
        } else {
            Ok(self.endorsement.seed)
        };
        self.record_result(Some(hart), EventKind::ReadSeed, &result);
        result
    }

    /// Locks the endorsement seed until the next reset.
    pub fn lock_seed(&mut self, hart: usize) -> Result<(), HwError> {
        self.check_hart(hart)?;
        self.endorsement.locked = true;
        self.record(Some(hart), EventKind::LockSeed, Outcome::Ok);
        Ok(())
    }

    pub fn rng_next(&mut self) -> u64 {
        let word = self.rng.next_u64();
        self.trace.push(None, DomainId::SM, None, EventKind::Rng, Outcome::Ok);
        word
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 64 * PAGE_SIZE;

    fn conf_platform() -> Platform {
        let mut p = Platform::new(MIB, 1, 7).unwrap();
        let cfg = IsolationConfig {
            confidential: vec![AddrRange::pages(32, 32)],
            read_only: vec![AddrRange::pages(0, 1)],
            ..Default::default()
        };
        p.set_isolation(0, cfg).unwrap();
        p
    }

    fn drop_to(p: &mut Platform, hart: usize, privilege: PrivilegeLevel, domain: DomainId) {
        p.return_from_trap(
            hart,
            ReturnTarget { privilege, domain, pc: PhysAddr::from_page(1), enable_interrupts: true, guest_root: None },
        )
        .unwrap();
    }

    #[test]
    fn create_platform_reset_state() {
        let p = create_platform(64 * PAGE_SIZE, 1, 7).unwrap();
        assert_eq!(p.page_count(), 64);
        assert_eq!(p.hart(0).privilege, PrivilegeLevel::Highest);
        assert!(!p.hart(0).interrupts_enabled);
        assert_eq!(p.hart(0).pc, BOOT_VECTOR);
        assert!(!p.seed_locked());
        assert!(p.isolation().confidential.is_empty());

        let p2 = create_platform(8 * PAGE_SIZE, 2, 7).unwrap();
        for h in p2.harts() {
            assert!(h.microarch.scratch.iter().all(|w| *w == 0));
            assert_eq!(h.microarch.taint_owner, None);
        }
    }

    #[test]
    fn create_platform_rejects_bad_sizes() {
        assert!(matches!(create_platform(0, 1, 7), Err(HwError::Config(_))));
        assert!(matches!(create_platform(PAGE_SIZE + 1, 1, 7), Err(HwError::Config(_))));
        assert!(matches!(create_platform(PAGE_SIZE, 0, 7), Err(HwError::Config(_))));
    }

    #[test]
    fn hypervisor_denied_confidential_sm_allowed() {
        let mut p = conf_platform();
        let secret = PhysAddr::from_page(40);
        p.write_phys(0, secret, 8, 0xdead).unwrap();
        assert_eq!(p.read_phys(0, secret, 8), Ok(0xdead));
        p.clear_microarch(0).unwrap();
        drop_to(&mut p, 0, PrivilegeLevel::Middle, DomainId::HYPERVISOR);
        assert_eq!(p.read_phys(0, secret, 8), Err(HwError::AccessDenied { addr: secret, domain: DomainId::HYPERVISOR }));
        let last = p.trace().events().last().unwrap();
        assert_eq!(last.outcome, Outcome::Err("AccessDenied".into()));
        assert_eq!(p.hart(0).microarch.taint_owner, None);
    }

    #[test]
    fn writes_to_boot_code_denied_for_everyone() {
        let mut p = conf_platform();
        assert!(matches!(p.write_phys(0, PhysAddr::new(8), 8, 1), Err(HwError::AccessDenied { .. })));
        assert_eq!(p.read_phys(0, PhysAddr::new(8), 8), Ok(0));
    }

    #[test]
    fn out_of_range_and_width() {
        let mut p = conf_platform();
        let end = PhysAddr::new(p.mem_size() - 4);
        assert!(matches!(p.write_phys(0, end, 8, 1), Err(HwError::OutOfRange { .. })));
        assert_eq!(p.read_phys(0, PhysAddr::new(64), 3), Err(HwError::InvalidWidth(3)));
    }

    #[test]
    fn confidential_access_taints_and_clear_is_idempotent() {
        let mut p = conf_platform();
        p.read_phys(0, PhysAddr::from_page(33), 8).unwrap();
        assert_eq!(p.hart(0).microarch.taint_owner, Some(DomainId::SM));
        assert!(p.hart(0).microarch.scratch.iter().any(|w| *w != 0));
        p.clear_microarch(0).unwrap();
        assert!(p.hart(0).microarch.is_clean());
        p.clear_microarch(0).unwrap();
        assert!(p.hart(0).microarch.is_clean());
        assert_eq!(p.hart(0).microarch.taint_owner, None);
    }

    #[test]
    fn isolation_reconfig_needs_highest() {
        let mut p = conf_platform();
        drop_to(&mut p, 0, PrivilegeLevel::Middle, DomainId::HYPERVISOR);
        let before = p.isolation().clone();
        assert_eq!(p.set_isolation(0, IsolationConfig::default()), Err(HwError::PrivilegeViolation));
        assert_eq!(p.isolation(), &before);
        assert_eq!(p.trace().events().last().unwrap().kind.op(), "set_isolation");
    }

    #[test]
    fn cvm_grant_enables_reads() {
        let mut p = conf_platform();
        let mut cfg = p.isolation().clone();
        cfg.grant(DomainId::cvm(1), AddrRange::pages(36, 2));
        p.set_isolation(0, cfg).unwrap();
        drop_to(&mut p, 0, PrivilegeLevel::Lowest, DomainId::cvm(1));
        assert!(p.read_phys(0, PhysAddr::from_page(36), 8).is_ok());
        assert!(p.read_phys(0, PhysAddr::from_page(38), 8).is_err());
    }

    #[test]
    fn overlapping_cvm_grants_rejected() {
        let mut p = conf_platform();
        let mut cfg = p.isolation().clone();
        cfg.grant(DomainId::cvm(1), AddrRange::pages(36, 2));
        cfg.grant(DomainId::cvm(2), AddrRange::pages(37, 1));
        assert!(matches!(p.set_isolation(0, cfg), Err(HwError::Config(_))));
    }

    #[test]
    fn interrupt_configuration_rules() {
        let mut p = conf_platform();
        let sm = PhysAddr::from_page(32);
        p.configure_interrupt(0, IrqId::TIMER, PrivilegeLevel::Middle, PhysAddr::from_page(1)).unwrap();
        assert_eq!(
            p.configure_interrupt(0, IrqId::SM_CALL, PrivilegeLevel::Middle, sm),
            Err(HwError::PinnedInterrupt(IrqId::SM_CALL))
        );
        drop_to(&mut p, 0, PrivilegeLevel::Middle, DomainId::HYPERVISOR);
        assert_eq!(
            p.configure_interrupt(0, IrqId::SM_CALL, PrivilegeLevel::Middle, PhysAddr::from_page(1)),
            Err(HwError::PrivilegeViolation)
        );
        assert_eq!(
            p.configure_interrupt(0, IrqId::TIMER, PrivilegeLevel::Highest, PhysAddr::from_page(1)),
            Err(HwError::PrivilegeViolation)
        );
        assert!(p.irqc().pinned().iter().all(|irq| p.irqc().route(0, *irq).unwrap().target == PrivilegeLevel::Highest));
    }

    #[test]
    fn delivery_semantics() {
        let mut p = conf_platform();
        let hv = PhysAddr::from_page(1);
        p.configure_interrupt(0, IrqId::TIMER, PrivilegeLevel::Middle, PhysAddr::from_page(2)).unwrap();
        drop_to(&mut p, 0, PrivilegeLevel::Lowest, DomainId::cvm(0));

        // Pinned SM call from the lowest level enters Highest with interrupts off.
        let rec = p.deliver_interrupt(0, IrqId::SM_CALL).unwrap();
        assert_eq!((rec.from, rec.to), (PrivilegeLevel::Lowest, PrivilegeLevel::Highest));
        assert!(!p.hart(0).interrupts_enabled);
        assert_eq!(p.hart(0).domain, DomainId::SM);
        assert_eq!(p.hart(0).trap.unwrap().from_domain, DomainId::cvm(0));

        drop_to(&mut p, 0, PrivilegeLevel::Middle, DomainId::HYPERVISOR);
        let rec = p.deliver_interrupt(0, IrqId::TIMER).unwrap();
        assert_eq!((rec.from, rec.to), (PrivilegeLevel::Middle, PrivilegeLevel::Middle));
        assert_eq!(p.hart(0).pc, PhysAddr::from_page(2));
        assert_ne!(p.hart(0).pc, hv);

        assert_eq!(p.deliver_interrupt(0, IrqId::EXTERNAL), Err(HwError::UnroutedInterrupt(IrqId::EXTERNAL)));
        // Interrupts were disabled by the previous delivery.
        assert_eq!(p.deliver_interrupt(0, IrqId::TIMER), Err(HwError::InterruptMasked(IrqId::TIMER)));
    }

    #[test]
    fn seed_access_rules() {
        let mut p = conf_platform();
        let seed = p.read_seed(0).unwrap();
        assert_eq!(seed.len(), SEED_LEN);
        p.lock_seed(0).unwrap();
        assert_eq!(p.read_seed(0), Err(HwError::SeedLocked));

        let mut q = conf_platform();
        drop_to(&mut q, 0, PrivilegeLevel::Middle, DomainId::HYPERVISOR);
        assert_eq!(q.read_seed(0), Err(HwError::PrivilegeViolation));
    }

    #[test]
    fn cas_success_failure_and_alignment() {
        let mut p = conf_platform();
        let a = PhysAddr::from_page(3);
        assert_eq!(p.atomic_cas(0, a, 0, 1), Ok(0));
        assert_eq!(p.peek(a, 8), 1u64.to_le_bytes());
        assert_eq!(p.atomic_cas(0, a, 0, 2), Ok(1));
        assert_eq!(p.peek(a, 8), 1u64.to_le_bytes());
        assert_eq!(p.atomic_cas(0, a.add(4), 0, 2), Err(HwError::Misaligned(a.add(4))));
    }

    #[test]
    fn rng_is_seeded_and_deterministic() {
        let mut a = Platform::new(PAGE_SIZE, 1, 11).unwrap();
        let mut b = Platform::new(PAGE_SIZE, 1, 11).unwrap();
        let mut c = Platform::new(PAGE_SIZE, 1, 12).unwrap();
        let sa: Vec<u64> = (0..16).map(|_| a.rng_next()).collect();
        let sb: Vec<u64> = (0..16).map(|_| b.rng_next()).collect();
        let sc: Vec<u64> = (0..16).map(|_| c.rng_next()).collect();
        assert_eq!(sa, sb);
        assert!(sa.iter().zip(&sc).any(|(x, y)| x != y));
    }

    #[test]
    fn rng_has_no_excess_repeats() {
        // Birthday bound for 10^4 draws from 2^64: expected collisions ~ n^2 / 2^65 ≈ 2.7e-12.
        let mut p = Platform::new(PAGE_SIZE, 1, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        let repeats = (0..10_000).filter(|_| !seen.insert(p.rng_next())).count();
        assert_eq!(repeats, 0);
    }

    #[test]
    fn guest_walk_faults_when_unmapped() {
        let mut p = conf_platform();
        let root = PhysAddr::from_page(40);
        let data = PhysAddr::from_page(41);
        p.write_phys(0, root.add(3 * WORD_BYTES), 8, data.as_u64() | GUEST_ENTRY_VALID).unwrap();
        let mut cfg = p.isolation().clone();
        cfg.grant(DomainId::cvm(0), AddrRange::pages(41, 1));
        p.set_isolation(0, cfg).unwrap();
        p.clear_microarch(0).unwrap();
        p.return_from_trap(
            0,
            ReturnTarget {
                privilege: PrivilegeLevel::Lowest,
                domain: DomainId::cvm(0),
                pc: PhysAddr::new(0),
                enable_interrupts: true,
                guest_root: Some(root),
            },
        )
        .unwrap();
        p.guest_write(0, 3 * PAGE_SIZE + 16, 8, 99).unwrap();
        assert_eq!(p.guest_read(0, 3 * PAGE_SIZE + 16, 8), Ok(99));
        assert_eq!(p.peek(data.add(16), 8), 99u64.to_le_bytes());
        match p.guest_read(0, 5 * PAGE_SIZE, 8) {
            Err(HwError::GuestPageFault(f)) => assert_eq!(f.guest_addr, 5 * PAGE_SIZE),
            other => panic!("expected fault, got {other:?}"),
        }
    }

    #[test]
    fn trace_is_monotone() {
        let mut p = conf_platform();
        let _ = p.read_phys(0, PhysAddr::new(8), 8);
        let _ = p.read_phys(0, PhysAddr::new(1 << 40), 8);
        let seqs: Vec<u64> = p.trace().events().iter().map(|e| e.seq).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }
}
