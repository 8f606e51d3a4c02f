// SPDX-License-Identifier: Apache-2.0

//! Measured boot and security monitor initialization.
//!
//! Physical memory is split in a non-confidential low part and a
//! confidential high part:
//!
//! ```text
//! page 0            boot code, read-only from reset
//! hypervisor        hypervisor image, entry at its first byte
//! shared window     pages the monitor hands out as CVM shared pages
//! vm area           free non-confidential memory (VM images, hypervisor data)
//! ---------------- confidential from here on
//! sm code           monitor image, trap vector at its first byte
//! sm data           monitor lock word and scratch
//! control data      attestation key, saved contexts and interrupt routes
//! pool              pages handed out as tokens by the memory tracker
//! ```
//!
//! Control page 0 holds the attestation key secret at offset 0, one
//! 256-byte interrupt route slot per hart from offset 512 and one 512-byte
//! hypervisor context slot per hart from offset 2048. Control pages 1 and 2
//! hold eight 512-byte CVM context slots each.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::attestation::{self, AttestationKey, Measurement, PublicKey, KEY_LABEL, SIGNATURE_SCHEME};
use crate::fsm::RETARGETED_IRQS;
use crate::hw::{AddrRange, DomainId, HwError, IrqId, IsolationConfig, PhysAddr, Platform, PrivilegeLevel, ReturnTarget};
use crate::sm::{CallTable, SecurityMonitor};
use crate::trace::{EventKind, Outcome};
use crate::tracker::{init_tracker, TrackerError, TrackerInit};
use crate::PAGE_SIZE;

pub const MAX_HARTS: usize = 4;
pub const MAX_CVMS: usize = 16;
pub const SHARED_WINDOW_PAGES: u64 = 4;
const CONTROL_PAGES: u64 = 3;
const SM_DATA_PAGES: u64 = 1;
const IRQ_SLOT_BASE: u64 = 512;
const IRQ_SLOT_SIZE: u64 = 256;
const HV_SLOT_BASE: u64 = 2048;
const CTX_SLOT_SIZE: u64 = 512;
const CVM_SLOTS_PER_PAGE: u64 = PAGE_SIZE / CTX_SLOT_SIZE;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MemoryLayout {
    pub boot: AddrRange,
    pub hypervisor: AddrRange,
    pub shared_window: AddrRange,
    pub vm_area: AddrRange,
    pub sm_code: AddrRange,
    pub sm_data: AddrRange,
    pub control: AddrRange,
    pub pool: AddrRange,
}

fn pages_for(len: usize) -> u64 {
    (len as u64).div_ceil(PAGE_SIZE).max(1)
}

impl MemoryLayout {
    /// Places every region. `pool_pages` fixes the pool size; by default the
    /// confidential part is the upper half of memory.
    pub fn compute(
        mem_pages: u64,
        harts: usize,
        sm_image_len: usize,
        hv_image_len: usize,
        pool_pages: Option<u64>,
    ) -> Result<Self, String> {
        if harts > MAX_HARTS {
            return Err(format!("at most {MAX_HARTS} harts supported"));
        }
        let sm_pages = pages_for(sm_image_len);
        let hv_pages = pages_for(hv_image_len);
        let fixed_conf = sm_pages + SM_DATA_PAGES + CONTROL_PAGES;
        let conf_pages = match pool_pages {
            Some(p) => fixed_conf + p,
            None => mem_pages / 2,
        };
        if conf_pages <= fixed_conf {
            return Err(format!("confidential part of {conf_pages} pages leaves no pool"));
        }
        let low_needed = 1 + hv_pages + SHARED_WINDOW_PAGES + 1;
        if conf_pages + low_needed > mem_pages {
            return Err(format!(
                "{mem_pages} pages cannot hold {conf_pages} confidential and {low_needed} non-confidential pages"
            ));
        }
        let conf_start = mem_pages - conf_pages;
        let hv_start = 1;
        let window_start = hv_start + hv_pages;
        let vm_start = window_start + SHARED_WINDOW_PAGES;
        let sm_data_start = conf_start + sm_pages;
        let control_start = sm_data_start + SM_DATA_PAGES;
        let pool_start = control_start + CONTROL_PAGES;
        Ok(Self {
            boot: AddrRange::pages(0, 1),
            hypervisor: AddrRange::pages(hv_start, hv_pages),
            shared_window: AddrRange::pages(window_start, SHARED_WINDOW_PAGES),
            vm_area: AddrRange::pages(vm_start, conf_start - vm_start),
            sm_code: AddrRange::pages(conf_start, sm_pages),
            sm_data: AddrRange::pages(sm_data_start, SM_DATA_PAGES),
            control: AddrRange::pages(control_start, CONTROL_PAGES),
            pool: AddrRange::pages(pool_start, mem_pages - pool_start),
        })
    }

    /// Monitor code and data.
    pub fn sm_region(&self) -> AddrRange {
        AddrRange::from_bounds(self.sm_code.start(), self.sm_data.end())
    }

    pub fn confidential(&self) -> AddrRange {
        AddrRange::from_bounds(self.sm_code.start(), self.pool.end())
    }

    pub fn sm_vector(&self) -> PhysAddr {
        self.sm_code.start()
    }

    pub fn hv_entry(&self) -> PhysAddr {
        self.hypervisor.start()
    }

    pub fn lock_addr(&self) -> PhysAddr {
        self.sm_data.start()
    }

    pub fn key_addr(&self) -> PhysAddr {
        self.control.start()
    }

    pub fn key_range(&self) -> AddrRange {
        AddrRange::new(self.key_addr(), 32)
    }

    pub fn irq_slot(&self, hart: usize) -> PhysAddr {
        self.control.start().add(IRQ_SLOT_BASE + hart as u64 * IRQ_SLOT_SIZE)
    }

    pub fn hv_ctx_slot(&self, hart: usize) -> PhysAddr {
        self.control.start().add(HV_SLOT_BASE + hart as u64 * CTX_SLOT_SIZE)
    }

    pub fn cvm_ctx_slot(&self, slot: usize) -> PhysAddr {
        let slot = slot as u64;
        let page = 1 + slot / CVM_SLOTS_PER_PAGE;
        self.control.start().add(page * PAGE_SIZE + (slot % CVM_SLOTS_PER_PAGE) * CTX_SLOT_SIZE)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BootOptions {
    /// Pool size in pages; `None` makes the confidential part half of memory.
    pub pool_pages: Option<u64>,
    pub call_table: Option<CallTable>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InitInvariant {
    /// Only the monitor executes at the highest privilege.
    I1,
    /// Untrusted domains cannot reach monitor code, data or control data.
    I2,
    /// Monitor and control data live in confidential memory.
    I3,
    /// Pinned interrupts reach the monitor's vector on every hart.
    I4,
    /// Seed locked, key in control data.
    I5,
}

impl InitInvariant {
    pub const ALL: [InitInvariant; 5] = [Self::I1, Self::I2, Self::I3, Self::I4, Self::I5];

    pub fn id(self) -> &'static str {
        match self {
            Self::I1 => "I.Init.1",
            Self::I2 => "I.Init.2",
            Self::I3 => "I.Init.3",
            Self::I4 => "I.Init.4",
            Self::I5 => "I.Init.5",
        }
    }
}

impl fmt::Display for InitInvariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootReport {
    pub measurements: Vec<Measurement>,
    pub sm_region: AddrRange,
    pub control_region: AddrRange,
    pub attestation_key_id: String,
    pub public_key: [u8; 32],
    pub signature_scheme: &'static str,
    pub invariants_established: BTreeSet<InitInvariant>,
    pub layout: MemoryLayout,
}

impl BootReport {
    /// Line-per-field record in the trace's `key=value` style.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        for m in &self.measurements {
            out.push_str(&format!("measurement\tcomponent={},digest={}\n", m.subject, m.digest.to_hex()));
        }
        out.push_str(&format!("sm_region\t{}\n", self.sm_region));
        out.push_str(&format!("control_region\t{}\n", self.control_region));
        out.push_str(&format!("pool\t{}\n", self.layout.pool));
        out.push_str(&format!("attestation_key\tid={},scheme={}\n", self.attestation_key_id, self.signature_scheme));
        out.push_str(&format!("public_key\t{}\n", hex::encode(self.public_key)));
        let inv: Vec<String> = self.invariants_established.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("invariants\t{}\n", inv.join(",")));
        out
    }

    pub fn public_key(&self) -> PublicKey {
        attestation::public_key_from_bytes(&self.public_key).expect("boot stores a valid key")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BootCause {
    #[error("platform already initialized")]
    AlreadyInitialized,
    #[error("layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("invariants not established: {0:?}")]
    Invariants(BTreeSet<InitInvariant>),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BootError {
    #[error("boot step {step} failed: {cause}")]
    Sequence { step: u8, cause: BootCause },
}

impl BootError {
    pub fn step(&self) -> u8 {
        match self {
            BootError::Sequence { step, .. } => *step,
        }
    }

    pub fn cause(&self) -> &BootCause {
        match self {
            BootError::Sequence { cause, .. } => cause,
        }
    }
}

const BOOT_HART: usize = 0;

fn step<T, E: Into<BootCause>>(n: u8, r: Result<T, E>) -> Result<T, BootError> {
    r.map_err(|e| BootError::Sequence { step: n, cause: e.into() })
}

/// Boots a fresh platform and returns the initialized monitor.
///
/// Steps: (0) freshness check, (1) measure and load both images,
/// (2) install isolation, (3) create the token pool, (4) pin monitor
/// interrupts and delegate the rest to the hypervisor, (5) derive the
/// attestation key and lock the seed, (6) clear microarchitectural state,
/// (7) release every hart to the hypervisor with interrupts enabled.
pub fn secure_boot(
    platform: &mut Platform,
    sm_image: &[u8],
    hv_image: &[u8],
    options: BootOptions,
) -> Result<(SecurityMonitor, BootReport), BootError> {
    let h = BOOT_HART;
    let mark = |p: &mut Platform, n: u8, name: &'static str| {
        p.record(Some(h), EventKind::BootStep { step: n, name }, Outcome::Ok);
    };

    mark(platform, 0, "fresh");
    if platform.seed_locked() || platform.hart(h).privilege != PrivilegeLevel::Highest {
        return Err(BootError::Sequence { step: 0, cause: BootCause::AlreadyInitialized });
    }
    let layout = step(
        0,
        MemoryLayout::compute(platform.page_count(), platform.hart_count(), sm_image.len(), hv_image.len(), options.pool_pages)
            .map_err(BootCause::Layout),
    )?;

    mark(platform, 1, "measure");
    let chain = vec![Measurement::of("sm", sm_image), Measurement::of("hypervisor", hv_image)];
    for m in &chain {
        platform.record(Some(h), EventKind::Measured { component: m.subject.clone(), digest: m.digest.to_hex() }, Outcome::Ok);
    }
    step(1, platform.write_block(h, layout.sm_code.start(), sm_image))?;
    step(1, platform.write_block(h, layout.hypervisor.start(), hv_image))?;
    // The boot ROM jumps into the monitor on every hart.
    for hart in 0..platform.hart_count() {
        platform.set_pc(hart, layout.sm_vector());
    }

    mark(platform, 2, "isolation");
    let isolation = IsolationConfig {
        confidential: vec![layout.sm_region(), layout.control, layout.pool],
        read_only: vec![layout.boot],
        ..Default::default()
    };
    step(2, platform.set_isolation(h, isolation))?;

    mark(platform, 3, "tracker");
    let pool = step(3, init_tracker(&mut TrackerInit::new(), platform, h, layout.pool))?;

    mark(platform, 4, "interrupts");
    for hart in 0..platform.hart_count() {
        let pinned: Vec<IrqId> = platform.irqc().pinned().iter().copied().collect();
        for irq in pinned {
            step(4, platform.configure_interrupt(hart, irq, PrivilegeLevel::Highest, layout.sm_vector()))?;
        }
        for irq in RETARGETED_IRQS {
            step(4, platform.configure_interrupt(hart, irq, PrivilegeLevel::Middle, layout.hv_entry()))?;
        }
    }

    mark(platform, 5, "attestation key");
    let seed = step(5, platform.read_seed(h))?;
    let key = attestation::derive_attestation_key(&seed, &chain);
    step(5, platform.write_block(h, layout.key_addr(), &key.secret()))?;
    step(5, platform.lock_seed(h))?;
    let key = AttestationKey::from_secret(key.secret(), KEY_LABEL);

    mark(platform, 6, "clear");
    for hart in 0..platform.hart_count() {
        step(6, platform.clear_microarch(hart))?;
    }

    let calls = options.call_table.unwrap_or_default();
    let monitor = SecurityMonitor::new(layout.clone(), calls, pool, chain.clone(), &key, platform.hart_count());
    let violations = monitor.verify_init_invariants(platform);
    if !violations.is_empty() {
        return Err(BootError::Sequence { step: 6, cause: BootCause::Invariants(violations) });
    }
    let report = BootReport {
        measurements: chain,
        sm_region: layout.sm_region(),
        control_region: layout.control,
        attestation_key_id: key.id(),
        public_key: key.public().to_bytes(),
        signature_scheme: SIGNATURE_SCHEME,
        invariants_established: InitInvariant::ALL.into_iter().collect(),
        layout: layout.clone(),
    };

    mark(platform, 7, "release");
    platform.record(Some(h), EventKind::BootComplete, Outcome::Ok);
    for hart in 0..platform.hart_count() {
        step(
            7,
            platform.return_from_trap(
                hart,
                ReturnTarget {
                    privilege: PrivilegeLevel::Middle,
                    domain: DomainId::HYPERVISOR,
                    pc: layout.hv_entry(),
                    enable_interrupts: true,
                    guest_root: None,
                },
            ),
        )?;
    }
    Ok((monitor, report))
}

impl SecurityMonitor {
    /// Checks the initialization invariants against the live platform.
    /// Returns the violated ones.
    pub fn verify_init_invariants(&self, platform: &Platform) -> BTreeSet<InitInvariant> {
        let l = &self.layout;
        let iso = platform.isolation();
        let mut out = BTreeSet::new();

        let highest_ok = platform
            .harts()
            .iter()
            .all(|h| h.privilege != PrivilegeLevel::Highest || (h.domain == DomainId::SM && l.sm_code.contains(h.pc)));
        let routes_ok = (0..platform.hart_count()).all(|hart| {
            platform.irqc().table(hart).values().all(|r| r.target != PrivilegeLevel::Highest || l.sm_code.contains(r.handler))
        });
        if !highest_ok || !routes_ok {
            out.insert(InitInvariant::I1);
        }

        let mut untrusted = vec![DomainId::HYPERVISOR, DomainId::DMA];
        untrusted.extend(self.domains.keys().copied());
        let protected = [l.sm_region(), l.control];
        let reachable = untrusted
            .iter()
            .any(|d| protected.iter().any(|r| r.page_bases().any(|p| iso.permits(*d, &AddrRange::page_of(p), false))));
        if reachable {
            out.insert(InitInvariant::I2);
        }

        if ![l.sm_region(), l.control].iter().all(|r| crate::hw::covered_by(&iso.confidential, r)) {
            out.insert(InitInvariant::I3);
        }

        let pinned = platform.irqc().pinned();
        let pinned_ok = pinned.contains(&IrqId::SM_CALL)
            && (0..platform.hart_count()).all(|hart| {
                pinned.iter().all(|irq| {
                    platform
                        .irqc()
                        .route(hart, *irq)
                        .is_some_and(|r| r.target == PrivilegeLevel::Highest && r.handler == l.sm_vector())
                })
            });
        if !pinned_ok {
            out.insert(InitInvariant::I4);
        }

        if !platform.seed_locked() || !l.control.contains_range(&l.key_range()) {
            out.insert(InitInvariant::I5);
        }
        out
    }
}
