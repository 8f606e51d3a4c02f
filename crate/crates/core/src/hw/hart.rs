// SPDX-License-Identifier: Apache-2.0

use crate::hw::{DomainId, IrqId, PhysAddr, PrivilegeLevel};
use crate::{NUM_GPRS, SCRATCH_WORDS};

/// Microarchitectural residue of execution, modeled as an explicit buffer
/// tagged with the domain that produced it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct MicroArchState {
    pub scratch: [u64; SCRATCH_WORDS],
    pub taint_owner: Option<DomainId>,
}

impl MicroArchState {
    pub fn is_clean(&self) -> bool {
        self.taint_owner.is_none() && self.scratch.iter().all(|w| *w == 0)
    }

    /// Record a confidential-memory access. The slot value is never zero so
    /// "scratch all-zero iff no owner" holds.
    pub(crate) fn touch(&mut self, owner: DomainId, addr: PhysAddr) {
        let slot = (addr.as_u64() / 64) as usize % SCRATCH_WORDS;
        self.scratch[slot] = addr.as_u64() | 1;
        self.taint_owner = Some(owner);
    }

    pub(crate) fn clear(&mut self) {
        *self = Self::default();
    }
}

/// Fault details latched by the hardware on a guest page fault.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GuestFault {
    pub guest_addr: u64,
    pub write: bool,
    pub width: u64,
    pub value: u64,
}

/// What the hardware latches when it takes a trap: where execution came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrapInfo {
    pub cause: IrqId,
    pub from_privilege: PrivilegeLevel,
    pub from_domain: DomainId,
    pub epc: PhysAddr,
    pub from_interrupts_enabled: bool,
    pub fault: Option<GuestFault>,
}

/// Architectural state of one hardware thread.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HartContext {
    pub hart_id: usize,
    pub privilege: PrivilegeLevel,
    /// Security domain the hardware attributes this hart's accesses to.
    pub domain: DomainId,
    pub gprs: [u64; NUM_GPRS],
    pub pc: PhysAddr,
    pub interrupts_enabled: bool,
    pub microarch: MicroArchState,
    /// Root of the guest-physical translation table, set while a VM runs.
    pub guest_root: Option<PhysAddr>,
    pub trap: Option<TrapInfo>,
}

impl HartContext {
    pub(crate) fn reset(hart_id: usize, boot_vector: PhysAddr) -> Self {
        Self {
            hart_id,
            privilege: PrivilegeLevel::Highest,
            domain: DomainId::SM,
            gprs: [0; NUM_GPRS],
            pc: boot_vector,
            interrupts_enabled: false,
            microarch: MicroArchState::default(),
            guest_root: None,
            trap: None,
        }
    }

    pub fn in_monitor(&self) -> bool {
        self.privilege == PrivilegeLevel::Highest
    }
}
