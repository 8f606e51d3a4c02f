// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::hw::{PhysAddr, PrivilegeLevel};

/// Interrupt or synchronous trap identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IrqId(pub u32);

impl IrqId {
    /// Environment call into the security monitor. Synchronous, pinned.
    pub const SM_CALL: IrqId = IrqId(0);
    /// Inter-processor interrupt reserved for the monitor. Pinned.
    pub const SM_SOFT: IrqId = IrqId(1);
    /// Guest-physical page fault. Synchronous.
    pub const GUEST_PAGE_FAULT: IrqId = IrqId(2);
    pub const TIMER: IrqId = IrqId(5);
    pub const EXTERNAL: IrqId = IrqId(9);

    /// Identifiers the platform knows about.
    pub const KNOWN: [IrqId; 5] = [Self::SM_CALL, Self::SM_SOFT, Self::GUEST_PAGE_FAULT, Self::TIMER, Self::EXTERNAL];

    /// Synchronous traps are taken regardless of the interrupt-enable bit.
    pub fn is_synchronous(self) -> bool {
        self == Self::SM_CALL || self == Self::GUEST_PAGE_FAULT
    }

    pub fn is_known(self) -> bool {
        Self::KNOWN.contains(&self)
    }
}

impl fmt::Display for IrqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Route {
    pub target: PrivilegeLevel,
    pub handler: PhysAddr,
}

/// Interrupt controller with one routing table per hart and a global set of
/// interrupts pinned to the highest privilege.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InterruptController {
    pub(crate) routes: Vec<BTreeMap<IrqId, Route>>,
    pub(crate) pinned: BTreeSet<IrqId>,
}

impl InterruptController {
    pub(crate) fn new(harts: usize, reset_vector: PhysAddr) -> Self {
        let pinned: BTreeSet<IrqId> = [IrqId::SM_CALL, IrqId::SM_SOFT].into_iter().collect();
        let table: BTreeMap<IrqId, Route> =
            pinned.iter().map(|irq| (*irq, Route { target: PrivilegeLevel::Highest, handler: reset_vector })).collect();
        Self { routes: vec![table; harts], pinned }
    }

    pub fn route(&self, hart: usize, irq: IrqId) -> Option<Route> {
        self.routes.get(hart)?.get(&irq).copied()
    }

    pub fn table(&self, hart: usize) -> &BTreeMap<IrqId, Route> {
        &self.routes[hart]
    }

    pub fn pinned(&self) -> &BTreeSet<IrqId> {
        &self.pinned
    }

    pub fn is_pinned(&self, irq: IrqId) -> bool {
        self.pinned.contains(&irq)
    }
}
