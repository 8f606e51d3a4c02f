// SPDX-License-Identifier: Apache-2.0

//! Point-in-time copy of the state the oracle's state checks read.

use std::collections::{BTreeMap, BTreeSet};

use crate::attestation::AttestationReport;
use crate::harness::World;
use crate::hw::{DomainId, IrqId, IsolationConfig, PhysAddr, PrivilegeLevel, Route};
use crate::sm::Lifecycle;
use crate::tracker::TokenSerial;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HartSnap {
    pub privilege: PrivilegeLevel,
    pub domain: DomainId,
    pub pc: PhysAddr,
    pub interrupts_enabled: bool,
    pub routes: BTreeMap<IrqId, Route>,
}

/// Who holds a token instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Holder {
    Free,
    Root(DomainId),
    Mapped(DomainId, u64),
}

impl Holder {
    pub fn owner(self) -> Option<DomainId> {
        match self {
            Holder::Free => None,
            Holder::Root(d) | Holder::Mapped(d, _) => Some(d),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSnap {
    pub serial: TokenSerial,
    pub base: PhysAddr,
    pub holder: Holder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CvmSnap {
    pub id: DomainId,
    pub lifecycle: Lifecycle,
    pub busy_on: Option<usize>,
    /// Root and mapped pages.
    pub private_pages: Vec<PhysAddr>,
    pub shared_pages: Vec<PhysAddr>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub harts: Vec<HartSnap>,
    pub pinned: BTreeSet<IrqId>,
    pub isolation: IsolationConfig,
    pub seed_locked: bool,
    pub stored_key: [u8; 32],
    /// Every token instance reachable from the monitor: free list, page
    /// table roots and mappings.
    pub tokens: Vec<TokenSnap>,
    pub total_created: u64,
    /// Free pool pages with nonzero contents.
    pub dirty_free_pages: Vec<PhysAddr>,
    pub cvms: Vec<CvmSnap>,
    pub reports: Vec<(DomainId, AttestationReport)>,
}

impl Snapshot {
    pub fn capture(world: &World) -> Self {
        let p = world.platform();
        let sm = world.sm();
        let harts = (0..p.hart_count())
            .map(|h| {
                let c = p.hart(h);
                HartSnap {
                    privilege: c.privilege,
                    domain: c.domain,
                    pc: c.pc,
                    interrupts_enabled: c.interrupts_enabled,
                    routes: p.irqc().table(h).clone(),
                }
            })
            .collect();

        let mut tokens: Vec<TokenSnap> =
            sm.pool().free_tokens().map(|(serial, base)| TokenSnap { serial, base, holder: Holder::Free }).collect();
        let dirty_free_pages = sm.pool().free_tokens().map(|(_, b)| b).filter(|b| !p.page_is_zero(*b)).collect();
        let mut cvms = Vec::new();
        let mut reports = Vec::new();
        for d in sm.domains().values().filter(|d| d.is_cvm()) {
            let mut private_pages = Vec::new();
            let mut shared_pages = Vec::new();
            if let Some(pt) = d.page_table() {
                let root = pt.root();
                tokens.push(TokenSnap { serial: root.serial(), base: root.base(), holder: Holder::Root(d.id) });
                private_pages.push(root.base());
                for (g, t) in pt.mappings() {
                    tokens.push(TokenSnap { serial: t.serial(), base: t.base(), holder: Holder::Mapped(d.id, *g) });
                    private_pages.push(t.base());
                }
                shared_pages.extend(pt.shared().values().copied());
            }
            cvms.push(CvmSnap { id: d.id, lifecycle: d.lifecycle, busy_on: d.busy_on, private_pages, shared_pages });
            if let Some(r) = sm.report(d.id) {
                reports.push((d.id, r.clone()));
            }
        }

        let key = p.peek(sm.layout().key_addr(), 32);
        Self {
            harts,
            pinned: p.irqc().pinned().clone(),
            isolation: p.isolation().clone(),
            seed_locked: p.seed_locked(),
            stored_key: key.try_into().expect("32-byte peek"),
            tokens,
            total_created: sm.pool().total_created(),
            dirty_free_pages,
            cvms,
            reports,
        }
    }
}
