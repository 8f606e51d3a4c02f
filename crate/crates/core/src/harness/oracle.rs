// SPDX-License-Identifier: Apache-2.0

//! Invariant oracle.
//!
//! The checker rebuilds what it needs from the trace alone: privilege per
//! hart, the isolation configuration in force, interrupt routes, the token
//! ledger (which token was created where, which CVM maps which page) and
//! each hart's monitor window from trap entry to return. Trace checks run
//! per event. State checks run on a [`Snapshot`] after every step and never
//! consult the monitor's own bookkeeping beyond what the snapshot copies.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{Arc, Mutex};

use crate::attestation::{verify_report, AttestationKey, Measurement, PublicKey, KEY_LABEL};
use crate::boot::MemoryLayout;
use crate::fsm::{Direction, FsmNode, TransitionAction};
use crate::harness::snapshot::{Holder, Snapshot};
use crate::harness::{Counterexample, Verdict, World};
use crate::hw::{AddrRange, DomainId, IrqId, IsolationConfig, PhysAddr, PrivilegeLevel, Route};
use crate::sm::CallTable;
use crate::trace::{EventKind, TraceEvent};
use crate::tracker::TokenSerial;
use crate::{NUM_GPRS, PAGE_SIZE, WORD_BYTES};

/// Every verdict the oracle reports, in report order.
pub const VERDICT_IDS: [&str; 26] = [
    "HW.PrivMonotonic",
    "HW.IsolationSound",
    "HW.SeedLock",
    "S.Init.1",
    "S.Init.2",
    "I.Init.1",
    "I.Init.2",
    "I.Init.3",
    "I.Init.4",
    "I.Init.5",
    "FSM.Path",
    "I.FSM.1",
    "I.FSM.2",
    "I.FSM.3",
    "I.FSM.4",
    "I.FSM.5",
    "I.FSM.6",
    "I.MT.1",
    "I.MT.2",
    "I.MT.3",
    "S.MT.1",
    "P1",
    "P2",
    "P3",
    "P4",
    "ATT.Sound",
];

fn verdict_id(id: &str) -> &'static str {
    VERDICT_IDS.iter().find(|v| **v == id).copied().expect("known verdict id")
}

/// Facts fixed at boot that the checks compare against.
#[derive(Debug)]
pub struct OracleContext {
    pub layout: MemoryLayout,
    pub calls: CallTable,
    pub boot_public: PublicKey,
    pub boot_chain: Vec<Measurement>,
    /// Expected image digest per VM, hex.
    pub vm_digests: BTreeMap<DomainId, String>,
}

impl OracleContext {
    pub fn from_world(world: &World) -> Self {
        Self {
            layout: world.boot().layout.clone(),
            calls: world.sm().calls().clone(),
            boot_public: world.boot().public_key(),
            boot_chain: world.boot().measurements.clone(),
            vm_digests: world.vm_digests().into_iter().map(|(d, g)| (d, g.to_hex())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Window {
    node: FsmNode,
    interrupted: DomainId,
    start_routes: BTreeMap<IrqId, Route>,
    pending: Option<Direction>,
    exited: bool,
    rejected: bool,
    lifecycle: Vec<DomainId>,
}

#[derive(Clone, Debug, Default)]
struct HartTrack {
    privilege: Option<PrivilegeLevel>,
    window: Option<Window>,
    routes: BTreeMap<IrqId, Route>,
    /// Routes in force when the hypervisor handed the hart to a CVM.
    saved_routes: Option<BTreeMap<IrqId, Route>>,
    /// Range of the token access announced by the previous event.
    announced: Option<(TokenSerial, AddrRange)>,
}

#[derive(Clone, Debug)]
pub struct Checker {
    ctx: Arc<OracleContext>,
    step: usize,
    failures: BTreeMap<&'static str, Counterexample>,
    harts: Vec<HartTrack>,
    isolation: Arc<IsolationConfig>,
    seed_locked: bool,
    boot_step: Option<u8>,
    created: Arc<BTreeMap<TokenSerial, PhysAddr>>,
    init_created: u64,
    /// Private page -> owning CVM, from page table events.
    page_owner: BTreeMap<PhysAddr, DomainId>,
    serial_owner: BTreeMap<TokenSerial, DomainId>,
    promoted: BTreeMap<DomainId, String>,
    verified: Arc<Mutex<HashSet<[u8; 64]>>>,
    key_checked: Option<[u8; 32]>,
}

fn pages_of(range: &AddrRange) -> impl Iterator<Item = PhysAddr> {
    let first = range.start().as_u64() / PAGE_SIZE;
    let last = (range.end().as_u64().max(range.start().as_u64() + 1) - 1) / PAGE_SIZE;
    (first..=last).map(|p| PhysAddr::new(p * PAGE_SIZE))
}

fn covered(set: &[AddrRange], range: &AddrRange) -> bool {
    let mut cursor = range.start();
    while cursor < range.end() {
        match set.iter().find(|r| r.contains(cursor)) {
            Some(r) => cursor = r.end(),
            None => return false,
        }
    }
    true
}

impl Checker {
    pub fn new(world: &World) -> Self {
        Self::with_context(Arc::new(OracleContext::from_world(world)), world.platform().hart_count())
    }

    pub fn with_context(ctx: Arc<OracleContext>, harts: usize) -> Self {
        Self {
            ctx,
            step: 0,
            failures: BTreeMap::new(),
            harts: vec![HartTrack::default(); harts],
            isolation: Arc::new(IsolationConfig::default()),
            seed_locked: false,
            boot_step: None,
            created: Arc::new(BTreeMap::new()),
            init_created: 0,
            page_owner: BTreeMap::new(),
            serial_owner: BTreeMap::new(),
            promoted: BTreeMap::new(),
            verified: Arc::new(Mutex::new(HashSet::new())),
            key_checked: None,
        }
    }

    pub fn context(&self) -> &OracleContext {
        &self.ctx
    }

    /// Tags later counterexamples with scenario step `step`.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    fn fail(&mut self, id: &str, seq: Option<u64>, detail: impl FnOnce() -> String) {
        let id = verdict_id(id);
        if !self.failures.contains_key(id) {
            self.failures.insert(id, Counterexample { step: self.step, seq, detail: detail() });
        }
    }

    pub fn failed_ids(&self) -> Vec<&'static str> {
        VERDICT_IDS.iter().copied().filter(|id| self.failures.contains_key(id)).collect()
    }

    pub fn any_failed(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        VERDICT_IDS
            .iter()
            .map(|id| match self.failures.get(id) {
                Some(c) => Verdict::fail(id, c.clone()),
                None => Verdict::pass(id),
            })
            .collect()
    }

    /// The monitor returned an error instead of leaving through an exit node.
    pub fn monitor_failed(&mut self, detail: &str) {
        self.fail("FSM.Path", None, || format!("monitor did not exit: {detail}"));
    }

    pub fn observe_all(&mut self, events: &[TraceEvent]) {
        for e in events {
            self.observe(e);
        }
    }

    pub fn observe(&mut self, e: &TraceEvent) {
        let seq = Some(e.seq);
        let control = self.ctx.layout.control;

        if let (Some(h), Some(p)) = (e.hart, e.privilege) {
            if let Some(prev) = self.harts[h].privilege {
                let delivered = matches!(e.kind, EventKind::DeliverIrq { to, .. } if e.is_ok() && to == p);
                if p > prev && !delivered {
                    self.fail("HW.PrivMonotonic", seq, || format!("hart {h} rose from {prev} to {p} without a trap"));
                }
            }
            self.harts[h].privilege = Some(p);
            if p < PrivilegeLevel::Highest && !self.seed_locked {
                self.fail("S.Init.2", seq, || format!("hart {h} left the monitor before the seed was locked"));
            }
        }
        if let Some(h) = e.hart {
            if self.harts[h].window.is_some() && e.interrupts_enabled == Some(true) {
                self.fail("I.FSM.1", seq, || format!("interrupts enabled inside the monitor on hart {h}"));
            }
        }
        let below_highest = e.privilege.is_some_and(|p| p < PrivilegeLevel::Highest);
        let announced = e.hart.and_then(|h| self.harts[h].announced.take());

        match &e.kind {
            EventKind::Read { addr, len } | EventKind::Write { addr, len } if e.is_ok() => {
                let write = matches!(e.kind, EventKind::Write { .. });
                self.check_access(e, AddrRange::new(*addr, *len), write, announced);
            }
            EventKind::Cas { addr, .. } if e.is_ok() => {
                self.check_access(e, AddrRange::new(*addr, WORD_BYTES), true, announced);
            }
            EventKind::SetIsolation { config, .. } if e.is_ok() => self.isolation = config.clone(),
            EventKind::ConfigureIrq { irq, target, handler } if e.is_ok() => {
                if let Some(h) = e.hart {
                    self.harts[h].routes.insert(*irq, Route { target: *target, handler: *handler });
                }
            }
            EventKind::LockSeed => self.seed_locked = true,
            EventKind::ReadSeed if e.is_ok() => {
                if self.seed_locked {
                    self.fail("HW.SeedLock", seq, || "seed read after lock".into());
                }
                if below_highest {
                    self.fail("S.Init.2", seq, || "seed read below the highest privilege".into());
                }
            }
            EventKind::BootStep { step, .. } => self.boot_step = Some(*step),
            EventKind::TokenCreate { serial, base } => {
                if self.boot_step != Some(3) {
                    self.fail("I.MT.1", seq, || format!("token {serial} created outside initialization"));
                } else if self.created.contains_key(serial) {
                    self.fail("I.MT.1", seq, || format!("token {serial} created twice"));
                } else {
                    Arc::make_mut(&mut self.created).insert(*serial, *base);
                    self.init_created += 1;
                }
            }
            EventKind::TokenAccess { serial, addr, len, .. } => {
                let range = AddrRange::new(*addr, *len);
                match self.created.get(serial) {
                    Some(base) if AddrRange::page_of(*base).contains_range(&range) => {}
                    _ => self.fail("I.MT.3", seq, || format!("token {serial} cannot cover {range}")),
                }
                if let Some(h) = e.hart {
                    self.harts[h].announced = Some((*serial, range));
                }
            }
            EventKind::PageTableCreate { owner, serial, base } => self.claim(seq, *owner, *serial, *base),
            EventKind::TokenMap { serial, base, owner, .. } => self.claim(seq, *owner, *serial, *base),
            EventKind::TokenUnmap { serial, base, .. } | EventKind::TokenRelease { serial, base } => {
                self.page_owner.remove(base);
                self.serial_owner.remove(serial);
            }
            EventKind::TrapEntry { node, interrupted, save_addr, .. } => {
                let slot = AddrRange::new(*save_addr, crate::fsm::DomainContext::BYTES);
                if !control.contains_range(&slot) {
                    self.fail("I.FSM.4", seq, || format!("context saved at {save_addr} outside control data"));
                }
                let Some(h) = e.hart else { return };
                let expected = if interrupted.is_confidential() { FsmNode::CEnter } else { FsmNode::NcEnter };
                if self.harts[h].window.is_some() {
                    self.fail("FSM.Path", seq, || format!("trap entry on hart {h} inside the monitor"));
                }
                if *node != expected {
                    self.fail("FSM.Path", seq, || format!("trap from {interrupted} entered at {node}"));
                }
                let start_routes = self.harts[h].routes.clone();
                self.harts[h].window = Some(Window {
                    node: *node,
                    interrupted: *interrupted,
                    start_routes,
                    pending: None,
                    exited: false,
                    rejected: false,
                    lifecycle: Vec::new(),
                });
            }
            EventKind::Node { node } => self.node(e, *node),
            EventKind::Transition { direction, actions, .. } => self.transition(e, *direction, actions),
            EventKind::Exit { node, target, restore_addr } => {
                let slot = AddrRange::new(*restore_addr, crate::fsm::DomainContext::BYTES);
                if !control.contains_range(&slot) {
                    self.fail("I.FSM.4", seq, || format!("context restored from {restore_addr} outside control data"));
                }
                let Some(w) = e.hart.and_then(|h| self.harts[h].window.as_mut()) else {
                    self.fail("FSM.Path", seq, || "exit outside the monitor".into());
                    return;
                };
                let ok = w.node.edge(*node) == Some(Direction::None)
                    && node.is_exit()
                    && (*node == FsmNode::CExit) == target.is_confidential()
                    && !w.exited;
                let from = w.node;
                w.node = *node;
                w.exited = true;
                if !ok {
                    self.fail("FSM.Path", seq, || format!("exit {from} -> {node} to {target}"));
                }
            }
            EventKind::EnterGuest { .. } if e.is_ok() => {
                if let Some(h) = e.hart {
                    self.harts[h].privilege = Some(PrivilegeLevel::Lowest);
                }
            }
            EventKind::ReturnFromTrap { to, enable_interrupts, taint, .. } if e.is_ok() => {
                if let Some(h) = e.hart {
                    self.harts[h].privilege = Some(*to);
                }
                if let Some(owner) = taint {
                    self.fail("I.FSM.5", seq, || format!("return with microarchitectural state of {owner}"));
                }
                if !enable_interrupts {
                    self.fail("I.FSM.5", seq, || "return with interrupts disabled".into());
                }
                if let Some(h) = e.hart {
                    if let Some(w) = self.harts[h].window.take() {
                        self.close_window(e, &w);
                    }
                }
            }
            EventKind::RouteOut { call_id, whitelist, view } => self.route_out(e, *call_id, whitelist, view),
            EventKind::RouteIn { call_id, written, .. } => {
                let declared = self.ctx.calls.get(*call_id).map(|c| c.results.clone()).unwrap_or_default();
                if let Some(r) = written.iter().find(|r| !declared.contains(r)) {
                    self.fail("P2", seq, || format!("reply to {call_id:#x} wrote undeclared x{r}"));
                }
            }
            EventKind::Lifecycle { domain, .. } => {
                if let Some(w) = e.hart.and_then(|h| self.harts[h].window.as_mut()) {
                    w.lifecycle.push(*domain);
                }
            }
            EventKind::CallRejected { .. } => {
                if let Some(w) = e.hart.and_then(|h| self.harts[h].window.as_mut()) {
                    w.rejected = true;
                }
            }
            EventKind::Promote { vm, cvm, digest } => {
                match self.ctx.vm_digests.get(vm) {
                    Some(d) if d == digest => {}
                    _ => self.fail("ATT.Sound", seq, || format!("{cvm} measured as {digest}")),
                }
                self.promoted.insert(*cvm, digest.clone());
            }
            EventKind::AttestIssued { cvm, measurement } => {
                if self.promoted.get(cvm) != Some(measurement) {
                    self.fail("ATT.Sound", seq, || format!("report for {cvm} carries {measurement}"));
                }
            }
            _ => {}
        }
    }

    fn claim(&mut self, seq: Option<u64>, owner: DomainId, serial: TokenSerial, base: PhysAddr) {
        if let Some(other) = self.page_owner.get(&base).filter(|o| **o != owner) {
            let other = *other;
            self.fail("S.MT.1", seq, || format!("page {base} mapped by {other} and {owner}"));
        }
        if let Some(other) = self.serial_owner.get(&serial).filter(|o| **o != owner) {
            let other = *other;
            self.fail("S.MT.1", seq, || format!("token {serial} held by {other} and {owner}"));
        }
        self.page_owner.insert(base, owner);
        self.serial_owner.insert(serial, owner);
    }

    fn check_access(&mut self, e: &TraceEvent, range: AddrRange, write: bool, announced: Option<(TokenSerial, AddrRange)>) {
        let seq = Some(e.seq);
        let ctx = self.ctx.clone();
        let l = &ctx.layout;
        let at_highest = e.privilege == Some(PrivilegeLevel::Highest);
        let dma = e.hart.is_none() && e.domain == DomainId::DMA;
        let untrusted = !at_highest && (e.privilege.is_some() || dma);

        if untrusted && !self.isolation.permits(e.domain, &range, write) {
            self.fail("HW.IsolationSound", seq, || format!("{} reached {range} against the isolation config", e.domain));
        }
        if at_highest && write && self.isolation.read_only.iter().any(|r| r.overlaps(&range)) {
            self.fail("HW.IsolationSound", seq, || format!("write to read-only {range}"));
        }
        if untrusted && write && (range.overlaps(&l.sm_region()) || range.overlaps(&l.control)) {
            self.fail("S.Init.1", seq, || format!("{} wrote monitor memory at {range}", e.domain));
        }
        if untrusted && !e.domain.is_confidential() {
            if let Some(owner) = pages_of(&range).find_map(|p| self.page_owner.get(&p)).copied() {
                self.fail("P1", seq, || format!("{} accessed {range} private to {owner}", e.domain));
            }
        }
        if range.overlaps(&l.pool) {
            if at_highest {
                let joined = announced.is_some_and(|(_, r)| r.contains_range(&range));
                if !joined {
                    self.fail("I.MT.3", seq, || format!("monitor touched pool {range} without a token"));
                }
            } else if e.domain.is_confidential() {
                let owned = pages_of(&range).all(|p| self.page_owner.get(&p) == Some(&e.domain));
                if !owned {
                    self.fail("I.MT.3", seq, || format!("{} touched pool {range} it does not map", e.domain));
                }
            }
        }
    }

    fn node(&mut self, e: &TraceEvent, node: FsmNode) {
        let seq = Some(e.seq);
        let Some(w) = e.hart.and_then(|h| self.harts[h].window.as_mut()) else {
            self.fail("FSM.Path", seq, || format!("node {node} outside the monitor"));
            return;
        };
        let from = w.node;
        let edge = if w.exited { None } else { from.edge(node) };
        let ok = match edge {
            None => false,
            Some(Direction::None) => !node.is_exit(),
            Some(d) => w.pending.take() == Some(d),
        };
        w.node = node;
        if !ok {
            self.fail("FSM.Path", seq, || format!("edge {from} -> {node}"));
        }
    }

    fn transition(&mut self, e: &TraceEvent, direction: Direction, actions: &BTreeSet<TransitionAction>) {
        let seq = Some(e.seq);
        let Some(h) = e.hart else { return };
        let Some(w) = self.harts[h].window.as_mut() else {
            self.fail("FSM.Path", seq, || "transition outside the monitor".into());
            return;
        };
        w.pending = Some(direction);
        let start_routes = w.start_routes.clone();
        let interrupted = w.interrupted;
        let missing: Vec<TransitionAction> = TransitionAction::required(direction).difference(actions).copied().collect();
        match direction {
            Direction::NcToC => {
                if !missing.is_empty() {
                    self.fail("I.FSM.2", seq, || format!("NcToC without {missing:?}"));
                }
                let pinned = [IrqId::SM_CALL, IrqId::SM_SOFT];
                let escaped: Vec<IrqId> = self.harts[h]
                    .routes
                    .iter()
                    .filter(|(irq, r)| !pinned.contains(irq) && r.target != PrivilegeLevel::Highest)
                    .map(|(irq, _)| *irq)
                    .collect();
                if !escaped.is_empty() {
                    self.fail("I.FSM.2", seq, || format!("interrupts {escaped:?} still reach the hypervisor"));
                }
                self.harts[h].saved_routes = Some(start_routes);
            }
            Direction::CToNc => {
                if !missing.is_empty() {
                    self.fail("I.FSM.3", seq, || format!("CToNc without {missing:?}"));
                }
                let saved = self.harts[h].saved_routes.take();
                if saved.as_ref() != Some(&self.harts[h].routes) {
                    self.fail("I.FSM.3", seq, || format!("hypervisor routes on hart {h} not restored"));
                }
                if !self.isolation.grants_of(interrupted).is_empty() {
                    self.fail("I.FSM.3", seq, || format!("{interrupted} keeps its grants after leaving"));
                }
            }
            Direction::None => {}
        }
    }

    fn route_out(&mut self, e: &TraceEvent, call_id: u64, whitelist: &[u8], view: &[u64]) {
        let seq = Some(e.seq);
        let exit_reg = self.ctx.calls.exit_reason_register();
        let declared = self.ctx.calls.get(call_id).map(|c| c.args.clone());
        if declared.as_deref() != Some(whitelist) {
            self.fail("I.FSM.6", seq, || format!("exit {call_id:#x} exposes {whitelist:?}, declared {declared:?}"));
        }
        if view.len() != NUM_GPRS {
            self.fail("I.FSM.6", seq, || format!("view of {} registers", view.len()));
            return;
        }
        for (i, w) in view.iter().enumerate() {
            let allowed = i != 0 && whitelist.contains(&(i as u8));
            let ok = if i == exit_reg { *w == call_id } else { allowed || *w == 0 };
            if !ok {
                self.fail("I.FSM.6", seq, || format!("exit {call_id:#x} exposes x{i}"));
                return;
            }
        }
    }

    fn close_window(&mut self, e: &TraceEvent, w: &Window) {
        let seq = Some(e.seq);
        if !w.exited {
            self.fail("FSM.Path", seq, || format!("left the monitor from {} without an exit node", w.node));
        }
        if w.rejected && !w.lifecycle.is_empty() {
            let changed = w.lifecycle.clone();
            self.fail("P4", seq, || format!("rejected call changed lifecycle of {changed:?}"));
        }
        if w.interrupted.is_confidential() {
            if let Some(other) = w.lifecycle.iter().find(|d| **d != w.interrupted) {
                let (other, caller) = (*other, w.interrupted);
                self.fail("P4", seq, || format!("{caller} changed the lifecycle of {other}"));
            }
        }
    }

    /// State checks against a snapshot taken between steps.
    pub fn check_snapshot(&mut self, s: &Snapshot) {
        let l = self.ctx.layout.clone();
        let sm_region = l.sm_region();

        // I.Init.1
        for (h, hart) in s.harts.iter().enumerate() {
            if hart.privilege == PrivilegeLevel::Highest && (hart.domain != DomainId::SM || !l.sm_code.contains(hart.pc)) {
                self.fail("I.Init.1", None, || format!("hart {h} runs {} at the highest privilege", hart.domain));
            }
            if let Some((irq, r)) =
                hart.routes.iter().find(|(_, r)| r.target == PrivilegeLevel::Highest && !l.sm_code.contains(r.handler))
            {
                self.fail("I.Init.1", None, || format!("hart {h} irq {irq} enters the highest privilege at {}", r.handler));
            }
        }

        // I.Init.2
        let protected = [sm_region, l.control];
        for (d, ranges) in &s.isolation.grants {
            if *d != DomainId::SM && ranges.iter().any(|r| protected.iter().any(|p| p.overlaps(r))) {
                self.fail("I.Init.2", None, || format!("{d} granted monitor memory"));
            }
        }
        if s.isolation.shared.iter().any(|sp| protected.iter().any(|p| p.overlaps(&sp.range))) {
            self.fail("I.Init.2", None, || "monitor memory shared".into());
        }

        // I.Init.3
        if !protected.iter().all(|r| covered(&s.isolation.confidential, r)) {
            self.fail("I.Init.3", None, || "monitor memory not confidential".into());
        }

        // I.Init.4
        if !s.pinned.contains(&IrqId::SM_CALL) {
            self.fail("I.Init.4", None, || "monitor call not pinned".into());
        }
        for (h, hart) in s.harts.iter().enumerate() {
            for irq in &s.pinned {
                let want = Route { target: PrivilegeLevel::Highest, handler: l.sm_vector() };
                if hart.routes.get(irq) != Some(&want) {
                    self.fail("I.Init.4", None, || format!("pinned irq {irq} on hart {h} misrouted"));
                }
            }
        }

        // I.Init.5
        if !s.seed_locked {
            self.fail("I.Init.5", None, || "endorsement seed unlocked".into());
        }
        if !l.control.contains_range(&l.key_range()) {
            self.fail("I.Init.5", None, || "attestation key outside control data".into());
        }
        if self.key_checked != Some(s.stored_key) {
            let derived = AttestationKey::from_secret(s.stored_key, KEY_LABEL).public();
            if derived != self.ctx.boot_public {
                self.fail("I.Init.5", None, || "stored key does not match the boot key".into());
            } else {
                self.key_checked = Some(s.stored_key);
            }
        }

        // I.FSM.2 while a CVM runs.
        for (h, hart) in s.harts.iter().enumerate() {
            if hart.domain.is_confidential() {
                if let Some((irq, _)) = hart.routes.iter().find(|(_, r)| r.target != PrivilegeLevel::Highest) {
                    self.fail("I.FSM.2", None, || format!("irq {irq} escapes {} on hart {h}", hart.domain));
                }
            }
        }

        // I.MT.1
        if s.total_created != self.init_created {
            let (now, then) = (s.total_created, self.init_created);
            self.fail("I.MT.1", None, || format!("{now} tokens exist, {then} were created at boot"));
        }

        // I.MT.2 and S.MT.1
        for (i, a) in s.tokens.iter().enumerate() {
            if self.created.get(&a.serial) != Some(&a.base) {
                self.fail("I.MT.2", None, || format!("token {} claims page {}", a.serial, a.base));
            }
            for b in &s.tokens[i + 1..] {
                if a.serial != b.serial && a.base == b.base {
                    self.fail("I.MT.2", None, || format!("tokens {} and {} share page {}", a.serial, b.serial, a.base));
                }
                if a.base == b.base {
                    if let (Some(x), Some(y)) = (a.holder.owner(), b.holder.owner()) {
                        if x != y {
                            self.fail("S.MT.1", None, || format!("page {} held by {x} and {y}", a.base));
                        }
                    }
                }
            }
            if matches!(a.holder, Holder::Free) && self.page_owner.contains_key(&a.base) {
                // The ledger still maps a page the pool considers free.
                let base = a.base;
                self.fail("S.MT.1", None, || format!("free page {base} still mapped"));
            }
        }

        // P1
        for c in s.cvms.iter().filter(|c| c.lifecycle != crate::sm::Lifecycle::Terminated) {
            for p in &c.private_pages {
                let page = AddrRange::page_of(*p);
                let open = [DomainId::HYPERVISOR, DomainId::DMA].into_iter().find(|d| s.isolation.permits(*d, &page, false));
                if let Some(d) = open {
                    self.fail("P1", None, || format!("{d} may read {} private page {p}", c.id));
                }
            }
        }

        // P3
        if let Some(p) = s.dirty_free_pages.first() {
            let p = *p;
            self.fail("P3", None, || format!("free page {p} not zero"));
        }

        // ATT.Sound
        for (cvm, report) in &s.reports {
            let known = self.verified.lock().expect("cache lock").contains(&report.signature);
            let valid = known || verify_report(&self.ctx.boot_public, report);
            if valid && !known {
                self.verified.lock().expect("cache lock").insert(report.signature);
            }
            let measured = self.promoted.get(cvm) == Some(&report.measurement.to_hex());
            if !valid || !measured || report.boot_chain != self.ctx.boot_chain {
                self.fail("ATT.Sound", None, || format!("stored report for {cvm} does not verify"));
            }
        }
    }
}

/// Checks a complete trace and the snapshots taken along it. Snapshot `i`
/// is evaluated after the events with `seq < marks[i]`.
pub fn invariant_oracle(
    ctx: Arc<OracleContext>,
    harts: usize,
    trace: &[TraceEvent],
    snapshots: &[(u64, Snapshot)],
) -> Vec<Verdict> {
    let mut checker = Checker::with_context(ctx, harts);
    let mut i = 0;
    for (step, (mark, snap)) in snapshots.iter().enumerate() {
        checker.set_step(step);
        while i < trace.len() && trace[i].seq < *mark {
            checker.observe(&trace[i]);
            i += 1;
        }
        checker.check_snapshot(snap);
    }
    checker.observe_all(&trace[i..]);
    checker.verdicts()
}
