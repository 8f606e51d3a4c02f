// SPDX-License-Identifier: Apache-2.0

//! Runtime state machine of the security monitor.
//!
//! Every trap into the monitor walks one path through eight nodes split in a
//! non-confidential (NC) and a confidential (C) half:
//!
//! ```text
//! NcEnter -> NcRoute -> NcTransform -> NcExit
//!               \
//!                `--(NcToC)--> CTransform -> CExit
//! CEnter  -> CRoute  -> CTransform  -> CExit
//!               \
//!                `--(CToNc)--> NcTransform -> NcExit
//! ```
//!
//! Enter nodes save the interrupted context into the control data region,
//! exit nodes restore it, clear microarchitectural state and return with
//! interrupts enabled. Crossing between halves reconfigures isolation and
//! interrupt routing. Re-entry happens only through a fresh trap.

use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::hw::{DomainId, IrqId, PhysAddr, Platform, PrivilegeLevel, ReturnTarget, Route};
use crate::sm::calls::CallTable;
use crate::sm::{CallEntry, Mutation, SecurityMonitor, SmError};
use crate::trace::{EventKind, Outcome};
use crate::{NUM_GPRS, WORD_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FsmNode {
    NcEnter,
    NcRoute,
    NcTransform,
    NcExit,
    CEnter,
    CRoute,
    CTransform,
    CExit,
}

impl FsmNode {
    pub const ALL: [FsmNode; 8] = [
        Self::NcEnter,
        Self::NcRoute,
        Self::NcTransform,
        Self::NcExit,
        Self::CEnter,
        Self::CRoute,
        Self::CTransform,
        Self::CExit,
    ];

    pub fn is_confidential_part(self) -> bool {
        matches!(self, Self::CEnter | Self::CRoute | Self::CTransform | Self::CExit)
    }

    pub fn is_exit(self) -> bool {
        matches!(self, Self::NcExit | Self::CExit)
    }

    /// Edge of the node graph, with the domain transition it requires.
    pub fn edge(self, to: FsmNode) -> Option<Direction> {
        use FsmNode::*;
        match (self, to) {
            (NcEnter, NcRoute) | (NcRoute, NcTransform) | (NcTransform, NcExit) => Some(Direction::None),
            (CEnter, CRoute) | (CRoute, CTransform) | (CTransform, CExit) => Some(Direction::None),
            (NcRoute, CTransform) => Some(Direction::NcToC),
            (CRoute, NcTransform) => Some(Direction::CToNc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NcEnter => "nc_enter",
            Self::NcRoute => "nc_route",
            Self::NcTransform => "nc_transform",
            Self::NcExit => "nc_exit",
            Self::CEnter => "c_enter",
            Self::CRoute => "c_route",
            Self::CTransform => "c_transform",
            Self::CExit => "c_exit",
        }
    }
}

impl fmt::Display for FsmNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    None,
    NcToC,
    CToNc,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::None => "none",
            Direction::NcToC => "nc_to_c",
            Direction::CToNc => "c_to_nc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransitionAction {
    IsolationReconfig,
    SaveHypervisorState,
    IrqRetargetToSm,
    IsolationDeny,
    RestoreState,
    RestoreIrq,
}

impl TransitionAction {
    /// Actions a transition in `direction` must carry.
    pub fn required(direction: Direction) -> BTreeSet<TransitionAction> {
        use TransitionAction::*;
        match direction {
            Direction::None => BTreeSet::new(),
            Direction::NcToC => [IsolationReconfig, SaveHypervisorState, IrqRetargetToSm].into(),
            Direction::CToNc => [IsolationDeny, RestoreState, RestoreIrq].into(),
        }
    }
}

impl fmt::Display for TransitionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransitionAction::IsolationReconfig => "isolation_reconfig",
            TransitionAction::SaveHypervisorState => "save_hv_state",
            TransitionAction::IrqRetargetToSm => "irq_to_sm",
            TransitionAction::IsolationDeny => "isolation_deny",
            TransitionAction::RestoreState => "restore_state",
            TransitionAction::RestoreIrq => "restore_irq",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionEvent {
    pub from: FsmNode,
    pub to: FsmNode,
    pub direction: Direction,
    pub actions: BTreeSet<TransitionAction>,
}

/// Register state of a domain as stored in the control data region.
///
/// Serialized as 37 little-endian words: `x0..x31`, `pc`, interrupt enable,
/// privilege (0 lowest, 1 middle, 2 highest), domain id, guest root (0 when
/// absent).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DomainContext {
    pub domain: DomainId,
    pub gprs: [u64; NUM_GPRS],
    pub pc: PhysAddr,
    pub interrupts_enabled: bool,
    pub privilege: PrivilegeLevel,
    pub guest_root: Option<PhysAddr>,
}

impl DomainContext {
    pub const WORDS: usize = NUM_GPRS + 5;
    pub const BYTES: u64 = Self::WORDS as u64 * WORD_BYTES;

    /// Byte offset of register `index` inside the serialized context.
    pub fn gpr_offset(index: usize) -> u64 {
        index as u64 * WORD_BYTES
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tail = [
            self.pc.as_u64(),
            u64::from(self.interrupts_enabled),
            privilege_code(self.privilege),
            u64::from(self.domain.raw()),
            self.guest_root.map_or(0, PhysAddr::as_u64),
        ];
        self.gprs.iter().chain(tail.iter()).flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SmError> {
        if bytes.len() != Self::BYTES as usize {
            return Err(SmError::Config(format!("context record of {} bytes", bytes.len())));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8-byte chunk"));
        let mut gprs = [0u64; NUM_GPRS];
        for (i, g) in gprs.iter_mut().enumerate() {
            *g = word(i);
        }
        let code = word(NUM_GPRS + 2);
        let privilege = privilege_from_code(code).ok_or_else(|| SmError::Config(format!("bad privilege code {code}")))?;
        let root = word(NUM_GPRS + 4);
        Ok(Self {
            gprs,
            pc: PhysAddr::new(word(NUM_GPRS)),
            interrupts_enabled: word(NUM_GPRS + 1) != 0,
            privilege,
            domain: DomainId::from_raw(word(NUM_GPRS + 3) as u32),
            guest_root: (root != 0).then_some(PhysAddr::new(root)),
        })
    }
}

/// Register file filtered by a call's whitelist. Positions outside
/// `visible` hold the sanitization value, zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RegisterView {
    pub words: [u64; NUM_GPRS],
    pub visible: u32,
}

impl RegisterView {
    pub fn is_visible(&self, index: usize) -> bool {
        self.visible & (1 << index) != 0
    }

    pub fn visible_positions(&self) -> Vec<u8> {
        (0..NUM_GPRS as u8).filter(|i| self.is_visible(*i as usize)).collect()
    }

    /// Unfiltered view. Only the register-leak mutation produces one.
    pub fn everything(source: &[u64; NUM_GPRS]) -> Self {
        Self { words: *source, visible: u32::MAX }
    }

    /// Writes the visible words into `target`, leaving the rest untouched.
    pub fn write_into(&self, target: &mut [u64; NUM_GPRS]) {
        for (i, t) in target.iter_mut().enumerate().skip(1) {
            if self.is_visible(i) {
                *t = self.words[i];
            }
        }
    }
}

fn mask(positions: &[u8]) -> u32 {
    positions.iter().fold(0u32, |m, p| m | (1 << p))
}

/// Filters `source` for a domain crossing.
///
/// Outbound (`CToNc`) keeps the call's argument registers and puts the call
/// id in the exit reason register. Inbound (`NcToC`) keeps only the result
/// registers.
pub fn apply_state_transformation(
    table: &CallTable,
    call_id: u64,
    source: &[u64; NUM_GPRS],
    direction: Direction,
) -> Result<RegisterView, SmError> {
    let entry = table.get(call_id).ok_or(SmError::UndeclaredCall(call_id))?;
    transform_entry(entry, table.exit_reason_register(), source, direction)
}

pub(crate) fn transform_entry(
    entry: &CallEntry,
    exit_reason_register: usize,
    source: &[u64; NUM_GPRS],
    direction: Direction,
) -> Result<RegisterView, SmError> {
    let positions: &[u8] = match direction {
        Direction::CToNc => &entry.args,
        Direction::NcToC => &entry.results,
        Direction::None => return Err(SmError::Config("transformation needs a direction".into())),
    };
    let mut view = RegisterView { words: [0; NUM_GPRS], visible: mask(positions) };
    for p in positions {
        view.words[*p as usize] = source[*p as usize];
    }
    if direction == Direction::CToNc {
        view.visible |= 1 << exit_reason_register;
        view.words[exit_reason_register] = entry.id;
    }
    Ok(view)
}

/// Where a handled trap left the hart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExitRecord {
    pub node: FsmNode,
    pub target: DomainId,
}

/// Per-hart monitor bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub(crate) struct HartFsm {
    pub node: Option<FsmNode>,
    /// Hypervisor context and routes saved by an NcToC transition.
    pub hv_saved: bool,
    pub cvm: Option<DomainId>,
}

/// Interrupts the monitor takes over while a CVM runs.
pub const RETARGETED_IRQS: [IrqId; 3] = [IrqId::TIMER, IrqId::EXTERNAL, IrqId::GUEST_PAGE_FAULT];

fn route_fingerprint(platform: &Platform, hart: usize) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (irq, route) in platform.irqc().table(hart) {
        if !platform.irqc().is_pinned(*irq) {
            (irq, route).hash(&mut h);
        }
    }
    h.finish()
}

impl SecurityMonitor {
    pub(crate) fn enter_node(&mut self, platform: &mut Platform, hart: usize, node: FsmNode) {
        self.harts[hart].node = Some(node);
        platform.record(Some(hart), EventKind::Node { node }, Outcome::Ok);
    }

    /// Saves the interrupted context and picks the half of the graph.
    pub fn trap_entry(&mut self, platform: &mut Platform, hart: usize) -> Result<FsmNode, SmError> {
        let h = platform.hart(hart);
        let trap = h.trap.ok_or(SmError::NoTrap(hart))?;
        if !trap.cause.is_known() {
            return Err(SmError::UnknownCause(trap.cause));
        }
        let interrupted = trap.from_domain;
        let ctx = DomainContext {
            domain: interrupted,
            gprs: *platform.gprs(hart),
            pc: trap.epc,
            interrupts_enabled: trap.from_interrupts_enabled,
            privilege: trap.from_privilege,
            guest_root: h.guest_root,
        };
        let (node, save_addr) = if interrupted.is_confidential() {
            (FsmNode::CEnter, self.cvm_slot_addr(interrupted)?)
        } else {
            (FsmNode::NcEnter, self.layout.hv_ctx_slot(hart))
        };
        platform.record(Some(hart), EventKind::TrapEntry { cause: trap.cause, node, interrupted, save_addr }, Outcome::Ok);
        platform.write_block(hart, save_addr, &ctx.to_bytes())?;
        self.harts[hart].node = Some(node);
        Ok(node)
    }

    /// Hands the hart from the hypervisor to `target`: saves the hypervisor's
    /// interrupt routes, takes every maskable interrupt to the monitor and
    /// grants the CVM its pages.
    pub fn transition_nc_to_c(
        &mut self,
        platform: &mut Platform,
        hart: usize,
        target: DomainId,
    ) -> Result<TransitionEvent, SmError> {
        let from = self.harts[hart]
            .node
            .filter(|n| !n.is_confidential_part())
            .ok_or_else(|| SmError::Config(format!("hart {hart} is not in the non-confidential part")))?;
        let domain = self.domains.get(&target).filter(|d| d.is_cvm()).ok_or(SmError::UnknownDomain(target))?;
        if !domain.is_runnable() {
            return Err(SmError::DomainNotRunnable(target));
        }
        if let Some(other) = domain.busy_on {
            return Err(SmError::DomainBusy(target, other));
        }

        // Hypervisor registers were saved at trap entry; keep them.
        self.harts[hart].hv_saved = true;

        let mut slot = Vec::with_capacity(RETARGETED_IRQS.len() * 16);
        for irq in RETARGETED_IRQS {
            let (present, target, handler) = match platform.irqc().route(hart, irq) {
                Some(r) => (1u64, privilege_code(r.target), r.handler.as_u64()),
                None => (0, 0, 0),
            };
            slot.extend_from_slice(&(present | target << 8).to_le_bytes());
            slot.extend_from_slice(&handler.to_le_bytes());
        }
        platform.write_block(hart, self.layout.irq_slot(hart), &slot)?;
        for irq in RETARGETED_IRQS {
            platform.configure_interrupt(hart, irq, PrivilegeLevel::Highest, self.layout.sm_vector())?;
        }

        self.domains.get_mut(&target).expect("checked above").busy_on = Some(hart);
        self.harts[hart].cvm = Some(target);
        self.apply_isolation(platform, hart)?;

        let actions = TransitionAction::required(Direction::NcToC);
        platform.record(
            Some(hart),
            EventKind::Transition {
                direction: Direction::NcToC,
                actions: actions.clone(),
                irq_fingerprint: route_fingerprint(platform, hart),
            },
            Outcome::Ok,
        );
        self.enter_node(platform, hart, FsmNode::CTransform);
        Ok(TransitionEvent { from, to: FsmNode::CTransform, direction: Direction::NcToC, actions })
    }

    /// Hands the hart back to the hypervisor: revokes the CVM's grants and
    /// restores the routes saved by the matching NcToC transition.
    pub fn transition_c_to_nc(&mut self, platform: &mut Platform, hart: usize) -> Result<TransitionEvent, SmError> {
        if !self.harts[hart].hv_saved {
            return Err(SmError::NoSavedState(hart));
        }
        let from = self.harts[hart].node.unwrap_or(FsmNode::CRoute);
        if let Some(cvm) = self.harts[hart].cvm.take() {
            if let Some(d) = self.domains.get_mut(&cvm) {
                d.busy_on = None;
            }
        }
        self.apply_isolation(platform, hart)?;

        let mut actions: BTreeSet<TransitionAction> = [TransitionAction::IsolationDeny, TransitionAction::RestoreState].into();
        if !self.has(Mutation::SkipIrqRestore) {
            let mut slot = vec![0u8; RETARGETED_IRQS.len() * 16];
            platform.read_block(hart, self.layout.irq_slot(hart), &mut slot)?;
            for (irq, route) in decode_irq_slot(&slot) {
                if let Some(r) = route {
                    platform.configure_interrupt(hart, irq, r.target, r.handler)?;
                }
            }
            actions.insert(TransitionAction::RestoreIrq);
        }
        self.harts[hart].hv_saved = false;

        platform.record(
            Some(hart),
            EventKind::Transition {
                direction: Direction::CToNc,
                actions: actions.clone(),
                irq_fingerprint: route_fingerprint(platform, hart),
            },
            Outcome::Ok,
        );
        self.enter_node(platform, hart, FsmNode::NcTransform);
        Ok(TransitionEvent { from, to: FsmNode::NcTransform, direction: Direction::CToNc, actions })
    }

    /// Restores `target`'s saved context and leaves the monitor.
    pub fn exit_to_domain(&mut self, platform: &mut Platform, hart: usize, target: DomainId) -> Result<ExitRecord, SmError> {
        let current = self.harts[hart].node;
        let (node, restore_addr) = match (current, target.is_confidential()) {
            (Some(FsmNode::CTransform), true) => (FsmNode::CExit, self.cvm_slot_addr(target)?),
            (Some(FsmNode::NcTransform), false) if target != DomainId::SM => (FsmNode::NcExit, self.layout.hv_ctx_slot(hart)),
            _ => return Err(SmError::WrongExitNode { node: current, target }),
        };
        let mut bytes = vec![0u8; DomainContext::BYTES as usize];
        platform.read_block(hart, restore_addr, &mut bytes)?;
        let ctx = DomainContext::from_bytes(&bytes)?;
        if ctx.domain != target {
            return Err(SmError::Config(format!("slot at {restore_addr} holds {} not {target}", ctx.domain)));
        }
        platform.load_gprs(hart, &ctx.gprs);
        platform.record(Some(hart), EventKind::Exit { node, target, restore_addr }, Outcome::Ok);
        self.harts[hart].node = Some(node);
        self.unlock(platform, hart)?;
        if !self.has(Mutation::SkipMicroarchClear) {
            platform.clear_microarch(hart)?;
        }
        platform.return_from_trap(
            hart,
            ReturnTarget {
                privilege: ctx.privilege,
                domain: target,
                pc: ctx.pc,
                enable_interrupts: true,
                guest_root: ctx.guest_root,
            },
        )?;
        Ok(ExitRecord { node, target })
    }
}

fn privilege_code(p: PrivilegeLevel) -> u64 {
    match p {
        PrivilegeLevel::Lowest => 0,
        PrivilegeLevel::Middle => 1,
        PrivilegeLevel::Highest => 2,
    }
}

fn privilege_from_code(code: u64) -> Option<PrivilegeLevel> {
    match code {
        0 => Some(PrivilegeLevel::Lowest),
        1 => Some(PrivilegeLevel::Middle),
        2 => Some(PrivilegeLevel::Highest),
        _ => None,
    }
}

/// Routes held in an irq slot: per retargeted interrupt a flags word
/// (bit 0 present, bits 8.. privilege code) and a handler word.
pub(crate) fn decode_irq_slot(bytes: &[u8]) -> Vec<(IrqId, Option<Route>)> {
    RETARGETED_IRQS
        .into_iter()
        .enumerate()
        .map(|(i, irq)| {
            let flags = u64::from_le_bytes(bytes[i * 16..i * 16 + 8].try_into().expect("8 bytes"));
            let handler = u64::from_le_bytes(bytes[i * 16 + 8..i * 16 + 16].try_into().expect("8 bytes"));
            let target = privilege_from_code(flags >> 8).unwrap_or(PrivilegeLevel::Highest);
            (irq, (flags & 1 != 0).then_some(Route { target, handler: PhysAddr::new(handler) }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> CallTable {
        CallTable::default()
    }

    #[test]
    fn graph_edges() {
        use FsmNode::*;
        assert_eq!(NcRoute.edge(CTransform), Some(Direction::NcToC));
        assert_eq!(CRoute.edge(NcTransform), Some(Direction::CToNc));
        assert_eq!(NcTransform.edge(CExit), None);
        assert_eq!(CTransform.edge(NcExit), None);
        assert_eq!(NcExit.edge(NcEnter), None);
        let edges = FsmNode::ALL.iter().flat_map(|a| FsmNode::ALL.iter().map(move |b| (a, b)));
        assert_eq!(edges.filter(|(a, b)| a.edge(**b).is_some()).count(), 8);
    }

    #[test]
    fn two_argument_hypercall_shows_two_registers_and_reason() {
        let mut src = [0u64; NUM_GPRS];
        for (i, w) in src.iter_mut().enumerate() {
            *w = 0x1000 + i as u64;
        }
        let view = apply_state_transformation(&table(), 0x11, &src, Direction::CToNc).unwrap();
        assert_eq!(view.visible_positions(), vec![5, 10, 11]);
        assert_eq!(view.words[10], src[10]);
        assert_eq!(view.words[11], src[11]);
        assert_eq!(view.words[5], 0x11);
        let sanitized = (0..NUM_GPRS).filter(|i| !view.is_visible(*i)).count();
        assert_eq!(sanitized, NUM_GPRS - 3);
        assert!((0..NUM_GPRS).filter(|i| !view.is_visible(*i)).all(|i| view.words[i] == 0));
    }

    #[test]
    fn inbound_writes_only_results() {
        let reply = [7u64; NUM_GPRS];
        let view = apply_state_transformation(&table(), 0x10, &reply, Direction::NcToC).unwrap();
        let mut cvm = [1u64; NUM_GPRS];
        view.write_into(&mut cvm);
        for (i, w) in cvm.iter().enumerate() {
            assert_eq!(*w, if i == 10 { 7 } else { 1 });
        }
    }

    #[test]
    fn empty_whitelist_sanitizes_everything() {
        let src = [9u64; NUM_GPRS];
        let view = apply_state_transformation(&table(), 0x30, &src, Direction::NcToC).unwrap();
        assert_eq!(view.visible, 0);
        assert_eq!(view.words, [0; NUM_GPRS]);
    }

    #[test]
    fn undeclared_call_rejected() {
        let src = [0u64; NUM_GPRS];
        assert_eq!(apply_state_transformation(&table(), 0x7777, &src, Direction::CToNc), Err(SmError::UndeclaredCall(0x7777)));
    }

    proptest! {
        #[test]
        fn context_round_trips(gprs in proptest::array::uniform32(any::<u64>()), pc in any::<u64>(),
                               ie in any::<bool>(), p in 0usize..3, dom in any::<u32>(), root in proptest::option::of(1u64..u64::MAX)) {
            let ctx = DomainContext {
                domain: DomainId::from_raw(dom),
                gprs,
                pc: PhysAddr::new(pc),
                interrupts_enabled: ie,
                privilege: PrivilegeLevel::ALL[p],
                guest_root: root.map(PhysAddr::new),
            };
            let bytes = ctx.to_bytes();
            prop_assert_eq!(bytes.len() as u64, DomainContext::BYTES);
            prop_assert_eq!(DomainContext::from_bytes(&bytes).unwrap(), ctx);
        }

        #[test]
        fn outbound_view_is_zero_outside_whitelist(src in proptest::array::uniform32(any::<u64>()), pick in 0usize..12) {
            let t = table();
            let entry = t.entries().nth(pick % t.entries().count()).unwrap().clone();
            let view = apply_state_transformation(&t, entry.id, &src, Direction::CToNc).unwrap();
            for i in 0..NUM_GPRS {
                let allowed = entry.args.contains(&(i as u8)) || i == t.exit_reason_register();
                prop_assert_eq!(view.is_visible(i), allowed);
                if !allowed { prop_assert_eq!(view.words[i], 0); }
            }
        }
    }
}
