// SPDX-License-Identifier: Apache-2.0

//! Append-only event log shared by the platform and the security monitor.
//!
//! # Line format
//!
//! Every event renders as one line of six tab-separated fields, always in
//! this order:
//!
//! ```text
//! seq  hart  domain  op  args  outcome
//! ```
//!
//! * `seq` is a decimal sequence number, strictly increasing per platform.
//! * `hart` is a decimal hart id or `-` for events without a hart (DMA,
//!   harness bookkeeping).
//! * `domain` is the security domain the hardware attributes the event to:
//!   `sm`, `hv`, `dma`, `vmN` or `cvmN`.
//! * `op` is the operation name, e.g. `read`, `set_isolation`, `token_map`.
//! * `args` is a comma-separated list of `key=value` pairs. Events with a
//!   hart always start with `priv=<L|M|H>,ie=<0|1>`, the hart's privilege and
//!   interrupt-enable bit when the event was recorded. Empty args render as
//!   `-`.
//! * `outcome` is `ok` or `err:<Code>`.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::fsm::{Direction, FsmNode, TransitionAction};
use crate::hw::{DomainId, IrqId, IsolationConfig, PhysAddr, PrivilegeLevel};
use crate::tracker::{TokenSerial, TokenStateKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Err(String),
}

impl Outcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Ok => write!(f, "ok"),
            Outcome::Err(code) => write!(f, "err:{code}"),
        }
    }
}

/// Typed payload of a trace event.
#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    // Platform.
    Reset {
        harts: usize,
        mem_pages: u64,
    },
    Read {
        addr: PhysAddr,
        len: u64,
    },
    Write {
        addr: PhysAddr,
        len: u64,
    },
    Cas {
        addr: PhysAddr,
        expected: u64,
        new: u64,
        prior: u64,
    },
    SetIsolation {
        version: u64,
        config: Arc<IsolationConfig>,
    },
    ConfigureIrq {
        irq: IrqId,
        target: PrivilegeLevel,
        handler: PhysAddr,
    },
    DeliverIrq {
        irq: IrqId,
        from: PrivilegeLevel,
        to: PrivilegeLevel,
        handler: PhysAddr,
    },
    ClearMicroarch,
    ReadSeed,
    LockSeed,
    Rng,
    ReturnFromTrap {
        to: PrivilegeLevel,
        target: DomainId,
        pc: PhysAddr,
        enable_interrupts: bool,
        taint: Option<DomainId>,
        guest_root: Option<PhysAddr>,
    },
    EnterGuest {
        target: DomainId,
        pc: PhysAddr,
    },
    // Memory tracker.
    TokenCreate {
        serial: TokenSerial,
        base: PhysAddr,
    },
    TokenAllocate {
        serial: TokenSerial,
        base: PhysAddr,
    },
    TokenTransition {
        serial: TokenSerial,
        base: PhysAddr,
        to: TokenStateKind,
    },
    TokenRelease {
        serial: TokenSerial,
        base: PhysAddr,
    },
    TokenAccess {
        serial: TokenSerial,
        addr: PhysAddr,
        len: u64,
        write: bool,
    },
    PageTableCreate {
        owner: DomainId,
        serial: TokenSerial,
        base: PhysAddr,
    },
    TokenMap {
        serial: TokenSerial,
        base: PhysAddr,
        owner: DomainId,
        guest_page: u64,
    },
    TokenUnmap {
        serial: TokenSerial,
        base: PhysAddr,
        owner: DomainId,
        guest_page: u64,
    },
    SharedMap {
        owner: DomainId,
        guest_page: u64,
        addr: PhysAddr,
    },
    SharedUnmap {
        owner: DomainId,
        guest_page: u64,
        addr: PhysAddr,
    },
    // Boot.
    BootStep {
        step: u8,
        name: &'static str,
    },
    Measured {
        component: String,
        digest: String,
    },
    BootComplete,
    // Runtime state machine.
    TrapEntry {
        cause: IrqId,
        node: FsmNode,
        interrupted: DomainId,
        save_addr: PhysAddr,
    },
    Node {
        node: FsmNode,
    },
    Transition {
        direction: Direction,
        actions: BTreeSet<TransitionAction>,
        irq_fingerprint: u64,
    },
    RouteOut {
        call_id: u64,
        whitelist: Vec<u8>,
        view: Vec<u64>,
    },
    RouteIn {
        call_id: u64,
        results: Vec<u8>,
        written: Vec<u8>,
    },
    Exit {
        node: FsmNode,
        target: DomainId,
        restore_addr: PhysAddr,
    },
    // Security monitor calls.
    Lifecycle {
        domain: DomainId,
        from: String,
        to: String,
    },
    CallRejected {
        caller: DomainId,
        call_id: u64,
        reason: String,
    },
    Promote {
        vm: DomainId,
        cvm: DomainId,
        digest: String,
    },
    Share {
        cvm: DomainId,
        guest_page: u64,
        addr: PhysAddr,
    },
    AttestIssued {
        cvm: DomainId,
        measurement: String,
    },
    // Harness.
    Adversary {
        action: String,
    },
}

fn list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(":")
}

fn hex_list(items: &[u64]) -> String {
    items.iter().map(|i| format!("{i:x}")).collect::<Vec<_>>().join(":")
}

impl EventKind {
    pub fn op(&self) -> &'static str {
        use EventKind::*;
        match self {
            Reset { .. } => "reset",
            Read { .. } => "read",
            Write { .. } => "write",
            Cas { .. } => "cas",
            SetIsolation { .. } => "set_isolation",
            ConfigureIrq { .. } => "configure_irq",
            DeliverIrq { .. } => "deliver_irq",
            ClearMicroarch => "clear_microarch",
            ReadSeed => "read_seed",
            LockSeed => "lock_seed",
            Rng => "rng",
            ReturnFromTrap { .. } => "return_from_trap",
            EnterGuest { .. } => "enter_guest",
            TokenCreate { .. } => "token_create",
            TokenAllocate { .. } => "token_allocate",
            TokenTransition { .. } => "token_transition",
            TokenRelease { .. } => "token_release",
            TokenAccess { .. } => "token_access",
            PageTableCreate { .. } => "page_table_create",
            TokenMap { .. } => "token_map",
            TokenUnmap { .. } => "token_unmap",
            SharedMap { .. } => "shared_map",
            SharedUnmap { .. } => "shared_unmap",
            BootStep { .. } => "boot_step",
            Measured { .. } => "measured",
            BootComplete => "boot_complete",
            TrapEntry { .. } => "trap_entry",
            Node { .. } => "node",
            Transition { .. } => "transition",
            RouteOut { .. } => "route_out",
            RouteIn { .. } => "route_in",
            Exit { .. } => "exit",
            Lifecycle { .. } => "lifecycle",
            CallRejected { .. } => "call_rejected",
            Promote { .. } => "promote",
            Share { .. } => "share",
            AttestIssued { .. } => "attest",
            Adversary { .. } => "adversary",
        }
    }

    pub fn args(&self) -> Vec<(&'static str, String)> {
        use EventKind::*;
        let s = |v: &dyn fmt::Display| v.to_string();
        match self {
            Reset { harts, mem_pages } => vec![("harts", s(harts)), ("pages", s(mem_pages))],
            Read { addr, len } | Write { addr, len } => vec![("addr", s(addr)), ("len", s(len))],
            Cas { addr, expected, new, prior } => {
                vec![("addr", s(addr)), ("expected", s(expected)), ("new", s(new)), ("prior", s(prior))]
            }
            SetIsolation { version, config } => {
                let grants: usize = config.grants.values().map(Vec::len).sum();
                vec![
                    ("version", s(version)),
                    ("confidential", s(&config.confidential.len())),
                    ("grants", s(&grants)),
                    ("shared", s(&config.shared.len())),
                ]
            }
            ConfigureIrq { irq, target, handler } => {
                vec![("irq", s(irq)), ("target", s(target)), ("handler", s(handler))]
            }
            DeliverIrq { irq, from, to, handler } => {
                vec![("irq", s(irq)), ("from", s(from)), ("to", s(to)), ("handler", s(handler))]
            }
            ClearMicroarch | ReadSeed | LockSeed | Rng | BootComplete => vec![],
            ReturnFromTrap { to, target, pc, enable_interrupts, taint, guest_root } => vec![
                ("to", s(to)),
                ("target", s(target)),
                ("pc", s(pc)),
                ("enable", s(&u8::from(*enable_interrupts))),
                ("taint", taint.map_or("none".into(), |d| d.to_string())),
                ("root", guest_root.map_or("none".into(), |r| r.to_string())),
            ],
            EnterGuest { target, pc } => vec![("target", s(target)), ("pc", s(pc))],
            TokenCreate { serial, base } | TokenAllocate { serial, base } | TokenRelease { serial, base } => {
                vec![("serial", s(serial)), ("base", s(base))]
            }
            TokenTransition { serial, base, to } => {
                vec![("serial", s(serial)), ("base", s(base)), ("to", s(to))]
            }
            TokenAccess { serial, addr, len, write } => {
                vec![("serial", s(serial)), ("addr", s(addr)), ("len", s(len)), ("write", s(&u8::from(*write)))]
            }
            PageTableCreate { owner, serial, base } => {
                vec![("owner", s(owner)), ("serial", s(serial)), ("base", s(base))]
            }
            TokenMap { serial, base, owner, guest_page } | TokenUnmap { serial, base, owner, guest_page } => {
                vec![("serial", s(serial)), ("base", s(base)), ("owner", s(owner)), ("gpage", s(guest_page))]
            }
            SharedMap { owner, guest_page, addr } | SharedUnmap { owner, guest_page, addr } => {
                vec![("owner", s(owner)), ("gpage", s(guest_page)), ("addr", s(addr))]
            }
            BootStep { step, name } => vec![("step", s(step)), ("name", s(name))],
            Measured { component, digest } => vec![("component", component.clone()), ("digest", digest.clone())],
            TrapEntry { cause, node, interrupted, save_addr } => {
                vec![("cause", s(cause)), ("node", s(node)), ("interrupted", s(interrupted)), ("save", s(save_addr))]
            }
            Node { node } => vec![("node", s(node))],
            Transition { direction, actions, irq_fingerprint } => vec![
                ("dir", s(direction)),
                ("actions", list(&actions.iter().collect::<Vec<_>>())),
                ("irqfp", format!("{irq_fingerprint:016x}")),
            ],
            RouteOut { call_id, whitelist, view } => {
                vec![("call", format!("{call_id:#x}")), ("whitelist", list(whitelist)), ("view", hex_list(view))]
            }
            RouteIn { call_id, results, written } => {
                vec![("call", format!("{call_id:#x}")), ("results", list(results)), ("written", list(written))]
            }
            Exit { node, target, restore_addr } => {
                vec![("node", s(node)), ("target", s(target)), ("restore", s(restore_addr))]
            }
            Lifecycle { domain, from, to } => {
                vec![("domain", s(domain)), ("from", from.clone()), ("to", to.clone())]
            }
            CallRejected { caller, call_id, reason } => {
                vec![("caller", s(caller)), ("call", format!("{call_id:#x}")), ("reason", reason.clone())]
            }
            Promote { vm, cvm, digest } => vec![("vm", s(vm)), ("cvm", s(cvm)), ("digest", digest.clone())],
            Share { cvm, guest_page, addr } => vec![("cvm", s(cvm)), ("gpage", s(guest_page)), ("addr", s(addr))],
            AttestIssued { cvm, measurement } => vec![("cvm", s(cvm)), ("measurement", measurement.clone())],
            Adversary { action } => vec![("action", action.clone())],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub seq: u64,
    pub hart: Option<usize>,
    pub domain: DomainId,
    pub privilege: Option<PrivilegeLevel>,
    pub interrupts_enabled: Option<bool>,
    pub kind: EventKind,
    pub outcome: Outcome,
}

impl TraceEvent {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }
}

fn escape(v: &str) -> String {
    v.chars().map(|c| if matches!(c, '\t' | '\n' | ',' | '=') { '_' } else { c }).collect()
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hart = self.hart.map_or("-".to_string(), |h| h.to_string());
        let mut args: Vec<String> = Vec::new();
        if let (Some(p), Some(ie)) = (self.privilege, self.interrupts_enabled) {
            args.push(format!("priv={p}"));
            args.push(format!("ie={}", u8::from(ie)));
        }
        args.extend(self.kind.args().into_iter().map(|(k, v)| format!("{k}={}", escape(&v))));
        let args = if args.is_empty() { "-".to_string() } else { args.join(",") };
        write!(f, "{}\t{}\t{}\t{}\t{}\t{}", self.seq, hart, self.domain, self.kind.op(), args, self.outcome)
    }
}

/// Untyped view of one serialized trace line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub hart: Option<usize>,
    pub domain: String,
    pub op: String,
    pub args: Vec<(String, String)>,
    pub outcome: String,
}

impl TraceRecord {
    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn parse_line(line: &str) -> Result<TraceRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields, found {}", fields.len()));
    }
    let seq = fields[0].parse().map_err(|e| format!("bad seq: {e}"))?;
    let hart = match fields[1] {
        "-" => None,
        h => Some(h.parse().map_err(|e| format!("bad hart: {e}"))?),
    };
    let args = if fields[4] == "-" {
        Vec::new()
    } else {
        fields[4]
            .split(',')
            .map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("bad arg `{kv}`")))
            .collect::<Result<_, _>>()?
    };
    Ok(TraceRecord { seq, hart, domain: fields[2].to_string(), op: fields[3].to_string(), args, outcome: fields[5].to_string() })
}

/// Event sink with a monotone sequence counter. Consumers may drain events;
/// sequence numbers keep increasing regardless.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    next_seq: u64,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub(crate) fn push(
        &mut self,
        hart: Option<usize>,
        domain: DomainId,
        mode: Option<(PrivilegeLevel, bool)>,
        kind: EventKind,
        outcome: Outcome,
    ) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(TraceEvent {
            seq,
            hart,
            domain,
            privilege: mode.map(|m| m.0),
            interrupts_enabled: mode.map(|m| m.1),
            kind,
            outcome,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn drain(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn render(&self) -> String {
        render(&self.events)
    }
}

pub fn render(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}
