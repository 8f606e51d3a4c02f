// SPDX-License-Identifier: Apache-2.0

//! Scenario scripts.
//!
//! One record per line; `#` starts a comment.
//!
//! ```text
//! config harts=2 vms=2 vm_pages=1 pool_pages=8 mem_pages=48 seed=7 victims=off
//! action promote(hart=0, vm=vm0)
//! action resume(hart=0, cvm=cvm0)
//! action cvm_store(hart=0, addr=0x0, value=0x5ec1)
//! action cvm_call(hart=0, id=0x10, a0=0x41)
//! action probe_all(hart=1)
//! fault skip-zeroize
//! mutation duplicate-token
//! expect P3
//! ```
//!
//! `config` must come first and may be omitted. `mutation` enables a monitor
//! mutation for the whole run. `expect` names a verdict the script is known
//! to violate; replay reports whether it still does.
//! Numbers are decimal or `0x` hex. Domains use their display form
//! (`hv`, `vm0`, `cvm1`).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::harness::faults::FaultId;
use crate::harness::WorldConfig;
use crate::hw::{DomainId, IrqId};
use crate::sm::Mutation;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

/// One untrusted-software step. Hypervisor actions need a hart running the
/// hypervisor; `cvm_*` actions need a hart running a CVM.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    RegisterVm {
        hart: usize,
        first_page: u64,
        pages: u64,
    },
    Promote {
        hart: usize,
        vm: DomainId,
    },
    Resume {
        hart: usize,
        cvm: DomainId,
        reply: u64,
    },
    Terminate {
        hart: usize,
        cvm: DomainId,
    },
    Attest {
        hart: usize,
        cvm: DomainId,
        nonce: u64,
    },
    /// Arbitrary monitor call from the hypervisor.
    SmCall {
        hart: usize,
        id: u64,
        args: [u64; 3],
    },
    ReadProbe {
        hart: usize,
        addr: u64,
    },
    WriteProbe {
        hart: usize,
        addr: u64,
        value: u64,
    },
    DmaProbe {
        addr: u64,
        write: bool,
    },
    /// CPU and DMA reads and writes of every confidential page.
    ProbeAll {
        hart: usize,
    },
    /// The hypervisor fills every shared-window page with `value`.
    SharedInput {
        hart: usize,
        value: u64,
    },
    /// The hypervisor tries every privileged operation it should not have.
    Impersonate {
        hart: usize,
    },
    Interrupt {
        hart: usize,
        irq: IrqId,
    },
    /// The CVM loads `value`-derived secrets into its registers.
    CvmRegs {
        hart: usize,
        value: u64,
    },
    CvmStore {
        hart: usize,
        addr: u64,
        value: u64,
    },
    CvmLoad {
        hart: usize,
        addr: u64,
    },
    CvmCall {
        hart: usize,
        id: u64,
        args: [u64; 3],
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::RegisterVm { .. } => "register_vm",
            Action::Promote { .. } => "promote",
            Action::Resume { .. } => "resume",
            Action::Terminate { .. } => "terminate",
            Action::Attest { .. } => "attest",
            Action::SmCall { .. } => "sm_call",
            Action::ReadProbe { .. } => "read_probe",
            Action::WriteProbe { .. } => "write_probe",
            Action::DmaProbe { .. } => "dma_probe",
            Action::ProbeAll { .. } => "probe_all",
            Action::SharedInput { .. } => "shared_input",
            Action::Impersonate { .. } => "impersonate",
            Action::Interrupt { .. } => "interrupt",
            Action::CvmRegs { .. } => "cvm_regs",
            Action::CvmStore { .. } => "cvm_store",
            Action::CvmLoad { .. } => "cvm_load",
            Action::CvmCall { .. } => "cvm_call",
        }
    }

    pub fn hart(&self) -> Option<usize> {
        match *self {
            Action::DmaProbe { .. } => None,
            Action::RegisterVm { hart, .. }
            | Action::Promote { hart, .. }
            | Action::Resume { hart, .. }
            | Action::Terminate { hart, .. }
            | Action::Attest { hart, .. }
            | Action::SmCall { hart, .. }
            | Action::ReadProbe { hart, .. }
            | Action::WriteProbe { hart, .. }
            | Action::ProbeAll { hart }
            | Action::SharedInput { hart, .. }
            | Action::Impersonate { hart }
            | Action::Interrupt { hart, .. }
            | Action::CvmRegs { hart, .. }
            | Action::CvmStore { hart, .. }
            | Action::CvmLoad { hart, .. }
            | Action::CvmCall { hart, .. } => Some(hart),
        }
    }

    /// True for actions issued by software inside a CVM.
    pub fn is_cvm_action(&self) -> bool {
        matches!(self, Action::CvmRegs { .. } | Action::CvmStore { .. } | Action::CvmLoad { .. } | Action::CvmCall { .. })
    }

    fn args(&self) -> Vec<(&'static str, String)> {
        let hex = |v: u64| format!("{v:#x}");
        let mut out = Vec::new();
        if let Some(h) = self.hart() {
            out.push(("hart", h.to_string()));
        }
        match self {
            Action::RegisterVm { first_page, pages, .. } => {
                out.push(("first_page", first_page.to_string()));
                out.push(("pages", pages.to_string()));
            }
            Action::Promote { vm, .. } => out.push(("vm", vm.to_string())),
            Action::Resume { cvm, reply, .. } => {
                out.push(("cvm", cvm.to_string()));
                out.push(("reply", hex(*reply)));
            }
            Action::Terminate { cvm, .. } => out.push(("cvm", cvm.to_string())),
            Action::Attest { cvm, nonce, .. } => {
                out.push(("cvm", cvm.to_string()));
                out.push(("nonce", hex(*nonce)));
            }
            Action::SmCall { id, args, .. } | Action::CvmCall { id, args, .. } => {
                out.push(("id", hex(*id)));
                for (name, v) in ["a0", "a1", "a2"].into_iter().zip(args) {
                    out.push((name, hex(*v)));
                }
            }
            Action::ReadProbe { addr, .. } | Action::CvmLoad { addr, .. } => out.push(("addr", hex(*addr))),
            Action::WriteProbe { addr, value, .. } | Action::CvmStore { addr, value, .. } => {
                out.push(("addr", hex(*addr)));
                out.push(("value", hex(*value)));
            }
            Action::DmaProbe { addr, write } => {
                out.push(("addr", hex(*addr)));
                out.push(("write", u8::from(*write).to_string()));
            }
            Action::SharedInput { value, .. } | Action::CvmRegs { value, .. } => out.push(("value", hex(*value))),
            Action::Interrupt { irq, .. } => out.push(("irq", irq.0.to_string())),
            Action::ProbeAll { .. } | Action::Impersonate { .. } => {}
        }
        out
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<String> = self.args().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{}({})", self.name(), args.join(", "))
    }
}

pub fn parse_u64(s: &str) -> Result<u64, String> {
    let s = s.trim().replace('_', "");
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| format!("bad number `{s}`"))
}

struct Args<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Args<'a> {
    fn parse(text: &'a str) -> Result<Self, String> {
        let mut pairs = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("argument `{part}` is not key=value"))?;
            pairs.push((k.trim(), v.trim()));
        }
        Ok(Self { pairs })
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn num(&self, key: &str) -> Result<u64, String> {
        parse_u64(self.raw(key).ok_or_else(|| format!("missing `{key}`"))?)
    }

    fn num_or(&self, key: &str, default: u64) -> Result<u64, String> {
        self.raw(key).map_or(Ok(default), parse_u64)
    }

    fn hart(&self) -> Result<usize, String> {
        Ok(self.num("hart")? as usize)
    }

    fn domain(&self, key: &str) -> Result<DomainId, String> {
        DomainId::from_str(self.raw(key).ok_or_else(|| format!("missing `{key}`"))?)
    }

    fn call_args(&self) -> Result<[u64; 3], String> {
        Ok([self.num_or("a0", 0)?, self.num_or("a1", 0)?, self.num_or("a2", 0)?])
    }

    fn check_known(&self, known: &[&str]) -> Result<(), String> {
        match self.pairs.iter().find(|(k, _)| !known.contains(k)) {
            Some((k, _)) => Err(format!("unknown argument `{k}`")),
            None => Ok(()),
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let text = text.trim();
        let open = text.find('(').ok_or("expected `name(args)`")?;
        let body = text[open + 1..].strip_suffix(')').ok_or("missing `)`")?;
        let name = text[..open].trim();
        let a = Args::parse(body)?;
        let (action, known): (Action, &[&str]) = match name {
            "register_vm" => (
                Action::RegisterVm { hart: a.hart()?, first_page: a.num("first_page")?, pages: a.num("pages")? },
                &["hart", "first_page", "pages"],
            ),
            "promote" => (Action::Promote { hart: a.hart()?, vm: a.domain("vm")? }, &["hart", "vm"]),
            "resume" => (
                Action::Resume { hart: a.hart()?, cvm: a.domain("cvm")?, reply: a.num_or("reply", 0)? },
                &["hart", "cvm", "reply"],
            ),
            "terminate" => (Action::Terminate { hart: a.hart()?, cvm: a.domain("cvm")? }, &["hart", "cvm"]),
            "attest" => (
                Action::Attest { hart: a.hart()?, cvm: a.domain("cvm")?, nonce: a.num_or("nonce", 0)? },
                &["hart", "cvm", "nonce"],
            ),
            "sm_call" => {
                (Action::SmCall { hart: a.hart()?, id: a.num("id")?, args: a.call_args()? }, &["hart", "id", "a0", "a1", "a2"])
            }
            "cvm_call" => {
                (Action::CvmCall { hart: a.hart()?, id: a.num("id")?, args: a.call_args()? }, &["hart", "id", "a0", "a1", "a2"])
            }
            "read_probe" => (Action::ReadProbe { hart: a.hart()?, addr: a.num("addr")? }, &["hart", "addr"]),
            "write_probe" => (
                Action::WriteProbe { hart: a.hart()?, addr: a.num("addr")?, value: a.num_or("value", 0)? },
                &["hart", "addr", "value"],
            ),
            "dma_probe" => (Action::DmaProbe { addr: a.num("addr")?, write: a.num_or("write", 0)? != 0 }, &["addr", "write"]),
            "probe_all" => (Action::ProbeAll { hart: a.hart()? }, &["hart"]),
            "shared_input" => (Action::SharedInput { hart: a.hart()?, value: a.num_or("value", 0)? }, &["hart", "value"]),
            "impersonate" => (Action::Impersonate { hart: a.hart()? }, &["hart"]),
            "interrupt" => (Action::Interrupt { hart: a.hart()?, irq: IrqId(a.num("irq")? as u32) }, &["hart", "irq"]),
            "cvm_regs" => (Action::CvmRegs { hart: a.hart()?, value: a.num_or("value", 0)? }, &["hart", "value"]),
            "cvm_store" => (
                Action::CvmStore { hart: a.hart()?, addr: a.num("addr")?, value: a.num_or("value", 0)? },
                &["hart", "addr", "value"],
            ),
            "cvm_load" => (Action::CvmLoad { hart: a.hart()?, addr: a.num("addr")? }, &["hart", "addr"]),
            other => return Err(format!("unknown action `{other}`")),
        };
        a.check_known(known)?;
        Ok(action)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Action(Action),
    Fault(FaultId),
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Action(a) => write!(f, "action {a}"),
            Step::Fault(id) => write!(f, "fault {id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Script {
    pub config: WorldConfig,
    /// Insert victim CVM steps between scripted steps.
    pub victims: bool,
    pub steps: Vec<Step>,
    pub mutations: BTreeSet<Mutation>,
    /// Verdicts the script is expected to violate.
    pub expect: Vec<String>,
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("bad flag `{v}`")),
    }
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut script = Script { victims: true, ..Default::default() };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ScriptError { line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (head, rest) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
            let rest = rest.trim();
            match head {
                "config" => {
                    if !script.steps.is_empty() {
                        return Err(err("config must precede all steps".into()));
                    }
                    for pair in rest.split_whitespace() {
                        let (k, v) = pair.split_once('=').ok_or_else(|| err(format!("`{pair}` is not key=value")))?;
                        let num = || parse_u64(v).map_err(err);
                        let c = &mut script.config;
                        match k {
                            "harts" => c.harts = num()? as usize,
                            "vms" => c.vms = num()? as usize,
                            "vm_pages" => c.vm_pages = num()?,
                            "pool_pages" => c.pool_pages = Some(num()?),
                            "mem_pages" => c.mem_pages = num()?,
                            "seed" => c.seed = num()?,
                            "victims" => script.victims = parse_bool(v).map_err(err)?,
                            _ => return Err(err(format!("unknown config key `{k}`"))),
                        }
                    }
                }
                "action" => script.steps.push(Step::Action(rest.parse().map_err(err)?)),
                "fault" => script.steps.push(Step::Fault(rest.parse().map_err(err)?)),
                "mutation" => {
                    for name in rest.split_whitespace() {
                        script.mutations.insert(name.parse().map_err(err)?);
                    }
                }
                "expect" => script.expect.extend(rest.split_whitespace().map(String::from)),
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        Ok(script)
    }

    pub fn render(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "config harts={} vms={} vm_pages={} mem_pages={} seed={} victims={}",
            c.harts,
            c.vms,
            c.vm_pages,
            c.mem_pages,
            c.seed,
            if self.victims { "on" } else { "off" }
        );
        if let Some(p) = c.pool_pages {
            out.push_str(&format!(" pool_pages={p}"));
        }
        out.push('\n');
        for m in &self.mutations {
            out.push_str(&format!("mutation {m}\n"));
        }
        for step in &self.steps {
            out.push_str(&format!("{step}\n"));
        }
        for e in &self.expect {
            out.push_str(&format!("expect {e}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_display_parses_back() {
        let actions = [
            Action::Promote { hart: 0, vm: DomainId::vm(1) },
            Action::Resume { hart: 1, cvm: DomainId::cvm(0), reply: 7 },
            Action::SmCall { hart: 0, id: 0x7f, args: [1, 2, 3] },
            Action::DmaProbe { addr: 0x8000, write: true },
            Action::Interrupt { hart: 0, irq: IrqId::TIMER },
            Action::CvmStore { hart: 0, addr: 0x2000, value: 0xabc },
            Action::ProbeAll { hart: 1 },
        ];
        for a in actions {
            assert_eq!(a.to_string().parse::<Action>().unwrap(), a);
        }
    }

    #[test]
    fn script_round_trip_and_errors() {
        let text = "# demo\nconfig harts=1 vms=1 seed=9 victims=off\naction promote(hart=0, vm=vm0)\nfault seed-unlock\nmutation skip-zeroize\nexpect I.Init.5\n";
        let s = Script::parse(text).unwrap();
        assert_eq!(s.config.harts, 1);
        assert!(!s.victims);
        assert_eq!(s.steps.len(), 2);
        assert!(s.mutations.contains(&Mutation::SkipZeroizeOnDeallocate));
        assert_eq!(Script::parse(&s.render()).unwrap(), s);

        let e = Script::parse("action promote(hart=0)\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(Script::parse("action fly(hart=0)").is_err());
        assert!(Script::parse("action promote(hart=0, vm=vm0, bogus=1)").is_err());
        assert!(Script::parse("action promote(hart=0, vm=vm0)\nconfig harts=1").is_err());
        assert!(Script::parse("frobnicate").is_err());
        assert!(Script::parse("mutation no-such-thing").is_err());
    }
}
