// SPDX-License-Identifier: Apache-2.0

//! Call table: which registers each security monitor call reads and writes.
//!
//! The table is configuration, loaded from TOML. The shipped default lives
//! in `calls.toml` next to this file. Schema:
//!
//! ```toml
//! exit_reason_register = 5      # register carrying the exit reason on routed exits
//!
//! [[call]]
//! id = 0x10                     # value in x17
//! name = "console_putchar"
//! kind = "hypercall"            # promote | resume | terminate | share | attest |
//!                               # register_vm | hypercall | mmio_load | mmio_store | interrupt
//! args = [10]                   # registers read from the caller / exposed when routed
//! results = [10]                # registers written back to the caller
//! ```
//!
//! Register numbers must be in `1..32`. `mmio_load`, `mmio_store` and
//! `interrupt` must each appear exactly once; they describe the exits the
//! monitor synthesizes for guest page faults and interrupts.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::sm::SmError;
use crate::NUM_GPRS;

pub const DEFAULT_CALL_TABLE: &str = include_str!("calls.toml");

/// Register holding the call id.
pub const REG_CALL_ID: usize = 17;
/// Register holding the target domain of a resume.
pub const REG_TARGET: usize = 16;
pub const REG_A0: usize = 10;
pub const REG_A1: usize = 11;
pub const REG_A2: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Promote,
    Resume,
    Terminate,
    Share,
    Attest,
    RegisterVm,
    Hypercall,
    MmioLoad,
    MmioStore,
    Interrupt,
}

impl CallKind {
    /// Calls the monitor forwards from a CVM to the hypervisor.
    pub fn is_routed(self) -> bool {
        matches!(self, CallKind::Hypercall | CallKind::MmioLoad | CallKind::MmioStore | CallKind::Interrupt)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Deserialize)]
pub struct CallEntry {
    pub id: u64,
    pub name: String,
    pub kind: CallKind,
    pub args: Vec<u8>,
    pub results: Vec<u8>,
}

#[derive(Deserialize)]
struct RawTable {
    exit_reason_register: u8,
    #[serde(default)]
    call: Vec<CallEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CallTable {
    exit_reason_register: u8,
    entries: BTreeMap<u64, CallEntry>,
}

impl CallTable {
    pub fn from_toml(text: &str) -> Result<Self, SmError> {
        let raw: RawTable = toml::from_str(text).map_err(|e| SmError::Config(e.to_string()))?;
        let reg_ok = |r: u8| (1..NUM_GPRS as u8).contains(&r);
        if !reg_ok(raw.exit_reason_register) {
            return Err(SmError::Config(format!("bad exit reason register {}", raw.exit_reason_register)));
        }
        let mut entries = BTreeMap::new();
        for entry in raw.call {
            if let Some(r) = entry.args.iter().chain(&entry.results).find(|r| !reg_ok(**r)) {
                return Err(SmError::Config(format!("call {:#x}: bad register {r}", entry.id)));
            }
            if entry.kind.is_routed() && entry.args.contains(&raw.exit_reason_register) {
                return Err(SmError::Config(format!("call {:#x}: exit reason register listed as argument", entry.id)));
            }
            if entries.insert(entry.id, entry.clone()).is_some() {
                return Err(SmError::Config(format!("duplicate call id {:#x}", entry.id)));
            }
        }
        let table = Self { exit_reason_register: raw.exit_reason_register, entries };
        for kind in [CallKind::MmioLoad, CallKind::MmioStore, CallKind::Interrupt] {
            if table.entries.values().filter(|e| e.kind == kind).count() != 1 {
                return Err(SmError::Config(format!("exactly one {kind:?} entry required")));
            }
        }
        Ok(table)
    }

    pub fn get(&self, id: u64) -> Option<&CallEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CallEntry> {
        self.entries.values()
    }

    /// The unique entry of a synthesized exit kind.
    pub fn synthetic(&self, kind: CallKind) -> &CallEntry {
        self.entries.values().find(|e| e.kind == kind).expect("validated at load")
    }

    pub fn exit_reason_register(&self) -> usize {
        self.exit_reason_register as usize
    }
}

impl Default for CallTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CALL_TABLE).expect("shipped call table is valid")
    }
}
