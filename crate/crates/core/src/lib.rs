// SPDX-License-Identifier: Apache-2.0

//! Executable model of a canonical VM-based confidential computing platform.
//!
//! The crate is layered bottom-up:
//!
//! * [`hw`] is the simulated platform: physical memory behind an isolation
//!   component, harts with three privilege levels, a per-hart interrupt
//!   controller, an endorsement seed with a reset-scoped lock, an atomic CAS
//!   and a deterministic RNG. Every operation appends to a [`trace`].
//! * [`tracker`] owns confidential memory as linear page tokens with an
//!   `UnAllocated`/`Allocated` typestate, and the page tables consuming them.
//! * [`attestation`] measures images, derives the attestation key from the
//!   endorsement seed and signs reports.
//! * [`boot`] performs the measured boot and security monitor initialization.
//! * [`fsm`] and [`sm`] form the security monitor runtime: trap entry,
//!   routing, domain transitions with sanitization, and the SM call set.
//! * [`harness`] drives untrusted software and adversaries against the model
//!   and checks every invariant through an independent oracle, either along
//!   scripted scenarios or by bounded exhaustive exploration.

pub mod attestation;
pub mod boot;
pub mod fsm;
pub mod harness;
pub mod hw;
pub mod sm;
pub mod trace;
pub mod tracker;

/// Size of a physical page and of a page token.
pub const PAGE_SIZE: u64 = 4096;
/// Width of a register and of a memory word.
pub const WORD_BYTES: u64 = 8;
/// Number of general purpose registers per hart.
pub const NUM_GPRS: usize = 32;
/// Words in the per-hart microarchitectural scratch buffer.
pub const SCRATCH_WORDS: usize = 8;
/// Length of the endorsement seed in bytes.
pub const SEED_LEN: usize = 32;

pub use attestation::{AttestationKey, AttestationReport, Digest, Measurement};
pub use boot::{secure_boot, BootError, BootOptions, BootReport, InitInvariant, MemoryLayout};
pub use fsm::{FsmNode, RegisterView, TransitionEvent};
pub use harness::{Verdict, World};
pub use hw::{AddrRange, DomainId, HartContext, HwError, IrqId, IsolationConfig, PhysAddr, Platform, PrivilegeLevel};
pub use sm::{Mutation, SecurityMonitor, SmError};
pub use trace::{EventKind, TraceEvent};
pub use tracker::{Allocated, PageTable, PageToken, TokenPool, UnAllocated};
