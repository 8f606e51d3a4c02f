// SPDX-License-Identifier: Apache-2.0

//! Confidential-memory tracker.
//!
//! Every page of the token-managed range is represented by exactly one
//! [`PageToken`], created once by [`init_tracker`] during boot. Tokens are
//! move-only: the type has no `Clone`, so handing a token to a function or a
//! page table invalidates the source binding.
//!
//! ```compile_fail
//! # use cvm_model::tracker::{PageToken, UnAllocated};
//! fn consume(_t: PageToken<UnAllocated>) {}
//! fn twice(t: PageToken<UnAllocated>) {
//!     consume(t);
//!     consume(t); // use of moved value
//! }
//! ```
//!
//! A token is `UnAllocated` while it sits in the pool and `Allocated` once
//! handed out for use. Both transitions zero the page, so no content survives
//! a change of ownership.
//!
//! Each token carries a serial number in addition to its base address. The
//! serial lets the invariant oracle detect a token that is live in two places
//! from the trace alone, independently of the type system.

mod page_table;

use std::fmt;
use std::hash::{Hash, Hasher};
use std::marker::PhantomData;

use thiserror::Error;

pub use page_table::PageTable;

use crate::hw::{AddrRange, HwError, PhysAddr, Platform};
use crate::trace::{EventKind, Outcome};
use crate::{PAGE_SIZE, WORD_BYTES};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TrackerError {
    #[error("range {0} is not page aligned")]
    Misaligned(AddrRange),
    #[error("empty range")]
    EmptyRange,
    #[error("tracker already initialized")]
    AlreadyInitialized,
    #[error("out of confidential memory")]
    OutOfMemory,
    #[error("offset {offset:#x} width {width} outside the token")]
    OutOfBounds { offset: u64, width: u64 },
    #[error("guest page {0} already mapped")]
    AlreadyMapped(u64),
    #[error("guest page {0} not mapped")]
    NotMapped(u64),
    #[error(transparent)]
    Hw(#[from] HwError),
}

/// Unique identity of a token, fixed at creation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSerial(pub u64);

impl fmt::Display for TokenSerial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenStateKind {
    UnAllocated,
    Allocated,
}

impl fmt::Display for TokenStateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenStateKind::UnAllocated => write!(f, "unallocated"),
            TokenStateKind::Allocated => write!(f, "allocated"),
        }
    }
}

mod sealed {
    pub trait Sealed {}
}

pub trait TokenState: sealed::Sealed {
    const KIND: TokenStateKind;
}

/// Typestate of a token whose page content is not meaningful to anyone.
#[derive(Debug)]
pub enum UnAllocated {}
/// Typestate of a token handed out for use; its page started out zeroed.
#[derive(Debug)]
pub enum Allocated {}

impl sealed::Sealed for UnAllocated {}
impl sealed::Sealed for Allocated {}
impl TokenState for UnAllocated {
    const KIND: TokenStateKind = TokenStateKind::UnAllocated;
}
impl TokenState for Allocated {
    const KIND: TokenStateKind = TokenStateKind::Allocated;
}

/// Exclusive capability over one physical page of confidential memory.
#[derive(Debug)]
pub struct PageToken<S: TokenState> {
    serial: TokenSerial,
    base: PhysAddr,
    _state: PhantomData<S>,
}

impl<S: TokenState> PageToken<S> {
    fn new(serial: TokenSerial, base: PhysAddr) -> Self {
        Self { serial, base, _state: PhantomData }
    }

    pub fn serial(&self) -> TokenSerial {
        self.serial
    }

    pub fn base(&self) -> PhysAddr {
        self.base
    }

    pub fn size(&self) -> u64 {
        PAGE_SIZE
    }

    pub fn range(&self) -> AddrRange {
        AddrRange::new(self.base, PAGE_SIZE)
    }

    pub fn state(&self) -> TokenStateKind {
        S::KIND
    }

    /// A second token for the same page. Used to copy a whole machine for
    /// exploration and by the duplicate-token fault.
    pub(crate) fn forge(&self) -> Self {
        Self::new(self.serial, self.base)
    }

    fn retype<T: TokenState>(self) -> PageToken<T> {
        PageToken::new(self.serial, self.base)
    }

    fn check_bounds(&self, offset: u64, width: u64) -> Result<PhysAddr, TrackerError> {
        match offset.checked_add(width) {
            Some(end) if end <= PAGE_SIZE => Ok(self.base.add(offset)),
            _ => Err(TrackerError::OutOfBounds { offset, width }),
        }
    }

    fn note_access(&self, platform: &mut Platform, hart: usize, addr: PhysAddr, len: u64, write: bool) {
        platform.record(Some(hart), EventKind::TokenAccess { serial: self.serial, addr, len, write }, Outcome::Ok);
    }

    /// Zero the whole page through this token.
    fn clear(&self, platform: &mut Platform, hart: usize) -> Result<(), TrackerError> {
        self.note_access(platform, hart, self.base, PAGE_SIZE, true);
        platform.fill(hart, self.base, PAGE_SIZE, 0)?;
        Ok(())
    }

    fn note_transition(&self, platform: &mut Platform, hart: usize, to: TokenStateKind) {
        platform.record(Some(hart), EventKind::TokenTransition { serial: self.serial, base: self.base, to }, Outcome::Ok);
    }
}

impl<S: TokenState> PartialEq for PageToken<S> {
    fn eq(&self, other: &Self) -> bool {
        self.serial == other.serial && self.base == other.base
    }
}

impl<S: TokenState> Eq for PageToken<S> {}

impl<S: TokenState> Hash for PageToken<S> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.serial.hash(state);
        self.base.hash(state);
    }
}

impl PageToken<UnAllocated> {
    /// Zeroes the page and hands back an `Allocated` token for it.
    pub fn to_allocated(self, platform: &mut Platform, hart: usize) -> Result<PageToken<Allocated>, TrackerError> {
        self.clear(platform, hart)?;
        self.note_transition(platform, hart, TokenStateKind::Allocated);
        Ok(self.retype())
    }
}

impl PageToken<Allocated> {
    pub fn token_read(&self, platform: &mut Platform, hart: usize, offset: u64) -> Result<u64, TrackerError> {
        let addr = self.check_bounds(offset, WORD_BYTES)?;
        self.note_access(platform, hart, addr, WORD_BYTES, false);
        Ok(platform.read_phys(hart, addr, WORD_BYTES)?)
    }

    pub fn token_write(&self, platform: &mut Platform, hart: usize, offset: u64, value: u64) -> Result<(), TrackerError> {
        let addr = self.check_bounds(offset, WORD_BYTES)?;
        self.note_access(platform, hart, addr, WORD_BYTES, true);
        Ok(platform.write_phys(hart, addr, WORD_BYTES, value)?)
    }

    pub fn read_bytes(&self, platform: &mut Platform, hart: usize, offset: u64, buf: &mut [u8]) -> Result<(), TrackerError> {
        let addr = self.check_bounds(offset, buf.len() as u64)?;
        self.note_access(platform, hart, addr, buf.len() as u64, false);
        Ok(platform.read_block(hart, addr, buf)?)
    }

    pub fn write_bytes(&self, platform: &mut Platform, hart: usize, offset: u64, data: &[u8]) -> Result<(), TrackerError> {
        let addr = self.check_bounds(offset, data.len() as u64)?;
        self.note_access(platform, hart, addr, data.len() as u64, true);
        Ok(platform.write_block(hart, addr, data)?)
    }

    /// Zeroes the page and returns it to the `UnAllocated` state.
    fn to_unallocated(self, platform: &mut Platform, hart: usize, zeroize: bool) -> Result<PageToken<UnAllocated>, TrackerError> {
        if zeroize {
            self.clear(platform, hart)?;
        }
        self.note_transition(platform, hart, TokenStateKind::UnAllocated);
        Ok(self.retype())
    }
}

/// One-shot permission to create the token set. Only the boot sequence
/// constructs it.
#[derive(Debug)]
pub struct TrackerInit {
    used: bool,
}

impl TrackerInit {
    pub(crate) fn new() -> Self {
        Self { used: false }
    }
}

/// Free list of `UnAllocated` tokens.
#[derive(Debug)]
pub struct TokenPool {
    free: Vec<PageToken<UnAllocated>>,
    total_created: u64,
    range: AddrRange,
}

/// Creates one token per page of `range`. Fails on a second use of `init`.
pub fn init_tracker(
    init: &mut TrackerInit,
    platform: &mut Platform,
    hart: usize,
    range: AddrRange,
) -> Result<TokenPool, TrackerError> {
    if init.used {
        return Err(TrackerError::AlreadyInitialized);
    }
    if range.is_empty() {
        return Err(TrackerError::EmptyRange);
    }
    if !range.is_page_aligned() {
        return Err(TrackerError::Misaligned(range));
    }
    init.used = true;
    let mut free = Vec::with_capacity(range.page_count() as usize);
    for (i, base) in range.page_bases().enumerate() {
        let token = PageToken::new(TokenSerial(i as u64), base);
        platform.record(Some(hart), EventKind::TokenCreate { serial: token.serial, base }, Outcome::Ok);
        free.push(token);
    }
    // Allocation pops from the end; keep the lowest pages for last.
    free.reverse();
    Ok(TokenPool { total_created: free.len() as u64, free, range })
}

impl TokenPool {
    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn total_created(&self) -> u64 {
        self.total_created
    }

    pub fn range(&self) -> AddrRange {
        self.range
    }

    /// `(serial, base)` of every free token, in free-list order.
    pub fn free_tokens(&self) -> impl Iterator<Item = (TokenSerial, PhysAddr)> + '_ {
        self.free.iter().map(|t| (t.serial, t.base))
    }

    pub fn allocate(&mut self, platform: &mut Platform, hart: usize) -> Result<PageToken<UnAllocated>, TrackerError> {
        match self.free.pop() {
            Some(token) => {
                platform.record(Some(hart), EventKind::TokenAllocate { serial: token.serial, base: token.base }, Outcome::Ok);
                Ok(token)
            }
            None => Err(TrackerError::OutOfMemory),
        }
    }

    /// Allocates and transitions in one go.
    pub fn allocate_zeroed(&mut self, platform: &mut Platform, hart: usize) -> Result<PageToken<Allocated>, TrackerError> {
        let token = self.allocate(platform, hart)?;
        token.to_allocated(platform, hart)
    }

    /// Zeroes the page and returns the token to the free list.
    pub fn deallocate(&mut self, token: PageToken<Allocated>, platform: &mut Platform, hart: usize) -> Result<(), TrackerError> {
        self.release(token, platform, hart, true)
    }

    pub(crate) fn release(
        &mut self,
        token: PageToken<Allocated>,
        platform: &mut Platform,
        hart: usize,
        zeroize: bool,
    ) -> Result<(), TrackerError> {
        let token = token.to_unallocated(platform, hart, zeroize)?;
        platform.record(Some(hart), EventKind::TokenRelease { serial: token.serial, base: token.base }, Outcome::Ok);
        self.free.push(token);
        Ok(())
    }

    /// Puts a token back without the `Allocated` round trip. Used when an
    /// allocation is abandoned before the page was ever zeroed for use.
    pub fn give_back(&mut self, token: PageToken<UnAllocated>, platform: &mut Platform, hart: usize) {
        platform.record(Some(hart), EventKind::TokenRelease { serial: token.serial, base: token.base }, Outcome::Ok);
        self.free.push(token);
    }

    /// Mints a token outside initialization. Fault injection only.
    pub fn forge_new(&mut self, platform: &mut Platform, base: PhysAddr) -> TokenSerial {
        let serial = TokenSerial(self.total_created + 1000);
        platform.record(None, EventKind::TokenCreate { serial, base }, Outcome::Ok);
        serial
    }

    /// Re-points the last free token at the page of the one before it.
    /// Fault injection only. Returns false when fewer than two are free.
    pub fn alias_free_token(&mut self) -> bool {
        if self.free.len() < 2 {
            return false;
        }
        self.free[0].base = self.free[1].base;
        true
    }

    pub(crate) fn fingerprint<H: Hasher>(&self, state: &mut H) {
        self.free.hash(state);
        self.total_created.hash(state);
    }
}

impl Clone for TokenPool {
    /// Copies the pool as part of copying the whole machine it belongs to.
    fn clone(&self) -> Self {
        Self { free: self.free.iter().map(PageToken::forge).collect(), total_created: self.total_created, range: self.range }
    }
}
