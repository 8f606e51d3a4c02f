// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use crate::PAGE_SIZE;

/// Byte-granular physical address.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhysAddr(u64);

impl PhysAddr {
    pub const fn new(value: u64) -> Self {
        Self(value)
    }

    pub const fn from_page(page: u64) -> Self {
        Self(page * PAGE_SIZE)
    }

    pub const fn as_u64(self) -> u64 {
        self.0
    }

    pub const fn page_number(self) -> u64 {
        self.0 / PAGE_SIZE
    }

    pub const fn page_base(self) -> Self {
        Self(self.0 - self.0 % PAGE_SIZE)
    }

    pub const fn page_offset(self) -> u64 {
        self.0 % PAGE_SIZE
    }

    pub const fn is_page_aligned(self) -> bool {
        self.0 % PAGE_SIZE == 0
    }

    pub const fn is_aligned(self, align: u64) -> bool {
        self.0 % align == 0
    }

    pub fn checked_add(self, offset: u64) -> Option<Self> {
        self.0.checked_add(offset).map(Self)
    }

    /// Panics on overflow; used for offsets already known to be in range.
    pub fn add(self, offset: u64) -> Self {
        Self(self.0 + offset)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Half-open physical address range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AddrRange {
    start: PhysAddr,
    end: PhysAddr,
}

impl AddrRange {
    pub fn new(start: PhysAddr, len: u64) -> Self {
        Self { start, end: start.add(len) }
    }

    pub fn from_bounds(start: PhysAddr, end: PhysAddr) -> Self {
        assert!(start <= end, "inverted range {start}..{end}");
        Self { start, end }
    }

    pub fn pages(first_page: u64, count: u64) -> Self {
        Self::new(PhysAddr::from_page(first_page), count * PAGE_SIZE)
    }

    pub fn page_of(addr: PhysAddr) -> Self {
        Self::new(addr.page_base(), PAGE_SIZE)
    }

    pub const fn start(&self) -> PhysAddr {
        self.start
    }

    pub const fn end(&self) -> PhysAddr {
        self.end
    }

    pub const fn len(&self) -> u64 {
        self.end.0 - self.start.0
    }

    pub const fn is_empty(&self) -> bool {
        self.end.0 == self.start.0
    }

    pub fn page_count(&self) -> u64 {
        self.len() / PAGE_SIZE
    }

    pub fn is_page_aligned(&self) -> bool {
        self.start.is_page_aligned() && self.end.is_page_aligned()
    }

    pub fn contains(&self, addr: PhysAddr) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn contains_range(&self, other: &AddrRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &AddrRange) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }

    /// Base address of every page in the range.
    pub fn page_bases(&self) -> impl Iterator<Item = PhysAddr> {
        let first = self.start.page_number();
        let last = self.end.0.div_ceil(PAGE_SIZE);
        (first..last).map(PhysAddr::from_page)
    }
}

impl fmt::Display for AddrRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}
