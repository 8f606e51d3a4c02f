// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::hw::{DomainId, PhysAddr, Platform, GUEST_ENTRY_SHARED, GUEST_ENTRY_VALID, GUEST_TABLE_ENTRIES};
use crate::trace::{EventKind, Outcome};
use crate::tracker::{Allocated, PageToken, TokenPool, TrackerError};
use crate::WORD_BYTES;

/// Guest-physical to physical translation owned by one domain.
///
/// Entries are a flat array of words in the root page: entry `g` holds the
/// physical page base of guest page `g` or'ed with the valid bit. The entry
/// writes go through the root token, so they cannot leave the root page.
#[derive(Debug)]
pub struct PageTable {
    root: PageToken<Allocated>,
    mappings: BTreeMap<u64, PageToken<Allocated>>,
    shared: BTreeMap<u64, PhysAddr>,
    owner: DomainId,
}

impl PageTable {
    /// Takes one token from `pool` as the zeroed root.
    pub fn new(pool: &mut TokenPool, owner: DomainId, platform: &mut Platform, hart: usize) -> Result<Self, TrackerError> {
        let root = pool.allocate_zeroed(platform, hart)?;
        platform.record(Some(hart), EventKind::PageTableCreate { owner, serial: root.serial(), base: root.base() }, Outcome::Ok);
        Ok(Self { root, mappings: BTreeMap::new(), shared: BTreeMap::new(), owner })
    }

    pub fn owner(&self) -> DomainId {
        self.owner
    }

    pub fn root(&self) -> &PageToken<Allocated> {
        &self.root
    }

    pub fn mappings(&self) -> &BTreeMap<u64, PageToken<Allocated>> {
        &self.mappings
    }

    pub fn shared(&self) -> &BTreeMap<u64, PhysAddr> {
        &self.shared
    }

    pub fn is_mapped(&self, guest_page: u64) -> bool {
        self.mappings.contains_key(&guest_page) || self.shared.contains_key(&guest_page)
    }

    fn check_slot(&self, guest_page: u64) -> Result<(), TrackerError> {
        if guest_page >= GUEST_TABLE_ENTRIES {
            return Err(TrackerError::OutOfBounds { offset: guest_page * WORD_BYTES, width: WORD_BYTES });
        }
        if self.is_mapped(guest_page) {
            return Err(TrackerError::AlreadyMapped(guest_page));
        }
        Ok(())
    }

    pub fn map_page(
        &mut self,
        guest_page: u64,
        token: PageToken<Allocated>,
        platform: &mut Platform,
        hart: usize,
    ) -> Result<(), (TrackerError, PageToken<Allocated>)> {
        if let Err(e) = self.check_slot(guest_page) {
            return Err((e, token));
        }
        let entry = token.base().as_u64() | GUEST_ENTRY_VALID;
        if let Err(e) = self.root.token_write(platform, hart, guest_page * WORD_BYTES, entry) {
            return Err((e, token));
        }
        platform.record(
            Some(hart),
            EventKind::TokenMap { serial: token.serial(), base: token.base(), owner: self.owner, guest_page },
            Outcome::Ok,
        );
        self.mappings.insert(guest_page, token);
        Ok(())
    }

    /// Removes the mapping and hands the token back to the caller.
    pub fn unmap_page(
        &mut self,
        guest_page: u64,
        platform: &mut Platform,
        hart: usize,
    ) -> Result<PageToken<Allocated>, TrackerError> {
        if !self.mappings.contains_key(&guest_page) {
            return Err(TrackerError::NotMapped(guest_page));
        }
        self.root.token_write(platform, hart, guest_page * WORD_BYTES, 0)?;
        let token = self.mappings.remove(&guest_page).expect("checked above");
        platform.record(
            Some(hart),
            EventKind::TokenUnmap { serial: token.serial(), base: token.base(), owner: self.owner, guest_page },
            Outcome::Ok,
        );
        Ok(token)
    }

    pub fn translate(&self, guest_page: u64) -> Result<PhysAddr, TrackerError> {
        match (self.mappings.get(&guest_page), self.shared.get(&guest_page)) {
            (Some(t), _) => Ok(t.base()),
            (None, Some(addr)) => Ok(*addr),
            (None, None) => Err(TrackerError::NotMapped(guest_page)),
        }
    }

    /// Maps a non-confidential page. No token involved: shared pages are not
    /// confidential memory.
    pub fn map_shared(
        &mut self,
        guest_page: u64,
        addr: PhysAddr,
        platform: &mut Platform,
        hart: usize,
    ) -> Result<(), TrackerError> {
        self.check_slot(guest_page)?;
        let entry = addr.page_base().as_u64() | GUEST_ENTRY_VALID | GUEST_ENTRY_SHARED;
        self.root.token_write(platform, hart, guest_page * WORD_BYTES, entry)?;
        platform.record(Some(hart), EventKind::SharedMap { owner: self.owner, guest_page, addr }, Outcome::Ok);
        self.shared.insert(guest_page, addr);
        Ok(())
    }

    pub fn unmap_shared(&mut self, guest_page: u64, platform: &mut Platform, hart: usize) -> Result<PhysAddr, TrackerError> {
        let Some(addr) = self.shared.get(&guest_page).copied() else {
            return Err(TrackerError::NotMapped(guest_page));
        };
        self.root.token_write(platform, hart, guest_page * WORD_BYTES, 0)?;
        self.shared.remove(&guest_page);
        platform.record(Some(hart), EventKind::SharedUnmap { owner: self.owner, guest_page, addr }, Outcome::Ok);
        Ok(addr)
    }

    /// Tears the table down, returning every token (mappings first, root
    /// last) and the shared pages it referenced.
    pub fn into_parts(self) -> (Vec<(u64, PageToken<Allocated>)>, PageToken<Allocated>, Vec<(u64, PhysAddr)>) {
        (self.mappings.into_iter().collect(), self.root, self.shared.into_iter().collect())
    }

    pub(crate) fn fingerprint<H: Hasher>(&self, state: &mut H) {
        self.root.hash(state);
        self.mappings.hash(state);
        self.shared.hash(state);
        self.owner.hash(state);
    }

    /// Inserts a token without touching the root. Duplicate-token fault only.
    pub(crate) fn insert_unchecked(&mut self, guest_page: u64, token: PageToken<Allocated>) {
        self.mappings.insert(guest_page, token);
    }
}

impl Clone for PageTable {
    /// Copies the table as part of copying the whole machine it belongs to.
    fn clone(&self) -> Self {
        Self {
            root: self.root.forge(),
            mappings: self.mappings.iter().map(|(g, t)| (*g, t.forge())).collect(),
            shared: self.shared.clone(),
            owner: self.owner,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{AddrRange, IsolationConfig};
    use crate::tracker::{init_tracker, TrackerInit};
    use crate::PAGE_SIZE;

    fn setup(pages: u64) -> (Platform, TokenPool) {
        let mut p = Platform::new(32 * PAGE_SIZE, 1, 1).unwrap();
        let range = AddrRange::pages(16, pages);
        p.set_isolation(0, IsolationConfig { confidential: vec![range], ..Default::default() }).unwrap();
        let pool = init_tracker(&mut TrackerInit::new(), &mut p, 0, range).unwrap();
        (p, pool)
    }

    #[test]
    fn new_table_has_zero_root_and_no_mappings() {
        let (mut p, mut pool) = setup(2);
        p.fill(0, PhysAddr::from_page(16), 2 * PAGE_SIZE, 0xaa).unwrap();
        let pt = PageTable::new(&mut pool, DomainId::cvm(0), &mut p, 0).unwrap();
        assert!(pt.mappings().is_empty());
        assert!(p.page_is_zero(pt.root().base()));
    }

    #[test]
    fn new_table_from_empty_pool_fails() {
        let (mut p, mut pool) = setup(1);
        let _a = pool.allocate(&mut p, 0).unwrap();
        assert_eq!(PageTable::new(&mut pool, DomainId::cvm(0), &mut p, 0).unwrap_err(), TrackerError::OutOfMemory);
    }

    #[test]
    fn two_tables_have_distinct_roots() {
        let (mut p, mut pool) = setup(4);
        let a = PageTable::new(&mut pool, DomainId::cvm(0), &mut p, 0).unwrap();
        let b = PageTable::new(&mut pool, DomainId::cvm(1), &mut p, 0).unwrap();
        assert_ne!(a.root().base(), b.root().base());
    }

    #[test]
    fn map_translate_unmap() {
        let (mut p, mut pool) = setup(4);
        let mut pt = PageTable::new(&mut pool, DomainId::cvm(0), &mut p, 0).unwrap();
        let t = pool.allocate_zeroed(&mut p, 0).unwrap();
        let base = t.base();
        pt.map_page(3, t, &mut p, 0).unwrap();
        assert_eq!(pt.translate(3), Ok(base));
        assert_eq!(pt.translate(4), Err(TrackerError::NotMapped(4)));
        assert_eq!(p.peek(pt.root().base().add(24), 8), (base.as_u64() | GUEST_ENTRY_VALID).to_le_bytes());

        let other = pool.allocate_zeroed(&mut p, 0).unwrap();
        let (err, other) = pt.map_page(3, other, &mut p, 0).unwrap_err();
        assert_eq!(err, TrackerError::AlreadyMapped(3));

        let back = pt.unmap_page(3, &mut p, 0).unwrap();
        assert_eq!(back.base(), base);
        assert_eq!(pt.unmap_page(3, &mut p, 0).unwrap_err(), TrackerError::NotMapped(3));
        pt.map_page(3, other, &mut p, 0).unwrap();
        pt.map_page(5, back, &mut p, 0).unwrap();
        assert_eq!(pt.translate(5), Ok(base));
    }

    #[test]
    fn guest_page_beyond_root_rejected() {
        let (mut p, mut pool) = setup(2);
        let mut pt = PageTable::new(&mut pool, DomainId::cvm(0), &mut p, 0).unwrap();
        let t = pool.allocate_zeroed(&mut p, 0).unwrap();
        let (err, _t) = pt.map_page(GUEST_TABLE_ENTRIES, t, &mut p, 0).unwrap_err();
        assert!(matches!(err, TrackerError::OutOfBounds { .. }));
    }
}
