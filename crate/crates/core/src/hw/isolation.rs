// SPDX-License-Identifier: Apache-2.0

//! Access-control state of the physical memory isolation component.

use std::collections::BTreeMap;

use crate::hw::{AddrRange, DomainId, HwError};

/// A non-confidential page the named CVM has been granted as a communication
/// buffer with the hypervisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SharedPage {
    pub range: AddrRange,
    pub cvm: DomainId,
}

/// Isolation component configuration.
///
/// Non-confidential domains may touch any memory outside `confidential`,
/// plus whatever `grants` they hold. Confidential domains may touch only
/// their `grants`. `read_only` ranges reject writes from everyone.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct IsolationConfig {
    pub confidential: Vec<AddrRange>,
    pub grants: BTreeMap<DomainId, Vec<AddrRange>>,
    pub shared: Vec<SharedPage>,
    pub read_only: Vec<AddrRange>,
}

fn pairwise_disjoint(ranges: &[AddrRange]) -> bool {
    ranges.iter().enumerate().all(|(i, a)| ranges[i + 1..].iter().all(|b| !a.overlaps(b)))
}

/// True iff every byte of `range` lies in some member of `set`.
pub(crate) fn covered_by(set: &[AddrRange], range: &AddrRange) -> bool {
    let mut cursor = range.start();
    while cursor < range.end() {
        match set.iter().find(|r| r.contains(cursor)) {
            Some(r) => cursor = r.end(),
            None => return false,
        }
    }
    true
}

impl IsolationConfig {
    pub fn is_confidential(&self, range: &AddrRange) -> bool {
        self.confidential.iter().any(|c| c.overlaps(range))
    }

    pub fn grants_of(&self, domain: DomainId) -> &[AddrRange] {
        self.grants.get(&domain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn grant(&mut self, domain: DomainId, range: AddrRange) {
        self.grants.entry(domain).or_default().push(range);
    }

    pub fn revoke_all(&mut self, domain: DomainId) {
        self.grants.remove(&domain);
    }

    /// Decision of the isolation component for a non-SM access.
    pub fn permits(&self, domain: DomainId, range: &AddrRange, write: bool) -> bool {
        if write && self.read_only.iter().any(|r| r.overlaps(range)) {
            return false;
        }
        if domain.is_confidential() {
            return covered_by(self.grants_of(domain), range);
        }
        !self.is_confidential(range) || covered_by(self.grants_of(domain), range)
    }

    /// Structural invariants checked on every privileged reconfiguration.
    pub fn validate(&self) -> Result<(), HwError> {
        let bad = |msg: String| Err(HwError::Config(msg));
        if !pairwise_disjoint(&self.confidential) {
            return bad("confidential regions overlap".into());
        }
        let shared: Vec<AddrRange> = self.shared.iter().map(|s| s.range).collect();
        if !pairwise_disjoint(&shared) {
            return bad("shared pages overlap".into());
        }
        if shared.iter().any(|s| !s.is_page_aligned() || self.is_confidential(s)) {
            return bad("shared page must be a page-aligned non-confidential range".into());
        }
        for (domain, ranges) in &self.grants {
            if !pairwise_disjoint(ranges) {
                return bad(format!("grants of {domain} overlap"));
            }
            for r in ranges {
                if domain.is_confidential() {
                    let own_shared = self.shared.iter().any(|s| s.cvm == *domain && s.range.contains_range(r));
                    if !own_shared && !covered_by(&self.confidential, r) {
                        return bad(format!("grant {r} to {domain} outside confidential memory"));
                    }
                } else if self.is_confidential(r) {
                    return bad(format!("grant {r} to non-confidential {domain} hits confidential memory"));
                }
            }
        }
        let cvm_grants: Vec<(DomainId, AddrRange)> = self
            .grants
            .iter()
            .filter(|(d, _)| d.is_confidential())
            .flat_map(|(d, rs)| rs.iter().map(move |r| (*d, *r)))
            .collect();
        for (i, (da, a)) in cvm_grants.iter().enumerate() {
            for (db, b) in &cvm_grants[i + 1..] {
                if da != db && a.overlaps(b) {
                    return bad(format!("grant {a} of {da} overlaps grant {b} of {db}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::PhysAddr;
    use crate::PAGE_SIZE;

    fn conf() -> IsolationConfig {
        IsolationConfig { confidential: vec![AddrRange::pages(8, 8)], ..Default::default() }
    }

    /// Brute-force overlap oracle over page numbers.
    fn pages_overlap(a: &AddrRange, b: &AddrRange) -> bool {
        let pa: Vec<u64> = (a.start().as_u64()..a.end().as_u64()).step_by(PAGE_SIZE as usize).collect();
        pa.iter().any(|p| b.contains(PhysAddr::new(*p)))
    }

    #[test]
    fn cvm_grants_overlapping_across_cvms_rejected() {
        let mut cfg = conf();
        cfg.grant(DomainId::cvm(1), AddrRange::pages(8, 2));
        cfg.grant(DomainId::cvm(2), AddrRange::pages(9, 1));
        assert!(pages_overlap(&AddrRange::pages(8, 2), &AddrRange::pages(9, 1)));
        assert!(matches!(cfg.validate(), Err(HwError::Config(_))));

        let mut ok = conf();
        ok.grant(DomainId::cvm(1), AddrRange::pages(8, 1));
        ok.grant(DomainId::cvm(2), AddrRange::pages(9, 1));
        assert!(!pages_overlap(&AddrRange::pages(8, 1), &AddrRange::pages(9, 1)));
        ok.validate().unwrap();
    }

    #[test]
    fn non_confidential_grant_into_confidential_rejected() {
        let mut cfg = conf();
        cfg.grant(DomainId::HYPERVISOR, AddrRange::pages(9, 1));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn permits_follows_world_split() {
        let mut cfg = conf();
        cfg.grant(DomainId::cvm(1), AddrRange::pages(8, 1));
        let inside = AddrRange::new(PhysAddr::from_page(8), 8);
        let outside = AddrRange::new(PhysAddr::from_page(2), 8);
        assert!(!cfg.permits(DomainId::HYPERVISOR, &inside, false));
        assert!(cfg.permits(DomainId::HYPERVISOR, &outside, true));
        assert!(cfg.permits(DomainId::cvm(1), &inside, true));
        assert!(!cfg.permits(DomainId::cvm(1), &outside, false));
        assert!(!cfg.permits(DomainId::cvm(2), &inside, false));
        assert!(!cfg.permits(DomainId::DMA, &inside, false));
    }

    #[test]
    fn read_only_blocks_writes_only() {
        let mut cfg = conf();
        cfg.read_only.push(AddrRange::pages(0, 1));
        let boot = AddrRange::new(PhysAddr::new(16), 8);
        assert!(cfg.permits(DomainId::HYPERVISOR, &boot, false));
        assert!(!cfg.permits(DomainId::HYPERVISOR, &boot, true));
    }
}
