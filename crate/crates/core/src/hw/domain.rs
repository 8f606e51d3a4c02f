// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::str::FromStr;

/// Execution privilege. Exactly three levels with `Highest` reserved for the
/// security monitor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PrivilegeLevel {
    Lowest,
    Middle,
    Highest,
}

impl PrivilegeLevel {
    pub const ALL: [PrivilegeLevel; 3] = [Self::Lowest, Self::Middle, Self::Highest];

    pub fn code(self) -> char {
        match self {
            Self::Lowest => 'L',
            Self::Middle => 'M',
            Self::Highest => 'H',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'L' => Some(Self::Lowest),
            'M' => Some(Self::Middle),
            'H' => Some(Self::Highest),
            _ => None,
        }
    }
}

impl fmt::Display for PrivilegeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Identity of a security domain as seen by the hardware.
///
/// The id space is partitioned: `0` is the security monitor, `1` the
/// hypervisor, `2` the DMA pseudo-domain standing in for peripheral devices,
/// `VM_BASE..CVM_BASE` are legacy VMs and everything from `CVM_BASE` up is a
/// confidential VM. The hardware only needs to tell confidential from
/// non-confidential, which the partition encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainId(u32);

impl DomainId {
    pub const SM: DomainId = DomainId(0);
    pub const HYPERVISOR: DomainId = DomainId(1);
    pub const DMA: DomainId = DomainId(2);
    const VM_BASE: u32 = 0x10;
    const CVM_BASE: u32 = 0x100;

    pub const fn from_raw(raw: u32) -> Self {
        Self(raw)
    }

    pub const fn raw(self) -> u32 {
        self.0
    }

    pub fn vm(n: u32) -> Self {
        assert!(n < Self::CVM_BASE - Self::VM_BASE);
        Self(Self::VM_BASE + n)
    }

    pub fn cvm(n: u32) -> Self {
        Self(Self::CVM_BASE + n)
    }

    pub fn is_confidential(self) -> bool {
        self.0 >= Self::CVM_BASE
    }

    pub fn is_vm(self) -> bool {
        (Self::VM_BASE..Self::CVM_BASE).contains(&self.0)
    }

    /// Hypervisor, legacy VMs and the DMA pseudo-domain.
    pub fn is_non_confidential(self) -> bool {
        self != Self::SM && !self.is_confidential()
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::SM => write!(f, "sm"),
            Self::HYPERVISOR => write!(f, "hv"),
            Self::DMA => write!(f, "dma"),
            d if d.is_confidential() => write!(f, "cvm{}", d.0 - Self::CVM_BASE),
            d if d.is_vm() => write!(f, "vm{}", d.0 - Self::VM_BASE),
            d => write!(f, "dom{}", d.0),
        }
    }
}

impl FromStr for DomainId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |rest: &str| rest.parse::<u32>().map_err(|e| format!("bad domain `{s}`: {e}"));
        match s {
            "sm" => Ok(Self::SM),
            "hv" => Ok(Self::HYPERVISOR),
            "dma" => Ok(Self::DMA),
            _ => {
                if let Some(rest) = s.strip_prefix("cvm") {
                    Ok(Self::cvm(num(rest)?))
                } else if let Some(rest) = s.strip_prefix("vm") {
                    Ok(Self::vm(num(rest)?))
                } else if let Some(rest) = s.strip_prefix("dom") {
                    Ok(Self(num(rest)?))
                } else {
                    Err(format!("unknown domain `{s}`"))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn privilege_is_totally_ordered_with_unique_top() {
        let mut all = PrivilegeLevel::ALL;
        all.sort();
        assert_eq!(all, [PrivilegeLevel::Lowest, PrivilegeLevel::Middle, PrivilegeLevel::Highest]);
        assert_eq!(all.iter().filter(|p| **p == PrivilegeLevel::Highest).count(), 1);
    }

    #[test]
    fn domain_names_round_trip() {
        for d in [DomainId::SM, DomainId::HYPERVISOR, DomainId::DMA, DomainId::vm(3), DomainId::cvm(7)] {
            assert_eq!(d.to_string().parse::<DomainId>().unwrap(), d);
        }
        assert!(DomainId::cvm(0).is_confidential());
        assert!(DomainId::vm(0).is_non_confidential());
        assert!(!DomainId::SM.is_non_confidential());
    }
}
