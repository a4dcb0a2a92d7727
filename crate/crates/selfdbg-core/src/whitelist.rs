//! Registered invocation sites and the verification whitelist.
//!
//! Every program point that deliberately faults is registered here. When
//! the active mini-debugger catches a stop it consults the whitelist to
//! distinguish an actual switch request from a genuine crash. Entries are
//! XOR-masked in memory so a byte scan of the process image never finds
//! the plain site addresses.

use serde::Serialize;
use thiserror::Error;

use crate::codec::{FaultKind, MAX_FRAGMENTS};

/// How the faulting instruction at a site came to be.
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SiteFlavor {
    /// A dedicated setup+fault instruction pair emitted for this site.
    Inline = 0,
    /// The site reuses an instruction that also executes benignly on other
    /// paths, separating the fault from its setup in space and time.
    ReusedCode = 1,
}

impl SiteFlavor {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteFlavor::Inline => "inline",
            SiteFlavor::ReusedCode => "reused",
        }
    }
}

impl std::str::FromStr for SiteFlavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inline" => Ok(SiteFlavor::Inline),
            "reused" | "reused-code" => Ok(SiteFlavor::ReusedCode),
            other => Err(format!("unknown site flavor '{other}' (expected inline or reused)")),
        }
    }
}

/// One registered fault-raising program point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InvocationSite {
    /// Address of the faulting instruction. For indirect-branch sites this
    /// is the return label pushed by the branch, since the faulting PC
    /// itself is the (garbage) encoded target.
    pub pc: u64,
    pub fault_kind: FaultKind,
    pub scheme_id: u16,
    pub flavor: SiteFlavor,
    pub fragment_id: u32,
}

/// Whitelist capacity: invoke sites per fragment plus runtime return sites.
pub const MAX_SITES: usize = MAX_FRAGMENTS * 3 + 8;

const ENTRY_WORDS: usize = 3;

/// Fixed-capacity, fork-shareable whitelist with per-entry masking.
///
/// Lookup is a linear unmask-and-compare over at most [`MAX_SITES`]
/// entries; the loop allocates nothing because it runs inside the debugger
/// loop of the catching process.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct Whitelist {
    mask: u64,
    len: u32,
    frozen: u32,
    entries: [[u64; ENTRY_WORDS]; MAX_SITES],
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WhitelistError {
    #[error("a site is already registered at pc {pc:#x}")]
    DuplicateSite { pc: u64 },
    #[error("whitelist is full ({0} entries)")]
    Full(usize),
    #[error("whitelist is frozen; registration after the first switch is rejected")]
    Frozen,
    #[error("mask must be nonzero so entries never sit in memory in the clear")]
    ZeroMask,
}

impl Whitelist {
    pub const fn empty() -> Self {
        Whitelist { mask: 0, len: 0, frozen: 0, entries: [[0; ENTRY_WORDS]; MAX_SITES] }
    }

    pub fn new(mask: u64) -> Result<Self, WhitelistError> {
        if mask == 0 {
            return Err(WhitelistError::ZeroMask);
        }
        Ok(Whitelist { mask, ..Whitelist::empty() })
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen != 0
    }

    /// Reject all further registration; called at the first switch so a
    /// foothold gained later cannot add "legitimate" sites.
    pub fn freeze(&mut self) {
        self.frozen = 1;
    }

    fn pack(&self, site: &InvocationSite) -> [u64; ENTRY_WORDS] {
        let meta = (site.fault_kind as u64)
            | (site.scheme_id as u64) << 8
            | (site.flavor as u64) << 24
            | (site.fragment_id as u64) << 32;
        [site.pc ^ self.mask, meta ^ self.mask, site.pc.rotate_left(17) ^ self.mask]
    }

    fn unpack(&self, entry: &[u64; ENTRY_WORDS]) -> InvocationSite {
        let meta = entry[1] ^ self.mask;
        InvocationSite {
            pc: entry[0] ^ self.mask,
            fault_kind: match meta & 0xff {
                0 => FaultKind::SegvLoadStore,
                1 => FaultKind::SegvExec,
                _ => FaultKind::TrapReference,
            },
            scheme_id: (meta >> 8) as u16,
            flavor: if (meta >> 24) & 0xff == 0 { SiteFlavor::Inline } else { SiteFlavor::ReusedCode },
            fragment_id: (meta >> 32) as u32,
        }
    }

    pub fn insert(&mut self, site: InvocationSite) -> Result<(), WhitelistError> {
        if self.is_frozen() {
            return Err(WhitelistError::Frozen);
        }
        if self.lookup(site.pc).is_some() {
            return Err(WhitelistError::DuplicateSite { pc: site.pc });
        }
        if self.len() >= MAX_SITES {
            return Err(WhitelistError::Full(MAX_SITES));
        }
        self.entries[self.len as usize] = self.pack(&site);
        self.len += 1;
        Ok(())
    }

    pub fn lookup(&self, pc: u64) -> Option<InvocationSite> {
        let probe = pc ^ self.mask;
        for entry in &self.entries[..self.len as usize] {
            if entry[0] == probe {
                let site = self.unpack(entry);
                // Integrity word catches a torn or tampered entry.
                if entry[2] ^ self.mask == site.pc.rotate_left(17) {
                    return Some(site);
                }
            }
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = InvocationSite> + '_ {
        self.entries[..self.len as usize].iter().map(|e| self.unpack(e))
    }

    /// Raw view of the at-rest representation, for stealth assertions.
    pub fn at_rest_bytes(&self) -> &[u8] {
        unsafe {
            std::slice::from_raw_parts(
                self.entries.as_ptr() as *const u8,
                self.len as usize * ENTRY_WORDS * 8,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(pc: u64) -> InvocationSite {
        InvocationSite {
            pc,
            fault_kind: FaultKind::SegvLoadStore,
            scheme_id: 1,
            flavor: SiteFlavor::Inline,
            fragment_id: 3,
        }
    }

    #[test]
    fn insert_then_lookup_round_trips_all_fields() {
        let mut wl = Whitelist::new(0xdead_beef_cafe_f00d).unwrap();
        let s = InvocationSite {
            pc: 0x5555_0000_1234,
            fault_kind: FaultKind::SegvExec,
            scheme_id: 2,
            flavor: SiteFlavor::ReusedCode,
            fragment_id: 9,
        };
        wl.insert(s).unwrap();
        assert_eq!(wl.lookup(s.pc), Some(s));
        assert_eq!(wl.lookup(s.pc + 1), None);
    }

    #[test]
    fn duplicate_pc_is_rejected() {
        let mut wl = Whitelist::new(1).unwrap();
        wl.insert(site(0x1000)).unwrap();
        assert_eq!(
            wl.insert(site(0x1000)),
            Err(WhitelistError::DuplicateSite { pc: 0x1000 })
        );
    }

    #[test]
    fn empty_whitelist_matches_nothing() {
        let wl = Whitelist::new(7).unwrap();
        assert_eq!(wl.lookup(0), None);
        assert_eq!(wl.lookup(0x1000), None);
    }

    #[test]
    fn frozen_whitelist_rejects_registration() {
        let mut wl = Whitelist::new(1).unwrap();
        wl.insert(site(0x1000)).unwrap();
        wl.freeze();
        assert_eq!(wl.insert(site(0x2000)), Err(WhitelistError::Frozen));
        // Lookup still works after the freeze.
        assert!(wl.lookup(0x1000).is_some());
    }

    #[test]
    fn zero_mask_is_rejected() {
        assert_eq!(Whitelist::new(0).err(), Some(WhitelistError::ZeroMask));
    }

    #[test]
    fn at_rest_bytes_never_contain_plain_pcs() {
        let mut wl = Whitelist::new(0x0123_4567_89ab_cdef).unwrap();
        let pcs = [0x5555_dead_0010u64, 0x5555_dead_0020, 0x5555_dead_0030];
        for pc in pcs {
            wl.insert(site(pc)).unwrap();
        }
        let bytes = wl.at_rest_bytes();
        for pc in pcs {
            let needle = pc.to_ne_bytes();
            let found = bytes.windows(8).any(|w| w == needle);
            assert!(!found, "plaintext pc {pc:#x} visible at rest");
            assert!(wl.lookup(pc).is_some());
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let mut wl = Whitelist::new(5).unwrap();
        for i in 0..MAX_SITES {
            wl.insert(site(0x1000 + i as u64 * 16)).unwrap();
        }
        assert_eq!(
            wl.insert(site(0xffff_0000)),
            Err(WhitelistError::Full(MAX_SITES))
        );
    }
}
