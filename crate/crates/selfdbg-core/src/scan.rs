//! Static inspection of the on-disk binary: what would an offline
//! scanner find at the configured switch sites?
//!
//! The runtime can describe its registered sites ([`collect_site_listing`])
//! and the scanner ([`scan_binary`]) checks the corresponding file bytes
//! for the two classic tells:
//!
//! * a trap opcode (`0xcc`) sitting at the site — the legacy method is a
//!   literal breakpoint baked into the text;
//! * a `movabs` immediate near the site pointing into the fault
//!   namespace — inline fault sites keep an encoded-pointer-shaped
//!   constant next to the access, while the reused-code sites take the
//!   pointer as an ordinary runtime argument and leave nothing behind.
//!
//! Runtime addresses are translated to file offsets through a named
//! anchor symbol, so the listing stays valid under address-space layout
//! randomization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::FaultKind;
use crate::context;
use crate::report::{ScanReport, ScanSiteDetail};
use crate::whitelist::SiteFlavor;
use crate::arch;

/// Serde for `"0x..."` strings in both directions; the listing is parsed
/// back by the harness, unlike the write-only reports.
mod hexstr {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = <&str as serde::Deserialize>::deserialize(d)?;
        crate::config::parse_hex_u64(s).map_err(serde::de::Error::custom)
    }
}

/// One registered site, as the running binary reports it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ListedSite {
    #[serde(with = "hexstr")]
    pub pc: u64,
    pub fault_kind: String,
    pub flavor: String,
    pub fragment_id: u32,
}

/// Everything the scanner needs from one run of the target binary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiteListing {
    pub binary: String,
    /// Exported symbol used to compute the load bias.
    pub anchor_symbol: String,
    #[serde(with = "hexstr")]
    pub anchor_runtime: u64,
    pub sites: Vec<ListedSite>,
}

pub const ANCHOR_SYMBOL: &str = "selfdbg_loop_entry";

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("runtime registry not initialized")]
    NotInitialized,
    #[error("could not read binary: {0}")]
    Io(#[from] std::io::Error),
    #[error("could not parse binary: {0}")]
    Elf(String),
    #[error("anchor symbol {0} not found in binary")]
    AnchorMissing(String),
    #[error("site pc {0:#x} maps outside every loadable segment")]
    OutsideSegments(u64),
}

/// Describe the registered sites of *this* process for a later offline
/// scan. Requires an initialized registry (protection itself may be
/// disabled; the sites exist either way).
pub fn collect_site_listing() -> Result<SiteListing, ScanError> {
    if !context::registry_ready() {
        return Err(ScanError::NotInitialized);
    }
    let reg = unsafe { context::registry() };
    let sites = reg
        .whitelist
        .iter()
        .map(|s| ListedSite {
            pc: s.pc,
            fault_kind: s.fault_kind.as_str().to_string(),
            flavor: s.flavor.as_str().to_string(),
            fragment_id: s.fragment_id,
        })
        .collect();
    Ok(SiteListing {
        binary: std::env::current_exe()?.display().to_string(),
        anchor_symbol: ANCHOR_SYMBOL.to_string(),
        anchor_runtime: arch::loop_entry_pc(),
        sites,
    })
}

/// How far around a site the scanner looks for an encoded-pointer-shaped
/// immediate. Inline sites materialize the constant in the instruction
/// directly before the access (ten to twelve bytes back); anything
/// farther away belongs to a neighboring site and must not be charged to
/// this one.
const IMMEDIATE_WINDOW: usize = 16;

/// Examine `path` at the addresses named by `listing`.
pub fn scan_binary(path: &Path, listing: &SiteListing) -> Result<ScanReport, ScanError> {
    let bytes = std::fs::read(path)?;
    let elf = goblin::elf::Elf::parse(&bytes).map_err(|e| ScanError::Elf(e.to_string()))?;

    let anchor_vaddr = find_symbol(&elf, &listing.anchor_symbol)
        .ok_or_else(|| ScanError::AnchorMissing(listing.anchor_symbol.clone()))?;
    let bias = listing.anchor_runtime.wrapping_sub(anchor_vaddr);

    let mut details = Vec::with_capacity(listing.sites.len());
    for site in &listing.sites {
        let vaddr = site.pc.wrapping_sub(bias);
        let off = vaddr_to_offset(&elf, vaddr).ok_or(ScanError::OutsideSegments(site.pc))? as usize;
        if off >= bytes.len() {
            return Err(ScanError::OutsideSegments(site.pc));
        }

        let trap_opcode = bytes[off] == 0xcc;
        let lo = off.saturating_sub(IMMEDIATE_WINDOW);
        let hi = (off + IMMEDIATE_WINDOW).min(bytes.len());
        let adjacent_immediate = window_has_namespace_immediate(&bytes[lo..hi]);

        details.push(ScanSiteDetail {
            pc: site.pc,
            fault_kind: site.fault_kind.clone(),
            flavor: site.flavor.clone(),
            trap_opcode,
            adjacent_immediate,
        });
    }

    Ok(ScanReport {
        report: ScanReport::KIND,
        binary: path.display().to_string(),
        site_count: details.len(),
        trap_opcodes: details.iter().filter(|d| d.trap_opcode).count(),
        adjacent_pairs: details.iter().filter(|d| d.adjacent_immediate).count(),
        details,
    })
}

fn find_symbol(elf: &goblin::elf::Elf<'_>, name: &str) -> Option<u64> {
    for sym in elf.syms.iter() {
        if elf.strtab.get_at(sym.st_name) == Some(name) && sym.st_value != 0 {
            return Some(sym.st_value);
        }
    }
    for sym in elf.dynsyms.iter() {
        if elf.dynstrtab.get_at(sym.st_name) == Some(name) && sym.st_value != 0 {
            return Some(sym.st_value);
        }
    }
    None
}

fn vaddr_to_offset(elf: &goblin::elf::Elf<'_>, vaddr: u64) -> Option<u64> {
    elf.program_headers
        .iter()
        .filter(|ph| ph.p_type == goblin::elf::program_header::PT_LOAD)
        .find(|ph| vaddr >= ph.p_vaddr && vaddr < ph.p_vaddr + ph.p_memsz)
        .map(|ph| vaddr - ph.p_vaddr + ph.p_offset)
}

/// Any `movabs r64, imm64` (REX.W + B8..BF) whose immediate lands in the
/// kernel half counts. This is what the inline sites leave in the text
/// and what a pattern scanner would key on. Low namespace ranges are not
/// matched: small immediates are everywhere in honest code, and the
/// encodings here target the kernel half precisely because nothing benign
/// materializes such constants.
fn window_has_namespace_immediate(window: &[u8]) -> bool {
    if window.len() < 10 {
        return false;
    }
    for i in 0..window.len() - 9 {
        let rex = window[i];
        let op = window[i + 1];
        if (rex == 0x48 || rex == 0x49) && (0xb8..=0xbf).contains(&op) {
            let imm = u64::from_le_bytes(window[i + 2..i + 10].try_into().unwrap());
            if imm >= crate::codec::KERNEL_HALF_BASE {
                return true;
            }
        }
    }
    false
}

/// The scanner's view of what each site category should look like; used
/// by consumers to phrase assertions without duplicating byte knowledge.
pub fn expected_tells(kind: FaultKind, flavor: SiteFlavor) -> (bool, bool) {
    match (kind, flavor) {
        (FaultKind::TrapReference, _) => (true, false),
        (_, SiteFlavor::Inline) => (false, true),
        (_, SiteFlavor::ReusedCode) => (false, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_round_trips_through_json() {
        let listing = SiteListing {
            binary: "/tmp/demo".into(),
            anchor_symbol: ANCHOR_SYMBOL.into(),
            anchor_runtime: 0x5555_0000_1000,
            sites: vec![ListedSite {
                pc: 0x5555_0000_2345,
                fault_kind: "segv-exec".into(),
                flavor: "inline".into(),
                fragment_id: 3,
            }],
        };
        let json = serde_json::to_string(&listing).unwrap();
        assert!(json.contains("\"0x555500002345\""), "{json}");
        let back: SiteListing = serde_json::from_str(&json).unwrap();
        assert_eq!(back.sites, listing.sites);
        assert_eq!(back.anchor_runtime, listing.anchor_runtime);
    }

    #[test]
    fn immediate_detector_matches_movabs_into_kernel_half() {
        // movabs r11, 0xffff800000000000
        let mut bytes = vec![0x90u8; 16];
        bytes.extend_from_slice(&[0x49, 0xbb, 0, 0, 0, 0, 0, 0x80, 0xff, 0xff]);
        bytes.extend_from_slice(&[0x90; 16]);
        assert!(window_has_namespace_immediate(&bytes));

        // movabs rax, 0x1234 — benign immediate, no hit.
        let mut benign = vec![0x90u8; 16];
        benign.extend_from_slice(&[0x48, 0xb8, 0x34, 0x12, 0, 0, 0, 0, 0, 0]);
        assert!(!window_has_namespace_immediate(&benign));

        assert!(!window_has_namespace_immediate(&[0x90; 32]));
    }

    /// Scanning our own test binary: the anchor resolves, inline stub
    /// sites carry the immediate, trap stubs carry 0xcc, reused sites
    /// carry neither. This runs entirely offline (identity bias), since
    /// the test binary is non-PIE-agnostic here: we feed runtime
    /// addresses and the runtime anchor from this very process.
    #[test]
    fn scanning_own_binary_separates_site_categories() {
        let exe = std::env::current_exe().unwrap();
        let listing = SiteListing {
            binary: exe.display().to_string(),
            anchor_symbol: ANCHOR_SYMBOL.into(),
            anchor_runtime: arch::loop_entry_pc(),
            sites: vec![
                ListedSite {
                    pc: arch::inline_site_pc(FaultKind::SegvLoadStore, 0),
                    fault_kind: "segv-load-store".into(),
                    flavor: "inline".into(),
                    fragment_id: 1,
                },
                ListedSite {
                    pc: arch::inline_site_pc(FaultKind::SegvExec, 0),
                    fault_kind: "segv-exec".into(),
                    flavor: "inline".into(),
                    fragment_id: 2,
                },
                ListedSite {
                    pc: arch::inline_site_pc(FaultKind::TrapReference, 0),
                    fault_kind: "trap-reference".into(),
                    flavor: "inline".into(),
                    fragment_id: 3,
                },
                ListedSite {
                    pc: arch::reused_site_pc(FaultKind::SegvLoadStore),
                    fault_kind: "segv-load-store".into(),
                    flavor: "reused".into(),
                    fragment_id: 0,
                },
                ListedSite {
                    pc: arch::reused_site_pc(FaultKind::SegvExec),
                    fault_kind: "segv-exec".into(),
                    flavor: "reused".into(),
                    fragment_id: 0,
                },
            ],
        };

        let report = scan_binary(&exe, &listing).unwrap();
        assert_eq!(report.site_count, 5);
        assert_eq!(report.trap_opcodes, 1, "{report:?}");
        assert_eq!(report.adjacent_pairs, 2, "{report:?}");

        for d in &report.details {
            let kind: FaultKind = d.fault_kind.parse().unwrap();
            let flavor: SiteFlavor = d.flavor.parse().unwrap();
            let (want_trap, want_imm) = expected_tells(kind, flavor);
            assert_eq!(d.trap_opcode, want_trap, "site {:#x}", d.pc);
            assert_eq!(d.adjacent_immediate, want_imm, "site {:#x}", d.pc);
        }
    }
}
