//! The `scan` engine: ask a binary to describe its registered sites, then
//! examine the binary on disk at those spots.
//!
//! The split matters: site addresses only exist at runtime (ASLR, slot
//! assignment), but the tell being scanned for — a literal trap opcode or
//! an encoded-pointer immediate — is a static property of the file.  So
//! the target runs once in disabled mode to emit its site listing, and the
//! ELF is read cold.

use std::io;
use std::path::Path;
use std::process::Command;

use selfdbg_core::codec::FaultKind;
use selfdbg_core::report::ScanReport;
use selfdbg_core::scan::{scan_binary, SiteListing};
use selfdbg_core::whitelist::SiteFlavor;

#[derive(Debug, Clone)]
pub struct ScanOpts {
    pub fragments: u32,
    pub method: FaultKind,
    pub flavor: SiteFlavor,
}

impl Default for ScanOpts {
    fn default() -> Self {
        ScanOpts { fragments: 3, method: FaultKind::SegvLoadStore, flavor: SiteFlavor::Inline }
    }
}

/// Runs `binary --emit-sites` and parses the listing it prints.
pub fn emit_sites(binary: &Path, opts: &ScanOpts) -> io::Result<SiteListing> {
    let output = Command::new(binary)
        .arg("--emit-sites")
        .arg("--fragments")
        .arg(opts.fragments.to_string())
        .arg("--method")
        .arg(opts.method.as_str())
        .arg("--flavor")
        .arg(opts.flavor.as_str())
        .output()?;
    if !output.status.success() {
        return Err(io::Error::new(
            io::ErrorKind::Other,
            format!(
                "--emit-sites run exited {}; stderr:\n{}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            ),
        ));
    }
    serde_json::from_slice(&output.stdout)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("bad site listing: {e}")))
}

/// Full scan: collect the listing from a live run, then grade the file.
pub fn run_scan(binary: &Path, opts: &ScanOpts) -> io::Result<ScanReport> {
    let listing = emit_sites(binary, opts)?;
    scan_binary(binary, &listing)
        .map_err(|e| io::Error::new(io::ErrorKind::Other, format!("scan failed: {e}")))
}
