//! Target-address codec: turns a code address into an address that is
//! guaranteed to fault when touched, and back.
//!
//! A switch request smuggles its real target (fragment entry or return
//! continuation) through the fault address of an intentional SIGSEGV. The
//! codec owns the *fault namespace* — address ranges that are known to be
//! inaccessible — and a small set of reversible encodings whose images stay
//! inside that namespace. A decision table keyed on the signaling method
//! picks the scheme per event.
//!
//! Platform note: on x86-64 only *canonical* addresses take the page-fault
//! path. A non-canonical pointer raises #GP instead, and for that class of
//! fault the kernel reports `si_addr = 0`, destroying the smuggled payload.
//! The default namespace therefore lives in the canonical upper half
//! (kernel space, always inaccessible from user mode) rather than in the
//! non-canonical hole.

use serde::Serialize;
use thiserror::Error;

/// How an invocation site raises its fault. Doubles as the key of the
/// scheme decision table.
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum FaultKind {
    /// A load or store through an encoded pointer.
    SegvLoadStore = 0,
    /// An indirect branch to an encoded address.
    SegvExec = 1,
    /// Legacy explicit trap instruction; carries an identifier in a
    /// register instead of an encoded fault address.
    TrapReference = 2,
}

impl FaultKind {
    pub const COUNT: usize = 3;

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::SegvLoadStore => "segv-load-store",
            FaultKind::SegvExec => "segv-exec",
            FaultKind::TrapReference => "trap-reference",
        }
    }
}

impl std::str::FromStr for FaultKind {
    type Err = String;

    /// Accepts the canonical names plus the short forms used on the
    /// command line and in switch-method config keys.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "segv-load-store" | "segv-rw" => Ok(FaultKind::SegvLoadStore),
            "segv-exec" | "segv-x" => Ok(FaultKind::SegvExec),
            "trap-reference" | "trap" => Ok(FaultKind::TrapReference),
            other => Err(format!(
                "unknown fault kind '{other}' (expected segv-rw, segv-x, or trap)"
            )),
        }
    }
}

/// Memory access classes a namespace range is guaranteed to fault for.
pub mod access {
    pub const LOAD: u32 = 1 << 0;
    pub const STORE: u32 = 1 << 1;
    pub const EXEC: u32 = 1 << 2;
    pub const ALL: u32 = LOAD | STORE | EXEC;
}

/// One contiguous range of guaranteed-faulting addresses.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NsRange {
    pub base: u64,
    pub len: u64,
    /// Bitmask of `access::*` classes this range faults for.
    pub kinds: u32,
    pub _pad: u32,
}

impl NsRange {
    pub const fn new(base: u64, len: u64, kinds: u32) -> Self {
        NsRange { base, len, kinds, _pad: 0 }
    }

    pub fn contains(&self, addr: u64, kind: u32) -> bool {
        self.kinds & kind == kind && addr >= self.base && addr - self.base < self.len
    }
}

pub const MAX_RANGES: usize = 4;
pub const MAX_SCHEMES: usize = 4;
/// Upper bound on registered fragments; sized for desk-scale demos.
pub const MAX_FRAGMENTS: usize = 16;

/// The set of address ranges used as the codomain of every encoding.
///
/// Fixed capacity and plain-old-data on purpose: the structure is copied
/// byte-for-byte into the counterpart process after registration, so it must
/// not contain pointers into this process's heap.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FaultNamespace {
    pub ranges: [NsRange; MAX_RANGES],
    pub count: u32,
    pub _pad: u32,
}

impl FaultNamespace {
    pub const fn empty() -> Self {
        FaultNamespace { ranges: [NsRange::new(0, 0, 0); MAX_RANGES], count: 0, _pad: 0 }
    }

    pub fn push(&mut self, range: NsRange) {
        assert!((self.count as usize) < MAX_RANGES, "fault namespace overflow");
        self.ranges[self.count as usize] = range;
        self.count += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = &NsRange> {
        self.ranges[..self.count as usize].iter()
    }

    pub fn contains(&self, addr: u64, kind: u32) -> bool {
        self.iter().any(|r| r.contains(addr, kind))
    }
}

/// Canonical upper-half base: everything at or above this is kernel space
/// on x86-64 and faults with an intact `si_addr` when touched from user
/// mode.
pub const KERNEL_HALF_BASE: u64 = 0xffff_8000_0000_0000;
/// Length chosen so the namespace ends well below the fixed vsyscall page
/// at 0xffffffffff600000, which is mapped (if at all) into every process.
pub const KERNEL_HALF_LEN: u64 = 0x7000_0000_0000;

impl Default for FaultNamespace {
    fn default() -> Self {
        let mut ns = FaultNamespace::empty();
        // Classic NULL-page region; nothing maps the first 64 KiB under
        // default mmap_min_addr.
        ns.push(NsRange::new(0, 0x1_0000, access::ALL));
        ns.push(NsRange::new(KERNEL_HALF_BASE, KERNEL_HALF_LEN, access::ALL));
        ns
    }
}

/// Parameters of one reversible encoding.
#[repr(C, u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeParams {
    /// `enc = t | mask`; injective over targets with `t & mask == 0`.
    MaskOr { mask: u64 },
    /// `enc = t ^ key`; an involution, bijective over the full word.
    XorKey { key: u64 },
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecScheme {
    pub scheme_id: u16,
    pub _pad: u16,
    /// The signaling method this scheme is bound to by the decision table.
    pub fault_kind: FaultKind,
    pub params: SchemeParams,
}

impl CodecScheme {
    pub const fn unused() -> Self {
        CodecScheme {
            scheme_id: 0,
            _pad: 0,
            fault_kind: FaultKind::SegvLoadStore,
            params: SchemeParams::MaskOr { mask: 0 },
        }
    }
}

/// Runtime codec state: namespace, schemes, decision table, and the code
/// segment bounds used to validate decodes. Plain-old-data so it can be
/// mirrored into the counterpart verbatim.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CodecConfig {
    pub namespace: FaultNamespace,
    pub schemes: [CodecScheme; MAX_SCHEMES],
    pub scheme_count: u32,
    /// fault kind index -> scheme_id (0 = no scheme for that kind).
    pub decision: [u16; FaultKind::COUNT],
    pub _pad: u16,
    /// Code segment bounds registered at init; decoded targets must fall
    /// inside, everything else is treated as a genuine fault.
    pub code_lo: u64,
    pub code_hi: u64,
    /// Legacy trap path: request identifier -> fragment entry.
    pub trap_targets: [[u64; 2]; MAX_FRAGMENTS],
    pub trap_target_count: u32,
    pub _pad2: u32,
}

impl CodecConfig {
    pub fn new(namespace: FaultNamespace, code_lo: u64, code_hi: u64) -> Self {
        CodecConfig {
            namespace,
            schemes: [CodecScheme::unused(); MAX_SCHEMES],
            scheme_count: 0,
            decision: [0; FaultKind::COUNT],
            _pad: 0,
            code_lo,
            code_hi,
            trap_targets: [[0; 2]; MAX_FRAGMENTS],
            trap_target_count: 0,
            _pad2: 0,
        }
    }

    /// Default scheme pair: loads/stores use a plain OR into the kernel
    /// half, indirect branches use an XOR whose key keeps bits 63..47 set
    /// so every image stays canonical-upper-half.
    pub fn with_default_schemes(namespace: FaultNamespace, code_lo: u64, code_hi: u64) -> Self {
        let mut cfg = CodecConfig::new(namespace, code_lo, code_hi);
        cfg.add_scheme(CodecScheme {
            scheme_id: 1,
            _pad: 0,
            fault_kind: FaultKind::SegvLoadStore,
            params: SchemeParams::MaskOr { mask: KERNEL_HALF_BASE },
        });
        cfg.add_scheme(CodecScheme {
            scheme_id: 2,
            _pad: 0,
            fault_kind: FaultKind::SegvExec,
            params: SchemeParams::XorKey { key: KERNEL_HALF_BASE ^ 0x0000_0000_3b9a_ca11 },
        });
        cfg
    }

    pub fn add_scheme(&mut self, scheme: CodecScheme) {
        assert!((self.scheme_count as usize) < MAX_SCHEMES, "scheme table overflow");
        assert!(scheme.scheme_id != 0, "scheme_id 0 is reserved for 'none'");
        self.schemes[self.scheme_count as usize] = scheme;
        self.scheme_count += 1;
        self.decision[scheme.fault_kind as usize] = scheme.scheme_id;
    }

    pub fn scheme_by_id(&self, id: u16) -> Option<&CodecScheme> {
        self.schemes[..self.scheme_count as usize].iter().find(|s| s.scheme_id == id)
    }

    pub fn add_trap_target(&mut self, ident: u64, entry: u64) {
        assert!((self.trap_target_count as usize) < MAX_FRAGMENTS, "trap table overflow");
        self.trap_targets[self.trap_target_count as usize] = [ident, entry];
        self.trap_target_count += 1;
    }

    pub fn trap_target(&self, ident: u64) -> Option<u64> {
        self.trap_targets[..self.trap_target_count as usize]
            .iter()
            .find(|[id, _]| *id == ident)
            .map(|[_, entry]| *entry)
    }

    pub fn code_range_contains(&self, addr: u64) -> bool {
        addr >= self.code_lo && addr < self.code_hi
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("target {target:#x} cannot be embedded injectively under scheme {scheme_id}")]
    TargetOutOfRange { target: u64, scheme_id: u16 },
    #[error("decoded value {decoded:#x} falls outside the registered code segment")]
    DecodeOutOfCodeRange { decoded: u64 },
    #[error("no scheme bound to fault kind {0:?}")]
    NoScheme(FaultKind),
    #[error("namespace range {base:#x}+{len:#x} failed its fault probe (kind {kind})")]
    ProbeFailure { base: u64, len: u64, kind: u32 },
    #[error("could not spawn probe child: errno {0}")]
    ProbeSpawn(i32),
}

fn access_kind_for(fault_kind: FaultKind) -> u32 {
    match fault_kind {
        FaultKind::SegvLoadStore => access::LOAD,
        FaultKind::SegvExec => access::EXEC,
        FaultKind::TrapReference => 0,
    }
}

/// Encode `target` into a guaranteed-faulting address.
///
/// The caller guarantees `target` lies in the registered code segment; this
/// function enforces injectivity under the scheme parameters and membership
/// of the result in the namespace.
pub fn encode_target(
    target: u64,
    scheme: &CodecScheme,
    ns: &FaultNamespace,
) -> Result<u64, CodecError> {
    let out_of_range = CodecError::TargetOutOfRange { target, scheme_id: scheme.scheme_id };
    let encoded = match scheme.params {
        SchemeParams::MaskOr { mask } => {
            if target & mask != 0 {
                return Err(out_of_range);
            }
            target | mask
        }
        SchemeParams::XorKey { key } => target ^ key,
    };
    if !ns.contains(encoded, access_kind_for(scheme.fault_kind)) {
        return Err(out_of_range);
    }
    Ok(encoded)
}

/// Exact inverse of [`encode_target`]. The decoded value must land in the
/// registered code segment, otherwise the event is not ours.
pub fn decode_target(
    fault_address: u64,
    scheme: &CodecScheme,
    code_range: (u64, u64),
) -> Result<u64, CodecError> {
    let decoded = match scheme.params {
        SchemeParams::MaskOr { mask } => fault_address & !mask,
        SchemeParams::XorKey { key } => fault_address ^ key,
    };
    if decoded < code_range.0 || decoded >= code_range.1 {
        return Err(CodecError::DecodeOutOfCodeRange { decoded });
    }
    Ok(decoded)
}

/// Pick the scheme for a fault event. Deterministic table lookup; the
/// legacy trap kind has no address scheme and is resolved through the
/// identifier table instead.
pub fn select_scheme(fault_kind: FaultKind, config: &CodecConfig) -> Result<&CodecScheme, CodecError> {
    if fault_kind == FaultKind::TrapReference {
        return Err(CodecError::NoScheme(fault_kind));
    }
    let id = config.decision[fault_kind as usize];
    config.scheme_by_id(id).ok_or(CodecError::NoScheme(fault_kind))
}

/// Outcome of touching one probe address in a sacrificial child.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProbeSample {
    pub base: u64,
    pub len: u64,
    pub kind: u32,
    pub addr: u64,
    pub faulted: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ProbeReport {
    pub samples: Vec<ProbeSample>,
}

impl ProbeReport {
    pub fn all_faulted(&self) -> bool {
        self.samples.iter().all(|s| s.faulted)
    }

    /// Hard gate used before protection starts: every sampled address of
    /// every range must have faulted.
    pub fn ensure_all_faulted(&self) -> Result<(), CodecError> {
        match self.samples.iter().find(|s| !s.faulted) {
            None => Ok(()),
            Some(s) => Err(CodecError::ProbeFailure { base: s.base, len: s.len, kind: s.kind }),
        }
    }
}

/// Verify, in throwaway child processes, that every namespace range
/// actually faults for every access class it claims. Spawns one child per
/// sampled address because the first fault kills the child.
pub fn probe_namespace(ns: &FaultNamespace) -> Result<ProbeReport, CodecError> {
    let mut report = ProbeReport::default();
    for range in ns.iter() {
        for kind in [access::LOAD, access::STORE, access::EXEC] {
            if range.kinds & kind == 0 {
                continue;
            }
            for addr in sample_addrs(range) {
                let faulted = probe_one(addr, kind)?;
                report.samples.push(ProbeSample {
                    base: range.base,
                    len: range.len,
                    kind,
                    addr,
                    faulted,
                });
            }
        }
    }
    Ok(report)
}

fn sample_addrs(range: &NsRange) -> Vec<u64> {
    let mut addrs = vec![range.base, range.base + (range.len / 2 & !7)];
    if range.len >= 8 {
        addrs.push(range.base + range.len - 8);
    }
    addrs.dedup();
    addrs
}

/// Touch `addr` with the given access class in a forked child; report
/// whether the child died of SIGSEGV. Child code is async-signal-safe only.
fn probe_one(addr: u64, kind: u32) -> Result<bool, CodecError> {
    unsafe {
        let pid = libc::fork();
        if pid < 0 {
            return Err(CodecError::ProbeSpawn(*libc::__errno_location()));
        }
        if pid == 0 {
            // Drop any inherited SIGSEGV/SIGBUS handlers (the test harness
            // installs one for stack-overflow reporting) so the fault kills
            // us with its default disposition.
            let mut sa: libc::sigaction = std::mem::zeroed();
            sa.sa_sigaction = libc::SIG_DFL;
            libc::sigaction(libc::SIGSEGV, &sa, std::ptr::null_mut());
            libc::sigaction(libc::SIGBUS, &sa, std::ptr::null_mut());
            match kind {
                access::LOAD => {
                    let v = std::ptr::read_volatile(addr as *const u8);
                    std::hint::black_box(v);
                }
                access::STORE => {
                    std::ptr::write_volatile(addr as *mut u8, 0xa5);
                }
                access::EXEC => {
                    let f: extern "C" fn() = std::mem::transmute(addr as usize);
                    f();
                }
                _ => {}
            }
            // Reached only if the access did not fault.
            libc::_exit(0);
        }
        let mut status = 0;
        if libc::waitpid(pid, &mut status, 0) < 0 {
            return Err(CodecError::ProbeSpawn(*libc::__errno_location()));
        }
        Ok(libc::WIFSIGNALED(status) && libc::WTERMSIG(status) == libc::SIGSEGV)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    const CODE_LO: u64 = 0x0000_5500_0000_0000;
    const CODE_HI: u64 = 0x0000_5500_0100_0000;

    fn test_config() -> CodecConfig {
        CodecConfig::with_default_schemes(FaultNamespace::default(), CODE_LO, CODE_HI)
    }

    #[test]
    fn mask_or_is_a_plain_or() {
        // 32-bit-style example: mask the classic kernel split.
        let ns = {
            let mut ns = FaultNamespace::empty();
            ns.push(NsRange::new(0xc000_0000, 0x4000_0000, access::ALL));
            ns
        };
        let scheme = CodecScheme {
            scheme_id: 1,
            _pad: 0,
            fault_kind: FaultKind::SegvLoadStore,
            params: SchemeParams::MaskOr { mask: 0xc000_0000 },
        };
        assert_eq!(encode_target(0x0001_1000, &scheme, &ns).unwrap(), 0xc001_1000);
        assert_eq!(
            decode_target(0xc001_1000, &scheme, (0, 0x4000_0000)).unwrap(),
            0x0001_1000
        );
    }

    #[test]
    fn xor_key_is_an_involution() {
        let cfg = test_config();
        let scheme = *select_scheme(FaultKind::SegvExec, &cfg).unwrap();
        let t = CODE_LO + 0x1234;
        let enc = encode_target(t, &scheme, &cfg.namespace).unwrap();
        assert_ne!(enc, t);
        assert_eq!(decode_target(enc, &scheme, (cfg.code_lo, cfg.code_hi)).unwrap(), t);
    }

    #[test]
    fn mask_or_rejects_targets_overlapping_the_mask() {
        let cfg = test_config();
        let scheme = *select_scheme(FaultKind::SegvLoadStore, &cfg).unwrap();
        let bad = KERNEL_HALF_BASE | 0x1000;
        assert!(matches!(
            encode_target(bad, &scheme, &cfg.namespace),
            Err(CodecError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn decode_outside_code_segment_is_an_error() {
        let cfg = test_config();
        let scheme = *select_scheme(FaultKind::SegvLoadStore, &cfg).unwrap();
        // An address in the namespace that decodes below the code segment.
        let stray = KERNEL_HALF_BASE | 0x42;
        assert!(matches!(
            decode_target(stray, &scheme, (cfg.code_lo, cfg.code_hi)),
            Err(CodecError::DecodeOutOfCodeRange { .. })
        ));
    }

    #[test]
    fn select_scheme_is_deterministic_and_kind_bound() {
        let cfg = test_config();
        let a = select_scheme(FaultKind::SegvLoadStore, &cfg).unwrap();
        let b = select_scheme(FaultKind::SegvLoadStore, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fault_kind, FaultKind::SegvLoadStore);
        assert_eq!(
            select_scheme(FaultKind::SegvExec, &cfg).unwrap().fault_kind,
            FaultKind::SegvExec
        );
        assert_eq!(
            select_scheme(FaultKind::TrapReference, &cfg),
            Err(CodecError::NoScheme(FaultKind::TrapReference))
        );
    }

    #[test]
    fn round_trip_oracle_100k_per_scheme() {
        // Brute-force oracle: encode→decode must be the identity and every
        // encoded address must sit inside the namespace.
        let cfg = test_config();
        let mut rng = StdRng::seed_from_u64(0x5e1f_db99);
        for kind in [FaultKind::SegvLoadStore, FaultKind::SegvExec] {
            let scheme = *select_scheme(kind, &cfg).unwrap();
            for _ in 0..100_000 {
                let t = rng.gen_range(cfg.code_lo..cfg.code_hi);
                let enc = encode_target(t, &scheme, &cfg.namespace).unwrap();
                assert!(cfg.namespace.contains(enc, access_kind_for(kind)));
                assert_eq!(
                    decode_target(enc, &scheme, (cfg.code_lo, cfg.code_hi)).unwrap(),
                    t
                );
            }
        }
    }

    #[test]
    fn boundary_targets_round_trip() {
        let cfg = test_config();
        for kind in [FaultKind::SegvLoadStore, FaultKind::SegvExec] {
            let scheme = *select_scheme(kind, &cfg).unwrap();
            for t in [CODE_LO, CODE_LO + 1, CODE_HI - 1] {
                let enc = encode_target(t, &scheme, &cfg.namespace).unwrap();
                assert_eq!(
                    decode_target(enc, &scheme, (cfg.code_lo, cfg.code_hi)).unwrap(),
                    t
                );
            }
        }
    }

    #[test]
    fn trap_target_table_lookup() {
        let mut cfg = test_config();
        cfg.add_trap_target(7, CODE_LO + 0x100);
        assert_eq!(cfg.trap_target(7), Some(CODE_LO + 0x100));
        assert_eq!(cfg.trap_target(8), None);
    }

    proptest! {
        #[test]
        fn injectivity(a in CODE_LO..CODE_HI, b in CODE_LO..CODE_HI) {
            let cfg = test_config();
            for kind in [FaultKind::SegvLoadStore, FaultKind::SegvExec] {
                let scheme = select_scheme(kind, &cfg).unwrap();
                let ea = encode_target(a, scheme, &cfg.namespace).unwrap();
                let eb = encode_target(b, scheme, &cfg.namespace).unwrap();
                prop_assert_eq!(a == b, ea == eb);
            }
        }

        #[test]
        fn namespace_membership(t in CODE_LO..CODE_HI) {
            let cfg = test_config();
            for kind in [FaultKind::SegvLoadStore, FaultKind::SegvExec] {
                let scheme = select_scheme(kind, &cfg).unwrap();
                let enc = encode_target(t, scheme, &cfg.namespace).unwrap();
                prop_assert!(cfg.namespace.contains(enc, access_kind_for(kind)));
                prop_assert!(!cfg.code_range_contains(enc));
            }
        }
    }

    // The namespace probes fork sacrificial children; they are exercised
    // here and again by the acceptance suite.

    #[test]
    fn default_namespace_probes_clean() {
        let report = probe_namespace(&FaultNamespace::default()).unwrap();
        assert!(!report.samples.is_empty());
        assert!(report.all_faulted(), "default namespace must fault everywhere: {report:?}");
        report.ensure_all_faulted().unwrap();
    }

    #[test]
    fn mapped_page_fails_the_probe() {
        // A namespace that wrongly claims a mapped, readable page faults.
        let page = Box::leak(Box::new([0u8; 4096]));
        let mut ns = FaultNamespace::empty();
        ns.push(NsRange::new(page.as_ptr() as u64, 4096, access::LOAD));
        let report = probe_namespace(&ns).unwrap();
        assert!(!report.all_faulted());
        assert!(matches!(
            report.ensure_all_faulted(),
            Err(CodecError::ProbeFailure { .. })
        ));
    }
}
