//! Process-global runtime state.
//!
//! Everything the two processes must agree on lives in plain statics.
//! Because the pair is created by fork, each static sits at the same
//! virtual address in both images, which is what lets the catcher read
//! its counterpart's context with one peek at a compile-time-known
//! address, and lets registration mirror state across with a single bulk
//! write. All of it is plain old data: no pointers into the heap, no
//! Drop, no allocator involvement anywhere the debugger loop might touch.

use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicI32, AtomicU32, AtomicU64, Ordering};

use serde::Serialize;

use crate::codec::{CodecConfig, FaultKind, MAX_FRAGMENTS};
use crate::regs::RegisterSnapshot;
use crate::whitelist::{SiteFlavor, Whitelist};

/// Where the protection currently stands for this process.
pub const PROT_OFF: u32 = 0;
pub const PROT_ACTIVE: u32 = 1;
/// `SELFDBG_DISABLE` was set: calls run locally, no pair exists.
pub const PROT_DISABLED_ENV: u32 = 2;
/// Teardown declared: remaining invocations run locally.
pub const PROT_FINISHED: u32 = 3;

pub static PROT_STATE: AtomicU32 = AtomicU32::new(PROT_OFF);
pub static COUNTERPART_PID: AtomicI32 = AtomicI32::new(0);
/// 0 = thrower, 1 = catcher; mirrors which side of the loop we are on.
pub static MY_ROLE: AtomicU32 = AtomicU32::new(0);
/// Raw fd of the shared event log (-1 when disabled).
pub static LOG_FD: AtomicI32 = AtomicI32::new(-1);
/// Set once before fork; the whitelist's at-rest mask.
pub static SESSION_MASK: AtomicU64 = AtomicU64::new(0);
/// Counts completed control transfers in this process (telemetry only).
pub static SWITCH_COUNT: AtomicU64 = AtomicU64::new(0);

pub const ROLE_THROWER: u32 = 0;
pub const ROLE_CATCHER: u32 = 1;

/// Per-process switch scratch state. The catcher reads and writes the
/// *counterpart's* copy of this struct remotely, so the layout is fixed
/// and field offsets are exported below.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct SwitchContext {
    /// The suspended app context this process owes its counterpart: filled
    /// by the catcher on an invoke switch, consumed by the counterpart on
    /// the matching return switch. `rip`/`rsp` are already normalized to
    /// the resume point (return address popped).
    pub archived: RegisterSnapshot,
    /// Nonzero while `archived` is live. The discriminator between invoke
    /// and return switches: a faulter that holds an archive is returning.
    pub archived_valid: u32,
    /// Nonzero while a migrated fragment runs in this process; nested
    /// migration attempts fail closed on it.
    pub in_fragment: u32,
    /// Fault kind of the invoke site, so the return switch is raised with
    /// the same signaling method.
    pub return_kind: u32,
    pub _pad: u32,
    /// Fragment result, written locally by the fragment runner before it
    /// raises the return switch; read remotely by the return handler.
    pub fragment_result: u64,
    /// Legacy trap-method mailbox: identifier, arguments, result. Written
    /// by the thrower before the trap, peeked word-by-word by the catcher.
    pub mailbox_id: u64,
    pub mailbox_args: [u64; 2],
    pub mailbox_result: u64,
}

impl SwitchContext {
    pub const fn new() -> Self {
        SwitchContext {
            archived: RegisterSnapshot::zeroed(),
            archived_valid: 0,
            in_fragment: 0,
            return_kind: 0,
            _pad: 0,
            fragment_result: 0,
            mailbox_id: 0,
            mailbox_args: [0; 2],
            mailbox_result: 0,
        }
    }
}

pub static mut SWITCH_CONTEXT: SwitchContext = SwitchContext::new();

/// Address of this process's switch context — equal in both processes.
pub fn switch_context_addr() -> u64 {
    std::ptr::addr_of!(SWITCH_CONTEXT) as u64
}

// Field offsets for remote access, derived rather than hardcoded.
pub fn ctx_off_archived() -> u64 {
    0
}

pub fn ctx_off_archived_valid() -> u64 {
    std::mem::size_of::<RegisterSnapshot>() as u64
}

pub fn ctx_off_fragment_result() -> u64 {
    ctx_off_archived_valid() + 16
}

pub fn ctx_off_mailbox_id() -> u64 {
    ctx_off_fragment_result() + 8
}

pub fn ctx_off_mailbox_args() -> u64 {
    ctx_off_mailbox_id() + 8
}

pub fn ctx_off_mailbox_result() -> u64 {
    ctx_off_mailbox_args() + 16
}

/// One registered fragment, as the registry stores it.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FragmentEntry {
    pub id: u32,
    pub flavor: SiteFlavor,
    pub method: FaultKind,
    /// Index into the per-method site stub tables (inline flavor).
    pub slot: u32,
    /// Plain function address of the fragment body.
    pub entry: u64,
    /// The entry address run through this method's encoding scheme.
    pub encoded: u64,
}

impl FragmentEntry {
    pub const fn vacant() -> Self {
        FragmentEntry {
            id: 0,
            flavor: SiteFlavor::Inline,
            method: FaultKind::SegvLoadStore,
            slot: 0,
            entry: 0,
            encoded: 0,
        }
    }
}

/// Everything registration produces, in one contiguous POD block so a
/// single bulk write mirrors it into the counterpart.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct Registry {
    pub whitelist: Whitelist,
    pub codec: CodecConfig,
    pub fragments: [FragmentEntry; MAX_FRAGMENTS],
    /// Written last during sync, so a mirrored registry is never seen with
    /// a count ahead of its entries.
    pub fragment_count: u32,
    /// Next free inline stub slot.
    pub next_slot: u32,
}

static mut REGISTRY: MaybeUninit<Registry> = MaybeUninit::uninit();
static REGISTRY_READY: AtomicU32 = AtomicU32::new(0);

/// Install the registry. Called exactly once, before the fork.
///
/// # Safety
/// No other thread may touch the registry concurrently; init happens
/// before the pair (and before any helper threads) exists.
pub unsafe fn registry_init(whitelist: Whitelist, codec: CodecConfig) {
    let reg = Registry {
        whitelist,
        codec,
        fragments: [FragmentEntry::vacant(); MAX_FRAGMENTS],
        fragment_count: 0,
        next_slot: 0,
    };
    (*std::ptr::addr_of_mut!(REGISTRY)).write(reg);
    REGISTRY_READY.store(1, Ordering::Release);
}

pub fn registry_ready() -> bool {
    REGISTRY_READY.load(Ordering::Acquire) != 0
}

/// # Safety
/// Only valid after [`registry_init`]; callers must serialize mutation
/// (the runtime mutates it only from the single app thread).
pub unsafe fn registry() -> &'static mut Registry {
    debug_assert!(registry_ready());
    (*std::ptr::addr_of_mut!(REGISTRY)).assume_init_mut()
}

pub fn registry_addr() -> u64 {
    std::ptr::addr_of!(REGISTRY) as u64
}

pub fn registry_size() -> usize {
    std::mem::size_of::<Registry>()
}

/// Dedicated stack for the debugger loop. A process demoted to catcher is
/// pointed here by its counterpart; whatever frames it abandons later are
/// plain bytes, reused from the top on the next demotion.
pub const DEBUGGER_STACK_SIZE: usize = 256 * 1024;

#[repr(C, align(16))]
pub struct DebuggerStack(pub [u8; DEBUGGER_STACK_SIZE]);

pub static mut DEBUGGER_STACK: DebuggerStack = DebuggerStack([0; DEBUGGER_STACK_SIZE]);

/// Initial rsp for a demoted catcher: top of the dedicated stack, 16-byte
/// aligned, with slack so the entry shim can align and call.
pub fn debugger_stack_top() -> u64 {
    let base = std::ptr::addr_of!(DEBUGGER_STACK) as u64;
    (base + DEBUGGER_STACK_SIZE as u64 - 64) & !0xf
}

/// Sizes of the fixed runtime state, for the footprint report: the whole
/// protection apparatus is a few statics, no heap.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FootprintReport {
    pub registry_bytes: usize,
    pub switch_context_bytes: usize,
    pub debugger_stack_bytes: usize,
    pub whitelist_bytes: usize,
    pub total_bytes: usize,
}

pub fn static_footprint_report() -> FootprintReport {
    let registry_bytes = std::mem::size_of::<Registry>();
    let switch_context_bytes = std::mem::size_of::<SwitchContext>();
    let debugger_stack_bytes = DEBUGGER_STACK_SIZE;
    let whitelist_bytes = std::mem::size_of::<Whitelist>();
    FootprintReport {
        registry_bytes,
        switch_context_bytes,
        debugger_stack_bytes,
        whitelist_bytes,
        total_bytes: registry_bytes + switch_context_bytes + debugger_stack_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::mem::{offset_of, size_of};

    #[test]
    fn context_offsets_match_the_layout() {
        assert_eq!(ctx_off_archived_valid(), offset_of!(SwitchContext, archived_valid) as u64);
        assert_eq!(ctx_off_fragment_result(), offset_of!(SwitchContext, fragment_result) as u64);
        assert_eq!(ctx_off_mailbox_id(), offset_of!(SwitchContext, mailbox_id) as u64);
        assert_eq!(ctx_off_mailbox_args(), offset_of!(SwitchContext, mailbox_args) as u64);
        assert_eq!(ctx_off_mailbox_result(), offset_of!(SwitchContext, mailbox_result) as u64);
    }

    #[test]
    fn context_fields_are_word_aligned_for_peekpoke() {
        // Remote access goes word-by-word; every remotely-touched field
        // must sit on an 8-byte boundary.
        for off in [
            ctx_off_archived_valid(),
            ctx_off_fragment_result(),
            ctx_off_mailbox_id(),
            ctx_off_mailbox_args(),
            ctx_off_mailbox_result(),
        ] {
            assert_eq!(off % 8, 0, "offset {off} not word aligned");
        }
        assert_eq!(switch_context_addr() % 8, 0);
    }

    #[test]
    fn debugger_stack_top_is_aligned_and_inside() {
        let base = std::ptr::addr_of!(DEBUGGER_STACK) as u64;
        let top = debugger_stack_top();
        assert_eq!(top % 16, 0);
        assert!(top > base);
        assert!(top < base + DEBUGGER_STACK_SIZE as u64);
    }

    #[test]
    fn registry_is_plain_old_data_sized() {
        // The registry must stay bulk-copyable; a pointerful redesign
        // would silently break the mirror-to-counterpart step.
        assert_eq!(registry_size(), size_of::<Registry>());
        assert!(registry_size() < 64 * 1024, "registry should stay small: one writev");
    }

    #[test]
    fn footprint_report_adds_up() {
        let fp = static_footprint_report();
        assert_eq!(
            fp.total_bytes,
            fp.registry_bytes + fp.switch_context_bytes + fp.debugger_stack_bytes
        );
        assert!(fp.whitelist_bytes > 0);
        assert!(fp.whitelist_bytes <= fp.registry_bytes);
    }

    #[test]
    fn registry_init_round_trips() {
        // Safe here: tests in this binary that touch the registry run in
        // this one process and only ever initialize it once.
        if !registry_ready() {
            let wl = Whitelist::new(0xabcd_ef01_2345_6789).unwrap();
            let codec = CodecConfig::new(
                crate::codec::FaultNamespace::default(),
                0x1000,
                0x2000,
            );
            unsafe { registry_init(wl, codec) };
        }
        assert!(registry_ready());
        let reg = unsafe { registry() };
        assert_eq!(reg.fragment_count, 0);
        assert_eq!(reg.codec.code_lo, 0x1000);
    }
}
