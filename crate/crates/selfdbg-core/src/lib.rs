//! Reciprocal self-debugging protection for Linux processes.
//!
//! A protected program runs as a pair of mutually ptrace-attached
//! processes. At any instant one member (the *thrower*) executes
//! application code and the other (the *catcher*) waits in a small
//! debugger loop. Both tracer slots being occupied, no external debugger
//! can attach to either member; exit-kill binds their lifetimes, so
//! killing one kills both.
//!
//! Control moves between the members without any visible call or IPC:
//! the thrower dereferences (or jumps through, or traps on) an *encoded*
//! pointer — a registered function address folded into a range of the
//! address space that can never be mapped — and the resulting fault is
//! the message. The catcher decodes the fault address back into the
//! intended target, checks the faulting site against a masked whitelist,
//! runs the requested fragment, and the roles swap for the reply. To an
//! observer each transfer is an ordinary-looking crash that never quite
//! happens.
//!
//! Crate layout, bottom up:
//!
//! * [`regs`], [`sys`], [`signals`], [`remote`] — thin, careful wrappers
//!   over the kernel interfaces (ptrace, wait, signals, process_vm).
//! * [`codec`] — fault namespaces and the encode/decode schemes that turn
//!   function addresses into faulting ones and back.
//! * [`whitelist`] — the masked invocation-site table both members use to
//!   tell intentional faults from genuine ones.
//! * [`protocol`] — the OS-free classification and action-planning rules.
//! * [`context`], [`arch`] — the shared switch context, the site stubs,
//!   and the register-level entry/exit paths.
//! * [`debugger`] — the catcher's wait/classify/execute loop.
//! * [`bootstrap`], [`fragments`] — the public runtime API: bring the
//!   pair up, register fragments, invoke them across the pair, tear the
//!   pair down.
//! * [`sim`] — a bounded-exploration model of the pair's signal handling
//!   for deadlock analysis.
//! * [`config`], [`eventlog`], [`report`], [`scan`] — configuration,
//!   structured logging, report shapes, and static binary inspection.

#[cfg(not(all(target_arch = "x86_64", target_os = "linux")))]
compile_error!("this runtime is specific to x86_64 Linux: it reasons about ptrace semantics, signal frames, and instruction encodings of that platform");

pub mod arch;
pub mod bootstrap;
pub mod codec;
pub mod config;
pub mod context;
pub mod debugger;
pub mod eventlog;
pub mod fragments;
pub mod protocol;
pub mod regs;
pub mod remote;
pub mod report;
pub mod scan;
pub mod signals;
pub mod sim;
pub mod sys;
pub mod whitelist;

pub use bootstrap::{
    protect_fini, protect_init, status, InitError, InitOutcome, ProtectionStatus, DISABLE_ENV,
};
pub use codec::{
    access, decode_target, encode_target, probe_namespace, select_scheme, CodecConfig, CodecError,
    CodecScheme, FaultKind, FaultNamespace, NsRange, ProbeReport, SchemeParams, KERNEL_HALF_BASE,
    KERNEL_HALF_LEN, MAX_FRAGMENTS, MAX_RANGES, MAX_SCHEMES,
};
pub use config::{parse_hex_u64, Config, ConfigError, DemoConfig, RuntimeConfig};
pub use eventlog::{events, parse_log, EventLog, ParsedEvent};
pub use fragments::{invoke_migrated, register_fragment, FragmentError, FragmentFn};
pub use protocol::{
    classify, classify_stop, plan_for, Action, ActionPlan, Classification, DebugStop, ProcessRole,
    ProtocolError, SwitchEvent,
};
pub use regs::RegisterSnapshot;
pub use report::{
    percentiles, AttackReport, BenchReport, BenchRow, DemoReport, ProcExit, ScanReport,
    ScanSiteDetail, SimScenarioReport, SimulateReport,
};
pub use scan::{
    collect_site_listing, expected_tells, scan_binary, ListedSite, ScanError, SiteListing,
    ANCHOR_SYMBOL,
};
pub use whitelist::{InvocationSite, SiteFlavor, Whitelist, WhitelistError, MAX_SITES};
