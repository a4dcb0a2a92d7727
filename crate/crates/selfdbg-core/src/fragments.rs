//! The application-facing fragment API.
//!
//! A *fragment* is a function the application surrenders to the runtime:
//! after registration, calling it through [`invoke_migrated`] executes it
//! in the counterpart process, reached through an intentional fault
//! rather than any call instruction. Registration picks the signaling
//! method and site shape, wires the encoded entry address into the
//! matching site, whitelists the site, and mirrors the whole registry
//! into the counterpart so both members classify identically.

use std::fmt::Write as _;
use std::sync::atomic::Ordering;

use arrayvec::ArrayString;
use thiserror::Error;

use crate::codec::{self, FaultKind, MAX_FRAGMENTS};
use crate::context::{self, FragmentEntry, PROT_ACTIVE, ROLE_THROWER};
use crate::debugger;
use crate::eventlog::{events, EventLog};
use crate::remote;
use crate::whitelist::{InvocationSite, SiteFlavor, WhitelistError};
use crate::arch;

/// The shape every fragment body must have. Two word-sized arguments, one
/// word-sized result: enough to pass values or pointers-by-agreement, and
/// identical to what the fault-time register convention can carry.
pub type FragmentFn = unsafe extern "C" fn(u64, u64) -> u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FragmentError {
    #[error("runtime not initialized; call protect_init first")]
    NotInitialized,
    #[error("fragment id {0} already registered")]
    DuplicateFragment(u32),
    #[error("fragment table full ({MAX_FRAGMENTS} max)")]
    TableFull,
    #[error("registration is closed once switching has begun")]
    RegistrationClosed,
    #[error("fragment entry {0:#x} lies outside this binary's text segment")]
    EntryOutsideText(u64),
    #[error("no fragment registered with id {0}")]
    UnknownFragment(u32),
    #[error("nested migrated invocation (fragment called invoke_migrated)")]
    NestedInvocation,
    #[error("counterpart died; its exit-kill is taking this process down")]
    CounterpartGone,
    #[error("codec rejected the entry address: {0}")]
    Codec(#[from] codec::CodecError),
    #[error("whitelist rejected the site: {0}")]
    Whitelist(#[from] WhitelistError),
    #[error("registry sync to counterpart failed: {0}")]
    Sync(String),
}

fn log() -> EventLog {
    EventLog::from_raw_fd(context::LOG_FD.load(Ordering::Relaxed))
}

/// Claim the next inline stub slot. One counter serves all three stub
/// families; with the slot count equal to the fragment cap it can never
/// run dry before the fragment table does.
fn take_slot(reg: &mut context::Registry) -> Result<usize, FragmentError> {
    let slot = reg.next_slot as usize;
    if slot >= arch::NUM_SLOTS {
        return Err(FragmentError::TableFull);
    }
    reg.next_slot += 1;
    Ok(slot)
}

/// Hand a function over to the runtime under the caller-chosen id.
///
/// `method` selects how invocations signal the counterpart (which fault
/// the site raises); `flavor` selects the site shape for the segv
/// methods — a dedicated inline stub or the shared reused-code helper.
/// The trap method always uses its dedicated per-slot stub.
pub fn register_fragment(
    id: u32,
    entry: FragmentFn,
    method: FaultKind,
    flavor: SiteFlavor,
) -> Result<(), FragmentError> {
    if !context::registry_ready() {
        return Err(FragmentError::NotInitialized);
    }
    let reg = unsafe { context::registry() };
    if reg.whitelist.is_frozen() {
        return Err(FragmentError::RegistrationClosed);
    }
    if reg.fragments[..reg.fragment_count as usize].iter().any(|f| f.id == id) {
        return Err(FragmentError::DuplicateFragment(id));
    }
    if reg.fragment_count as usize >= MAX_FRAGMENTS {
        return Err(FragmentError::TableFull);
    }
    let entry_addr = entry as usize as u64;
    if !reg.codec.code_range_contains(entry_addr) {
        return Err(FragmentError::EntryOutsideText(entry_addr));
    }

    let mut record = FragmentEntry {
        id,
        flavor,
        method,
        slot: 0,
        entry: entry_addr,
        encoded: 0,
    };

    match method {
        FaultKind::TrapReference => {
            // Legacy method: a per-slot int3 stub plus the identifier
            // table the catcher resolves ids against.
            let slot = take_slot(reg)?;
            record.slot = slot as u32;
            record.flavor = SiteFlavor::Inline;
            let pc = arch::inline_site_pc(method, slot);
            reg.codec.add_trap_target(u64::from(id), entry_addr);
            reg.whitelist.insert(InvocationSite {
                pc,
                fault_kind: method,
                scheme_id: 0,
                flavor: SiteFlavor::Inline,
                fragment_id: id,
            })?;
        }
        _ => {
            let scheme = *codec::select_scheme(method, &reg.codec)?;
            let encoded = codec::encode_target(entry_addr, &scheme, &reg.codec.namespace)?;
            record.encoded = encoded;
            match flavor {
                SiteFlavor::Inline => {
                    let slot = take_slot(reg)?;
                    record.slot = slot as u32;
                    unsafe { arch::set_encoded(method, slot, encoded) };
                    reg.whitelist.insert(InvocationSite {
                        pc: arch::inline_site_pc(method, slot),
                        fault_kind: method,
                        scheme_id: scheme.scheme_id,
                        flavor: SiteFlavor::Inline,
                        fragment_id: id,
                    })?;
                }
                SiteFlavor::ReusedCode => {
                    // All reused-flavor fragments share one site per
                    // method; the first registration whitelists it and
                    // later ones find it already present, bit-identical.
                    let site = InvocationSite {
                        pc: arch::reused_site_pc(method),
                        fault_kind: method,
                        scheme_id: scheme.scheme_id,
                        flavor: SiteFlavor::ReusedCode,
                        fragment_id: 0,
                    };
                    match reg.whitelist.insert(site) {
                        Ok(()) | Err(WhitelistError::DuplicateSite { .. }) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
    }

    reg.fragments[reg.fragment_count as usize] = record;
    reg.fragment_count += 1;

    sync_to_counterpart()?;

    let mut detail = ArrayString::<192>::new();
    let _ = write!(
        detail,
        "fragment {id} at {entry_addr:#x}, {} {}",
        method.as_str(),
        record.flavor.as_str()
    );
    log().emit(events::REGISTRY_SYNC, &detail);
    Ok(())
}

/// Invoke fragment `id` with two arguments, in the counterpart if the
/// pair is live, locally otherwise (disabled, finished, or never
/// initialized — registration still requires init, so "never initialized"
/// can only mean the registry was built in disabled mode).
pub fn invoke_migrated(id: u32, a0: u64, a1: u64) -> Result<u64, FragmentError> {
    if !context::registry_ready() {
        return Err(FragmentError::NotInitialized);
    }
    let reg = unsafe { context::registry() };
    let entry = *reg.fragments[..reg.fragment_count as usize]
        .iter()
        .find(|f| f.id == id)
        .ok_or(FragmentError::UnknownFragment(id))?;

    if context::PROT_STATE.load(Ordering::Relaxed) != PROT_ACTIVE {
        // Pass-through mode: same result, no counterpart involved.
        let f: FragmentFn = unsafe { std::mem::transmute(entry.entry as usize) };
        return Ok(unsafe { f(a0, a1) });
    }

    debug_assert_eq!(context::MY_ROLE.load(Ordering::Relaxed), ROLE_THROWER);

    // A fragment body calling back into the migration machinery would
    // need the counterpart to be a thrower and a catcher at once.
    let ctx = unsafe { &mut *std::ptr::addr_of_mut!(context::SWITCH_CONTEXT) };
    if ctx.in_fragment != 0 {
        return Err(FragmentError::NestedInvocation);
    }

    // A counterpart killed while this member was off in application code
    // is not dead yet — it sits parked in its exit notice with nobody
    // waiting. Release it, then idle: its exit-kill is already aimed
    // here, and raising a fault now would only make the death messier.
    if debugger::release_dying_counterpart() {
        for _ in 0..5000 {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        return Err(FragmentError::CounterpartGone);
    }

    if !reg.whitelist.is_frozen() {
        freeze_whitelist(reg)?;
    }

    let result = unsafe {
        match (entry.method, entry.flavor) {
            (FaultKind::TrapReference, _) => {
                // Legacy request block: the identifier rides in the call
                // register, the arguments park in the fork-shared mailbox
                // for the catcher to fetch word by word. Volatile because
                // the reader lives outside this program's view.
                std::ptr::write_volatile(&mut ctx.mailbox_id, u64::from(id));
                std::ptr::write_volatile(&mut ctx.mailbox_args, [a0, a1]);
                arch::call_trap(entry.slot as usize, u64::from(id))
            }
            (_, SiteFlavor::Inline) => arch::call_inline(entry.method, entry.slot as usize, a0, a1),
            (FaultKind::SegvLoadStore, SiteFlavor::ReusedCode) => {
                arch::selfdbg_read_word(entry.encoded, a0, a1)
            }
            (FaultKind::SegvExec, SiteFlavor::ReusedCode) => {
                arch::selfdbg_call_indirect(entry.encoded, a0, a1)
            }
        }
    };
    Ok(result)
}

/// Close registration on first use: freeze locally, mirror the frozen
/// state, and log it. After this no site can be added in either member.
fn freeze_whitelist(reg: &mut context::Registry) -> Result<(), FragmentError> {
    reg.whitelist.freeze();
    sync_to_counterpart()?;
    let mut detail = ArrayString::<64>::new();
    let _ = write!(detail, "{} sites", reg.whitelist.len());
    log().emit(events::WHITELIST_FROZEN, &detail);
    Ok(())
}

/// Mirror the encoded-slot arrays and then the registry into the
/// counterpart. Layouts are fork-identical, so the same virtual addresses
/// hold on both sides. Slot arrays go first: a registry whose count
/// includes a fragment must never precede that fragment's slot value.
fn sync_to_counterpart() -> Result<(), FragmentError> {
    if context::PROT_STATE.load(Ordering::Relaxed) != PROT_ACTIVE {
        return Ok(());
    }
    let counterpart = context::COUNTERPART_PID.load(Ordering::Relaxed);
    if counterpart <= 0 {
        return Ok(());
    }
    let err = |e: std::io::Error| FragmentError::Sync(e.to_string());

    unsafe {
        let rw = &*std::ptr::addr_of!(arch::SELFDBG_ENCODED_RW);
        let x = &*std::ptr::addr_of!(arch::SELFDBG_ENCODED_X);
        remote::write_obj(counterpart, arch::encoded_rw_addr(), rw).map_err(err)?;
        remote::write_obj(counterpart, arch::encoded_x_addr(), x).map_err(err)?;
        let reg = context::registry() as *const context::Registry;
        remote::write_exact(
            counterpart,
            context::registry_addr(),
            std::slice::from_raw_parts(reg as *const u8, context::registry_size()),
        )
        .map_err(err)?;
    }
    Ok(())
}
