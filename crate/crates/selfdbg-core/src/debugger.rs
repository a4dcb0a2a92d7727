//! The mini-debugger each process runs while it holds the catcher seat.
//!
//! The loop waits on the counterpart, turns raw wait statuses into
//! [`DebugStop`] values, classifies them against the whitelist and codec,
//! and executes the planned actions. Two hard rules hold everywhere in
//! this file:
//!
//! * **No allocation.** A catcher that transfers control away abandons its
//!   stack frames wholesale; anything owning heap memory would leak. All
//!   scratch space is POD on the dedicated debugger stack, and log lines
//!   are built in fixed buffers.
//! * **Fail closed.** Anything inconsistent — an integrity mismatch, a
//!   ptrace error that is not the counterpart dying — ends the pair rather
//!   than limping on half-protected. Exit-kill turns our exit into the
//!   counterpart's.

use std::fmt::Write as _;
use std::sync::atomic::Ordering;

use arrayvec::ArrayString;

use crate::codec::{encode_target, select_scheme, FaultKind};
use crate::context::{
    self, ctx_off_archived, ctx_off_archived_valid, ctx_off_fragment_result, ctx_off_mailbox_args,
    ctx_off_mailbox_id, switch_context_addr, ROLE_CATCHER, ROLE_THROWER,
};
use crate::eventlog::{events, EventLog};
use crate::protocol::{
    classify_stop, plan_for, Action, Classification, DebugStop, ProcessRole, SwitchEvent,
};
use crate::regs::RegisterSnapshot;
use crate::remote;
use crate::signals;
use crate::sys::{self, Pid, WaitStatus};
use crate::arch;
use crate::whitelist::{InvocationSite, SiteFlavor};

fn log() -> EventLog {
    EventLog::from_raw_fd(context::LOG_FD.load(Ordering::Relaxed))
}

/// Entry point the counterpart points a demoted catcher at (via SETREGS).
/// Also called directly by the initial catcher after the handshake.
#[no_mangle]
pub extern "C" fn selfdbg_debugger_loop_entry() -> ! {
    debugger_loop()
}

/// What control transfer to perform once the plan's bookkeeping is done.
enum Transfer {
    /// Invoke switch: run this fragment here, then raise the return.
    Invoke { entry: u64, a0: u64, a1: u64, return_kind: FaultKind },
    /// Return switch: reinstate this already-patched context.
    Resume { resume: RegisterSnapshot },
}

/// The catcher seat. Never returns: the seat is left only by transferring
/// control (which reuses this stack later) or by exiting.
pub fn debugger_loop() -> ! {
    let counterpart = context::COUNTERPART_PID.load(Ordering::Relaxed);
    context::MY_ROLE.store(ROLE_CATCHER, Ordering::Relaxed);
    // Idempotent for a demoted catcher (mask already set remotely), and
    // the initial catcher's own belt-and-braces.
    let _ = signals::block_all_when_catcher();

    loop {
        let status = match sys::wait_status(counterpart) {
            Ok(s) => s,
            Err(e) if e.raw_os_error() == Some(libc::ECHILD) => {
                // Counterpart already reaped or vanished (the ignored
                // SIGCHLD disposition auto-reaps exited children).
                emit(events::COUNTERPART_EXIT, format_args!("counterpart {counterpart} gone"));
                cleanup_exit(0);
            }
            Err(_) => cleanup_exit(74),
        };

        match sys::decode_status(status) {
            WaitStatus::Exited { code } => {
                emit(events::COUNTERPART_EXIT, format_args!("exit code {code}"));
                let _ = sys::detach(counterpart, 0);
                cleanup_exit(code);
            }
            WaitStatus::Signaled { sig } => {
                emit(events::COUNTERPART_EXIT, format_args!("killed by signal {sig}"));
                cleanup_exit(128 + sig);
            }
            WaitStatus::Continued => continue,
            WaitStatus::Stopped { sig, event } => {
                if event == sys::EVENT_EXIT {
                    // Counterpart is mid-exit. Release it so death can
                    // complete; its exit-kill (if still armed) then takes
                    // us, otherwise we mirror its status.
                    let msg = sys::geteventmsg(counterpart).unwrap_or(0);
                    emit(events::COUNTERPART_EXIT, format_args!("exit notice, status {msg:#x}"));
                    let _ = sys::detach(counterpart, 0);
                    cleanup_exit(mirror_exit_code(msg as i32));
                }
                if event == sys::EVENT_STOP {
                    // Group-stop or an interrupt. Nothing in the protocol
                    // continues a group-stopped counterpart (no one ever
                    // sends SIGCONT); keep it observable and keep waiting.
                    emit(events::SUPPRESSED_NOTICE, format_args!("group-stop sig {sig}"));
                    let _ = sys::listen(counterpart);
                    continue;
                }

                let stop = build_debug_stop(counterpart, sig);
                handle_stop(counterpart, stop);
            }
        }
    }
}

/// Turn a signal-delivery stop into the protocol's view of it.
fn build_debug_stop(pid: Pid, sig: i32) -> DebugStop {
    let si = match sys::getsiginfo(pid) {
        Ok(si) => si,
        Err(_) => return DebugStop::Other,
    };

    match sig {
        libc::SIGSEGV | libc::SIGBUS => {
            if si.si_code <= 0 {
                // kill()/tgkill() forgeries carry user codes; a switch
                // request is always a kernel-generated fault.
                return DebugStop::Signal { signo: sig };
            }
            let regs = match sys::getregs(pid) {
                Ok(r) => r,
                Err(_) => return DebugStop::Other,
            };
            let fault_address = unsafe { si.si_addr() } as u64;
            if regs.rip == fault_address {
                // Instruction fetch at the encoded address: an exec-kind
                // site. The identifying pc is the return label the
                // indirect call pushed.
                let pc = remote::peek_word(pid, regs.rsp).unwrap_or(0);
                DebugStop::Fault(SwitchEvent {
                    pid,
                    faulting_pc: pc,
                    fault_kind: FaultKind::SegvExec,
                    fault_address: Some(fault_address),
                    regs,
                })
            } else {
                DebugStop::Fault(SwitchEvent {
                    pid,
                    faulting_pc: regs.rip,
                    fault_kind: FaultKind::SegvLoadStore,
                    fault_address: Some(fault_address),
                    regs,
                })
            }
        }
        libc::SIGTRAP => {
            if si.si_code != libc::SI_KERNEL {
                return DebugStop::Signal { signo: sig };
            }
            let regs = match sys::getregs(pid) {
                Ok(r) => r,
                Err(_) => return DebugStop::Other,
            };
            // rip points just past the int3 byte.
            DebugStop::Fault(SwitchEvent {
                pid,
                faulting_pc: regs.rip.wrapping_sub(1),
                fault_kind: FaultKind::TrapReference,
                fault_address: None,
                regs,
            })
        }
        _ => DebugStop::Signal { signo: sig },
    }
}

fn handle_stop(counterpart: Pid, stop: DebugStop) {
    let reg = unsafe { context::registry() };
    let cls = classify_stop(&stop, &reg.whitelist, &reg.codec);

    // Switches need their peeks done while the counterpart is still
    // stopped and still has its fault-time registers.
    let prepared = match (&cls, &stop) {
        (Classification::SwitchRequest { site, target }, DebugStop::Fault(ev)) => {
            match prepare_switch(counterpart, ev, site, *target) {
                Ok(t) => Some(t),
                Err(code) => {
                    emit(events::GENUINE_FAULT, format_args!("switch preparation failed"));
                    cleanup_exit(code);
                }
            }
        }
        _ => None,
    };

    let plan = match plan_for(cls, ProcessRole::Catcher) {
        Ok(p) => p,
        Err(_) => cleanup_exit(74),
    };

    for action in plan {
        match action {
            Action::TransitionCounterpartToCatcher => {
                let ev_regs = match &stop {
                    DebugStop::Fault(ev) => ev.regs,
                    _ => RegisterSnapshot::zeroed(),
                };
                if transition_to_catcher(counterpart, &ev_regs).is_err() {
                    cleanup_exit(74);
                }
            }
            Action::TransferControlTo { .. } => {
                let t = prepared.expect("plan orders transition before transfer");
                transfer_control(t);
            }
            Action::ForwardSignal { signal } => {
                emit(events::FORWARD_SIGNAL, format_args!("signal {signal}"));
                if sys::cont(counterpart, signal).is_err() {
                    // Counterpart died under us; the next wait sees it.
                }
            }
            Action::DetachAndExit => {
                emit(events::DETACH, format_args!("counterpart {counterpart}"));
                let _ = sys::detach(counterpart, 0);
                cleanup_exit(0);
            }
            Action::SuppressAndContinue => {
                emit(events::SUPPRESSED_NOTICE, format_args!(""));
                let _ = sys::cont(counterpart, 0);
            }
        }
    }
}

/// Everything that must be read or written while the faulted counterpart
/// is still stopped: the invoke/return discrimination, the archive (for
/// invokes), or the archived-context fetch and integrity check (returns).
fn prepare_switch(
    counterpart: Pid,
    ev: &SwitchEvent,
    site: &InvocationSite,
    target: u64,
) -> Result<Transfer, i32> {
    let kind = site.fault_kind;
    let remote_ctx = switch_context_addr();

    // The discriminator: a faulter holding a live archive is returning
    // from a migrated fragment; one without is invoking.
    let valid_word =
        remote::peek_word(counterpart, remote_ctx + ctx_off_archived_valid()).map_err(|_| 74)?;
    let counterpart_archived = (valid_word & 0xffff_ffff) != 0;

    if counterpart_archived {
        // ---- Return switch ----
        let archived: RegisterSnapshot =
            unsafe { remote::read_obj(counterpart, remote_ctx + ctx_off_archived()) }
                .map_err(|_| 74)?;
        // Integrity: the continuation carried through the fault must match
        // the one archived at invoke time. A mismatch means somebody
        // forged or replayed a switch; end the pair.
        if target != archived.rip {
            emit(
                events::GENUINE_FAULT,
                format_args!("return target {target:#x} != archived {:#x}", archived.rip),
            );
            return Err(70);
        }
        let result =
            remote::peek_word(counterpart, remote_ctx + ctx_off_fragment_result()).map_err(|_| 74)?;
        // Consume the archive so the counterpart's next fault reads as an
        // invoke again.
        remote::poke_word(counterpart, remote_ctx + ctx_off_archived_valid(), 0)
            .map_err(|_| 74)?;

        let mut resume = archived;
        resume.set_result(result);
        emit(
            events::SWITCH_REQUEST,
            format_args!("return to {:#x}, result {result:#x}", archived.rip),
        );
        Ok(Transfer::Resume { resume })
    } else {
        // ---- Invoke switch ----
        // Normalize the faulter's context to its resume point now, while
        // its stack is readable: pop the return address(es) the site call
        // pushed. Exec sites pushed an extra in-stub label.
        let (cont_addr, resume_sp) = match kind {
            FaultKind::SegvExec => (
                remote::peek_word(counterpart, ev.regs.rsp + 8).map_err(|_| 74)?,
                ev.regs.rsp + 16,
            ),
            _ => (
                remote::peek_word(counterpart, ev.regs.rsp).map_err(|_| 74)?,
                ev.regs.rsp + 8,
            ),
        };

        let reg = unsafe { context::registry() };
        // The decoded target must be a registered fragment entry, not just
        // any text address: a scribbled slot must not become an arbitrary
        // call in this process.
        let matches_fragment = reg.fragments[..reg.fragment_count as usize]
            .iter()
            .any(|f| f.entry == target);
        if !matches_fragment {
            emit(events::GENUINE_FAULT, format_args!("target {target:#x} not registered"));
            return Err(70);
        }

        // Fragment arguments. The segv methods carry them in the faulter's
        // registers (which ones depends on the stub shape, see arch.rs ABI
        // notes); the legacy trap method carries only its identifier in a
        // register and parks the arguments in the fork-shared mailbox,
        // which this side fetches word by word — the data path whose cost
        // the fault-address methods exist to beat.
        let (a0, a1) = match (kind, site.flavor) {
            (FaultKind::TrapReference, _) => {
                let mid = remote::peek_word(counterpart, remote_ctx + ctx_off_mailbox_id())
                    .map_err(|_| 74)?;
                let m0 = remote::peek_word(counterpart, remote_ctx + ctx_off_mailbox_args())
                    .map_err(|_| 74)?;
                let m1 = remote::peek_word(counterpart, remote_ctx + ctx_off_mailbox_args() + 8)
                    .map_err(|_| 74)?;
                // The request block must name the same fragment as the
                // identifier register and the site registration; any
                // disagreement means a forged or scribbled request.
                if mid != ev.regs.arg0() || mid != u64::from(site.fragment_id) {
                    emit(
                        events::GENUINE_FAULT,
                        format_args!("trap request id {mid} does not match site"),
                    );
                    return Err(70);
                }
                emit(events::TRAP_SERVICE, format_args!("request block id {mid} fetched"));
                (m0, m1)
            }
            (FaultKind::SegvLoadStore, SiteFlavor::ReusedCode) => (ev.regs.rsi, ev.regs.rdx),
            _ => (ev.regs.rdi, ev.regs.rsi),
        };

        // Trap invokes return through a segv raiser: an int3 return would
        // need a table identifier for an arbitrary continuation, which the
        // one-entry-per-fragment table cannot express.
        let return_kind = match kind {
            FaultKind::TrapReference => {
                let reg = unsafe { context::registry() };
                if select_scheme(FaultKind::SegvLoadStore, &reg.codec).is_ok() {
                    FaultKind::SegvLoadStore
                } else {
                    FaultKind::SegvExec
                }
            }
            k => k,
        };

        let mut archived = ev.regs;
        archived.set_pc(cont_addr);
        archived.set_sp(resume_sp);
        unsafe {
            let ctx = &mut *std::ptr::addr_of_mut!(context::SWITCH_CONTEXT);
            ctx.archived = archived;
            ctx.return_kind = return_kind as u32;
            ctx.archived_valid = 1;
        }

        emit(
            events::SWITCH_REQUEST,
            format_args!("invoke {target:#x} ({} {})", kind.as_str(), site.flavor.as_str()),
        );
        Ok(Transfer::Invoke { entry: target, a0, a1, return_kind })
    }
}

/// Demote the stopped counterpart to catcher: point it at the debugger
/// loop on its dedicated stack, block everything deliverable, and resume
/// it with the fault suppressed. It never observes the fault happening.
pub fn transition_to_catcher(counterpart: Pid, fault_regs: &RegisterSnapshot) -> std::io::Result<()> {
    let mut regs = *fault_regs;
    regs.set_pc(arch::loop_entry_pc());
    regs.set_sp(context::debugger_stack_top());
    sys::setregs(counterpart, &regs)?;
    sys::set_sigmask(counterpart, signals::full_block_bits())?;
    sys::cont(counterpart, 0)?;
    emit(events::TRANSITION, format_args!("counterpart {counterpart} now catcher"));
    Ok(())
}

/// Leave the catcher seat: unblock, flip role bookkeeping, and either run
/// the invoked fragment (then raise the matching return switch) or restore
/// the archived application context.
fn transfer_control(t: Transfer) -> ! {
    // Role flips before the unblock: anything pending from the catcher
    // stint is delivered the instant the mask opens and must find the
    // bookkeeping already describing a thrower.
    context::MY_ROLE.store(ROLE_THROWER, Ordering::Relaxed);
    context::SWITCH_COUNT.fetch_add(1, Ordering::Relaxed);
    let _ = signals::unblock_on_throw();

    match t {
        Transfer::Invoke { entry, a0, a1, return_kind } => {
            emit(events::TRANSFER, format_args!("run fragment {entry:#x}"));
            let result = unsafe {
                let ctx = &mut *std::ptr::addr_of_mut!(context::SWITCH_CONTEXT);
                ctx.in_fragment = 1;
                let f: unsafe extern "C" fn(u64, u64) -> u64 =
                    std::mem::transmute(entry as usize);
                let r = f(a0, a1);
                ctx.in_fragment = 0;
                ctx.fragment_result = r;
                r
            };
            let _ = result;
            raise_return_switch(return_kind);
        }
        Transfer::Resume { resume } => {
            emit(events::TRANSFER, format_args!("resume app at {:#x}", resume.rip));
            unsafe { arch::selfdbg_context_restore(&resume) }
        }
    }
}

/// Raise the return switch: encode the archived continuation through the
/// same signaling method the invoke used and fault on it.
fn raise_return_switch(kind: FaultKind) -> ! {
    let (cont_pc, encoded) = unsafe {
        let ctx = &*std::ptr::addr_of!(context::SWITCH_CONTEXT);
        let reg = context::registry();
        let scheme = match select_scheme(kind, &reg.codec) {
            Ok(s) => s,
            Err(_) => libc::_exit(70),
        };
        let enc = match encode_target(ctx.archived.rip, scheme, &reg.codec.namespace) {
            Ok(e) => e,
            Err(_) => libc::_exit(70),
        };
        (ctx.archived.rip, enc)
    };
    emit(events::SWITCH_REQUEST, format_args!("raise return toward {cont_pc:#x}"));
    unsafe {
        match kind {
            FaultKind::SegvExec => arch::selfdbg_raise_x(encoded),
            _ => arch::selfdbg_raise_rw(encoded),
        }
    }
}

fn mirror_exit_code(status: i32) -> i32 {
    match sys::decode_status(status) {
        WaitStatus::Exited { code } => code,
        WaitStatus::Signaled { sig } => 128 + sig,
        _ => 0,
    }
}

/// Release a counterpart that was killed while this member held the
/// thrower seat.
///
/// A killed member does not die outright: it was seized with the
/// exit-notice option, so it parks in a trace stop that only its tracer
/// can release. A catcher services that stop from its wait loop, but a
/// thrower is off running application code, and the pair would otherwise
/// freeze with the kill pending forever. No signal can close the gap —
/// each member is itself a tracee, so a child notice would park *this*
/// process in a delivery stop before any handler ran. Instead the thrower
/// polls: one non-consuming wait probe on the switch path, issued by the
/// thread that seized the counterpart (ptrace insists on that thread).
///
/// Returns true when a parked exit was found and released. The
/// counterpart's death then completes, and its exit-kill takes this
/// process down in turn — the caller should idle, not switch.
pub(crate) fn release_dying_counterpart() -> bool {
    let counterpart = context::COUNTERPART_PID.load(Ordering::Relaxed);
    if counterpart <= 0 {
        return false;
    }
    // Peek with WNOWAIT: any status that is not the exit notice stays
    // queued for whichever synchronous path owns it (a group-stopped
    // counterpart, for instance, must stay observable untouched).
    let mut si: libc::siginfo_t = unsafe { std::mem::zeroed() };
    let rc = unsafe {
        libc::waitid(
            libc::P_PID,
            counterpart as libc::id_t,
            &mut si,
            libc::WSTOPPED | libc::WNOHANG | libc::WNOWAIT,
        )
    };
    if rc != 0 {
        return false;
    }
    let (pid, status) = unsafe { (si.si_pid(), si.si_status()) };
    // waitid folds the trace-event number into the upper byte of
    // si_status; a bare signal number here would be an ordinary stop.
    let exit_notice = (sys::EVENT_EXIT << 8) | libc::SIGTRAP;
    if pid != counterpart || si.si_code != libc::CLD_TRAPPED || status != exit_notice {
        return false;
    }

    // Consume the stop and resume the death, kill re-injected for good
    // measure; the counterpart's exit-kill is now on its way here.
    let mut raw = 0;
    if unsafe { libc::waitpid(counterpart, &mut raw, libc::WNOHANG) } != counterpart {
        return false;
    }
    emit(
        events::FORWARD_SIGNAL,
        format_args!("released exit notice of counterpart {counterpart}"),
    );
    let _ = sys::cont(counterpart, libc::SIGKILL);
    true
}

fn cleanup_exit(code: i32) -> ! {
    emit(events::PROTECT_FINI, format_args!("catcher exiting with {code}"));
    unsafe { libc::_exit(code) }
}

/// Allocation-free event emission: format into a fixed buffer.
fn emit(event: &str, args: std::fmt::Arguments<'_>) {
    let mut detail = ArrayString::<192>::new();
    let _ = detail.write_fmt(args);
    log().emit(event, &detail);
}

#[cfg(test)]
mod tests {
    use super::*;

    // The loop itself only runs inside a protected pair (integration
    // tests drive it end to end through the demo binary); what is unit
    // testable here is the stop decoder's discrimination rules.

    #[test]
    fn mirror_exit_code_maps_both_death_kinds() {
        assert_eq!(mirror_exit_code(0x0300), 3); // exited 3
        assert_eq!(mirror_exit_code(11), 128 + 11); // killed by SIGSEGV
    }

    #[test]
    fn emit_formats_without_heap() {
        // Smoke: formatting into the fixed buffer with typical payloads.
        emit(events::SWITCH_REQUEST, format_args!("invoke {:#x} ({} {})", 0x55aa_u64, "a", "b"));
        emit(events::TRANSFER, format_args!("resume app at {:#x}", u64::MAX));
    }

    /// Fault a real child at a genuine bad address and check the stop
    /// decoder reports a load/store fault with the right address, and
    /// that a user-sent SIGSEGV is *not* mistaken for a fault.
    #[test]
    fn stop_decoder_separates_faults_from_forgeries() {
        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            unsafe {
                // Re-arm default dispositions and fault on a recognizable
                // address once the parent pokes us.
                libc::signal(libc::SIGSEGV, libc::SIG_DFL);
                std::ptr::read_volatile(0xdead0000 as *const u8);
                libc::_exit(1);
            }
        }

        sys::seize(child, 0).unwrap();
        let status = sys::wait_status(child).unwrap();
        match sys::decode_status(status) {
            WaitStatus::Stopped { sig: libc::SIGSEGV, .. } => {}
            other => panic!("expected the child's fault stop, got {other:?}"),
        }
        match build_debug_stop(child, libc::SIGSEGV) {
            DebugStop::Fault(ev) => {
                assert_eq!(ev.fault_kind, FaultKind::SegvLoadStore);
                assert_eq!(ev.fault_address, Some(0xdead0000));
                assert_ne!(ev.faulting_pc, 0xdead0000, "pc is the instruction, not the datum");
            }
            other => panic!("expected a fault event, got {other:?}"),
        }

        unsafe { libc::kill(child, libc::SIGKILL) };
        let _ = sys::wait_status(child);
    }

    #[test]
    fn user_sent_sigsegv_is_classified_as_signal_not_fault() {
        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            unsafe {
                loop {
                    std::arch::asm!("pause");
                }
            }
        }
        sys::seize(child, 0).unwrap();
        // Forge a SIGSEGV via kill: si_code will be SI_USER (0).
        unsafe { libc::kill(child, libc::SIGSEGV) };
        let status = sys::wait_status(child).unwrap();
        match sys::decode_status(status) {
            WaitStatus::Stopped { sig: libc::SIGSEGV, .. } => {}
            other => panic!("expected forged-segv stop, got {other:?}"),
        }
        match build_debug_stop(child, libc::SIGSEGV) {
            DebugStop::Signal { signo } => assert_eq!(signo, libc::SIGSEGV),
            other => panic!("a kill()-sent SIGSEGV must be a signal, got {other:?}"),
        }
        unsafe { libc::kill(child, libc::SIGKILL) };
        let _ = sys::wait_status(child);
    }

    #[test]
    fn int3_stop_builds_a_trap_event_one_byte_back() {
        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            unsafe {
                libc::signal(libc::SIGTRAP, libc::SIG_DFL);
                std::arch::asm!("int3", in("rdi") 55u64);
                libc::_exit(1);
            }
        }
        sys::seize(child, 0).unwrap();
        let status = sys::wait_status(child).unwrap();
        match sys::decode_status(status) {
            WaitStatus::Stopped { sig: libc::SIGTRAP, .. } => {}
            other => panic!("expected trap stop, got {other:?}"),
        }
        match build_debug_stop(child, libc::SIGTRAP) {
            DebugStop::Fault(ev) => {
                assert_eq!(ev.fault_kind, FaultKind::TrapReference);
                assert_eq!(ev.fault_address, None);
                assert_eq!(ev.regs.arg0(), 55, "trap identifier rides in the first arg register");
                let byte = sys::peekdata(child, ev.faulting_pc).unwrap() as u8;
                assert_eq!(byte, 0xcc, "pc must point back at the int3 byte");
            }
            other => panic!("expected trap event, got {other:?}"),
        }
        unsafe { libc::kill(child, libc::SIGKILL) };
        let _ = sys::wait_status(child);
    }
}
