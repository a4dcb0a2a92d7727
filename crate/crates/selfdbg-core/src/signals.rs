//! Signal-disposition plumbing for the pair.
//!
//! Three measures keep the reciprocal arrangement deadlock-free, mirrored
//! one-to-one by the model in [`crate::sim`]:
//!
//! 1. Child-state-change notices are switched off in both processes
//!    before the fork (see [`suppress_child_notices`]).  Each member is a
//!    tracee: a SIGCHLD aimed at it would park it in a signal-delivery
//!    stop before any handler could run, so a fault stop in one process
//!    would provoke a stop in the other — the mutual freeze the model in
//!    [`crate::sim`] reaches from its child-notice-default scenario.
//!    Quiet dispositions mean a dying counterpart must be *polled* for
//!    instead; the thrower does that on the switch path (see
//!    `release_dying_counterpart` in the debugger module).
//! 2. A process acting as catcher blocks every maskable signal; anything
//!    sent to it pends until the next role flip hands the signal to what
//!    is by then an ordinary thrower.
//! 3. The block is undone immediately before the catcher transfers control
//!    to application code.

use std::io;

/// Quiet child-state notices entirely. Must run before the fork: both
/// processes inherit the disposition, and the first fault would otherwise
/// race the configuration of the second process.
///
/// `SIG_IGN` discards death notices at generation; `SA_NOCLDSTOP` keeps
/// the kernel from generating notices for the unending stream of trace
/// stops the counterpart produces. Nothing here may be replaced with a
/// live handler: each member is itself a tracee, so delivering any signal
/// to it means a ptrace stop serviced only by its — possibly busy,
/// possibly dying — counterpart. Kill propagation therefore runs by
/// polling on the switch path instead (`release_dying_counterpart` in the
/// debugger module).
pub fn suppress_child_notices() -> io::Result<()> {
    unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = libc::SIG_IGN;
        sa.sa_flags = libc::SA_RESTART | libc::SA_NOCLDSTOP;
        libc::sigemptyset(&mut sa.sa_mask);
        if libc::sigaction(libc::SIGCHLD, &sa, std::ptr::null_mut()) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

/// The catcher's mask: everything blockable. SIGKILL and SIGSTOP are
/// excluded by the kernel itself, and synchronous faults punch through a
/// blocked mask by design — both facts the threat analysis leans on.
pub fn block_all_when_catcher() -> io::Result<u64> {
    set_proc_mask_all(true)
}

/// Undo the catcher mask right before control transfers to app code.
pub fn unblock_on_throw() -> io::Result<u64> {
    set_proc_mask_all(false)
}

fn set_proc_mask_all(fill: bool) -> io::Result<u64> {
    unsafe {
        let mut new: libc::sigset_t = std::mem::zeroed();
        if fill {
            libc::sigfillset(&mut new);
        } else {
            libc::sigemptyset(&mut new);
        }
        let mut old: libc::sigset_t = std::mem::zeroed();
        if libc::sigprocmask(libc::SIG_SETMASK, &new, &mut old) != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(sigset_to_bits(&old))
    }
}

/// First 64 signals of a sigset as a bitmask (bit N = signal N+1), the
/// same layout the kernel uses for `PTRACE_SETSIGMASK`.
pub fn sigset_to_bits(set: &libc::sigset_t) -> u64 {
    let mut bits = 0u64;
    for sig in 1..=64 {
        if unsafe { libc::sigismember(set, sig) } == 1 {
            bits |= 1u64 << (sig - 1);
        }
    }
    bits
}

/// The block-everything mask in kernel bitmask form, for setting a
/// counterpart's mask remotely during its demotion to catcher.
pub fn full_block_bits() -> u64 {
    // All 64 bits; the kernel silently refuses to block KILL/STOP.
    !0u64
}

/// Install a plain handler for `sig`. Used by the demo for its SIGTERM
/// cleanup and SIGUSR1 counter; kept here so the flags are right in one
/// place (SA_RESTART keeps the workload's syscalls transparent).
pub fn install_handler(sig: i32, handler: unsafe extern "C" fn(i32)) -> io::Result<()> {
    unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = handler as usize;
        sa.sa_flags = libc::SA_RESTART;
        libc::sigemptyset(&mut sa.sa_mask);
        if libc::sigaction(sig, &sa, std::ptr::null_mut()) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}
