//! Pair establishment and teardown.
//!
//! [`protect_init`] forks a twin, wires up the mutual ptrace session, and
//! returns with the caller as thrower and the twin parked in the debugger
//! loop as catcher. From that point on, killing either process kills both
//! (exit-kill is armed in both directions), and no third process can
//! attach to either (both tracer slots are taken).
//!
//! [`protect_fini`] is the one sanctioned way out: the thrower releases
//! the counterpart from its own tracership *before* exiting, so the
//! exit-kill it armed does not take the counterpart down. The counterpart
//! — still tracing us — then observes our plain exit and mirrors it.

use std::fmt::Write as _;
use std::io;
use std::sync::atomic::Ordering;

use arrayvec::ArrayString;
use thiserror::Error;

use crate::codec::FaultKind;
use crate::config::Config;
use crate::context::{
    self, PROT_ACTIVE, PROT_DISABLED_ENV, PROT_FINISHED, PROT_OFF, ROLE_CATCHER, ROLE_THROWER,
};
use crate::debugger;
use crate::eventlog::{events, EventLog};
use crate::signals;
use crate::sys::{self, Pid, WaitStatus};
use crate::whitelist::{InvocationSite, SiteFlavor, Whitelist};
use crate::{arch, codec};

/// Environment variable that turns the whole runtime into pass-through
/// local calls. Checked once, at init.
pub const DISABLE_ENV: &str = "SELFDBG_DISABLE";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitOutcome {
    /// The pair is live; the caller is the thrower.
    Protected,
    /// `SELFDBG_DISABLE` was set: no twin, invocations run locally.
    DisabledByEnv,
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error("protection already initialized in this process")]
    AlreadyInitialized,
    #[error("process has {tasks} threads; init must run before any are spawned")]
    MultiThreaded { tasks: usize },
    #[error("ptrace attach denied: {side}")]
    AttachDenied { side: &'static str },
    #[error("handshake did not complete within {ms} ms")]
    HandshakeTimeout { ms: u64 },
    #[error("could not determine own text segment bounds")]
    NoCodeRange,
    #[error(transparent)]
    Sys(#[from] io::Error),
}

/// A snapshot of the runtime's bookkeeping, for status output and tests.
#[derive(Clone, Copy, Debug)]
pub struct ProtectionStatus {
    pub state: u32,
    pub role: u32,
    pub counterpart: Pid,
    pub switch_count: u64,
}

pub fn status() -> ProtectionStatus {
    ProtectionStatus {
        state: context::PROT_STATE.load(Ordering::Relaxed),
        role: context::MY_ROLE.load(Ordering::Relaxed),
        counterpart: context::COUNTERPART_PID.load(Ordering::Relaxed),
        switch_count: context::SWITCH_COUNT.load(Ordering::Relaxed),
    }
}

/// Establish the reciprocal pair.
///
/// Must be called while the process is still single-threaded: the
/// debugger loop waits on exactly one counterpart task, so threads
/// spawned before init would run untraced and unserviced. (Threads
/// spawned *after* init are the caller's own risk; the demo's watchdog
/// never touches protected state.)
pub fn protect_init(cfg: &Config) -> Result<InitOutcome, InitError> {
    let disabled = match std::env::var(DISABLE_ENV) {
        Ok(v) => !v.is_empty() && v != "0",
        Err(_) => false,
    };

    if !disabled {
        let tasks = task_count()?;
        if tasks > 1 {
            return Err(InitError::MultiThreaded { tasks });
        }
    }

    if context::PROT_STATE
        .compare_exchange(PROT_OFF, PROT_ACTIVE, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(InitError::AlreadyInitialized);
    }

    match init_inner(cfg, disabled) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            context::PROT_STATE.store(PROT_OFF, Ordering::SeqCst);
            Err(e)
        }
    }
}

fn init_inner(cfg: &Config, disabled: bool) -> Result<InitOutcome, InitError> {
    // The registry is built in both modes so registration and dispatch
    // work uniformly; disabled mode just never forks or faults.
    let (code_lo, code_hi) = own_code_range().ok_or(InitError::NoCodeRange)?;
    let mask = random_nonzero_mask()?;
    let whitelist = Whitelist::new(mask).expect("nonzero mask");
    context::SESSION_MASK.store(mask, Ordering::Relaxed);
    unsafe { context::registry_init(whitelist, cfg.codec_config(code_lo, code_hi)) };
    register_return_sites();

    let log = match &cfg.eventlog_path {
        Some(p) => EventLog::create(p)?,
        None => EventLog::disabled(),
    };
    context::LOG_FD.store(log.raw_fd(), Ordering::Relaxed);

    if disabled {
        context::PROT_STATE.store(PROT_DISABLED_ENV, Ordering::SeqCst);
        log.emit(events::PROTECT_INIT, "disabled by environment");
        return Ok(InitOutcome::DisabledByEnv);
    }

    let mut detail = ArrayString::<192>::new();
    let _ = write!(detail, "text segment {code_lo:#x}..{code_hi:#x}");
    log.emit(events::PROTECT_INIT, &detail);

    // Anything buffered would otherwise be flushed twice, once per twin.
    let _ = io::Write::flush(&mut io::stdout());
    let _ = io::Write::flush(&mut io::stderr());

    // Without this, the parent receives a signal (and under some harness
    // configurations, a wait-status it does not expect) every time the
    // twin stops, and stop notifications pile up during the handshake.
    if cfg.runtime.suppress_child_notices {
        signals::suppress_child_notices()?;
    }

    let mut options = sys::O_TRACEEXIT;
    if cfg.runtime.exit_kill {
        options |= sys::O_EXITKILL;
    }
    let timeout_ms = cfg.runtime.handshake_timeout_ms;

    let child_to_parent = pipe()?;
    let parent_to_child = pipe()?;
    let parent_pid = unsafe { libc::getpid() };

    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(io::Error::last_os_error().into());
    }

    if pid == 0 {
        // ---- twin: the initial catcher ----
        unsafe {
            libc::close(child_to_parent.0);
            libc::close(parent_to_child.1);
        }
        if sys::seize(parent_pid, options).is_err() {
            let _ = write_byte(child_to_parent.1, b'F');
            unsafe { libc::_exit(111) };
        }
        log.emit(events::ATTACH, "catcher attached to app process");
        if write_byte(child_to_parent.1, b'A').is_err() {
            abort_release(parent_pid);
        }
        match read_byte_blocking(parent_to_child.0) {
            Some(b'B') => {}
            // Parent could not attach back (or died): undo our tracership
            // so our exit does not take it with us, then bow out.
            _ => abort_release(parent_pid),
        }
        let _ = signals::block_all_when_catcher();
        context::COUNTERPART_PID.store(parent_pid, Ordering::Relaxed);
        context::MY_ROLE.store(ROLE_CATCHER, Ordering::Relaxed);
        let _ = write_byte(child_to_parent.1, b'C');
        unsafe {
            libc::close(child_to_parent.1);
            libc::close(parent_to_child.0);
        }
        debugger::debugger_loop();
    }

    // ---- app process: the initial thrower ----
    unsafe {
        libc::close(child_to_parent.1);
        libc::close(parent_to_child.0);
    }
    let started = std::time::Instant::now();

    let result = (|| -> Result<(), InitError> {
        match read_byte_timeout(child_to_parent.0, timeout_ms)? {
            Some(b'A') => {}
            Some(b'F') => return Err(InitError::AttachDenied { side: "counterpart to app" }),
            _ => return Err(InitError::HandshakeTimeout { ms: timeout_ms }),
        }
        if let Err(e) = sys::seize(pid, options) {
            let _ = write_byte(parent_to_child.1, b'X');
            return if e.raw_os_error() == Some(libc::EPERM) {
                Err(InitError::AttachDenied { side: "app to counterpart" })
            } else {
                Err(e.into())
            };
        }
        log.emit(events::ATTACH, "app process attached to catcher");
        write_byte(parent_to_child.1, b'B')?;
        match read_byte_timeout(child_to_parent.0, timeout_ms)? {
            Some(b'C') => Ok(()),
            _ => Err(InitError::HandshakeTimeout { ms: timeout_ms }),
        }
    })();

    unsafe {
        libc::close(child_to_parent.0);
        libc::close(parent_to_child.1);
    }

    if let Err(e) = result {
        // Best effort: without a completed handshake the twin has not armed
        // anything we cannot survive, except in the timeout-after-B corner
        // where dying together is the intended failure mode anyway.
        unsafe { libc::kill(pid, libc::SIGKILL) };
        return Err(e);
    }

    context::COUNTERPART_PID.store(pid, Ordering::Relaxed);
    context::MY_ROLE.store(ROLE_THROWER, Ordering::Relaxed);

    let mut detail = ArrayString::<192>::new();
    let _ = write!(
        detail,
        "pair {parent_pid}/{pid}, {} ms",
        started.elapsed().as_millis()
    );
    log.emit(events::HANDSHAKE_COMPLETE, &detail);
    Ok(InitOutcome::Protected)
}

/// Release the counterpart and mark the session finished. Call this right
/// before a clean exit; the counterpart then mirrors the exit instead of
/// being shot by our exit-kill. Safe to call in any state and from either
/// member; only an active thrower does real work.
pub fn protect_fini() {
    if context::PROT_STATE
        .compare_exchange(PROT_ACTIVE, PROT_FINISHED, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return;
    }
    let counterpart = context::COUNTERPART_PID.load(Ordering::Relaxed);
    let log = EventLog::from_raw_fd(context::LOG_FD.load(Ordering::Relaxed));
    if counterpart <= 0 {
        return;
    }

    // The counterpart idles in its wait loop; interrupt parks it in a
    // ptrace-stop so detach is legal. If it is already dead or dying,
    // every step here degrades to a no-op.
    if sys::interrupt(counterpart).is_ok() {
        match sys::wait_status(counterpart).map(sys::decode_status) {
            Ok(WaitStatus::Stopped { .. }) => {
                let _ = sys::detach(counterpart, 0);
            }
            _ => {}
        }
    }

    let mut detail = ArrayString::<192>::new();
    let _ = write!(detail, "released counterpart {counterpart}");
    log.emit(events::PROTECT_FINI, &detail);
}

/// Register the whitelist entries for the return-path raise sites. These
/// are process-runtime sites, not per-fragment ones: every migrated
/// invocation returns through one of them.
fn register_return_sites() {
    let reg = unsafe { context::registry() };
    for kind in [FaultKind::SegvLoadStore, FaultKind::SegvExec] {
        let Ok(scheme) = codec::select_scheme(kind, &reg.codec) else {
            continue; // no scheme for this kind: returns cannot use it either
        };
        let site = InvocationSite {
            pc: arch::raise_site_pc(kind),
            fault_kind: kind,
            scheme_id: scheme.scheme_id,
            flavor: SiteFlavor::ReusedCode,
            fragment_id: 0,
        };
        reg.whitelist.insert(site).expect("fresh whitelist has room");
    }
}

/// How the abandoned twin lets go of an already-seized parent: park it,
/// detach (clearing exit-kill), and exit without harming it.
fn abort_release(parent: Pid) -> ! {
    if sys::interrupt(parent).is_ok() {
        if let Ok(status) = sys::wait_status(parent) {
            if matches!(sys::decode_status(status), WaitStatus::Stopped { .. }) {
                let _ = sys::detach(parent, 0);
            }
        }
    }
    unsafe { libc::_exit(112) }
}

fn task_count() -> io::Result<usize> {
    Ok(std::fs::read_dir("/proc/self/task")?.count())
}

/// Find the executable mapping of our own binary by locating a known text
/// address in /proc/self/maps.
fn own_code_range() -> Option<(u64, u64)> {
    let probe = arch::loop_entry_pc();
    let maps = std::fs::read_to_string("/proc/self/maps").ok()?;
    for line in maps.lines() {
        let (range, rest) = line.split_once(' ')?;
        if !rest.starts_with(|c| c == 'r' || c == '-') || rest.as_bytes().get(2) != Some(&b'x') {
            continue;
        }
        let (lo, hi) = range.split_once('-')?;
        let lo = u64::from_str_radix(lo, 16).ok()?;
        let hi = u64::from_str_radix(hi, 16).ok()?;
        if (lo..hi).contains(&probe) {
            return Some((lo, hi));
        }
    }
    None
}

fn random_nonzero_mask() -> io::Result<u64> {
    loop {
        let mut buf = [0u8; 8];
        sys::getrandom(&mut buf)?;
        let v = u64::from_ne_bytes(buf);
        if v != 0 {
            return Ok(v);
        }
    }
}

fn pipe() -> io::Result<(i32, i32)> {
    let mut fds = [0i32; 2];
    if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok((fds[0], fds[1]))
}

fn write_byte(fd: i32, byte: u8) -> io::Result<()> {
    loop {
        let n = unsafe { libc::write(fd, &byte as *const u8 as *const libc::c_void, 1) };
        if n == 1 {
            return Ok(());
        }
        let e = io::Error::last_os_error();
        if e.kind() != io::ErrorKind::Interrupted {
            return Err(e);
        }
    }
}

fn read_byte_blocking(fd: i32) -> Option<u8> {
    let mut byte = 0u8;
    loop {
        let n = unsafe { libc::read(fd, &mut byte as *mut u8 as *mut libc::c_void, 1) };
        match n {
            1 => return Some(byte),
            0 => return None,
            _ if io::Error::last_os_error().kind() == io::ErrorKind::Interrupted => continue,
            _ => return None,
        }
    }
}

fn read_byte_timeout(fd: i32, timeout_ms: u64) -> io::Result<Option<u8>> {
    let deadline = std::time::Instant::now() + std::time::Duration::from_millis(timeout_ms);
    loop {
        let remaining = deadline.saturating_duration_since(std::time::Instant::now());
        if remaining.is_zero() {
            return Ok(None);
        }
        let mut pfd = libc::pollfd { fd, events: libc::POLLIN, revents: 0 };
        let rc = unsafe { libc::poll(&mut pfd, 1, remaining.as_millis() as i32) };
        match rc {
            0 => return Ok(None),
            1 => return Ok(read_byte_blocking(fd)),
            _ => {
                let e = io::Error::last_os_error();
                if e.kind() != io::ErrorKind::Interrupted {
                    return Err(e);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog;
    use std::time::{Duration, Instant};

    fn wait_with_deadline(pid: Pid, secs: u64) -> i32 {
        let deadline = Instant::now() + Duration::from_secs(secs);
        loop {
            let mut status = 0i32;
            let rc = unsafe { libc::waitpid(pid, &mut status, libc::WNOHANG) };
            if rc == pid {
                return status;
            }
            assert!(rc >= 0, "waitpid failed: {}", io::Error::last_os_error());
            if Instant::now() > deadline {
                unsafe { libc::kill(pid, libc::SIGKILL) };
                panic!("forked test child did not exit within {secs}s");
            }
            std::thread::sleep(Duration::from_millis(25));
        }
    }

    #[test]
    fn init_refuses_a_multithreaded_process() {
        // Hold a parked thread alive so /proc/self/task definitely has >1
        // entries no matter how the test harness schedules things.
        let (tx, rx) = std::sync::mpsc::channel::<()>();
        let guard = std::thread::spawn(move || {
            let _ = rx.recv();
        });
        let res = protect_init(&Config::default());
        match res {
            Err(InitError::MultiThreaded { tasks }) => assert!(tasks > 1),
            other => panic!("expected MultiThreaded, got {other:?}"),
        }
        tx.send(()).unwrap();
        guard.join().unwrap();
    }

    #[test]
    fn disable_env_skips_the_fork_entirely() {
        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            std::env::set_var(DISABLE_ENV, "1");
            let ok = matches!(protect_init(&Config::default()), Ok(InitOutcome::DisabledByEnv))
                && status().state == PROT_DISABLED_ENV
                && context::registry_ready()
                && status().counterpart == 0;
            unsafe { libc::_exit(if ok { 0 } else { 1 }) };
        }
        let status = wait_with_deadline(child, 30);
        assert!(libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0);
    }

    #[test]
    fn pair_comes_up_and_tears_down_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("events.log");

        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            let mut cfg = Config::default();
            cfg.eventlog_path = Some(log_path.clone());
            let ok = (|| {
                if !matches!(protect_init(&cfg), Ok(InitOutcome::Protected)) {
                    return false;
                }
                let st = status();
                if st.state != PROT_ACTIVE || st.role != ROLE_THROWER || st.counterpart <= 0 {
                    return false;
                }
                // The counterpart must actually be alive.
                if unsafe { libc::kill(st.counterpart, 0) } != 0 {
                    return false;
                }
                protect_fini();
                status().state == PROT_FINISHED
            })();
            unsafe { libc::_exit(if ok { 0 } else { 1 }) };
        }

        let status = wait_with_deadline(child, 30);
        assert!(
            libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0,
            "pair child failed: status {status:#x}"
        );

        let text = std::fs::read_to_string(&log_path).unwrap();
        let entries = eventlog::parse_log(&text).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.event.as_str()).collect();
        for expected in [
            eventlog::events::PROTECT_INIT,
            eventlog::events::ATTACH,
            eventlog::events::HANDSHAKE_COMPLETE,
            eventlog::events::PROTECT_FINI,
        ] {
            assert!(names.contains(&expected), "missing {expected} in {names:?}");
        }
        assert_eq!(
            names.iter().filter(|n| **n == eventlog::events::ATTACH).count(),
            2,
            "both directions must log their attach"
        );

        // Two distinct pids must appear: the app process and its twin.
        let mut pids: Vec<i32> = entries.iter().map(|e| e.pid).collect();
        pids.sort_unstable();
        pids.dedup();
        assert_eq!(pids.len(), 2, "expected exactly the pair in the log: {entries:?}");

        // The twin must not outlive the app process for long.
        let twin = pids.into_iter().find(|p| *p != child).unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            if unsafe { libc::kill(twin, 0) } != 0 {
                break; // ESRCH: gone
            }
            assert!(Instant::now() < deadline, "catcher twin {twin} still alive");
            std::thread::sleep(Duration::from_millis(25));
        }
    }
}
