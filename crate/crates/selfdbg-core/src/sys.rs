//! The single unsafe boundary around ptrace, waitpid, and the
//! process_vm_* syscalls.
//!
//! Everything here is a thin, typed wrapper: no policy, no state. Request
//! numbers that newer kernels added (SEIZE and friends) are defined
//! locally rather than taken from libc so the build does not depend on
//! which libc crate release first exposed them; the kernel ABI values are
//! frozen.

use std::io;

use crate::regs::RegisterSnapshot;

pub type Pid = libc::pid_t;

// ptrace requests beyond the classic set.
const PTRACE_SEIZE: libc::c_uint = 0x4206;
const PTRACE_INTERRUPT: libc::c_uint = 0x4207;
const PTRACE_LISTEN: libc::c_uint = 0x4208;
const PTRACE_GETSIGMASK: libc::c_uint = 0x420a;
const PTRACE_SETSIGMASK: libc::c_uint = 0x420b;

// Options supplied at SEIZE time.
pub const O_EXITKILL: u64 = 0x0010_0000;
pub const O_TRACEEXIT: u64 = 0x0000_0040;

pub const EVENT_EXIT: i32 = 6;
pub const EVENT_STOP: i32 = 128;

/// waitpid flag: wait for any kind of child, including nonstandard clones.
const WALL: libc::c_int = 0x4000_0000;

fn check(ret: libc::c_long) -> io::Result<libc::c_long> {
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(ret)
    }
}

/// Attach without stopping. The options bind the counterpart's fate to
/// ours (`EXITKILL`) and give us a stop at its exit (`TRACEEXIT`).
pub fn seize(pid: Pid, options: u64) -> io::Result<()> {
    check(unsafe { libc::ptrace(PTRACE_SEIZE, pid, 0usize, options as usize) })?;
    Ok(())
}

pub fn interrupt(pid: Pid) -> io::Result<()> {
    check(unsafe { libc::ptrace(PTRACE_INTERRUPT, pid, 0usize, 0usize) })?;
    Ok(())
}

/// Resume a stopped tracee, delivering `sig` (0 suppresses the pending
/// signal — the mechanism that makes intentional faults invisible).
pub fn cont(pid: Pid, sig: i32) -> io::Result<()> {
    check(unsafe { libc::ptrace(libc::PTRACE_CONT, pid, 0usize, sig as usize) })?;
    Ok(())
}

/// Keep a group-stopped tracee stopped but observable.
pub fn listen(pid: Pid) -> io::Result<()> {
    check(unsafe { libc::ptrace(PTRACE_LISTEN, pid, 0usize, 0usize) })?;
    Ok(())
}

pub fn detach(pid: Pid, sig: i32) -> io::Result<()> {
    check(unsafe { libc::ptrace(libc::PTRACE_DETACH, pid, 0usize, sig as usize) })?;
    Ok(())
}

pub fn getregs(pid: Pid) -> io::Result<RegisterSnapshot> {
    let mut regs = RegisterSnapshot::default();
    check(unsafe {
        libc::ptrace(libc::PTRACE_GETREGS, pid, 0usize, &mut regs as *mut RegisterSnapshot)
    })?;
    Ok(regs)
}

pub fn setregs(pid: Pid, regs: &RegisterSnapshot) -> io::Result<()> {
    check(unsafe {
        libc::ptrace(libc::PTRACE_SETREGS, pid, 0usize, regs as *const RegisterSnapshot)
    })?;
    Ok(())
}

pub fn getsiginfo(pid: Pid) -> io::Result<libc::siginfo_t> {
    let mut si: libc::siginfo_t = unsafe { std::mem::zeroed() };
    check(unsafe {
        libc::ptrace(libc::PTRACE_GETSIGINFO, pid, 0usize, &mut si as *mut libc::siginfo_t)
    })?;
    Ok(si)
}

/// Read one word of tracee memory. The tracee must be in a ptrace-stop.
pub fn peekdata(pid: Pid, addr: u64) -> io::Result<u64> {
    // -1 is a valid word value; the errno dance disambiguates.
    unsafe { *libc::__errno_location() = 0 };
    let word = unsafe { libc::ptrace(libc::PTRACE_PEEKDATA, pid, addr as usize, 0usize) };
    if word == -1 && unsafe { *libc::__errno_location() } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(word as u64)
}

pub fn pokedata(pid: Pid, addr: u64, word: u64) -> io::Result<()> {
    check(unsafe { libc::ptrace(libc::PTRACE_POKEDATA, pid, addr as usize, word as usize) })?;
    Ok(())
}

pub fn geteventmsg(pid: Pid) -> io::Result<u64> {
    let mut msg: libc::c_ulong = 0;
    check(unsafe {
        libc::ptrace(libc::PTRACE_GETEVENTMSG, pid, 0usize, &mut msg as *mut libc::c_ulong)
    })?;
    Ok(msg as u64)
}

/// Replace the tracee's blocked-signal mask. This is how the freshly
/// demoted catcher gets its block-everything mask without running a single
/// instruction of its own.
pub fn set_sigmask(pid: Pid, mask: u64) -> io::Result<()> {
    check(unsafe {
        libc::ptrace(PTRACE_SETSIGMASK, pid, 8usize, &mask as *const u64)
    })?;
    Ok(())
}

pub fn get_sigmask(pid: Pid) -> io::Result<u64> {
    let mut mask: u64 = 0;
    check(unsafe { libc::ptrace(PTRACE_GETSIGMASK, pid, 8usize, &mut mask as *mut u64) })?;
    Ok(mask)
}

/// waitpid with `__WALL`, retrying on EINTR. Returns the raw status word.
pub fn wait_status(pid: Pid) -> io::Result<i32> {
    loop {
        let mut status: libc::c_int = 0;
        let ret = unsafe { libc::waitpid(pid, &mut status, WALL) };
        if ret == pid {
            return Ok(status);
        }
        if ret < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err);
        }
    }
}

/// Non-blocking variant; Ok(None) when nothing changed state yet.
pub fn wait_status_nohang(pid: Pid) -> io::Result<Option<i32>> {
    loop {
        let mut status: libc::c_int = 0;
        let ret = unsafe { libc::waitpid(pid, &mut status, WALL | libc::WNOHANG) };
        if ret == pid {
            return Ok(Some(status));
        }
        if ret == 0 {
            return Ok(None);
        }
        let err = io::Error::last_os_error();
        if err.kind() == io::ErrorKind::Interrupted {
            continue;
        }
        return Err(err);
    }
}

/// Decoded view of a waitpid status word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaitStatus {
    Exited { code: i32 },
    Signaled { sig: i32 },
    /// Any ptrace or group stop; `event` is the `PTRACE_EVENT_*` number in
    /// bits 16..24 (0 when this is a plain signal-delivery stop).
    Stopped { sig: i32, event: i32 },
    Continued,
}

pub fn decode_status(status: i32) -> WaitStatus {
    if libc::WIFEXITED(status) {
        WaitStatus::Exited { code: libc::WEXITSTATUS(status) }
    } else if libc::WIFSIGNALED(status) {
        WaitStatus::Signaled { sig: libc::WTERMSIG(status) }
    } else if libc::WIFSTOPPED(status) {
        WaitStatus::Stopped { sig: libc::WSTOPSIG(status), event: (status >> 16) & 0xff }
    } else {
        WaitStatus::Continued
    }
}

/// Bulk read from another process without stopping it.
pub fn vm_read(pid: Pid, remote_addr: u64, buf: &mut [u8]) -> io::Result<usize> {
    let local = libc::iovec { iov_base: buf.as_mut_ptr().cast(), iov_len: buf.len() };
    let remote = libc::iovec { iov_base: remote_addr as *mut libc::c_void, iov_len: buf.len() };
    let n = unsafe { libc::process_vm_readv(pid, &local, 1, &remote, 1, 0) };
    if n < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(n as usize)
}

/// Bulk write into another process without stopping it.
pub fn vm_write(pid: Pid, remote_addr: u64, buf: &[u8]) -> io::Result<usize> {
    let local = libc::iovec { iov_base: buf.as_ptr() as *mut libc::c_void, iov_len: buf.len() };
    let remote = libc::iovec { iov_base: remote_addr as *mut libc::c_void, iov_len: buf.len() };
    let n = unsafe { libc::process_vm_writev(pid, &local, 1, &remote, 1, 0) };
    if n < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(n as usize)
}

/// Fill `buf` from the kernel's entropy pool.
pub fn getrandom(buf: &mut [u8]) -> io::Result<()> {
    let mut off = 0;
    while off < buf.len() {
        let n = unsafe {
            libc::syscall(
                libc::SYS_getrandom,
                buf[off..].as_mut_ptr(),
                buf.len() - off,
                0,
            )
        };
        if n < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err);
        }
        off += n as usize;
    }
    Ok(())
}
