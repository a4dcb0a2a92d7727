//! Typed access to counterpart memory.
//!
//! Two distinct mechanisms, used deliberately:
//!
//! * `process_vm_readv`/`writev` move whole objects in one syscall and do
//!   not require the counterpart to be stopped — registration mirroring
//!   and the return-switch context fetch use these.
//! * `PTRACE_PEEKDATA`/`POKEDATA` move one word per syscall and require a
//!   ptrace-stop — the legacy trap method uses these for its mailbox,
//!   which is exactly why it is slow, and the event builder uses a peek to
//!   fetch the return address under a faulted thrower's stack pointer.

use std::io;

use crate::sys::{self, Pid};

/// Read a `Copy` object from the counterpart at `addr`.
///
/// # Safety
/// `addr` must hold a valid `T` in the target; with fork-shared statics
/// the caller passes the address of the same static in its own image.
pub unsafe fn read_obj<T: Copy>(pid: Pid, addr: u64) -> io::Result<T> {
    let mut val = std::mem::MaybeUninit::<T>::uninit();
    let buf =
        std::slice::from_raw_parts_mut(val.as_mut_ptr().cast::<u8>(), std::mem::size_of::<T>());
    read_exact(pid, addr, buf)?;
    Ok(val.assume_init())
}

/// Write a `Copy` object into the counterpart at `addr`.
///
/// # Safety
/// Same contract as [`read_obj`].
pub unsafe fn write_obj<T: Copy>(pid: Pid, addr: u64, val: &T) -> io::Result<()> {
    let buf =
        std::slice::from_raw_parts((val as *const T).cast::<u8>(), std::mem::size_of::<T>());
    write_exact(pid, addr, buf)
}

pub fn read_exact(pid: Pid, addr: u64, buf: &mut [u8]) -> io::Result<()> {
    let mut done = 0;
    while done < buf.len() {
        let n = sys::vm_read(pid, addr + done as u64, &mut buf[done..])?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "vm_read stalled"));
        }
        done += n;
    }
    Ok(())
}

pub fn write_exact(pid: Pid, addr: u64, buf: &[u8]) -> io::Result<()> {
    let mut done = 0;
    while done < buf.len() {
        let n = sys::vm_write(pid, addr + done as u64, &buf[done..])?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::WriteZero, "vm_write stalled"));
        }
        done += n;
    }
    Ok(())
}

/// One-word read via ptrace; counterpart must be in a ptrace-stop.
pub fn peek_word(pid: Pid, addr: u64) -> io::Result<u64> {
    sys::peekdata(pid, addr)
}

/// One-word write via ptrace; counterpart must be in a ptrace-stop.
pub fn poke_word(pid: Pid, addr: u64, word: u64) -> io::Result<()> {
    sys::pokedata(pid, addr, word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[repr(C)]
    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    struct Blob {
        a: u64,
        b: [u8; 24],
        c: u32,
    }

    static mut TARGET: Blob = Blob { a: 0x0102_0304_0506_0708, b: [7; 24], c: 99 };

    /// The child mutates nothing; the parent reads and rewrites the blob
    /// across the process boundary and the child verifies the rewrite.
    #[test]
    fn objects_round_trip_across_processes() {
        let addr = std::ptr::addr_of!(TARGET) as u64;
        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            unsafe {
                loop {
                    let v = std::ptr::read_volatile(std::ptr::addr_of!(TARGET));
                    if v.c == 1234 {
                        // Report a few bytes so the parent can check them.
                        libc::_exit(if v.a == 0xfeed && v.b[0] == 9 { 42 } else { 43 });
                    }
                }
            }
        }

        // No ptrace needed for process_vm on a same-uid child.
        let got: Blob = unsafe { read_obj(child, addr) }.expect("read_obj");
        assert_eq!(got, Blob { a: 0x0102_0304_0506_0708, b: [7; 24], c: 99 });

        let new = Blob { a: 0xfeed, b: [9; 24], c: 1234 };
        unsafe { write_obj(child, addr, &new) }.expect("write_obj");

        let status = sys::wait_status(child).unwrap();
        assert_eq!(sys::decode_status(status), sys::WaitStatus::Exited { code: 42 });
    }

    #[test]
    fn unmapped_remote_address_errors() {
        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            unsafe {
                loop {
                    std::arch::asm!("pause");
                }
            }
        }
        let res: io::Result<u64> = unsafe { read_obj(child, 0x20) };
        assert!(res.is_err());
        unsafe { libc::kill(child, libc::SIGKILL) };
        let _ = sys::wait_status(child);
    }
}
