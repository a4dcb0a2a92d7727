//! General-purpose register snapshot of a stopped counterpart.
//!
//! The layout mirrors the kernel's `user_regs_struct` for x86-64 exactly, so
//! a snapshot can be filled by `PTRACE_GETREGS` and written back with
//! `PTRACE_SETREGS` without any translation step. Everything a migrated
//! fragment may read or write travels through this struct, including the
//! segment bases that carry thread-local storage.

/// All user-visible registers of one thread, in ptrace wire order.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegisterSnapshot {
    pub r15: u64,
    pub r14: u64,
    pub r13: u64,
    pub r12: u64,
    pub rbp: u64,
    pub rbx: u64,
    pub r11: u64,
    pub r10: u64,
    pub r9: u64,
    pub r8: u64,
    pub rax: u64,
    pub rcx: u64,
    pub rdx: u64,
    pub rsi: u64,
    pub rdi: u64,
    pub orig_rax: u64,
    pub rip: u64,
    pub cs: u64,
    pub eflags: u64,
    pub rsp: u64,
    pub ss: u64,
    pub fs_base: u64,
    pub gs_base: u64,
    pub ds: u64,
    pub es: u64,
    pub fs: u64,
    pub gs: u64,
}

impl RegisterSnapshot {
    /// All-zero snapshot, usable as a static initializer.
    pub const fn zeroed() -> Self {
        // Safe by construction: every field is a u64.
        unsafe { std::mem::transmute([0u64; 27]) }
    }

    #[inline]
    pub fn pc(&self) -> u64 {
        self.rip
    }

    #[inline]
    pub fn sp(&self) -> u64 {
        self.rsp
    }

    #[inline]
    pub fn set_pc(&mut self, pc: u64) {
        self.rip = pc;
    }

    #[inline]
    pub fn set_sp(&mut self, sp: u64) {
        self.rsp = sp;
    }

    /// The register that carries a fragment's scalar result back to the
    /// interrupted caller (SysV return register).
    #[inline]
    pub fn set_result(&mut self, value: u64) {
        self.rax = value;
    }

    /// First integer argument register; the legacy trap method parks its
    /// request identifier here.
    #[inline]
    pub fn arg0(&self) -> u64 {
        self.rdi
    }
}
