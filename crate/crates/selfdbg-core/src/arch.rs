//! x86-64 invocation-site stubs and context plumbing.
//!
//! Sites are real instructions in the text segment, not signal handlers:
//! a switch begins when one of these stubs dereferences or branches to an
//! address inside the fault namespace and the CPU raises the fault for
//! the counterpart to catch. Three families:
//!
//! * Per-fragment *inline* stubs (`selfdbg_site_{rw,x,trap}_N`): each
//!   registered fragment gets its own faulting instruction, reading its
//!   encoded target from its slot in `SELFDBG_ENCODED_*`. The inline
//!   flavor deliberately carries a `movabs` of the default mask next to
//!   the fault — the residue pattern a static scanner can pair with the
//!   dereference, which the scan subcommand demonstrates.
//! * Shared *reused-code* stubs (`selfdbg_read_word`,
//!   `selfdbg_call_indirect`): ordinary helpers that run benignly on valid
//!   arguments and become switch sites only when handed an encoded value;
//!   nothing near them hints at the namespace.
//! * Runtime stubs: the return-switch raisers, the debugger-loop entry a
//!   demoted catcher is pointed at, and the full register-file restore
//!   used to hand control back to suspended application code.
//!
//! Calling convention notes the catcher relies on when it extracts
//! fragment arguments from a faulted thrower's registers:
//!
//! * inline rw/x and reused x fault with `rdi`=arg0, `rsi`=arg1;
//! * reused rw faults with `rdi`=encoded, `rsi`=arg0, `rdx`=arg1;
//! * load/store and trap sites resume at `[rsp]` with `rsp+8`;
//! * exec sites resume at `[rsp+8]` with `rsp+16` (the indirect call
//!   pushed the in-stub return label first).

use std::arch::global_asm;

use crate::regs::RegisterSnapshot;

/// One stub slot per possible fragment.
pub const NUM_SLOTS: usize = crate::codec::MAX_FRAGMENTS;

/// Per-slot encoded targets the inline stubs load at run time. Written at
/// registration, mirrored to the counterpart with the registry.
#[no_mangle]
pub static mut SELFDBG_ENCODED_RW: [u64; NUM_SLOTS] = [0; NUM_SLOTS];
#[no_mangle]
pub static mut SELFDBG_ENCODED_X: [u64; NUM_SLOTS] = [0; NUM_SLOTS];

macro_rules! inline_site_stubs {
    ($($n:literal),+) => {
        $(
            global_asm!(concat!(
                ".text\n",
                ".balign 16\n",
                ".globl selfdbg_site_rw_", $n, "\n",
                "selfdbg_site_rw_", $n, ":\n",
                "  mov rax, qword ptr [rip + SELFDBG_ENCODED_RW + 8*", $n, "]\n",
                "  movabs r11, 0xffff800000000000\n",
                ".globl selfdbg_site_rw_fault_", $n, "\n",
                "selfdbg_site_rw_fault_", $n, ":\n",
                "  mov rax, qword ptr [rax]\n",
                "  ret\n",
                ".balign 16\n",
                ".globl selfdbg_site_x_", $n, "\n",
                "selfdbg_site_x_", $n, ":\n",
                "  mov rax, qword ptr [rip + SELFDBG_ENCODED_X + 8*", $n, "]\n",
                "  movabs r11, 0xffff800000000000\n",
                "  call rax\n",
                ".globl selfdbg_site_x_ret_", $n, "\n",
                "selfdbg_site_x_ret_", $n, ":\n",
                "  ret\n",
                ".balign 16\n",
                ".globl selfdbg_site_trap_", $n, "\n",
                "selfdbg_site_trap_", $n, ":\n",
                "  int3\n",
                "  ret\n",
            ));
        )+
    };
}

inline_site_stubs!(0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15);

macro_rules! site_table {
    ($table:literal, $label_prefix:literal) => {
        global_asm!(concat!(
            ".section .data.rel.ro.selfdbg,\"aw\",@progbits\n",
            ".balign 8\n",
            ".globl ", $table, "\n",
            $table, ":\n",
            concat!(
                "  .quad ", $label_prefix, "0\n",
                "  .quad ", $label_prefix, "1\n",
                "  .quad ", $label_prefix, "2\n",
                "  .quad ", $label_prefix, "3\n",
                "  .quad ", $label_prefix, "4\n",
                "  .quad ", $label_prefix, "5\n",
                "  .quad ", $label_prefix, "6\n",
                "  .quad ", $label_prefix, "7\n",
                "  .quad ", $label_prefix, "8\n",
                "  .quad ", $label_prefix, "9\n",
                "  .quad ", $label_prefix, "10\n",
                "  .quad ", $label_prefix, "11\n",
                "  .quad ", $label_prefix, "12\n",
                "  .quad ", $label_prefix, "13\n",
                "  .quad ", $label_prefix, "14\n",
                "  .quad ", $label_prefix, "15\n",
            ),
            ".text\n",
        ));
    };
}

site_table!("SELFDBG_TABLE_RW", "selfdbg_site_rw_");
site_table!("SELFDBG_TABLE_RW_FAULT", "selfdbg_site_rw_fault_");
site_table!("SELFDBG_TABLE_X", "selfdbg_site_x_");
site_table!("SELFDBG_TABLE_X_RET", "selfdbg_site_x_ret_");
site_table!("SELFDBG_TABLE_TRAP", "selfdbg_site_trap_");

// Shared (reused-code) stubs, return-switch raisers, loop entry, restore.
global_asm!(
    r#"
    .text
    .balign 16
    .globl selfdbg_read_word
selfdbg_read_word:
    mov rax, qword ptr [rdi]
    ret

    .balign 16
    .globl selfdbg_call_indirect
selfdbg_call_indirect:
    mov rax, rdi
    mov rdi, rsi
    mov rsi, rdx
    call rax
    .globl selfdbg_call_indirect_ret
selfdbg_call_indirect_ret:
    ret

    .balign 16
    .globl selfdbg_raise_rw
selfdbg_raise_rw:
    mov rax, qword ptr [rdi]
    ud2

    .balign 16
    .globl selfdbg_raise_x
selfdbg_raise_x:
    call rdi
    .globl selfdbg_raise_x_ret
selfdbg_raise_x_ret:
    ud2

    .balign 16
    .globl selfdbg_loop_entry
selfdbg_loop_entry:
    and rsp, -16
    xor ebp, ebp
    call selfdbg_debugger_loop_entry
    ud2

    .balign 16
    .globl selfdbg_context_restore
selfdbg_context_restore:
    mov rsp, qword ptr [rdi + 152]
    push qword ptr [rdi + 128]
    push qword ptr [rdi + 144]
    popfq
    mov r15, qword ptr [rdi + 0]
    mov r14, qword ptr [rdi + 8]
    mov r13, qword ptr [rdi + 16]
    mov r12, qword ptr [rdi + 24]
    mov rbp, qword ptr [rdi + 32]
    mov rbx, qword ptr [rdi + 40]
    mov r11, qword ptr [rdi + 48]
    mov r10, qword ptr [rdi + 56]
    mov r9,  qword ptr [rdi + 64]
    mov r8,  qword ptr [rdi + 72]
    mov rax, qword ptr [rdi + 80]
    mov rcx, qword ptr [rdi + 88]
    mov rdx, qword ptr [rdi + 96]
    mov rsi, qword ptr [rdi + 104]
    mov rdi, qword ptr [rdi + 112]
    ret
"#
);

extern "C" {
    static SELFDBG_TABLE_RW: [u64; NUM_SLOTS];
    static SELFDBG_TABLE_RW_FAULT: [u64; NUM_SLOTS];
    static SELFDBG_TABLE_X: [u64; NUM_SLOTS];
    static SELFDBG_TABLE_X_RET: [u64; NUM_SLOTS];
    static SELFDBG_TABLE_TRAP: [u64; NUM_SLOTS];

    pub fn selfdbg_read_word(ptr: u64, a0: u64, a1: u64) -> u64;
    pub fn selfdbg_call_indirect(f: u64, a0: u64, a1: u64) -> u64;
    fn selfdbg_call_indirect_ret();
    pub fn selfdbg_raise_rw(encoded: u64) -> !;
    pub fn selfdbg_raise_x(encoded: u64) -> !;
    fn selfdbg_raise_x_ret();
    fn selfdbg_loop_entry();
    pub fn selfdbg_context_restore(regs: *const RegisterSnapshot) -> !;
}

/// Call target of inline rw/x stubs and the trap stub for `slot`.
pub fn inline_entry(kind: crate::codec::FaultKind, slot: usize) -> u64 {
    unsafe {
        match kind {
            crate::codec::FaultKind::SegvLoadStore => SELFDBG_TABLE_RW[slot],
            crate::codec::FaultKind::SegvExec => SELFDBG_TABLE_X[slot],
            crate::codec::FaultKind::TrapReference => SELFDBG_TABLE_TRAP[slot],
        }
    }
}

/// Whitelist pc of the inline site for `slot`: the faulting instruction
/// for rw, the post-call return label for x, the trap byte itself for
/// trap.
pub fn inline_site_pc(kind: crate::codec::FaultKind, slot: usize) -> u64 {
    unsafe {
        match kind {
            crate::codec::FaultKind::SegvLoadStore => SELFDBG_TABLE_RW_FAULT[slot],
            crate::codec::FaultKind::SegvExec => SELFDBG_TABLE_X_RET[slot],
            crate::codec::FaultKind::TrapReference => SELFDBG_TABLE_TRAP[slot],
        }
    }
}

/// Whitelist pc of the shared reused-code site for `kind`.
pub fn reused_site_pc(kind: crate::codec::FaultKind) -> u64 {
    match kind {
        crate::codec::FaultKind::SegvLoadStore => selfdbg_read_word as *const () as u64,
        crate::codec::FaultKind::SegvExec => selfdbg_call_indirect_ret as *const () as u64,
        crate::codec::FaultKind::TrapReference => 0,
    }
}

/// Whitelist pc of the return-switch raiser for `kind`.
pub fn raise_site_pc(kind: crate::codec::FaultKind) -> u64 {
    match kind {
        crate::codec::FaultKind::SegvLoadStore => selfdbg_raise_rw as *const () as u64,
        crate::codec::FaultKind::SegvExec => selfdbg_raise_x_ret as *const () as u64,
        crate::codec::FaultKind::TrapReference => 0,
    }
}

/// Address a demoted catcher is pointed at by its counterpart.
pub fn loop_entry_pc() -> u64 {
    selfdbg_loop_entry as *const () as u64
}

pub unsafe fn set_encoded(kind: crate::codec::FaultKind, slot: usize, value: u64) {
    match kind {
        crate::codec::FaultKind::SegvLoadStore => {
            (*std::ptr::addr_of_mut!(SELFDBG_ENCODED_RW))[slot] = value
        }
        crate::codec::FaultKind::SegvExec => {
            (*std::ptr::addr_of_mut!(SELFDBG_ENCODED_X))[slot] = value
        }
        crate::codec::FaultKind::TrapReference => {}
    }
}

pub fn encoded_rw_addr() -> u64 {
    std::ptr::addr_of!(SELFDBG_ENCODED_RW) as u64
}

pub fn encoded_x_addr() -> u64 {
    std::ptr::addr_of!(SELFDBG_ENCODED_X) as u64
}

/// Invoke the inline rw or x stub for `slot` with two arguments. Under
/// protection this does not return until the migrated fragment's result
/// switch lands; unprotected (valid slot contents) it is a plain call.
pub unsafe fn call_inline(kind: crate::codec::FaultKind, slot: usize, a0: u64, a1: u64) -> u64 {
    let f: unsafe extern "C" fn(u64, u64) -> u64 =
        std::mem::transmute(inline_entry(kind, slot) as usize);
    f(a0, a1)
}

/// Invoke the trap stub for `slot` with the request identifier in the
/// register the catcher inspects. Under protection this does not return
/// until the migrated fragment's result switch lands (the arguments ride
/// the mailbox, not registers).
pub unsafe fn call_trap(slot: usize, ident: u64) -> u64 {
    let f: unsafe extern "C" fn(u64) -> u64 =
        std::mem::transmute(inline_entry(crate::codec::FaultKind::TrapReference, slot) as usize);
    f(ident)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::FaultKind;

    #[test]
    fn reused_read_word_is_benign_on_valid_pointers() {
        let word: u64 = 0x00c0_ffee_0abc_de00;
        let got = unsafe { selfdbg_read_word(&word as *const u64 as u64, 0, 0) };
        assert_eq!(got, word);
    }

    extern "C" fn add_args(a: u64, b: u64) -> u64 {
        a.wrapping_mul(3).wrapping_add(b)
    }

    #[test]
    fn reused_call_indirect_is_benign_on_valid_targets() {
        let got = unsafe { selfdbg_call_indirect(add_args as usize as u64, 100, 7) };
        assert_eq!(got, 307);
    }

    #[test]
    fn inline_rw_stub_reads_through_its_slot() {
        // With a *valid* address in the slot the stub is an ordinary read:
        // proves the slot wiring and the stub data path without a fault.
        let secret: u64 = 0xfeed_f00d_dead_0001;
        unsafe {
            set_encoded(FaultKind::SegvLoadStore, 3, &secret as *const u64 as u64);
            assert_eq!(call_inline(FaultKind::SegvLoadStore, 3, 0, 0), secret);
            set_encoded(FaultKind::SegvLoadStore, 3, 0);
        }
    }

    #[test]
    fn inline_x_stub_calls_through_its_slot() {
        unsafe {
            set_encoded(FaultKind::SegvExec, 5, add_args as usize as u64);
            assert_eq!(call_inline(FaultKind::SegvExec, 5, 10, 4), 34);
            set_encoded(FaultKind::SegvExec, 5, 0);
        }
    }

    #[test]
    fn tables_hold_distinct_nonzero_text_addresses() {
        let mut all = Vec::new();
        for slot in 0..NUM_SLOTS {
            for kind in [FaultKind::SegvLoadStore, FaultKind::SegvExec, FaultKind::TrapReference] {
                all.push(inline_entry(kind, slot));
                all.push(inline_site_pc(kind, slot));
            }
        }
        all.extend([
            reused_site_pc(FaultKind::SegvLoadStore),
            reused_site_pc(FaultKind::SegvExec),
            raise_site_pc(FaultKind::SegvLoadStore),
            raise_site_pc(FaultKind::SegvExec),
            loop_entry_pc(),
        ]);
        assert!(all.iter().all(|&a| a != 0));
        let mut dedup = all.clone();
        dedup.sort_unstable();
        dedup.dedup();
        // rw-fault pcs differ from rw entries; trap entry == trap pc, so
        // account for those 16 intentional duplicates.
        assert_eq!(dedup.len(), all.len() - NUM_SLOTS);
    }

    #[test]
    fn trap_sites_start_with_the_trap_opcode() {
        for slot in 0..NUM_SLOTS {
            let pc = inline_site_pc(FaultKind::TrapReference, slot);
            let byte = unsafe { *(pc as *const u8) };
            assert_eq!(byte, 0xcc, "slot {slot}");
        }
    }

    #[test]
    fn segv_sites_do_not_carry_trap_opcodes() {
        for slot in 0..NUM_SLOTS {
            for kind in [FaultKind::SegvLoadStore, FaultKind::SegvExec] {
                let pc = inline_site_pc(kind, slot);
                let byte = unsafe { *(pc as *const u8) };
                assert_ne!(byte, 0xcc, "{kind:?} slot {slot}");
            }
        }
    }

    #[test]
    fn inline_sites_carry_the_namespace_immediate_and_reused_do_not() {
        // movabs r11, 0xffff800000000000 encodes as 49 BB 00..00 80 FF FF.
        let needle: [u8; 10] = [0x49, 0xbb, 0, 0, 0, 0, 0, 0x80, 0xff, 0xff];
        let window = 24usize;

        let has_needle = |pc: u64| -> bool {
            let start = pc - window as u64;
            let bytes =
                unsafe { std::slice::from_raw_parts(start as *const u8, window * 2) };
            bytes.windows(needle.len()).any(|w| w == needle)
        };

        for slot in 0..NUM_SLOTS {
            assert!(has_needle(inline_site_pc(FaultKind::SegvLoadStore, slot)), "rw {slot}");
            assert!(has_needle(inline_site_pc(FaultKind::SegvExec, slot)), "x {slot}");
        }
        assert!(!has_needle(reused_site_pc(FaultKind::SegvLoadStore)));
        assert!(!has_needle(reused_site_pc(FaultKind::SegvExec)));
    }

    /// Full register-file restore, exercised in a forked child: build a
    /// synthetic context whose rip lands in a reporter function and whose
    /// registers carry recognizable values; the reporter exits with a code
    /// derived from what actually arrived in the registers.
    #[test]
    fn context_restore_reinstates_a_synthetic_context() {
        unsafe extern "C" fn landing(code: u64) -> ! {
            // rdi must have been restored to 0x2a.
            libc::_exit(code as i32)
        }

        let child = unsafe { libc::fork() };
        assert!(child >= 0);
        if child == 0 {
            unsafe {
                let stack = libc::mmap(
                    std::ptr::null_mut(),
                    64 * 1024,
                    libc::PROT_READ | libc::PROT_WRITE,
                    libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                    -1,
                    0,
                );
                if stack == libc::MAP_FAILED {
                    libc::_exit(101);
                }
                let mut snap = RegisterSnapshot::zeroed();
                snap.rip = landing as usize as u64;
                snap.rsp = (stack as u64 + 64 * 1024 - 64) & !0xf;
                snap.rdi = 0x2a;
                snap.eflags = 0x202;
                selfdbg_context_restore(&snap);
            }
        }
        let status = crate::sys::wait_status(child).unwrap();
        assert_eq!(
            crate::sys::decode_status(status),
            crate::sys::WaitStatus::Exited { code: 0x2a },
            "restored rdi should arrive in the landing function"
        );
    }
}
