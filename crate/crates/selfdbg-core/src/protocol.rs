//! OS-free definition of the reciprocal-debugging state machine.
//!
//! Two processes trace each other. At any instant one of them (the
//! *thrower*) executes application code while the other (the *catcher*)
//! waits in its debugger loop. The thrower requests a control transfer by
//! faulting on purpose; the catcher classifies the stop and executes a
//! short, ordered action plan. This module defines the events, the
//! classification rules, and the plans; executing them against a live
//! counterpart is the debugger's job.

use arrayvec::ArrayVec;
use thiserror::Error;

use crate::codec::{self, CodecConfig, FaultKind};
use crate::regs::RegisterSnapshot;
use crate::whitelist::{InvocationSite, Whitelist};

/// Which half of the pair a process currently is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProcessRole {
    /// Executes application code; raises faults to request switches.
    Thrower,
    /// Waits in the debugger loop; services the counterpart's stops.
    Catcher,
}

/// A decoded debug stop caused by a (possibly intentional) fault.
#[derive(Clone, Copy, Debug)]
pub struct SwitchEvent {
    pub pid: i32,
    /// Address of the faulting instruction. For indirect-branch faults the
    /// hardware PC is the garbage target, so the builder substitutes the
    /// return label recovered from the stack.
    pub faulting_pc: u64,
    pub fault_kind: FaultKind,
    /// The accessed or branched-to address carrying the encoded target.
    /// Absent for the legacy trap method, which carries an identifier in
    /// `regs` instead.
    pub fault_address: Option<u64>,
    pub regs: RegisterSnapshot,
}

/// Every stop the catcher can observe, fault or not.
#[derive(Clone, Copy, Debug)]
pub enum DebugStop {
    /// A SIGSEGV/SIGTRAP whose siginfo marks it as raised by the kernel.
    Fault(SwitchEvent),
    /// A signal-delivery stop for an ordinary (or user-sent) signal.
    Signal { signo: i32 },
    /// The counterpart reported its exit (exit notification stop).
    ExitNotice { status: i32 },
    /// Any other stop: group-stop bookkeeping and similar noise.
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classification {
    /// A whitelisted, decodable switch request for `target`.
    SwitchRequest { site: InvocationSite, target: u64 },
    /// Not ours: pass the signal through unchanged.
    GenuineFault { signal: i32 },
    /// The counterpart is exiting; detach before its exit completes.
    CounterpartExit { status: i32 },
    /// Suppress and keep waiting.
    IgnorableNotice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    TransitionCounterpartToCatcher,
    TransferControlTo { target: u64 },
    ForwardSignal { signal: i32 },
    DetachAndExit,
    SuppressAndContinue,
}

/// Plans are at most two actions; fixed capacity keeps plan construction
/// allocation-free inside the debugger loop.
pub type ActionPlan = ArrayVec<Action, 2>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("plan_for called in Thrower role; only the active mini-debugger plans")]
    RoleViolation,
}

/// Map a fault stop to what it means for us.
///
/// A stop is a switch request only when the faulting PC is whitelisted,
/// the recorded fault kind matches the registration (never hijack a real
/// bug at a known address), and the carried target decodes into the
/// registered code segment. Everything else is a genuine fault and keeps
/// its original signal.
pub fn classify(event: &SwitchEvent, whitelist: &Whitelist, codec: &CodecConfig) -> Classification {
    let signal = match event.fault_kind {
        FaultKind::TrapReference => libc::SIGTRAP,
        _ => libc::SIGSEGV,
    };
    let genuine = Classification::GenuineFault { signal };

    let site = match whitelist.lookup(event.faulting_pc) {
        Some(site) => site,
        None => return genuine,
    };
    if site.fault_kind != event.fault_kind {
        return genuine;
    }

    match event.fault_kind {
        FaultKind::TrapReference => {
            // Legacy path: the request identifier rides in the first
            // argument register and resolves through a per-fragment table.
            match codec.trap_target(event.regs.arg0()) {
                Some(entry) => Classification::SwitchRequest { site, target: entry },
                None => genuine,
            }
        }
        _ => {
            let fault_address = match event.fault_address {
                Some(addr) => addr,
                None => return genuine,
            };
            let scheme = match codec::select_scheme(event.fault_kind, codec) {
                Ok(s) => s,
                Err(_) => return genuine,
            };
            match codec::decode_target(fault_address, scheme, (codec.code_lo, codec.code_hi)) {
                Ok(target) => Classification::SwitchRequest { site, target },
                Err(_) => genuine,
            }
        }
    }
}

/// Total classification over every possible stop.
pub fn classify_stop(stop: &DebugStop, whitelist: &Whitelist, codec: &CodecConfig) -> Classification {
    match stop {
        DebugStop::Fault(event) => classify(event, whitelist, codec),
        DebugStop::Signal { signo } => Classification::GenuineFault { signal: *signo },
        DebugStop::ExitNotice { status } => Classification::CounterpartExit { status: *status },
        DebugStop::Other => Classification::IgnorableNotice,
    }
}

/// Produce the ordered action sequence for a classified stop.
///
/// Only the active mini-debugger (the catcher) may plan; the counterpart
/// must first be moved into its debugger loop before control is taken,
/// hence the fixed transition-then-transfer order for switch requests.
pub fn plan_for(
    classification: Classification,
    my_role: ProcessRole,
) -> Result<ActionPlan, ProtocolError> {
    if my_role != ProcessRole::Catcher {
        return Err(ProtocolError::RoleViolation);
    }
    let mut plan = ActionPlan::new();
    match classification {
        Classification::SwitchRequest { target, .. } => {
            plan.push(Action::TransitionCounterpartToCatcher);
            plan.push(Action::TransferControlTo { target });
        }
        Classification::GenuineFault { signal } => plan.push(Action::ForwardSignal { signal }),
        Classification::CounterpartExit { .. } => plan.push(Action::DetachAndExit),
        Classification::IgnorableNotice => plan.push(Action::SuppressAndContinue),
    }
    debug_assert!(plan_is_well_ordered(&plan));
    Ok(plan)
}

/// Structural invariant: a transfer never precedes (or lacks) its
/// transition within one plan.
pub fn plan_is_well_ordered(plan: &ActionPlan) -> bool {
    let transfer_at = plan.iter().position(|a| matches!(a, Action::TransferControlTo { .. }));
    match transfer_at {
        None => true,
        Some(i) => i > 0 && plan[i - 1] == Action::TransitionCounterpartToCatcher,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::FaultNamespace;
    use crate::whitelist::SiteFlavor;
    use proptest::prelude::*;

    const CODE_LO: u64 = 0x0000_5500_0000_0000;
    const CODE_HI: u64 = 0x0000_5500_0100_0000;
    const SITE_PC: u64 = CODE_LO + 0x800;

    fn fixture() -> (Whitelist, CodecConfig) {
        let mut wl = Whitelist::new(0x517e_0a5c_1d0f_77b1).unwrap();
        wl.insert(InvocationSite {
            pc: SITE_PC,
            fault_kind: FaultKind::SegvLoadStore,
            scheme_id: 1,
            flavor: SiteFlavor::Inline,
            fragment_id: 1,
        })
        .unwrap();
        let codec = CodecConfig::with_default_schemes(FaultNamespace::default(), CODE_LO, CODE_HI);
        (wl, codec)
    }

    fn fault_at(pc: u64, target: u64, codec: &CodecConfig) -> SwitchEvent {
        let scheme = codec::select_scheme(FaultKind::SegvLoadStore, codec).unwrap();
        SwitchEvent {
            pid: 1234,
            faulting_pc: pc,
            fault_kind: FaultKind::SegvLoadStore,
            fault_address: Some(codec::encode_target(target, scheme, &codec.namespace).unwrap()),
            regs: RegisterSnapshot::default(),
        }
    }

    #[test]
    fn whitelisted_fault_with_valid_encoding_is_a_switch_request() {
        let (wl, codec) = fixture();
        let target = CODE_LO + 0x4000;
        let event = fault_at(SITE_PC, target, &codec);
        match classify(&event, &wl, &codec) {
            Classification::SwitchRequest { site, target: t } => {
                assert_eq!(site.pc, SITE_PC);
                assert_eq!(t, target);
            }
            other => panic!("expected SwitchRequest, got {other:?}"),
        }
    }

    #[test]
    fn unlisted_pc_classifies_as_genuine_segv() {
        let (wl, codec) = fixture();
        let event = fault_at(CODE_LO + 0x9999, CODE_LO + 0x4000, &codec);
        assert_eq!(
            classify(&event, &wl, &codec),
            Classification::GenuineFault { signal: libc::SIGSEGV }
        );
    }

    #[test]
    fn empty_whitelist_classifies_everything_genuine() {
        let (_, codec) = fixture();
        let wl = Whitelist::new(1).unwrap();
        let event = fault_at(SITE_PC, CODE_LO + 0x4000, &codec);
        assert_eq!(
            classify(&event, &wl, &codec),
            Classification::GenuineFault { signal: libc::SIGSEGV }
        );
    }

    #[test]
    fn kind_mismatch_at_whitelisted_pc_is_genuine() {
        // A real crash can land on a registered address by accident; only
        // the registered fault kind may claim it.
        let (wl, codec) = fixture();
        let mut event = fault_at(SITE_PC, CODE_LO + 0x4000, &codec);
        event.fault_kind = FaultKind::SegvExec;
        assert_eq!(
            classify(&event, &wl, &codec),
            Classification::GenuineFault { signal: libc::SIGSEGV }
        );
    }

    #[test]
    fn undecodable_fault_address_is_genuine() {
        let (wl, codec) = fixture();
        let mut event = fault_at(SITE_PC, CODE_LO + 0x4000, &codec);
        // An address that decodes outside the code segment.
        event.fault_address = Some(crate::codec::KERNEL_HALF_BASE | 0x7);
        assert_eq!(
            classify(&event, &wl, &codec),
            Classification::GenuineFault { signal: libc::SIGSEGV }
        );
    }

    #[test]
    fn trap_event_resolves_through_identifier_table() {
        let (mut wl, mut codec) = fixture();
        let trap_pc = CODE_LO + 0xa00;
        wl.insert(InvocationSite {
            pc: trap_pc,
            fault_kind: FaultKind::TrapReference,
            scheme_id: 0,
            flavor: SiteFlavor::Inline,
            fragment_id: 2,
        })
        .unwrap();
        codec.add_trap_target(2, CODE_LO + 0x5000);
        let mut regs = RegisterSnapshot::default();
        regs.rdi = 2;
        let event = SwitchEvent {
            pid: 1,
            faulting_pc: trap_pc,
            fault_kind: FaultKind::TrapReference,
            fault_address: None,
            regs,
        };
        assert_eq!(
            classify(&event, &wl, &codec),
            Classification::SwitchRequest {
                site: wl.lookup(trap_pc).unwrap(),
                target: CODE_LO + 0x5000
            }
        );
        // Unknown identifier: conservative.
        let mut bad = event;
        bad.regs.rdi = 99;
        assert_eq!(
            classify(&bad, &wl, &codec),
            Classification::GenuineFault { signal: libc::SIGTRAP }
        );
    }

    #[test]
    fn plans_match_the_protocol() {
        let (wl, codec) = fixture();
        let event = fault_at(SITE_PC, CODE_LO + 0x4000, &codec);
        let cls = classify(&event, &wl, &codec);
        let plan = plan_for(cls, ProcessRole::Catcher).unwrap();
        assert_eq!(
            plan.as_slice(),
            &[
                Action::TransitionCounterpartToCatcher,
                Action::TransferControlTo { target: CODE_LO + 0x4000 }
            ]
        );

        let plan = plan_for(
            Classification::GenuineFault { signal: libc::SIGSEGV },
            ProcessRole::Catcher,
        )
        .unwrap();
        assert_eq!(plan.as_slice(), &[Action::ForwardSignal { signal: libc::SIGSEGV }]);

        let plan = plan_for(Classification::CounterpartExit { status: 0 }, ProcessRole::Catcher)
            .unwrap();
        assert_eq!(plan.as_slice(), &[Action::DetachAndExit]);

        let plan = plan_for(Classification::IgnorableNotice, ProcessRole::Catcher).unwrap();
        assert_eq!(plan.as_slice(), &[Action::SuppressAndContinue]);
    }

    #[test]
    fn planning_as_thrower_is_a_contract_violation() {
        assert_eq!(
            plan_for(Classification::IgnorableNotice, ProcessRole::Thrower),
            Err(ProtocolError::RoleViolation)
        );
    }

    /// Inputs for the replay property: a mix of legal events hitting a
    /// two-process model.
    #[derive(Clone, Copy, Debug)]
    enum ReplayEvent {
        Switch { target_off: u64 },
        StraySignal { signo: i32 },
    }

    fn replay_event() -> impl Strategy<Value = ReplayEvent> {
        prop_oneof![
            (0u64..0x10000).prop_map(|target_off| ReplayEvent::Switch { target_off }),
            (1i32..32).prop_map(|signo| ReplayEvent::StraySignal { signo }),
        ]
    }

    proptest! {
        /// Plan ordering: every switch plan transitions before transferring.
        #[test]
        fn switch_plans_are_well_ordered(target in CODE_LO..CODE_HI) {
            let (wl, _codec) = fixture();
            let site = wl.lookup(SITE_PC).unwrap();
            let plan = plan_for(
                Classification::SwitchRequest { site, target },
                ProcessRole::Catcher,
            ).unwrap();
            prop_assert!(plan_is_well_ordered(&plan));
            prop_assert_eq!(plan[0], Action::TransitionCounterpartToCatcher);
        }

        /// Signal transparency: non-whitelisted faults forward exactly the
        /// original signal, nothing more.
        #[test]
        fn genuine_faults_forward_identically(signo in 1i32..32) {
            let plan = plan_for(
                Classification::GenuineFault { signal: signo },
                ProcessRole::Catcher,
            ).unwrap();
            prop_assert_eq!(plan.len(), 1);
            prop_assert_eq!(plan[0], Action::ForwardSignal { signal: signo });
        }

        /// Role alternation: replaying any legal event sequence through
        /// classify/plan_for never lets one process take control twice
        /// without an intervening transition aimed at it.
        #[test]
        fn roles_alternate_over_replay(events in proptest::collection::vec(replay_event(), 1..64)) {
            let (wl, codec) = fixture();
            // Process 0 starts as thrower, 1 as catcher.
            let mut roles = [ProcessRole::Thrower, ProcessRole::Catcher];
            // Per process: set when it last received TransferControlTo and
            // cleared when a transition targets it again.
            let mut holds_control = [true, false];

            for ev in events {
                let thrower = roles.iter().position(|r| *r == ProcessRole::Thrower).unwrap();
                let catcher = 1 - thrower;
                match ev {
                    ReplayEvent::Switch { target_off } => {
                        let event = fault_at(SITE_PC, CODE_LO + (target_off % 0x1000), &codec);
                        let cls = classify(&event, &wl, &codec);
                        let plan = plan_for(cls, roles[catcher]).unwrap();
                        prop_assert!(plan_is_well_ordered(&plan));
                        for action in plan {
                            match action {
                                Action::TransitionCounterpartToCatcher => {
                                    roles[thrower] = ProcessRole::Catcher;
                                    holds_control[thrower] = false;
                                }
                                Action::TransferControlTo { .. } => {
                                    // The invariant under test.
                                    prop_assert!(!holds_control[catcher],
                                        "transfer to a process that was never transitioned away");
                                    roles[catcher] = ProcessRole::Thrower;
                                    holds_control[catcher] = true;
                                }
                                _ => {}
                            }
                        }
                    }
                    ReplayEvent::StraySignal { signo } => {
                        let cls = Classification::GenuineFault { signal: signo };
                        let plan = plan_for(cls, roles[catcher]).unwrap();
                        prop_assert_eq!(plan.len(), 1);
                        // Forwarding does not change roles.
                    }
                }
                // Exactly one thrower at all times.
                prop_assert_eq!(
                    roles.iter().filter(|r| **r == ProcessRole::Thrower).count(),
                    1
                );
            }
        }
    }
}
