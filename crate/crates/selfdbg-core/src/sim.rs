//! Deterministic model of Linux signal and debug-stop semantics for two
//! mutually-attached processes.
//!
//! The model exists to answer one question exhaustively: given a starting
//! configuration and a set of external events (signals, faults, exits), can
//! the pair reach a state where both processes sit in a debug stop with
//! nobody left to continue them? Exploration is breadth-first over all
//! event interleavings up to a depth bound, with a fixed expansion order so
//! verdicts and traces are reproducible run to run.
//!
//! Fidelity is deliberately minimal: standard signals coalesce into a set,
//! group-stop and signal-stop collapse into one stopped state except for
//! SIGSTOP (which can never be blocked and which nothing in the runtime
//! ever continues), and scheduling fairness is out of scope.

use std::collections::{HashSet, VecDeque};

use serde::Serialize;

use crate::codec::{self, CodecConfig, FaultKind, FaultNamespace};
use crate::protocol::{
    classify_stop, plan_for, Action, DebugStop, ProcessRole, SwitchEvent,
};
use crate::regs::RegisterSnapshot;
use crate::whitelist::{InvocationSite, SiteFlavor, Whitelist};

pub const SIGKILL: i32 = 9;
pub const SIGUSR1: i32 = 10;
pub const SIGSEGV: i32 = 11;
pub const SIGTERM: i32 = 15;
pub const SIGCHLD: i32 = 17;
pub const SIGSTOP: i32 = 19;

/// All maskable signals; SIGKILL and SIGSTOP cannot be blocked.
pub const FULL_BLOCK: u32 = !0u32 & !(1 << SIGKILL) & !(1 << SIGSTOP);

fn sig_name(sig: i32) -> &'static str {
    match sig {
        SIGKILL => "SIGKILL",
        SIGUSR1 => "SIGUSR1",
        SIGSEGV => "SIGSEGV",
        SIGTERM => "SIGTERM",
        SIGCHLD => "SIGCHLD",
        SIGSTOP => "SIGSTOP",
        _ => "SIG?",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StopCause {
    /// An intentional fault at a whitelisted site.
    WhitelistedFault,
    /// A crash at a non-whitelisted address.
    GenuineFault,
    /// Signal-delivery stop for an asynchronous signal.
    SignalDelivery(i32),
    /// SIGSTOP; nothing in the runtime ever delivers the matching SIGCONT,
    /// so this stop is never serviced.
    GroupStop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExitWay {
    Normal,
    Killed(i32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunState {
    Running,
    DebugStopped(StopCause),
    Exited(ExitWay),
}

/// Modeled kernel state of one process of the pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SimProcess {
    pub run_state: RunState,
    /// Coalesced pending set (standard signals only).
    pub pending: u32,
    pub blocked: u32,
    pub child_notices_suppressed: bool,
    pub role: ProcessRole,
    /// The application installs a SIGTERM handler that cleans up and exits.
    pub has_term_handler: bool,
    /// Number of times the cleanup handler ran (must end up exactly 1 for
    /// a clean shutdown).
    pub cleanup_ran: u8,
    /// The application's SIGUSR1 handler observed delivery.
    pub usr1_handled: bool,
}

impl SimProcess {
    fn thrower() -> Self {
        SimProcess {
            run_state: RunState::Running,
            pending: 0,
            blocked: 0,
            child_notices_suppressed: true,
            role: ProcessRole::Thrower,
            has_term_handler: true,
            cleanup_ran: 0,
            usr1_handled: false,
        }
    }

    fn catcher() -> Self {
        SimProcess {
            blocked: FULL_BLOCK,
            role: ProcessRole::Catcher,
            ..SimProcess::thrower()
        }
    }

    pub fn exited(&self) -> bool {
        matches!(self.run_state, RunState::Exited(_))
    }

    pub fn stopped(&self) -> bool {
        matches!(self.run_state, RunState::DebugStopped(_))
    }
}

/// The whole modeled system: the pair plus the exit-kill linkage.
#[derive(Clone, Debug)]
pub struct SimSystem {
    pub procs: [SimProcess; 2],
    pub exitkill: bool,
    pub trace: Vec<String>,
}

impl SimSystem {
    /// Hardened initial state: process 0 is the application (thrower),
    /// process 1 the self-debugger (catcher), notices suppressed, catcher
    /// fully masked.
    pub fn hardened() -> Self {
        SimSystem {
            procs: [SimProcess::thrower(), SimProcess::catcher()],
            exitkill: true,
            trace: Vec::new(),
        }
    }

    /// The configuration before any deadlock countermeasures: child-exit
    /// notices enabled and no signal mask on the catcher.
    pub fn naive() -> Self {
        let mut sys = SimSystem::hardened();
        for p in &mut sys.procs {
            p.child_notices_suppressed = false;
        }
        sys.procs[1].blocked = 0;
        sys
    }

    fn other(pid: usize) -> usize {
        1 - pid
    }

    /// Both stopped with nothing able to continue either: the definition
    /// of the deadlock this design trades in.
    pub fn is_deadlocked(&self) -> bool {
        self.procs.iter().all(|p| p.stopped())
    }
}

/// Externally injectable happenings, each consumable once per run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ScenarioEvent {
    /// kill(2) with the given signal; `to_both` models a process-group kill.
    SendSignal { pid: usize, sig: i32, to_both: bool },
    /// The thrower reaches an invocation site and faults on purpose.
    RaiseSiteFault { pid: usize },
    /// A stray crash (synchronous fault, ignores the signal mask).
    RaiseGenuineFault { pid: usize },
    /// The application finishes its work and exits voluntarily.
    AppExit { pid: usize },
}

impl ScenarioEvent {
    fn describe(&self) -> String {
        match self {
            ScenarioEvent::SendSignal { pid, sig, to_both: false } => {
                format!("send {} to p{}", sig_name(*sig), pid)
            }
            ScenarioEvent::SendSignal { sig, .. } => format!("send {} to both", sig_name(*sig)),
            ScenarioEvent::RaiseSiteFault { pid } => format!("p{pid} faults at a site"),
            ScenarioEvent::RaiseGenuineFault { pid } => format!("p{pid} crashes (genuine fault)"),
            ScenarioEvent::AppExit { pid } => format!("p{pid} exits voluntarily"),
        }
    }
}

/// Apply a signal arrival to the model, mirroring the kernel rules the
/// design leans on: SIGKILL is unblockable and fatal, SIGSTOP stops no
/// matter what, blocked signals pend without stopping, and any unblocked
/// signal arriving at a debuggee stops it for its debugger.
pub fn sim_deliver(system: &mut SimSystem, pid: usize, sig: i32) {
    let p = &mut system.procs[pid];
    if p.exited() {
        return;
    }
    match sig {
        SIGKILL => {
            p.run_state = RunState::Exited(ExitWay::Killed(SIGKILL));
        }
        SIGSTOP => {
            if !p.exited() {
                p.run_state = RunState::DebugStopped(StopCause::GroupStop);
                notify_tracer_of_stop(system, pid);
            }
        }
        _ if system.procs[pid].blocked & (1 << sig) != 0 => {
            system.procs[pid].pending |= 1 << sig;
        }
        _ => {
            if system.procs[pid].stopped() {
                // Already stopped: the arrival pends until the next resume.
                system.procs[pid].pending |= 1 << sig;
            } else {
                system.procs[pid].run_state =
                    RunState::DebugStopped(StopCause::SignalDelivery(sig));
                notify_tracer_of_stop(system, pid);
            }
        }
    }
}

/// A tracee entering any stop raises a child-state-change notice at its
/// tracer unless those were disabled. The notice is itself a signal
/// arriving at a process that is also somebody's debuggee — the root of
/// the classic deadlock.
fn notify_tracer_of_stop(system: &mut SimSystem, stopped_pid: usize) {
    let tracer = SimSystem::other(stopped_pid);
    if system.procs[tracer].exited() {
        return;
    }
    if !system.procs[tracer].child_notices_suppressed {
        sim_deliver(system, tracer, SIGCHLD);
    }
}

fn apply_inject(system: &mut SimSystem, ev: &ScenarioEvent) {
    match *ev {
        ScenarioEvent::SendSignal { pid, sig, to_both } => {
            sim_deliver(system, pid, sig);
            if to_both {
                sim_deliver(system, SimSystem::other(pid), sig);
            }
        }
        ScenarioEvent::RaiseSiteFault { pid } => {
            system.procs[pid].run_state = RunState::DebugStopped(StopCause::WhitelistedFault);
            notify_tracer_of_stop(system, pid);
        }
        ScenarioEvent::RaiseGenuineFault { pid } => {
            // Synchronous fault: the mask is irrelevant.
            system.procs[pid].run_state = RunState::DebugStopped(StopCause::GenuineFault);
            notify_tracer_of_stop(system, pid);
        }
        ScenarioEvent::AppExit { pid } => {
            system.procs[pid].run_state = RunState::Exited(ExitWay::Normal);
        }
    }
}

/// The model runs stops through the same classify/plan_for pair the live
/// debugger uses; this fixture supplies the whitelist and codec those
/// functions need.
struct ProtocolFixture {
    whitelist: Whitelist,
    codec: CodecConfig,
    site_pc: u64,
}

fn fixture() -> ProtocolFixture {
    const CODE_LO: u64 = 0x5500_0000_0000;
    const CODE_HI: u64 = 0x5500_0010_0000;
    const SITE_PC: u64 = CODE_LO + 0x100;
    let mut whitelist = Whitelist::new(0x6b72_6e6c_5f73_696d).unwrap();
    whitelist
        .insert(InvocationSite {
            pc: SITE_PC,
            fault_kind: FaultKind::SegvLoadStore,
            scheme_id: 1,
            flavor: SiteFlavor::Inline,
            fragment_id: 1,
        })
        .unwrap();
    let codec = CodecConfig::with_default_schemes(FaultNamespace::default(), CODE_LO, CODE_HI);
    ProtocolFixture { whitelist, codec, site_pc: SITE_PC }
}

fn stop_to_debug_stop(fx: &ProtocolFixture, cause: StopCause, counterpart: &SimProcess) -> DebugStop {
    match cause {
        StopCause::WhitelistedFault => {
            let scheme = codec::select_scheme(FaultKind::SegvLoadStore, &fx.codec).unwrap();
            let target = fx.codec.code_lo + 0x2000;
            DebugStop::Fault(SwitchEvent {
                pid: 0,
                faulting_pc: fx.site_pc,
                fault_kind: FaultKind::SegvLoadStore,
                fault_address: Some(
                    codec::encode_target(target, scheme, &fx.codec.namespace).unwrap(),
                ),
                regs: RegisterSnapshot::default(),
            })
        }
        StopCause::GenuineFault => DebugStop::Fault(SwitchEvent {
            pid: 0,
            faulting_pc: fx.codec.code_lo + 0xbad,
            fault_kind: FaultKind::SegvLoadStore,
            fault_address: Some(0xdead),
            regs: RegisterSnapshot::default(),
        }),
        StopCause::SignalDelivery(sig) => DebugStop::Signal { signo: sig },
        StopCause::GroupStop => {
            // Collapsed into an unserviceable stop; the debugger never sees
            // it as an actionable event.
            let _ = counterpart;
            DebugStop::Other
        }
    }
}

/// The effect of a signal actually taking effect in a running process.
fn apply_signal_effect(p: &mut SimProcess, sig: i32) {
    match sig {
        SIGSEGV => p.run_state = RunState::Exited(ExitWay::Killed(SIGSEGV)),
        SIGTERM => {
            if p.has_term_handler {
                p.cleanup_ran += 1;
                p.run_state = RunState::Exited(ExitWay::Normal);
            } else {
                p.run_state = RunState::Exited(ExitWay::Killed(SIGTERM));
            }
        }
        SIGUSR1 => {
            p.usr1_handled = true;
        }
        SIGCHLD => {}
        SIGKILL => p.run_state = RunState::Exited(ExitWay::Killed(SIGKILL)),
        _ => p.run_state = RunState::Exited(ExitWay::Killed(sig)),
    }
}

/// One step of the active mini-debugger in `pid`: look at why the
/// counterpart stopped (or that it exited), classify, plan, and execute
/// the plan against the model.
pub fn sim_debugger_step(system: &mut SimSystem, pid: usize) -> Option<String> {
    let other = SimSystem::other(pid);
    // A stopped process executes nothing — a catcher that has itself been
    // put in a debug stop cannot run its wait loop. This is the crux of
    // every deadlock the model exists to find.
    if system.procs[pid].role != ProcessRole::Catcher
        || system.procs[pid].exited()
        || system.procs[pid].stopped()
    {
        return None;
    }
    let fx = fixture();
    let stop = match system.procs[other].run_state {
        RunState::Exited(_) => DebugStop::ExitNotice { status: 0 },
        RunState::DebugStopped(StopCause::GroupStop) => return None,
        RunState::DebugStopped(cause) => stop_to_debug_stop(&fx, cause, &system.procs[other]),
        RunState::Running => return None,
    };
    let cls = classify_stop(&stop, &fx.whitelist, &fx.codec);
    let plan = plan_for(cls, system.procs[pid].role).expect("catcher role checked above");

    let mut desc = format!("p{pid} handles: ");
    for action in plan {
        match action {
            Action::TransitionCounterpartToCatcher => {
                let c = &mut system.procs[other];
                c.run_state = RunState::Running;
                c.role = ProcessRole::Catcher;
                c.blocked = FULL_BLOCK;
                desc.push_str("transition counterpart to catcher; ");
            }
            Action::TransferControlTo { .. } => {
                let me = &mut system.procs[pid];
                me.role = ProcessRole::Thrower;
                // Blocking is undone right before control transfer; pending
                // signals become deliverable kernel steps from here on.
                me.blocked = 0;
                desc.push_str("take control as thrower; ");
            }
            Action::ForwardSignal { signal } => {
                let c = &mut system.procs[other];
                c.run_state = RunState::Running;
                apply_signal_effect(c, signal);
                desc.push_str(&format!("forward {}; ", sig_name(signal)));
            }
            Action::DetachAndExit => {
                system.procs[pid].run_state = RunState::Exited(ExitWay::Normal);
                desc.push_str("detach and exit; ");
            }
            Action::SuppressAndContinue => {
                system.procs[other].run_state = RunState::Running;
                desc.push_str("suppress and continue; ");
            }
        }
    }
    Some(desc)
}

/// A named starting point plus its injectable events and expectations.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: &'static str,
    pub system: SimSystem,
    pub events: Vec<ScenarioEvent>,
    pub expected: ExpectedVerdict,
    /// What the same scenario must do on the real runtime, when it is
    /// executable there.
    pub real_conformance: Option<RealConformance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ExpectedVerdict {
    Deadlock,
    DeadlockFree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RealConformance {
    CleanShutdown,
    BothDead,
    CrashSignal(i32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum DeadlockVerdict {
    DeadlockFree,
    Deadlock { trace: Vec<String> },
    /// The bound cut exploration before every path terminated; reported
    /// distinctly from a clean DeadlockFree so a too-small depth cannot
    /// masquerade as safety.
    DepthExceeded,
}

impl DeadlockVerdict {
    pub fn matches(&self, expected: ExpectedVerdict) -> bool {
        matches!(
            (self, expected),
            (DeadlockVerdict::Deadlock { .. }, ExpectedVerdict::Deadlock)
                | (DeadlockVerdict::DeadlockFree, ExpectedVerdict::DeadlockFree)
        )
    }
}

#[derive(Clone, Debug)]
pub struct ExploreResult {
    pub verdict: DeadlockVerdict,
    pub states_explored: usize,
    /// Distinct terminal process-pair states, for property assertions.
    pub terminals: Vec<[SimProcess; 2]>,
}

/// Exploration node: system state plus which events were already injected.
#[derive(Clone, PartialEq, Eq, Hash)]
struct Node {
    procs: [SimProcess; 2],
    injected: u32,
}

/// Exhaustive breadth-first exploration of every interleaving of scenario
/// events, pending-signal deliveries, and debugger steps, up to `depth`
/// transitions deep.
pub fn explore(scenario: &Scenario, depth: usize) -> ExploreResult {
    #[derive(Clone)]
    struct Expansion {
        node: Node,
        step: String,
        parent: usize,
        depth: usize,
    }

    let root = Node { procs: scenario.system.procs, injected: 0 };
    let mut arena: Vec<Expansion> = vec![Expansion {
        node: root.clone(),
        step: String::from("start"),
        parent: usize::MAX,
        depth: 0,
    }];
    let mut visited: HashSet<Node> = HashSet::from([root]);
    let mut queue: VecDeque<usize> = VecDeque::from([0]);
    let mut truncated = false;
    let mut terminals: Vec<[SimProcess; 2]> = Vec::new();

    let trace_of = |arena: &Vec<Expansion>, mut idx: usize| -> Vec<String> {
        let mut steps = Vec::new();
        while idx != usize::MAX {
            steps.push(arena[idx].step.clone());
            idx = arena[idx].parent;
        }
        steps.reverse();
        steps
    };

    while let Some(idx) = queue.pop_front() {
        let (node, node_depth) = (arena[idx].node.clone(), arena[idx].depth);
        let successors = expand(scenario, &node);

        if successors.is_empty() {
            if node.procs.iter().all(|p| p.stopped()) {
                let mut trace = trace_of(&arena, idx);
                trace.push(stuck_description(&node.procs));
                return ExploreResult {
                    verdict: DeadlockVerdict::Deadlock { trace },
                    states_explored: arena.len(),
                    terminals,
                };
            }
            if !terminals.contains(&node.procs) {
                terminals.push(node.procs);
            }
            continue;
        }
        if node_depth == depth {
            truncated = true;
            continue;
        }
        for (next, step) in successors {
            if visited.insert(next.clone()) {
                arena.push(Expansion { node: next, step, parent: idx, depth: node_depth + 1 });
                queue.push_back(arena.len() - 1);
            }
        }
    }

    ExploreResult {
        verdict: if truncated { DeadlockVerdict::DepthExceeded } else { DeadlockVerdict::DeadlockFree },
        states_explored: arena.len(),
        terminals,
    }
}

/// Why each member of a wedged pair is stuck, for the deadlock trace.
fn stuck_description(procs: &[SimProcess; 2]) -> String {
    let one = |p: &SimProcess| -> String {
        match p.run_state {
            RunState::DebugStopped(StopCause::WhitelistedFault) => "whitelisted-fault stop".into(),
            RunState::DebugStopped(StopCause::GenuineFault) => "genuine-fault stop".into(),
            RunState::DebugStopped(StopCause::SignalDelivery(sig)) => {
                format!("{} delivery stop", sig_name(sig))
            }
            RunState::DebugStopped(StopCause::GroupStop) => "group stop".into(),
            _ => "not stopped".into(),
        }
    };
    format!("wedged: p0 in {}, p1 in {}", one(&procs[0]), one(&procs[1]))
}

/// Enumerate every enabled transition of `node`, in a fixed order.
fn expand(scenario: &Scenario, node: &Node) -> Vec<(Node, String)> {
    let mut out = Vec::new();
    let sys_of = |procs: [SimProcess; 2]| SimSystem {
        procs,
        exitkill: scenario.system.exitkill,
        trace: Vec::new(),
    };

    // Exit-kill cascade is forced: the kernel reaps the survivor before
    // anything else can be observed.
    if scenario.system.exitkill {
        let dead: Vec<usize> =
            (0..2).filter(|&i| node.procs[i].exited() && !node.procs[1 - i].exited()).collect();
        if let Some(&gone) = dead.first() {
            let survivor = SimSystem::other(gone);
            let mut procs = node.procs;
            procs[survivor].run_state = RunState::Exited(ExitWay::Killed(SIGKILL));
            return vec![(
                Node { procs, injected: node.injected },
                format!("exit-kill reaps p{survivor}"),
            )];
        }
    }

    // 1. Scenario event injections.
    for (i, ev) in scenario.events.iter().enumerate() {
        if node.injected & (1 << i) != 0 {
            continue;
        }
        if !injection_enabled(ev, node) {
            continue;
        }
        let mut sys = sys_of(node.procs);
        apply_inject(&mut sys, ev);
        out.push((
            Node { procs: sys.procs, injected: node.injected | (1 << i) },
            ev.describe(),
        ));
    }

    // 2. Kernel delivery of a pending, now-unblocked signal.
    for pid in 0..2 {
        let p = &node.procs[pid];
        if p.exited() || p.stopped() {
            continue;
        }
        let deliverable = p.pending & !p.blocked;
        for sig in 1..32 {
            if deliverable & (1 << sig) != 0 {
                let mut sys = sys_of(node.procs);
                sys.procs[pid].pending &= !(1 << sig);
                sim_deliver(&mut sys, pid, sig);
                out.push((
                    Node { procs: sys.procs, injected: node.injected },
                    format!("kernel delivers pending {} to p{pid}", sig_name(sig)),
                ));
            }
        }
    }

    // 3. Debugger steps.
    for pid in 0..2 {
        let mut sys = sys_of(node.procs);
        if let Some(desc) = sim_debugger_step(&mut sys, pid) {
            out.push((Node { procs: sys.procs, injected: node.injected }, desc));
        }
    }

    out
}

fn injection_enabled(ev: &ScenarioEvent, node: &Node) -> bool {
    match *ev {
        ScenarioEvent::SendSignal { pid, .. } => !node.procs[pid].exited(),
        // Only a running thrower executes application code, so only it can
        // reach an invocation site.
        ScenarioEvent::RaiseSiteFault { pid } => {
            node.procs[pid].role == ProcessRole::Thrower
                && node.procs[pid].run_state == RunState::Running
        }
        // A stray crash can hit either process whenever it is running.
        ScenarioEvent::RaiseGenuineFault { pid } => {
            node.procs[pid].run_state == RunState::Running
        }
        ScenarioEvent::AppExit { pid } => {
            node.procs[pid].role == ProcessRole::Thrower
                && node.procs[pid].run_state == RunState::Running
        }
    }
}

/// The fixed scenario catalog packaging the deadlock analysis as reusable
/// cases. Process 0 is the application, process 1 the self-debugger.
pub fn scenario_catalog() -> Vec<Scenario> {
    let invoke_and_return = vec![
        ScenarioEvent::RaiseSiteFault { pid: 0 },
        ScenarioEvent::RaiseSiteFault { pid: 1 },
    ];

    vec![
        Scenario {
            // The configuration without any countermeasures: the fault stop
            // generates a child notice at the catcher, which is itself a
            // debuggee, so the notice stops it too.
            name: "ChildNoticeDefault",
            system: SimSystem::naive(),
            events: vec![ScenarioEvent::RaiseSiteFault { pid: 0 }],
            expected: ExpectedVerdict::Deadlock,
            real_conformance: None,
        },
        Scenario {
            name: "ChildNoticeSuppressed",
            system: SimSystem::hardened(),
            events: {
                let mut ev = invoke_and_return.clone();
                ev.push(ScenarioEvent::AppExit { pid: 0 });
                ev
            },
            expected: ExpectedVerdict::DeadlockFree,
            real_conformance: None,
        },
        Scenario {
            name: "SigtermBroadcast",
            system: SimSystem::hardened(),
            events: vec![ScenarioEvent::SendSignal { pid: 0, sig: SIGTERM, to_both: true }],
            expected: ExpectedVerdict::DeadlockFree,
            real_conformance: Some(RealConformance::CleanShutdown),
        },
        Scenario {
            // A user signal aimed at the catcher pends until the next role
            // flip unblocks it in what is then a thrower.
            name: "UserSignalToCatcher",
            system: SimSystem::hardened(),
            events: {
                let mut ev = vec![ScenarioEvent::SendSignal { pid: 1, sig: SIGUSR1, to_both: false }];
                ev.extend(invoke_and_return.clone());
                ev.push(ScenarioEvent::AppExit { pid: 0 });
                ev
            },
            expected: ExpectedVerdict::DeadlockFree,
            real_conformance: None,
        },
        Scenario {
            name: "GenuineFaultInThrower",
            system: SimSystem::hardened(),
            events: vec![ScenarioEvent::RaiseGenuineFault { pid: 0 }],
            expected: ExpectedVerdict::DeadlockFree,
            real_conformance: Some(RealConformance::CrashSignal(SIGSEGV)),
        },
        Scenario {
            // Only reachable through a bug in the mini-debugger itself, and
            // then a deadlock is certain: the faulting catcher's debugger
            // is busy running application code.
            name: "GenuineFaultInCatcher",
            system: SimSystem::hardened(),
            events: vec![
                ScenarioEvent::RaiseGenuineFault { pid: 1 },
                ScenarioEvent::RaiseSiteFault { pid: 0 },
            ],
            expected: ExpectedVerdict::Deadlock,
            real_conformance: None,
        },
        Scenario {
            // SIGSTOP cannot be blocked; parking the catcher freezes the
            // protocol and the next switch attempt wedges the pair. The
            // deadlock doubles as tamper-evidence.
            name: "SigstopToCatcher",
            system: SimSystem::hardened(),
            events: vec![
                ScenarioEvent::SendSignal { pid: 1, sig: SIGSTOP, to_both: false },
                ScenarioEvent::RaiseSiteFault { pid: 0 },
            ],
            expected: ExpectedVerdict::Deadlock,
            real_conformance: None,
        },
        Scenario {
            name: "SigkillEither",
            system: SimSystem::hardened(),
            events: vec![
                ScenarioEvent::SendSignal { pid: 0, sig: SIGKILL, to_both: false },
                ScenarioEvent::SendSignal { pid: 1, sig: SIGKILL, to_both: false },
            ],
            expected: ExpectedVerdict::DeadlockFree,
            real_conformance: Some(RealConformance::BothDead),
        },
    ]
}

/// Default interleaving depth; every catalog deadlock shows up well within
/// this bound and every free scenario terminates under it.
pub const DEFAULT_DEPTH: usize = 24;

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str) -> (Scenario, ExploreResult) {
        let sc = scenario_catalog()
            .into_iter()
            .find(|s| s.name == name)
            .expect("scenario exists");
        let res = explore(&sc, DEFAULT_DEPTH);
        (sc, res)
    }

    #[test]
    fn catalog_has_the_eight_fixed_scenarios() {
        let names: Vec<&str> = scenario_catalog().iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            [
                "ChildNoticeDefault",
                "ChildNoticeSuppressed",
                "SigtermBroadcast",
                "UserSignalToCatcher",
                "GenuineFaultInThrower",
                "GenuineFaultInCatcher",
                "SigstopToCatcher",
                "SigkillEither",
            ]
        );
    }

    #[test]
    fn all_catalog_verdicts_match_expectations() {
        for sc in scenario_catalog() {
            let res = explore(&sc, DEFAULT_DEPTH);
            assert!(
                res.verdict.matches(sc.expected),
                "{}: expected {:?}, got {:?}",
                sc.name,
                sc.expected,
                res.verdict
            );
        }
    }

    #[test]
    fn child_notice_default_deadlocks_with_a_mutual_stop_trace() {
        let (_, res) = run("ChildNoticeDefault");
        match res.verdict {
            DeadlockVerdict::Deadlock { trace } => {
                assert!(trace.iter().any(|s| s.contains("SIGCHLD")), "trace: {trace:?}");
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn suppression_removes_the_child_notice_deadlock() {
        let (_, res) = run("ChildNoticeSuppressed");
        assert_eq!(res.verdict, DeadlockVerdict::DeadlockFree);
        // And the pair can actually finish: some terminal has both exited.
        assert!(res
            .terminals
            .iter()
            .any(|t| t.iter().all(|p| p.exited())));
    }

    #[test]
    fn sigterm_broadcast_cleans_up_exactly_once() {
        let (_, res) = run("SigtermBroadcast");
        assert_eq!(res.verdict, DeadlockVerdict::DeadlockFree);
        assert!(!res.terminals.is_empty());
        for t in &res.terminals {
            assert!(t.iter().all(|p| p.exited()), "terminal: {t:?}");
            let cleanups: u8 = t.iter().map(|p| p.cleanup_ran).sum();
            assert_eq!(cleanups, 1, "cleanup handler must run exactly once: {t:?}");
        }
    }

    #[test]
    fn user_signal_to_catcher_is_delivered_after_the_flip() {
        let (_, res) = run("UserSignalToCatcher");
        assert_eq!(res.verdict, DeadlockVerdict::DeadlockFree);
        // The signal is never lost: some execution delivers it to the
        // handler, and delivery only ever happens via the forward path
        // (i.e., while the receiver is a thrower).
        assert!(res.terminals.iter().any(|t| t[1].usr1_handled));
    }

    #[test]
    fn genuine_fault_in_thrower_dies_like_an_unprotected_process() {
        let (_, res) = run("GenuineFaultInThrower");
        assert_eq!(res.verdict, DeadlockVerdict::DeadlockFree);
        for t in &res.terminals {
            assert_eq!(t[0].run_state, RunState::Exited(ExitWay::Killed(SIGSEGV)));
        }
    }

    #[test]
    fn sigkill_either_takes_both_processes_down() {
        let (_, res) = run("SigkillEither");
        assert_eq!(res.verdict, DeadlockVerdict::DeadlockFree);
        for t in &res.terminals {
            assert!(t.iter().all(|p| p.exited()), "exit-kill must reap both: {t:?}");
        }
    }

    #[test]
    fn exploration_is_deterministic() {
        for sc in scenario_catalog() {
            let a = explore(&sc, DEFAULT_DEPTH);
            let b = explore(&sc, DEFAULT_DEPTH);
            assert_eq!(a.verdict, b.verdict, "{}", sc.name);
            assert_eq!(a.states_explored, b.states_explored, "{}", sc.name);
        }
    }

    #[test]
    fn too_small_depth_reports_depth_exceeded_not_safety() {
        let sc = scenario_catalog()
            .into_iter()
            .find(|s| s.name == "ChildNoticeSuppressed")
            .unwrap();
        let res = explore(&sc, 1);
        assert_eq!(res.verdict, DeadlockVerdict::DepthExceeded);
    }

    #[test]
    fn sim_deliver_models_the_kernel_rules() {
        let mut sys = SimSystem::hardened();
        // SIGKILL: fatal regardless of mask.
        sim_deliver(&mut sys, 1, SIGKILL);
        assert_eq!(sys.procs[1].run_state, RunState::Exited(ExitWay::Killed(SIGKILL)));

        // Blocked signal to the catcher pends without stopping it.
        let mut sys = SimSystem::hardened();
        sim_deliver(&mut sys, 1, SIGTERM);
        assert_eq!(sys.procs[1].run_state, RunState::Running);
        assert_ne!(sys.procs[1].pending & (1 << SIGTERM), 0);

        // Unblocked signal to a debuggee stops it.
        let mut sys = SimSystem::hardened();
        sim_deliver(&mut sys, 0, SIGTERM);
        assert_eq!(
            sys.procs[0].run_state,
            RunState::DebugStopped(StopCause::SignalDelivery(SIGTERM))
        );

        // SIGSTOP stops even a fully-masked catcher.
        let mut sys = SimSystem::hardened();
        sim_deliver(&mut sys, 1, SIGSTOP);
        assert_eq!(sys.procs[1].run_state, RunState::DebugStopped(StopCause::GroupStop));
    }

    #[test]
    fn debugger_step_swaps_roles_on_a_switch_request() {
        let mut sys = SimSystem::hardened();
        apply_inject(&mut sys, &ScenarioEvent::RaiseSiteFault { pid: 0 });
        let desc = sim_debugger_step(&mut sys, 1).expect("catcher should act");
        assert!(desc.contains("transition"), "{desc}");
        assert_eq!(sys.procs[0].role, ProcessRole::Catcher);
        assert_eq!(sys.procs[0].run_state, RunState::Running);
        assert_eq!(sys.procs[0].blocked, FULL_BLOCK);
        assert_eq!(sys.procs[1].role, ProcessRole::Thrower);
        assert_eq!(sys.procs[1].blocked, 0);
    }
}
