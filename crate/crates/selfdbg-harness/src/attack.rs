//! Attack scenarios against a live protected pair.
//!
//! Each scenario spawns a demo victim in linger mode, performs one hostile
//! action, and checks the claims the runtime makes about itself: nobody
//! can attach, killing either member kills both, SIGTERM still tears the
//! pair down cleanly, and freezing the catcher wedges (rather than
//! unprotects) the application.  A scenario passes when the observed
//! outcome token equals the expected one; everything else lands in notes.

use std::io;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use selfdbg_core::eventlog::events;
use selfdbg_core::report::{AttackReport, ProcExit};

use crate::evlog;
use crate::markers;
use crate::procs::{
    attach_attempt, pid_alive, proc_state, tracer_pid, wait_gone, wait_with_deadline,
    AttachOutcome, DemoProc, DemoSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// A third process tries PTRACE_ATTACH against both members.
    ExternalAttach,
    /// SIGKILL aimed at the protecting twin.
    KillSelfdebugger,
    /// SIGKILL aimed at the application.
    KillApp,
    /// SIGTERM to both pids, as a service manager would deliver it.
    SigtermBroadcast,
    /// SIGSTOP freezes the twin while the application still runs.
    SigstopCatcher,
}

impl Scenario {
    pub fn all() -> [Scenario; 5] {
        [
            Scenario::ExternalAttach,
            Scenario::KillSelfdebugger,
            Scenario::KillApp,
            Scenario::SigtermBroadcast,
            Scenario::SigstopCatcher,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::ExternalAttach => "external-attach",
            Scenario::KillSelfdebugger => "kill-selfdebugger",
            Scenario::KillApp => "kill-app",
            Scenario::SigtermBroadcast => "sigterm-broadcast",
            Scenario::SigstopCatcher => "sigstop-catcher",
        }
    }

    /// The outcome a correct runtime must produce.
    pub fn expected(&self) -> &'static str {
        match self {
            Scenario::ExternalAttach => "denied",
            Scenario::KillSelfdebugger | Scenario::KillApp => "both-dead",
            Scenario::SigtermBroadcast => "clean-shutdown",
            Scenario::SigstopCatcher => "deadlock-observed",
        }
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::all()
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scenario '{s}'; known: external-attach, kill-selfdebugger, kill-app, sigterm-broadcast, sigstop-catcher"))
    }
}

/// Collected observations while a scenario runs.
struct Outcome {
    observed: String,
    app: ProcExit,
    selfdbg: ProcExit,
    notes: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            observed: String::new(),
            app: ProcExit { exit_code: None, term_signal: None },
            selfdbg: ProcExit { exit_code: None, term_signal: None },
            notes: Vec::new(),
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn fail(&mut self, token: &str, why: impl Into<String>) {
        self.observed = token.to_string();
        self.notes.push(why.into());
    }
}

pub fn run_attack(demo: &Path, scenario: Scenario) -> io::Result<AttackReport> {
    let started = Instant::now();
    let dir = tempfile::tempdir()?;
    let log_path = dir.path().join("events.log");

    let spec = DemoSpec {
        fragments: 3,
        inputs: 8,
        linger_ms: 20_000,
        // A wedged pair can outlive SIGKILL, so the victim carries its own
        // self-destruct in case cleanup falls through.
        watchdog_secs: 25,
        event_log: Some(log_path.clone()),
        ..DemoSpec::new()
    };

    let mut proc = spec.spawn(demo)?;
    let mut out = Outcome::new();
    out.note(format!("app={} twin={}", proc.app, proc.twin));

    // Let the workload finish and the linger heartbeat start so every
    // scenario strikes a pair that is demonstrably mid-protocol.
    if proc.stderr.wait_marker(markers::CYCLE, Duration::from_secs(15)).is_none() {
        out.fail("scenario-timeout", "victim never reached its linger heartbeat");
        proc.obliterate();
        return Ok(finish(scenario, out, started));
    }

    let (app, twin) = (proc.app, proc.twin);
    match scenario {
        Scenario::ExternalAttach => external_attach(&mut proc, &mut out),
        Scenario::KillSelfdebugger => kill_one(&mut proc, &mut out, twin),
        Scenario::KillApp => kill_one(&mut proc, &mut out, app),
        Scenario::SigtermBroadcast => sigterm_broadcast(&mut proc, &mut out, &log_path),
        Scenario::SigstopCatcher => sigstop_catcher(&mut proc, &mut out),
    }

    // Whatever happened, leave no survivors behind.
    if pid_alive(proc.app) || pid_alive(proc.twin) {
        proc.obliterate();
        if pid_alive(proc.app) {
            out.note(format!("orphan warning: app {} survived cleanup", proc.app));
        }
        if pid_alive(proc.twin) {
            out.note(format!("orphan warning: twin {} survived cleanup", proc.twin));
        }
    } else {
        let _ = proc.child.try_wait();
    }

    Ok(finish(scenario, out, started))
}

fn finish(scenario: Scenario, out: Outcome, started: Instant) -> AttackReport {
    let expected = scenario.expected().to_string();
    let pass = out.observed == expected;
    AttackReport {
        report: AttackReport::KIND,
        scenario: scenario.as_str().to_string(),
        expected,
        observed: out.observed,
        pass,
        app: out.app,
        selfdbg: out.selfdbg,
        notes: out.notes.join("; "),
        duration_ms: started.elapsed().as_millis() as u64,
    }
}

fn external_attach(proc: &mut DemoProc, out: &mut Outcome) {
    for (label, pid) in [("app", proc.app), ("twin", proc.twin)] {
        match attach_attempt(pid) {
            AttachOutcome::Denied => out.note(format!("attach to {label} {pid}: EPERM")),
            AttachOutcome::Succeeded => {
                out.fail("attach-succeeded", format!("attach to {label} {pid} was accepted"));
                return;
            }
            AttachOutcome::Errno(e) => {
                out.fail("scenario-error", format!("attach to {label} {pid}: unexpected errno {e}"));
                return;
            }
        }
    }
    match (tracer_pid(proc.app), tracer_pid(proc.twin)) {
        (Ok(a), Ok(t)) if a == proc.twin && t == proc.app => {
            out.note("TracerPid cross-links intact".to_string());
        }
        (a, t) => {
            out.fail("scenario-error", format!("TracerPid mismatch: app={a:?} twin={t:?}"));
            return;
        }
    }
    // The pair must still shut down cleanly after the attempts.
    unsafe { libc::kill(proc.app, libc::SIGTERM) };
    match wait_with_deadline(&mut proc.child, Duration::from_secs(10)) {
        Ok(Some(status)) => {
            out.app = ProcExit::from_status(status);
            if status.code() != Some(0) {
                out.fail("unclean-exit", format!("app exited {status} after attach attempts"));
                return;
            }
        }
        _ => {
            out.fail("scenario-timeout", "app ignored SIGTERM after attach attempts");
            return;
        }
    }
    if !wait_gone(proc.twin, Duration::from_secs(2)) {
        out.fail("still-alive", format!("twin {} outlived the app", proc.twin));
        return;
    }
    out.observed = "denied".to_string();
}

fn kill_one(proc: &mut DemoProc, out: &mut Outcome, victim: i32) {
    let which = if victim == proc.app { "app" } else { "twin" };
    out.note(format!("SIGKILL to {which} {victim}"));
    let t0 = Instant::now();
    unsafe { libc::kill(victim, libc::SIGKILL) };

    let app_status = match wait_with_deadline(&mut proc.child, Duration::from_secs(1)) {
        Ok(Some(status)) => status,
        _ => {
            out.fail("still-alive", "app still running 1s after the kill");
            return;
        }
    };
    out.app = ProcExit::from_status(app_status);
    if !wait_gone(proc.twin, Duration::from_secs(1).saturating_sub(t0.elapsed())) {
        out.fail("still-alive", format!("twin {} still running 1s after the kill", proc.twin));
        return;
    }
    let ms = t0.elapsed().as_millis();
    out.note(format!("both members gone {ms} ms after one SIGKILL"));
    out.note("twin is a grandchild; its exact wait status is not reapable from here".to_string());
    out.observed = "both-dead".to_string();
}

fn sigterm_broadcast(proc: &mut DemoProc, out: &mut Outcome, log_path: &Path) {
    unsafe {
        libc::kill(proc.app, libc::SIGTERM);
        libc::kill(proc.twin, libc::SIGTERM);
    }
    let status = match wait_with_deadline(&mut proc.child, Duration::from_secs(10)) {
        Ok(Some(status)) => status,
        _ => {
            out.fail("scenario-timeout", "app did not exit within 10s of SIGTERM");
            return;
        }
    };
    out.app = ProcExit::from_status(status);
    if status.code() != Some(0) {
        out.fail("unclean-exit", format!("app exited {status}, wanted exit 0"));
        return;
    }
    if !wait_gone(proc.twin, Duration::from_secs(2)) {
        out.fail("still-alive", format!("twin {} outlived the clean shutdown", proc.twin));
        return;
    }
    proc.stderr.drain();
    let cleanups = proc.stderr.markers(markers::CLEANUP);
    match evlog::read_events(log_path) {
        Ok(log_events) => {
            let recs: Vec<_> =
                log_events.iter().filter(|e| e.event == events::CLEANUP).collect();
            if recs.len() != 1 {
                out.fail(
                    "cleanup-miscount",
                    format!("{} cleanup events in the log, wanted exactly 1", recs.len()),
                );
                return;
            }
            if recs[0].pid != proc.app {
                out.fail(
                    "cleanup-miscount",
                    format!("cleanup ran in pid {}, wanted the app {}", recs[0].pid, proc.app),
                );
                return;
            }
            out.note(format!("one cleanup event, pid {}, detail '{}'", recs[0].pid, recs[0].detail));
        }
        Err(e) => {
            out.fail("scenario-error", format!("could not read event log: {e}"));
            return;
        }
    }
    if cleanups.len() != 1 {
        out.fail(
            "cleanup-miscount",
            format!("{} cleanup markers on stderr, wanted exactly 1", cleanups.len()),
        );
        return;
    }
    out.observed = "clean-shutdown".to_string();
}

fn sigstop_catcher(proc: &mut DemoProc, out: &mut Outcome) {
    // Heartbeat must be advancing before the freeze.
    let before = proc
        .stderr
        .wait_marker(markers::CYCLE, Duration::from_secs(5))
        .and_then(|m| m.get_u64("n"));
    let Some(before) = before else {
        out.fail("scenario-timeout", "no advancing heartbeat before the freeze");
        return;
    };

    unsafe { libc::kill(proc.twin, libc::SIGSTOP) };
    out.note(format!("SIGSTOP to twin {} after heartbeat {before}", proc.twin));

    // Give the application time to run into its next migrated call, then
    // require the heartbeat to stay flat for half a second.
    std::thread::sleep(Duration::from_millis(300));
    proc.stderr.drain();
    let stalled_at = proc
        .stderr
        .markers(markers::CYCLE)
        .last()
        .and_then(|m| m.get_u64("n"))
        .unwrap_or(before);

    let hold = Duration::from_millis(500);
    let t0 = Instant::now();
    let mut stalled = true;
    loop {
        let remaining = hold.saturating_sub(t0.elapsed());
        if remaining.is_zero() {
            break;
        }
        if proc.stderr.wait_marker(markers::CYCLE, remaining).is_some() {
            stalled = false;
            break;
        }
    }
    if !stalled {
        out.fail("no-deadlock", "heartbeat kept advancing with the catcher frozen");
        return;
    }

    let app_state = proc_state(proc.app).unwrap_or('?');
    let twin_state = proc_state(proc.twin).unwrap_or('?');
    if !matches!(app_state, 't' | 'T') || !matches!(twin_state, 't' | 'T') {
        out.fail(
            "no-deadlock",
            format!("states app={app_state} twin={twin_state}, wanted both stopped"),
        );
        return;
    }
    out.note(format!(
        "heartbeat flat at {stalled_at} for {}ms; states app={app_state} twin={twin_state}",
        hold.as_millis()
    ));
    out.note("pair wedged, not unprotected: the attack gains nothing but downtime".to_string());
    out.observed = "deadlock-observed".to_string();
}
