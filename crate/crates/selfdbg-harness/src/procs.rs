//! Process plumbing for driving `selfdbg-demo` instances: spawning with a
//! chosen site configuration, tapping the marker stream on stderr, and
//! inspecting the pair through procfs and ptrace probes.

use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use selfdbg_core::codec::FaultKind;
use selfdbg_core::whitelist::SiteFlavor;

use crate::markers::{self, Marker};

/// Locates the demo binary.  The harness binary and the demo are installed
/// side by side, so a sibling of the current executable is the common case;
/// `SELFDBG_DEMO` overrides it for odd layouts.
pub fn demo_path() -> io::Result<PathBuf> {
    if let Ok(p) = std::env::var("SELFDBG_DEMO") {
        if !p.is_empty() {
            return Ok(PathBuf::from(p));
        }
    }
    let me = std::env::current_exe()?;
    let sibling = me.with_file_name("selfdbg-demo");
    if sibling.is_file() {
        return Ok(sibling);
    }
    Err(io::Error::new(
        io::ErrorKind::NotFound,
        format!("selfdbg-demo not found next to {}; set SELFDBG_DEMO", me.display()),
    ))
}

/// Background reader that forwards lines from a child stream and keeps every
/// line it has pulled so far, so callers can both block on a specific marker
/// and audit the full transcript afterwards.
pub struct LineTap {
    rx: mpsc::Receiver<String>,
    seen: Vec<String>,
}

impl LineTap {
    pub fn new<R: Read + Send + 'static>(stream: R) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let reader = BufReader::new(stream);
            for line in reader.lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        LineTap { rx, seen: Vec::new() }
    }

    /// Pulls lines until one satisfies the predicate or the timeout lapses.
    pub fn wait_line<F: FnMut(&str) -> bool>(
        &mut self,
        mut pred: F,
        timeout: Duration,
    ) -> Option<String> {
        let deadline = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            match self.rx.recv_timeout(deadline - now) {
                Ok(line) => {
                    self.seen.push(line.clone());
                    if pred(&line) {
                        return Some(line);
                    }
                }
                Err(_) => return None,
            }
        }
    }

    /// Blocks until a marker with the given name arrives.
    pub fn wait_marker(&mut self, name: &str, timeout: Duration) -> Option<Marker> {
        self.wait_line(
            |l| markers::parse(l).is_some_and(|m| m.name == name),
            timeout,
        )
        .and_then(|l| markers::parse(&l))
    }

    /// Pulls everything currently buffered without blocking.
    pub fn drain(&mut self) {
        while let Ok(line) = self.rx.try_recv() {
            self.seen.push(line);
        }
    }

    pub fn seen(&self) -> &[String] {
        &self.seen
    }

    /// All markers with a given name observed so far (call `drain` first to
    /// pick up anything still in flight).
    pub fn markers(&self, name: &str) -> Vec<Marker> {
        self.seen
            .iter()
            .filter_map(|l| markers::parse(l))
            .filter(|m| m.name == name)
            .collect()
    }
}

/// Background reader that slurps a whole stream into memory; used for the
/// demo's stdout so the workload text can be digested after exit.
pub struct ByteTap {
    handle: thread::JoinHandle<Vec<u8>>,
}

impl ByteTap {
    pub fn new<R: Read + Send + 'static>(mut stream: R) -> Self {
        let handle = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stream.read_to_end(&mut buf);
            buf
        });
        ByteTap { handle }
    }

    pub fn finish(self) -> Vec<u8> {
        self.handle.join().unwrap_or_default()
    }
}

/// Polls `try_wait` until the child exits or the deadline passes.
pub fn wait_with_deadline(child: &mut Child, timeout: Duration) -> io::Result<Option<ExitStatus>> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        if Instant::now() >= deadline {
            return Ok(None);
        }
        thread::sleep(Duration::from_millis(2));
    }
}

/// True while `kill(pid, 0)` succeeds or fails with EPERM (process exists).
pub fn pid_alive(pid: i32) -> bool {
    if pid <= 0 {
        return false;
    }
    let rc = unsafe { libc::kill(pid, 0) };
    if rc == 0 {
        return true;
    }
    io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// Waits for a pid to disappear.  A zombie still counts as present for
/// `kill(0)`, so the caller should reap its own children before this.
pub fn wait_gone(pid: i32, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if !pid_alive(pid) {
            return true;
        }
        thread::sleep(Duration::from_millis(2));
    }
    !pid_alive(pid)
}

/// Reads `TracerPid:` from `/proc/PID/status`.
pub fn tracer_pid(pid: i32) -> io::Result<i32> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/status"))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("TracerPid:") {
            return rest
                .trim()
                .parse()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{e}")));
        }
    }
    Err(io::Error::new(io::ErrorKind::NotFound, "no TracerPid line"))
}

/// Reads the single-character state field from `/proc/PID/stat`.  The comm
/// field may contain spaces, so we split on the closing paren.
pub fn proc_state(pid: i32) -> io::Result<char> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/stat"))?;
    let after = text
        .rsplit_once(')')
        .map(|(_, rest)| rest.trim_start())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "malformed stat line"))?;
    after
        .chars()
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty state field"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachOutcome {
    /// PTRACE_ATTACH was refused with EPERM: the pid is already traced.
    Denied,
    /// The attach unexpectedly succeeded (we detached again immediately).
    Succeeded,
    /// Some other errno (ESRCH for a vanished pid, and so on).
    Errno(i32),
}

/// Tries a hostile PTRACE_ATTACH against a pid, undoing it if it lands.
pub fn attach_attempt(pid: i32) -> AttachOutcome {
    let rc = unsafe {
        libc::ptrace(
            libc::PTRACE_ATTACH,
            pid as libc::pid_t,
            std::ptr::null_mut::<libc::c_void>(),
            std::ptr::null_mut::<libc::c_void>(),
        )
    };
    if rc == 0 {
        // Should not happen against a protected pair; clean up so the
        // victim is not left stopped under us.
        unsafe {
            let mut status = 0;
            libc::waitpid(pid, &mut status, 0);
            libc::ptrace(
                libc::PTRACE_DETACH,
                pid as libc::pid_t,
                std::ptr::null_mut::<libc::c_void>(),
                std::ptr::null_mut::<libc::c_void>(),
            );
        }
        return AttachOutcome::Succeeded;
    }
    match io::Error::last_os_error().raw_os_error() {
        Some(libc::EPERM) => AttachOutcome::Denied,
        Some(e) => AttachOutcome::Errno(e),
        None => AttachOutcome::Errno(-1),
    }
}

/// Everything needed to launch a demo instance.  Field defaults mirror the
/// demo binary's own defaults so a plain `DemoSpec::new()` runs the stock
/// workload.
#[derive(Debug, Clone)]
pub struct DemoSpec {
    pub fragments: u32,
    pub inputs: u32,
    pub seed: u64,
    pub method: FaultKind,
    pub flavor: SiteFlavor,
    pub unprotected: bool,
    pub crash: bool,
    pub linger_ms: u64,
    pub signal_probe: bool,
    pub probe_burn_ms: u64,
    pub watchdog_secs: u64,
    pub event_log: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub bench_switch_samples: Option<u32>,
}

impl Default for DemoSpec {
    fn default() -> Self {
        DemoSpec {
            fragments: 3,
            inputs: 128,
            seed: 0x5eed,
            method: FaultKind::SegvLoadStore,
            flavor: SiteFlavor::Inline,
            unprotected: false,
            crash: false,
            linger_ms: 0,
            signal_probe: false,
            probe_burn_ms: 300,
            watchdog_secs: 0,
            event_log: None,
            config: None,
            bench_switch_samples: None,
        }
    }
}

impl DemoSpec {
    pub fn new() -> Self {
        Self::default()
    }

    fn command(&self, demo: &Path) -> Command {
        let mut cmd = Command::new(demo);
        cmd.arg("--fragments")
            .arg(self.fragments.to_string())
            .arg("--inputs")
            .arg(self.inputs.to_string())
            .arg("--seed")
            .arg(format!("{:#x}", self.seed))
            .arg("--method")
            .arg(self.method.as_str())
            .arg("--flavor")
            .arg(self.flavor.as_str());
        if self.unprotected {
            cmd.arg("--unprotected");
        }
        if self.crash {
            cmd.arg("--crash");
        }
        if self.linger_ms > 0 {
            cmd.arg("--linger").arg(self.linger_ms.to_string());
        }
        if self.signal_probe {
            cmd.arg("--signal-probe")
                .arg("--probe-burn-ms")
                .arg(self.probe_burn_ms.to_string());
        }
        if self.watchdog_secs > 0 {
            cmd.arg("--watchdog").arg(self.watchdog_secs.to_string());
        }
        if let Some(path) = &self.event_log {
            cmd.arg("--event-log").arg(path);
        }
        if let Some(path) = &self.config {
            cmd.arg("--config").arg(path);
        }
        if let Some(n) = self.bench_switch_samples {
            cmd.arg("--bench-switch").arg(n.to_string());
        }
        cmd.stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // The spawned pair must never inherit a disable request aimed at
        // the harness itself.
        cmd.env_remove(selfdbg_core::bootstrap::DISABLE_ENV);
        cmd
    }

    /// Spawns the demo and blocks until its `up` marker confirms protection
    /// settled (or the process exited early, which is reported as an error).
    pub fn spawn(&self, demo: &Path) -> io::Result<DemoProc> {
        let mut child = self.command(demo).spawn()?;
        let stdout = ByteTap::new(child.stdout.take().expect("stdout piped"));
        let mut stderr = LineTap::new(child.stderr.take().expect("stderr piped"));
        let up = stderr.wait_marker(markers::UP, Duration::from_secs(10));
        let Some(up) = up else {
            let _ = child.kill();
            let _ = child.wait();
            let tail = stderr.seen().join("\n");
            return Err(io::Error::new(
                io::ErrorKind::TimedOut,
                format!("demo produced no up marker; stderr so far:\n{tail}"),
            ));
        };
        let app = up.get_i32("pid").unwrap_or(child.id() as i32);
        let twin = up.get_i32("twin").unwrap_or(0);
        let init_us = up.get_u64("init_us").unwrap_or(0);
        Ok(DemoProc { child, stdout: Some(stdout), stderr, app, twin, init_us })
    }
}

/// A live demo pair (or solo process when spawned `--unprotected`).
pub struct DemoProc {
    pub child: Child,
    pub stdout: Option<ByteTap>,
    pub stderr: LineTap,
    pub app: i32,
    pub twin: i32,
    pub init_us: u64,
}

impl DemoProc {
    /// Reaps the app with a deadline and joins the stdout tap.
    pub fn finish(&mut self, timeout: Duration) -> io::Result<(ExitStatus, Vec<u8>)> {
        match wait_with_deadline(&mut self.child, timeout)? {
            Some(status) => {
                let bytes = self.stdout.take().map(ByteTap::finish).unwrap_or_default();
                Ok((status, bytes))
            }
            None => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    "demo did not exit before the deadline",
                ))
            }
        }
    }

    /// Force-kills the pair and reaps the app; used by attack teardown.
    /// A mutually stopped pair can defer even SIGKILL until both members
    /// are released, so the kill is followed by SIGCONT nudges.
    pub fn obliterate(&mut self) {
        unsafe {
            if self.twin > 0 {
                libc::kill(self.twin, libc::SIGKILL);
            }
            libc::kill(self.app, libc::SIGKILL);
            if self.twin > 0 {
                libc::kill(self.twin, libc::SIGCONT);
            }
            libc::kill(self.app, libc::SIGCONT);
        }
        let _ = wait_with_deadline(&mut self.child, Duration::from_secs(2));
        let _ = self.child.try_wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_tap_sees_lines_in_order() {
        let data: &[u8] = b"first\nselfdbg-demo: up pid=7 twin=8 init_us=42\nlast\n";
        let mut tap = LineTap::new(io::Cursor::new(data.to_vec()));
        let up = tap.wait_marker(markers::UP, Duration::from_secs(1)).unwrap();
        assert_eq!(up.get_i32("pid"), Some(7));
        assert_eq!(up.get_i32("twin"), Some(8));
        assert_eq!(up.get_u64("init_us"), Some(42));
        // Block until the final line arrives; drain alone would race the
        // reader thread.
        assert!(tap.wait_line(|l| l == "last", Duration::from_secs(1)).is_some());
        assert_eq!(tap.seen().len(), 3);
    }

    #[test]
    fn line_tap_times_out_without_match() {
        let data: &[u8] = b"nothing interesting\n";
        let mut tap = LineTap::new(io::Cursor::new(data.to_vec()));
        let got = tap.wait_marker(markers::DONE, Duration::from_millis(50));
        assert!(got.is_none());
    }

    #[test]
    fn byte_tap_collects_everything() {
        let data: &[u8] = b"alpha beta gamma";
        let tap = ByteTap::new(io::Cursor::new(data.to_vec()));
        assert_eq!(tap.finish(), data);
    }

    #[test]
    fn own_pid_is_alive_and_untraced() {
        let me = std::process::id() as i32;
        assert!(pid_alive(me));
        assert_eq!(tracer_pid(me).unwrap(), 0);
        let state = proc_state(me).unwrap();
        assert!(state == 'R' || state == 'S', "unexpected state {state}");
    }

    #[test]
    fn dead_pid_reports_gone() {
        let mut child = Command::new("/bin/true").spawn().unwrap();
        let pid = child.id() as i32;
        child.wait().unwrap();
        assert!(wait_gone(pid, Duration::from_secs(1)));
    }

    #[test]
    fn attach_to_untraced_child_succeeds_and_detaches() {
        let mut child = Command::new("/bin/sleep").arg("5").spawn().unwrap();
        let pid = child.id() as i32;
        assert_eq!(attach_attempt(pid), AttachOutcome::Succeeded);
        // The child must keep running after our detach.
        assert!(pid_alive(pid));
        child.kill().unwrap();
        child.wait().unwrap();
    }
}
