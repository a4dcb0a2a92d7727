//! Line-delimited JSON event log.
//!
//! Both processes of a pair append to the same `O_APPEND` descriptor
//! inherited across the fork. Every record is one line:
//!
//! ```json
//! {"timestamp":1724567890.123456,"pid":4242,"event":"switch-request","detail":"pc=0x55..."}
//! ```
//!
//! The emit path runs inside the mini-debugger loop, where the usual rules
//! apply: no allocation (an abandoned stack frame would leak the buffer)
//! and only async-signal-safe syscalls. Lines are built in a fixed
//! [`ArrayString`] and written with a single `write(2)`, which `O_APPEND`
//! keeps atomic between the two writers.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io;
use std::os::unix::io::IntoRawFd;
use std::path::Path;

use arrayvec::ArrayString;
use serde::Deserialize;

/// Event names used by the runtime. Kept as constants so the harness and
/// the tests match on the same strings.
pub mod events {
    pub const PROTECT_INIT: &str = "protect-init";
    pub const ATTACH: &str = "attach";
    pub const HANDSHAKE_COMPLETE: &str = "handshake-complete";
    pub const REGISTRY_SYNC: &str = "registry-sync";
    pub const WHITELIST_FROZEN: &str = "whitelist-frozen";
    pub const SWITCH_REQUEST: &str = "switch-request";
    pub const TRANSITION: &str = "transition-counterpart";
    pub const TRANSFER: &str = "transfer-control";
    pub const GENUINE_FAULT: &str = "genuine-fault";
    pub const FORWARD_SIGNAL: &str = "forward-signal";
    pub const SUPPRESSED_NOTICE: &str = "suppressed-notice";
    pub const COUNTERPART_EXIT: &str = "counterpart-exit";
    pub const DETACH: &str = "detach";
    pub const PROTECT_FINI: &str = "protect-fini";
    pub const TRAP_SERVICE: &str = "trap-service";
    pub const WATCHDOG_FIRED: &str = "watchdog-fired";
    pub const CLEANUP: &str = "cleanup";
}

const LINE_CAP: usize = 512;
const DETAIL_CAP: usize = 320;
const EVENT_CAP: usize = 64;

/// A log sink identified by a raw descriptor. Copyable so it can live in a
/// process-global and be shared across the fork without ceremony.
#[derive(Clone, Copy, Debug)]
pub struct EventLog {
    fd: i32,
}

impl EventLog {
    /// A sink that drops everything.
    pub const fn disabled() -> Self {
        EventLog { fd: -1 }
    }

    pub const fn to_stderr() -> Self {
        EventLog { fd: 2 }
    }

    /// Append to `path`, creating it if needed. The descriptor is
    /// intentionally leaked: the log must stay writable until the last
    /// moments of both processes.
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog { fd: file.into_raw_fd() })
    }

    pub const fn from_raw_fd(fd: i32) -> Self {
        EventLog { fd }
    }

    pub const fn raw_fd(&self) -> i32 {
        self.fd
    }

    pub const fn is_enabled(&self) -> bool {
        self.fd >= 0
    }

    /// Emit one record. `detail` longer than the line buffer is truncated;
    /// the emitted line is valid JSON either way.
    pub fn emit(&self, event: &str, detail: &str) {
        if self.fd < 0 {
            return;
        }
        let mut line = ArrayString::<LINE_CAP>::new();
        let (secs, micros) = now_micros();
        let pid = unsafe { libc::getpid() };
        let _ = write!(line, "{{\"timestamp\":{secs}.{micros:06},\"pid\":{pid},\"event\":\"");
        push_escaped(&mut line, event, EVENT_CAP);
        let _ = line.try_push_str("\",\"detail\":\"");
        push_escaped(&mut line, detail, DETAIL_CAP);
        let _ = line.try_push_str("\"}\n");
        write_all(self.fd, line.as_bytes());
    }
}

fn now_micros() -> (i64, i64) {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    unsafe { libc::clock_gettime(libc::CLOCK_REALTIME, &mut ts) };
    (ts.tv_sec, ts.tv_nsec / 1000)
}

/// Append `s` JSON-escaped, consuming at most `budget` bytes of `line`.
fn push_escaped(line: &mut ArrayString<LINE_CAP>, s: &str, budget: usize) {
    let mut used = 0;
    for c in s.chars() {
        let cost = match c {
            '"' | '\\' => 2,
            '\n' | '\t' | '\r' => 2,
            c if (c as u32) < 0x20 => 6,
            c => c.len_utf8(),
        };
        if used + cost > budget {
            break;
        }
        used += cost;
        let r: Result<(), ()> = match c {
            '"' => line.try_push_str("\\\"").map_err(|_| ()),
            '\\' => line.try_push_str("\\\\").map_err(|_| ()),
            '\n' => line.try_push_str("\\n").map_err(|_| ()),
            '\t' => line.try_push_str("\\t").map_err(|_| ()),
            '\r' => line.try_push_str("\\r").map_err(|_| ()),
            c if (c as u32) < 0x20 => {
                let mut esc = ArrayString::<8>::new();
                let _ = write!(esc, "\\u{:04x}", c as u32);
                line.try_push_str(&esc).map_err(|_| ())
            }
            c => line.try_push(c).map_err(|_| ()),
        };
        if r.is_err() {
            break;
        }
    }
}

fn write_all(fd: i32, mut bytes: &[u8]) {
    while !bytes.is_empty() {
        let n = unsafe { libc::write(fd, bytes.as_ptr().cast(), bytes.len()) };
        if n < 0 {
            if io::Error::last_os_error().kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return;
        }
        bytes = &bytes[n as usize..];
    }
}

/// Parsed view of one record, for the harness and the tests. This side is
/// allowed to allocate.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct ParsedEvent {
    pub timestamp: f64,
    pub pid: i32,
    pub event: String,
    pub detail: String,
}

/// Parse a whole log. Unparseable lines are errors: the writer promises
/// every line is valid JSON.
pub fn parse_log(text: &str) -> Result<Vec<ParsedEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
