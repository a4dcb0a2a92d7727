//! The demo's stderr marker protocol.
//!
//! The workload's stdout must stay byte-identical between protected and
//! unprotected runs, so everything the harness needs to know about a demo
//! process travels on stderr as single lines of `key=value` pairs behind a
//! fixed prefix:
//!
//! ```text
//! selfdbg-demo: up protected=1 init_us=14203 app=4242 twin=4243
//! selfdbg-demo: cycle n=3 usr1=0
//! selfdbg-demo: done switches=612
//! selfdbg-demo: cleanup reason=sigterm
//! ```

/// Prefix of every marker line.
pub const PREFIX: &str = "selfdbg-demo:";

/// Marker names (the first token after the prefix).
pub const UP: &str = "up";
pub const CYCLE: &str = "cycle";
pub const CYCLE_DONE: &str = "cycle-done";
pub const DONE: &str = "done";
pub const CLEANUP: &str = "cleanup";

/// Event-log record the demo's SIGUSR1 handler appends on delivery. Lives
/// here (not in the runtime's event list) because it is an application
/// handler's doing, not the runtime's.
pub const EVENT_USR1_DELIVERED: &str = "usr1-delivered";

/// Writes one marker line to stderr (demo side of the protocol).
pub fn emit(name: &str, fields: std::fmt::Arguments<'_>) {
    eprintln!("{PREFIX} {name} {fields}");
}

/// Parsed marker line: its name and its `key=value` fields in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Marker {
    pub name: String,
    pub fields: Vec<(String, String)>,
}

impl Marker {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }

    pub fn get_i32(&self, key: &str) -> Option<i32> {
        self.get(key)?.parse().ok()
    }
}

/// Parse one stderr line; `None` for anything that is not a marker (the
/// demo shares stderr with panic messages and the like).
pub fn parse(line: &str) -> Option<Marker> {
    let rest = line.strip_prefix(PREFIX)?.trim_start();
    let mut tokens = rest.split_whitespace();
    let name = tokens.next()?.to_string();
    let mut fields = Vec::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=')?;
        fields.push((k.to_string(), v.to_string()));
    }
    Some(Marker { name, fields })
}
