//! Read-side helpers for the runtime's line-delimited event log.  Attack and
//! probe procedures read the log while the pair is still alive, so the last
//! line may be half-written; this reader keeps every complete line and drops
//! a torn tail instead of failing.

use std::io;
use std::path::Path;

use selfdbg_core::eventlog::ParsedEvent;

/// Parses the log file, skipping lines that do not decode (normally only a
/// truncated final line on a live log).
pub fn read_events(path: &Path) -> io::Result<Vec<ParsedEvent>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

pub fn count(events: &[ParsedEvent], name: &str) -> usize {
    events.iter().filter(|e| e.event == name).count()
}

pub fn first<'a>(events: &'a [ParsedEvent], name: &str) -> Option<&'a ParsedEvent> {
    events.iter().find(|e| e.event == name)
}

pub fn last<'a>(events: &'a [ParsedEvent], name: &str) -> Option<&'a ParsedEvent> {
    events.iter().rev().find(|e| e.event == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        std::fs::write(
            &path,
            concat!(
                "{\"timestamp\":1.5,\"pid\":10,\"event\":\"attach\",\"detail\":\"a\"}\n",
                "{\"timestamp\":2.5,\"pid\":11,\"event\":\"detach\",\"detail\":\"b\"}\n",
                "{\"timestamp\":3.5,\"pid\":10,\"ev",
            ),
        )
        .unwrap();
        let events = read_events(&path).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(count(&events, "attach"), 1);
        assert_eq!(first(&events, "attach").unwrap().pid, 10);
        assert_eq!(last(&events, "detach").unwrap().timestamp, 2.5);
    }
}
