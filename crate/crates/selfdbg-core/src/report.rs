//! Machine-readable reports emitted by the harness subcommands.
//!
//! Every subcommand prints exactly one JSON document on stdout (the demo
//! workload's own stdout is kept separate by the harness). The shapes here
//! are mirrored by the JSON Schemas under `schemas/`; the `report` field
//! names the shape so a consumer can dispatch without guessing.

use serde::{Serialize, Serializer};

/// Serialize a u64 as a `"0x..."` string; addresses and seeds are easier
/// to eyeball in hex and survive tools that choke on full 64-bit ints.
pub fn hex<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:#x}"))
}

/// How a process ended: at most one of the two fields is set.
#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq, Eq)]
pub struct ProcExit {
    pub exit_code: Option<i32>,
    pub term_signal: Option<i32>,
}

impl ProcExit {
    pub fn from_status(status: std::process::ExitStatus) -> Self {
        use std::os::unix::process::ExitStatusExt;
        ProcExit { exit_code: status.code(), term_signal: status.signal() }
    }

    pub fn describe(&self) -> String {
        match (self.exit_code, self.term_signal) {
            (Some(c), _) => format!("exit {c}"),
            (None, Some(s)) => format!("killed by signal {s}"),
            (None, None) => "unknown".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DemoReport {
    pub report: &'static str,
    pub protected: bool,
    pub fragments: u32,
    pub inputs: u32,
    #[serde(serialize_with = "hex")]
    pub seed: u64,
    pub method: String,
    pub flavor: String,
    pub exit: ProcExit,
    /// FNV-1a over the workload's stdout; two runs computed the same
    /// results iff the digests match.
    pub stdout_digest: String,
    pub switch_count: Option<u64>,
    pub duration_ms: u64,
}

impl DemoReport {
    pub const KIND: &'static str = "run-demo";
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub report: &'static str,
    pub scenario: String,
    /// What a correct runtime must produce under this scenario.
    pub expected: String,
    /// What the run actually produced.
    pub observed: String,
    /// `expected == observed`, precomputed so report consumers need no
    /// knowledge of the outcome vocabulary.
    pub pass: bool,
    pub app: ProcExit,
    pub selfdbg: ProcExit,
    pub notes: String,
    pub duration_ms: u64,
}

impl AttackReport {
    pub const KIND: &'static str = "attack";
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub aspect: String,
    pub samples: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub report: &'static str,
    pub rows: Vec<BenchRow>,
    /// median(SwitchTrap) / median(SwitchSegvRW|X); present when both rows
    /// were measured.
    pub trap_over_segv_rw: Option<f64>,
    pub trap_over_segv_x: Option<f64>,
}

impl BenchReport {
    pub const KIND: &'static str = "bench";

    pub fn row(&self, aspect: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.aspect == aspect)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimScenarioReport {
    pub name: String,
    pub expected: String,
    pub verdict: String,
    pub matches: bool,
    pub states_explored: usize,
    /// Shortest event sequence reaching the deadlock, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<String>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateReport {
    pub report: &'static str,
    pub depth: usize,
    pub scenarios: Vec<SimScenarioReport>,
    pub all_match: bool,
}

impl SimulateReport {
    pub const KIND: &'static str = "simulate";
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanSiteDetail {
    #[serde(serialize_with = "hex")]
    pub pc: u64,
    pub fault_kind: String,
    pub flavor: String,
    /// A trap opcode (0xCC) sits at the site address.
    pub trap_opcode: bool,
    /// The site's instruction bytes carry an immediate that lands inside
    /// the fault namespace — the pattern a scanner would grep for.
    pub adjacent_immediate: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    pub report: &'static str,
    pub binary: String,
    pub site_count: usize,
    /// Sites whose first byte is a trap opcode.
    pub trap_opcodes: usize,
    /// Sites paired with a namespace-pointing immediate nearby.
    pub adjacent_pairs: usize,
    pub details: Vec<ScanSiteDetail>,
}

impl ScanReport {
    pub const KIND: &'static str = "scan";
}

/// Nearest-rank percentiles over microsecond samples. Sorts in place.
/// Returns `(p10, median, p90)`.
pub fn percentiles(samples: &mut [f64]) -> (f64, f64, f64) {
    assert!(!samples.is_empty(), "percentiles of an empty sample set");
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timing samples are never NaN"));
    let rank = |p: f64| -> f64 {
        let n = samples.len();
        let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
        samples[idx]
    };
    (rank(0.10), rank(0.50), rank(0.90))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_match_nearest_rank_by_hand() {
        // 10 samples: ranks are ceil(p*10): p10 -> 1st, p50 -> 5th, p90 -> 9th.
        let mut s: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let (p10, p50, p90) = percentiles(&mut s);
        assert_eq!((p10, p50, p90), (1.0, 5.0, 9.0));
    }

    #[test]
    fn percentiles_single_sample_degenerates() {
        let mut s = vec![42.0];
        assert_eq!(percentiles(&mut s), (42.0, 42.0, 42.0));
    }

    #[test]
    fn percentiles_are_insensitive_to_input_order() {
        let mut a = vec![5.0, 1.0, 9.0, 3.0, 7.0];
        let mut b = vec![9.0, 7.0, 5.0, 3.0, 1.0];
        assert_eq!(percentiles(&mut a), percentiles(&mut b));
    }

    #[test]
    fn hex_fields_serialize_as_0x_strings() {
        let r = DemoReport {
            report: DemoReport::KIND,
            protected: true,
            fragments: 3,
            inputs: 100,
            seed: 0xdead_beef,
            method: "segv-rw".into(),
            flavor: "inline".into(),
            exit: ProcExit { exit_code: Some(0), term_signal: None },
            stdout_digest: "cbf29ce484222325".into(),
            switch_count: Some(600),
            duration_ms: 123,
        };
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["seed"], "0xdeadbeef");
        assert_eq!(json["report"], "run-demo");
        assert_eq!(json["exit"]["exit_code"], 0);
    }

    #[test]
    fn sim_trace_is_omitted_when_absent() {
        let r = SimulateReport {
            report: SimulateReport::KIND,
            depth: 24,
            scenarios: vec![SimScenarioReport {
                name: "X".into(),
                expected: "DeadlockFree".into(),
                verdict: "DeadlockFree".into(),
                matches: true,
                states_explored: 10,
                trace: None,
            }],
            all_match: true,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("trace"));
    }

    #[test]
    fn proc_exit_describes_both_ends() {
        assert_eq!(ProcExit { exit_code: Some(0), term_signal: None }.describe(), "exit 0");
        assert_eq!(
            ProcExit { exit_code: None, term_signal: Some(9) }.describe(),
            "killed by signal 9"
        );
    }
}
