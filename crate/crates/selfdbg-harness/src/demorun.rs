//! The `run-demo` engine: spawn a demo instance, collect its workload
//! output and `done` marker, and fold everything into a report.

use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use selfdbg_core::report::{DemoReport, ProcExit};

use crate::digest;
use crate::markers;
use crate::procs::DemoSpec;

#[derive(Debug, Clone)]
pub struct RunDemoOpts {
    pub spec: DemoSpec,
    /// Generous whole-run deadline; crash runs die early, full runs with
    /// thousands of switches still finish well inside it.
    pub timeout: Duration,
}

impl Default for RunDemoOpts {
    fn default() -> Self {
        RunDemoOpts { spec: DemoSpec::new(), timeout: Duration::from_secs(120) }
    }
}

/// Runs the demo to completion and reports on it.  The raw stdout bytes
/// come back alongside the report so callers can compare runs directly
/// rather than through the digest.
pub fn run_demo(demo: &Path, opts: &RunDemoOpts) -> io::Result<(DemoReport, Vec<u8>)> {
    let started = Instant::now();
    let mut proc = opts.spec.spawn(demo)?;
    proc.stderr.drain();
    let (status, stdout_bytes) = proc.finish(opts.timeout)?;
    proc.stderr.drain();

    let switch_count = proc
        .stderr
        .markers(markers::DONE)
        .first()
        .and_then(|m| m.get_u64("switches"));

    let report = DemoReport {
        report: DemoReport::KIND,
        protected: !opts.spec.unprotected,
        fragments: opts.spec.fragments,
        inputs: opts.spec.inputs,
        seed: opts.spec.seed,
        method: opts.spec.method.as_str().to_string(),
        flavor: opts.spec.flavor.as_str().to_string(),
        exit: ProcExit::from_status(status),
        stdout_digest: digest::fnv1a_hex(&stdout_bytes),
        switch_count,
        duration_ms: started.elapsed().as_millis() as u64,
    };
    Ok((report, stdout_bytes))
}
