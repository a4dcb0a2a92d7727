//! Cost measurements for the protection runtime, reported as percentile
//! rows: pair setup time, single remote word transfers, and one full
//! control switch per fault method.
//!
//! Switch timings come from the demo binary's `--bench-switch` mode so the
//! measured path is exactly the production invocation path; init and
//! remote-access timings are taken here because they need no live pair.

use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use selfdbg_core::codec::FaultKind;
use selfdbg_core::report::{percentiles, BenchReport, BenchRow};
use selfdbg_core::sys;

use crate::procs::DemoSpec;

pub const ASPECT_INIT: &str = "Init";
pub const ASPECT_REMOTE_READ: &str = "RemoteRead";
pub const ASPECT_REMOTE_WRITE: &str = "RemoteWrite";
pub const ASPECT_SWITCH_TRAP: &str = "SwitchTrap";
pub const ASPECT_SWITCH_SEGV_RW: &str = "SwitchSegvRW";
pub const ASPECT_SWITCH_SEGV_X: &str = "SwitchSegvX";

#[derive(Debug, Clone, Copy)]
pub struct BenchOpts {
    /// Full pair setups to time (after two discarded warmups).
    pub init_samples: usize,
    /// Individual remote word transfers per direction.
    pub remote_samples: usize,
    /// Timed migrated invocations per fault method.
    pub switch_samples: u32,
}

impl Default for BenchOpts {
    fn default() -> Self {
        BenchOpts { init_samples: 30, remote_samples: 300, switch_samples: 120 }
    }
}

fn row(aspect: &str, mut samples: Vec<f64>) -> BenchRow {
    let (p10, median, p90) = percentiles(&mut samples);
    BenchRow {
        aspect: aspect.to_string(),
        samples: samples.len(),
        median_us: median,
        p10_us: p10,
        p90_us: p90,
    }
}

pub fn run_bench(demo: &Path, opts: &BenchOpts) -> io::Result<BenchReport> {
    let mut rows = Vec::new();
    rows.push(row(ASPECT_INIT, time_init(demo, opts.init_samples)?));

    let (reads, writes) = time_remote_words(opts.remote_samples)?;
    rows.push(row(ASPECT_REMOTE_READ, reads));
    rows.push(row(ASPECT_REMOTE_WRITE, writes));

    for (aspect, kind) in [
        (ASPECT_SWITCH_TRAP, FaultKind::TrapReference),
        (ASPECT_SWITCH_SEGV_RW, FaultKind::SegvLoadStore),
        (ASPECT_SWITCH_SEGV_X, FaultKind::SegvExec),
    ] {
        rows.push(row(aspect, time_switches(demo, kind, opts.switch_samples)?));
    }

    let median_of = |aspect: &str| {
        rows.iter().find(|r| r.aspect == aspect).map(|r| r.median_us)
    };
    let trap = median_of(ASPECT_SWITCH_TRAP);
    let ratio = |base: Option<f64>| match (trap, base) {
        (Some(t), Some(b)) if b > 0.0 => Some(t / b),
        _ => None,
    };
    let trap_over_segv_rw = ratio(median_of(ASPECT_SWITCH_SEGV_RW));
    let trap_over_segv_x = ratio(median_of(ASPECT_SWITCH_SEGV_X));

    Ok(BenchReport { report: BenchReport::KIND, rows, trap_over_segv_rw, trap_over_segv_x })
}

/// Times `protect_init` end to end by spawning fresh demo pairs; the demo
/// measures the call around its own init and reports it in the up marker.
fn time_init(demo: &Path, samples: usize) -> io::Result<Vec<f64>> {
    let spec = DemoSpec { fragments: 0, inputs: 0, ..DemoSpec::new() };
    let mut out = Vec::with_capacity(samples);
    let total = samples + 2;
    for i in 0..total {
        let mut proc = spec.spawn(demo)?;
        let init_us = proc.init_us;
        let (status, _) = proc.finish(Duration::from_secs(10))?;
        if !status.success() {
            return Err(io::Error::new(
                io::ErrorKind::Other,
                format!("init-timing run exited {status}"),
            ));
        }
        if i >= 2 {
            out.push(init_us as f64);
        }
    }
    if out.len() < samples {
        return Err(io::Error::new(io::ErrorKind::Other, "insufficient init samples"));
    }
    Ok(out)
}

/// Times one-word ptrace transfers against a freshly seized scratch child.
/// The child is this process's own fork, so any static in our image is a
/// valid remote address in it.
fn time_remote_words(samples: usize) -> io::Result<(Vec<f64>, Vec<f64>)> {
    static SCRATCH: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0x5eed);
    let addr = &SCRATCH as *const _ as u64;

    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(io::Error::last_os_error());
    }
    if pid == 0 {
        // Scratch child: nothing but an interruptible idle loop, so being
        // seized, poked, and finally killed needs no cooperation.
        loop {
            unsafe { libc::pause() };
        }
    }

    let res = (|| -> io::Result<(Vec<f64>, Vec<f64>)> {
        sys::seize(pid, 0)?;
        sys::interrupt(pid)?;
        let status = sys::wait_status(pid)?;
        if !matches!(sys::decode_status(status), sys::WaitStatus::Stopped { .. }) {
            return Err(io::Error::new(io::ErrorKind::Other, "scratch child did not stop"));
        }

        let mut reads = Vec::with_capacity(samples);
        for _ in 0..samples {
            let t = Instant::now();
            let v = sys::peekdata(pid, addr)?;
            reads.push(t.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(v);
        }

        let mut writes = Vec::with_capacity(samples);
        for i in 0..samples {
            let word = 0xfeed_0000 + i as u64;
            let t = Instant::now();
            sys::pokedata(pid, addr, word)?;
            writes.push(t.elapsed().as_secs_f64() * 1e6);
        }
        Ok((reads, writes))
    })();

    // Tear the scratch child down whether or not the timing succeeded.
    let _ = sys::detach(pid, libc::SIGKILL);
    unsafe {
        libc::kill(pid, libc::SIGKILL);
        let mut st = 0;
        libc::waitpid(pid, &mut st, 0);
    }
    res
}

/// Spawns a demo in `--bench-switch` mode and parses its per-invocation
/// microsecond lines.
fn time_switches(demo: &Path, kind: FaultKind, samples: u32) -> io::Result<Vec<f64>> {
    let spec = DemoSpec {
        fragments: 1,
        method: kind,
        bench_switch_samples: Some(samples),
        ..DemoSpec::new()
    };
    let mut proc = spec.spawn(demo)?;
    let (status, stdout) = proc.finish(Duration::from_secs(60))?;
    if !status.success() {
        proc.stderr.drain();
        return Err(io::Error::new(
            io::ErrorKind::Other,
            format!(
                "switch-timing run ({}) exited {status}; stderr:\n{}",
                kind.as_str(),
                proc.stderr.seen().join("\n")
            ),
        ));
    }
    let mut out = Vec::with_capacity(samples as usize);
    for line in String::from_utf8_lossy(&stdout).lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let us: f64 = line.parse().map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("bad timing line '{line}': {e}"))
        })?;
        out.push(us);
    }
    if out.len() < samples as usize {
        return Err(io::Error::new(
            io::ErrorKind::Other,
            format!("only {} of {samples} switch samples ({})", out.len(), kind.as_str()),
        ));
    }
    Ok(out)
}
