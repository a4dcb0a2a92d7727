//! Protected demo application.
//!
//! Runs a deterministic checksum workload through the migration machinery
//! and reports progress as `selfdbg-demo:` markers on stderr, keeping
//! stdout exclusively for workload output so protected and unprotected
//! runs can be compared byte for byte.  The harness drives every scenario
//! through this one binary: demo runs, crash runs, attack victims
//! (`--linger`), signal probes (`--signal-probe`), switch benchmarks
//! (`--bench-switch`), and site listings for the offline scanner
//! (`--emit-sites`).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::time::{Duration, Instant};

use arrayvec::ArrayString;
use clap::Parser;

use selfdbg_core::bootstrap::{self, protect_fini, protect_init, InitOutcome};
use selfdbg_core::codec::FaultKind;
use selfdbg_core::config::Config;
use selfdbg_core::eventlog::{events, EventLog};
use selfdbg_core::fragments::{invoke_migrated, register_fragment, FragmentFn};
use selfdbg_core::scan::collect_site_listing;
use selfdbg_core::whitelist::SiteFlavor;

use selfdbg_harness::digest::Fnv;
use selfdbg_harness::markers;
use selfdbg_harness::rng::Splitmix64;

#[derive(Parser, Debug)]
#[command(name = "selfdbg-demo", disable_help_subcommand = true)]
struct Args {
    /// TOML config file; flags below override its demo section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// How many workload fragments (of 10) run migrated.
    #[arg(long)]
    fragments: Option<u32>,
    /// Number of workload inputs to process.
    #[arg(long)]
    inputs: Option<u32>,
    /// Workload seed (decimal or 0x-prefixed hex).
    #[arg(long, value_parser = parse_u64)]
    seed: Option<u64>,
    /// Fault method for migrated sites: segv-rw, segv-x, or trap.
    #[arg(long)]
    method: Option<FaultKind>,
    /// Site flavor for the segv methods: inline or reused.
    #[arg(long)]
    flavor: Option<SiteFlavor>,
    /// Run with protection disabled (sets the disable variable itself).
    #[arg(long)]
    unprotected: bool,
    /// Dereference an unmapped, non-namespace address halfway through.
    #[arg(long)]
    crash: bool,
    /// Write the runtime event log to this path.
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Hard deadline: a post-init thread force-exits after this many
    /// seconds in case an attack wedges the pair beyond SIGKILL's reach.
    #[arg(long)]
    watchdog: Option<u64>,
    /// After the workload, keep invoking fragments for this many ms
    /// (heartbeat markers each cycle) so attacks have a live target.
    #[arg(long, default_value_t = 0)]
    linger: u64,
    /// Skip the workload; loop on a slow fragment so signals aimed at
    /// this process land while control is migrated away.
    #[arg(long)]
    signal_probe: bool,
    /// How long the slow fragment burns per probe cycle.
    #[arg(long, default_value_t = 300)]
    probe_burn_ms: u64,
    /// Print the registered-site listing as JSON and exit (no twin).
    #[arg(long)]
    emit_sites: bool,
    /// Benchmark mode: time this many migrated invocations and print one
    /// microsecond value per line.
    #[arg(long)]
    bench_switch: Option<u32>,
}

fn parse_u64(s: &str) -> Result<u64, String> {
    selfdbg_core::config::parse_hex_u64(s)
}

// ---------------------------------------------------------------------------
// Signal handling.  Handlers are installed before protect_init so the twin
// inherits them; only the application's main loop ever acts on the flags,
// so cleanup runs exactly once regardless of who receives what.

static TERM_REQUESTED: AtomicBool = AtomicBool::new(false);
static USR1_COUNT: AtomicU32 = AtomicU32::new(0);
static CLEANED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigterm(_sig: i32) {
    TERM_REQUESTED.store(true, Ordering::SeqCst);
}

extern "C" fn on_sigusr1(_sig: i32) {
    let n = USR1_COUNT.fetch_add(1, Ordering::SeqCst) + 1;
    // Record the delivery the moment it happens, from the pid it happens
    // in.  Only async-signal-safe pieces: atomics, stack formatting, and
    // the write(2) behind EventLog::emit.
    let fd = selfdbg_core::context::LOG_FD.load(Ordering::Relaxed);
    if fd >= 0 {
        let mut detail = ArrayString::<32>::new();
        let _ = write!(detail, "count={n}");
        EventLog::from_raw_fd(fd).emit(markers::EVENT_USR1_DELIVERED, &detail);
    }
}

fn install_handlers() {
    unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_flags = libc::SA_RESTART;
        libc::sigemptyset(&mut sa.sa_mask);
        sa.sa_sigaction = on_sigterm as extern "C" fn(i32) as usize;
        libc::sigaction(libc::SIGTERM, &sa, std::ptr::null_mut());
        sa.sa_sigaction = on_sigusr1 as extern "C" fn(i32) as usize;
        libc::sigaction(libc::SIGUSR1, &sa, std::ptr::null_mut());
    }
}

/// One cleanup for every orderly exit path; the guard makes a second call
/// a no-op so a SIGTERM racing the natural end of the workload cannot
/// double-report.
fn cleanup(reason: &str) {
    if CLEANED.swap(true, Ordering::SeqCst) {
        return;
    }
    let fd = selfdbg_core::context::LOG_FD.load(Ordering::Relaxed);
    if fd >= 0 {
        let mut detail = ArrayString::<32>::new();
        let _ = write!(detail, "reason={reason}");
        EventLog::from_raw_fd(fd).emit(events::CLEANUP, &detail);
    }
    markers::emit(markers::CLEANUP, format_args!("reason={reason}"));
    protect_fini();
}

// ---------------------------------------------------------------------------
// Workload fragments.  Ten small pure functions over (u64, u64); the first
// `--fragments` of them run migrated, the rest run as plain calls, and the
// printed lines must be identical either way.

extern "C" fn frag_fnv_mix(acc: u64, word: u64) -> u64 {
    let mut h = acc;
    for b in word.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

extern "C" fn frag_adler_lane(state: u64, word: u64) -> u64 {
    const MOD: u64 = 65_521;
    let mut a = state & 0xffff_ffff;
    let mut b = state >> 32;
    for byte in word.to_le_bytes() {
        a = (a + u64::from(byte)) % MOD;
        b = (b + a) % MOD;
    }
    (b << 32) | a
}

extern "C" fn frag_run_tally(state: u64, word: u64) -> u64 {
    let mut last = state & 0xff;
    let mut runs = state >> 16;
    for byte in word.to_le_bytes() {
        if u64::from(byte) != last {
            runs += 1;
            last = u64::from(byte);
        }
    }
    (runs << 16) | last
}

extern "C" fn frag_rot_fold(acc: u64, word: u64) -> u64 {
    acc.rotate_left(17) ^ word.wrapping_mul(0xff51_afd7_ed55_8ccd)
}

extern "C" fn frag_mix_len(acc: u64, len: u64) -> u64 {
    (acc ^ len).wrapping_mul(0xc4ce_b9fe_1a85_ec53)
}

extern "C" fn frag_stir(acc: u64, index: u64) -> u64 {
    acc.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_right(23)
}

extern "C" fn frag_fold64(a: u64, b: u64) -> u64 {
    let x = u128::from(a) * u128::from(b | 1);
    (x as u64) ^ ((x >> 64) as u64)
}

extern "C" fn frag_xor_shift(acc: u64, k: u64) -> u64 {
    let mut x = acc ^ k;
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    x
}

extern "C" fn frag_avalanche(acc: u64, salt: u64) -> u64 {
    let mut x = acc.wrapping_add(salt);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x
}

extern "C" fn frag_splitmix_fin(x: u64, gamma: u64) -> u64 {
    let mut z = x.wrapping_add(gamma);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Burns roughly `burn_ms` of wall time; the probe scenarios need a window
/// in which control provably lives in the counterpart.
extern "C" fn frag_slow_burn(cycle: u64, burn_ms: u64) -> u64 {
    let start = Instant::now();
    let mut acc = cycle;
    while (start.elapsed().as_millis() as u64) < burn_ms {
        for _ in 0..64 {
            acc = frag_splitmix_fin(acc, 0x9e37_79b9_7f4a_7c15);
        }
        std::hint::black_box(acc);
    }
    acc
}

const WORK_FRAGS: [FragmentFn; 10] = [
    frag_fnv_mix,
    frag_adler_lane,
    frag_run_tally,
    frag_rot_fold,
    frag_mix_len,
    frag_stir,
    frag_fold64,
    frag_xor_shift,
    frag_avalanche,
    frag_splitmix_fin,
];

const SLOW_ID: u32 = 100;

/// Routes fragment calls either through the migration machinery or as
/// plain calls, depending on how many ids were registered.
struct Dispatch {
    migrated: u32,
    unprotected: bool,
}

impl Dispatch {
    fn call(&self, id: u32, a0: u64, a1: u64) -> u64 {
        if !self.unprotected && id < self.migrated {
            match invoke_migrated(id, a0, a1) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("selfdbg-demo: fatal invoke error for fragment {id}: {e}");
                    std::process::exit(5);
                }
            }
        } else {
            unsafe { WORK_FRAGS[id as usize](a0, a1) }
        }
    }
}

// ---------------------------------------------------------------------------

fn effective_config(args: &Args) -> Config {
    let mut cfg = match &args.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("selfdbg-demo: bad config {}: {e}", path.display());
                std::process::exit(2);
            }
        },
        None => Config::default(),
    };
    if let Some(f) = args.fragments {
        cfg.demo.fragments = f;
    }
    if let Some(i) = args.inputs {
        cfg.demo.inputs = i;
    }
    if let Some(s) = args.seed {
        cfg.demo.seed = s;
    }
    if let Some(m) = args.method {
        cfg.demo.method = m;
    }
    if let Some(fl) = args.flavor {
        cfg.demo.flavor = fl;
    }
    if let Some(p) = &args.event_log {
        cfg.eventlog_path = Some(p.clone());
    }
    if let Some(w) = args.watchdog {
        cfg.runtime.watchdog_secs = w;
    }
    if cfg.demo.fragments as usize > WORK_FRAGS.len() {
        eprintln!(
            "selfdbg-demo: --fragments {} exceeds the {} available",
            cfg.demo.fragments,
            WORK_FRAGS.len()
        );
        std::process::exit(2);
    }
    cfg
}

fn register_workload(cfg: &Config, probe: bool) {
    for (id, f) in WORK_FRAGS.iter().enumerate().take(cfg.demo.fragments as usize) {
        if let Err(e) = register_fragment(id as u32, *f, cfg.demo.method, cfg.demo.flavor) {
            eprintln!("selfdbg-demo: registering fragment {id} failed: {e}");
            std::process::exit(5);
        }
    }
    if probe {
        if let Err(e) = register_fragment(SLOW_ID, frag_slow_burn, cfg.demo.method, cfg.demo.flavor)
        {
            eprintln!("selfdbg-demo: registering slow fragment failed: {e}");
            std::process::exit(5);
        }
    }
}

fn main() {
    let args = Args::parse();
    let cfg = effective_config(&args);

    if args.emit_sites {
        emit_sites(&cfg);
        return;
    }

    install_handlers();

    if args.unprotected {
        std::env::set_var(bootstrap::DISABLE_ENV, "1");
    }

    let t0 = Instant::now();
    let outcome = match protect_init(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("selfdbg-demo: protection init failed: {e}");
            std::process::exit(3);
        }
    };
    let init_us = t0.elapsed().as_micros() as u64;

    let status = bootstrap::status();
    let protected = matches!(outcome, InitOutcome::Protected);
    markers::emit(
        markers::UP,
        format_args!(
            "pid={} twin={} protected={} init_us={init_us}",
            std::process::id(),
            status.counterpart,
            u8::from(protected),
        ),
    );

    if cfg.runtime.watchdog_secs > 0 {
        let secs = cfg.runtime.watchdog_secs;
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs(secs));
            let fd = selfdbg_core::context::LOG_FD.load(Ordering::Relaxed);
            if fd >= 0 {
                EventLog::from_raw_fd(fd).emit(events::WATCHDOG_FIRED, "force exit");
            }
            eprintln!("selfdbg-demo: watchdog fired after {secs}s, forcing exit");
            unsafe { libc::_exit(86) };
        });
    }

    if let Some(samples) = args.bench_switch {
        if !protected {
            eprintln!("selfdbg-demo: --bench-switch requires live protection");
            std::process::exit(4);
        }
        register_workload(&cfg, false);
        bench_switch(&cfg, samples);
        cleanup("bench-done");
        return;
    }

    register_workload(&cfg, args.signal_probe);

    if args.signal_probe {
        probe_loop(&args);
        cleanup("sigterm");
        return;
    }

    let dispatch = Dispatch { migrated: cfg.demo.fragments, unprotected: !protected };
    if !workload(&cfg, &dispatch, args.crash) {
        cleanup("sigterm");
        std::process::exit(0);
    }

    if args.linger > 0 && !linger_loop(&dispatch, &cfg, args.linger) {
        cleanup("sigterm");
        std::process::exit(0);
    }

    cleanup("done");
}

fn emit_sites(cfg: &Config) {
    // The listing describes registered sites, which exist identically in
    // disabled mode; skipping the fork keeps this path usable under CI
    // runners and inside the scanner without a live pair.
    std::env::set_var(bootstrap::DISABLE_ENV, "1");
    if let Err(e) = protect_init(cfg) {
        eprintln!("selfdbg-demo: init for site listing failed: {e}");
        std::process::exit(3);
    }
    register_workload(cfg, false);
    let listing = match collect_site_listing() {
        Ok(l) => l,
        Err(e) => {
            eprintln!("selfdbg-demo: site listing failed: {e}");
            std::process::exit(3);
        }
    };
    println!("{}", serde_json::to_string_pretty(&listing).expect("listing serializes"));
}

/// The deterministic workload: `inputs` pseudo-random byte strings pushed
/// through four word pipelines and a finisher chain, one summary line per
/// input on stdout, one digest-bearing `done` marker on stderr.
fn workload(cfg: &Config, dispatch: &Dispatch, crash: bool) -> bool {
    let mut rng = Splitmix64::new(cfg.demo.seed);
    let mut digest = Fnv::new();
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());

    for i in 0..cfg.demo.inputs {
        if TERM_REQUESTED.load(Ordering::SeqCst) {
            drop(out);
            return false;
        }
        if crash && i == cfg.demo.inputs / 2 {
            // A genuine bug: unmapped, and nowhere near the fault
            // namespace, so the runtime must not mistake it for a
            // migration request.
            unsafe { std::ptr::read_volatile(0x40 as *const u8) };
        }

        let len = 64 + rng.below(193);
        let nwords = (len + 7) / 8;
        let mut fnv = 0xcbf2_9ce4_8422_2325_u64;
        let mut adler = 1_u64;
        let mut runs = 0_u64;
        let mut mix = cfg.demo.seed ^ i as u64;
        for _ in 0..nwords {
            let word = rng.next();
            fnv = dispatch.call(0, fnv, word);
            adler = dispatch.call(1, adler, word);
            runs = dispatch.call(2, runs, word);
            mix = dispatch.call(3, mix, word);
        }
        let mut acc = mix;
        acc = dispatch.call(4, acc, len);
        acc = dispatch.call(5, acc, i as u64);
        acc = dispatch.call(6, acc, fnv);
        acc = dispatch.call(7, acc, runs);
        acc = dispatch.call(8, acc, adler);
        acc = dispatch.call(9, acc, 0x9e37_79b9_7f4a_7c15);

        let line = format!(
            "{i:04} len={len} fnv={fnv:016x} adler={:08x} runs={} mix={acc:016x}\n",
            adler & 0xffff_ffff,
            runs >> 16,
        );
        digest.update(line.as_bytes());
        out.write_all(line.as_bytes()).expect("stdout writable");
    }
    out.flush().expect("stdout flush");
    drop(out);

    markers::emit(
        markers::DONE,
        format_args!(
            "inputs={} switches={} digest={:016x}",
            cfg.demo.inputs,
            bootstrap::status().switch_count,
            digest.value(),
        ),
    );
    true
}

/// Keeps the pair busy after the workload so attack scenarios can strike a
/// live target; the heartbeat marker number advances only while fragment
/// calls still come back.
fn linger_loop(dispatch: &Dispatch, cfg: &Config, linger_ms: u64) -> bool {
    let mut rng = Splitmix64::new(cfg.demo.seed ^ 0x11ce_b00c);
    let deadline = Instant::now() + Duration::from_millis(linger_ms);
    let mut cycle = 0_u64;
    while Instant::now() < deadline {
        if TERM_REQUESTED.load(Ordering::SeqCst) {
            return false;
        }
        for id in 0..cfg.demo.fragments.min(WORK_FRAGS.len() as u32) {
            let a = rng.next();
            let b = rng.next();
            std::hint::black_box(dispatch.call(id, a, b));
        }
        markers::emit(markers::CYCLE, format_args!("n={cycle}"));
        cycle += 1;
        std::thread::sleep(Duration::from_millis(20));
    }
    true
}

/// Invokes the slow fragment over and over.  While it runs, control lives
/// in the counterpart and this process sits fully masked, so any signal
/// sent mid-cycle must wait for the return switch; the `usr1-delivered`
/// event then shows exactly when and where it landed.
fn probe_loop(args: &Args) {
    let mut cycle = 0_u64;
    loop {
        if TERM_REQUESTED.load(Ordering::SeqCst) {
            return;
        }
        markers::emit(markers::CYCLE, format_args!("n={cycle}"));
        let r = invoke_migrated(SLOW_ID, cycle, args.probe_burn_ms);
        if let Err(e) = r {
            eprintln!("selfdbg-demo: probe invoke failed: {e}");
            std::process::exit(5);
        }
        markers::emit(
            markers::CYCLE_DONE,
            format_args!("n={cycle} usr1={}", USR1_COUNT.load(Ordering::SeqCst)),
        );
        cycle += 1;
        std::thread::sleep(Duration::from_millis(50));
    }
}

/// Times `samples` migrated invocations of fragment 0 and prints one
/// microsecond figure per line on stdout.
fn bench_switch(cfg: &Config, samples: u32) {
    let _ = cfg;
    for i in 0..8_u64 {
        std::hint::black_box(invoke_migrated(0, i, i ^ 0xa5a5).expect("warmup invoke"));
    }
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    for i in 0..samples {
        let a = u64::from(i);
        let t = Instant::now();
        let r = invoke_migrated(0, a, a ^ 0x5a5a).expect("bench invoke");
        let us = t.elapsed().as_secs_f64() * 1e6;
        std::hint::black_box(r);
        writeln!(out, "{us:.3}").expect("stdout writable");
    }
    out.flush().expect("stdout flush");
}
