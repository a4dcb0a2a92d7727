//! Command-line front end.  Every subcommand delegates to the library
//! engine of the same name and prints exactly one JSON report document on
//! stdout; diagnostics go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfdbg_core::codec::FaultKind;
use selfdbg_core::sim::DEFAULT_DEPTH;
use selfdbg_core::whitelist::SiteFlavor;

use selfdbg_harness::attack::{run_attack, Scenario};
use selfdbg_harness::bench::{run_bench, BenchOpts};
use selfdbg_harness::demorun::{run_demo, RunDemoOpts};
use selfdbg_harness::procs::{demo_path, DemoSpec};
use selfdbg_harness::scanio::{run_scan, ScanOpts};
use selfdbg_harness::simrun::run_simulate;

#[derive(Parser)]
#[command(
    name = "selfdbg-harness",
    about = "Drive, attack, measure, and audit the reciprocal self-debugging runtime",
    disable_help_subcommand = true
)]
struct Cli {
    /// Path to the selfdbg-demo binary (defaults to a sibling of this one).
    #[arg(long, global = true)]
    demo: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the demo workload under protection and report on the run.
    RunDemo(RunDemoArgs),
    /// Run one hostile scenario against a live pair.
    Attack(AttackArgs),
    /// Measure init, remote access, and switch costs.
    Bench(BenchArgs),
    /// Explore the interaction model over the scenario catalog.
    Simulate(SimulateArgs),
    /// Audit a binary for site tells without executing the sites.
    Scan(ScanArgs),
}

#[derive(Args)]
struct SiteArgs {
    /// How many workload fragments run migrated.
    #[arg(long, default_value_t = 3)]
    fragments: u32,
    /// Fault method: segv-rw, segv-x, or trap.
    #[arg(long, default_value = "segv-rw")]
    method: FaultKind,
    /// Site flavor for the segv methods: inline or reused.
    #[arg(long, default_value = "inline")]
    flavor: SiteFlavor,
}

#[derive(Args)]
struct RunDemoArgs {
    #[command(flatten)]
    site: SiteArgs,
    #[arg(long, default_value_t = 128)]
    inputs: u32,
    /// Workload seed (decimal or 0x-prefixed hex).
    #[arg(long, default_value = "0x5eed", value_parser = parse_u64)]
    seed: u64,
    /// TOML config passed through to the demo.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run without protection (baseline for output comparison).
    #[arg(long)]
    unprotected: bool,
    /// Inject a genuine fault halfway through.
    #[arg(long)]
    crash: bool,
    /// Tee the demo's raw stdout to a file for offline diffing.
    #[arg(long)]
    save_stdout: Option<PathBuf>,
    /// Write the runtime event log here.
    #[arg(long)]
    event_log: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// external-attach, kill-selfdebugger, kill-app, sigterm-broadcast,
    /// or sigstop-catcher.
    #[arg(long)]
    scenario: Scenario,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 30)]
    init_samples: usize,
    #[arg(long, default_value_t = 300)]
    remote_samples: usize,
    #[arg(long, default_value_t = 120)]
    switch_samples: u32,
}

#[derive(Args)]
struct SimulateArgs {
    /// Exploration depth bound.
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    depth: usize,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    site: SiteArgs,
    /// Binary to audit (defaults to the demo binary).
    #[arg(long)]
    binary: Option<PathBuf>,
}

fn parse_u64(s: &str) -> Result<u64, String> {
    selfdbg_core::config::parse_hex_u64(s)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("selfdbg-harness: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let demo = match &cli.demo {
        Some(p) => p.clone(),
        None => demo_path()?,
    };

    match cli.command {
        Cmd::RunDemo(args) => {
            let spec = DemoSpec {
                fragments: args.site.fragments,
                inputs: args.inputs,
                seed: args.seed,
                method: args.site.method,
                flavor: args.site.flavor,
                unprotected: args.unprotected,
                crash: args.crash,
                config: args.config.clone(),
                event_log: args.event_log.clone(),
                ..DemoSpec::new()
            };
            let (report, stdout_bytes) = run_demo(&demo, &RunDemoOpts {
                spec,
                ..RunDemoOpts::default()
            })?;
            if let Some(path) = &args.save_stdout {
                std::fs::write(path, &stdout_bytes)?;
            }
            print_json(&report);
            // Propagate how the demo itself ended: callers scripting a
            // crash run deserve a nonzero status here too.
            let code = match (report.exit.exit_code, report.exit.term_signal) {
                (Some(0), _) => 0,
                (Some(c), _) => c.clamp(0, 255) as u8,
                (None, Some(sig)) => (128 + sig).clamp(0, 255) as u8,
                (None, None) => 2,
            };
            Ok(ExitCode::from(code))
        }
        Cmd::Attack(args) => {
            let report = run_attack(&demo, args.scenario)?;
            let pass = report.pass;
            print_json(&report);
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Bench(args) => {
            let report = run_bench(&demo, &BenchOpts {
                init_samples: args.init_samples,
                remote_samples: args.remote_samples,
                switch_samples: args.switch_samples,
            })?;
            print_json(&report);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Simulate(args) => {
            let report = run_simulate(args.depth);
            let ok = report.all_match;
            print_json(&report);
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Scan(args) => {
            let binary = args.binary.clone().unwrap_or(demo);
            let opts = ScanOpts {
                fragments: args.site.fragments,
                method: args.site.method,
                flavor: args.site.flavor,
            };
            let report = run_scan(&binary, &opts)?;
            // Trap opcodes at migrated sites are the expected texture of a
            // trap build and a leak in every other configuration.
            let leak = args.site.method != FaultKind::TrapReference && report.trap_opcodes > 0;
            print_json(&report);
            Ok(if leak { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
    }
}
