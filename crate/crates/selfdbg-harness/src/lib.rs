//! Plumbing shared by the harness CLI, the demo protectee, and the tests:
//! locating and spawning the demo binary, tapping its output streams,
//! parsing its stderr markers, reading procfs, and the engines behind the
//! `run-demo`, `attack`, `bench`, `simulate`, and `scan` subcommands.
//!
//! The split matters for one reason: the acceptance tests must drive the
//! exact same code paths the CLI exposes, so every subcommand is a library
//! function here and the binary is a thin argument parser.

pub mod attack;
pub mod bench;
pub mod demorun;
pub mod digest;
pub mod evlog;
pub mod markers;
pub mod procs;
pub mod rng;
pub mod scanio;
pub mod simrun;
