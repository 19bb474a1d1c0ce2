//! The `hsmlab` command line.
//!
//! Exit codes: 0 for no attack, a clean lint or a reproduced trace; 1 for an
//! attack, lint findings or a failed replay; 2 for usage, I/O and parse
//! errors; 3 when the search runs out of state budget.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::policy::lint;
use crate::scenario::{build_setup, format_trace, parse_scenario, parse_trace, Scenario, SetupMode};
use crate::search::{explore_from, replay, SearchError, SearchResult, SearchStats, Strategy, Verdict};
use crate::token::Mode;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FOUND: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BUDGET: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "hsmlab", version, about = "Attack search and policy linting for a symbolic PKCS#11 token")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Bfs,
    Iddfs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search for an attack that leaks a protected key.
    Explore {
        #[arg(long)]
        scenario: PathBuf,
        /// Maximum number of API calls.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, value_enum)]
        policy: Option<Switch>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value = "bfs")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        workers: u16,
        /// Write the attack trace here when one is found.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Stop after this many distinct states.
        #[arg(long)]
        state_cap: Option<usize>,
        /// Let honest users act too.
        #[arg(long)]
        honest: bool,
        /// Print search statistics to stderr.
        #[arg(long)]
        stats: bool,
    },
    /// Check a scenario's key configuration against the trusted-key policy.
    Lint {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Re-execute a trace against a scenario.
    Replay {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Accept steps taken by honest users.
        #[arg(long)]
        honest: bool,
    },
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                EXIT_USAGE
            } else {
                let _ = write!(out, "{}", e.render());
                EXIT_OK
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(message) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_USAGE
        }
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_scenario(path: &Path) -> Result<Scenario, String> {
    parse_scenario(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn io(e: std::io::Error) -> String {
    e.to_string()
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8, String> {
    match command {
        Command::Explore {
            scenario,
            depth,
            policy,
            mode,
            strategy,
            workers,
            trace_out,
            state_cap,
            honest,
            stats,
        } => {
            let mut scn = load_scenario(&scenario)?;
            if let Some(d) = depth {
                scn.depth = d;
            }
            if let Some(p) = policy {
                scn.policy_on = matches!(p, Switch::On);
            }
            if let Some(m) = mode {
                scn.mode = match m {
                    ModeArg::Full => Mode::Full,
                    ModeArg::Paper => Mode::Paper,
                };
            }
            let setup = build_setup(&scn, SetupMode::Lenient).map_err(|e| e.to_string())?;
            let mut cfg = setup.config.clone();
            cfg.strategy = match strategy {
                StrategyArg::Bfs => Strategy::Bfs,
                StrategyArg::Iddfs => Strategy::Iddfs,
            };
            cfg.workers = usize::from(workers);
            cfg.honest_actions = honest;
            if let Some(cap) = state_cap {
                cfg.state_cap = cap;
            }
            for skipped in &setup.skipped {
                writeln!(err, "note: setup step `{}` skipped: {}", skipped.step, skipped.error).map_err(io)?;
            }
            let (result, search_stats) = match explore_from(&setup.state, &setup.knowledge, &cfg) {
                Ok(r) => r,
                Err(e @ SearchError::BudgetExceeded { .. }) => {
                    writeln!(err, "BUDGET_EXCEEDED {e}").map_err(io)?;
                    return Ok(EXIT_BUDGET);
                }
                Err(e) => return Err(e.to_string()),
            };
            if stats {
                print_stats(err, &search_stats).map_err(io)?;
            }
            match result {
                SearchResult::Attack { trace, leaked_key } => {
                    let text = format_trace(&trace);
                    writeln!(out, "ATTACK {leaked_key} steps={}", trace.len()).map_err(io)?;
                    write!(out, "{text}").map_err(io)?;
                    if let Some(path) = trace_out {
                        fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
                    }
                    Ok(EXIT_FOUND)
                }
                SearchResult::Exhausted {
                    depth,
                    states_explored,
                    ..
                } => {
                    writeln!(out, "EXHAUSTED depth={depth} states={states_explored}").map_err(io)?;
                    Ok(EXIT_OK)
                }
            }
        }
        Command::Lint { scenario } => {
            let report = lint(&load_scenario(&scenario)?);
            write!(out, "{report}").map_err(io)?;
            Ok(if report.is_clean() { EXIT_OK } else { EXIT_FOUND })
        }
        Command::Replay {
            scenario,
            trace,
            honest,
        } => {
            let scn = load_scenario(&scenario)?;
            let steps = parse_trace(&read(&trace)?).map_err(|e| format!("{}: {e}", trace.display()))?;
            let verdict = replay(&scn, &steps, honest).map_err(|e| e.to_string())?;
            writeln!(out, "{verdict}").map_err(io)?;
            Ok(match verdict {
                Verdict::Reproduces(_) => EXIT_OK,
                Verdict::Fails { .. } => EXIT_FOUND,
            })
        }
    }
}

fn print_stats(err: &mut dyn Write, stats: &SearchStats) -> std::io::Result<()> {
    let secs = stats.elapsed.as_secs_f64();
    let rate = if secs > 0.0 {
        stats.transitions as f64 / secs
    } else {
        0.0
    };
    let layers: Vec<String> = stats.layer_sizes.iter().map(u64::to_string).collect();
    writeln!(
        err,
        "stats transitions={} canonical={} layers={} elapsed={secs:.3}s rate={rate:.0}/s",
        stats.transitions,
        stats.canonical_states,
        layers.join(",")
    )
}
