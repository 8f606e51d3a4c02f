// SPDX-License-Identifier: Apache-2.0

//! `cvmsim`: command-line front end for the confidential computing model.
//!
//! Exit codes: 0 every verdict holds, 1 an invariant was violated, 2 bad
//! input (unreadable or malformed file, bad flag), 3 exploration budget
//! exceeded.
//!
//! Scenario and counterexample files share the script format documented in
//! `cvm_model::harness::script`; the call whitelist format is the TOML table
//! read by `CallTable::from_toml`. Traces are one event per line.
//!
//! Every source of randomness derives from `--seed`. Without it a seed is
//! drawn from entropy and printed so the run can be repeated.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvm_model::harness::explore::{bounded_explore, ExploreConfig, ExploreError};
use cvm_model::harness::faults::self_test;
use cvm_model::harness::{run_scenario, RunOptions, ScenarioResult, Script};
use cvm_model::sm::CallTable;
use cvm_model::{trace, Mutation};

const EXIT_VIOLATION: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_BUDGET: u8 = 3;

const NOMINAL: &str = include_str!("../../../scenarios/nominal.scn");
const SEEDED: &str = include_str!("../../../scenarios/skip-zeroize.scn");

#[derive(Parser)]
#[command(name = "cvmsim", version, about = "Run, explore and replay the confidential computing model")]
struct Cli {
    /// Directory for traces and counterexamples.
    #[arg(long, global = true, env = "CVMSIM_TRACE_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot a platform and run a scenario script against it.
    Run(RunArgs),
    /// Enumerate every interleaving of untrusted actions up to a depth.
    Explore(ExploreArgs),
    /// Re-execute a counterexample file.
    Replay(ReplayArgs),
    /// Apply every catalog fault and confirm the oracle flags exactly its target.
    Check,
    /// Short tour: a clean run, a caught violation and a small exploration.
    Demo,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Seed for the victim scheduler.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the event trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    build: BuildArgs,
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long, default_value_t = 2)]
    harts: usize,
    #[arg(long, default_value_t = 2)]
    cvms: usize,
    #[arg(long, default_value_t = 8)]
    pages: u64,
    #[arg(long, default_value_t = 8)]
    depth: usize,
    /// Worker threads; all cores by default.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 2_000_000)]
    max_states: usize,
    #[arg(long = "mutation", value_name = "NAME")]
    mutations: Vec<Mutation>,
}

#[derive(Args)]
struct ReplayArgs {
    file: PathBuf,
    /// Ignore the mutations recorded in the file.
    #[arg(long)]
    fixed: bool,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    build: BuildArgs,
}

#[derive(Args)]
struct BuildArgs {
    /// Enable a monitor mutation; repeatable.
    #[arg(long = "mutation", value_name = "NAME")]
    mutations: Vec<Mutation>,
    /// SM call whitelist (TOML).
    #[arg(long)]
    calls: Option<PathBuf>,
}

/// Failure that maps to a non-zero exit code with a message.
struct Exit(u8, String);

impl Exit {
    fn input(msg: impl Into<String>) -> Self {
        Exit(EXIT_INPUT, msg.into())
    }
}

type CmdResult = Result<u8, Exit>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = cli.out_dir.as_deref();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args, out_dir),
        Command::Explore(args) => cmd_explore(args, out_dir),
        Command::Replay(args) => cmd_replay(args, out_dir),
        Command::Check => cmd_check(),
        Command::Demo => cmd_demo(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn read_script(path: &Path) -> Result<Script, Exit> {
    let text = fs::read_to_string(path).map_err(|e| Exit::input(format!("{}: {e}", path.display())))?;
    Script::parse(&text).map_err(|e| Exit::input(format!("{}: {e}", path.display())))
}

fn options(build: &BuildArgs) -> Result<RunOptions, Exit> {
    let calls = match &build.calls {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Exit::input(format!("{}: {e}", path.display())))?;
            Some(CallTable::from_toml(&text).map_err(|e| Exit::input(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    Ok(RunOptions { mutations: build.mutations.iter().copied().collect(), calls })
}

fn write_file(path: &Path, contents: &str) -> Result<(), Exit> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Exit::input(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Exit::input(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn print_verdicts(result: &ScenarioResult) {
    for v in &result.verdicts {
        println!("{v}");
    }
}

fn cmd_run(args: RunArgs, out_dir: Option<&Path>) -> CmdResult {
    let script = read_script(&args.scenario)?;
    let opts = options(&args.build)?;
    let seed = args.seed.unwrap_or_else(rand::random);
    println!("seed {seed}");
    let result = run_scenario(&script, seed, &opts).map_err(|e| Exit::input(e.to_string()))?;

    let name = stem(&args.scenario);
    let trace_path = args.trace.or_else(|| out_dir.map(|d| d.join(format!("{name}-{seed}.trace"))));
    if let Some(path) = &trace_path {
        write_file(path, &trace::render(&result.trace))?;
        println!("trace {}", path.display());
    }
    print_verdicts(&result);
    if result.all_hold() {
        return Ok(0);
    }
    let mut cex = result.materialize(&script);
    cex.mutations.extend(opts.mutations.iter().copied());
    let path = out_dir.unwrap_or(Path::new(".")).join(format!("{name}-{seed}.cex"));
    write_file(&path, &cex.render())?;
    println!("counterexample {}", path.display());
    Ok(EXIT_VIOLATION)
}

fn cmd_explore(args: ExploreArgs, out_dir: Option<&Path>) -> CmdResult {
    let config = ExploreConfig {
        harts: args.harts,
        cvms: args.cvms,
        pages: args.pages,
        depth: args.depth,
        workers: args.workers,
        max_states: args.max_states,
        mutations: args.mutations.into_iter().collect(),
    };
    let report = match bounded_explore(&config) {
        Ok(r) => r,
        Err(e @ ExploreError::StateSpaceBudgetExceeded { .. }) => return Err(Exit(EXIT_BUDGET, e.to_string())),
        Err(e) => return Err(Exit::input(e.to_string())),
    };
    println!("states {}", report.states);
    println!("transitions {}", report.transitions);
    println!("depth {}", report.depth);
    for v in &report.verdicts {
        println!("{} {}", if v.holds { "PASS" } else { "FAIL" }, v.id);
    }
    let Some(cex) = report.counterexample else { return Ok(0) };
    print!("{}", cex.render());
    let tag: Vec<&str> = config.mutations.iter().map(|m| m.name()).collect();
    let name = if tag.is_empty() { "explore".to_string() } else { format!("explore-{}", tag.join("+")) };
    let path = out_dir.unwrap_or(Path::new(".")).join(format!("{name}.cex"));
    write_file(&path, &cex.render())?;
    println!("counterexample {}", path.display());
    Ok(EXIT_VIOLATION)
}

fn cmd_replay(args: ReplayArgs, out_dir: Option<&Path>) -> CmdResult {
    let mut script = read_script(&args.file)?;
    if args.fixed {
        script.mutations.clear();
    }
    let opts = options(&args.build)?;
    // Counterexamples carry their victim steps inline, so the seed is inert.
    let result = run_scenario(&script, 0, &opts).map_err(|e| Exit::input(e.to_string()))?;
    let trace_path = args.trace.or_else(|| out_dir.map(|d| d.join(format!("{}-replay.trace", stem(&args.file)))));
    if let Some(path) = &trace_path {
        write_file(path, &trace::render(&result.trace))?;
    }
    print_verdicts(&result);
    let failed: BTreeSet<&str> = result.violations().map(|v| v.id).collect();
    let expected: BTreeSet<&str> = script.expect.iter().map(String::as_str).collect();
    if !expected.is_empty() {
        let status = if failed == expected { "reproduced" } else { "not reproduced" };
        println!("{status}: expected {expected:?}, got {failed:?}");
    }
    Ok(if failed.is_empty() { 0 } else { EXIT_VIOLATION })
}

fn cmd_check() -> CmdResult {
    let outcomes = self_test();
    let mut exact = 0;
    for o in &outcomes {
        if o.is_exact() {
            exact += 1;
            println!("PASS {} -> {}", o.fault, o.target);
        } else {
            let why = o.error.clone().unwrap_or_else(|| format!("tripped {:?}", o.tripped));
            println!("FAIL {} -> {} ({why})", o.fault, o.target);
        }
    }
    println!("{exact}/{} faults caught by exactly their target", outcomes.len());
    Ok(if exact == outcomes.len() { 0 } else { EXIT_VIOLATION })
}

fn cmd_demo() -> CmdResult {
    let nominal = Script::parse(NOMINAL).expect("bundled scenario parses");
    let clean = run_scenario(&nominal, 1, &RunOptions::default()).map_err(|e| Exit::input(e.to_string()))?;
    println!("== boot");
    print!("{}", clean.boot.to_record());
    println!("== nominal scenario: {} steps, {} events", nominal.steps.len(), clean.trace.len());
    let held = clean.verdicts.iter().filter(|v| v.holds).count();
    println!("{held}/{} verdicts hold", clean.verdicts.len());

    let seeded = Script::parse(SEEDED).expect("bundled scenario parses");
    let caught = run_scenario(&seeded, 1, &RunOptions::default()).map_err(|e| Exit::input(e.to_string()))?;
    println!("== monitor that skips zeroing");
    for v in caught.violations() {
        println!("{v}");
    }

    let config = ExploreConfig { harts: 1, cvms: 1, pages: 4, depth: 8, ..Default::default() };
    let report = bounded_explore(&config).map_err(|e| Exit::input(e.to_string()))?;
    println!("== exploration (1 hart, 1 CVM, 4 pages, depth 8)");
    println!("{} states, {} verdicts hold", report.states, report.verdicts.iter().filter(|v| v.holds).count());

    let ok = clean.all_hold() && !caught.all_hold() && report.all_hold();
    Ok(if ok { 0 } else { EXIT_VIOLATION })
}
