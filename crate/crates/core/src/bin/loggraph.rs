//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 usage or I/O error, 2 fixture miss, 3 budget halt,
//! 4 replay divergence, 5 missing behavior, 6 cutoff out of range,
//! 7 unrelated runs, 8 unknown lineage target.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use loggraph_core::canonical;
use loggraph_core::event::{types, EventId};
use loggraph_core::graph::ObjectId;
use loggraph_core::log::EventLog;
use loggraph_core::pack::{Pack, PackError};
use loggraph_core::replay::{self, DiffError, ForkSpec, LineageError, LineageTarget};
use loggraph_core::runtime::{RunError, RunOutcome};

const EXIT_IO: u8 = 1;
const EXIT_FIXTURE_MISS: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_MISSING_BEHAVIOR: u8 = 5;
const EXIT_CUTOFF: u8 = 6;
const EXIT_UNRELATED: u8 = 7;
const EXIT_UNKNOWN_TARGET: u8 = 8;

#[derive(Parser)]
#[command(name = "loggraph", version, about = "Event-sourced reactive agent runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the bundled diligence demo offline.
    Quickstart {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Budget cap, e.g. `max_events=10`. Repeatable.
        #[arg(long = "budget", value_name = "KEY=VALUE")]
        budget: Vec<String>,
    },
    /// Run a pack's demo goal.
    Run {
        /// Pack directory or name on the pack search path.
        pack: String,
        #[arg(long, default_value = "run")]
        run: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long = "budget", value_name = "KEY=VALUE")]
        budget: Vec<String>,
    },
    /// Replay a log, strictly or permissively.
    Replay {
        log: PathBuf,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        pack: Option<String>,
        /// Output file or directory of a permissive replay.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Branch a log after event `--at` and run the branch forward.
    Fork {
        log: PathBuf,
        #[arg(long)]
        at: u64,
        /// `budget.<dim>`, `behavior.<name>[.<path>]` or `fixture.<id>`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pack: Option<String>,
    },
    /// Structural diff of two related runs.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// Where to write the canonical report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Causal chain of an object or event, root first.
    Lineage {
        log: PathBuf,
        #[arg(long, conflicts_with = "event", required_unless_present = "event")]
        object: Option<String>,
        /// Event id as `run#seq`.
        #[arg(long)]
        event: Option<String>,
    },
    /// Print a log's header and events.
    Log {
        log: PathBuf,
        /// Only events of this type.
        #[arg(long = "type")]
        kind: Option<String>,
        /// Counts per event type instead of events.
        #[arg(long)]
        stats: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Failure {
        Failure { code, message: message.to_string() }
    }
}

type CmdResult = Result<u8, Failure>;

fn io(e: impl ToString) -> Failure {
    Failure::new(EXIT_IO, e)
}

fn run_failure(e: RunError) -> Failure {
    match e {
        RunError::Diverged(d) => {
            let mut f = Failure::new(EXIT_DIVERGED, &d);
            f.message.push_str(&format!("\ndivergence {}", canonical::canonicalize(&d.to_value()).as_str()));
            f
        }
        RunError::MissingBehavior(_) => Failure::new(EXIT_MISSING_BEHAVIOR, e),
        RunError::CutoffOutOfRange { .. } => Failure::new(EXIT_CUTOFF, e),
        other => io(other),
    }
}

fn pack_failure(e: PackError) -> Failure {
    match e {
        PackError::Run(r) => run_failure(r),
        other => io(other),
    }
}

fn parse_pairs(pairs: &[String]) -> Result<Vec<(String, Value)>, Failure> {
    pairs
        .iter()
        .map(|p| {
            let (k, v) = p.split_once('=').ok_or_else(|| io(format!("expected KEY=VALUE, got {p:?}")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            Ok((k.to_string(), value))
        })
        .collect()
}

fn load_log(path: &Path) -> Result<EventLog, Failure> {
    EventLog::load(path).map_err(|e| io(format!("{}: {e}", path.display())))
}

fn open_pack(spec: &str) -> Result<Pack, Failure> {
    Pack::open(spec).map_err(io)
}

/// The explicit `--pack`, or the pack named in the log's `pack.loaded`.
fn pack_for(log: &EventLog, explicit: Option<&str>) -> Result<Pack, Failure> {
    match explicit {
        Some(p) => open_pack(p),
        None => Pack::for_log(log).map_err(|e| io(format!("{e}; pass --pack"))),
    }
}

fn save(outcome: &RunOutcome, path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    outcome.log.save(path).map_err(|e| io(format!("{}: {e}", path.display())))
}

/// Prints the summary and picks the exit code of a finished run.
fn finish_run(outcome: &RunOutcome, path: &Path) -> CmdResult {
    save(outcome, path)?;
    println!("{}", outcome.report);
    println!("log          {}", path.display());
    if let Some(b) = outcome.report.halted() {
        eprintln!("halted: {b}");
        return Ok(EXIT_BUDGET);
    }
    if outcome.report.fixture_misses > 0 {
        for e in outcome.log.events().iter().filter(|e| e.kind == types::LLM_FAILED) {
            eprintln!("{}: {}", e.id, e.payload.get("error").and_then(Value::as_str).unwrap_or_default());
        }
        return Ok(EXIT_FIXTURE_MISS);
    }
    Ok(0)
}

fn quickstart(out: &Path, budget: &[String]) -> CmdResult {
    let pack = Pack::locate("diligence").map_err(io)?;
    let outcome = pack.quickstart(&parse_pairs(budget)?).map_err(pack_failure)?;
    finish_run(&outcome, &out.join("quickstart.jsonl"))
}

fn run(pack: &str, run: &str, out: &Path, budget: &[String]) -> CmdResult {
    let pack = open_pack(pack)?;
    let runtime = pack.runtime().map_err(io)?;
    let mut options = pack.options().map_err(io)?;
    for (k, v) in parse_pairs(budget)? {
        options.budget.set(&k, &v).map_err(io)?;
    }
    let mut provider = pack.provider();
    let outcome = runtime.execute(run, &pack.script(), &mut provider, options).map_err(run_failure)?;
    finish_run(&outcome, &out.join(format!("{run}.jsonl")))
}

/// `out` may be a file or an existing directory; by default the new log
/// goes next to the one it came from.
fn output_path(out: Option<&Path>, source: &Path, run: &str) -> PathBuf {
    let name = format!("{run}.jsonl");
    match out {
        Some(dir) if dir.is_dir() => dir.join(name),
        Some(file) => file.to_path_buf(),
        None => source.with_file_name(name),
    }
}

fn replay_cmd(path: &Path, strict: bool, pack: Option<&str>, out: Option<&Path>) -> CmdResult {
    let record = load_log(path)?;
    let pack = pack_for(&record, pack)?;
    let runtime = pack.runtime().map_err(io)?;
    if strict {
        let outcome = replay::replay_strict(&runtime, &record).map_err(run_failure)?;
        println!(
            "strict replay ok: {} events reproduced, {} live calls, {} tool executions",
            outcome.report.events, outcome.report.provider_invocations, outcome.report.tool_executions
        );
        return Ok(0);
    }
    let run = format!("{}-replay", record.run());
    let mut provider = pack.provider();
    let outcome = replay::replay_permissive(&runtime, &record, run.as_str(), &mut provider).map_err(run_failure)?;
    let target = output_path(out, path, &run);
    save(&outcome, &target)?;
    match outcome.report.diverged_at {
        None => println!("permissive replay: no fresh events"),
        Some(seq) => println!("permissive replay: {} fresh events from seq {seq}", outcome.report.fresh_events),
    }
    println!("live calls   {}", outcome.report.provider_invocations);
    println!("log          {}", target.display());
    Ok(0)
}

fn fork_cmd(
    path: &Path,
    at: u64,
    overrides: &[String],
    run: Option<&str>,
    out: Option<&Path>,
    pack: Option<&str>,
) -> CmdResult {
    let parent = load_log(path)?;
    let pack = pack_for(&parent, pack)?;
    let runtime = pack.runtime().map_err(io)?;
    let run = run.map(str::to_string).unwrap_or_else(|| format!("{}-fork-{at}", parent.run()));
    let spec = ForkSpec { run: run.as_str().into(), cutoff: at, overrides: parse_pairs(overrides)? };
    let mut provider = pack.provider();
    let outcome = replay::fork(&runtime, &parent, &spec, &mut provider).map_err(run_failure)?;
    let target = output_path(out, path, &run);
    println!("fork of {} at seq {at}", parent.run());
    println!("prefix calls {}", outcome.report.prefix_provider_invocations);
    println!("live calls   {}", outcome.report.provider_invocations);
    finish_run(&outcome, &target)
}

fn diff_cmd(a: &Path, b: &Path, report: Option<&Path>) -> CmdResult {
    let (la, lb) = (load_log(a)?, load_log(b)?);
    let diff = replay::structural_diff(&la, &lb).map_err(|e| match e {
        DiffError::UnrelatedRuns { .. } => Failure::new(EXIT_UNRELATED, e),
        other => io(other),
    })?;
    println!("{diff}");
    let target = report.map(Path::to_path_buf).unwrap_or_else(|| b.with_extension("diff.json"));
    std::fs::write(&target, diff.to_canonical().as_bytes()).map_err(io)?;
    println!("report       {}", target.display());
    Ok(0)
}

fn parse_event_id(s: &str) -> Result<EventId, Failure> {
    let (run, seq) = s.rsplit_once('#').ok_or_else(|| io(format!("expected RUN#SEQ, got {s:?}")))?;
    let seq = seq.parse().map_err(|_| io(format!("bad seq in {s:?}")))?;
    Ok(EventId::new(run, seq))
}

fn lineage_cmd(path: &Path, object: Option<&str>, event: Option<&str>) -> CmdResult {
    let log = load_log(path)?;
    let target = match (object, event) {
        (Some(o), _) => LineageTarget::Object(ObjectId::new(o)),
        (None, Some(e)) => LineageTarget::Event(parse_event_id(e)?),
        (None, None) => return Err(io("pass --object or --event")),
    };
    let chain = replay::lineage(&log, &target).map_err(|e| match e {
        LineageError::UnknownTarget(_) => Failure::new(EXIT_UNKNOWN_TARGET, e),
        other => io(other),
    })?;
    println!("{chain}");
    Ok(0)
}

fn log_cmd(path: &Path, kind: Option<&str>, stats: bool) -> CmdResult {
    let log = load_log(path)?;
    println!("{}", log.header_line());
    if stats {
        let mut counts = std::collections::BTreeMap::new();
        for e in log.events() {
            *counts.entry(e.kind.as_str()).or_insert(0u64) += 1;
        }
        for (k, n) in counts {
            println!("{n:>6}  {k}");
        }
        return Ok(0);
    }
    for e in log.events().iter().filter(|e| kind.is_none_or(|k| e.kind == k)) {
        let cause = e.caused_by.as_ref().map_or("-".to_string(), |c| c.seq.to_string());
        println!("{:>5} <{:>5}  {:<18} {:<22} {}", e.id.seq, cause, e.kind, e.actor, e.id.run);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Quickstart { out, budget } => quickstart(out, budget),
        Command::Run { pack, run: name, out, budget } => run(pack, name, out, budget),
        Command::Replay { log, strict, pack, out } => replay_cmd(log, *strict, pack.as_deref(), out.as_deref()),
        Command::Fork { log, at, overrides, run, out, pack } => {
            fork_cmd(log, *at, overrides, run.as_deref(), out.as_deref(), pack.as_deref())
        }
        Command::Diff { a, b, report } => diff_cmd(a, b, report.as_deref()),
        Command::Lineage { log, object, event } => lineage_cmd(log, object.as_deref(), event.as_deref()),
        Command::Log { log, kind, stats } => log_cmd(log, kind.as_deref(), *stats),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
