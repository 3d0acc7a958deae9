use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use threadbox::bench::{self, BenchContext, SuiteRegistry};
use threadbox::live::{self, LiveError, SuperviseOptions};
use threadbox_core::audit::parse_line;
use threadbox_core::report::FormatRegistry;
use threadbox_core::{
    learn_from_trace, load_mapping_table, parse_trace_with, replay, MappingTable, Mode,
    ReplayOptions,
};

const EXIT_USAGE: u8 = 2;
const EXIT_KILLED: u8 = 3;
const EXIT_CAPABILITY: u8 = 4;
const EXIT_NOT_FOUND: u8 = 127;

/// Per-thread promise sandboxing: replay traces, learn policies and
/// supervise live processes.
#[derive(Parser)]
#[command(name = "threadbox", version)]
struct Cli {
    /// Append audit lines to this file.
    #[arg(long, global = true, value_name = "FILE")]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a trace and report every decision and kill point.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// text or jsonl
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Print the least promise set used by each complain-mode sandbox.
    Learn {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Run a command under live supervision.
    Run {
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Write the run as a replayable trace.
        #[arg(long, value_name = "FILE")]
        record: Option<PathBuf>,
        #[arg(required = true, last = true)]
        command: Vec<String>,
    },
    /// Print benchmark tables.
    Bench {
        /// decisions or syscalls
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Validate a mapping table.
    CheckMapping {
        #[arg(long)]
        mapping: PathBuf,
    },
    /// Filter audit log lines.
    Logs {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        tgid: Option<u32>,
        #[arg(long)]
        mode: Option<String>,
    },
    #[command(hide = true)]
    BenchWorker {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        sandbox: bool,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(usage)
}

fn mapping(path: Option<&Path>) -> Result<Arc<MappingTable>, Failure> {
    match path {
        None => Ok(MappingTable::bundled()),
        Some(p) => load_mapping_table(&read(p)?)
            .map(Arc::new)
            .with_context(|| format!("invalid mapping table {}", p.display()))
            .map_err(usage),
    }
}

fn open_log(path: &Path) -> Result<File, Failure> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("cannot open log {}", path.display()))
        .map_err(runtime)
}

fn cmd_replay(
    trace: &Path,
    map: Option<&Path>,
    format: &str,
    log: Option<&Path>,
) -> Result<u8, Failure> {
    let formats = FormatRegistry::default();
    let name = if format == "json-lines" {
        "jsonl"
    } else {
        format
    };
    let fmt = formats.get(name).ok_or_else(|| {
        usage(anyhow!(
            "unknown format `{format}` (expected one of: {})",
            formats.names().join(", ")
        ))
    })?;
    let mapping = mapping(map)?;
    let lines = parse_trace_with(&read(trace)?, &mapping)
        .with_context(|| format!("{}", trace.display()))
        .map_err(usage)?;
    let result = replay(&lines, mapping, ReplayOptions::default())
        .with_context(|| format!("{}", trace.display()))
        .map_err(usage)?;
    let mut out = io::stdout().lock();
    fmt.render(&result, &mut out).map_err(runtime)?;
    out.flush().map_err(runtime)?;
    if let Some(p) = log {
        let mut f = open_log(p)?;
        for l in &result.log {
            writeln!(f, "{l}").map_err(runtime)?;
        }
    }
    Ok(if result.kill_count() > 0 {
        EXIT_KILLED
    } else {
        0
    })
}

fn cmd_learn(trace: &Path, map: Option<&Path>) -> Result<u8, Failure> {
    let mapping = mapping(map)?;
    let lines = parse_trace_with(&read(trace)?, &mapping)
        .with_context(|| format!("{}", trace.display()))
        .map_err(usage)?;
    let learned = learn_from_trace(&lines, mapping)
        .with_context(|| format!("{}", trace.display()))
        .map_err(usage)?;
    for policy in learned {
        println!("{policy}");
    }
    Ok(0)
}

fn cmd_run(
    map: Option<&Path>,
    record: Option<&Path>,
    argv: &[String],
    log: Option<&Path>,
) -> Result<u8, Failure> {
    let mut audit_sinks: Vec<Box<dyn Write + Send>> = vec![Box::new(io::stderr())];
    if let Some(p) = log {
        audit_sinks.push(Box::new(open_log(p)?));
    }
    let options = SuperviseOptions {
        mapping: mapping(map)?,
        audit_sinks,
    };
    let mut command = Command::new(&argv[0]);
    command.args(&argv[1..]);
    let outcome = match live::run(command, options) {
        Ok(o) => o,
        Err(e @ (LiveError::Capability(_) | LiveError::Unsupported(_))) => {
            return Err(Failure {
                code: EXIT_CAPABILITY,
                error: e.into(),
            })
        }
        Err(LiveError::Spawn(e)) if e.kind() == io::ErrorKind::NotFound => {
            return Err(Failure {
                code: EXIT_NOT_FOUND,
                error: anyhow!("{}: command not found", argv[0]),
            })
        }
        Err(e) => return Err(runtime(e)),
    };
    if let Some(p) = record {
        std::fs::write(p, &outcome.trace)
            .with_context(|| format!("cannot write {}", p.display()))
            .map_err(runtime)?;
    }
    Ok(outcome.exit_code().clamp(0, 255) as u8)
}

fn cmd_bench(mode: &str, iterations: usize, map: Option<&Path>) -> Result<u8, Failure> {
    let suites = SuiteRegistry::default();
    let suite = suites.get(mode).ok_or_else(|| {
        usage(anyhow!(
            "unknown bench mode `{mode}` (expected one of: {})",
            suites.names().join(", ")
        ))
    })?;
    let ctx = BenchContext {
        worker: std::env::current_exe().map_err(runtime)?,
        iterations,
        mapping: mapping(map)?,
    };
    let mut out = io::stdout().lock();
    suite.run(&ctx, &mut out).map_err(runtime)?;
    Ok(0)
}

fn cmd_check_mapping(path: &Path) -> Result<u8, Failure> {
    let table = mapping(Some(path))?;
    println!(
        "ok: {} rules over {} syscalls",
        table.rules().len(),
        table.len()
    );
    Ok(0)
}

fn cmd_logs(
    file: &Path,
    name: Option<&str>,
    tgid: Option<u32>,
    mode: Option<&str>,
) -> Result<u8, Failure> {
    let mode: Option<Mode> = mode
        .map(|m| m.parse().map_err(|()| usage(anyhow!("unknown mode `{m}`"))))
        .transpose()?;
    let text = read(file)?;
    let mut out = io::stdout().lock();
    for line in text.lines() {
        let Ok(p) = parse_line(line) else { continue };
        let keep = name.is_none_or(|n| n == p.label)
            && tgid.is_none_or(|t| t == p.tgid)
            && mode.is_none_or(|m| m == p.mode);
        if keep {
            writeln!(out, "{line}").map_err(runtime)?;
        }
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    let log = cli.log.as_deref();
    match cli.command {
        Cmd::Replay {
            trace,
            mapping,
            format,
        } => cmd_replay(&trace, mapping.as_deref(), &format, log),
        Cmd::Learn { trace, mapping } => cmd_learn(&trace, mapping.as_deref()),
        Cmd::Run {
            mapping,
            record,
            command,
        } => cmd_run(mapping.as_deref(), record.as_deref(), &command, log),
        Cmd::Bench {
            mode,
            iterations,
            mapping,
        } => cmd_bench(&mode, iterations, mapping.as_deref()),
        Cmd::CheckMapping { mapping } => cmd_check_mapping(&mapping),
        Cmd::Logs {
            file,
            name,
            tgid,
            mode,
        } => cmd_logs(&file, name.as_deref(), tgid, mode.as_deref()),
        Cmd::BenchWorker {
            out,
            iterations,
            sandbox,
        } => bench::run_worker(&out, iterations, sandbox)
            .map(|()| 0)
            .map_err(runtime),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("threadbox: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
