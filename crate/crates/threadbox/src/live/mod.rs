//! Live supervision of real processes.
//!
//! The supervisor launches the command traced, attaches every thread and
//! process it creates, and evaluates each syscall of a sandboxed thread
//! before the kernel runs it. Sandboxes are declared by the supervised
//! program itself over the control channel (see [`protocol`] and
//! [`client`]).

pub mod client;
pub mod control;
pub mod decode;
pub mod protocol;
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub mod syscalls;
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod tracer;

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use threadbox_core::{EngineError, KillDirective, LearningReport, MappingTable};

pub use control::LiveVerdict;
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub use tracer::Supervision;

/// Exit status reported for a process killed on a violation (128 + SIGKILL).
pub const KILL_EXIT_CODE: i32 = 137;

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error("live supervision is not supported on this platform ({0})")]
    Unsupported(&'static str),
    #[error("the host does not allow per-thread syscall tracing: {0}")]
    Capability(io::Error),
    #[error("cannot start command: {0}")]
    Spawn(io::Error),
    #[error("command did not start under tracing: {0}")]
    Start(String),
    #[error("control channel: {0}")]
    Control(io::Error),
    #[error("ptrace: {0}")]
    Trace(nix::Error),
    #[error("task {0} issued a syscall before it was attached; supervision aborted")]
    AttachRace(u32),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachState {
    /// Created, waiting for its first stop.
    Starting,
    Running,
}

/// A traced process as seen by the supervisor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisedProcess {
    pub tgid: u32,
    pub threads: BTreeMap<u32, AttachState>,
    pub control: PathBuf,
    pub no_new_privs_applied: BTreeMap<u32, bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Exited(i32),
    Signaled(i32),
}

impl ExitKind {
    /// Shell-style status: the exit code, or 128 plus the signal number.
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Exited(c) => c,
            ExitKind::Signaled(s) => 128 + s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// How the root process ended.
    pub status: ExitKind,
    pub kills: Vec<KillDirective>,
    /// Verdicts in evaluation order.
    pub verdicts: Vec<LiveVerdict>,
    /// The run in native trace format; replays to `verdicts`.
    pub trace: String,
    pub audit: Vec<String>,
    pub learning: Vec<LearningReport>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.root_killed() {
            KILL_EXIT_CODE
        } else {
            self.status.code()
        }
    }

    fn root_killed(&self) -> bool {
        !self.kills.is_empty() && self.status == ExitKind::Signaled(libc::SIGKILL)
    }
}

pub struct SuperviseOptions {
    pub mapping: Arc<MappingTable>,
    /// Receive every audit line as it is emitted.
    pub audit_sinks: Vec<Box<dyn Write + Send>>,
}

impl Default for SuperviseOptions {
    fn default() -> Self {
        SuperviseOptions {
            mapping: MappingTable::bundled(),
            audit_sinks: Vec::new(),
        }
    }
}

/// Launches `command` under supervision. The returned handle must be run
/// on the calling thread.
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub fn supervise(command: Command, options: SuperviseOptions) -> Result<Supervision, LiveError> {
    tracer::supervise(command, options)
}

/// Launches `command` under supervision and waits for it.
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub fn run(command: Command, options: SuperviseOptions) -> Result<RunOutcome, LiveError> {
    supervise(command, options)?.run()
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
pub fn run(_command: Command, _options: SuperviseOptions) -> Result<RunOutcome, LiveError> {
    Err(LiveError::Unsupported("requires x86_64 Linux"))
}

/// Whether this host lets a process trace its own children.
pub fn probe_support() -> Result<(), LiveError> {
    #[cfg(all(target_os = "linux", target_arch = "x86_64"))]
    {
        let program = ["/bin/true", "/usr/bin/true"]
            .into_iter()
            .find(|p| std::path::Path::new(p).exists())
            .ok_or(LiveError::Start("no /bin/true to probe with".into()))?;
        run(Command::new(program), SuperviseOptions::default()).map(|_| ())
    }
    #[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
    {
        Err(LiveError::Unsupported("requires x86_64 Linux"))
    }
}
