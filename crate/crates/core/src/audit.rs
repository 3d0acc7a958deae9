//! Violation and learning log.
//!
//! Every record renders as one line:
//!
//! ```text
//! threadbox: [<name>] tid=<tid> tgid=<tgid> mode=<mode> syscall=<syscall> promise=<promise> verdict=<verdict>
//! ```
//!
//! `<name>` is the sandbox's debug label or `tid:<tid>`. `<promise>` is a
//! promise string and may contain spaces (learn-exit records carry the whole
//! used set). Lines are kept in a bounded in-memory ring and copied to any
//! attached sinks.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::AuditError;
use crate::promise::{parse_promises, PromiseSet};
use crate::registry::label_for;

pub const DEFAULT_RING_CAPACITY: usize = 8192;

const PREFIX: &str = "threadbox: [";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Enforce,
    Complain,
    LearnExit,
    Warn,
}

impl Mode {
    pub const fn as_str(self) -> &'static str {
        match self {
            Mode::Enforce => "enforce",
            Mode::Complain => "complain",
            Mode::LearnExit => "learn-exit",
            Mode::Warn => "warn",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        [Mode::Enforce, Mode::Complain, Mode::LearnExit, Mode::Warn]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditVerdict {
    /// enforce: the process was killed.
    Killed,
    /// complain: the use was logged and allowed.
    Logged,
    /// learn-exit: summary of promises used by a finished thread.
    Learned,
    /// warn: a control write had no effect.
    Ignored,
    /// warn: a debug label was shortened.
    Truncated,
}

impl AuditVerdict {
    pub const fn as_str(self) -> &'static str {
        match self {
            AuditVerdict::Killed => "killed",
            AuditVerdict::Logged => "logged",
            AuditVerdict::Learned => "learned",
            AuditVerdict::Ignored => "ignored",
            AuditVerdict::Truncated => "truncated",
        }
    }

    fn parse(s: &str) -> Option<AuditVerdict> {
        [
            AuditVerdict::Killed,
            AuditVerdict::Logged,
            AuditVerdict::Learned,
            AuditVerdict::Ignored,
            AuditVerdict::Truncated,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
    }

    /// The verdicts a record of `mode` may carry.
    pub fn consistent_with(self, mode: Mode) -> bool {
        matches!(
            (mode, self),
            (Mode::Enforce, AuditVerdict::Killed)
                | (Mode::Complain, AuditVerdict::Logged)
                | (Mode::LearnExit, AuditVerdict::Learned)
                | (Mode::Warn, AuditVerdict::Ignored | AuditVerdict::Truncated)
        )
    }
}

impl fmt::Display for AuditVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    /// Time since the log was created; stamped by [`AuditLog::emit`].
    pub timestamp: Duration,
    /// Raw debug label, possibly empty.
    pub name: String,
    pub tid: u32,
    pub tgid: u32,
    pub mode: Mode,
    pub syscall: String,
    pub promise: PromiseSet,
    pub verdict: AuditVerdict,
}

impl ViolationRecord {
    pub fn new(
        name: impl Into<String>,
        tid: u32,
        tgid: u32,
        mode: Mode,
        syscall: impl Into<String>,
        promise: PromiseSet,
        verdict: AuditVerdict,
    ) -> ViolationRecord {
        ViolationRecord {
            timestamp: Duration::ZERO,
            name: name.into(),
            tid,
            tgid,
            mode,
            syscall: syscall.into(),
            promise,
            verdict,
        }
    }

    pub fn label(&self) -> String {
        sanitize(&label_for(&self.name, self.tid))
    }

    pub fn to_line(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ViolationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{PREFIX}{}] tid={} tgid={} mode={} syscall={} promise={} verdict={}",
            self.label(),
            self.tid,
            self.tgid,
            self.mode,
            self.syscall,
            self.promise,
            self.verdict
        )
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_control() { '?' } else { c })
        .collect()
}

/// Fields recovered from a log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLine {
    pub label: String,
    pub tid: u32,
    pub tgid: u32,
    pub mode: Mode,
    pub syscall: String,
    pub promise: PromiseSet,
    pub verdict: AuditVerdict,
}

/// Parses a line produced by [`ViolationRecord`]'s `Display`.
pub fn parse_line(line: &str) -> Result<ParsedLine, AuditError> {
    let bad = || AuditError::Parse(line.to_owned());
    let rest = line.strip_prefix(PREFIX).ok_or_else(bad)?;
    // Nothing after the label contains `]`, so the last `] tid=` ends it.
    let split = rest.rfind("] tid=").ok_or_else(bad)?;
    let label = rest[..split].to_owned();
    let fields = &rest[split + 2..];

    let (head, verdict) = fields.rsplit_once(" verdict=").ok_or_else(bad)?;
    let (head, promise) = head.rsplit_once(" promise=").ok_or_else(bad)?;
    let mut it = head.split(' ');
    let mut field = |key: &str| -> Result<String, AuditError> {
        let tok = it.next().ok_or_else(bad)?;
        tok.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .map(str::to_owned)
            .ok_or_else(bad)
    };
    let tid = field("tid")?.parse().map_err(|_| bad())?;
    let tgid = field("tgid")?.parse().map_err(|_| bad())?;
    let mode = field("mode")?.parse().map_err(|()| bad())?;
    let syscall = field("syscall")?;
    if it.next().is_some() {
        return Err(bad());
    }
    Ok(ParsedLine {
        label,
        tid,
        tgid,
        mode,
        syscall,
        promise: parse_promises(promise).map_err(|_| bad())?,
        verdict: AuditVerdict::parse(verdict).ok_or_else(bad)?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditFilter {
    pub name: Option<String>,
    pub tgid: Option<u32>,
    pub mode: Option<Mode>,
}

impl AuditFilter {
    pub fn name(name: impl Into<String>) -> AuditFilter {
        AuditFilter {
            name: Some(name.into()),
            ..Default::default()
        }
    }

    pub fn mode(mode: Mode) -> AuditFilter {
        AuditFilter {
            mode: Some(mode),
            ..Default::default()
        }
    }

    pub fn matches(&self, r: &ViolationRecord) -> bool {
        self.name
            .as_ref()
            .is_none_or(|n| *n == r.name || *n == r.label())
            && self.tgid.is_none_or(|t| t == r.tgid)
            && self.mode.is_none_or(|m| m == r.mode)
    }
}

type Sink = Box<dyn Write + Send>;

struct Inner {
    ring: VecDeque<ViolationRecord>,
    dropped: u64,
    sinks: Vec<Sink>,
}

pub struct AuditLog {
    start: Instant,
    capacity: usize,
    inner: Mutex<Inner>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.lock();
        f.debug_struct("AuditLog")
            .field("capacity", &self.capacity)
            .field("len", &inner.ring.len())
            .field("dropped", &inner.dropped)
            .field("sinks", &inner.sinks.len())
            .finish()
    }
}

impl Default for AuditLog {
    fn default() -> Self {
        AuditLog::with_capacity(DEFAULT_RING_CAPACITY)
    }
}

impl AuditLog {
    pub fn with_capacity(capacity: usize) -> AuditLog {
        AuditLog {
            start: Instant::now(),
            capacity: capacity.max(1),
            inner: Mutex::new(Inner {
                ring: VecDeque::new(),
                dropped: 0,
                sinks: Vec::new(),
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Copies every future line to `sink`.
    pub fn add_sink(&self, sink: impl Write + Send + 'static) {
        self.lock().sinks.push(Box::new(sink));
    }

    /// Stamps, stores and writes the record. The record stays in the ring
    /// even if a sink fails; the failure is returned to the caller.
    pub fn emit(&self, mut record: ViolationRecord) -> Result<String, AuditError> {
        record.timestamp = self.start.elapsed();
        let line = record.to_line();
        let mut inner = self.lock();
        if inner.ring.len() >= self.capacity {
            inner.ring.pop_front();
            inner.dropped += 1;
        }
        inner.ring.push_back(record);
        let mut failure = None;
        for sink in &mut inner.sinks {
            if let Err(e) = writeln!(sink, "{line}").and_then(|()| sink.flush()) {
                failure.get_or_insert(e);
            }
        }
        match failure {
            Some(e) => Err(AuditError::Sink(e)),
            None => Ok(line),
        }
    }

    /// Matching records, oldest first.
    pub fn query(&self, filter: &AuditFilter) -> Vec<ViolationRecord> {
        self.lock()
            .ring
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect()
    }

    pub fn records(&self) -> Vec<ViolationRecord> {
        self.lock().ring.iter().cloned().collect()
    }

    pub fn lines(&self) -> Vec<String> {
        self.lock()
            .ring
            .iter()
            .map(ViolationRecord::to_line)
            .collect()
    }

    /// Records evicted from the ring since creation.
    pub fn dropped(&self) -> u64 {
        self.lock().dropped
    }

    pub fn len(&self) -> usize {
        self.lock().ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
