use std::io;

use thiserror::Error;

use crate::event::ContextKey;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromiseParseError {
    #[error("unknown promise `{0}`")]
    UnknownToken(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("mapping line {line}: {kind}")]
pub struct MappingError {
    pub line: usize,
    pub kind: MappingErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown promise `{0}`")]
    UnknownPromise(String),
    #[error("unknown context key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for context key `{key}`")]
    BadValue { key: String, value: String },
    #[error("duplicate rule for `{syscall}` (first defined on line {first_line})")]
    Duplicate { syscall: String, first_line: usize },
    #[error("rule for `{syscall}` overlaps the rule on line {first_line}")]
    Overlap { syscall: String, first_line: usize },
    #[error("rules for `{syscall}` do not cover {missing}")]
    Incomplete { syscall: String, missing: String },
}

/// A mapped syscall arrived without the context its rule needs. This is a
/// decoding bug in whatever produced the event.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syscall `{syscall}` requires context `{key}`")]
pub struct ClassificationError {
    pub syscall: String,
    pub key: ContextKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("invalid task id (tid={tid}, tgid={tgid})")]
    InvalidId { tid: u32, tgid: u32 },
    #[error("process capacity exhausted ({0} processes)")]
    ProcessCapacity(usize),
    #[error("thread capacity exhausted ({0} sandboxed threads)")]
    ThreadCapacity(usize),
    #[error("process {0} is not registered")]
    Unregistered(u32),
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit sink write failed: {0}")]
    Sink(#[from] io::Error),
    #[error("malformed audit line: {0}")]
    Parse(String),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Classification(#[from] ClassificationError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("no learning entry for tid={tid} tgid={tgid}")]
    NoLearningEntry { tid: u32, tgid: u32 },
}

#[derive(Debug, Error)]
#[error("trace line {line}: {kind}")]
pub struct TraceParseError {
    pub line: usize,
    pub kind: TraceErrorKind,
}

#[derive(Debug, Error)]
pub enum TraceErrorKind {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("unknown directive `@{0}`")]
    UnknownDirective(String),
    #[error("unknown context key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Promise(#[from] PromiseParseError),
    #[error(transparent)]
    MissingContext(#[from] ClassificationError),
    #[error("sequence number {0} is not strictly increasing")]
    Sequence(u64),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay aborted at seq {seq}: {source}")]
    Engine {
        seq: u64,
        #[source]
        source: EngineError,
    },
    #[error("trace has no complain-mode declarations to learn from")]
    NothingToLearn,
}
