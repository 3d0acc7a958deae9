//! Per-thread, non-inherited, promise-based sandboxing.
//!
//! A thread declares once which of seven coarse promises it needs. Every
//! syscall it makes afterwards is classified against a mapping table and
//! either allowed, logged (complain mode) or answered by killing the whole
//! process. Threads that never declare, including threads and processes
//! spawned by a sandboxed thread, are not restricted.
//!
//! This crate holds the policy logic and a trace-replay backend. Live
//! enforcement against real processes lives in the `threadbox` crate.

pub mod audit;
pub mod engine;
pub mod error;
pub mod event;
pub mod mapping;
pub mod promise;
pub mod registry;
pub mod replay;
pub mod report;
pub mod trace;

pub use audit::{AuditFilter, AuditLog, AuditVerdict, Mode, ViolationRecord};
pub use engine::{
    kill_semantics, Decision, Engine, KillDirective, LearningReport, Reason, Verdict,
};
pub use error::{
    AuditError, ClassificationError, EngineError, MappingError, PromiseParseError, RegistryError,
    ReplayError, TraceParseError,
};
pub use event::{
    Condition, ContextKey, EventContext, OpenAccess, SockDomain, SyscallEvent, TaskId,
};
pub use mapping::{load_mapping_table, MappingRule, MappingTable, DEFAULT_MAPPING};
pub use promise::{parse_promises, promises_to_string, Promise, PromiseSet};
pub use registry::{DeclareOutcome, DeclareRequest, Registry, RegistryConfig, SandboxEntry};
pub use replay::{learn_from_trace, replay, LearnedPolicy, ReplayOptions, ReplayResult};
pub use trace::{parse_trace, parse_trace_with, render_trace, TraceKind, TraceLine};
