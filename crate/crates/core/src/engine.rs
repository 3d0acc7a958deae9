//! Turns syscall events into verdicts.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::audit::{AuditLog, AuditVerdict, Mode, ViolationRecord};
use crate::error::{ClassificationError, EngineError};
use crate::event::{OpenAccess, SyscallEvent, TaskId};
use crate::mapping::MappingTable;
use crate::promise::{Promise, PromiseSet};
use crate::registry::{DeclareOutcome, DeclareRequest, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Kill,
    LogOnly,
}

impl Verdict {
    pub const fn as_str(self) -> &'static str {
        match self {
            Verdict::Allow => "allow",
            Verdict::Kill => "kill",
            Verdict::LogOnly => "log_only",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    /// No sandbox for the calling thread.
    Unsandboxed,
    /// The syscall needs no promise.
    Unmapped,
    /// Every required promise is granted.
    Granted,
    /// A required promise is missing.
    Violation,
    /// The syscall's context could not be decoded.
    Decode,
}

impl Reason {
    pub const fn as_str(self) -> &'static str {
        match self {
            Reason::Unsandboxed => "unsandboxed",
            Reason::Unmapped => "unmapped",
            Reason::Granted => "granted",
            Reason::Violation => "violation",
            Reason::Decode => "decode",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kill and log-only decisions always name a promise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub promise: Option<Promise>,
    pub reason: Reason,
}

impl Decision {
    pub const fn allow(reason: Reason, promise: Option<Promise>) -> Decision {
        Decision {
            verdict: Verdict::Allow,
            promise,
            reason,
        }
    }

    fn deny(complain: bool, promise: Promise, reason: Reason) -> Decision {
        Decision {
            verdict: if complain {
                Verdict::LogOnly
            } else {
                Verdict::Kill
            },
            promise: Some(promise),
            reason,
        }
    }

    pub fn is_kill(&self) -> bool {
        self.verdict == Verdict::Kill
    }
}

/// Terminate a whole process. The offending thread is recorded for logs;
/// the directive always targets the thread group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillDirective {
    pub tgid: u32,
    pub tid: u32,
    pub promise: Promise,
}

/// The directive for a kill decision; `None` for anything else.
pub fn kill_semantics(event: &SyscallEvent, decision: &Decision) -> Option<KillDirective> {
    match (decision.verdict, decision.promise) {
        (Verdict::Kill, Some(promise)) => Some(KillDirective {
            tgid: event.tgid,
            tid: event.tid,
            promise,
        }),
        _ => None,
    }
}

/// Promises a complain-mode thread used during its lifetime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningReport {
    pub name: String,
    pub tid: u32,
    pub tgid: u32,
    pub used: PromiseSet,
}

/// All promises an event needs. Read-write opens need both path promises
/// even though the table only lists `wpath` for them.
pub fn required_set(
    mapping: &MappingTable,
    event: &SyscallEvent,
) -> Result<PromiseSet, ClassificationError> {
    let Some(promise) = mapping.required_promise(event)? else {
        return Ok(PromiseSet::EMPTY);
    };
    let mut set = PromiseSet::from(promise);
    if event.context.open_access == Some(OpenAccess::ReadWrite) {
        set.insert(Promise::Rpath);
    }
    Ok(set)
}

#[derive(Debug, Default, Clone, Copy)]
struct LearningSlot {
    used: PromiseSet,
    frozen: bool,
}

#[derive(Debug)]
pub struct Engine {
    mapping: Arc<MappingTable>,
    registry: Registry,
    audit: AuditLog,
    learning: Mutex<HashMap<TaskId, LearningSlot>>,
}

impl Engine {
    pub fn new(mapping: Arc<MappingTable>, registry: Registry, audit: AuditLog) -> Engine {
        Engine {
            mapping,
            registry,
            audit,
            learning: Mutex::default(),
        }
    }

    /// Engine over the bundled table with default registry and log.
    pub fn with_mapping(mapping: Arc<MappingTable>) -> Engine {
        Engine::new(mapping, Registry::default(), AuditLog::default())
    }

    pub fn mapping(&self) -> &MappingTable {
        &self.mapping
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn slots(&self) -> std::sync::MutexGuard<'_, HashMap<TaskId, LearningSlot>> {
        self.learning.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// The verdict alone: no learning, no logging.
    pub fn decide(&self, event: &SyscallEvent) -> Result<Decision, ClassificationError> {
        let Some((granted, complain)) = self.registry.policy(event.task()) else {
            return Ok(Decision::allow(Reason::Unsandboxed, None));
        };
        decide_with(&self.mapping, event, granted, complain).map(|(d, _)| d)
    }

    /// Decides, accumulates learning for complain-mode threads and logs
    /// every kill or log-only verdict.
    pub fn evaluate(&self, event: &SyscallEvent) -> Result<Decision, EngineError> {
        let task = event.task();
        let Some((granted, complain)) = self.registry.policy(task) else {
            return Ok(Decision::allow(Reason::Unsandboxed, None));
        };
        let (decision, required) = decide_with(&self.mapping, event, granted, complain)?;
        if complain && !required.is_empty() {
            self.accumulate(task, required);
        }
        self.log_decision(event, &decision)?;
        Ok(decision)
    }

    /// Verdict for a mapped syscall whose context could not be decoded.
    /// Allowed only when every promise the syscall could need is granted.
    pub fn evaluate_undecodable(
        &self,
        task: TaskId,
        syscall: &str,
    ) -> Result<Decision, EngineError> {
        let Some((granted, complain)) = self.registry.policy(task) else {
            return Ok(Decision::allow(Reason::Unsandboxed, None));
        };
        let candidates = self.mapping.candidates(syscall);
        if candidates.is_empty() {
            return Ok(Decision::allow(Reason::Unmapped, None));
        }
        self.evaluate_opaque(task, syscall, candidates, granted, complain)
    }

    /// Verdict for a syscall that cannot be classified at all, such as one
    /// issued through a foreign syscall ABI. Every promise is a candidate.
    pub fn evaluate_foreign(&self, task: TaskId, syscall: &str) -> Result<Decision, EngineError> {
        let Some((granted, complain)) = self.registry.policy(task) else {
            return Ok(Decision::allow(Reason::Unsandboxed, None));
        };
        self.evaluate_opaque(task, syscall, PromiseSet::FULL, granted, complain)
    }

    fn evaluate_opaque(
        &self,
        task: TaskId,
        syscall: &str,
        candidates: PromiseSet,
        granted: PromiseSet,
        complain: bool,
    ) -> Result<Decision, EngineError> {
        if complain {
            self.accumulate(task, candidates);
        }
        let decision = match candidates.difference(granted).first() {
            None => Decision::allow(Reason::Granted, candidates.first()),
            Some(missing) => Decision::deny(complain, missing, Reason::Decode),
        };
        self.log_decision(&SyscallEvent::new(task.tid, task.tgid, syscall), &decision)?;
        Ok(decision)
    }

    fn accumulate(&self, task: TaskId, required: PromiseSet) {
        let mut slots = self.slots();
        let slot = slots.entry(task).or_default();
        if !slot.frozen {
            slot.used = slot.used.union(required);
        }
    }

    fn log_decision(&self, event: &SyscallEvent, decision: &Decision) -> Result<(), EngineError> {
        let (mode, verdict) = match decision.verdict {
            Verdict::Allow => return Ok(()),
            Verdict::Kill => (Mode::Enforce, AuditVerdict::Killed),
            Verdict::LogOnly => (Mode::Complain, AuditVerdict::Logged),
        };
        let name = self
            .registry
            .lookup(event.tid, event.tgid)
            .map(|e| e.name.to_string())
            .unwrap_or_default();
        let promise = decision.promise.map(PromiseSet::from).unwrap_or_default();
        self.audit.emit(ViolationRecord::new(
            name,
            event.tid,
            event.tgid,
            mode,
            event.syscall.clone(),
            promise,
            verdict,
        ))?;
        Ok(())
    }

    /// Declares a thread's sandbox, logging a warning when the declaration
    /// has no effect or the label was shortened.
    pub fn declare(&self, req: DeclareRequest) -> Result<DeclareOutcome, EngineError> {
        let attempted = req.promises;
        let outcome = self.registry.declare_promises(req)?;
        match &outcome {
            DeclareOutcome::Declared {
                entry,
                name_truncated,
            } => {
                self.slots().remove(&entry.task());
                if *name_truncated {
                    self.audit.emit(ViolationRecord::new(
                        entry.name.to_string(),
                        entry.tid,
                        entry.tgid,
                        Mode::Warn,
                        "debug",
                        entry.promises,
                        AuditVerdict::Truncated,
                    ))?;
                }
            }
            DeclareOutcome::AlreadyDeclared { existing } => {
                self.audit.emit(ViolationRecord::new(
                    existing.name.to_string(),
                    existing.tid,
                    existing.tgid,
                    Mode::Warn,
                    "promises",
                    attempted,
                    AuditVerdict::Ignored,
                ))?;
            }
        }
        Ok(outcome)
    }

    /// Freezes and returns the learning report of a complain-mode thread.
    /// Later events for the task are no longer accumulated.
    pub fn finalize_learning(&self, tid: u32, tgid: u32) -> Result<LearningReport, EngineError> {
        let task = TaskId::new(tid, tgid);
        let entry = self
            .registry
            .lookup(tid, tgid)
            .filter(|e| e.complain)
            .ok_or(EngineError::NoLearningEntry { tid, tgid })?;
        let (used, newly_frozen) = {
            let mut slots = self.slots();
            let slot = slots.entry(task).or_default();
            let newly = !slot.frozen;
            slot.frozen = true;
            (slot.used, newly)
        };
        let report = LearningReport {
            name: entry.label(),
            tid,
            tgid,
            used,
        };
        if newly_frozen {
            self.audit.emit(ViolationRecord::new(
                entry.name.to_string(),
                tid,
                tgid,
                Mode::LearnExit,
                "exit",
                used,
                AuditVerdict::Learned,
            ))?;
        }
        Ok(report)
    }

    /// A thread exited: report its learning (complain mode only) and drop
    /// its sandbox.
    pub fn task_exit(&self, tid: u32, tgid: u32) -> Result<Option<LearningReport>, EngineError> {
        let report = match self.registry.lookup(tid, tgid) {
            Some(e) if e.complain => Some(self.finalize_learning(tid, tgid)?),
            _ => None,
        };
        self.registry.remove_task(tid, tgid);
        self.slots().remove(&TaskId::new(tid, tgid));
        Ok(report)
    }

    /// A process exited or was killed: report learning for its remaining
    /// complain-mode threads in declaration order and clear its state.
    pub fn process_exit(&self, tgid: u32) -> Result<Vec<LearningReport>, EngineError> {
        let mut reports = Vec::new();
        for entry in self.registry.entries_of(tgid) {
            if entry.complain {
                reports.push(self.finalize_learning(entry.tid, entry.tgid)?);
            }
        }
        self.registry.process_exit(tgid);
        self.slots().retain(|t, _| t.tgid != tgid);
        Ok(reports)
    }
}

/// Core decision rule shared by the engine paths. Returns the decision and
/// the full required set.
fn decide_with(
    mapping: &MappingTable,
    event: &SyscallEvent,
    granted: PromiseSet,
    complain: bool,
) -> Result<(Decision, PromiseSet), ClassificationError> {
    let required = required_set(mapping, event)?;
    let decision = if required.is_empty() {
        Decision::allow(Reason::Unmapped, None)
    } else {
        match required.difference(granted).first() {
            None => Decision::allow(Reason::Granted, mapping.required_promise(event)?),
            Some(missing) => Decision::deny(complain, missing, Reason::Violation),
        }
    };
    Ok((decision, required))
}
