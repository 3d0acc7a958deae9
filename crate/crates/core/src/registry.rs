//! Which processes opted in and which threads are sandboxed.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use crate::error::RegistryError;
use crate::event::TaskId;
use crate::promise::PromiseSet;

/// Longest debug label kept, in bytes.
pub const MAX_NAME_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryConfig {
    pub max_processes: usize,
    pub max_threads: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            max_processes: 1024,
            max_threads: 4096,
        }
    }
}

/// Sandbox state of one declared thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxEntry {
    pub tid: u32,
    pub tgid: u32,
    pub promises: PromiseSet,
    pub name: Arc<str>,
    pub complain: bool,
    pub debug: bool,
    pub declared: bool,
    /// Registry-wide declaration order.
    pub serial: u64,
}

impl SandboxEntry {
    pub fn task(&self) -> TaskId {
        TaskId::new(self.tid, self.tgid)
    }

    /// Name for logs: the debug label, or `tid:<tid>` when none was given.
    pub fn label(&self) -> String {
        label_for(&self.name, self.tid)
    }
}

pub fn label_for(name: &str, tid: u32) -> String {
    if name.is_empty() {
        format!("tid:{tid}")
    } else {
        name.to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessRegistration {
    pub tgid: u32,
    pub registered_at: Instant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclareRequest {
    pub tid: u32,
    pub tgid: u32,
    pub promises: PromiseSet,
    pub name: String,
    pub debug: bool,
    pub complain: bool,
}

impl DeclareRequest {
    pub fn new(tid: u32, tgid: u32, promises: PromiseSet) -> DeclareRequest {
        DeclareRequest {
            tid,
            tgid,
            promises,
            name: String::new(),
            debug: false,
            complain: false,
        }
    }

    #[must_use]
    pub fn named(mut self, name: impl Into<String>) -> DeclareRequest {
        self.name = name.into();
        self.debug = !self.name.is_empty();
        self
    }

    #[must_use]
    pub fn complain(mut self, complain: bool) -> DeclareRequest {
        self.complain = complain;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeclareOutcome {
    Declared {
        entry: SandboxEntry,
        name_truncated: bool,
    },
    /// The thread already declared; its promises are unchanged.
    AlreadyDeclared { existing: SandboxEntry },
}

#[derive(Debug, Default)]
struct Inner {
    processes: HashMap<u32, ProcessRegistration>,
    threads: HashMap<TaskId, SandboxEntry>,
    next_serial: u64,
}

/// Thread-safe registry keyed by (tgid, tid).
#[derive(Debug, Default)]
pub struct Registry {
    config: RegistryConfig,
    inner: RwLock<Inner>,
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Registry {
        Registry {
            config,
            inner: RwLock::default(),
        }
    }

    pub fn config(&self) -> RegistryConfig {
        self.config
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Marks a process as using sandboxes. Idempotent.
    pub fn register_process(&self, tgid: u32) -> Result<(), RegistryError> {
        if tgid == 0 {
            return Err(RegistryError::InvalidId { tid: 0, tgid });
        }
        let mut inner = self.write();
        if inner.processes.contains_key(&tgid) {
            return Ok(());
        }
        if inner.processes.len() >= self.config.max_processes {
            return Err(RegistryError::ProcessCapacity(self.config.max_processes));
        }
        inner.processes.insert(
            tgid,
            ProcessRegistration {
                tgid,
                registered_at: Instant::now(),
            },
        );
        Ok(())
    }

    pub fn is_registered(&self, tgid: u32) -> bool {
        self.read().processes.contains_key(&tgid)
    }

    pub fn registration(&self, tgid: u32) -> Option<ProcessRegistration> {
        self.read().processes.get(&tgid).copied()
    }

    /// Creates the thread's sandbox. A thread declares at most once; later
    /// calls leave the first declaration in place.
    pub fn declare_promises(&self, req: DeclareRequest) -> Result<DeclareOutcome, RegistryError> {
        let task = TaskId::new(req.tid, req.tgid);
        if !task.is_valid() {
            return Err(RegistryError::InvalidId {
                tid: req.tid,
                tgid: req.tgid,
            });
        }
        let mut inner = self.write();
        if !inner.processes.contains_key(&req.tgid) {
            return Err(RegistryError::Unregistered(req.tgid));
        }
        if let Some(existing) = inner.threads.get(&task) {
            return Ok(DeclareOutcome::AlreadyDeclared {
                existing: existing.clone(),
            });
        }
        if inner.threads.len() >= self.config.max_threads {
            return Err(RegistryError::ThreadCapacity(self.config.max_threads));
        }
        let (name, name_truncated) = truncate_name(&req.name);
        let serial = inner.next_serial;
        inner.next_serial += 1;
        let entry = SandboxEntry {
            tid: req.tid,
            tgid: req.tgid,
            promises: req.promises,
            name: name.into(),
            complain: req.complain,
            debug: req.debug,
            declared: true,
            serial,
        };
        inner.threads.insert(task, entry.clone());
        Ok(DeclareOutcome::Declared {
            entry,
            name_truncated,
        })
    }

    pub fn lookup(&self, tid: u32, tgid: u32) -> Option<SandboxEntry> {
        self.read().threads.get(&TaskId::new(tid, tgid)).cloned()
    }

    /// Granted promises and complain flag, without cloning the entry.
    pub fn policy(&self, task: TaskId) -> Option<(PromiseSet, bool)> {
        self.read()
            .threads
            .get(&task)
            .map(|e| (e.promises, e.complain))
    }

    /// Drops a thread's sandbox. Removing an unknown task is a no-op.
    pub fn remove_task(&self, tid: u32, tgid: u32) -> Option<SandboxEntry> {
        self.write().threads.remove(&TaskId::new(tid, tgid))
    }

    /// Clears the registration and every sandbox of the process. Returned
    /// entries are in declaration order.
    pub fn process_exit(&self, tgid: u32) -> Vec<SandboxEntry> {
        let mut inner = self.write();
        inner.processes.remove(&tgid);
        let tasks: Vec<TaskId> = inner
            .threads
            .keys()
            .filter(|t| t.tgid == tgid)
            .copied()
            .collect();
        let mut removed: Vec<SandboxEntry> = tasks
            .iter()
            .filter_map(|t| inner.threads.remove(t))
            .collect();
        removed.sort_by_key(|e| e.serial);
        removed
    }

    /// Sandboxes of one process in declaration order.
    pub fn entries_of(&self, tgid: u32) -> Vec<SandboxEntry> {
        let mut out: Vec<SandboxEntry> = self
            .read()
            .threads
            .values()
            .filter(|e| e.tgid == tgid)
            .cloned()
            .collect();
        out.sort_by_key(|e| e.serial);
        out
    }

    /// All sandboxes in declaration order.
    pub fn entries(&self) -> Vec<SandboxEntry> {
        let mut out: Vec<SandboxEntry> = self.read().threads.values().cloned().collect();
        out.sort_by_key(|e| e.serial);
        out
    }

    pub fn process_count(&self) -> usize {
        self.read().processes.len()
    }

    pub fn thread_count(&self) -> usize {
        self.read().threads.len()
    }

    pub fn threads_of(&self, tgid: u32) -> usize {
        self.read()
            .threads
            .keys()
            .filter(|t| t.tgid == tgid)
            .count()
    }
}

fn truncate_name(name: &str) -> (String, bool) {
    if name.len() <= MAX_NAME_LEN {
        return (name.to_owned(), false);
    }
    let mut end = MAX_NAME_LEN;
    while !name.is_char_boundary(end) {
        end -= 1;
    }
    (name[..end].to_owned(), true)
}
