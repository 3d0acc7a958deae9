//! Syscall events and the classification context attached to them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A thread identified the way the kernel does: tid alone is not unique
/// across processes, so the thread group id is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId {
    pub tgid: u32,
    pub tid: u32,
}

impl TaskId {
    pub const fn new(tid: u32, tgid: u32) -> TaskId {
        TaskId { tgid, tid }
    }

    pub const fn is_valid(self) -> bool {
        self.tid >= 1 && self.tgid >= 1
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tid={} tgid={}", self.tid, self.tgid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SockDomain {
    Inet,
    Unix,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpenAccess {
    Read,
    Write,
    ReadWrite,
}

impl SockDomain {
    pub const ALL: [SockDomain; 3] = [SockDomain::Inet, SockDomain::Unix, SockDomain::Other];

    pub const fn as_str(self) -> &'static str {
        match self {
            SockDomain::Inet => "inet",
            SockDomain::Unix => "unix",
            SockDomain::Other => "other",
        }
    }
}

impl OpenAccess {
    pub const ALL: [OpenAccess; 3] = [OpenAccess::Read, OpenAccess::Write, OpenAccess::ReadWrite];

    pub const fn as_str(self) -> &'static str {
        match self {
            OpenAccess::Read => "read",
            OpenAccess::Write => "write",
            OpenAccess::ReadWrite => "readwrite",
        }
    }
}

/// The three facts a mapping rule may branch on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContextKey {
    SockDomain,
    CloneIsThread,
    OpenAccess,
}

impl ContextKey {
    pub const ALL: [ContextKey; 3] = [
        ContextKey::SockDomain,
        ContextKey::CloneIsThread,
        ContextKey::OpenAccess,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            ContextKey::SockDomain => "sock_domain",
            ContextKey::CloneIsThread => "clone_is_thread",
            ContextKey::OpenAccess => "open_access",
        }
    }

    /// Every condition over this key; rules on one key must cover exactly
    /// this list.
    pub fn domain(self) -> Vec<Condition> {
        match self {
            ContextKey::SockDomain => SockDomain::ALL
                .into_iter()
                .map(Condition::SockDomain)
                .collect(),
            ContextKey::CloneIsThread => vec![
                Condition::CloneIsThread(true),
                Condition::CloneIsThread(false),
            ],
            ContextKey::OpenAccess => OpenAccess::ALL
                .into_iter()
                .map(Condition::OpenAccess)
                .collect(),
        }
    }

    pub fn parse_value(self, value: &str) -> Option<Condition> {
        self.domain().into_iter().find(|c| c.value_str() == value)
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextKey {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContextKey::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or(())
    }
}

/// `key=value` over one context field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    SockDomain(SockDomain),
    CloneIsThread(bool),
    OpenAccess(OpenAccess),
}

impl Condition {
    pub const fn key(self) -> ContextKey {
        match self {
            Condition::SockDomain(_) => ContextKey::SockDomain,
            Condition::CloneIsThread(_) => ContextKey::CloneIsThread,
            Condition::OpenAccess(_) => ContextKey::OpenAccess,
        }
    }

    pub const fn value_str(self) -> &'static str {
        match self {
            Condition::SockDomain(d) => d.as_str(),
            Condition::CloneIsThread(true) => "true",
            Condition::CloneIsThread(false) => "false",
            Condition::OpenAccess(a) => a.as_str(),
        }
    }

    /// `None` when the context lacks the key entirely.
    pub fn matches(self, ctx: &EventContext) -> Option<bool> {
        match self {
            Condition::SockDomain(d) => ctx.sock_domain.map(|v| v == d),
            Condition::CloneIsThread(t) => ctx.clone_is_thread.map(|v| v == t),
            Condition::OpenAccess(a) => ctx.open_access.map(|v| v == a),
        }
    }

    /// The context that satisfies exactly this condition.
    pub fn to_context(self) -> EventContext {
        let mut ctx = EventContext::default();
        ctx.set(self);
        ctx
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key(), self.value_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventContext {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sock_domain: Option<SockDomain>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clone_is_thread: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub open_access: Option<OpenAccess>,
}

impl EventContext {
    pub fn set(&mut self, cond: Condition) {
        match cond {
            Condition::SockDomain(d) => self.sock_domain = Some(d),
            Condition::CloneIsThread(t) => self.clone_is_thread = Some(t),
            Condition::OpenAccess(a) => self.open_access = Some(a),
        }
    }

    /// Present fields as conditions, in key order.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        if let Some(d) = self.sock_domain {
            out.push(Condition::SockDomain(d));
        }
        if let Some(t) = self.clone_is_thread {
            out.push(Condition::CloneIsThread(t));
        }
        if let Some(a) = self.open_access {
            out.push(Condition::OpenAccess(a));
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.conditions().is_empty()
    }
}

/// One observed syscall.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyscallEvent {
    pub tid: u32,
    pub tgid: u32,
    pub syscall: String,
    #[serde(default, skip_serializing_if = "EventContext::is_empty")]
    pub context: EventContext,
}

impl SyscallEvent {
    pub fn new(tid: u32, tgid: u32, syscall: impl Into<String>) -> SyscallEvent {
        SyscallEvent {
            tid,
            tgid,
            syscall: syscall.into(),
            context: EventContext::default(),
        }
    }

    #[must_use]
    pub fn with(mut self, cond: Condition) -> SyscallEvent {
        self.context.set(cond);
        self
    }

    pub fn task(&self) -> TaskId {
        TaskId::new(self.tid, self.tgid)
    }
}
