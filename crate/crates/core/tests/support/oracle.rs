//! Hand-written reference for the default table: promise ids, categories
//! and the verdict rule, with no use of the crate's parser or engine.

#![allow(dead_code)]

use std::collections::BTreeSet;

pub const PROMISES: [&str; 7] = ["proc", "rpath", "wpath", "net", "id", "ipc", "threading"];

pub fn id(promise: &str) -> usize {
    PROMISES
        .iter()
        .position(|p| *p == promise)
        .expect("known promise")
}

const RPATH: &[&str] = &[
    "stat",
    "lstat",
    "newfstatat",
    "statx",
    "readlink",
    "readlinkat",
    "getdents",
    "getdents64",
];
const WPATH: &[&str] = &[
    "unlink",
    "unlinkat",
    "rename",
    "renameat",
    "renameat2",
    "mkdir",
    "mkdirat",
    "rmdir",
    "mknod",
    "mknodat",
    "chmod",
    "fchmodat",
    "chown",
    "lchown",
    "fchownat",
    "symlink",
    "symlinkat",
    "link",
    "linkat",
    "truncate",
    "creat",
];
const ID: &[&str] = &[
    "setuid",
    "setgid",
    "setreuid",
    "setregid",
    "setresuid",
    "setresgid",
    "setgroups",
];
const PROC: &[&str] = &["execve", "execveat", "fork", "vfork"];
const NONE: &[&str] = &["lseek", "getpid"];
const SOCKETS: &[&str] = &[
    "socket",
    "socketpair",
    "bind",
    "connect",
    "listen",
    "accept",
    "accept4",
];
const CLONES: &[&str] = &["clone", "clone3"];
const OPENS: &[&str] = &["open", "openat", "openat2"];

/// One `(syscall, context)` case as `(name, Some("key=value"))`.
pub type Case = (String, Option<String>);

/// Every case the default table defines.
pub fn cases() -> BTreeSet<Case> {
    let mut out = BTreeSet::new();
    for s in RPATH.iter().chain(WPATH).chain(ID).chain(PROC).chain(NONE) {
        out.insert((s.to_string(), None));
    }
    for s in SOCKETS {
        for v in ["inet", "unix", "other"] {
            out.insert((s.to_string(), Some(format!("sock_domain={v}"))));
        }
    }
    for s in CLONES {
        for v in ["true", "false"] {
            out.insert((s.to_string(), Some(format!("clone_is_thread={v}"))));
        }
    }
    for s in OPENS {
        for v in ["read", "write", "readwrite"] {
            out.insert((s.to_string(), Some(format!("open_access={v}"))));
        }
    }
    out
}

/// Promises a case needs, primary first.
pub fn required(syscall: &str, ctx: Option<&str>) -> Vec<&'static str> {
    let has = |list: &[&str]| list.contains(&syscall);
    if has(RPATH) {
        vec!["rpath"]
    } else if has(WPATH) {
        vec!["wpath"]
    } else if has(ID) {
        vec!["id"]
    } else if has(PROC) {
        vec!["proc"]
    } else if has(SOCKETS) {
        match ctx {
            Some("sock_domain=unix") => vec!["ipc"],
            _ => vec!["net"],
        }
    } else if has(CLONES) {
        match ctx {
            Some("clone_is_thread=true") => vec!["threading"],
            _ => vec!["proc"],
        }
    } else if has(OPENS) {
        match ctx {
            Some("open_access=read") => vec!["rpath"],
            Some("open_access=write") => vec!["wpath"],
            _ => vec!["wpath", "rpath"],
        }
    } else {
        vec![]
    }
}

/// `(verdict, promise, reason)` as the report prints them.
pub fn verdict(
    granted_bits: u8,
    complain: bool,
    syscall: &str,
    ctx: Option<&str>,
) -> (String, Option<String>, String) {
    let req = required(syscall, ctx);
    let Some(primary) = req.first() else {
        return ("allow".into(), None, "unmapped".into());
    };
    let missing = req
        .iter()
        .map(|p| id(p))
        .filter(|i| granted_bits & (1 << i) == 0)
        .min();
    match missing {
        None => ("allow".into(), Some(primary.to_string()), "granted".into()),
        Some(i) => (
            if complain { "log_only" } else { "kill" }.into(),
            Some(PROMISES[i].to_string()),
            "violation".into(),
        ),
    }
}

/// Space-separated names of the set bits, in id order.
pub fn names(bits: u8) -> String {
    PROMISES
        .iter()
        .enumerate()
        .filter(|(i, _)| bits & (1 << i) != 0)
        .map(|(_, p)| *p)
        .collect::<Vec<_>>()
        .join(" ")
}

use threadbox_core::{ContextKey, DeclareRequest, Engine, MappingTable, PromiseSet, SyscallEvent};

fn event(tid: u32, tgid: u32, syscall: &str, ctx: Option<&str>) -> SyscallEvent {
    let ev = SyscallEvent::new(tid, tgid, syscall);
    match ctx {
        None => ev,
        Some(kv) => {
            let (k, v) = kv.split_once('=').expect("key=value");
            let key: ContextKey = k.parse().expect("known key");
            ev.with(key.parse_value(v).expect("known value"))
        }
    }
}

/// Cases of the bundled table in the oracle's notation.
pub fn table_cases() -> BTreeSet<Case> {
    MappingTable::bundled()
        .cases()
        .into_iter()
        .map(|(s, ctx)| (s, ctx.conditions().first().map(|c| c.to_string())))
        .collect()
}

/// Evaluates every case for every promise subset in both modes and returns
/// the number of comparisons and the mismatches.
pub fn compare_engine() -> (usize, Vec<String>) {
    let mut compared = 0;
    let mut mismatches = Vec::new();
    let cases = cases();
    for complain in [false, true] {
        for bits in 0u8..128 {
            let engine = Engine::with_mapping(MappingTable::bundled());
            engine.registry().register_process(100).unwrap();
            let set = PromiseSet::from_bits(bits).unwrap();
            engine
                .declare(DeclareRequest::new(101, 100, set).complain(complain))
                .unwrap();
            for (syscall, ctx) in &cases {
                let ctx = ctx.as_deref();
                let d = engine.evaluate(&event(101, 100, syscall, ctx)).unwrap();
                let got = (
                    d.verdict.as_str().to_string(),
                    d.promise.map(|p| p.name().to_string()),
                    d.reason.as_str().to_string(),
                );
                let want = verdict(bits, complain, syscall, ctx);
                compared += 1;
                if got != want {
                    mismatches.push(format!(
                        "{{{}}} complain={complain} {syscall} {ctx:?}: engine {got:?}, oracle {want:?}",
                        names(bits)
                    ));
                }
                // an undeclared sibling is never restricted
                let u = engine.evaluate(&event(102, 100, syscall, ctx)).unwrap();
                compared += 1;
                if (u.verdict.as_str(), u.reason.as_str()) != ("allow", "unsandboxed") {
                    mismatches.push(format!("unsandboxed {syscall} {ctx:?}: {u:?}"));
                }
            }
        }
    }
    (compared, mismatches)
}
