//! Benchmark suites, looked up by name.
//!
//! Numbers are printed for comparison only and depend on the host.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Instant;

use threadbox_core::{
    parse_promises, DeclareRequest, Engine, MappingTable, PromiseSet, SyscallEvent,
};

use crate::live::client::{sandboxed, Client};

/// Rows of the syscall table, in output order.
pub const SYSCALL_ROWS: [&str; 11] = [
    "connect",
    "listen",
    "accept",
    "socket_i",
    "socket_u",
    "socketpair",
    "open_tmp",
    "open_usr",
    "open_zero",
    "getpid",
    "lseek",
];

pub const SYSCALL_HEADER: [&str; 4] = ["System call", "Before (µs)", "After (µs)", "Difference"];

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("benchmark worker: {0}")]
    Worker(String),
}

pub struct BenchContext {
    /// A `threadbox` executable that understands `bench-worker`.
    pub worker: PathBuf,
    pub iterations: usize,
    pub mapping: Arc<MappingTable>,
}

pub trait BenchSuite: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, ctx: &BenchContext, out: &mut dyn Write) -> Result<(), BenchError>;
}

pub struct SuiteRegistry {
    suites: BTreeMap<&'static str, Box<dyn BenchSuite>>,
}

impl SuiteRegistry {
    pub fn empty() -> SuiteRegistry {
        SuiteRegistry {
            suites: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, suite: Box<dyn BenchSuite>) {
        self.suites.insert(suite.name(), suite);
    }

    pub fn get(&self, name: &str) -> Option<&dyn BenchSuite> {
        self.suites.get(name).map(|s| s.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.suites.keys().copied().collect()
    }
}

impl Default for SuiteRegistry {
    fn default() -> Self {
        let mut r = SuiteRegistry::empty();
        r.register(Box::new(DecisionsSuite));
        r.register(Box::new(SyscallsSuite));
        r
    }
}

/// `+0.23 (+8.4%)`
pub fn difference(before: f64, after: f64) -> String {
    let d = after - before;
    if before > 0.0 {
        format!("{d:+.2} ({:+.1}%)", d / before * 100.0)
    } else {
        format!("{d:+.2}")
    }
}

/// Renders the before/after table. A missing `after` prints `n/a`.
pub fn format_syscall_table(rows: &[(&str, f64, Option<f64>)]) -> String {
    let mut s = String::new();
    let [h0, h1, h2, h3] = SYSCALL_HEADER;
    let _ = writeln!(s, "{h0:<12} {h1:>12} {h2:>12}  {h3}");
    for (name, before, after) in rows {
        match after {
            Some(a) => {
                let _ = writeln!(
                    s,
                    "{name:<12} {before:>12.2} {a:>12.2}  {}",
                    difference(*before, *a)
                );
            }
            None => {
                let _ = writeln!(s, "{name:<12} {before:>12.2} {:>12}  n/a", "n/a");
            }
        }
    }
    s
}

/// Splits a rendered table into its header cells and row names.
pub fn table_shape(table: &str) -> (Vec<String>, Vec<String>) {
    let mut lines = table.lines();
    let header = lines
        .next()
        .map(|h| {
            h.split("  ")
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .map(str::to_owned)
                .collect()
        })
        .unwrap_or_default();
    let rows = lines
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_owned)
        .collect();
    (header, rows)
}

/// Median latency of `Engine::decide` per mapped case.
pub struct DecisionsSuite;

impl BenchSuite for DecisionsSuite {
    fn name(&self) -> &'static str {
        "decisions"
    }

    fn run(&self, ctx: &BenchContext, out: &mut dyn Write) -> Result<(), BenchError> {
        let engine = Engine::with_mapping(Arc::clone(&ctx.mapping));
        engine
            .registry()
            .register_process(1)
            .map_err(|e| BenchError::Worker(e.to_string()))?;
        let granted: PromiseSet = parse_promises("rpath net").unwrap_or_default();
        engine
            .declare(DeclareRequest::new(1, 1, granted))
            .map_err(|e| BenchError::Worker(e.to_string()))?;
        let iterations = ctx.iterations.max(100);

        writeln!(out, "{:<40} {:>12}", "Case", "Median (ns)")?;
        let mut cases: Vec<(String, SyscallEvent)> =
            vec![("unsandboxed".to_owned(), SyscallEvent::new(2, 1, "openat"))];
        for (syscall, context) in ctx.mapping.cases() {
            let mut ev = SyscallEvent::new(1, 1, syscall.clone());
            ev.context = context;
            let label = match context.conditions().first() {
                Some(c) => format!("{syscall} {c}"),
                None => syscall,
            };
            cases.push((label, ev));
        }
        for (label, ev) in cases {
            let ns = median_ns(iterations, || {
                std::hint::black_box(engine.decide(std::hint::black_box(&ev)).ok());
            });
            writeln!(out, "{label:<40} {ns:>12.1}")?;
        }
        Ok(())
    }
}

/// Median over batches of 32 calls, in nanoseconds per call.
fn median_ns(iterations: usize, mut f: impl FnMut()) -> f64 {
    const BATCH: usize = 32;
    let mut samples: Vec<f64> = (0..iterations.div_ceil(BATCH))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..BATCH {
                f();
            }
            t.elapsed().as_nanos() as f64 / BATCH as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Per-syscall latency without and with live supervision.
pub struct SyscallsSuite;

impl BenchSuite for SyscallsSuite {
    fn name(&self) -> &'static str {
        "syscalls"
    }

    fn run(&self, ctx: &BenchContext, out: &mut dyn Write) -> Result<(), BenchError> {
        let dir = tempfile::tempdir()?;
        let before_file = dir.path().join("before");
        let after_file = dir.path().join("after");

        let status = worker_command(ctx, &before_file, false).status()?;
        if !status.success() {
            return Err(BenchError::Worker(format!("exited with {status}")));
        }
        let before = read_results(&before_file)?;

        let after = match supervised_worker(ctx, &after_file) {
            Ok(()) => Some(read_results(&after_file)?),
            Err(e) => {
                log::warn!("supervised run unavailable: {e}");
                None
            }
        };
        let rows: Vec<(&str, f64, Option<f64>)> = SYSCALL_ROWS
            .iter()
            .map(|name| {
                let b = before.get(*name).copied().unwrap_or(f64::NAN);
                let a = after.as_ref().and_then(|m| m.get(*name).copied());
                (*name, b, a)
            })
            .collect();
        out.write_all(format_syscall_table(&rows).as_bytes())?;
        Ok(())
    }
}

fn worker_command(ctx: &BenchContext, out: &Path, sandbox: bool) -> Command {
    let mut cmd = Command::new(&ctx.worker);
    cmd.arg("bench-worker")
        .arg("--out")
        .arg(out)
        .arg("--iterations")
        .arg(ctx.iterations.to_string())
        .stdin(Stdio::null());
    if sandbox {
        cmd.arg("--sandbox");
    }
    cmd
}

fn supervised_worker(ctx: &BenchContext, out: &Path) -> Result<(), BenchError> {
    let options = crate::live::SuperviseOptions {
        mapping: Arc::clone(&ctx.mapping),
        audit_sinks: Vec::new(),
    };
    let outcome = crate::live::run(worker_command(ctx, out, true), options)
        .map_err(|e| BenchError::Worker(e.to_string()))?;
    if outcome.exit_code() != 0 {
        return Err(BenchError::Worker(format!(
            "supervised worker exited with {}",
            outcome.exit_code()
        )));
    }
    Ok(())
}

fn read_results(path: &Path) -> Result<BTreeMap<String, f64>, BenchError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (name, v) = l
                .split_once(' ')
                .ok_or_else(|| BenchError::Worker(format!("bad result line `{l}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| BenchError::Worker(format!("bad value in `{l}`")))?;
            Ok((name.to_owned(), v))
        })
        .collect()
}

fn check(rc: libc::c_long) -> io::Result<libc::c_long> {
    if rc < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(rc)
    }
}

fn close(fd: libc::c_long) {
    // SAFETY: fd was returned by the kernel to this process.
    unsafe { libc::close(fd as i32) };
}

fn open_path(path: &Path, flags: i32) -> io::Result<libc::c_long> {
    let c =
        std::ffi::CString::new(path.as_os_str().as_encoded_bytes()).map_err(io::Error::other)?;
    // SAFETY: c is a valid C string.
    check(unsafe { libc::open(c.as_ptr(), flags | libc::O_CLOEXEC) } as libc::c_long)
}

fn inet_listener() -> io::Result<(libc::c_long, libc::sockaddr_in)> {
    // SAFETY: raw socket calls on locally owned descriptors and buffers.
    unsafe {
        let fd = check(libc::socket(libc::AF_INET, libc::SOCK_STREAM, 0) as libc::c_long)?;
        let mut addr: libc::sockaddr_in = std::mem::zeroed();
        addr.sin_family = libc::AF_INET as libc::sa_family_t;
        addr.sin_addr.s_addr = u32::from_be_bytes([127, 0, 0, 1]).to_be();
        let mut len = std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t;
        check(
            libc::bind(fd as i32, (&addr as *const libc::sockaddr_in).cast(), len) as libc::c_long,
        )?;
        check(libc::getsockname(
            fd as i32,
            (&mut addr as *mut libc::sockaddr_in).cast(),
            &mut len,
        ) as libc::c_long)?;
        Ok((fd, addr))
    }
}

/// Average microseconds per call of every row, measured in this process.
pub fn measure_syscalls(iterations: usize) -> io::Result<Vec<(&'static str, f64)>> {
    let iterations = iterations.max(1);
    let tmp = tempfile::NamedTempFile::new()?;
    let home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .filter(|h| h.is_dir());
    let usr = match home.as_deref() {
        Some(h) => {
            tempfile::NamedTempFile::new_in(h).or_else(|_| tempfile::NamedTempFile::new())?
        }
        None => tempfile::NamedTempFile::new()?,
    };
    usr.as_file().write_all(b"threadbox")?;
    let mut totals: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut time = |name: &'static str,
                    f: &mut dyn FnMut() -> io::Result<libc::c_long>|
     -> io::Result<libc::c_long> {
        let t = Instant::now();
        let r = f();
        *totals.entry(name).or_default() += t.elapsed().as_secs_f64() * 1e6;
        r
    };
    let (listener, addr) = inet_listener()?;
    // SAFETY: listener is a bound socket owned here.
    check(unsafe { libc::listen(listener as i32, 64) } as libc::c_long)?;
    let seek_fd = tmp.as_file().as_raw_fd();

    for _ in 0..iterations {
        // SAFETY: every call below uses descriptors and buffers owned by
        // this loop iteration.
        unsafe {
            let fd = check(libc::socket(libc::AF_INET, libc::SOCK_STREAM, 0) as libc::c_long)?;
            time("connect", &mut || {
                check(libc::connect(
                    fd as i32,
                    (&addr as *const libc::sockaddr_in).cast(),
                    std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
                ) as libc::c_long)
            })?;
            let peer = time("accept", &mut || {
                check(
                    libc::accept(listener as i32, std::ptr::null_mut(), std::ptr::null_mut())
                        as libc::c_long,
                )
            })?;
            close(peer);
            close(fd);

            let (lfd, _) = inet_listener()?;
            time("listen", &mut || {
                check(libc::listen(lfd as i32, 1) as libc::c_long)
            })?;
            close(lfd);

            let s = time("socket_i", &mut || {
                check(libc::socket(libc::AF_INET, libc::SOCK_STREAM, 0) as libc::c_long)
            })?;
            close(s);
            let s = time("socket_u", &mut || {
                check(libc::socket(libc::AF_UNIX, libc::SOCK_STREAM, 0) as libc::c_long)
            })?;
            close(s);
            let mut pair = [0i32; 2];
            time("socketpair", &mut || {
                check(
                    libc::socketpair(libc::AF_UNIX, libc::SOCK_STREAM, 0, pair.as_mut_ptr())
                        as libc::c_long,
                )
            })?;
            close(pair[0] as libc::c_long);
            close(pair[1] as libc::c_long);

            let f = time("open_tmp", &mut || open_path(tmp.path(), libc::O_RDWR))?;
            close(f);
            let f = time("open_usr", &mut || open_path(usr.path(), libc::O_RDONLY))?;
            close(f);
            let f = time("open_zero", &mut || {
                open_path(Path::new("/dev/zero"), libc::O_RDONLY)
            })?;
            close(f);

            time("getpid", &mut || check(libc::syscall(libc::SYS_getpid)))?;
            time("lseek", &mut || {
                check(libc::lseek(seek_fd, 0, libc::SEEK_SET) as libc::c_long)
            })?;
        }
    }
    close(listener);
    Ok(SYSCALL_ROWS
        .iter()
        .map(|r| {
            (
                *r,
                totals.get(r).copied().unwrap_or(0.0) / iterations as f64,
            )
        })
        .collect())
}

/// Body of the hidden `bench-worker` subcommand. With `sandbox`, the
/// measurements run in a thread holding every promise they need.
pub fn run_worker(out: &Path, iterations: usize, sandbox: bool) -> Result<(), BenchError> {
    let results = if sandbox {
        let client = Client::from_env().map_err(|e| BenchError::Worker(e.to_string()))?;
        client
            .sandbox_ps()
            .map_err(|e| BenchError::Worker(e.to_string()))?;
        sandboxed(&client, "rpath wpath net ipc", "bench", false, || {
            measure_syscalls(iterations)
        })
        .map_err(|e| BenchError::Worker(e.to_string()))??
    } else {
        measure_syscalls(iterations)?
    };
    let mut text = String::new();
    for (name, us) in results {
        let _ = writeln!(text, "{name} {us}");
    }
    std::fs::write(out, text)?;
    Ok(())
}
