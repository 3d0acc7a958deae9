//! ptrace-based supervision loop (x86_64 Linux).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::os::unix::process::CommandExt;
use std::process::Command;
use std::sync::Arc;

use log::{debug, error, warn};
use nix::errno::Errno;
use nix::sys::ptrace::{self, Event, Options as PtraceOptions};
use nix::sys::signal::{self, Signal};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid;
use threadbox_core::{
    kill_semantics, Engine, KillDirective, Registry, SyscallEvent, TaskId, Verdict,
};

use super::control::{status_field, ControlServer, ProcProbe, Shared};
use super::decode::{decode, ProcInspector, RawSyscall};
use super::protocol::CTRL_ENV;
use super::{
    syscalls, AttachState, ExitKind, LiveError, RunOutcome, SuperviseOptions, SupervisedProcess,
};

const PTRACE_GET_SYSCALL_INFO: libc::c_uint = 0x420e;
const SYSCALL_INFO_ENTRY: u8 = 1;
const AUDIT_ARCH_X86_64: u32 = 0xc000_003e;

#[repr(C)]
#[derive(Default)]
struct SyscallInfo {
    op: u8,
    pad: [u8; 3],
    arch: u32,
    instruction_pointer: u64,
    stack_pointer: u64,
    data: [u64; 8],
}

fn syscall_info(pid: Pid) -> nix::Result<SyscallInfo> {
    let mut info = SyscallInfo::default();
    // SAFETY: the kernel writes at most `size` bytes into `info`.
    let rc = unsafe {
        libc::ptrace(
            PTRACE_GET_SYSCALL_INFO,
            pid.as_raw(),
            std::mem::size_of::<SyscallInfo>(),
            &mut info as *mut SyscallInfo,
        )
    };
    if rc < 0 {
        return Err(Errno::last());
    }
    Ok(info)
}

fn proc_tgid(tid: u32) -> Option<u32> {
    let status = fs::read_to_string(format!("/proc/{tid}/status")).ok()?;
    status_field(&status, "Tgid")?.parse().ok()
}

#[derive(Debug, Clone, Copy)]
struct Task {
    tgid: u32,
    state: AttachState,
    /// Thread-ness the last allowed clone was judged on.
    clone_expect: Option<(bool, &'static str)>,
}

/// A child process under supervision. Drive it with [`Supervision::run`]
/// on the thread that created it.
pub struct Supervision {
    shared: Arc<Shared>,
    server: ControlServer,
    root: u32,
    tasks: HashMap<u32, Task>,
    killed: BTreeSet<u32>,
    kills: Vec<KillDirective>,
    root_status: Option<ExitKind>,
    aborted: Option<u32>,
}

pub fn supervise(
    mut command: Command,
    options: SuperviseOptions,
) -> Result<Supervision, LiveError> {
    let audit = threadbox_core::AuditLog::default();
    for sink in options.audit_sinks {
        audit.add_sink(sink);
    }
    let engine = Engine::new(options.mapping, Registry::default(), audit);
    let shared = Arc::new(Shared::new(engine));
    let server = ControlServer::start(Arc::clone(&shared), Arc::new(ProcProbe))
        .map_err(LiveError::Control)?;

    command.env(CTRL_ENV, server.path());
    // SAFETY: traceme is async-signal-safe.
    unsafe {
        command.pre_exec(|| ptrace::traceme().map_err(io::Error::from));
    }
    let child = command.spawn().map_err(|e| match e.raw_os_error() {
        Some(libc::EPERM) | Some(libc::ENOSYS) | Some(libc::EACCES) => LiveError::Capability(e),
        _ => LiveError::Spawn(e),
    })?;
    let pid = Pid::from_raw(child.id() as i32);
    let root = child.id();

    match waitpid(pid, Some(WaitPidFlag::__WALL)) {
        Ok(WaitStatus::Stopped(_, Signal::SIGTRAP)) => {}
        Ok(other) => {
            let _ = signal::kill(pid, Signal::SIGKILL);
            return Err(LiveError::Start(format!("unexpected first stop {other:?}")));
        }
        Err(e) => return Err(LiveError::Trace(e)),
    }
    let opts = PtraceOptions::PTRACE_O_TRACESYSGOOD
        | PtraceOptions::PTRACE_O_TRACECLONE
        | PtraceOptions::PTRACE_O_TRACEFORK
        | PtraceOptions::PTRACE_O_TRACEVFORK
        | PtraceOptions::PTRACE_O_TRACEEXEC
        | PtraceOptions::PTRACE_O_EXITKILL;
    if let Err(e) = ptrace::setoptions(pid, opts) {
        let _ = signal::kill(pid, Signal::SIGKILL);
        return Err(LiveError::Trace(e));
    }
    shared.add_supervised(root);

    let mut tasks = HashMap::new();
    tasks.insert(
        root,
        Task {
            tgid: root,
            state: AttachState::Running,
            clone_expect: None,
        },
    );
    Ok(Supervision {
        shared,
        server,
        root,
        tasks,
        killed: BTreeSet::new(),
        kills: Vec::new(),
        root_status: None,
        aborted: None,
    })
}

impl Supervision {
    pub fn root(&self) -> u32 {
        self.root
    }

    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub fn processes(&self) -> Vec<SupervisedProcess> {
        let mut by_tgid: BTreeMap<u32, SupervisedProcess> = BTreeMap::new();
        for (tid, task) in &self.tasks {
            let p = by_tgid
                .entry(task.tgid)
                .or_insert_with(|| SupervisedProcess {
                    tgid: task.tgid,
                    threads: BTreeMap::new(),
                    control: self.server.path().to_path_buf(),
                    no_new_privs_applied: BTreeMap::new(),
                });
            p.threads.insert(*tid, task.state);
            p.no_new_privs_applied
                .insert(*tid, self.shared.nnp_applied(*tid, task.tgid));
        }
        by_tgid.into_values().collect()
    }

    /// Runs until every traced task has exited.
    pub fn run(mut self) -> Result<RunOutcome, LiveError> {
        self.resume(Pid::from_raw(self.root as i32), None);
        loop {
            let status = match waitpid(None, Some(WaitPidFlag::__WALL | WaitPidFlag::__WNOTHREAD)) {
                Ok(s) => s,
                Err(Errno::ECHILD) => break,
                Err(Errno::EINTR) => continue,
                Err(e) => {
                    self.abort_all();
                    return Err(LiveError::Trace(e));
                }
            };
            self.step(status)?;
        }
        let leftover: BTreeSet<u32> = self.tasks.values().map(|t| t.tgid).collect();
        for tgid in leftover {
            self.shared.process_exit(tgid).map_err(LiveError::Engine)?;
        }
        if let Some(pid) = self.aborted {
            return Err(LiveError::AttachRace(pid));
        }
        let status = self.root_status.unwrap_or(ExitKind::Exited(0));
        Ok(RunOutcome {
            status,
            kills: self.kills,
            verdicts: self.shared.verdicts(),
            trace: self.shared.trace_text(),
            audit: self.shared.engine().audit().lines(),
            learning: self.shared.learning(),
        })
    }

    fn resume(&self, pid: Pid, sig: Option<Signal>) {
        match ptrace::syscall(pid, sig) {
            Ok(()) | Err(Errno::ESRCH) => {}
            Err(e) => warn!("cannot resume {pid}: {e}"),
        }
    }

    fn step(&mut self, status: WaitStatus) -> Result<(), LiveError> {
        match status {
            WaitStatus::PtraceSyscall(pid) => self.on_syscall(pid),
            WaitStatus::PtraceEvent(pid, _, ev) => self.on_event(pid, ev),
            WaitStatus::Stopped(pid, sig) => {
                self.on_signal(pid, sig);
                Ok(())
            }
            WaitStatus::Exited(pid, code) => self.on_gone(pid, ExitKind::Exited(code)),
            WaitStatus::Signaled(pid, sig, _) => self.on_gone(pid, ExitKind::Signaled(sig as i32)),
            _ => Ok(()),
        }
    }

    fn on_syscall(&mut self, pid: Pid) -> Result<(), LiveError> {
        let tid = pid.as_raw() as u32;
        let Some(task) = self.tasks.get(&tid).copied() else {
            error!("syscall stop from untracked task {tid}; aborting supervision");
            self.aborted.get_or_insert(tid);
            self.abort_all();
            return Ok(());
        };
        if self.killed.contains(&task.tgid) {
            return Ok(());
        }
        let info = match syscall_info(pid) {
            Ok(i) => i,
            Err(Errno::ESRCH) => return Ok(()),
            Err(e) => {
                self.abort_all();
                return Err(LiveError::Trace(e));
            }
        };
        if info.op == SYSCALL_INFO_ENTRY {
            let verdict = self.on_entry(tid, task.tgid, &info)?;
            if verdict == Verdict::Kill {
                return Ok(());
            }
        }
        self.resume(pid, None);
        Ok(())
    }

    fn on_entry(&mut self, tid: u32, tgid: u32, info: &SyscallInfo) -> Result<Verdict, LiveError> {
        let id = TaskId::new(tid, tgid);
        let engine = self.shared.engine();
        if engine.registry().policy(id).is_none() {
            return Ok(Verdict::Allow);
        }
        let nr = info.data[0] as i64;
        let decision = if info.arch != AUDIT_ARCH_X86_64 {
            self.shared
                .evaluate_undecodable(id, &format!("compat_{nr}"), true)
        } else {
            let name = syscalls::name(nr);
            let key = engine.mapping().required_key(&name);
            let mut args = [0u64; 6];
            args.copy_from_slice(&info.data[1..7]);
            let raw = RawSyscall { nr, args };
            match decode(tid, tgid, &name, &raw, key, &ProcInspector) {
                Ok(ev) => {
                    if let Some(expect) = clone_expectation(&ev) {
                        if let Some(t) = self.tasks.get_mut(&tid) {
                            t.clone_expect = Some(expect);
                        }
                    }
                    self.shared.evaluate(ev)
                }
                Err(e) => {
                    warn!("tid {tid}: cannot decode {name}: {e}");
                    self.shared.evaluate_undecodable(id, &name, false)
                }
            }
        };
        let decision = decision.map_err(LiveError::Engine)?;
        if decision.verdict == Verdict::Kill {
            let promise = decision.promise.expect("kill decisions name a promise");
            self.kill_process(KillDirective { tgid, tid, promise });
        }
        Ok(decision.verdict)
    }

    fn kill_process(&mut self, directive: KillDirective) {
        let tgid = directive.tgid;
        if self.killed.insert(tgid) {
            debug!("killing process {tgid} for {}", directive.promise);
            if let Err(e) = signal::kill(Pid::from_raw(tgid as i32), Signal::SIGKILL) {
                warn!("kill {tgid}: {e}");
            }
            self.kills.push(directive);
        }
    }

    fn on_event(&mut self, pid: Pid, ev: i32) -> Result<(), LiveError> {
        let tid = pid.as_raw() as u32;
        if ev == Event::PTRACE_EVENT_CLONE as i32
            || ev == Event::PTRACE_EVENT_FORK as i32
            || ev == Event::PTRACE_EVENT_VFORK as i32
        {
            let new = match ptrace::getevent(pid) {
                Ok(n) => n as u32,
                Err(_) => {
                    self.resume(pid, None);
                    return Ok(());
                }
            };
            let parent = self.tasks.get(&tid).copied();
            let new_tgid = proc_tgid(new).unwrap_or_else(|| match parent {
                Some(p)
                    if ev == Event::PTRACE_EVENT_CLONE as i32
                        && p.clone_expect.is_some_and(|e| e.0) =>
                {
                    p.tgid
                }
                _ => new,
            });
            self.adopt(new, new_tgid, AttachState::Starting);
            if let Some(parent) = parent {
                if let Some(t) = self.tasks.get_mut(&tid) {
                    t.clone_expect = None;
                }
                if let Some((expected, syscall)) = parent.clone_expect {
                    let actual = new_tgid == parent.tgid;
                    if actual != expected {
                        self.recheck_clone(tid, parent.tgid, syscall, actual, new_tgid)?;
                    }
                }
            }
        } else if ev == Event::PTRACE_EVENT_EXEC as i32 {
            let tgid = tid;
            if let Ok(former) = ptrace::getevent(pid) {
                let former = former as u32;
                if former != tid {
                    self.tasks.remove(&former);
                }
            }
            self.tasks.retain(|t, task| task.tgid != tgid || *t == tid);
            self.tasks.insert(
                tid,
                Task {
                    tgid,
                    state: AttachState::Running,
                    clone_expect: None,
                },
            );
            if !self.killed.contains(&tgid) {
                // the new image starts without sandboxes
                self.shared.process_exit(tgid).map_err(LiveError::Engine)?;
            }
        }
        if !self
            .killed
            .contains(&self.tasks.get(&tid).map_or(0, |t| t.tgid))
        {
            self.resume(pid, None);
        }
        Ok(())
    }

    /// The kernel created a task of a different kind than the arguments
    /// suggested; judge the syscall again on what actually happened.
    fn recheck_clone(
        &mut self,
        tid: u32,
        tgid: u32,
        syscall: &str,
        is_thread: bool,
        new_tgid: u32,
    ) -> Result<(), LiveError> {
        warn!(
            "tid {tid}: {syscall} created a {} contrary to its flags",
            if is_thread { "thread" } else { "process" }
        );
        let ev = SyscallEvent::new(tid, tgid, syscall)
            .with(threadbox_core::Condition::CloneIsThread(is_thread));
        let decision = self
            .shared
            .evaluate(ev.clone())
            .map_err(LiveError::Engine)?;
        if let Some(k) = kill_semantics(&ev, &decision) {
            self.kill_process(k);
            if new_tgid != tgid {
                let _ = signal::kill(Pid::from_raw(new_tgid as i32), Signal::SIGKILL);
            }
        }
        Ok(())
    }

    fn adopt(&mut self, tid: u32, tgid: u32, state: AttachState) {
        match self.tasks.get_mut(&tid) {
            Some(t) => t.tgid = tgid,
            None => {
                self.tasks.insert(
                    tid,
                    Task {
                        tgid,
                        state,
                        clone_expect: None,
                    },
                );
            }
        }
        if !self.shared.is_supervised(tgid) {
            self.shared.add_supervised(tgid);
        }
    }

    fn on_signal(&mut self, pid: Pid, sig: Signal) {
        let tid = pid.as_raw() as u32;
        let task = match self.tasks.get_mut(&tid) {
            Some(t) => t,
            None => {
                // new task reporting before its parent's clone event
                let tgid = proc_tgid(tid).unwrap_or(tid);
                self.adopt(tid, tgid, AttachState::Starting);
                self.tasks.get_mut(&tid).expect("just adopted")
            }
        };
        if task.state == AttachState::Starting && sig == Signal::SIGSTOP {
            task.state = AttachState::Running;
            let tgid = task.tgid;
            if !self.killed.contains(&tgid) {
                self.resume(pid, None);
            }
            return;
        }
        // group-stop reports have no siginfo
        match ptrace::getsiginfo(pid) {
            Err(Errno::EINVAL) => self.resume(pid, None),
            _ => self.resume(pid, Some(sig)),
        }
    }

    fn on_gone(&mut self, pid: Pid, how: ExitKind) -> Result<(), LiveError> {
        let tid = pid.as_raw() as u32;
        if tid == self.root {
            self.root_status = Some(how);
        }
        let Some(task) = self.tasks.remove(&tid) else {
            return Ok(());
        };
        let tgid = task.tgid;
        if self.tasks.values().any(|t| t.tgid == tgid) {
            self.shared
                .task_exit(tid, tgid)
                .map_err(LiveError::Engine)?;
        } else {
            self.shared.process_exit(tgid).map_err(LiveError::Engine)?;
            self.shared.forget_process(tgid);
            self.killed.remove(&tgid);
        }
        Ok(())
    }

    fn abort_all(&mut self) {
        let tgids: BTreeSet<u32> = self.tasks.values().map(|t| t.tgid).collect();
        for tgid in tgids {
            self.killed.insert(tgid);
            let _ = signal::kill(Pid::from_raw(tgid as i32), Signal::SIGKILL);
        }
    }
}

fn clone_expectation(ev: &SyscallEvent) -> Option<(bool, &'static str)> {
    let syscall: &'static str = match ev.syscall.as_str() {
        "clone" => "clone",
        "clone3" => "clone3",
        "fork" => "fork",
        "vfork" => "vfork",
        _ => return None,
    };
    let is_thread = ev.context.conditions().into_iter().find_map(|c| match c {
        threadbox_core::Condition::CloneIsThread(b) => Some(b),
        _ => None,
    });
    Some((is_thread.unwrap_or(false), syscall))
}
