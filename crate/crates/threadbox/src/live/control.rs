//! Supervisor side of the control channel, plus the state shared between
//! the control server and the tracer.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;

use log::{debug, warn};
use nix::sys::socket::{getsockopt, sockopt::PeerCredentials};
use threadbox_core::{
    parse_promises, render_trace, Decision, DeclareOutcome, DeclareRequest, Engine, EngineError,
    LearningReport, RegistryError, SyscallEvent, TaskId, TraceKind,
};

use super::protocol::{parse_flag, ControlMessage, Endpoint, Response};

/// What the supervisor needs to know about a task to trust a request.
pub trait TaskProbe: Send + Sync {
    /// Whether `tid` is currently a thread of process `tgid`.
    fn is_thread_of(&self, tid: u32, tgid: u32) -> bool;
    /// Whether the no-new-privileges flag is set on the thread.
    fn no_new_privs(&self, tid: u32, tgid: u32) -> io::Result<bool>;
}

/// Reads `/proc`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcProbe;

impl TaskProbe for ProcProbe {
    fn is_thread_of(&self, tid: u32, tgid: u32) -> bool {
        Path::new(&format!("/proc/{tgid}/task/{tid}")).exists()
    }

    fn no_new_privs(&self, tid: u32, tgid: u32) -> io::Result<bool> {
        let status = fs::read_to_string(format!("/proc/{tgid}/task/{tid}/status"))?;
        status_field(&status, "NoNewPrivs")
            .map(|v| v == "1")
            .ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, "no NoNewPrivs field in status")
            })
    }
}

pub(crate) fn status_field<'a>(status: &'a str, key: &str) -> Option<&'a str> {
    status.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        (k == key).then(|| v.trim())
    })
}

/// A verdict produced during a live run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveVerdict {
    pub tid: u32,
    pub tgid: u32,
    pub syscall: String,
    pub decision: Decision,
}

#[derive(Debug, Default)]
struct Journal {
    lines: Vec<TraceKind>,
    verdicts: Vec<LiveVerdict>,
    learning: Vec<LearningReport>,
}

#[derive(Debug, Default, Clone)]
struct Staged {
    name: Option<String>,
    complain: bool,
}

/// State shared by the tracer and the control server.
///
/// Every engine mutation and every evaluation takes the journal lock, so the
/// journal is a linearization of the run that replays to the same verdicts.
pub struct Shared {
    engine: Engine,
    journal: Mutex<Journal>,
    supervised: RwLock<HashSet<u32>>,
    staged: Mutex<HashMap<TaskId, Staged>>,
    nnp: Mutex<HashSet<TaskId>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared {
    pub fn new(engine: Engine) -> Shared {
        Shared {
            engine,
            journal: Mutex::default(),
            supervised: RwLock::default(),
            staged: Mutex::default(),
            nnp: Mutex::default(),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn add_supervised(&self, tgid: u32) {
        self.supervised
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(tgid);
    }

    pub fn is_supervised(&self, tgid: u32) -> bool {
        self.supervised
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .contains(&tgid)
    }

    pub fn supervised(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .supervised
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    /// Threads whose no-new-privileges flag was verified at declaration.
    pub fn nnp_applied(&self, tid: u32, tgid: u32) -> bool {
        lock(&self.nnp).contains(&TaskId::new(tid, tgid))
    }

    /// Evaluates and journals one decoded event.
    pub fn evaluate(&self, event: SyscallEvent) -> Result<Decision, EngineError> {
        let mut journal = lock(&self.journal);
        let decision = self.engine.evaluate(&event)?;
        journal.verdicts.push(LiveVerdict {
            tid: event.tid,
            tgid: event.tgid,
            syscall: event.syscall.clone(),
            decision,
        });
        journal.lines.push(TraceKind::Event(event));
        Ok(decision)
    }

    /// Evaluates an event whose context could not be decoded. Such events
    /// have no trace representation and are not journaled.
    pub fn evaluate_undecodable(
        &self,
        task: TaskId,
        syscall: &str,
        foreign: bool,
    ) -> Result<Decision, EngineError> {
        let _journal = lock(&self.journal);
        if foreign {
            self.engine.evaluate_foreign(task, syscall)
        } else {
            self.engine.evaluate_undecodable(task, syscall)
        }
    }

    pub fn task_exit(&self, tid: u32, tgid: u32) -> Result<(), EngineError> {
        lock(&self.staged).remove(&TaskId::new(tid, tgid));
        lock(&self.nnp).remove(&TaskId::new(tid, tgid));
        let mut journal = lock(&self.journal);
        if self.engine.registry().lookup(tid, tgid).is_none() {
            return Ok(());
        }
        journal.lines.push(TraceKind::Exit { tid, tgid });
        if let Some(r) = self.engine.task_exit(tid, tgid)? {
            journal.learning.push(r);
        }
        Ok(())
    }

    /// The process exited, was killed or replaced its image.
    pub fn process_exit(&self, tgid: u32) -> Result<(), EngineError> {
        lock(&self.staged).retain(|t, _| t.tgid != tgid);
        lock(&self.nnp).retain(|t| t.tgid != tgid);
        let mut journal = lock(&self.journal);
        if !self.engine.registry().is_registered(tgid) {
            return Ok(());
        }
        journal.lines.push(TraceKind::ExitProcess { tgid });
        let reports = self.engine.process_exit(tgid)?;
        journal.learning.extend(reports);
        Ok(())
    }

    /// The process left supervision for good.
    pub fn forget_process(&self, tgid: u32) {
        self.supervised
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&tgid);
    }

    /// Journal rendered in the native trace format.
    pub fn trace_text(&self) -> String {
        render_trace(lock(&self.journal).lines.iter())
    }

    pub fn verdicts(&self) -> Vec<LiveVerdict> {
        lock(&self.journal).verdicts.clone()
    }

    pub fn learning(&self) -> Vec<LearningReport> {
        lock(&self.journal).learning.clone()
    }

    /// Serves one request from a thread claiming to be `tid` in a
    /// connection whose peer is process `peer`.
    pub fn handle(
        &self,
        peer: u32,
        tid: u32,
        msg: &ControlMessage,
        probe: &dyn TaskProbe,
    ) -> Response {
        if !self.is_supervised(peer) {
            return Response::Err(format!("process {peer} is not supervised"));
        }
        if !probe.is_thread_of(tid, peer) {
            return Response::Err(format!("thread {tid} does not belong to process {peer}"));
        }
        let task = TaskId::new(tid, peer);
        match msg.endpoint {
            Endpoint::SandboxPs => {
                let mut journal = lock(&self.journal);
                if self.engine.registry().is_registered(peer) {
                    return Response::Ok;
                }
                match self.engine.registry().register_process(peer) {
                    Ok(()) => {
                        journal.lines.push(TraceKind::Register { tgid: peer });
                        Response::Ok
                    }
                    Err(e) => Response::Err(e.to_string()),
                }
            }
            Endpoint::Debug => {
                lock(&self.staged).entry(task).or_default().name = Some(msg.payload.clone());
                Response::Ok
            }
            Endpoint::Complain => match parse_flag(&msg.payload) {
                Some(flag) => {
                    lock(&self.staged).entry(task).or_default().complain = flag;
                    Response::Ok
                }
                None => Response::Err(format!("complain expects 0 or 1, got `{}`", msg.payload)),
            },
            Endpoint::Promises => self.declare(task, &msg.payload, probe),
        }
    }

    fn declare(&self, task: TaskId, payload: &str, probe: &dyn TaskProbe) -> Response {
        let promises = match parse_promises(payload) {
            Ok(p) => p,
            Err(e) => return Response::Err(e.to_string()),
        };
        match probe.no_new_privs(task.tid, task.tgid) {
            Ok(true) => {}
            Ok(false) => {
                return Response::Err(format!("no_new_privs is not set on thread {}", task.tid))
            }
            Err(e) => return Response::Err(format!("cannot inspect thread {}: {e}", task.tid)),
        }
        let staged = lock(&self.staged).remove(&task).unwrap_or_default();
        let debug = staged.name.is_some();
        let mut req = DeclareRequest::new(task.tid, task.tgid, promises).complain(staged.complain);
        req.name = staged.name.unwrap_or_default();
        req.debug = debug;
        let decl = TraceKind::Declare {
            tid: task.tid,
            tgid: task.tgid,
            promises,
            name: req.name.clone(),
            complain: req.complain,
            debug,
        };

        let mut journal = lock(&self.journal);
        match self.engine.declare(req) {
            Ok(DeclareOutcome::Declared { .. }) => {
                journal.lines.push(decl);
                lock(&self.nnp).insert(task);
                Response::Ok
            }
            Ok(DeclareOutcome::AlreadyDeclared { .. }) => Response::Ignored,
            Err(EngineError::Registry(RegistryError::Unregistered(tgid))) => Response::Err(
                format!("process {tgid} is not registered, call sandbox_ps first"),
            ),
            Err(e) => Response::Err(e.to_string()),
        }
    }
}

/// Listens on a UNIX socket inside a private temporary directory.
pub struct ControlServer {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    _dir: tempfile::TempDir,
}

impl ControlServer {
    pub fn start(shared: Arc<Shared>, probe: Arc<dyn TaskProbe>) -> io::Result<ControlServer> {
        let dir = tempfile::Builder::new().prefix("threadbox-").tempdir()?;
        let path = dir.path().join("ctrl.sock");
        let listener = UnixListener::bind(&path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = Arc::clone(&stop);
            std::thread::Builder::new()
                .name("threadbox-ctrl".into())
                .spawn(move || accept_loop(listener, shared, probe, stop))?
        };
        Ok(ControlServer {
            path,
            stop,
            accept: Some(accept),
            _dir: dir,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept call
        let _ = UnixStream::connect(&self.path);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(
    listener: UnixListener,
    shared: Arc<Shared>,
    probe: Arc<dyn TaskProbe>,
    stop: Arc<AtomicBool>,
) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let conn = match conn {
            Ok(c) => c,
            Err(e) => {
                warn!("control accept failed: {e}");
                continue;
            }
        };
        let shared = Arc::clone(&shared);
        let probe = Arc::clone(&probe);
        let spawned = std::thread::Builder::new()
            .name("threadbox-conn".into())
            .spawn(move || {
                if let Err(e) = serve(conn, &shared, probe.as_ref()) {
                    debug!("control connection closed: {e}");
                }
            });
        if let Err(e) = spawned {
            warn!("cannot serve control connection: {e}");
        }
    }
}

fn serve(conn: UnixStream, shared: &Shared, probe: &dyn TaskProbe) -> io::Result<()> {
    let creds = getsockopt(&conn, PeerCredentials).map_err(io::Error::from)?;
    let peer = u32::try_from(creds.pid()).unwrap_or(0);
    let mut writer = conn.try_clone()?;
    let reader = BufReader::new(conn);
    for line in reader.lines() {
        let line = line?;
        let response = match ControlMessage::decode(&line) {
            Ok((tid, msg)) => {
                debug!("control {peer}: {line}");
                shared.handle(peer, tid, &msg, probe)
            }
            Err(e) => Response::Err(e.to_string()),
        };
        writer.write_all(response.encode().as_bytes())?;
    }
    Ok(())
}
