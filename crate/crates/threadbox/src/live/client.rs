//! Client side of the control channel, for programs running under
//! `threadbox run`.
//!
//! ```no_run
//! use threadbox::live::client::{sandboxed, Client};
//!
//! let client = Client::from_env()?;
//! client.sandbox_ps()?;
//! let n = sandboxed(&client, "rpath", "reader", false, || {
//!     std::fs::read_to_string("/etc/hostname").map(|s| s.len())
//! })??;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use log::warn;

use super::protocol::{ControlMessage, Endpoint, ProtocolError, Response, CTRL_ENV};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{CTRL_ENV} is not set; the process is not running under a threadbox supervisor")]
    NoChannel,
    #[error("control channel: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("supervisor rejected `{endpoint}`: {message}")]
    Rejected { endpoint: Endpoint, message: String },
    #[error("cannot set no_new_privs: {0}")]
    NoNewPrivs(nix::Error),
}

/// Result of a `promises` write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ack {
    Declared,
    /// The thread was already sandboxed; nothing changed.
    AlreadyDeclared,
}

struct Conn {
    pid: u32,
    reader: BufReader<UnixStream>,
    writer: UnixStream,
    registered: bool,
}

/// One connection per process, serialized by a mutex and re-established
/// after `fork`.
pub struct Client {
    path: PathBuf,
    conn: Mutex<Option<Conn>>,
}

impl Client {
    pub fn new(path: impl Into<PathBuf>) -> Client {
        Client {
            path: path.into(),
            conn: Mutex::new(None),
        }
    }

    pub fn from_env() -> Result<Client, ClientError> {
        std::env::var_os(CTRL_ENV)
            .filter(|v| !v.is_empty())
            .map(Client::new)
            .ok_or(ClientError::NoChannel)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> MutexGuard<'_, Option<Conn>> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn connection<'a>(&self, slot: &'a mut Option<Conn>) -> Result<&'a mut Conn, ClientError> {
        let pid = std::process::id();
        if slot.as_ref().is_some_and(|c| c.pid != pid) {
            *slot = None;
        }
        if slot.is_none() {
            let stream = UnixStream::connect(&self.path)?;
            *slot = Some(Conn {
                pid,
                writer: stream.try_clone()?,
                reader: BufReader::new(stream),
                registered: false,
            });
        }
        Ok(slot.as_mut().expect("connection just set"))
    }

    fn exchange(
        conn: &mut Conn,
        endpoint: Endpoint,
        payload: &str,
    ) -> Result<Response, ClientError> {
        let line = ControlMessage::new(endpoint, payload).encode(gettid())?;
        conn.writer.write_all(line.as_bytes())?;
        let mut reply = String::new();
        if conn.reader.read_line(&mut reply)? == 0 {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "supervisor closed the channel",
            )
            .into());
        }
        match Response::decode(&reply)? {
            Response::Err(message) => Err(ClientError::Rejected { endpoint, message }),
            r => Ok(r),
        }
    }

    /// Sends one raw request for the calling thread.
    pub fn request(&self, endpoint: Endpoint, payload: &str) -> Result<Response, ClientError> {
        let mut slot = self.lock();
        let conn = self.connection(&mut slot)?;
        Client::exchange(conn, endpoint, payload)
    }

    /// Registers the calling process. Repeated calls send nothing.
    pub fn sandbox_ps(&self) -> Result<(), ClientError> {
        let mut slot = self.lock();
        let conn = self.connection(&mut slot)?;
        if !conn.registered {
            Client::exchange(conn, Endpoint::SandboxPs, "")?;
            conn.registered = true;
        }
        Ok(())
    }

    /// Puts the calling thread into a sandbox. Sets no_new_privs on the
    /// thread first. A second call on the same thread changes nothing.
    pub fn permissions(
        &self,
        promises: &str,
        name: &str,
        complain: bool,
    ) -> Result<Ack, ClientError> {
        let mut slot = self.lock();
        let conn = self.connection(&mut slot)?;
        if !name.is_empty() {
            Client::exchange(conn, Endpoint::Debug, name)?;
        }
        if complain {
            Client::exchange(conn, Endpoint::Complain, "1")?;
        }
        set_no_new_privs()?;
        match Client::exchange(conn, Endpoint::Promises, promises)? {
            Response::Ignored => {
                warn!(
                    "thread {} is already sandboxed; promises unchanged",
                    gettid()
                );
                Ok(Ack::AlreadyDeclared)
            }
            _ => Ok(Ack::Declared),
        }
    }
}

pub fn gettid() -> u32 {
    nix::unistd::gettid().as_raw() as u32
}

pub fn set_no_new_privs() -> Result<(), ClientError> {
    nix::sys::prctl::set_no_new_privs().map_err(ClientError::NoNewPrivs)
}

/// Runs `f` on a fresh thread that first enters a sandbox, and waits for
/// it. A panic in `f` is resumed on the caller. If `f` violates its
/// promises the whole process is killed, so there is no error for that.
pub fn sandboxed<T, F>(
    client: &Client,
    promises: &str,
    name: &str,
    complain: bool,
    f: F,
) -> Result<T, ClientError>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    std::thread::scope(|scope| {
        let handle = scope.spawn(|| {
            client.permissions(promises, name, complain)?;
            Ok(f())
        });
        match handle.join() {
            Ok(r) => r,
            Err(panic) => std::panic::resume_unwind(panic),
        }
    })
}
