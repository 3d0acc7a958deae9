//! Control channel wire format.
//!
//! The supervisor listens on a UNIX stream socket whose path is given to the
//! child in `THREADBOX_CTRL`. Each request is one UTF-8 line:
//!
//! ```text
//! <endpoint> <tid> <payload>\n
//! ```
//!
//! `<endpoint>` is `sandbox_ps`, `promises`, `debug` or `complain`; `<tid>`
//! is the calling thread's kernel thread id and `<payload>` runs to the end
//! of the line (it may be empty or contain spaces). Every request gets one
//! response line: `ok`, `ok ignored` (a repeated `promises` write) or
//! `err <message>`.
//!
//! `debug` and `complain` stage values for the calling thread that the next
//! `promises` write from the same thread consumes. A thread must set its
//! no-new-privileges flag before writing `promises`.

use std::fmt;
use std::str::FromStr;

/// Environment variable carrying the control socket path.
pub const CTRL_ENV: &str = "THREADBOX_CTRL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    SandboxPs,
    Promises,
    Debug,
    Complain,
}

impl Endpoint {
    pub const ALL: [Endpoint; 4] = [
        Endpoint::SandboxPs,
        Endpoint::Promises,
        Endpoint::Debug,
        Endpoint::Complain,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            Endpoint::SandboxPs => "sandbox_ps",
            Endpoint::Promises => "promises",
            Endpoint::Debug => "debug",
            Endpoint::Complain => "complain",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Endpoint {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Endpoint::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| ProtocolError(format!("unknown endpoint `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("protocol error: {0}")]
pub struct ProtocolError(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub endpoint: Endpoint,
    pub payload: String,
}

impl ControlMessage {
    pub fn new(endpoint: Endpoint, payload: impl Into<String>) -> ControlMessage {
        ControlMessage {
            endpoint,
            payload: payload.into(),
        }
    }

    /// The request line for `tid`, including the trailing newline.
    pub fn encode(&self, tid: u32) -> Result<String, ProtocolError> {
        if self.payload.contains(['\n', '\r']) {
            return Err(ProtocolError("payload must be a single line".into()));
        }
        Ok(format!("{} {} {}\n", self.endpoint, tid, self.payload))
    }

    /// Parses a request line (without its newline) into the claimed tid and
    /// the message.
    pub fn decode(line: &str) -> Result<(u32, ControlMessage), ProtocolError> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let mut parts = line.splitn(3, ' ');
        let endpoint: Endpoint = parts.next().unwrap_or_default().parse()?;
        let tid = parts
            .next()
            .and_then(|t| t.parse::<u32>().ok())
            .filter(|t| *t >= 1)
            .ok_or_else(|| ProtocolError(format!("missing or invalid tid in `{line}`")))?;
        let payload = parts.next().unwrap_or_default().to_owned();
        Ok((tid, ControlMessage { endpoint, payload }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok,
    /// Accepted but without effect (write-once `promises`).
    Ignored,
    Err(String),
}

impl Response {
    pub fn encode(&self) -> String {
        match self {
            Response::Ok => "ok\n".to_owned(),
            Response::Ignored => "ok ignored\n".to_owned(),
            Response::Err(m) => format!("err {}\n", m.replace(['\n', '\r'], " ")),
        }
    }

    pub fn decode(line: &str) -> Result<Response, ProtocolError> {
        let line = line.trim_end_matches(['\n', '\r']);
        match line {
            "ok" => Ok(Response::Ok),
            "ok ignored" => Ok(Response::Ignored),
            _ => line
                .strip_prefix("err ")
                .map(|m| Response::Err(m.to_owned()))
                .ok_or_else(|| ProtocolError(format!("bad response `{line}`"))),
        }
    }
}

/// Parses a `complain` payload.
pub fn parse_flag(payload: &str) -> Option<bool> {
    match payload.trim() {
        "1" | "true" | "True" => Some(true),
        "0" | "false" | "False" | "" => Some(false),
        _ => None,
    }
}
