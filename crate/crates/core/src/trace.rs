//! Native trace format.
//!
//! ```text
//! # comment
//! @register <tgid>
//! @declare <tid> <tgid> "<promises>" [name=<label>] [complain=<bool>] [debug=<bool>]
//! <tid> <tgid> <syscall> [key=value ...]
//! @exit <tid> <tgid>
//! @exit_process <tgid>
//! ```
//!
//! Values may be double-quoted (`name="Extract file"`). A line's sequence
//! number is its 1-based line number, so directives and events share one
//! total order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ClassificationError, TraceErrorKind, TraceParseError};
use crate::event::{ContextKey, EventContext, SyscallEvent};
use crate::mapping::MappingTable;
use crate::promise::{parse_promises, PromiseSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceKind {
    Event(SyscallEvent),
    Register {
        tgid: u32,
    },
    Declare {
        tid: u32,
        tgid: u32,
        promises: PromiseSet,
        name: String,
        complain: bool,
        debug: bool,
    },
    Exit {
        tid: u32,
        tgid: u32,
    },
    ExitProcess {
        tgid: u32,
    },
}

impl TraceKind {
    pub fn tgid(&self) -> u32 {
        match self {
            TraceKind::Event(e) => e.tgid,
            TraceKind::Register { tgid }
            | TraceKind::Declare { tgid, .. }
            | TraceKind::Exit { tgid, .. }
            | TraceKind::ExitProcess { tgid } => *tgid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub seq: u64,
    pub kind: TraceKind,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceKind::Event(e) => {
                write!(f, "{} {} {}", e.tid, e.tgid, e.syscall)?;
                for c in e.context.conditions() {
                    write!(f, " {c}")?;
                }
                Ok(())
            }
            TraceKind::Register { tgid } => write!(f, "@register {tgid}"),
            TraceKind::Declare {
                tid,
                tgid,
                promises,
                name,
                complain,
                debug,
            } => {
                write!(f, "@declare {tid} {tgid} {}", quote(&promises.to_string()))?;
                if !name.is_empty() {
                    write!(f, " name={}", quote(name))?;
                }
                write!(f, " complain={complain}")?;
                if *debug != !name.is_empty() {
                    write!(f, " debug={debug}")?;
                }
                Ok(())
            }
            TraceKind::Exit { tid, tgid } => write!(f, "@exit {tid} {tgid}"),
            TraceKind::ExitProcess { tgid } => write!(f, "@exit_process {tgid}"),
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' | '\\' => {
                out.push('\\');
                out.push(c);
            }
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders lines back into the native format, one per line.
pub fn render_trace<'a>(lines: impl IntoIterator<Item = &'a TraceKind>) -> String {
    lines.into_iter().map(|k| format!("{k}\n")).collect()
}

/// Parses against the bundled mapping table.
pub fn parse_trace(input: &str) -> Result<Vec<TraceLine>, TraceParseError> {
    parse_trace_with(input, &MappingTable::bundled())
}

/// Parses and validates a trace. Events for syscalls whose rule branches on
/// a context key must carry that key.
pub fn parse_trace_with(
    input: &str,
    mapping: &MappingTable,
) -> Result<Vec<TraceLine>, TraceParseError> {
    let mut out = Vec::new();
    for (idx, raw) in input.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| TraceParseError { line, kind };
        let tokens = tokenize(raw).map_err(|m| err(TraceErrorKind::Malformed(m)))?;
        if tokens.is_empty() {
            continue;
        }
        let kind = parse_tokens(&tokens, mapping).map_err(err)?;
        out.push(TraceLine {
            seq: line as u64,
            kind,
        });
    }
    Ok(out)
}

fn parse_tokens(tokens: &[String], mapping: &MappingTable) -> Result<TraceKind, TraceErrorKind> {
    let first = tokens[0].as_str();
    if let Some(directive) = first.strip_prefix('@') {
        return parse_directive(directive, &tokens[1..]);
    }
    let [tid, tgid, syscall, rest @ ..] = tokens else {
        return Err(TraceErrorKind::Malformed(
            "expected `<tid> <tgid> <syscall> [key=value ...]`".into(),
        ));
    };
    let tid = parse_id(tid)?;
    let tgid = parse_id(tgid)?;
    if syscall.is_empty()
        || !syscall
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
    {
        return Err(TraceErrorKind::Malformed(format!(
            "invalid syscall name `{syscall}`"
        )));
    }
    let mut context = EventContext::default();
    for kv in rest {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| TraceErrorKind::Malformed(format!("expected key=value, got `{kv}`")))?;
        let key: ContextKey = key
            .parse()
            .map_err(|()| TraceErrorKind::UnknownKey(key.to_owned()))?;
        let cond = key
            .parse_value(value)
            .ok_or_else(|| TraceErrorKind::BadValue {
                key: key.to_string(),
                value: value.to_owned(),
            })?;
        context.set(cond);
    }
    if let Some(key) = mapping.required_key(syscall) {
        if !context.conditions().iter().any(|c| c.key() == key) {
            return Err(TraceErrorKind::MissingContext(ClassificationError {
                syscall: syscall.clone(),
                key,
            }));
        }
    }
    Ok(TraceKind::Event(SyscallEvent {
        tid,
        tgid,
        syscall: syscall.clone(),
        context,
    }))
}

fn parse_directive(name: &str, args: &[String]) -> Result<TraceKind, TraceErrorKind> {
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(TraceErrorKind::Malformed(format!(
                "@{name} takes {n} argument(s)"
            )))
        }
    };
    match name {
        "register" => {
            arity(1)?;
            Ok(TraceKind::Register {
                tgid: parse_id(&args[0])?,
            })
        }
        "exit" => {
            arity(2)?;
            Ok(TraceKind::Exit {
                tid: parse_id(&args[0])?,
                tgid: parse_id(&args[1])?,
            })
        }
        "exit_process" => {
            arity(1)?;
            Ok(TraceKind::ExitProcess {
                tgid: parse_id(&args[0])?,
            })
        }
        "declare" => {
            let [tid, tgid, promises, opts @ ..] = args else {
                return Err(TraceErrorKind::Malformed(
                    "expected `@declare <tid> <tgid> \"<promises>\" [name=..] [complain=..]`"
                        .into(),
                ));
            };
            let mut name = String::new();
            let mut complain = false;
            let mut debug = None;
            for opt in opts {
                match opt.split_once('=') {
                    Some(("name", v)) => name = v.to_owned(),
                    Some(("complain", v)) => complain = parse_bool("complain", v)?,
                    Some(("debug", v)) => debug = Some(parse_bool("debug", v)?),
                    _ => {
                        return Err(TraceErrorKind::Malformed(format!(
                            "unknown @declare option `{opt}`"
                        )))
                    }
                }
            }
            Ok(TraceKind::Declare {
                tid: parse_id(tid)?,
                tgid: parse_id(tgid)?,
                promises: parse_promises(promises)?,
                debug: debug.unwrap_or(!name.is_empty()),
                name,
                complain,
            })
        }
        other => Err(TraceErrorKind::UnknownDirective(other.to_owned())),
    }
}

fn parse_id(s: &str) -> Result<u32, TraceErrorKind> {
    match s.parse::<u32>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(TraceErrorKind::Malformed(format!("invalid task id `{s}`"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, TraceErrorKind> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(TraceErrorKind::BadValue {
            key: key.to_owned(),
            value: v.to_owned(),
        }),
    }
}

/// Whitespace tokenizer with double quotes; `#` outside quotes starts a
/// comment.
fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_token = false;
    let mut quoted = false;
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if quoted {
            match c {
                '"' => quoted = false,
                '\\' => match chars.next() {
                    Some('n') => cur.push('\n'),
                    Some(e) => cur.push(e),
                    None => return Err("dangling escape".into()),
                },
                c => cur.push(c),
            }
            continue;
        }
        match c {
            '#' => break,
            '"' => {
                quoted = true;
                in_token = true;
            }
            c if c.is_whitespace() => {
                if in_token {
                    tokens.push(std::mem::take(&mut cur));
                    in_token = false;
                }
            }
            c => {
                cur.push(c);
                in_token = true;
            }
        }
    }
    if quoted {
        return Err("unterminated quote".into());
    }
    if in_token {
        tokens.push(cur);
    }
    Ok(tokens)
}
