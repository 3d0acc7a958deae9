//! The syscall to promise mapping table.
//!
//! The table is data: one rule per line, loaded and checked for totality
//! before use. A syscall either has one unconditional rule or one rule per
//! value of a single context key.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use crate::error::{ClassificationError, MappingError, MappingErrorKind};
use crate::event::{Condition, ContextKey, EventContext, SyscallEvent};
use crate::promise::{Promise, PromiseSet};

/// The table shipped with the crate.
pub const DEFAULT_MAPPING: &str = include_str!("../mapping/default.map");

/// One line of the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingRule<'a> {
    pub syscall: &'a str,
    pub condition: Option<Condition>,
    pub required: Option<Promise>,
}

impl fmt::Display for MappingRule<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syscall {}", self.syscall)?;
        if let Some(c) = self.condition {
            write!(f, " when {c}")?;
        }
        match self.required {
            Some(p) => write!(f, " -> {p}"),
            None => f.write_str(" -> none"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SyscallRule {
    Always(Option<Promise>),
    ByKey {
        key: ContextKey,
        arms: Vec<(Condition, Option<Promise>)>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTable {
    rules: BTreeMap<String, SyscallRule>,
}

struct PendingRule {
    line: usize,
    condition: Option<Condition>,
    required: Option<Promise>,
}

impl MappingTable {
    /// Loads and validates a table document.
    pub fn parse(source: &str) -> Result<MappingTable, MappingError> {
        let mut pending: BTreeMap<String, Vec<PendingRule>> = BTreeMap::new();

        for (idx, raw) in source.lines().enumerate() {
            let line = idx + 1;
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let (syscall, rule) = parse_line(text).map_err(|kind| MappingError { line, kind })?;
            let rules = pending.entry(syscall.clone()).or_default();
            for prior in rules.iter() {
                let kind = if prior.condition == rule.condition {
                    Some(MappingErrorKind::Duplicate {
                        syscall: syscall.clone(),
                        first_line: prior.line,
                    })
                } else if overlaps(prior.condition, rule.condition) {
                    Some(MappingErrorKind::Overlap {
                        syscall: syscall.clone(),
                        first_line: prior.line,
                    })
                } else {
                    None
                };
                if let Some(kind) = kind {
                    return Err(MappingError { line, kind });
                }
            }
            rules.push(PendingRule {
                line,
                condition: rule.condition,
                required: rule.required,
            });
        }

        let mut rules = BTreeMap::new();
        for (syscall, arms) in pending {
            let first_line = arms[0].line;
            let rule = match arms[0].condition {
                None => SyscallRule::Always(arms[0].required),
                Some(first) => {
                    let key = first.key();
                    let missing: Vec<String> = key
                        .domain()
                        .into_iter()
                        .filter(|c| !arms.iter().any(|a| a.condition == Some(*c)))
                        .map(|c| c.to_string())
                        .collect();
                    if !missing.is_empty() {
                        return Err(MappingError {
                            line: first_line,
                            kind: MappingErrorKind::Incomplete {
                                syscall,
                                missing: missing.join(", "),
                            },
                        });
                    }
                    // Keep arms in domain order so iteration is stable.
                    let arms = key
                        .domain()
                        .into_iter()
                        .map(|c| {
                            let arm = arms
                                .iter()
                                .find(|a| a.condition == Some(c))
                                .expect("checked above");
                            (c, arm.required)
                        })
                        .collect();
                    SyscallRule::ByKey { key, arms }
                }
            };
            rules.insert(syscall, rule);
        }
        Ok(MappingTable { rules })
    }

    /// The bundled default table, parsed once.
    pub fn bundled() -> Arc<MappingTable> {
        static TABLE: OnceLock<Arc<MappingTable>> = OnceLock::new();
        TABLE
            .get_or_init(|| {
                Arc::new(
                    MappingTable::parse(DEFAULT_MAPPING).expect("bundled mapping table is valid"),
                )
            })
            .clone()
    }

    /// The promise a syscall demands, or `None` for syscalls that need no
    /// promise. A conditional rule whose key is absent from the event's
    /// context is an error, never a silent allow.
    pub fn required_promise(
        &self,
        event: &SyscallEvent,
    ) -> Result<Option<Promise>, ClassificationError> {
        self.required_for(&event.syscall, &event.context)
    }

    pub fn required_for(
        &self,
        syscall: &str,
        ctx: &EventContext,
    ) -> Result<Option<Promise>, ClassificationError> {
        match self.rules.get(syscall) {
            None => Ok(None),
            Some(SyscallRule::Always(p)) => Ok(*p),
            Some(SyscallRule::ByKey { key, arms }) => {
                for (cond, required) in arms {
                    match cond.matches(ctx) {
                        Some(true) => return Ok(*required),
                        Some(false) => {}
                        None => break,
                    }
                }
                Err(ClassificationError {
                    syscall: syscall.to_owned(),
                    key: *key,
                })
            }
        }
    }

    /// Context key the syscall's rule branches on, if any.
    pub fn required_key(&self, syscall: &str) -> Option<ContextKey> {
        match self.rules.get(syscall)? {
            SyscallRule::Always(_) => None,
            SyscallRule::ByKey { key, .. } => Some(*key),
        }
    }

    /// Whether the syscall is in the table with a promise on some branch.
    pub fn is_mapped(&self, syscall: &str) -> bool {
        !self.candidates(syscall).is_empty()
    }

    /// Union of the promises any branch of the syscall's rule may demand.
    pub fn candidates(&self, syscall: &str) -> PromiseSet {
        match self.rules.get(syscall) {
            None => PromiseSet::EMPTY,
            Some(SyscallRule::Always(p)) => p.iter().copied().collect(),
            Some(SyscallRule::ByKey { arms, .. }) => arms.iter().filter_map(|(_, p)| *p).collect(),
        }
    }

    /// All rules, sorted by syscall name.
    pub fn rules(&self) -> Vec<MappingRule<'_>> {
        let mut out = Vec::new();
        for (syscall, rule) in &self.rules {
            match rule {
                SyscallRule::Always(p) => out.push(MappingRule {
                    syscall,
                    condition: None,
                    required: *p,
                }),
                SyscallRule::ByKey { arms, .. } => {
                    out.extend(arms.iter().map(|(c, p)| MappingRule {
                        syscall,
                        condition: Some(*c),
                        required: *p,
                    }));
                }
            }
        }
        out
    }

    /// Every (syscall, context) pair the table distinguishes.
    pub fn cases(&self) -> Vec<(String, EventContext)> {
        self.rules()
            .into_iter()
            .map(|r| {
                let ctx = r.condition.map(Condition::to_context).unwrap_or_default();
                (r.syscall.to_owned(), ctx)
            })
            .collect()
    }

    pub fn syscalls(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Convenience wrapper over [`MappingTable::parse`].
pub fn load_mapping_table(source: &str) -> Result<MappingTable, MappingError> {
    MappingTable::parse(source)
}

struct ParsedRule {
    condition: Option<Condition>,
    required: Option<Promise>,
}

fn parse_line(text: &str) -> Result<(String, ParsedRule), MappingErrorKind> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let syntax = |msg: &str| MappingErrorKind::Syntax(format!("{msg}: `{text}`"));

    let (syscall, condition, target) = match tokens.as_slice() {
        ["syscall", name, "->", target] => (*name, None, *target),
        ["syscall", name, "when", cond, "->", target] => (*name, Some(*cond), *target),
        _ => {
            return Err(syntax(
                "expected `syscall <name> [when <key>=<value>] -> <promise|none>`",
            ))
        }
    };
    if syscall.is_empty()
        || !syscall
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
    {
        return Err(syntax("invalid syscall name"));
    }

    let condition = match condition {
        None => None,
        Some(cond) => {
            let (key, value) = cond
                .split_once('=')
                .ok_or_else(|| syntax("condition must be key=value"))?;
            let key: ContextKey = key
                .parse()
                .map_err(|()| MappingErrorKind::UnknownKey(key.to_owned()))?;
            let cond = key
                .parse_value(value)
                .ok_or_else(|| MappingErrorKind::BadValue {
                    key: key.to_string(),
                    value: value.to_owned(),
                })?;
            Some(cond)
        }
    };

    let required = match target {
        "none" => None,
        token => Some(
            token
                .parse::<Promise>()
                .map_err(|_| MappingErrorKind::UnknownPromise(token.to_owned()))?,
        ),
    };
    Ok((
        syscall.to_owned(),
        ParsedRule {
            condition,
            required,
        },
    ))
}

fn overlaps(a: Option<Condition>, b: Option<Condition>) -> bool {
    match (a, b) {
        (None, _) | (_, None) => true,
        // Conditions on different keys can both hold for one event.
        (Some(a), Some(b)) => a.key() != b.key() || a == b,
    }
}
