//! Deterministic replay of native traces through a fresh engine.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{kill_semantics, Decision, Engine, LearningReport};
use crate::error::{EngineError, ReplayError};
use crate::mapping::MappingTable;
use crate::promise::{Promise, PromiseSet};
use crate::registry::{label_for, DeclareRequest};
use crate::trace::{TraceKind, TraceLine};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Treat every declaration as complain mode.
    pub force_complain: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Evaluated(Decision),
    /// The event's process was already killed.
    PostKill,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub seq: u64,
    pub tid: u32,
    pub tgid: u32,
    pub syscall: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillPoint {
    pub seq: u64,
    pub tgid: u32,
    pub tid: u32,
    pub promise: Promise,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub steps: Vec<ReplayStep>,
    /// At most one per process, in trace order.
    pub kill_points: Vec<KillPoint>,
    /// In finalization order.
    pub learning: Vec<LearningReport>,
    /// Audit lines emitted during the replay.
    pub log: Vec<String>,
}

impl ReplayResult {
    pub fn kill_count(&self) -> usize {
        self.kill_points.len()
    }

    pub fn decisions(&self) -> impl Iterator<Item = (&ReplayStep, &Decision)> {
        self.steps.iter().filter_map(|s| match &s.outcome {
            Outcome::Evaluated(d) => Some((s, d)),
            Outcome::PostKill => None,
        })
    }
}

/// Replays `lines` in order. Directives mutate a registry private to this
/// replay; a kill marks every later line of the same process post-kill
/// until that process's `@exit_process`.
pub fn replay(
    lines: &[TraceLine],
    mapping: Arc<MappingTable>,
    options: ReplayOptions,
) -> Result<ReplayResult, ReplayError> {
    let engine = Engine::with_mapping(mapping);
    let mut result = ReplayResult::default();
    let mut killed: BTreeSet<u32> = BTreeSet::new();

    for line in lines {
        let seq = line.seq;
        let fail = |source: EngineError| ReplayError::Engine { seq, source };
        let tgid = line.kind.tgid();
        if killed.contains(&tgid) {
            match &line.kind {
                TraceKind::Event(ev) => result.steps.push(ReplayStep {
                    seq,
                    tid: ev.tid,
                    tgid,
                    syscall: ev.syscall.clone(),
                    outcome: Outcome::PostKill,
                }),
                TraceKind::ExitProcess { .. } => {
                    killed.remove(&tgid);
                }
                _ => {}
            }
            continue;
        }
        match &line.kind {
            TraceKind::Register { tgid } => {
                engine
                    .registry()
                    .register_process(*tgid)
                    .map_err(|e| fail(e.into()))?;
            }
            TraceKind::Declare {
                tid,
                tgid,
                promises,
                name,
                complain,
                debug,
            } => {
                let mut req = DeclareRequest::new(*tid, *tgid, *promises)
                    .complain(*complain || options.force_complain);
                req.name = name.clone();
                req.debug = *debug;
                engine.declare(req).map_err(fail)?;
            }
            TraceKind::Exit { tid, tgid } => {
                if let Some(report) = engine.task_exit(*tid, *tgid).map_err(fail)? {
                    result.learning.push(report);
                }
            }
            TraceKind::ExitProcess { tgid } => {
                result
                    .learning
                    .extend(engine.process_exit(*tgid).map_err(fail)?);
            }
            TraceKind::Event(ev) => {
                let decision = engine.evaluate(ev).map_err(fail)?;
                result.steps.push(ReplayStep {
                    seq,
                    tid: ev.tid,
                    tgid: ev.tgid,
                    syscall: ev.syscall.clone(),
                    outcome: Outcome::Evaluated(decision),
                });
                if let Some(kill) = kill_semantics(ev, &decision) {
                    result.kill_points.push(KillPoint {
                        seq,
                        tgid: kill.tgid,
                        tid: kill.tid,
                        promise: kill.promise,
                    });
                    killed.insert(kill.tgid);
                    result
                        .learning
                        .extend(engine.process_exit(kill.tgid).map_err(fail)?);
                }
            }
        }
    }

    let end_seq = lines.last().map_or(0, |l| l.seq);
    for entry in engine.registry().entries() {
        if entry.complain {
            let report = engine
                .finalize_learning(entry.tid, entry.tgid)
                .map_err(|source| ReplayError::Engine {
                    seq: end_seq,
                    source,
                })?;
            result.learning.push(report);
        }
    }
    result.log = engine.audit().lines();
    Ok(result)
}

/// Least promise set observed for one named sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub name: String,
    pub promises: PromiseSet,
}

impl fmt::Display for LearnedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.promises.is_empty() {
            write!(f, "{}:", self.name)
        } else {
            write!(f, "{}: {}", self.name, self.promises)
        }
    }
}

/// Learns one promise set per sandbox name from a trace's complain-mode
/// declarations. Threads sharing a name share a policy, so their sets are
/// merged. Names appear in order of first report.
pub fn learn_from_trace(
    lines: &[TraceLine],
    mapping: Arc<MappingTable>,
) -> Result<Vec<LearnedPolicy>, ReplayError> {
    let has_complain = lines
        .iter()
        .any(|l| matches!(l.kind, TraceKind::Declare { complain: true, .. }));
    if !has_complain {
        return Err(ReplayError::NothingToLearn);
    }
    let result = replay(lines, mapping, ReplayOptions::default())?;
    Ok(merge_reports(&result.learning))
}

pub fn merge_reports(reports: &[LearningReport]) -> Vec<LearnedPolicy> {
    let mut out: Vec<LearnedPolicy> = Vec::new();
    for r in reports {
        match out.iter_mut().find(|p| p.name == r.name) {
            Some(p) => p.promises = p.promises.union(r.used),
            None => out.push(LearnedPolicy {
                name: r.name.clone(),
                promises: r.used,
            }),
        }
    }
    out
}

/// Rewrites declarations: every sandbox whose label has a policy gets that
/// policy in enforce mode. Other declarations are left untouched.
pub fn with_policies(
    lines: &[TraceLine],
    policies: &HashMap<String, PromiseSet>,
) -> Vec<TraceLine> {
    lines
        .iter()
        .map(|l| {
            let mut l = l.clone();
            if let TraceKind::Declare {
                tid,
                name,
                promises,
                complain,
                ..
            } = &mut l.kind
            {
                if let Some(p) = policies.get(&label_for(name, *tid)) {
                    *promises = *p;
                    *complain = false;
                }
            }
            l
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Reason, Verdict};
    use crate::promise::parse_promises;
    use crate::trace::parse_trace;

    fn run(src: &str) -> ReplayResult {
        replay(
            &parse_trace(src).unwrap(),
            MappingTable::bundled(),
            ReplayOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn kill_marks_rest_of_process_post_kill() {
        let r =
            run("@register 5\n@declare 7 5 \"rpath\"\n7 5 execve\n8 5 read\n9 6 read\n7 5 read\n");
        assert_eq!(r.kill_points.len(), 1);
        assert_eq!(r.kill_points[0].seq, 3);
        assert_eq!(r.kill_points[0].tgid, 5);
        let statuses: Vec<_> = r
            .steps
            .iter()
            .map(|s| (s.seq, s.outcome == Outcome::PostKill))
            .collect();
        assert_eq!(statuses, vec![(3, false), (4, true), (5, false), (6, true)]);
    }

    #[test]
    fn one_violation_terminates_sibling_sandboxes() {
        let r = run(
            "@register 5\n@declare 5 5 \"net\"\n@declare 6 5 \"rpath\"\n5 5 socket sock_domain=inet\n6 5 execve\n5 5 socket sock_domain=inet\n6 5 read\n",
        );
        assert_eq!(r.kill_points.len(), 1);
        let post: Vec<u64> = r
            .steps
            .iter()
            .filter(|s| s.outcome == Outcome::PostKill)
            .map(|s| s.seq)
            .collect();
        assert_eq!(post, vec![6, 7]);
    }

    #[test]
    fn exit_process_allows_tgid_reuse() {
        let r = run("@register 5\n@declare 5 5 \"\"\n5 5 execve\n@exit_process 5\n5 5 execve\n");
        assert_eq!(r.kill_points.len(), 1);
        assert_eq!(
            r.steps[1].outcome,
            Outcome::Evaluated(Decision::allow(Reason::Unsandboxed, None))
        );
    }

    #[test]
    fn declare_unregistered_aborts() {
        let err = replay(
            &parse_trace("@declare 5 5 \"\"\n").unwrap(),
            MappingTable::bundled(),
            ReplayOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ReplayError::Engine { seq: 1, .. }));
    }

    #[test]
    fn learning_finalized_at_exit_and_end() {
        let r = run(
            "@register 5\n@declare 6 5 \"\" name=a complain=true\n6 5 openat open_access=read\n@exit 6 5\n6 5 execve\n@declare 7 5 \"\" name=b complain=true\n7 5 socket sock_domain=unix\n",
        );
        let got: Vec<(String, String)> = r
            .learning
            .iter()
            .map(|l| (l.name.clone(), l.used.to_string()))
            .collect();
        assert_eq!(
            got,
            vec![("a".into(), "rpath".into()), ("b".into(), "ipc".into())]
        );
    }

    #[test]
    fn learn_requires_complain() {
        let lines = parse_trace("@register 1\n@declare 1 1 \"net\"\n").unwrap();
        assert!(matches!(
            learn_from_trace(&lines, MappingTable::bundled()),
            Err(ReplayError::NothingToLearn)
        ));
    }

    #[test]
    fn same_name_policies_merge() {
        let lines = parse_trace(
            "@register 1\n@declare 2 1 \"\" name=h complain=true\n@declare 3 1 \"\" name=h complain=true\n2 1 openat open_access=read\n3 1 socket sock_domain=inet\n",
        )
        .unwrap();
        let learned = learn_from_trace(&lines, MappingTable::bundled()).unwrap();
        assert_eq!(learned.len(), 1);
        assert_eq!(learned[0].to_string(), "h: rpath net");
    }

    #[test]
    fn with_policies_switches_to_enforce() {
        let lines =
            parse_trace("@register 1\n@declare 2 1 \"\" name=h complain=true\n2 1 execve\n")
                .unwrap();
        let mut p = HashMap::new();
        p.insert("h".to_string(), parse_promises("rpath").unwrap());
        let r = replay(
            &with_policies(&lines, &p),
            MappingTable::bundled(),
            ReplayOptions::default(),
        )
        .unwrap();
        assert_eq!(r.kill_count(), 1);
        let (_, d) = r.decisions().next().unwrap();
        assert_eq!(d.verdict, Verdict::Kill);
    }
}
