//! Replay report formats, looked up by name.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;
use serde_json::json;

use crate::engine::Verdict;
use crate::replay::{Outcome, ReplayResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub events: usize,
    pub allow: usize,
    pub kill: usize,
    pub log_only: usize,
    pub post_kill: usize,
}

impl Summary {
    pub fn of(result: &ReplayResult) -> Summary {
        let mut s = Summary {
            events: result.steps.len(),
            ..Summary::default()
        };
        for step in &result.steps {
            match step.outcome {
                Outcome::PostKill => s.post_kill += 1,
                Outcome::Evaluated(d) => match d.verdict {
                    Verdict::Allow => s.allow += 1,
                    Verdict::Kill => s.kill += 1,
                    Verdict::LogOnly => s.log_only += 1,
                },
            }
        }
        s
    }
}

pub trait ReportFormat: Send + Sync {
    fn name(&self) -> &'static str;
    fn render(&self, result: &ReplayResult, out: &mut dyn Write) -> io::Result<()>;
}

/// One `key=value` line per decision, kill point and learning report,
/// then a summary line.
pub struct TextReport;

impl ReportFormat for TextReport {
    fn name(&self) -> &'static str {
        "text"
    }

    fn render(&self, result: &ReplayResult, out: &mut dyn Write) -> io::Result<()> {
        for step in &result.steps {
            let (verdict, promise, reason) = match step.outcome {
                Outcome::PostKill => ("post_kill", "-".to_owned(), "-"),
                Outcome::Evaluated(d) => (
                    d.verdict.as_str(),
                    d.promise.map_or_else(|| "-".to_owned(), |p| p.to_string()),
                    d.reason.as_str(),
                ),
            };
            writeln!(
                out,
                "seq={} tid={} tgid={} syscall={} verdict={verdict} promise={promise} reason={reason}",
                step.seq, step.tid, step.tgid, step.syscall
            )?;
        }
        for k in &result.kill_points {
            writeln!(
                out,
                "kill seq={} tid={} tgid={} promise={}",
                k.seq, k.tid, k.tgid, k.promise
            )?;
        }
        for l in &result.learning {
            writeln!(
                out,
                "learned [{}] tid={} tgid={} promises={}",
                l.name, l.tid, l.tgid, l.used
            )?;
        }
        let s = Summary::of(result);
        writeln!(
            out,
            "summary events={} allow={} kill={} log_only={} post_kill={}",
            s.events, s.allow, s.kill, s.log_only, s.post_kill
        )
    }
}

/// The same records as [`TextReport`], one JSON object per line.
pub struct JsonLinesReport;

impl ReportFormat for JsonLinesReport {
    fn name(&self) -> &'static str {
        "jsonl"
    }

    fn render(&self, result: &ReplayResult, out: &mut dyn Write) -> io::Result<()> {
        let mut emit = |v: serde_json::Value| writeln!(out, "{v}");
        for step in &result.steps {
            let (verdict, promise, reason) = match step.outcome {
                Outcome::PostKill => ("post_kill", None, None),
                Outcome::Evaluated(d) => (
                    d.verdict.as_str(),
                    d.promise.map(|p| p.name()),
                    Some(d.reason.as_str()),
                ),
            };
            emit(json!({
                "type": "decision",
                "seq": step.seq,
                "tid": step.tid,
                "tgid": step.tgid,
                "syscall": step.syscall,
                "verdict": verdict,
                "promise": promise,
                "reason": reason,
            }))?;
        }
        for k in &result.kill_points {
            emit(json!({
                "type": "kill",
                "seq": k.seq,
                "tid": k.tid,
                "tgid": k.tgid,
                "promise": k.promise.name(),
            }))?;
        }
        for l in &result.learning {
            emit(json!({
                "type": "learned",
                "name": l.name,
                "tid": l.tid,
                "tgid": l.tgid,
                "promises": l.used.to_string(),
            }))?;
        }
        let s = Summary::of(result);
        emit(json!({
            "type": "summary",
            "events": s.events,
            "allow": s.allow,
            "kill": s.kill,
            "log_only": s.log_only,
            "post_kill": s.post_kill,
        }))
    }
}

/// Report formats by name.
pub struct FormatRegistry {
    formats: BTreeMap<&'static str, Box<dyn ReportFormat>>,
}

impl FormatRegistry {
    pub fn empty() -> FormatRegistry {
        FormatRegistry {
            formats: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, format: Box<dyn ReportFormat>) {
        self.formats.insert(format.name(), format);
    }

    pub fn get(&self, name: &str) -> Option<&dyn ReportFormat> {
        self.formats.get(name).map(|f| f.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.formats.keys().copied().collect()
    }
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut r = FormatRegistry::empty();
        r.register(Box::new(TextReport));
        r.register(Box::new(JsonLinesReport));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::MappingTable;
    use crate::replay::{replay, ReplayOptions};
    use crate::trace::parse_trace;

    fn sample() -> ReplayResult {
        let lines = parse_trace(
            "@register 5\n@declare 7 5 \"rpath\" name=w complain=false\n@declare 8 5 \"\" name=l complain=true\n8 5 openat open_access=read\n7 5 lseek\n7 5 execve\n8 5 read\n",
        )
        .unwrap();
        replay(&lines, MappingTable::bundled(), ReplayOptions::default()).unwrap()
    }

    fn render(name: &str, r: &ReplayResult) -> String {
        let mut buf = Vec::new();
        FormatRegistry::default()
            .get(name)
            .unwrap()
            .render(r, &mut buf)
            .unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn registry_lists_formats() {
        assert_eq!(FormatRegistry::default().names(), vec!["jsonl", "text"]);
        assert!(FormatRegistry::default().get("xml").is_none());
    }

    #[test]
    fn text_report() {
        let text = render("text", &sample());
        let expected = "\
seq=4 tid=8 tgid=5 syscall=openat verdict=log_only promise=rpath reason=violation
seq=5 tid=7 tgid=5 syscall=lseek verdict=allow promise=- reason=unmapped
seq=6 tid=7 tgid=5 syscall=execve verdict=kill promise=proc reason=violation
seq=7 tid=8 tgid=5 syscall=read verdict=post_kill promise=- reason=-
kill seq=6 tid=7 tgid=5 promise=proc
learned [l] tid=8 tgid=5 promises=rpath
summary events=4 allow=1 kill=1 log_only=1 post_kill=1
";
        assert_eq!(text, expected);
    }

    #[test]
    fn jsonl_carries_every_text_field() {
        let r = sample();
        let text = render("text", &r);
        let json = render("jsonl", &r);
        let text_lines: Vec<&str> = text.lines().collect();
        let objs: Vec<serde_json::Value> = json
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(text_lines.len(), objs.len());
        for (t, o) in text_lines.iter().zip(&objs) {
            for field in t.split(' ').filter_map(|kv| kv.split_once('=')) {
                let (key, value) = field;
                let key = if key == "promises" { "promises" } else { key };
                let v = &o[key];
                let rendered = match v {
                    serde_json::Value::Null => "-".to_owned(),
                    serde_json::Value::String(s) => s.split(' ').next().unwrap_or("").to_owned(),
                    other => other.to_string(),
                };
                assert_eq!(rendered, value, "field {key} of `{t}`");
            }
        }
    }
}
