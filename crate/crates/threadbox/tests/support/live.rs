//! Live scenarios driven through the fixture program, shared by the live
//! integration tests and the acceptance report.

use std::path::Path;
use std::process::{Command, Stdio};

use threadbox::live::{self, RunOutcome, SuperviseOptions, KILL_EXIT_CODE};
use threadbox_core::{parse_trace, replay, MappingTable, Promise, ReplayOptions, Verdict};

pub const FIXTURE: &str = env!("CARGO_BIN_EXE_threadbox-fixture");

/// `None` when live supervision works here, otherwise why not.
pub fn unavailable() -> Option<String> {
    live::probe_support().err().map(|e| e.to_string())
}

pub struct Run {
    pub outcome: RunOutcome,
    pub stdout: String,
}

pub fn run_fixture(args: &[&str]) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_path = dir.path().join("stdout");
    let out = std::fs::File::create(&out_path).map_err(|e| e.to_string())?;
    let mut command = Command::new(FIXTURE);
    command.args(args).stdout(out).stderr(Stdio::null());
    let outcome = live::run(command, SuperviseOptions::default()).map_err(|e| e.to_string())?;
    let stdout = std::fs::read_to_string(&out_path).map_err(|e| e.to_string())?;
    Ok(Run { outcome, stdout })
}

fn expect(cond: bool, what: &str, run: &Run) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(format!(
            "{what}; exit {} kills {:?} stdout {:?}",
            run.outcome.exit_code(),
            run.outcome.kills,
            run.stdout
        ))
    }
}

/// Replaying the recorded trace reproduces the live verdicts one for one.
pub fn check_replay_equivalence(run: &Run) -> Result<(), String> {
    let lines = parse_trace(&run.outcome.trace).map_err(|e| format!("recorded trace: {e}"))?;
    let replayed = replay(&lines, MappingTable::bundled(), ReplayOptions::default())
        .map_err(|e| e.to_string())?;
    let ours: Vec<_> = run
        .outcome
        .verdicts
        .iter()
        .map(|v| (v.tid, v.tgid, v.syscall.clone(), v.decision))
        .collect();
    let theirs: Vec<_> = replayed
        .decisions()
        .map(|(s, d)| (s.tid, s.tgid, s.syscall.clone(), *d))
        .collect();
    if ours != theirs {
        let at = ours
            .iter()
            .zip(&theirs)
            .position(|(a, b)| a != b)
            .unwrap_or(ours.len().min(theirs.len()));
        return Err(format!(
            "live and replay diverge at verdict {at} of {}/{}: {:?} vs {:?}",
            ours.len(),
            theirs.len(),
            ours.get(at),
            theirs.get(at)
        ));
    }
    let kills: Vec<_> = run
        .outcome
        .kills
        .iter()
        .map(|k| (k.tid, k.tgid, k.promise))
        .collect();
    let replay_kills: Vec<_> = replayed
        .kill_points
        .iter()
        .map(|k| (k.tid, k.tgid, k.promise))
        .collect();
    if kills != replay_kills {
        return Err(format!("kills {kills:?} vs replay {replay_kills:?}"));
    }
    Ok(())
}

/// A sandboxed thread without `proc` is killed at exec, before the new
/// program can create the sentinel file.
pub fn check_exec_violation() -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sentinel = dir.path().join("sentinel");
    let run = run_fixture(&["exec-violation", sentinel.to_str().unwrap()])?;
    expect(
        run.outcome.exit_code() == KILL_EXIT_CODE,
        "expected exit 137",
        &run,
    )?;
    expect(!Path::new(&sentinel).exists(), "sentinel was created", &run)?;
    expect(
        run.outcome.kills.len() == 1 && run.outcome.kills[0].promise == Promise::Proc,
        "expected one proc kill",
        &run,
    )?;
    let last = run
        .outcome
        .verdicts
        .last()
        .map(|v| (v.syscall.as_str(), v.decision.verdict));
    expect(
        last == Some(("execve", Verdict::Kill)),
        "last verdict should be the execve kill",
        &run,
    )?;
    Ok(run)
}

/// An undeclared sibling thread may exec while another thread is sandboxed.
pub fn check_sibling_exec() -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sentinel = dir.path().join("sentinel");
    let run = run_fixture(&["sibling-exec", sentinel.to_str().unwrap()])?;
    expect(
        run.outcome.exit_code() == 0 && run.outcome.kills.is_empty(),
        "expected clean exit",
        &run,
    )?;
    expect(sentinel.exists(), "sentinel missing", &run)?;
    Ok(run)
}

/// A thread created by a `threading`-only sandbox is unrestricted.
pub fn check_clone_unsandboxed() -> Result<Run, String> {
    let run = run_fixture(&["clone-unsandboxed"])?;
    expect(
        run.outcome.exit_code() == 0 && run.outcome.kills.is_empty(),
        "expected clean exit",
        &run,
    )?;
    expect(
        run.stdout.contains("child thread unrestricted"),
        "child thread did not report",
        &run,
    )?;
    Ok(run)
}

/// A process forked by a `proc`-only sandbox is unrestricted.
pub fn check_fork_unsandboxed() -> Result<Run, String> {
    let run = run_fixture(&["fork-unsandboxed"])?;
    expect(
        run.outcome.exit_code() == 0 && run.outcome.kills.is_empty(),
        "expected clean exit",
        &run,
    )?;
    expect(
        run.stdout.contains("child exit 0"),
        "child did not succeed",
        &run,
    )?;
    Ok(run)
}

/// A sandboxed thread runs with no_new_privs set and may use its promises.
pub fn check_no_new_privs() -> Result<Run, String> {
    let run = run_fixture(&["read-ok", "/proc/self/status"])?;
    expect(run.outcome.exit_code() == 0, "expected clean exit", &run)?;
    expect(
        run.stdout.contains("no_new_privs=1"),
        "no_new_privs not set",
        &run,
    )?;
    expect(
        run.stdout.contains("read ") && !run.stdout.contains("read 0 bytes"),
        "read failed",
        &run,
    )?;
    Ok(run)
}

/// Connecting an inet socket from `rpath ipc` is a net violation.
pub fn check_connect_violation() -> Result<Run, String> {
    let run = run_fixture(&["connect-inet-violation"])?;
    expect(
        run.outcome.exit_code() == KILL_EXIT_CODE,
        "expected exit 137",
        &run,
    )?;
    expect(
        !run.stdout.contains("connected"),
        "connect went through",
        &run,
    )?;
    let kill = run
        .outcome
        .verdicts
        .iter()
        .find(|v| v.decision.verdict == Verdict::Kill);
    expect(
        kill.is_some_and(|v| v.syscall == "connect" && v.decision.promise == Some(Promise::Net)),
        "expected a net kill on connect",
        &run,
    )?;
    Ok(run)
}

/// A second declaration is ignored and the first set stays in force.
pub fn check_redeclare() -> Result<Run, String> {
    let run = run_fixture(&["redeclare"])?;
    expect(
        run.stdout.contains("ignored"),
        "second declaration was not ignored",
        &run,
    )?;
    expect(
        !run.stdout.contains("socket opened"),
        "the second set took effect",
        &run,
    )?;
    expect(
        run.outcome.exit_code() == KILL_EXIT_CODE,
        "expected exit 137",
        &run,
    )?;
    Ok(run)
}

/// Complain mode logs instead of killing and learns the used set.
pub fn check_learning() -> Result<Run, String> {
    let run = run_fixture(&["learn", "/proc/self/status"])?;
    expect(
        run.outcome.exit_code() == 0 && run.outcome.kills.is_empty(),
        "expected clean exit",
        &run,
    )?;
    expect(
        run.stdout.contains("learned"),
        "scenario did not finish",
        &run,
    )?;
    let learned: Vec<String> = threadbox_core::replay::merge_reports(&run.outcome.learning)
        .iter()
        .map(ToString::to_string)
        .collect();
    expect(
        learned == ["login: rpath net"],
        &format!("learned {learned:?}"),
        &run,
    )?;
    Ok(run)
}

pub type Scenario = fn() -> Result<Run, String>;

pub const SCENARIOS: &[(&str, Scenario)] = &[
    ("exec violation", check_exec_violation),
    ("sibling exec", check_sibling_exec),
    ("clone unsandboxed", check_clone_unsandboxed),
    ("fork unsandboxed", check_fork_unsandboxed),
    ("no_new_privs", check_no_new_privs),
    ("connect violation", check_connect_violation),
    ("redeclare", check_redeclare),
    ("learning", check_learning),
];
