use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_threadbox");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name),
    )
    .unwrap()
}

fn threadbox(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn replay_matches_goldens_and_exit_codes() {
    for (trace, code) in [
        ("login", 0),
        ("register-exploit", 3),
        ("wormhole-backdoor", 3),
        ("pdf-xxe", 3),
    ] {
        let path = fixture(&format!("{trace}.trace"));
        let out = threadbox(&["replay", "--trace", path.to_str().unwrap()]);
        assert_eq!(
            out.status.code(),
            Some(code),
            "{trace}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(stdout(&out), golden(&format!("{trace}.txt")), "{trace}");
    }
}

#[test]
fn replay_jsonl_is_one_object_per_line() {
    let path = fixture("pdf-xxe.trace");
    for format in ["jsonl", "json-lines"] {
        let out = threadbox(&[
            "replay",
            "--trace",
            path.to_str().unwrap(),
            "--format",
            format,
        ]);
        assert_eq!(out.status.code(), Some(3));
        let text = stdout(&out);
        let objects: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(objects.len() > 10);
    }
}

#[test]
fn learn_prints_policies() {
    for (trace, want) in [
        ("login-learn", "login: rpath net\n"),
        ("extract-file", "Extract file: wpath\n"),
        ("handle-text", "_handle_text:\n"),
        ("pdf-learn", "parser: rpath ipc\n"),
    ] {
        let out = threadbox(&[
            "learn",
            "--trace",
            fixture(&format!("{trace}.trace")).to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{trace}");
        assert_eq!(stdout(&out), want, "{trace}");
    }
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_map = dir.path().join("bad.map");
    std::fs::write(&bad_map, "syscall socket when sock_domain=inet -> net\n").unwrap();
    let bad_trace = dir.path().join("bad.trace");
    std::fs::write(&bad_trace, "1 1 open_sesame what\n").unwrap();
    let login = fixture("login.trace");
    let cases: Vec<Vec<&str>> = vec![
        vec!["replay", "--trace", "/nonexistent/trace"],
        vec![
            "replay",
            "--trace",
            login.to_str().unwrap(),
            "--format",
            "xml",
        ],
        vec!["replay", "--trace", bad_trace.to_str().unwrap()],
        vec!["check-mapping", "--mapping", bad_map.to_str().unwrap()],
        vec!["learn", "--trace", login.to_str().unwrap()],
        vec!["bench", "--mode", "nope"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = threadbox(&args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn check_mapping_accepts_the_default_table() {
    let map = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/mapping/default.map");
    let out = threadbox(&["check-mapping", "--mapping", map.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("ok: "));
}

#[test]
fn logs_filters_by_name_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.log");
    for trace in ["login-learn", "pdf-xxe"] {
        let path = fixture(&format!("{trace}.trace"));
        threadbox(&[
            "--log",
            log.to_str().unwrap(),
            "replay",
            "--trace",
            path.to_str().unwrap(),
        ]);
    }
    let all = std::fs::read_to_string(&log).unwrap();
    assert!(all.lines().count() >= 3, "{all}");
    let out = threadbox(&["logs", "--file", log.to_str().unwrap(), "--name", "parser"]);
    let parser = stdout(&out);
    assert_eq!(parser.lines().count(), 1, "{parser}");
    assert!(parser.contains("parser"));
    let out = threadbox(&["logs", "--file", log.to_str().unwrap(), "--tgid", "4210"]);
    assert!(stdout(&out).lines().all(|l| l.contains("4210")));
    assert!(stdout(&out).lines().count() >= 2);
}

#[test]
fn nested_supervision_exits_4() {
    // either the host cannot trace at all, or the inner supervisor cannot
    // trace while being traced; both report missing capability
    let out = threadbox(&["run", "--", BIN, "run", "--", "/bin/true"]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
