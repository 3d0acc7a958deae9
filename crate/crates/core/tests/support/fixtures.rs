//! Scenario traces and the verdicts and policies expected from them.

use std::collections::HashMap;
use std::path::PathBuf;

use threadbox_core::replay::{merge_reports, with_policies};
use threadbox_core::{
    learn_from_trace, parse_trace, replay, MappingTable, Promise, ReplayOptions, TraceLine,
};

/// (seq, tid, syscall, promise) of a kill point.
pub type Kill = (u64, u32, &'static str, Promise);

/// (trace, expected kill)
pub const KILLS: &[(&str, Option<Kill>)] = &[
    ("login.trace", None),
    (
        "register-exploit.trace",
        Some((17, 4214, "execve", Promise::Proc)),
    ),
    (
        "wormhole-backdoor.trace",
        Some((10, 6004, "clone", Promise::Proc)),
    ),
    ("pdf-xxe.trace", Some((15, 5127, "socket", Promise::Net))),
];

/// (trace, learned policy lines)
pub const LEARNED: &[(&str, &[&str])] = &[
    ("login-learn.trace", &["login: rpath net"]),
    ("extract-file.trace", &["Extract file: wpath"]),
    ("handle-text.trace", &["_handle_text:"]),
    ("pdf-learn.trace", &["parser: rpath ipc"]),
];

pub fn dir() -> PathBuf {
    let here = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let own = here.join("fixtures");
    if own.join("login.trace").exists() {
        own
    } else {
        here.join("../core/fixtures")
    }
}

pub fn load(name: &str) -> Vec<TraceLine> {
    let text = std::fs::read_to_string(dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    parse_trace(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn check_kills() -> Result<(), String> {
    for &(name, want) in KILLS {
        let r = replay(
            &load(name),
            MappingTable::bundled(),
            ReplayOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let got = r.kill_points.first().map(|k| {
            let step = r.steps.iter().find(|s| s.seq == k.seq).expect("kill step");
            (k.seq, k.tid, step.syscall.as_str(), k.promise)
        });
        if got != want || r.kill_count() > 1 {
            return Err(format!(
                "{name}: kill {got:?} (of {}), expected {want:?}",
                r.kill_count()
            ));
        }
    }
    Ok(())
}

pub fn check_learning() -> Result<(), String> {
    for &(name, want) in LEARNED {
        let got: Vec<String> = learn_from_trace(&load(name), MappingTable::bundled())
            .map_err(|e| e.to_string())?
            .iter()
            .map(ToString::to_string)
            .collect();
        if got != want {
            return Err(format!("{name}: learned {got:?}, expected {want:?}"));
        }
    }
    Ok(())
}

/// Learns from each scenario trace with every sandbox forced into complain
/// mode, then replays it enforcing the learned policies: nothing may be
/// killed, and removing any single learned promise must cause a kill.
pub fn check_sound_and_minimal() -> Result<(), String> {
    let names = KILLS.iter().map(|k| k.0).chain(LEARNED.iter().map(|l| l.0));
    for name in names {
        let lines = load(name);
        let learning = replay(
            &lines,
            MappingTable::bundled(),
            ReplayOptions {
                force_complain: true,
            },
        )
        .map_err(|e| e.to_string())?
        .learning;
        let learned: HashMap<String, _> = merge_reports(&learning)
            .into_iter()
            .map(|p| (p.name, p.promises))
            .collect();
        let enforced = with_policies(&lines, &learned);
        let r = replay(&enforced, MappingTable::bundled(), ReplayOptions::default())
            .map_err(|e| e.to_string())?;
        if r.kill_count() != 0 {
            return Err(format!(
                "{name}: learned policies {learned:?} still kill at {:?}",
                r.kill_points
            ));
        }
        for (label, set) in &learned {
            for p in set.iter() {
                let mut weaker = learned.clone();
                weaker.get_mut(label).unwrap().remove(p);
                let r = replay(
                    &with_policies(&lines, &weaker),
                    MappingTable::bundled(),
                    ReplayOptions::default(),
                )
                .map_err(|e| e.to_string())?;
                if r.kill_count() == 0 {
                    return Err(format!("{name}: `{label}` does not need {}", p.name()));
                }
            }
        }
    }
    Ok(())
}
