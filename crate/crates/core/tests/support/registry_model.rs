//! Reference model of the task registry and an operation-sequence checker.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use threadbox_core::{DeclareOutcome, DeclareRequest, PromiseSet, Registry, RegistryError};

#[derive(Debug, Clone)]
pub enum Op {
    Register(u32),
    Declare {
        tid: u32,
        tgid: u32,
        bits: u8,
    },
    Exit {
        tid: u32,
        tgid: u32,
    },
    ProcessExit(u32),
    /// `parent` creates `child`, as a thread of `tgid` or as a new process.
    Clone {
        parent: u32,
        tgid: u32,
        child: u32,
        thread: bool,
    },
}

pub fn op() -> impl Strategy<Value = Op> {
    // small id ranges so tids collide across tgids
    let tid = 1u32..6;
    let tgid = 1u32..4;
    prop_oneof![
        tgid.clone().prop_map(Op::Register),
        (tid.clone(), tgid.clone(), 0u8..128).prop_map(|(tid, tgid, bits)| Op::Declare {
            tid,
            tgid,
            bits
        }),
        (tid.clone(), tgid.clone()).prop_map(|(tid, tgid)| Op::Exit { tid, tgid }),
        tgid.clone().prop_map(Op::ProcessExit),
        (tid.clone(), tgid, tid, any::<bool>()).prop_map(|(parent, tgid, child, thread)| {
            Op::Clone {
                parent,
                tgid,
                child,
                thread,
            }
        }),
    ]
}

#[derive(Debug, Default)]
pub struct Model {
    registered: BTreeSet<u32>,
    sandboxes: BTreeMap<(u32, u32), u8>,
}

impl Model {
    fn check_all(&self, reg: &Registry) -> Result<(), String> {
        for tgid in 1..4 {
            if reg.is_registered(tgid) != self.registered.contains(&tgid) {
                return Err(format!("registration of {tgid} diverged"));
            }
            for tid in 1..6 {
                let got = reg.lookup(tid, tgid).map(|e| e.promises.bits());
                let want = self.sandboxes.get(&(tid, tgid)).copied();
                if got != want {
                    return Err(format!("({tid},{tgid}): registry {got:?}, model {want:?}"));
                }
            }
        }
        if reg.thread_count() != self.sandboxes.len() {
            return Err(format!(
                "{} entries, model has {}",
                reg.thread_count(),
                self.sandboxes.len()
            ));
        }
        Ok(())
    }
}

/// Applies `ops` to a fresh registry and the model and reports the first
/// divergence.
pub fn check(ops: &[Op]) -> Result<(), String> {
    let reg = Registry::default();
    let mut m = Model::default();
    for (i, op) in ops.iter().enumerate() {
        let ctx = |e: String| format!("step {i} {op:?}: {e}");
        match *op {
            Op::Register(tgid) => {
                reg.register_process(tgid).map_err(|e| ctx(e.to_string()))?;
                m.registered.insert(tgid);
            }
            Op::Declare { tid, tgid, bits } => {
                let set = PromiseSet::from_bits(bits).unwrap();
                let got = reg.declare_promises(DeclareRequest::new(tid, tgid, set));
                let key = (tid, tgid);
                match (got, m.registered.contains(&tgid), m.sandboxes.get(&key)) {
                    (Err(RegistryError::Unregistered(t)), false, _) if t == tgid => {}
                    (Ok(DeclareOutcome::AlreadyDeclared { existing }), true, Some(&first)) => {
                        if existing.promises.bits() != first {
                            return Err(ctx("write-once violated".into()));
                        }
                    }
                    (Ok(DeclareOutcome::Declared { entry, .. }), true, None) => {
                        if entry.promises.bits() != bits {
                            return Err(ctx("declared the wrong set".into()));
                        }
                        m.sandboxes.insert(key, bits);
                    }
                    (got, reg_ok, prior) => {
                        return Err(ctx(format!(
                            "got {got:?}, registered={reg_ok}, prior={prior:?}"
                        )));
                    }
                }
            }
            Op::Exit { tid, tgid } => {
                let got = reg.remove_task(tid, tgid).map(|e| e.promises.bits());
                if got != m.sandboxes.remove(&(tid, tgid)) {
                    return Err(ctx(format!("removed {got:?}")));
                }
            }
            Op::ProcessExit(tgid) => {
                let got: Vec<u32> = reg.process_exit(tgid).iter().map(|e| e.tid).collect();
                let want: BTreeSet<u32> = m
                    .sandboxes
                    .keys()
                    .filter(|k| k.1 == tgid)
                    .map(|k| k.0)
                    .collect();
                if got.iter().copied().collect::<BTreeSet<_>>() != want || got.len() != want.len() {
                    return Err(ctx(format!(
                        "process_exit returned {got:?}, model {want:?}"
                    )));
                }
                m.sandboxes.retain(|k, _| k.1 != tgid);
                m.registered.remove(&tgid);
            }
            Op::Clone {
                parent,
                tgid,
                child,
                thread,
            } => {
                // the registry is not told about clones; a new task starts
                // without a sandbox whatever its parent had
                let new_tgid = if thread { tgid } else { 3 + child };
                if (thread && child == parent) || m.sandboxes.contains_key(&(child, new_tgid)) {
                    continue;
                }
                if reg.lookup(child, new_tgid).is_some() {
                    return Err(ctx("new task inherited a sandbox".into()));
                }
            }
        }
        m.check_all(&reg).map_err(ctx)?;
    }
    Ok(())
}
