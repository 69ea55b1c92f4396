//! Contract validators. Each one reads kernel tables defensively and
//! reports what it finds instead of trusting the structures it checks.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::counters::ObjType;
use crate::kernel::{Kernel, ProcState, ThreadState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub contract: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ContractReport {
    pub violations: Vec<Violation>,
}

impl ContractReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, contract: &'static str, detail: String) {
        self.violations.push(Violation { contract, detail });
    }
}

pub const PID_UNIQUENESS: &str = "pid uniqueness";
pub const RUN_QUEUE: &str = "run queue consistency";
pub const TCB_OWNERSHIP: &str = "TCB ownership";
pub const COUNTER_AGREEMENT: &str = "counter agreement";
pub const COUNTER_UNDERFLOW: &str = "counter underflow";

pub fn validate(k: &Kernel) -> ContractReport {
    let mut r = ContractReport::default();
    pid_uniqueness(k, &mut r);
    run_queue(k, &mut r);
    tcb_ownership(k, &mut r);
    counters(k, &mut r);
    r
}

fn pid_uniqueness(k: &Kernel, r: &mut ContractReport) {
    let mut seen: BTreeMap<u32, u32> = BTreeMap::new();
    for (_, pcb) in k.heap.pcbs.live() {
        let Some(pcb) = pcb else { continue };
        if pcb.state != ProcState::Reaped {
            *seen.entry(pcb.pid).or_default() += 1;
        }
    }
    for (pid, n) in seen.iter().filter(|(_, n)| **n > 1) {
        r.push(PID_UNIQUENESS, format!("pid {pid} held by {n} processes"));
    }
    for (pid, slot) in &k.procs {
        match k.heap.pcbs.get(*slot) {
            Some(p) if p.pid == *pid => {}
            Some(p) => r.push(PID_UNIQUENESS, format!("process table pid {pid} points at PCB with pid {}", p.pid)),
            None => r.push(PID_UNIQUENESS, format!("process table pid {pid} points at a dead slot")),
        }
    }
}

fn run_queue(k: &Kernel, r: &mut ContractReport) {
    let mut queued = BTreeSet::new();
    for tid in &k.run_queue {
        if !queued.insert(*tid) {
            r.push(RUN_QUEUE, format!("tid {tid} queued twice"));
        }
        match k.thread(*tid) {
            Some(t) if t.state == ThreadState::Runnable => {}
            Some(t) => r.push(RUN_QUEUE, format!("tid {tid} queued while {:?}", t.state)),
            None => r.push(RUN_QUEUE, format!("queued tid {tid} has no TCB")),
        }
    }
    if let Some(cur) = k.current {
        if queued.contains(&cur) {
            r.push(RUN_QUEUE, format!("running tid {cur} is also queued"));
        }
        match k.thread(cur) {
            Some(t) if t.state == ThreadState::Running => {}
            _ => r.push(RUN_QUEUE, format!("running tid {cur} is not a RUNNING thread")),
        }
    }
    for t in k.threads() {
        if t.state == ThreadState::Runnable && !queued.contains(&t.tid) {
            r.push(RUN_QUEUE, format!("runnable tid {} missing from the run queue", t.tid));
        }
    }
}

fn tcb_ownership(k: &Kernel, r: &mut ContractReport) {
    for (_, t) in k.heap.tcbs.live() {
        let Some(t) = t else { continue };
        let owner = k.process(t.owner_pid);
        match owner {
            Some(p) if p.state == ProcState::Live && p.thread_ids.contains(&t.tid) => {}
            Some(p) if p.state == ProcState::Live => {
                r.push(TCB_OWNERSHIP, format!("tid {} claims pid {} which does not list it", t.tid, p.pid))
            }
            _ => r.push(TCB_OWNERSHIP, format!("tid {} owned by dead pid {}", t.tid, t.owner_pid)),
        }
    }
    for p in k.processes() {
        for tid in &p.thread_ids {
            if k.thread(*tid).is_none_or(|t| t.owner_pid != p.pid) {
                r.push(TCB_OWNERSHIP, format!("pid {} lists tid {tid} which it does not own", p.pid));
            }
        }
    }
}

fn counters(k: &Kernel, r: &mut ContractReport) {
    let Some(d) = k.dmode() else { return };
    for ty in ObjType::ALL {
        let counted = d.area.counters.count(ty.id()) as usize;
        let live = k.live_objects(ty);
        if counted != live {
            r.push(COUNTER_AGREEMENT, format!("{} counter {counted} but {live} live slots", ty.name()));
        }
        let under = d.area.counters.underflows(ty.id());
        if under > 0 {
            r.push(COUNTER_UNDERFLOW, format!("{} counter freed below zero {under} times", ty.name()));
        }
    }
}
