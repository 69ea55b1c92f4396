//! Scripted diagnosis sessions: run a buggy scenario, get into d-mode,
//! issue shell commands and check that the answers pin the bug down.
//!
//! An iteration is one kernel run plus one shell session. The record and
//! bisect script instead counts replays.

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::{ScenarioKind, Workload, MSG_FORK_FAILED, RUG_ADDR};
use crate::kernel::{ConfigError, HeapSlots, Kernel, KernelConfig, PanicReason, Pending, ProcState, RunOutcome};
use crate::replay::{bisect, bisect_budget, record, ReplayTrace, Replayer};
use crate::shell::{self, CommandResult};
use crate::vm::VmOpKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisKind {
    MemoryExhaustion,
    UseAfterFree,
    NonDeterminism,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisScript {
    pub kind: DiagnosisKind,
    pub scenario: ScenarioKind,
    pub config: KernelConfig,
    pub commands: Vec<String>,
    pub max_steps: u64,
    /// Iterations (or replays, for bisect) the diagnosis may use.
    pub iteration_budget: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub claim: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exchange {
    pub command: String,
    pub result: CommandResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub kind: DiagnosisKind,
    pub seed: u64,
    pub passed: bool,
    pub iterations: u32,
    pub iteration_budget: u32,
    pub transcript: Vec<Exchange>,
    pub findings: Vec<Finding>,
}

impl DiagnosisReport {
    pub fn text(&self) -> String {
        let mut s = format!(
            "{:?} seed {}: {} in {} of {} iterations\n",
            self.kind,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" },
            self.iterations,
            self.iteration_budget
        );
        for e in &self.transcript {
            s.push_str(&format!("dmode> {}\n{}\n", e.command, e.result.text.trim_end()));
        }
        for f in &self.findings {
            s.push_str(&format!("[{}] {}\n", if f.holds { "x" } else { " " }, f.claim));
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("SCENARIO_DID_NOT_FAIL: {0}")]
    DidNotFail(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("replay: {0}")]
    Replay(#[from] crate::replay::ReplayError),
}

/// Consecutive "Fork failed" lines taken as persistent exhaustion.
pub const PERSISTENT_FAILURES: usize = 64;

pub fn memory_exhaustion_script(seed: u64) -> DiagnosisScript {
    DiagnosisScript {
        kind: DiagnosisKind::MemoryExhaustion,
        scenario: ScenarioKind::ForkBomb,
        config: KernelConfig {
            seed,
            bug_flags: ScenarioKind::ForkBomb.bug(),
            heap_slots: HeapSlots { pcb: 64, ..HeapSlots::default() },
            workload: Workload::new(ScenarioKind::ForkBomb),
            ..KernelConfig::default()
        },
        commands: vec!["memstat".into(), "ps".into()],
        max_steps: 200_000,
        iteration_budget: 1,
    }
}

pub fn use_after_free_script(seed: u64) -> DiagnosisScript {
    DiagnosisScript {
        kind: DiagnosisKind::UseAfterFree,
        scenario: ScenarioKind::RugPull,
        config: KernelConfig {
            seed,
            bug_flags: ScenarioKind::RugPull.bug(),
            workload: Workload::new(ScenarioKind::RugPull),
            ..KernelConfig::default()
        },
        commands: vec!["cr2".into(), format!("vmlog --addr {RUG_ADDR:#010x}")],
        max_steps: 20_000,
        iteration_budget: 1,
    }
}

/// `pad` lengthens the run before the race.
pub fn non_determinism_script(seed: u64, pad: u32) -> DiagnosisScript {
    DiagnosisScript {
        kind: DiagnosisKind::NonDeterminism,
        scenario: ScenarioKind::DeadYield,
        config: KernelConfig {
            seed,
            bug_flags: ScenarioKind::DeadYield.bug(),
            workload: Workload::dead_yield(pad),
            record_trace: true,
            ..KernelConfig::default()
        },
        commands: vec!["cr2".into(), "ps".into()],
        max_steps: 20_000,
        iteration_budget: 0,
    }
}

/// First seed in `seeds` whose run of `config` panics with `reason`.
pub fn find_failing_seed(
    config: &KernelConfig,
    reason: PanicReason,
    seeds: impl IntoIterator<Item = u64>,
    max_steps: u64,
) -> Option<u64> {
    seeds.into_iter().find(|&seed| {
        let cfg = KernelConfig { seed, dmode_enabled: false, ..config.clone() };
        let Ok(mut k) = Kernel::boot(cfg) else { return false };
        k.run(max_steps).panic().is_some_and(|p| p.reason == reason)
    })
}

fn issue(k: &mut Kernel, commands: &[String]) -> Vec<Exchange> {
    commands
        .iter()
        .map(|c| Exchange { command: c.clone(), result: shell::exec(k, c) })
        .collect()
}

fn result<'a>(t: &'a [Exchange], cmd: &str) -> Option<&'a Value> {
    t.iter().find(|e| e.command.starts_with(cmd)).map(|e| &e.result.data)
}

fn fork_failures_persist(k: &Kernel) -> bool {
    let c = k.console();
    c.len() >= PERSISTENT_FAILURES && c[c.len() - PERSISTENT_FAILURES..].iter().all(|l| l.text == MSG_FORK_FAILED)
}

pub fn run_diagnosis(script: &DiagnosisScript) -> Result<DiagnosisReport, DiagnosisError> {
    match script.kind {
        DiagnosisKind::MemoryExhaustion => memory_exhaustion(script),
        DiagnosisKind::UseAfterFree => use_after_free(script),
        DiagnosisKind::NonDeterminism => non_determinism(script),
    }
}

fn memory_exhaustion(script: &DiagnosisScript) -> Result<DiagnosisReport, DiagnosisError> {
    let mut k = Kernel::boot(script.config.clone())?;
    if k.run_until(script.max_steps, fork_failures_persist).is_some() {
        return Err(DiagnosisError::DidNotFail("fork never kept failing".into()));
    }
    shell::press_magic_key(&mut k);
    let transcript = issue(&mut k, &script.commands);
    let cap = script.config.heap_slots.pcb as u64;
    let pcb_count = result(&transcript, "memstat")
        .and_then(|d| d["rows"].as_array())
        .and_then(|rows| rows.iter().find(|r| r["type"] == "PCB"))
        .and_then(|r| r["count"].as_u64());
    let live = result(&transcript, "ps")
        .and_then(|d| d["rows"].as_array())
        .map(|rows| rows.iter().filter(|r| r["state"] == "LIVE").count());
    let findings = vec![
        Finding { claim: format!("memstat shows PCB count at capacity {cap}"), holds: pcb_count == Some(cap) },
        Finding { claim: "ps lists at most 2 LIVE processes".into(), holds: live.is_some_and(|n| n <= 2) },
    ];
    Ok(finish(script, 1, transcript, findings))
}

fn use_after_free(script: &DiagnosisScript) -> Result<DiagnosisReport, DiagnosisError> {
    let mut k = Kernel::boot(script.config.clone())?;
    let outcome = k.run(script.max_steps);
    let Some(ctx) = outcome.panic().cloned() else {
        return Err(DiagnosisError::DidNotFail(format!("run ended {}", outcome.name())));
    };
    if !matches!(outcome, RunOutcome::ShellEntered { .. }) {
        return Err(DiagnosisError::DidNotFail("d-mode did not take the panic".into()));
    }
    let transcript = issue(&mut k, &script.commands);
    let cr2 = result(&transcript, "cr2").and_then(|d| d["cr2"].as_u64());
    // the fault itself is logged on the same page; look at the newest
    // operation that changed the mapping
    let newest = result(&transcript, "vmlog").and_then(|d| d["records"].as_array()).and_then(|recs| {
        recs.iter()
            .find(|r| {
                let op = r["op"].as_str().unwrap_or("");
                [VmOpKind::NewPages, VmOpKind::RemovePages, VmOpKind::MapPage, VmOpKind::UnmapPage]
                    .iter()
                    .any(|k| k.name() == op)
            })
            .cloned()
    });
    let findings = vec![
        Finding { claim: format!("cr2 is {RUG_ADDR:#010x}"), holds: cr2 == Some(RUG_ADDR as u64) },
        Finding {
            claim: "newest mapping change on that page is REMOVE_PAGES by another thread".into(),
            holds: newest.is_some_and(|r| r["op"] == "REMOVE_PAGES" && r["tid"].as_u64() != Some(ctx.tid as u64)),
        },
    ];
    Ok(finish(script, 1, transcript, findings))
}

/// Tid 2 existed and its TCB is gone.
pub fn second_thread_freed(k: &Kernel) -> bool {
    k.threads_created() >= 2 && k.thread(2).is_none()
}

/// Walks one replay step by step; the first step where `pred` holds.
pub fn linear_first_step(trace: &ReplayTrace, mut pred: impl FnMut(&Kernel) -> bool) -> Option<u64> {
    let mut r = Replayer::new(trace.clone()).ok()?;
    loop {
        if pred(r.kernel()) {
            return Some(r.kernel().step());
        }
        if r.kernel().step() >= trace.final_step {
            return None;
        }
        r.step();
    }
}

fn non_determinism(script: &DiagnosisScript) -> Result<DiagnosisReport, DiagnosisError> {
    let (outcome, trace) = record(script.config.clone(), script.max_steps)?;
    let Some(ctx) = outcome.panic().cloned() else {
        return Err(DiagnosisError::DidNotFail(format!("run ended {}", outcome.name())));
    };
    let budget = bisect_budget(trace.len());
    let b = bisect(&trace, second_thread_freed)?;
    let oracle = linear_first_step(&trace, second_thread_freed);

    // look at the state right where the bisect landed
    let mut transcript = Vec::new();
    let mut pending_yield = false;
    if let Some(s) = b.step {
        let mut r = Replayer::new(trace.clone())?;
        r.run_until(s);
        let k = r.kernel_mut();
        pending_yield = k.thread(1).is_some_and(|t| matches!(t.pending, Pending::Yield { target: 2, .. }));
        if shell::enter(k, shell::ShellTrigger::MagicKey, None).is_ok() {
            transcript = issue(k, &script.commands);
        }
    }
    let findings = vec![
        Finding { claim: format!("run panicked with USE_AFTER_FREE ({ctx})"), holds: ctx.reason == PanicReason::UseAfterFree },
        Finding {
            claim: format!("bisect found step {:?}, linear scan {:?}", b.step, oracle),
            holds: b.step.is_some() && b.step == oracle,
        },
        Finding { claim: format!("{} replays within ceil(log2 N)+1 = {budget}", b.replays), holds: b.replays <= budget },
        Finding { claim: "tid 2 vanished while tid 1 was mid-yield to it".into(), holds: pending_yield },
    ];
    let mut s = script.clone();
    s.iteration_budget = budget;
    Ok(finish(&s, b.replays, transcript, findings))
}

fn finish(script: &DiagnosisScript, iterations: u32, transcript: Vec<Exchange>, findings: Vec<Finding>) -> DiagnosisReport {
    let passed = iterations <= script.iteration_budget && findings.iter().all(|f| f.holds);
    DiagnosisReport {
        kind: script.kind,
        seed: script.config.seed,
        passed,
        iterations,
        iteration_budget: script.iteration_budget,
        transcript,
        findings,
    }
}

/// Number of LIVE processes in a `ps` payload.
pub fn live_in_ps(data: &Value) -> usize {
    data["rows"].as_array().map_or(0, |rows| rows.iter().filter(|r| r["state"] == "LIVE").count())
}

/// Number of REAPED rows in a `ps` payload (leaked PCBs).
pub fn reaped_in_ps(data: &Value) -> usize {
    let reaped = serde_json::to_value(ProcState::Reaped).unwrap();
    data["rows"].as_array().map_or(0, |rows| rows.iter().filter(|r| r["state"] == reaped).count())
}
