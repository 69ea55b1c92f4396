//! Record and replay.
//!
//! A recording keeps every interrupt delivery together with the step at
//! which it was delivered. The step counter is unique across a run, so it
//! alone identifies the delivery point. Replay boots the same config with
//! the timer generator switched off and re-delivers the recorded events at
//! their steps; determinism does the rest. Going back to an earlier state
//! means replaying from boot.
//!
//! # Trace file format
//!
//! All integers little-endian.
//!
//! ```text
//! "DPRT"  u16 version (1)  u8 coordinate kind (0 = global micro-step)
//! config: u64 seed, u32 timer_period, u8 timer_enabled,
//!         u32 pcb, u32 tcb, u32 mem_region, u32 vmlog_capacity,
//!         u8 dmode_enabled, u8 bug_flags, u8 record_trace, u32 append_cost,
//!         u8 scenario, u32 ops, u32 children, u32 pad
//! u64 seed
//! u64 event count, then per event:
//!         u64 step, u8 kind (0 timer, 1 keyboard), u8 has_payload, u8 payload
//! u8 outcome (0 completed, 1 panicked, 2 budget exhausted, 3 shell entered)
//!         panicked: panic record; shell entered: u8 has_panic, panic record
//! panic record: u8 reason, u64 step, u32 pid, u32 tid, u8 has_vaddr,
//!         u32 vaddr, u16 message length + UTF-8, u8 frame count,
//!         then per frame u8 length + UTF-8
//! u64 final_step, u64 final_hash
//! ```

use std::collections::BTreeSet;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{
    BugFlags, ConfigError, HeapSlots, InterruptKind, Kernel, KernelConfig, PanicContext, PanicReason, RunOutcome,
};
use crate::shell;
use crate::workloads::{ScenarioKind, Workload};

pub const TRACE_MAGIC: &[u8; 4] = b"DPRT";
pub const TRACE_VERSION: u16 = 1;
/// Events are keyed by the global micro-step counter.
pub const COORD_STEP: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReplayEvent {
    pub step: u64,
    pub kind: InterruptKind,
    pub payload: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayTrace {
    pub config: KernelConfig,
    pub seed: u64,
    pub events: Vec<ReplayEvent>,
    pub outcome: RunOutcome,
    pub final_step: u64,
    pub final_hash: u64,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("TRACE_INVALID: {0}")]
    TraceInvalid(String),
    #[error("FORMAT_ERROR at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Outcome of the current state of `k`, as a trace would record it.
fn observed_outcome(k: &Kernel) -> RunOutcome {
    if let Some(s) = k.dmode().and_then(|d| d.session()) {
        return RunOutcome::ShellEntered { panic: s.panic_ctx.clone() };
    }
    k.outcome().cloned().unwrap_or(RunOutcome::StepBudgetExhausted)
}

impl ReplayTrace {
    /// Snapshot of a recording kernel; `None` if it is not recording.
    pub fn from_kernel(k: &Kernel) -> Option<ReplayTrace> {
        let events = k.recorded_events()?.to_vec();
        Some(ReplayTrace {
            config: k.config().clone(),
            seed: k.config().seed,
            events,
            outcome: observed_outcome(k),
            final_step: k.step(),
            final_hash: k.state_hash(),
        })
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if self.seed != self.config.seed {
            return Err(ReplayError::TraceInvalid("trace seed differs from its config".into()));
        }
        self.config.validate()?;
        for w in self.events.windows(2) {
            if w[1].step <= w[0].step {
                return Err(ReplayError::TraceInvalid(format!(
                    "event steps not strictly increasing ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        if let Some(e) = self.events.last() {
            if e.step > self.final_step {
                return Err(ReplayError::TraceInvalid(format!("event at step {} after final step", e.step)));
            }
        }
        Ok(())
    }

    /// Number of steps covered, counting boot as step 0.
    pub fn len(&self) -> u64 {
        self.final_step + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ReplayTrace, ReplayError> {
        ReplayTrace::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(TRACE_MAGIC);
        w.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        w.push(COORD_STEP);
        let c = &self.config;
        w.extend_from_slice(&c.seed.to_le_bytes());
        w.extend_from_slice(&c.timer_period.to_le_bytes());
        w.push(c.timer_enabled as u8);
        w.extend_from_slice(&c.heap_slots.pcb.to_le_bytes());
        w.extend_from_slice(&c.heap_slots.tcb.to_le_bytes());
        w.extend_from_slice(&c.heap_slots.mem_region.to_le_bytes());
        w.extend_from_slice(&c.vmlog_capacity.to_le_bytes());
        w.push(c.dmode_enabled as u8);
        w.push(c.bug_flags.bits());
        w.push(c.record_trace as u8);
        w.extend_from_slice(&c.append_cost.to_le_bytes());
        w.push(c.workload.kind.code());
        w.extend_from_slice(&c.workload.ops.to_le_bytes());
        w.extend_from_slice(&c.workload.children.to_le_bytes());
        w.extend_from_slice(&c.workload.pad.to_le_bytes());
        w.extend_from_slice(&self.seed.to_le_bytes());
        w.extend_from_slice(&(self.events.len() as u64).to_le_bytes());
        for e in &self.events {
            w.extend_from_slice(&e.step.to_le_bytes());
            w.push(e.kind.code());
            w.push(e.payload.is_some() as u8);
            w.push(e.payload.unwrap_or(0));
        }
        match &self.outcome {
            RunOutcome::Completed => w.push(0),
            RunOutcome::Panicked(p) => {
                w.push(1);
                write_panic(&mut w, p);
            }
            RunOutcome::StepBudgetExhausted => w.push(2),
            RunOutcome::ShellEntered { panic } => {
                w.push(3);
                w.push(panic.is_some() as u8);
                if let Some(p) = panic {
                    write_panic(&mut w, p);
                }
            }
        }
        w.extend_from_slice(&self.final_step.to_le_bytes());
        w.extend_from_slice(&self.final_hash.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ReplayTrace, ReplayError> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4)? != TRACE_MAGIC {
            return Err(r.err_at(0, "bad magic"));
        }
        let at = r.at;
        if r.u16()? != TRACE_VERSION {
            return Err(r.err_at(at, "unsupported version"));
        }
        let at = r.at;
        if r.u8()? != COORD_STEP {
            return Err(r.err_at(at, "unknown coordinate kind"));
        }
        let seed = r.u64()?;
        let timer_period = r.u32()?;
        let timer_enabled = r.flag()?;
        let heap_slots = HeapSlots { pcb: r.u32()?, tcb: r.u32()?, mem_region: r.u32()? };
        let vmlog_capacity = r.u32()?;
        let dmode_enabled = r.flag()?;
        let at = r.at;
        let bug_flags = BugFlags::from_bits(r.u8()?).ok_or_else(|| r.err_at(at, "unknown bug flag bits"))?;
        let record_trace = r.flag()?;
        let append_cost = r.u32()?;
        let at = r.at;
        let kind = ScenarioKind::from_code(r.u8()?).ok_or_else(|| r.err_at(at, "unknown scenario"))?;
        let workload = Workload { kind, ops: r.u32()?, children: r.u32()?, pad: r.u32()? };
        let config = KernelConfig {
            seed,
            timer_period,
            timer_enabled,
            heap_slots,
            vmlog_capacity,
            dmode_enabled,
            bug_flags,
            record_trace,
            append_cost,
            workload,
        };
        let trace_seed = r.u64()?;
        let at = r.at;
        let n = r.u64()?;
        if n > (bytes.len() as u64) / 11 {
            return Err(r.err_at(at, "event count exceeds file size"));
        }
        let mut events = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let step = r.u64()?;
            let at = r.at;
            let kind = InterruptKind::from_code(r.u8()?).ok_or_else(|| r.err_at(at, "unknown interrupt kind"))?;
            let has = r.flag()?;
            let p = r.u8()?;
            events.push(ReplayEvent { step, kind, payload: has.then_some(p) });
        }
        let at = r.at;
        let outcome = match r.u8()? {
            0 => RunOutcome::Completed,
            1 => RunOutcome::Panicked(r.panic()?),
            2 => RunOutcome::StepBudgetExhausted,
            3 => {
                let panic = if r.flag()? { Some(r.panic()?) } else { None };
                RunOutcome::ShellEntered { panic }
            }
            _ => return Err(r.err_at(at, "unknown outcome")),
        };
        let final_step = r.u64()?;
        let final_hash = r.u64()?;
        if r.at != bytes.len() {
            return Err(r.err_at(r.at, "trailing bytes"));
        }
        Ok(ReplayTrace { config, seed: trace_seed, events, outcome, final_step, final_hash })
    }
}

fn write_panic(w: &mut Vec<u8>, p: &PanicContext) {
    w.push(p.reason.code());
    w.extend_from_slice(&p.step.to_le_bytes());
    w.extend_from_slice(&p.pid.to_le_bytes());
    w.extend_from_slice(&p.tid.to_le_bytes());
    w.push(p.faulting_vaddr.is_some() as u8);
    w.extend_from_slice(&p.faulting_vaddr.unwrap_or(0).to_le_bytes());
    let msg = &p.message.as_bytes()[..p.message.len().min(u16::MAX as usize)];
    w.extend_from_slice(&(msg.len() as u16).to_le_bytes());
    w.extend_from_slice(msg);
    let frames = &p.kernel_call_trace[..p.kernel_call_trace.len().min(u8::MAX as usize)];
    w.push(frames.len() as u8);
    for f in frames {
        let b = &f.as_bytes()[..f.len().min(u8::MAX as usize)];
        w.push(b.len() as u8);
        w.extend_from_slice(b);
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: &str) -> ReplayError {
        ReplayError::Format { offset, message: message.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ReplayError> {
        if self.b.len() - self.at < n {
            return Err(self.err_at(self.at, "unexpected end of file"));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ReplayError> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool, ReplayError> {
        let at = self.at;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.err_at(at, "flag byte must be 0 or 1")),
        }
    }

    fn u16(&mut self) -> Result<u16, ReplayError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ReplayError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ReplayError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String, ReplayError> {
        let at = self.at;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err_at(at, "invalid UTF-8"))
    }

    fn panic(&mut self) -> Result<PanicContext, ReplayError> {
        let at = self.at;
        let reason = PanicReason::from_code(self.u8()?).ok_or_else(|| self.err_at(at, "unknown panic reason"))?;
        let step = self.u64()?;
        let pid = self.u32()?;
        let tid = self.u32()?;
        let has = self.flag()?;
        let vaddr = self.u32()?;
        let n = self.u16()? as usize;
        let message = self.string(n)?;
        let frames = self.u8()?;
        let mut kernel_call_trace = Vec::new();
        for _ in 0..frames {
            let n = self.u8()? as usize;
            kernel_call_trace.push(self.string(n)?);
        }
        Ok(PanicContext {
            reason,
            message,
            faulting_vaddr: has.then_some(vaddr),
            pid,
            tid,
            step,
            kernel_call_trace,
        })
    }
}

/// Boots `config` with recording on and runs at most `max_steps`.
pub fn record(config: KernelConfig, max_steps: u64) -> Result<(RunOutcome, ReplayTrace), ConfigError> {
    let mut k = Kernel::boot(KernelConfig { record_trace: true, ..config })?;
    let outcome = k.run(max_steps);
    let trace = ReplayTrace::from_kernel(&k).expect("recording enabled");
    Ok((outcome, trace))
}

/// Why a replay stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ReplayStop {
    Breakpoint(u64),
    Until(u64),
    Finished(RunOutcome),
}

/// A kernel being driven from a trace.
pub struct Replayer {
    trace: ReplayTrace,
    kernel: Kernel,
    breakpoints: BTreeSet<u64>,
}

impl Replayer {
    pub fn new(trace: ReplayTrace) -> Result<Replayer, ReplayError> {
        trace.validate()?;
        let kernel = Kernel::boot_replay(trace.config.clone(), trace.events.clone())?;
        Ok(Replayer { trace, kernel, breakpoints: BTreeSet::new() })
    }

    pub fn with_breakpoints(trace: ReplayTrace, bps: impl IntoIterator<Item = u64>) -> Result<Replayer, ReplayError> {
        let mut r = Replayer::new(trace)?;
        for b in bps {
            r.add_breakpoint(b);
        }
        Ok(r)
    }

    pub fn add_breakpoint(&mut self, step: u64) {
        self.breakpoints.insert(step);
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    pub fn trace(&self) -> &ReplayTrace {
        &self.trace
    }

    pub fn into_kernel(self) -> Kernel {
        self.kernel
    }

    fn finished(&self) -> Option<ReplayStop> {
        if self.kernel.shell_active() || self.kernel.outcome().is_some() {
            return Some(ReplayStop::Finished(observed_outcome(&self.kernel)));
        }
        None
    }

    /// Advances to `target` (clamped to the end of the trace). A magic-key
    /// shell opened along the way is closed again unless the recorded run
    /// ended in it.
    fn advance_to(&mut self, target: u64) -> Option<ReplayStop> {
        let target = target.min(self.trace.final_step);
        loop {
            if let Some(f) = self.finished() {
                return Some(f);
            }
            let now = self.kernel.step();
            if now >= target {
                if now == self.trace.final_step {
                    return Some(self.finish_at_end());
                }
                return None;
            }
            if let RunOutcome::ShellEntered { panic: None } = self.kernel.run(target - now) {
                shell::quit(&mut self.kernel).expect("session open");
            }
        }
    }

    /// At the last step the recorded run may still have taken one more
    /// preemption point (the magic key that opened its shell).
    fn finish_at_end(&mut self) -> ReplayStop {
        if let RunOutcome::ShellEntered { panic: None } = self.trace.outcome {
            self.kernel.run(1);
        }
        self.finished().unwrap_or(ReplayStop::Finished(RunOutcome::StepBudgetExhausted))
    }

    /// Runs to `step`, stopping early at a breakpoint.
    pub fn run_until(&mut self, step: u64) -> ReplayStop {
        let next_bp = self.breakpoints.range(self.kernel.step() + 1..=step).next().copied();
        let target = next_bp.unwrap_or(step);
        if let Some(stop) = self.advance_to(target) {
            return stop;
        }
        match next_bp {
            Some(b) => ReplayStop::Breakpoint(b),
            None => ReplayStop::Until(target),
        }
    }

    /// Runs to the next breakpoint or to the end of the trace.
    pub fn resume(&mut self) -> ReplayStop {
        let end = self.trace.final_step;
        self.run_until(end)
    }

    pub fn step(&mut self) -> ReplayStop {
        let s = self.kernel.step() + 1;
        self.run_until(s)
    }
}

/// Replays a whole trace. Returns the outcome and the final kernel.
pub fn replay(trace: &ReplayTrace) -> Result<(RunOutcome, Kernel), ReplayError> {
    let mut r = Replayer::new(trace.clone())?;
    let outcome = match r.resume() {
        ReplayStop::Finished(o) => o,
        _ => RunOutcome::StepBudgetExhausted,
    };
    Ok((outcome, r.into_kernel()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BisectResult {
    /// First step at which the predicate holds; `None` is NOT_FOUND.
    pub step: Option<u64>,
    pub replays: u32,
}

/// Finds the first step where `pred` holds, assuming it stays true from
/// there on. Each probe replays the trace from boot to the probed step.
pub fn bisect(trace: &ReplayTrace, mut pred: impl FnMut(&Kernel) -> bool) -> Result<BisectResult, ReplayError> {
    trace.validate()?;
    let mut replays = 0;
    let mut probe = |s: u64| -> Result<bool, ReplayError> {
        replays += 1;
        let mut r = Replayer::new(trace.clone())?;
        r.run_until(s);
        Ok(pred(r.kernel()))
    };
    let (mut lo, mut hi) = (0, trace.final_step);
    if !probe(hi)? {
        return Ok(BisectResult { step: None, replays });
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if probe(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(BisectResult { step: Some(lo), replays })
}

/// `ceil(log2 n) + 1`, the probe budget for a trace of `n` steps.
pub fn bisect_budget(n: u64) -> u32 {
    let n = n.max(1);
    (64 - (n - 1).leading_zeros()) + 1
}
