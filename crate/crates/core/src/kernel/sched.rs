//! Run loop, preemption points, interrupt delivery and round-robin
//! scheduling.
//!
//! Each step's preemption point is processed at most once, lazily, right
//! before the next micro-step. That keeps a paused kernel (budget reached,
//! breakpoint hit) sitting exactly on the state after the last micro-step,
//! with the point's interrupt not yet delivered.

use std::collections::VecDeque;

use rand::Rng;
use serde::Serialize;

use super::{Kernel, KernelEvent, RunOutcome, SyscallError, ThreadState, Tid, MAGIC_KEY};
use crate::replay::ReplayEvent;
use crate::shell::{self, ShellTrigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InterruptKind {
    Timer,
    Keyboard,
}

impl InterruptKind {
    pub fn code(self) -> u8 {
        match self {
            InterruptKind::Timer => 0,
            InterruptKind::Keyboard => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<InterruptKind> {
        match c {
            0 => Some(InterruptKind::Timer),
            1 => Some(InterruptKind::Keyboard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct InterruptState {
    /// Step whose preemption point has been processed.
    point_step: Option<u64>,
    /// Whether an interrupt was delivered at `point_step`.
    delivered_at_point: bool,
    /// External interrupts that arrived after their point was used up.
    deferred: VecDeque<(InterruptKind, Option<u8>)>,
    pub(crate) suppressed_timers: u64,
    pub(crate) timer_deliveries: u64,
    pub(crate) keyboard: Vec<u8>,
}

#[derive(Debug, Clone)]
pub(crate) struct ReplayFeed {
    events: Vec<ReplayEvent>,
    next: usize,
}

impl ReplayFeed {
    pub(crate) fn new(events: Vec<ReplayEvent>) -> Self {
        ReplayFeed { events, next: 0 }
    }

    fn take_at(&mut self, step: u64) -> Option<ReplayEvent> {
        let e = self.events.get(self.next).filter(|e| e.step == step).copied();
        if e.is_some() {
            self.next += 1;
        }
        e
    }
}

const MAX_FREE_INSTRS: usize = 10_000;

impl Kernel {
    pub fn shell_active(&self) -> bool {
        self.dmode.as_ref().is_some_and(|d| d.session.is_some())
    }

    fn shell_outcome(&self) -> Option<RunOutcome> {
        let session = self.dmode.as_ref()?.session.as_ref()?;
        Some(RunOutcome::ShellEntered { panic: session.panic_ctx.clone() })
    }

    /// Advances the kernel by at most `max_steps` micro-steps.
    pub fn run(&mut self, max_steps: u64) -> RunOutcome {
        if let Some(o) = self.shell_outcome() {
            return o;
        }
        if let Some(o) = &self.halted {
            return o.clone();
        }
        let mut done = 0;
        loop {
            if done == max_steps {
                return RunOutcome::StepBudgetExhausted;
            }
            self.preemption_point();
            if let Some(o) = self.shell_outcome() {
                return o;
            }
            if self.current.is_none() && !self.schedule_next() {
                self.halted = Some(RunOutcome::Completed);
                return RunOutcome::Completed;
            }
            self.micro_step();
            done += 1;
            if let Some(o) = self.shell_outcome() {
                return o;
            }
            if let Some(o) = &self.halted {
                return o.clone();
            }
        }
    }

    /// Runs until `stop` holds (checked after every micro-step) or the
    /// kernel stops for another reason. Returns `None` when `stop` fired.
    pub fn run_until(&mut self, max_steps: u64, mut stop: impl FnMut(&Kernel) -> bool) -> Option<RunOutcome> {
        for _ in 0..max_steps {
            match self.run(1) {
                RunOutcome::StepBudgetExhausted => {
                    if stop(self) {
                        return None;
                    }
                }
                other => return Some(other),
            }
        }
        Some(RunOutcome::StepBudgetExhausted)
    }

    fn micro_step(&mut self) {
        let tid = self.current.expect("scheduled");
        self.clock.step += 1;
        let now = self.clock.ticks;
        if let Some(d) = self.dmode.as_mut() {
            d.area.vmlog.release(tid, now);
        }
        self.call_path.clear();
        let r = self.exec_thread(tid);
        self.clock.ticks += 1;
        match r {
            Ok(()) => {}
            Err(SyscallError::Panicked(ctx)) => {
                self.panic(*ctx);
            }
            Err(e) => {
                let ctx = self.panic_context(
                    super::PanicReason::AssertFail,
                    format!("unhandled kernel error {e}"),
                    None,
                );
                self.panic(ctx);
            }
        }
    }

    pub(crate) fn guard_spin(&self, spins: usize) -> Result<(), SyscallError> {
        if spins > MAX_FREE_INSTRS {
            Err(self.assert_fail("user program ran without making a syscall"))
        } else {
            Ok(())
        }
    }

    /// Processes the preemption point at the current step, once.
    fn preemption_point(&mut self) {
        let step = self.clock.step;
        if self.irq.point_step == Some(step) {
            return;
        }
        self.irq.point_step = Some(step);
        self.irq.delivered_at_point = false;

        if let Some((kind, payload)) = self.irq.deferred.pop_front() {
            self.deliver(kind, payload);
        }
        if let Some(feed) = self.feed.as_mut() {
            if let Some(e) = feed.take_at(step) {
                self.deliver(e.kind, e.payload);
            }
            return;
        }
        if self.config.timer_enabled {
            let fire = self.timer_rng.gen_range(0..self.config.timer_period) == 0;
            if fire && !self.irq.delivered_at_point {
                self.deliver(InterruptKind::Timer, None);
            }
        }
    }

    /// Delivers an interrupt from outside the run loop. The kernel is
    /// always between micro-steps here.
    pub fn deliver_interrupt(&mut self, kind: InterruptKind, payload: Option<u8>) {
        if kind == InterruptKind::Timer && self.shell_active() {
            self.irq.suppressed_timers += 1;
            return;
        }
        if self.halted.is_some() {
            return;
        }
        let step = self.clock.step;
        if self.irq.point_step != Some(step) {
            self.irq.point_step = Some(step);
            self.irq.delivered_at_point = false;
            if self.feed.is_none() && self.config.timer_enabled {
                // keep one draw per point whatever the point is used for
                let _ = self.timer_rng.gen_range(0..self.config.timer_period);
            }
        }
        if self.irq.delivered_at_point {
            self.irq.deferred.push_back((kind, payload));
            return;
        }
        self.deliver(kind, payload);
    }

    fn deliver(&mut self, kind: InterruptKind, payload: Option<u8>) {
        let step = self.clock.step;
        match kind {
            InterruptKind::Timer => {
                if self.shell_active() {
                    self.irq.suppressed_timers += 1;
                    return;
                }
                self.note_interrupt(step, kind, payload);
                self.irq.timer_deliveries += 1;
                self.preempt();
            }
            InterruptKind::Keyboard => {
                self.note_interrupt(step, kind, payload);
                if let Some(b) = payload {
                    self.irq.keyboard.push(b);
                }
                if payload == Some(MAGIC_KEY) && self.dmode.is_some() && !self.shell_active() {
                    shell::enter(self, ShellTrigger::MagicKey, None).expect("no session active");
                }
            }
        }
    }

    fn note_interrupt(&mut self, step: u64, kind: InterruptKind, payload: Option<u8>) {
        self.irq.delivered_at_point = true;
        if let Some(rec) = self.recorder.as_mut() {
            rec.push(ReplayEvent { step, kind, payload });
        }
        self.push_event(KernelEvent::Interrupt { step, kind, payload });
    }

    /// Timer: the running thread goes to the back of the queue.
    fn preempt(&mut self) {
        let Some(cur) = self.current else { return };
        let Some(next) = self.run_queue.pop_front() else { return };
        if let Ok(t) = self.tcb_mut(cur) {
            t.state = ThreadState::Runnable;
        }
        self.run_queue.push_back(cur);
        self.dispatch_to(next, Some(cur));
    }

    pub(crate) fn dispatch_to(&mut self, next: u32, from: Option<u32>) {
        if let Ok(t) = self.tcb_mut(next) {
            t.state = ThreadState::Running;
        }
        self.current = Some(next);
        let step = self.clock.step;
        self.push_event(KernelEvent::Switch { step, from, to: next });
    }

    /// Dispatches the head of the run queue if nothing is running, without
    /// executing it. For drivers of the direct syscall API.
    pub fn schedule(&mut self) -> Option<Tid> {
        if self.current.is_none() && self.halted.is_none() && !self.shell_active() {
            self.schedule_next();
        }
        self.current
    }

    fn schedule_next(&mut self) -> bool {
        match self.run_queue.pop_front() {
            Some(next) => {
                self.dispatch_to(next, None);
                true
            }
            None => false,
        }
    }

    /// Halts the kernel. With d-mode the shell takes over on its own
    /// working area; without it the panic is dumped to the console.
    pub fn panic(&mut self, ctx: super::PanicContext) -> RunOutcome {
        if self.halted.is_some() {
            return self.shell_outcome().unwrap_or_else(|| self.halted.clone().unwrap());
        }
        let step = self.clock.step;
        self.push_event(KernelEvent::Panic { step, reason: ctx.reason });
        self.halted = Some(RunOutcome::Panicked(ctx.clone()));
        if self.dmode.is_some() {
            shell::enter(self, ShellTrigger::Panic, Some(ctx.clone())).ok();
            RunOutcome::ShellEntered { panic: Some(ctx) }
        } else {
            let (pid, tid) = (ctx.pid, ctx.tid);
            for line in ctx.dump() {
                self.push_console(pid, tid, line);
            }
            RunOutcome::Panicked(ctx)
        }
    }

    pub(crate) fn halt_completed(&mut self) {
        if self.halted.is_none() {
            self.halted = Some(RunOutcome::Completed);
        }
    }

    pub fn suppressed_timers(&self) -> u64 {
        self.irq.suppressed_timers
    }

    pub fn timer_deliveries(&self) -> u64 {
        self.irq.timer_deliveries
    }

    pub fn keyboard_input(&self) -> &[u8] {
        &self.irq.keyboard
    }
}
