//! The simulated kernel: processes, threads, a round-robin scheduler that
//! switches only at preemption points, syscalls, and the typed heap.
//!
//! Execution is a sequence of micro-steps. Each micro-step is one kernel
//! operation on behalf of the running thread; the boundary after every
//! micro-step is a preemption point where an interrupt may be delivered.
//! Boot is micro-step 0, so a freshly booted kernel sits at step 0.

pub mod hash;
pub mod heap;
mod sched;
mod syscall;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use bitflags::bitflags;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dmode::counters::ObjType;
use crate::dmode::DMode;
use crate::replay::ReplayEvent;
use crate::vm::{AddressSpace, FaultRegister, MemRegion};
use crate::workloads::program::{Program, NUM_REGS};
use crate::workloads::Workload;
use heap::{KernelHeap, SlotRef};

pub use sched::InterruptKind;

pub type Pid = u32;
pub type Tid = u32;

/// Keyboard byte that drops a running kernel into the debug shell.
pub const MAGIC_KEY: u8 = 0x04;

bitflags! {
    /// Injectable kernel bugs.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct BugFlags: u8 {
        const LEAK_PCB_ON_WAIT = 1 << 0;
        const SKIP_VM_VALIDATION_IN_READFILE = 1 << 1;
        const STALE_TCB_YIELD = 1 << 2;
        const LEAK_REGION_ON_REMOVE = 1 << 3;
        const WILD_WRITE_ON_EXIT = 1 << 4;
    }
}

impl BugFlags {
    pub fn parse_one(name: &str) -> Option<BugFlags> {
        match name.to_ascii_uppercase().replace('-', "_").as_str() {
            "SKIP_VM_VALIDATION" => Some(BugFlags::SKIP_VM_VALIDATION_IN_READFILE),
            n => BugFlags::from_name(n),
        }
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter_names().map(|(n, _)| n).collect()
    }
}

impl Serialize for BugFlags {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.names())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HeapSlots {
    pub pcb: u32,
    pub tcb: u32,
    pub mem_region: u32,
}

impl Default for HeapSlots {
    fn default() -> Self {
        HeapSlots { pcb: 64, tcb: 128, mem_region: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KernelConfig {
    pub seed: u64,
    /// Mean virtual ticks between timer interrupts: each preemption point
    /// fires the timer with probability `1 / timer_period`.
    pub timer_period: u32,
    pub timer_enabled: bool,
    pub heap_slots: HeapSlots,
    pub vmlog_capacity: u32,
    pub dmode_enabled: bool,
    pub bug_flags: BugFlags,
    pub record_trace: bool,
    /// Overhead-meter ticks charged per VM log write.
    pub append_cost: u32,
    /// What init runs.
    pub workload: Workload,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            seed: 0,
            timer_period: 4,
            timer_enabled: true,
            heap_slots: HeapSlots::default(),
            vmlog_capacity: crate::dmode::vmlog::DEFAULT_CAPACITY as u32,
            dmode_enabled: true,
            bug_flags: BugFlags::empty(),
            record_trace: false,
            append_cost: 1,
            workload: Workload::default(),
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vmlog_capacity < 1 {
            return Err(ConfigError::VmlogCapacity);
        }
        if self.timer_period < 1 {
            return Err(ConfigError::TimerPeriod);
        }
        if self.heap_slots.pcb < 1 || self.heap_slots.tcb < 1 {
            return Err(ConfigError::NoRoomForInit);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("CONFIG_INVALID: vmlog_capacity must be at least 1")]
    VmlogCapacity,
    #[error("CONFIG_INVALID: timer_period must be at least 1")]
    TimerPeriod,
    #[error("CONFIG_INVALID: PCB and TCB pools need room for init")]
    NoRoomForInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcState {
    Live,
    Zombie,
    Reaped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pcb {
    pub pid: Pid,
    pub parent_pid: Pid,
    pub state: ProcState,
    pub exit_status: i32,
    pub thread_ids: BTreeSet<Tid>,
    pub address_space_id: u32,
    pub address_space: AddressSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ThreadState {
    Runnable,
    Running,
    Blocked,
    Exited,
}

/// Kernel-side continuation of a thread that is part-way through a syscall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pending {
    #[default]
    None,
    /// Yield looked up its target and is about to switch to it.
    Yield { target: Tid, slot: SlotRef },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tcb {
    pub tid: Tid,
    pub owner_pid: Pid,
    pub state: ThreadState,
    /// Index into the owning program's instruction list.
    pub pc: usize,
    pub regs: [i64; NUM_REGS],
    pub ret: i64,
    pub pending: Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PanicReason {
    PageFaultKernelMode,
    HeapExhaustedFatal,
    AssertFail,
    UseAfterFree,
}

impl PanicReason {
    pub const ALL: [PanicReason; 4] = [
        PanicReason::PageFaultKernelMode,
        PanicReason::HeapExhaustedFatal,
        PanicReason::AssertFail,
        PanicReason::UseAfterFree,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<PanicReason> {
        PanicReason::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PanicReason::PageFaultKernelMode => "PAGE_FAULT_KERNEL_MODE",
            PanicReason::HeapExhaustedFatal => "HEAP_EXHAUSTED_FATAL",
            PanicReason::AssertFail => "ASSERT_FAIL",
            PanicReason::UseAfterFree => "USE_AFTER_FREE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PanicContext {
    pub reason: PanicReason,
    pub message: String,
    pub faulting_vaddr: Option<u32>,
    pub pid: Pid,
    pub tid: Tid,
    pub step: u64,
    pub kernel_call_trace: Vec<String>,
}

impl fmt::Display for PanicContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at step {} (pid {}, tid {})", self.reason.name(), self.step, self.pid, self.tid)?;
        if let Some(a) = self.faulting_vaddr {
            write!(f, " addr {a:#010x}")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl PanicContext {
    /// Plain text crash dump used when d-mode is off.
    pub fn dump(&self) -> Vec<String> {
        let mut out = vec![format!("KERNEL PANIC: {self}")];
        out.push(format!("  call trace: {}", self.kernel_call_trace.join(" <- ")));
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepCounter {
    pub step: u64,
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunOutcome {
    Completed,
    Panicked(PanicContext),
    StepBudgetExhausted,
    ShellEntered { panic: Option<PanicContext> },
}

impl RunOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            RunOutcome::Completed => "COMPLETED",
            RunOutcome::Panicked(_) => "PANICKED",
            RunOutcome::StepBudgetExhausted => "STEP_BUDGET_EXHAUSTED",
            RunOutcome::ShellEntered { .. } => "SHELL_ENTERED",
        }
    }

    /// The panic behind this outcome, whether or not d-mode caught it.
    pub fn panic(&self) -> Option<&PanicContext> {
        match self {
            RunOutcome::Panicked(p) => Some(p),
            RunOutcome::ShellEntered { panic } => panic.as_ref(),
            _ => None,
        }
    }
}

/// Syscall failures. User programs see [`SyscallError::code`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyscallError {
    #[error("EXHAUSTED: object pool empty")]
    Exhausted,
    #[error("NO_CHILDREN")]
    NoChildren,
    #[error("TARGET_INVALID")]
    TargetInvalid,
    #[error("UNALIGNED")]
    Unaligned,
    #[error("OVERLAP")]
    Overlap,
    #[error("NOT_MAPPED")]
    NotMapped,
    #[error("NO_SUCH_FILE")]
    NoSuchFile,
    #[error("BUFFER_UNMAPPED")]
    BufferUnmapped,
    #[error("caller is not the running thread")]
    NotRunning,
    #[error("kernel panic: {0}")]
    Panicked(Box<PanicContext>),
}

impl SyscallError {
    pub fn code(&self) -> i64 {
        match self {
            SyscallError::Exhausted | SyscallError::TargetInvalid => -1,
            SyscallError::NoChildren => -2,
            SyscallError::Unaligned => -3,
            SyscallError::Overlap => -4,
            SyscallError::NotMapped => -5,
            SyscallError::NoSuchFile => -6,
            SyscallError::BufferUnmapped => -7,
            SyscallError::NotRunning => -8,
            SyscallError::Panicked(_) => -9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum KernelEvent {
    Syscall { step: u64, pid: Pid, tid: Tid, call: &'static str, ret: Option<i64> },
    Interrupt { step: u64, kind: InterruptKind, payload: Option<u8> },
    Switch { step: u64, from: Option<Tid>, to: Tid },
    Panic { step: u64, reason: PanicReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsoleLine {
    pub step: u64,
    pub pid: Pid,
    pub tid: Tid,
    pub text: String,
}

pub struct Kernel {
    pub(crate) config: KernelConfig,
    pub(crate) clock: StepCounter,
    pub(crate) heap: KernelHeap,
    pub(crate) procs: BTreeMap<Pid, SlotRef>,
    pub(crate) threads: BTreeMap<Tid, SlotRef>,
    pub(crate) run_queue: VecDeque<Tid>,
    pub(crate) current: Option<Tid>,
    next_pid: Pid,
    next_tid: Tid,
    pub(crate) next_backing: u64,
    program: Arc<Program>,
    pub(crate) fault: FaultRegister,
    timer_rng: ChaCha8Rng,
    wild_rng: ChaCha8Rng,
    pub(crate) dmode: Option<DMode>,
    events: Vec<KernelEvent>,
    console: Vec<ConsoleLine>,
    pub(crate) halted: Option<RunOutcome>,
    pub(crate) irq: sched::InterruptState,
    recorder: Option<Vec<ReplayEvent>>,
    feed: Option<sched::ReplayFeed>,
    pub(crate) call_path: Vec<&'static str>,
}

impl Kernel {
    /// Boots with one init process (pid 1) holding one thread (tid 1).
    pub fn boot(config: KernelConfig) -> Result<Kernel, ConfigError> {
        config.validate()?;
        let program = Arc::new(config.workload.program());
        let slots = config.heap_slots;
        let mut k = Kernel {
            clock: StepCounter::default(),
            heap: KernelHeap::new(slots.pcb as usize, slots.tcb as usize, slots.mem_region as usize),
            procs: BTreeMap::new(),
            threads: BTreeMap::new(),
            run_queue: VecDeque::new(),
            current: None,
            next_pid: 1,
            next_tid: 1,
            next_backing: 0,
            program,
            fault: FaultRegister::default(),
            timer_rng: ChaCha8Rng::seed_from_u64(config.seed),
            // separate stream so injected corruption never shifts timer draws
            wild_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_c022_u64),
            dmode: config.dmode_enabled.then(|| DMode::new(&config)),
            events: Vec::new(),
            console: Vec::new(),
            halted: None,
            irq: sched::InterruptState::default(),
            recorder: config.record_trace.then(Vec::new),
            feed: None,
            call_path: Vec::new(),
            config,
        };
        let pid = k.alloc_pid();
        let tid = k.alloc_tid();
        let pcb = Pcb {
            pid,
            parent_pid: 0,
            state: ProcState::Live,
            exit_status: 0,
            thread_ids: BTreeSet::from([tid]),
            address_space_id: pid,
            address_space: AddressSpace::default(),
        };
        let ps = k.kalloc_pcb(pcb).expect("pool has room for init");
        k.procs.insert(pid, ps);
        let tcb = Tcb {
            tid,
            owner_pid: pid,
            state: ThreadState::Running,
            pc: 0,
            regs: [0; NUM_REGS],
            ret: 0,
            pending: Pending::None,
        };
        let ts = k.kalloc_tcb(tcb).expect("pool has room for init");
        k.threads.insert(tid, ts);
        k.current = Some(tid);
        Ok(k)
    }

    /// Boots a kernel whose interrupts come only from `events`.
    pub(crate) fn boot_replay(config: KernelConfig, events: Vec<ReplayEvent>) -> Result<Kernel, ConfigError> {
        let mut k = Kernel::boot(config)?;
        k.recorder = None;
        k.feed = Some(sched::ReplayFeed::new(events));
        Ok(k)
    }

    fn alloc_pid(&mut self) -> Pid {
        let p = self.next_pid;
        self.next_pid += 1;
        p
    }

    fn alloc_tid(&mut self) -> Tid {
        let t = self.next_tid;
        self.next_tid += 1;
        t
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.clock.step
    }

    pub fn clock(&self) -> StepCounter {
        self.clock
    }

    /// Threads ever created, including init's.
    pub fn threads_created(&self) -> u32 {
        self.next_tid - 1
    }

    pub fn current_tid(&self) -> Option<Tid> {
        self.current
    }

    pub fn fault_register(&self) -> FaultRegister {
        self.fault
    }

    pub fn dmode(&self) -> Option<&DMode> {
        self.dmode.as_ref()
    }

    pub fn dmode_mut(&mut self) -> Option<&mut DMode> {
        self.dmode.as_mut()
    }

    pub fn events(&self) -> &[KernelEvent] {
        &self.events
    }

    pub fn console(&self) -> &[ConsoleLine] {
        &self.console
    }

    pub fn outcome(&self) -> Option<&RunOutcome> {
        self.halted.as_ref()
    }

    pub fn run_queue(&self) -> impl Iterator<Item = Tid> + '_ {
        self.run_queue.iter().copied()
    }

    pub fn recorded_events(&self) -> Option<&[ReplayEvent]> {
        self.recorder.as_deref()
    }

    pub fn is_replay(&self) -> bool {
        self.feed.is_some()
    }

    /// Live PCBs in pid order (including leaked REAPED ones still on the heap).
    pub fn processes(&self) -> Vec<&Pcb> {
        self.procs.values().filter_map(|s| self.heap.pcbs.get(*s)).collect()
    }

    pub fn process(&self, pid: Pid) -> Option<&Pcb> {
        self.procs.get(&pid).and_then(|s| self.heap.pcbs.get(*s)).filter(|p| p.pid == pid)
    }

    pub fn threads(&self) -> Vec<&Tcb> {
        self.threads.values().filter_map(|s| self.heap.tcbs.get(*s)).collect()
    }

    pub fn thread(&self, tid: Tid) -> Option<&Tcb> {
        self.threads.get(&tid).and_then(|s| self.heap.tcbs.get(*s)).filter(|t| t.tid == tid)
    }

    /// Heap slots whose header is marked live, per type.
    pub fn live_objects(&self, ty: ObjType) -> usize {
        self.heap.live_count(ty)
    }

    pub fn pool_capacity(&self, ty: ObjType) -> usize {
        self.heap.capacity(ty)
    }

    pub fn region(&self, pid: Pid, base: u32) -> Option<&MemRegion> {
        let slot = self.process(pid)?.address_space.regions.get(&base)?;
        self.heap.regions.get(*slot)
    }

    pub(crate) fn push_event(&mut self, e: KernelEvent) {
        self.events.push(e);
    }

    pub(crate) fn push_console(&mut self, pid: Pid, tid: Tid, text: String) {
        self.console.push(ConsoleLine { step: self.clock.step, pid, tid, text });
    }

    // --- object lookup -------------------------------------------------

    pub(crate) fn pcb(&self, pid: Pid) -> Result<&Pcb, SyscallError> {
        let slot = self.procs.get(&pid).ok_or_else(|| self.assert_fail(&format!("no PCB for pid {pid}")))?;
        match self.heap.pcbs.get(*slot) {
            Some(p) if p.pid == pid => Ok(p),
            _ => Err(self.assert_fail(&format!("process table entry for pid {pid} is corrupt"))),
        }
    }

    pub(crate) fn pcb_mut(&mut self, pid: Pid) -> Result<&mut Pcb, SyscallError> {
        self.pcb(pid)?;
        let slot = self.procs[&pid];
        Ok(self.heap.pcbs.get_mut(slot).expect("checked"))
    }

    pub(crate) fn tcb(&self, tid: Tid) -> Result<&Tcb, SyscallError> {
        let slot = self.threads.get(&tid).ok_or_else(|| self.assert_fail(&format!("no TCB for tid {tid}")))?;
        match self.heap.tcbs.get(*slot) {
            Some(t) if t.tid == tid => Ok(t),
            _ => Err(self.assert_fail(&format!("thread table entry for tid {tid} is corrupt"))),
        }
    }

    pub(crate) fn tcb_mut(&mut self, tid: Tid) -> Result<&mut Tcb, SyscallError> {
        self.tcb(tid)?;
        let slot = self.threads[&tid];
        Ok(self.heap.tcbs.get_mut(slot).expect("checked"))
    }

    // --- panics ----------------------------------------------------------

    pub(crate) fn panic_context(&self, reason: PanicReason, message: String, vaddr: Option<u32>) -> PanicContext {
        let tid = self.current.unwrap_or(0);
        let pid = self
            .threads
            .get(&tid)
            .and_then(|s| self.heap.tcbs.get(*s))
            .map(|t| t.owner_pid)
            .unwrap_or(0);
        PanicContext {
            reason,
            message,
            faulting_vaddr: vaddr,
            pid,
            tid,
            step: self.clock.step,
            kernel_call_trace: self.call_path.iter().rev().map(|s| s.to_string()).collect(),
        }
    }

    pub(crate) fn panic_error(&self, reason: PanicReason, message: String, vaddr: Option<u32>) -> SyscallError {
        SyscallError::Panicked(Box::new(self.panic_context(reason, message, vaddr)))
    }

    pub(crate) fn assert_fail(&self, message: &str) -> SyscallError {
        self.panic_error(PanicReason::AssertFail, message.to_string(), None)
    }

    // --- allocation wrapper ---------------------------------------------

    fn count_alloc(&mut self, ty: ObjType) {
        if let Some(d) = self.dmode.as_mut() {
            d.area.counters.record_alloc(ty.id());
        }
    }

    pub(crate) fn kalloc_pcb(&mut self, pcb: Pcb) -> Result<SlotRef, SyscallError> {
        let s = self.heap.pcbs.alloc(pcb).ok_or(SyscallError::Exhausted)?;
        self.count_alloc(ObjType::Pcb);
        Ok(s)
    }

    pub(crate) fn kalloc_tcb(&mut self, tcb: Tcb) -> Result<SlotRef, SyscallError> {
        let s = self.heap.tcbs.alloc(tcb).ok_or(SyscallError::Exhausted)?;
        self.count_alloc(ObjType::Tcb);
        Ok(s)
    }

    pub(crate) fn kalloc_region(&mut self, r: MemRegion) -> Result<SlotRef, SyscallError> {
        let s = self.heap.regions.alloc(r).ok_or(SyscallError::Exhausted)?;
        self.count_alloc(ObjType::MemRegion);
        Ok(s)
    }

    /// Allocates a blank object of `ty` that no kernel table references.
    pub fn kalloc(&mut self, ty: ObjType) -> Result<SlotRef, SyscallError> {
        match ty {
            ObjType::Pcb => self.kalloc_pcb(Pcb {
                pid: 0,
                parent_pid: 0,
                state: ProcState::Reaped,
                exit_status: 0,
                thread_ids: BTreeSet::new(),
                address_space_id: 0,
                address_space: AddressSpace::default(),
            }),
            ObjType::Tcb => self.kalloc_tcb(Tcb {
                tid: 0,
                owner_pid: 0,
                state: ThreadState::Exited,
                pc: 0,
                regs: [0; NUM_REGS],
                ret: 0,
                pending: Pending::None,
            }),
            ObjType::MemRegion => {
                self.kalloc_region(MemRegion { base: 0, pages: 1, backing: u64::MAX, data: Vec::new() })
            }
        }
    }

    /// Releases a slot. Freeing a dead slot is a double free and panics
    /// the kernel.
    pub fn kfree(&mut self, ty: ObjType, slot: SlotRef) -> Result<(), SyscallError> {
        let r = self.free_obj(ty, slot);
        if let Err(SyscallError::Panicked(ctx)) = &r {
            self.panic((**ctx).clone());
        }
        r
    }

    pub(crate) fn free_obj(&mut self, ty: ObjType, slot: SlotRef) -> Result<(), SyscallError> {
        let freed = match ty {
            ObjType::Pcb => self.heap.pcbs.free(slot).is_some(),
            ObjType::Tcb => self.heap.tcbs.free(slot).is_some(),
            ObjType::MemRegion => self.heap.regions.free(slot).is_some(),
        };
        if !freed {
            let addr = KernelHeap::slot_addr(ty, slot.index);
            return Err(self.panic_error(
                PanicReason::AssertFail,
                format!("double free of {} slot {} at {addr:#010x}", ty.name(), slot.index),
                None,
            ));
        }
        if let Some(d) = self.dmode.as_mut() {
            d.area.counters.record_free(ty.id());
        }
        Ok(())
    }
}
