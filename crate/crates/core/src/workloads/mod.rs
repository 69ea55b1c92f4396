//! User programs the kernel can boot into, and drivers that run them.

pub mod bench;
pub mod diagnosis;
pub mod program;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::dmode::counters::{memstat, MemstatRow};
use crate::kernel::{BugFlags, ConfigError, Kernel, KernelConfig, RunOutcome};
use program::{Call, Cond, Operand, Program, ProgramBuilder};

pub const RUG_ADDR: u32 = 0x1337_0000;
pub const BENCH_BASE: u32 = 0x4000_0000;
pub const MUTEX712_N: u32 = 100;

pub const MSG_CHILD: &str = "Another one bites the dust";
pub const MSG_FORK_FAILED: &str = "Fork failed";
pub const MSG_READ_FAILED: &str = "Failed to read file";
pub const MSG_READ_OK: &str = "Someone's acing the exam!";
pub const MSG_YIELD_FAILED: &str = "Yielding failed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[default]
    Idle,
    ForkBomb,
    RugPull,
    DeadYield,
    Bench712,
    Mutex712,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("UNKNOWN_SCENARIO: {0}")]
pub struct UnknownScenario(pub String);

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Idle,
        ScenarioKind::ForkBomb,
        ScenarioKind::RugPull,
        ScenarioKind::DeadYield,
        ScenarioKind::Bench712,
        ScenarioKind::Mutex712,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<ScenarioKind> {
        ScenarioKind::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Idle => "idle",
            ScenarioKind::ForkBomb => "fork_bomb",
            ScenarioKind::RugPull => "rug_pull",
            ScenarioKind::DeadYield => "dead_yield",
            ScenarioKind::Bench712 => "bench712",
            ScenarioKind::Mutex712 => "mutex712",
        }
    }

    /// The injected bug each scenario exists to demonstrate.
    pub fn bug(self) -> BugFlags {
        match self {
            ScenarioKind::ForkBomb => BugFlags::LEAK_PCB_ON_WAIT,
            ScenarioKind::RugPull => BugFlags::SKIP_VM_VALIDATION_IN_READFILE,
            ScenarioKind::DeadYield => BugFlags::STALE_TCB_YIELD,
            _ => BugFlags::empty(),
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| UnknownScenario(s.to_string()))
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What init runs, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Workload {
    pub kind: ScenarioKind,
    /// bench712: N (allocations, and also deallocations).
    pub ops: u32,
    /// mutex712: number of child processes.
    pub children: u32,
    /// dead_yield: getticks calls before the thread_fork, shifting the
    /// race to a different step.
    pub pad: u32,
}

impl Workload {
    pub fn new(kind: ScenarioKind) -> Self {
        let mut w = Workload { kind, ..Workload::default() };
        match kind {
            ScenarioKind::Bench712 => w.ops = 100,
            ScenarioKind::Mutex712 => w.children = 2,
            _ => {}
        }
        w
    }

    pub fn bench712(n: u32) -> Self {
        Workload { ops: n, ..Workload::new(ScenarioKind::Bench712) }
    }

    pub fn mutex712(children: u32) -> Self {
        Workload { children, ..Workload::new(ScenarioKind::Mutex712) }
    }

    pub fn dead_yield(pad: u32) -> Self {
        Workload { pad, ..Workload::new(ScenarioKind::DeadYield) }
    }

    pub fn program(&self) -> Program {
        match self.kind {
            ScenarioKind::Idle => ProgramBuilder::new("idle").sys(Call::Exit(Operand::Imm(0))).build(),
            ScenarioKind::ForkBomb => fork_bomb(),
            ScenarioKind::RugPull => rug_pull(),
            ScenarioKind::DeadYield => dead_yield(self.pad),
            ScenarioKind::Bench712 => bench712(self.ops),
            ScenarioKind::Mutex712 => mutex712(self.children, MUTEX712_N),
        }
    }
}

/// One thread reaps, the other forks children that print and exit.
fn fork_bomb() -> Program {
    ProgramBuilder::new("fork_bomb")
        .sys(Call::ThreadFork)
        .branch(Cond::ret_eq(0), "bomberman")
        .label("reaper")
        .sys(Call::Wait)
        .jump("reaper")
        .label("bomberman")
        .sys(Call::Fork)
        .branch(Cond::ret_eq(0), "child")
        .branch(Cond::ret_eq(-1), "failed")
        .jump("bomberman")
        .label("failed")
        .print(MSG_FORK_FAILED)
        .jump("bomberman")
        .label("child")
        .print(MSG_CHILD)
        .sys(Call::Exit(Operand::Imm(0)))
        .build()
}

/// One thread maps a page and reads a file into it while another keeps
/// unmapping the same page.
fn rug_pull() -> Program {
    ProgramBuilder::new("rug_pull")
        .sys(Call::ThreadFork)
        .branch(Cond::ret_eq(0), "remove")
        .label("main")
        .sys(Call::NewPages { base: RUG_ADDR, len: 4096 })
        .branch(Cond::ret_ne(0), "main")
        .sys(Call::ReadFile { file: "exam_solution.txt".into(), buf: RUG_ADDR, len: 4096, offset: 0 })
        .branch(Cond::ret_neg(), "failed")
        .print(MSG_READ_OK)
        .jump("main")
        .label("failed")
        .print(MSG_READ_FAILED)
        .jump("main")
        .label("remove")
        .sys(Call::RemovePages { base: RUG_ADDR })
        .jump("remove")
        .build()
}

/// The new thread vanishes while the old one yields to it.
fn dead_yield(pad: u32) -> Program {
    let mut b = ProgramBuilder::new("dead_yield");
    for _ in 0..pad {
        b.sys(Call::GetTicks);
    }
    b.sys(Call::ThreadFork)
        .branch(Cond::ret_eq(0), "thread0")
        .set(0, Operand::Ret)
        .sys(Call::Yield(Operand::Reg(0)))
        .branch(Cond::ret_eq(0), "done")
        .print(MSG_YIELD_FAILED)
        .label("done")
        .sys(Call::Vanish)
        .label("thread0")
        .sys(Call::Vanish)
        .build()
}

/// N allocations and N deallocations in one thread, timed by getticks.
fn bench712(n: u32) -> Program {
    ProgramBuilder::new("bench712")
        .sys(Call::GetTicks)
        .set(1, Operand::Ret)
        .set(0, Operand::Imm(0))
        .label("loop")
        .branch(Cond::reg_eq(0, n as i64), "end")
        .sys(Call::NewPages { base: BENCH_BASE, len: 4096 })
        .add(0, 1)
        .branch(Cond::ret_neg(), "failed")
        .sys(Call::RemovePages { base: BENCH_BASE })
        .jump("loop")
        .label("failed")
        .sys(Call::Print { text: "new_pages failed at allocation ".into(), value: Some(Operand::Reg(0)) })
        .sys(Call::Exit(Operand::Imm(1)))
        .label("end")
        .sys(Call::GetTicks)
        .sys(Call::Exit(Operand::Imm(0)))
        .build()
}

/// `c` children each doing `n` allocate/free pairs, reaped by init.
fn mutex712(c: u32, n: u32) -> Program {
    ProgramBuilder::new("mutex712")
        .set(1, Operand::Imm(0))
        .label("spawn")
        .branch(Cond::reg_eq(1, c as i64), "reap")
        .sys(Call::Fork)
        .branch(Cond::ret_eq(0), "child")
        .branch(Cond::ret_neg(), "reap")
        .add(1, 1)
        .jump("spawn")
        .label("reap")
        .sys(Call::Wait)
        .branch(Cond::ret_ne(-2), "reap")
        .sys(Call::Exit(Operand::Imm(0)))
        .label("child")
        .set(0, Operand::Imm(0))
        .label("loop")
        .branch(Cond::reg_eq(0, n as i64), "end")
        .sys(Call::NewPages { base: BENCH_BASE, len: 4096 })
        .sys(Call::RemovePages { base: BENCH_BASE })
        .add(0, 1)
        .jump("loop")
        .label("end")
        .sys(Call::Exit(Operand::Imm(0)))
        .build()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub bug_flags: BugFlags,
    pub outcome: RunOutcome,
    pub steps: u64,
    pub ticks: u64,
    pub final_hash: u64,
    pub console: Vec<String>,
    pub memstat: Option<Vec<MemstatRow>>,
}

impl ScenarioReport {
    pub fn from_kernel(k: &Kernel, outcome: RunOutcome) -> Self {
        ScenarioReport {
            scenario: k.config().workload.kind,
            seed: k.config().seed,
            bug_flags: k.config().bug_flags,
            outcome,
            steps: k.step(),
            ticks: k.clock().ticks,
            final_hash: k.state_hash(),
            console: k.console().iter().map(|l| l.text.clone()).collect(),
            memstat: k.dmode().map(|d| memstat(&d.area.counters)),
        }
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "scenario {} seed {} bugs [{}]\noutcome {} after {} steps\n",
            self.scenario,
            self.seed,
            self.bug_flags.names().join(","),
            self.outcome.name(),
            self.steps
        );
        if let Some(p) = self.outcome.panic() {
            s.push_str(&format!("panic: {p}\n"));
        }
        s.push_str(&format!("console: {} lines\n", self.console.len()));
        for l in self.console.iter().rev().take(5).rev() {
            s.push_str(&format!("  {l}\n"));
        }
        if let Some(rows) = &self.memstat {
            for r in rows {
                s.push_str(&format!("memstat {:<10} {:>6} {:>8} bytes\n", r.type_name, r.count, r.bytes));
            }
        }
        s.push_str(&format!("state hash {:#018x}\n", self.final_hash));
        s
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Unknown(#[from] UnknownScenario),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Boots `name` on `config` (its workload is replaced) and runs it.
pub fn run_scenario(name: &str, config: KernelConfig, max_steps: u64) -> Result<ScenarioReport, ScenarioError> {
    let kind: ScenarioKind = name.parse()?;
    let workload = if config.workload.kind == kind { config.workload } else { Workload::new(kind) };
    let mut k = Kernel::boot(KernelConfig { workload, ..config })?;
    let outcome = k.run(max_steps);
    Ok(ScenarioReport::from_kernel(&k, outcome))
}

/// Config for `kind` with its bug switched on.
pub fn buggy_config(kind: ScenarioKind, seed: u64) -> KernelConfig {
    KernelConfig { seed, bug_flags: kind.bug(), workload: Workload::new(kind), ..KernelConfig::default() }
}
