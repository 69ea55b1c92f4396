//! Deterministic simulator of a small teaching kernel with a built-in
//! debugging mode: allocation counters, a VM operation history, a crash
//! shell, contract validators and record/replay with bisection.

pub mod bridge;
pub mod dmode;
pub mod kernel;
pub mod replay;
pub mod shell;
pub mod vm;
pub mod workloads;

pub use kernel::{
    BugFlags, ConfigError, HeapSlots, InterruptKind, Kernel, KernelConfig, PanicContext, PanicReason, RunOutcome,
    SyscallError,
};
pub use replay::{bisect, record, replay, ReplayEvent, ReplayTrace, Replayer};
pub use workloads::{ScenarioKind, Workload};
