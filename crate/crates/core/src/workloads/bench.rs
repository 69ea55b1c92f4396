//! The 712bench and mutex712bench analogs.
//!
//! Logging cost never touches the scheduling clock; it accrues on the
//! d-mode overhead meter (`appends x append_cost + lock_wait_ticks`). The
//! overhead ratio reported here is that meter over total kernel ticks.

use serde::Serialize;

use super::{ScenarioKind, Workload};
use crate::kernel::{ConfigError, Kernel, KernelConfig, RunOutcome};

pub const REFERENCE_NOTE: &str = "reference hardware figures (712bench under 1.5%, mutex712bench under 4%) \
are not reproduced here; the meter above is virtual ticks";

const BENCH_STEP_LIMIT: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub bench: ScenarioKind,
    pub seed: u64,
    pub ops: u32,
    pub children: u32,
    pub append_cost: u32,
    pub outcome: RunOutcome,
    /// Kernel ticks with d-mode on.
    pub total_ticks: u64,
    /// Kernel ticks for the same run with d-mode off.
    pub baseline_ticks: u64,
    pub appends: u64,
    pub lock_wait_ticks: u64,
    pub contended_acquisitions: u64,
    pub overhead_ticks: u64,
    /// Overhead meter reading with d-mode off (always zero).
    pub baseline_overhead_ticks: u64,
    pub ratio: f64,
    pub note: &'static str,
}

impl BenchReport {
    pub fn text(&self) -> String {
        format!(
            "{} seed {} ops {} children {} append_cost {}\n\
             outcome {}\n\
             kernel ticks {} (d-mode off {})\n\
             log appends {}, lock wait {} ticks over {} contended acquisitions\n\
             overhead meter {} ticks, ratio {:.6}\n\
             note: {}\n",
            self.bench,
            self.seed,
            self.ops,
            self.children,
            self.append_cost,
            self.outcome.name(),
            self.total_ticks,
            self.baseline_ticks,
            self.appends,
            self.lock_wait_ticks,
            self.contended_acquisitions,
            self.overhead_ticks,
            self.ratio,
            self.note
        )
    }
}

fn measure(config: KernelConfig) -> Result<BenchReport, ConfigError> {
    let mut on = Kernel::boot(KernelConfig { dmode_enabled: true, ..config.clone() })?;
    let outcome = on.run(BENCH_STEP_LIMIT);
    let now = on.clock().ticks;
    let d = on.dmode_mut().expect("d-mode on");
    d.area.vmlog.settle(now);
    let d = on.dmode().unwrap();

    let mut off = Kernel::boot(KernelConfig { dmode_enabled: false, ..config.clone() })?;
    off.run(BENCH_STEP_LIMIT);

    let total_ticks = on.clock().ticks;
    let overhead_ticks = d.overhead_ticks();
    Ok(BenchReport {
        bench: config.workload.kind,
        seed: config.seed,
        ops: config.workload.ops * 2,
        children: config.workload.children,
        append_cost: config.append_cost,
        outcome,
        total_ticks,
        baseline_ticks: off.clock().ticks,
        appends: d.meter.appends,
        lock_wait_ticks: d.area.vmlog.lock_wait_ticks(),
        contended_acquisitions: d.area.vmlog.contended_acquisitions(),
        overhead_ticks,
        baseline_overhead_ticks: off.dmode().map_or(0, |d| d.overhead_ticks()),
        ratio: if total_ticks == 0 { 0.0 } else { overhead_ticks as f64 / total_ticks as f64 },
        note: REFERENCE_NOTE,
    })
}

/// `total_ops` = 2N: N allocations and N deallocations in one process.
pub fn bench712(total_ops: u32, base: KernelConfig) -> Result<BenchReport, ConfigError> {
    assert!(total_ops.is_multiple_of(2), "712bench needs an even operation count");
    measure(KernelConfig { workload: Workload::bench712(total_ops / 2), ..base })
}

/// `children` processes each doing 100 allocate/free pairs.
pub fn bench_mutex712(children: u32, base: KernelConfig) -> Result<BenchReport, ConfigError> {
    assert!(children >= 1, "mutex712bench needs at least one child");
    let mut r = measure(KernelConfig { workload: Workload::mutex712(children), ..base })?;
    r.ops = 2 * super::MUTEX712_N * children;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overhead_is_one_append_per_op() {
        let r = bench712(200, KernelConfig::default()).unwrap();
        assert_eq!(r.outcome, RunOutcome::Completed);
        assert_eq!(r.appends, 200);
        assert_eq!(r.overhead_ticks, 200);
        assert_eq!(r.baseline_overhead_ticks, 0);
        assert_eq!(r.total_ticks, r.baseline_ticks);
    }

    #[test]
    fn single_child_never_waits() {
        let r = bench_mutex712(1, KernelConfig::default()).unwrap();
        assert_eq!(r.lock_wait_ticks, 0);
    }
}
