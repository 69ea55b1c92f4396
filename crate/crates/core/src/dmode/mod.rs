//! d-mode: allocation counters, VM operation history, the safe area that
//! holds them, contract validators and the shell session slot.

pub mod counters;
pub mod safe_area;
pub mod validate;
pub mod vmlog;

use serde::Serialize;

use crate::kernel::KernelConfig;
use crate::shell::ShellSession;
use safe_area::SafeArea;

/// Cost of instrumentation, kept off the scheduling clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OverheadMeter {
    pub appends: u64,
    pub append_cost: u32,
}

#[derive(Debug)]
pub struct DMode {
    pub area: SafeArea,
    pub meter: OverheadMeter,
    pub(crate) session: Option<ShellSession>,
}

impl DMode {
    pub fn new(config: &KernelConfig) -> Self {
        DMode {
            area: SafeArea::new(config.vmlog_capacity as usize),
            meter: OverheadMeter { appends: 0, append_cost: config.append_cost },
            session: None,
        }
    }

    /// Log appends times their cost, plus ticks spent waiting on the log lock.
    pub fn overhead_ticks(&self) -> u64 {
        self.meter.appends * self.meter.append_cost as u64 + self.area.vmlog.lock_wait_ticks()
    }

    pub fn session(&self) -> Option<&ShellSession> {
        self.session.as_ref()
    }
}
