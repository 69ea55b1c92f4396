//! Reserved storage for d-mode, kept apart from the simulated kernel heap.
//!
//! Nothing in the kernel's write paths can name this struct, so heap
//! corruption never reaches it.

use super::counters::{AllocCounterTable, COUNTER_TABLE_BYTES};
use super::vmlog::{VmOpLog, RECORD_BYTES};

pub const WORKING_AREA_BYTES: usize = 4096;

/// Bytes reserved for d-mode with a log of `capacity` records:
/// working area, counter table and the full ring.
pub fn safe_area_budget(capacity: usize) -> usize {
    WORKING_AREA_BYTES + COUNTER_TABLE_BYTES + RECORD_BYTES * capacity
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafeArea {
    /// Shell scratch space. Command output is rendered here.
    pub(crate) working: Box<[u8; WORKING_AREA_BYTES]>,
    pub counters: AllocCounterTable,
    pub vmlog: VmOpLog,
}

impl SafeArea {
    pub fn new(log_capacity: usize) -> Self {
        SafeArea {
            working: Box::new([0; WORKING_AREA_BYTES]),
            counters: AllocCounterTable::default(),
            vmlog: VmOpLog::new(log_capacity),
        }
    }

    pub fn budget(&self) -> usize {
        safe_area_budget(self.vmlog.capacity())
    }

    /// Counter table followed by the retained log records, oldest first.
    pub fn dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(COUNTER_TABLE_BYTES + RECORD_BYTES * self.vmlog.len());
        out.extend_from_slice(&self.counters.to_bytes());
        for r in self.vmlog.iter() {
            out.extend_from_slice(&r.record.encode());
        }
        out
    }

    /// The whole reservation as laid out in memory: working area, counter
    /// table, then every ring slot (unused slots zeroed).
    pub fn reservation_image(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.budget());
        out.extend_from_slice(&self.working[..]);
        out.extend_from_slice(&self.counters.to_bytes());
        for r in self.vmlog.iter() {
            out.extend_from_slice(&r.record.encode());
        }
        out.resize(self.budget(), 0);
        out
    }
}
