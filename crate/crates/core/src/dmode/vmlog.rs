//! History of VM operations: a fixed-capacity ring of 16-byte records.
//!
//! Writers take a simulated log lock. The lock is acquired when a VM
//! operation logs and is released when the same thread executes its next
//! micro-step, so a thread preempted right after logging keeps the lock
//! across the switch. Anyone appending in that window waits; the wait is
//! charged to `lock_wait_ticks` when the holder releases. The simulation
//! itself never blocks on the lock.

use std::collections::VecDeque;

use serde::Serialize;

use crate::vm::VmOpKind;

pub const RECORD_BYTES: usize = 16;
pub const DEFAULT_CAPACITY: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VmOpRecord {
    pub pid: u32,
    pub tid: u32,
    pub op: VmOpKind,
    pub vaddr: u32,
}

impl VmOpRecord {
    pub fn encode(&self) -> [u8; RECORD_BYTES] {
        let mut out = [0u8; RECORD_BYTES];
        out[0..4].copy_from_slice(&self.pid.to_le_bytes());
        out[4..8].copy_from_slice(&self.tid.to_le_bytes());
        out[8..12].copy_from_slice(&(self.op as u32).to_le_bytes());
        out[12..16].copy_from_slice(&self.vaddr.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; RECORD_BYTES]) -> Option<Self> {
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Some(VmOpRecord {
            pid: word(0),
            tid: word(4),
            op: VmOpKind::from_id(word(8))?,
            vaddr: word(12),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoggedOp {
    pub seq: u64,
    #[serde(flatten)]
    pub record: VmOpRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VmLogFilter {
    /// Matches records whose address lies on the same page.
    pub vaddr: Option<u32>,
    pub pid: Option<u32>,
    pub op: Option<VmOpKind>,
    pub last_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Waiter {
    since: u64,
    blocked_on: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct LogLock {
    holder: Option<u32>,
    waiters: Vec<Waiter>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmOpLog {
    ring: VecDeque<LoggedOp>,
    capacity: usize,
    next_seq: u64,
    lock: LogLock,
    lock_wait_ticks: u64,
    contended: u64,
}

impl VmOpLog {
    /// Panics if `capacity` is zero; configs are validated before this.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "vm log capacity must be at least 1");
        VmOpLog {
            ring: VecDeque::with_capacity(capacity),
            capacity,
            next_seq: 0,
            lock: LogLock::default(),
            lock_wait_ticks: 0,
            contended: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn lock_wait_ticks(&self) -> u64 {
        self.lock_wait_ticks
    }

    pub fn contended_acquisitions(&self) -> u64 {
        self.contended
    }

    /// Stores a record, overwriting the oldest at capacity.
    pub fn append(&mut self, record: VmOpRecord) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(LoggedOp { seq, record });
        seq
    }

    /// Takes the log lock for `tid` at virtual time `now` and appends.
    pub fn append_locked(&mut self, tid: u32, now: u64, record: VmOpRecord) -> u64 {
        match self.lock.holder {
            Some(holder) if holder != tid => {
                self.contended += 1;
                self.lock.waiters.push(Waiter { since: now, blocked_on: holder });
            }
            _ => {}
        }
        self.lock.holder = Some(tid);
        self.append(record)
    }

    /// Called when `tid` executes a micro-step: any lock it still holds
    /// from an earlier step is released and the waiters queued behind it
    /// are charged.
    pub fn release(&mut self, tid: u32, now: u64) {
        let mut charged = 0;
        self.lock.waiters.retain(|w| {
            if w.blocked_on == tid {
                charged += now.saturating_sub(w.since);
                false
            } else {
                true
            }
        });
        self.lock_wait_ticks += charged;
        if self.lock.holder == Some(tid) {
            self.lock.holder = None;
        }
    }

    /// Charges every outstanding waiter up to `now` (end of a run).
    pub fn settle(&mut self, now: u64) {
        for w in self.lock.waiters.drain(..) {
            self.lock_wait_ticks += now.saturating_sub(w.since);
        }
        self.lock.holder = None;
    }

    /// Retained records, oldest first.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &LoggedOp> {
        self.ring.iter()
    }

    pub fn retained_seqs(&self) -> Vec<u64> {
        self.ring.iter().map(|r| r.seq).collect()
    }

    /// Records matching every present filter field, newest first.
    pub fn query(&self, filter: &VmLogFilter) -> Vec<LoggedOp> {
        let page = |a: u32| a & !(crate::vm::PAGE_SIZE - 1);
        let matches = self.ring.iter().rev().filter(|r| {
            filter.vaddr.is_none_or(|a| page(a) == page(r.record.vaddr))
                && filter.pid.is_none_or(|p| p == r.record.pid)
                && filter.op.is_none_or(|o| o == r.record.op)
        });
        match filter.last_k {
            Some(k) => matches.take(k).copied().collect(),
            None => matches.copied().collect(),
        }
    }
}
