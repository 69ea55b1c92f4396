//! Canonical state hash.
//!
//! FNV-1a 64 over an explicit little-endian serialization: clock, every
//! heap slot (header and contents) of every pool in type order, the
//! process and thread tables, the run queue, the running tid, the d-mode
//! counters (when enabled), the fault register and the halt state. Only
//! meaningful for comparing runs of the same build.

use std::hash::Hasher;

use fnv::FnvHasher;

use super::heap::{Pool, SlotRef};
use super::{Kernel, Pcb, Pending, RunOutcome, Tcb};
use crate::vm::MemRegion;

struct Canon(FnvHasher);

impl Canon {
    fn u8(&mut self, v: u8) {
        self.0.write(&[v]);
    }
    fn u32(&mut self, v: u32) {
        self.0.write(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.write(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.write(&v.to_le_bytes());
    }
    fn slot(&mut self, s: SlotRef) {
        self.u32(s.index);
        self.u32(s.generation);
    }
    fn opt_u32(&mut self, v: Option<u32>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.u32(x);
            }
            None => self.u8(0),
        }
    }

    fn pool<T>(&mut self, p: &Pool<T>, mut f: impl FnMut(&mut Canon, &T)) {
        self.u32(p.slots.len() as u32);
        for s in &p.slots {
            self.u8(s.live as u8);
            self.u32(s.generation);
            match &s.value {
                Some(v) => {
                    self.u8(1);
                    f(self, v);
                }
                None => self.u8(0),
            }
        }
    }

    fn pcb(&mut self, p: &Pcb) {
        self.u32(p.pid);
        self.u32(p.parent_pid);
        self.u8(p.state as u8);
        self.u32(p.exit_status as u32);
        self.u32(p.thread_ids.len() as u32);
        for t in &p.thread_ids {
            self.u32(*t);
        }
        self.u32(p.address_space_id);
        self.u32(p.address_space.regions.len() as u32);
        for (b, s) in &p.address_space.regions {
            self.u32(*b);
            self.slot(*s);
        }
    }

    fn tcb(&mut self, t: &Tcb) {
        self.u32(t.tid);
        self.u32(t.owner_pid);
        self.u8(t.state as u8);
        self.u64(t.pc as u64);
        for r in t.regs {
            self.i64(r);
        }
        self.i64(t.ret);
        match t.pending {
            Pending::None => self.u8(0),
            Pending::Yield { target, slot } => {
                self.u8(1);
                self.u32(target);
                self.slot(slot);
            }
        }
    }

    fn region(&mut self, r: &MemRegion) {
        self.u32(r.base);
        self.u32(r.pages);
        self.u64(r.backing);
        self.u64(r.data.len() as u64);
        self.0.write(&r.data);
    }
}

impl Kernel {
    pub fn state_hash(&self) -> u64 {
        let mut c = Canon(FnvHasher::default());
        c.u64(self.clock.step);
        c.u64(self.clock.ticks);
        c.pool(&self.heap.pcbs, Canon::pcb);
        c.pool(&self.heap.tcbs, Canon::tcb);
        c.pool(&self.heap.regions, Canon::region);
        c.u32(self.procs.len() as u32);
        for (p, s) in &self.procs {
            c.u32(*p);
            c.slot(*s);
        }
        c.u32(self.threads.len() as u32);
        for (t, s) in &self.threads {
            c.u32(*t);
            c.slot(*s);
        }
        c.u32(self.run_queue.len() as u32);
        for t in &self.run_queue {
            c.u32(*t);
        }
        c.opt_u32(self.current);
        if let Some(d) = &self.dmode {
            c.0.write(&d.area.counters.to_bytes());
        }
        c.opt_u32(self.fault.last_fault_vaddr);
        c.u8(match &self.halted {
            None => 0,
            Some(RunOutcome::Completed) => 1,
            Some(RunOutcome::Panicked(_)) => 2,
            Some(RunOutcome::StepBudgetExhausted) => 3,
            Some(RunOutcome::ShellEntered { .. }) => 4,
        });
        c.0.finish()
    }
}

#[cfg(test)]
mod tests {
    use crate::kernel::{Kernel, KernelConfig};

    #[test]
    fn hash_tracks_state() {
        let a = Kernel::boot(KernelConfig::default()).unwrap();
        let b = Kernel::boot(KernelConfig::default()).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
        let mut c = Kernel::boot(KernelConfig::default()).unwrap();
        c.syscall_gettid(1).unwrap();
        assert_ne!(a.state_hash(), c.state_hash());
    }
}
