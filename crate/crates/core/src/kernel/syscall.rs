//! Syscall dispatch and the process/thread syscalls. VM syscalls live in
//! `crate::vm`.

use rand::Rng;

use super::heap::{KernelHeap, SlotRef};
use super::{
    BugFlags, Kernel, KernelEvent, Pcb, Pending, PanicReason, Pid, ProcState, SyscallError, Tcb, ThreadState,
    Tid,
};
use crate::dmode::counters::ObjType;
use crate::vm::AddressSpace;
use crate::workloads::program::{Call, CmpOp, Cond, Instr, Operand};

/// What a syscall did to its caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Flow {
    Ret(i64),
    /// Caller blocked; the syscall restarts when it is woken.
    Block,
    /// Caller no longer exists.
    Gone,
    /// First half of yield done; the second half runs on the next step.
    YieldPending,
    /// Return 0 to the caller, then switch to the given thread.
    Switch(Tid),
}

fn impl_name(call: &Call) -> &'static str {
    match call {
        Call::Fork => "fork_impl",
        Call::ThreadFork => "thread_fork_impl",
        Call::Wait => "wait_impl",
        Call::Vanish => "vanish_impl",
        Call::Exit(_) => "exit_impl",
        Call::Yield(_) => "yield_impl",
        Call::GetTid => "gettid_impl",
        Call::GetTicks => "getticks_impl",
        Call::NewPages { .. } => "new_pages_impl",
        Call::RemovePages { .. } => "remove_pages_impl",
        Call::ReadFile { .. } => "readfile_impl",
        Call::Print { .. } => "print_impl",
    }
}

fn eval(op: Operand, regs: &[i64], ret: i64) -> i64 {
    match op {
        Operand::Imm(v) => v,
        Operand::Reg(r) => regs[r],
        Operand::Ret => ret,
    }
}

fn holds(c: Cond, regs: &[i64], ret: i64) -> bool {
    let (a, b) = (eval(c.lhs, regs, ret), eval(c.rhs, regs, ret));
    match c.op {
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
        CmpOp::Lt => a < b,
    }
}

impl Kernel {
    /// One micro-step of thread `tid`: finish a pending yield, or run
    /// free instructions up to the next syscall and execute it.
    pub(crate) fn exec_thread(&mut self, tid: Tid) -> Result<(), SyscallError> {
        let t = self.tcb(tid)?;
        let pid = t.owner_pid;
        if let Pending::Yield { target, slot } = t.pending {
            self.call_path.push("yield_impl");
            let flow = self.yield_finish(tid, target, slot)?;
            self.tcb_mut(tid)?.pending = Pending::None;
            self.call_path.pop();
            return self.apply_flow(pid, tid, "yield", flow);
        }

        let (mut pc, mut regs, ret) = (t.pc, t.regs, t.ret);
        let program = self.program.clone();
        let mut spins = 0;
        let call = loop {
            match program.get(pc) {
                None => {
                    self.tcb_mut(tid)?.pc = pc;
                    self.call_path.push("vanish_impl");
                    self.sys_vanish(tid)?;
                    self.push_event(KernelEvent::Syscall { step: self.clock.step, pid, tid, call: "vanish", ret: None });
                    return Ok(());
                }
                Some(Instr::Sys(call)) => break call,
                Some(Instr::Set(r, op)) => {
                    regs[*r] = eval(*op, &regs, ret);
                    pc += 1;
                }
                Some(Instr::Add(r, d)) => {
                    regs[*r] = regs[*r].wrapping_add(*d);
                    pc += 1;
                }
                Some(Instr::Branch { cond, to }) => {
                    pc = if holds(*cond, &regs, ret) { *to } else { pc + 1 };
                }
                Some(Instr::Jump(to)) => pc = *to,
            }
            spins += 1;
            self.guard_spin(spins)?;
        };
        {
            let t = self.tcb_mut(tid)?;
            t.pc = pc;
            t.regs = regs;
        }
        self.call_path.push(impl_name(call));
        let flow = self.dispatch(tid, call, &regs, ret)?;
        self.call_path.pop();
        self.apply_flow(pid, tid, call.name(), flow)
    }

    fn apply_flow(&mut self, pid: Pid, tid: Tid, name: &'static str, flow: Flow) -> Result<(), SyscallError> {
        let step = self.clock.step;
        let ret = match flow {
            Flow::Ret(v) => {
                let t = self.tcb_mut(tid)?;
                t.ret = v;
                t.pc += 1;
                Some(v)
            }
            Flow::Switch(target) => {
                let t = self.tcb_mut(tid)?;
                t.ret = 0;
                t.pc += 1;
                self.switch_to(tid, target)?;
                Some(0)
            }
            Flow::Block | Flow::Gone | Flow::YieldPending => None,
        };
        self.push_event(KernelEvent::Syscall { step, pid, tid, call: name, ret });
        Ok(())
    }

    fn dispatch(&mut self, tid: Tid, call: &Call, regs: &[i64], ret: i64) -> Result<Flow, SyscallError> {
        let r = match call {
            Call::Fork => self.sys_fork(tid).map(|p| p as i64),
            Call::ThreadFork => self.sys_thread_fork(tid).map(|t| t as i64),
            Call::Wait => match self.sys_wait(tid) {
                Ok(Some((pid, _))) => Ok(pid as i64),
                Ok(None) => return Ok(Flow::Block),
                Err(e) => Err(e),
            },
            Call::Vanish => {
                self.sys_vanish(tid)?;
                return Ok(Flow::Gone);
            }
            Call::Exit(op) => {
                let status = eval(*op, regs, ret) as i32;
                let pid = self.tcb(tid)?.owner_pid;
                self.pcb_mut(pid)?.exit_status = status;
                self.sys_vanish(tid)?;
                return Ok(Flow::Gone);
            }
            Call::Yield(op) => {
                let target = eval(*op, regs, ret);
                return match self.yield_begin(tid, target) {
                    Ok(()) => Ok(Flow::YieldPending),
                    Err(SyscallError::Panicked(p)) => Err(SyscallError::Panicked(p)),
                    Err(e) => Ok(Flow::Ret(e.code())),
                };
            }
            Call::GetTid => Ok(tid as i64),
            Call::GetTicks => Ok(self.clock.ticks as i64),
            Call::NewPages { base, len } => self.vm_new_pages(tid, *base, *len).map(|_| 0),
            Call::RemovePages { base } => self.vm_remove_pages(tid, *base).map(|_| 0),
            Call::ReadFile { file, buf, len, offset } => self.vm_readfile(tid, file, *buf, *len, *offset),
            Call::Print { text, value } => {
                let pid = self.tcb(tid)?.owner_pid;
                let line = match value {
                    Some(op) => format!("{text}{}", eval(*op, regs, ret)),
                    None => text.clone(),
                };
                self.push_console(pid, tid, line);
                Ok(0)
            }
        };
        match r {
            Ok(v) => Ok(Flow::Ret(v)),
            Err(SyscallError::Panicked(p)) => Err(SyscallError::Panicked(p)),
            Err(e) => Ok(Flow::Ret(e.code())),
        }
    }

    // --- processes and threads ---------------------------------------

    fn child_tcb(&self, parent: &Tcb, tid: Tid, owner_pid: Pid) -> Tcb {
        Tcb {
            tid,
            owner_pid,
            state: ThreadState::Runnable,
            pc: parent.pc + 1,
            regs: parent.regs,
            ret: 0,
            pending: Pending::None,
        }
    }

    pub(crate) fn sys_fork(&mut self, tid: Tid) -> Result<Pid, SyscallError> {
        let parent = self.tcb(tid)?.clone();
        let ppid = parent.owner_pid;
        self.pcb(ppid)?;
        let pid = self.next_pid;
        let ctid = self.next_tid;
        let pcb = Pcb {
            pid,
            parent_pid: ppid,
            state: ProcState::Live,
            exit_status: 0,
            thread_ids: [ctid].into(),
            address_space_id: pid,
            address_space: AddressSpace::default(),
        };
        let ps = self.kalloc_pcb(pcb)?;
        let ts = match self.kalloc_tcb(self.child_tcb(&parent, ctid, pid)) {
            Ok(s) => s,
            Err(e) => {
                self.free_obj(ObjType::Pcb, ps)?;
                return Err(e);
            }
        };
        self.procs.insert(pid, ps);
        self.threads.insert(ctid, ts);
        if let Err(e) = self.vm_copy(ppid, pid, ctid) {
            self.procs.remove(&pid);
            self.threads.remove(&ctid);
            self.free_obj(ObjType::Tcb, ts)?;
            self.free_obj(ObjType::Pcb, ps)?;
            return Err(e);
        }
        self.alloc_pid();
        self.alloc_tid();
        self.run_queue.push_back(ctid);
        Ok(pid)
    }

    pub(crate) fn sys_thread_fork(&mut self, tid: Tid) -> Result<Tid, SyscallError> {
        let parent = self.tcb(tid)?.clone();
        let pid = parent.owner_pid;
        self.pcb(pid)?;
        let ntid = self.next_tid;
        let ts = self.kalloc_tcb(self.child_tcb(&parent, ntid, pid))?;
        self.alloc_tid();
        self.threads.insert(ntid, ts);
        self.pcb_mut(pid)?.thread_ids.insert(ntid);
        self.run_queue.push_back(ntid);
        Ok(ntid)
    }

    fn children_of(&self, pid: Pid) -> Vec<(Pid, ProcState)> {
        self.procs
            .iter()
            .filter_map(|(&p, s)| self.heap.pcbs.get(*s).map(|pcb| (p, pcb)))
            .filter(|(_, pcb)| pcb.parent_pid == pid && pcb.state != ProcState::Reaped)
            .map(|(p, pcb)| (p, pcb.state))
            .collect()
    }

    /// `Ok(None)` means the caller blocked.
    pub(crate) fn sys_wait(&mut self, tid: Tid) -> Result<Option<(Pid, i32)>, SyscallError> {
        let pid = self.tcb(tid)?.owner_pid;
        let children = self.children_of(pid);
        if children.is_empty() {
            return Err(SyscallError::NoChildren);
        }
        let Some(&(zpid, _)) = children.iter().find(|(_, s)| *s == ProcState::Zombie) else {
            self.tcb_mut(tid)?.state = ThreadState::Blocked;
            if self.current == Some(tid) {
                self.current = None;
            }
            return Ok(None);
        };
        let status = self.pcb(zpid)?.exit_status;
        if self.config.bug_flags.contains(BugFlags::LEAK_PCB_ON_WAIT) {
            self.pcb_mut(zpid)?.state = ProcState::Reaped;
        } else {
            let slot = self.procs.remove(&zpid).expect("child listed");
            self.free_obj(ObjType::Pcb, slot)?;
        }
        Ok(Some((zpid, status)))
    }

    fn wake_blocked(&mut self, pid: Pid) -> Result<(), SyscallError> {
        let tids: Vec<Tid> = self.pcb(pid)?.thread_ids.iter().copied().collect();
        for t in tids {
            let tcb = self.tcb_mut(t)?;
            if tcb.state == ThreadState::Blocked {
                tcb.state = ThreadState::Runnable;
                self.run_queue.push_back(t);
            }
        }
        Ok(())
    }

    /// Deletes the calling thread. The last thread out turns its process
    /// into a zombie.
    pub(crate) fn sys_vanish(&mut self, tid: Tid) -> Result<(), SyscallError> {
        let pid = self.tcb(tid)?.owner_pid;
        self.pcb(pid)?;
        let slot = self.threads.remove(&tid).expect("tcb checked");
        self.run_queue.retain(|&t| t != tid);
        if self.current == Some(tid) {
            self.current = None;
        }
        self.free_obj(ObjType::Tcb, slot)?;
        let pcb = self.pcb_mut(pid)?;
        pcb.thread_ids.remove(&tid);
        if !pcb.thread_ids.is_empty() {
            return Ok(());
        }
        self.call_path.push("unmap_destroy_process");
        self.vm_destroy(pid, tid)?;
        self.call_path.pop();
        let pcb = self.pcb_mut(pid)?;
        pcb.state = ProcState::Zombie;
        let parent = pcb.parent_pid;
        if self.config.bug_flags.contains(BugFlags::WILD_WRITE_ON_EXIT) {
            self.wild_write();
        }
        if pid == 1 {
            self.halt_completed();
            return Ok(());
        }
        let orphans: Vec<Pid> = self.children_of(pid).into_iter().map(|(p, _)| p).collect();
        let mut zombie_orphan = false;
        for o in orphans {
            let c = self.pcb_mut(o)?;
            c.parent_pid = 1;
            zombie_orphan |= c.state == ProcState::Zombie;
        }
        if zombie_orphan && self.process(1).is_some() {
            self.wake_blocked(1)?;
        }
        if self.process(parent).is_some_and(|p| p.state == ProcState::Live) {
            self.wake_blocked(parent)?;
        }
        Ok(())
    }

    /// Phase one of yield: look the target up and remember it.
    fn yield_begin(&mut self, tid: Tid, target: i64) -> Result<(), SyscallError> {
        let target = if target == -1 {
            0
        } else {
            let t = Tid::try_from(target).map_err(|_| SyscallError::TargetInvalid)?;
            if t == tid || t == 0 {
                return Err(SyscallError::TargetInvalid);
            }
            t
        };
        let slot = if target == 0 {
            SlotRef { index: u32::MAX, generation: 0 }
        } else {
            let slot = *self.threads.get(&target).ok_or(SyscallError::TargetInvalid)?;
            if self.tcb(target)?.state != ThreadState::Runnable {
                return Err(SyscallError::TargetInvalid);
            }
            slot
        };
        self.tcb_mut(tid)?.pending = Pending::Yield { target, slot };
        Ok(())
    }

    /// Phase two of yield, after the preemption point.
    fn yield_finish(&mut self, _tid: Tid, target: Tid, slot: SlotRef) -> Result<Flow, SyscallError> {
        if target == 0 {
            return Ok(match self.run_queue.front() {
                Some(&next) => Flow::Switch(next),
                None => Flow::Ret(0),
            });
        }
        if self.config.bug_flags.contains(BugFlags::STALE_TCB_YIELD) {
            // trusts the TCB found before the preemption point
            let fresh = self.heap.tcbs.get(slot).is_some_and(|t| t.tid == target);
            if !fresh {
                let addr = KernelHeap::slot_addr(ObjType::Tcb, slot.index);
                self.fault.last_fault_vaddr = Some(addr);
                return Err(self.panic_error(
                    PanicReason::UseAfterFree,
                    format!("yield switched to freed TCB of tid {target} at {addr:#010x}"),
                    Some(addr),
                ));
            }
        } else {
            let ok = self.threads.contains_key(&target)
                && self.tcb(target).is_ok_and(|t| t.state == ThreadState::Runnable);
            if !ok {
                return Ok(Flow::Ret(SyscallError::TargetInvalid.code()));
            }
        }
        if self.tcb(target)?.state != ThreadState::Runnable {
            return Ok(Flow::Ret(SyscallError::TargetInvalid.code()));
        }
        Ok(Flow::Switch(target))
    }

    /// Caller goes to the back of the run queue; `target` runs.
    fn switch_to(&mut self, tid: Tid, target: Tid) -> Result<(), SyscallError> {
        self.run_queue.retain(|&t| t != target);
        self.tcb_mut(tid)?.state = ThreadState::Runnable;
        self.run_queue.push_back(tid);
        self.dispatch_to(target, Some(tid));
        Ok(())
    }

    /// Scribbles over one kernel heap object.
    fn wild_write(&mut self) {
        let first = self.wild_rng.gen_range(0..3u32);
        for k in 0..3 {
            if self.try_wild_write((first + k) % 3) {
                return;
            }
        }
    }

    fn try_wild_write(&mut self, kind: u32) -> bool {
        match kind {
            0 => {
                let idx: Vec<usize> = (0..self.heap.tcbs.slots.len())
                    .filter(|&i| self.heap.tcbs.slots[i].live && self.heap.tcbs.slots[i].value.is_some())
                    .collect();
                if idx.is_empty() {
                    return false;
                }
                let i = idx[self.wild_rng.gen_range(0..idx.len())];
                let junk = self.wild_rng.gen::<u16>() as u32 | 0xdead_0000;
                self.heap.tcbs.slots[i].value.as_mut().unwrap().owner_pid = junk;
                true
            }
            1 => {
                let idx: Vec<usize> = (0..self.heap.pcbs.slots.len())
                    .filter(|&i| self.heap.pcbs.slots[i].live && self.heap.pcbs.slots[i].value.is_some())
                    .collect();
                if idx.is_empty() {
                    return false;
                }
                let i = idx[self.wild_rng.gen_range(0..idx.len())];
                let junk = self.wild_rng.gen::<u16>() as u32 | 0xbad0_0000;
                self.heap.pcbs.slots[i].value.as_mut().unwrap().pid = junk;
                true
            }
            _ => {
                let idx: Vec<usize> =
                    (0..self.heap.pcbs.slots.len()).filter(|&i| !self.heap.pcbs.slots[i].live).collect();
                if idx.is_empty() {
                    return false;
                }
                let i = idx[self.wild_rng.gen_range(0..idx.len())];
                self.heap.pcbs.slots[i].live = true;
                true
            }
        }
    }

    // --- direct syscall entry ------------------------------------------

    /// Runs `f` as one micro-step on behalf of `caller`, which must be the
    /// running thread. Program counters are left alone.
    fn direct<R>(
        &mut self,
        caller: Tid,
        name: &'static str,
        f: impl FnOnce(&mut Kernel) -> Result<R, SyscallError>,
    ) -> Result<R, SyscallError> {
        if self.halted.is_some() || self.shell_active() || self.current != Some(caller) {
            return Err(SyscallError::NotRunning);
        }
        let pid = self.tcb(caller)?.owner_pid;
        self.clock.step += 1;
        let now = self.clock.ticks;
        if let Some(d) = self.dmode.as_mut() {
            d.area.vmlog.release(caller, now);
        }
        self.call_path.clear();
        self.call_path.push(name);
        let r = f(self);
        self.clock.ticks += 1;
        let step = self.clock.step;
        self.push_event(KernelEvent::Syscall { step, pid, tid: caller, call: name, ret: None });
        if let Err(SyscallError::Panicked(ctx)) = &r {
            self.panic((**ctx).clone());
        }
        r
    }

    pub fn syscall_fork(&mut self, caller: Tid) -> Result<Pid, SyscallError> {
        self.direct(caller, "fork", |k| k.sys_fork(caller))
    }

    pub fn syscall_thread_fork(&mut self, caller: Tid) -> Result<Tid, SyscallError> {
        self.direct(caller, "thread_fork", |k| k.sys_thread_fork(caller))
    }

    /// `Ok(None)` when the caller blocked waiting for a child.
    pub fn syscall_wait(&mut self, caller: Tid) -> Result<Option<(Pid, i32)>, SyscallError> {
        self.direct(caller, "wait", |k| k.sys_wait(caller))
    }

    pub fn syscall_vanish(&mut self, caller: Tid) -> Result<(), SyscallError> {
        self.direct(caller, "vanish", |k| k.sys_vanish(caller))
    }

    pub fn syscall_exit(&mut self, caller: Tid, status: i32) -> Result<(), SyscallError> {
        self.direct(caller, "exit", |k| {
            let pid = k.tcb(caller)?.owner_pid;
            k.pcb_mut(pid)?.exit_status = status;
            k.sys_vanish(caller)
        })
    }

    /// Both halves of yield in one step; `target` -1 yields to anyone.
    pub fn syscall_yield(&mut self, caller: Tid, target: i64) -> Result<(), SyscallError> {
        self.direct(caller, "yield", |k| {
            k.yield_begin(caller, target)?;
            let Pending::Yield { target, slot } = k.tcb(caller)?.pending else { unreachable!() };
            k.tcb_mut(caller)?.pending = Pending::None;
            match k.yield_finish(caller, target, slot)? {
                Flow::Switch(t) => k.switch_to(caller, t),
                Flow::Ret(0) => Ok(()),
                Flow::Ret(_) => Err(SyscallError::TargetInvalid),
                _ => unreachable!("yield never blocks"),
            }
        })
    }

    pub fn syscall_gettid(&mut self, caller: Tid) -> Result<Tid, SyscallError> {
        self.direct(caller, "gettid", |_| Ok(caller))
    }

    pub fn syscall_getticks(&mut self, caller: Tid) -> Result<u64, SyscallError> {
        self.direct(caller, "getticks", |k| Ok(k.clock.ticks))
    }

    pub fn syscall_new_pages(&mut self, caller: Tid, base: u32, len: u32) -> Result<(), SyscallError> {
        self.direct(caller, "new_pages", |k| k.vm_new_pages(caller, base, len))
    }

    pub fn syscall_remove_pages(&mut self, caller: Tid, base: u32) -> Result<(), SyscallError> {
        self.direct(caller, "remove_pages", |k| k.vm_remove_pages(caller, base))
    }

    pub fn syscall_readfile(
        &mut self,
        caller: Tid,
        name: &str,
        buf: u32,
        len: u32,
        offset: u32,
    ) -> Result<i64, SyscallError> {
        self.direct(caller, "readfile", |k| k.vm_readfile(caller, name, buf, len, offset))
    }
}
