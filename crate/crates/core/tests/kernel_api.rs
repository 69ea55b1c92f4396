use dkernel::dmode::counters::ObjType;
use dkernel::dmode::validate::{validate, COUNTER_UNDERFLOW};
use dkernel::kernel::{KernelEvent, ProcState};
use dkernel::shell;
use dkernel::vm::VmOpKind;
use dkernel::workloads::RUG_ADDR;
use dkernel::{BugFlags, ConfigError, HeapSlots, Kernel, KernelConfig, PanicReason, RunOutcome, SyscallError};

fn quiet(f: impl FnOnce(&mut KernelConfig)) -> Kernel {
    let mut c = KernelConfig { timer_enabled: false, ..KernelConfig::default() };
    f(&mut c);
    Kernel::boot(c).unwrap()
}

fn count(k: &Kernel, ty: ObjType) -> u32 {
    k.dmode().unwrap().area.counters.count(ty.id())
}

#[test]
fn boot_defaults() {
    let k = quiet(|_| {});
    assert_eq!(k.step(), 0);
    assert_eq!(k.processes().len(), 1);
    assert_eq!(k.threads().len(), 1);
    assert_eq!(count(&k, ObjType::Pcb), 1);
    assert_eq!(count(&k, ObjType::Tcb), 1);
    assert_eq!(count(&k, ObjType::MemRegion), 0);
}

#[test]
fn degenerate_configs_rejected() {
    let bad = |f: fn(&mut KernelConfig)| {
        let mut c = KernelConfig::default();
        f(&mut c);
        Kernel::boot(c).err()
    };
    assert!(matches!(bad(|c| c.vmlog_capacity = 0), Some(ConfigError::VmlogCapacity)));
    assert_eq!(bad(|c| c.timer_period = 0), Some(ConfigError::TimerPeriod));
}

#[test]
fn fork_numbers_children_and_counts() {
    let mut k = quiet(|_| {});
    assert_eq!(k.syscall_fork(1), Ok(2));
    assert_eq!(count(&k, ObjType::Pcb), 2);
    assert_eq!(k.syscall_fork(1), Ok(3));
    assert_eq!(count(&k, ObjType::Pcb), 3);
    let p = k.process(3).unwrap();
    assert_eq!(p.parent_pid, 1);
}

#[test]
fn fork_with_full_pool_fails() {
    let mut k = quiet(|c| c.heap_slots = HeapSlots { pcb: 2, ..HeapSlots::default() });
    k.syscall_fork(1).unwrap();
    let e = k.syscall_fork(1).unwrap_err();
    assert_eq!(e, SyscallError::Exhausted);
    assert_eq!(e.code(), -1);
    assert_eq!(count(&k, ObjType::Pcb), 2);
}

#[test]
fn wait_without_children() {
    let mut k = quiet(|_| {});
    assert_eq!(k.syscall_wait(1), Err(SyscallError::NoChildren));
    assert_eq!(SyscallError::NoChildren.code(), -2);
}

fn zombie_child(leak: bool) -> Kernel {
    let mut k = quiet(|c| {
        if leak {
            c.bug_flags = BugFlags::LEAK_PCB_ON_WAIT;
        }
    });
    k.syscall_fork(1).unwrap();
    k.syscall_yield(1, -1).unwrap();
    k.syscall_exit(2, 0).unwrap();
    assert_eq!(k.schedule(), Some(1));
    assert_eq!(k.process(2).unwrap().state, ProcState::Zombie);
    k
}

#[test]
fn wait_reaps_and_frees() {
    let mut k = zombie_child(false);
    let tid = k.current_tid().unwrap();
    assert_eq!(tid, 1);
    let before = count(&k, ObjType::Pcb);
    assert_eq!(k.syscall_wait(1), Ok(Some((2, 0))));
    assert_eq!(count(&k, ObjType::Pcb), before - 1);
    assert!(k.process(2).is_none());
}

#[test]
fn leaky_wait_keeps_the_pcb() {
    let mut k = zombie_child(true);
    let before = count(&k, ObjType::Pcb);
    assert_eq!(k.syscall_wait(1), Ok(Some((2, 0))));
    assert_eq!(count(&k, ObjType::Pcb), before);
    assert_eq!(k.process(2).unwrap().state, ProcState::Reaped);
}

#[test]
fn unwaited_child_shows_as_zombie() {
    let mut k = zombie_child(false);
    shell::press_magic_key(&mut k);
    let ps = shell::exec(&mut k, "ps");
    let rows = ps.data["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["pid"], 2);
    assert_eq!(rows[1]["state"], "ZOMBIE");
}

#[test]
fn thread_fork_numbers_threads() {
    let mut k = quiet(|_| {});
    assert_eq!(k.syscall_thread_fork(1), Ok(2));
    let ids: Vec<u32> = k.process(1).unwrap().thread_ids.iter().copied().collect();
    assert_eq!(ids, vec![1, 2]);
    assert_eq!(count(&k, ObjType::Tcb), 2);
}

#[test]
fn thread_fork_with_full_pool() {
    let mut k = quiet(|c| c.heap_slots = HeapSlots { tcb: 1, ..HeapSlots::default() });
    assert_eq!(k.syscall_thread_fork(1), Err(SyscallError::Exhausted));
}

#[test]
fn yield_to_runnable_runs_it_next() {
    let mut k = quiet(|_| {});
    k.syscall_thread_fork(1).unwrap();
    assert_eq!(k.syscall_yield(1, 2), Ok(()));
    assert_eq!(k.current_tid(), Some(2));
}

#[test]
fn yield_to_missing_thread() {
    let mut k = quiet(|_| {});
    let e = k.syscall_yield(1, 99).unwrap_err();
    assert_eq!(e.code(), -1);
    assert_eq!(k.current_tid(), Some(1));
}

#[test]
fn gettid_and_getticks() {
    let mut k = quiet(|_| {});
    assert_eq!(k.syscall_gettid(1), Ok(1));
    let mut k = quiet(|_| {});
    assert_eq!(k.syscall_getticks(1), Ok(0));
    let b = k.syscall_getticks(1).unwrap();
    let c = k.syscall_getticks(1).unwrap();
    assert!(c >= b);
}

#[test]
fn caller_must_be_running() {
    let mut k = quiet(|_| {});
    k.syscall_thread_fork(1).unwrap();
    assert_eq!(k.syscall_gettid(2), Err(SyscallError::NotRunning));
}

#[test]
fn new_pages_logs_and_checks() {
    let mut k = quiet(|_| {});
    k.syscall_new_pages(1, RUG_ADDR, 4096).unwrap();
    let log = &k.dmode().unwrap().area.vmlog;
    let last = log.iter().last().unwrap().record;
    assert_eq!((last.pid, last.tid, last.op, last.vaddr), (1, 1, VmOpKind::NewPages, RUG_ADDR));
    assert_eq!(count(&k, ObjType::MemRegion), 1);
    assert_eq!(k.syscall_new_pages(1, RUG_ADDR + 1, 4096), Err(SyscallError::Unaligned));
    assert_eq!(k.syscall_new_pages(1, RUG_ADDR, 4096), Err(SyscallError::Overlap));
}

#[test]
fn remove_pages_frees_the_region() {
    let mut k = quiet(|_| {});
    k.syscall_new_pages(1, RUG_ADDR, 4096).unwrap();
    k.syscall_remove_pages(1, RUG_ADDR).unwrap();
    assert_eq!(count(&k, ObjType::MemRegion), 0);
    assert_eq!(k.syscall_remove_pages(1, RUG_ADDR), Err(SyscallError::NotMapped));
}

#[test]
fn readfile_paths() {
    let mut k = quiet(|_| {});
    let e = k.syscall_readfile(1, "exam_solution.txt", RUG_ADDR, 4096, 0).unwrap_err();
    assert!(e.code() < 0);
    k.syscall_new_pages(1, RUG_ADDR, 4096).unwrap();
    assert!(k.syscall_readfile(1, "exam_solution.txt", RUG_ADDR, 4096, 0).unwrap() > 0);
    let ops: Vec<VmOpKind> = k.dmode().unwrap().area.vmlog.iter().map(|o| o.record.op).collect();
    assert!(ops.contains(&VmOpKind::Validate));
}

#[test]
fn unvalidated_readfile_faults() {
    let mut k = quiet(|c| {
        c.bug_flags = BugFlags::SKIP_VM_VALIDATION_IN_READFILE;
        c.dmode_enabled = false;
    });
    let e = k.syscall_readfile(1, "exam_solution.txt", RUG_ADDR, 4096, 0).unwrap_err();
    let SyscallError::Panicked(ctx) = e else { panic!("expected a panic") };
    assert_eq!(ctx.reason, PanicReason::PageFaultKernelMode);
    assert_eq!(ctx.faulting_vaddr, Some(RUG_ADDR));
    assert_eq!(k.fault_register().last_fault_vaddr, Some(RUG_ADDR));
    assert!(matches!(k.outcome(), Some(RunOutcome::Panicked(_))));
}

#[test]
fn double_free_panics() {
    let mut k = quiet(|c| c.dmode_enabled = false);
    let slot = k.kalloc(ObjType::MemRegion).unwrap();
    k.kfree(ObjType::MemRegion, slot).unwrap();
    let e = k.kfree(ObjType::MemRegion, slot).unwrap_err();
    assert!(matches!(e, SyscallError::Panicked(_)));
}

#[test]
fn kalloc_on_empty_pool() {
    let mut k = quiet(|c| c.heap_slots = HeapSlots { mem_region: 1, ..HeapSlots::default() });
    k.kalloc(ObjType::MemRegion).unwrap();
    assert_eq!(k.kalloc(ObjType::MemRegion), Err(SyscallError::Exhausted));
}

#[test]
fn counter_underflow_is_a_violation() {
    let mut k = quiet(|_| {});
    let d = k.dmode_mut().unwrap();
    d.area.counters.record_free(ObjType::MemRegion.id());
    assert_eq!(d.area.counters.count(ObjType::MemRegion.id()), 0);
    let r = validate(&k);
    assert!(r.violations.iter().any(|v| v.contract == COUNTER_UNDERFLOW));
}

#[test]
fn last_thread_out_destroys_the_address_space() {
    let mut k = quiet(|_| {});
    k.syscall_fork(1).unwrap();
    k.syscall_yield(1, -1).unwrap();
    let child_tid = k.current_tid().unwrap();
    k.syscall_new_pages(child_tid, RUG_ADDR, 4096).unwrap();
    assert_eq!(count(&k, ObjType::MemRegion), 1);
    k.syscall_exit(child_tid, 7).unwrap();
    assert_eq!(count(&k, ObjType::MemRegion), 0);
    let p = k.process(2).unwrap();
    assert_eq!((p.state, p.exit_status), (ProcState::Zombie, 7));
    assert!(p.thread_ids.is_empty());
}

#[test]
fn nothing_to_run_completes() {
    let mut k = quiet(|_| {});
    k.syscall_vanish(1).unwrap();
    assert_eq!(k.run(10), RunOutcome::Completed);
}

#[test]
fn timer_in_shell_is_suppressed() {
    let mut k = quiet(|_| {});
    k.syscall_thread_fork(1).unwrap();
    shell::press_magic_key(&mut k);
    assert!(k.shell_active());
    k.deliver_interrupt(dkernel::InterruptKind::Timer, None);
    assert_eq!(k.suppressed_timers(), 1);
    assert_eq!(k.current_tid(), Some(1));
    assert!(k.events().iter().all(|e| !matches!(e, KernelEvent::Switch { .. })));
}
