use dkernel::replay::{bisect, bisect_budget, record, replay, ReplayError, ReplayStop, ReplayTrace, Replayer};
use dkernel::shell;
use dkernel::workloads::diagnosis::{find_failing_seed, linear_first_step, second_thread_freed};
use dkernel::workloads::{buggy_config, ScenarioKind, Workload};
use dkernel::{Kernel, KernelConfig, PanicReason, RunOutcome};

fn fork_bomb(seed: u64) -> KernelConfig {
    KernelConfig { seed, workload: Workload::new(ScenarioKind::ForkBomb), ..KernelConfig::default() }
}

fn failing_dead_yield() -> KernelConfig {
    let seed = find_failing_seed(&buggy_config(ScenarioKind::DeadYield, 0), PanicReason::UseAfterFree, 0..200, 1000).unwrap();
    KernelConfig { dmode_enabled: false, ..buggy_config(ScenarioKind::DeadYield, seed) }
}

#[test]
fn quiet_run_records_no_events() {
    let (o, t) = record(KernelConfig { timer_enabled: false, ..KernelConfig::default() }, 100).unwrap();
    assert_eq!(o, RunOutcome::Completed);
    assert!(t.events.is_empty());
    assert_eq!(t.outcome, RunOutcome::Completed);
}

#[test]
fn recording_a_failing_seed_ends_in_the_panic() {
    let (o, t) = record(failing_dead_yield(), 1000).unwrap();
    let RunOutcome::Panicked(p) = &t.outcome else { panic!() };
    assert_eq!(p.reason, PanicReason::UseAfterFree);
    assert_eq!(o, t.outcome);
    assert_eq!(t.final_step, p.step);
}

#[test]
fn records_are_byte_identical() {
    let (_, a) = record(fork_bomb(9), 2000).unwrap();
    let (_, b) = record(fork_bomb(9), 2000).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert!(!a.events.is_empty());
}

#[test]
fn replayed_panic_matches() {
    let (o, t) = record(failing_dead_yield(), 1000).unwrap();
    let (again, k) = replay(&t).unwrap();
    assert_eq!(again, o);
    assert_eq!(k.state_hash(), t.final_hash);
}

#[test]
fn breakpoint_state_matches_a_run_to_that_step() {
    let (_, t) = record(fork_bomb(4), 3000).unwrap();
    for s in [1, 17, 1000, 2999] {
        let mut a = Replayer::with_breakpoints(t.clone(), [s]).unwrap();
        assert_eq!(a.resume(), ReplayStop::Breakpoint(s));
        let mut b = Replayer::new(t.clone()).unwrap();
        assert_eq!(b.run_until(s), ReplayStop::Until(s));
        assert_eq!(a.kernel().state_hash(), b.kernel().state_hash());
        assert_eq!(a.kernel().step(), s);
    }
}

#[test]
fn paused_replay_equals_live_prefix() {
    let config = fork_bomb(5);
    let (_, t) = record(config.clone(), 1500).unwrap();
    let mut live = Kernel::boot(config).unwrap();
    live.run(700);
    let mut r = Replayer::new(t).unwrap();
    r.run_until(700);
    assert_eq!(r.kernel().state_hash(), live.state_hash());
}

#[test]
fn shuffled_events_rejected() {
    let (_, mut t) = record(fork_bomb(6), 2000).unwrap();
    assert!(t.events.len() >= 2);
    t.events.swap(0, 1);
    assert!(matches!(Replayer::new(t.clone()), Err(ReplayError::TraceInvalid(_))));
    assert!(matches!(replay(&t), Err(ReplayError::TraceInvalid(_))));
}

#[test]
fn bisect_finds_step_700() {
    let (_, t) = record(fork_bomb(1), 1023).unwrap();
    assert_eq!(t.len(), 1024);
    let pred = |k: &Kernel| k.step() >= 700;
    let r = bisect(&t, pred).unwrap();
    assert_eq!(r.step, Some(700));
    assert_eq!(linear_first_step(&t, pred), Some(700));
    assert!(r.replays <= 11);
    assert_eq!(bisect_budget(1024), 11);
}

#[test]
fn bisect_edges() {
    let (_, t) = record(fork_bomb(1), 255).unwrap();
    let r = bisect(&t, |_| true).unwrap();
    assert_eq!(r.step, Some(0));
    let r = bisect(&t, |_| false).unwrap();
    assert_eq!(r.step, None);
    assert!(r.replays <= bisect_budget(t.len()));
}

#[test]
fn bisect_locates_the_freed_thread() {
    let (_, t) = record(failing_dead_yield(), 1000).unwrap();
    let r = bisect(&t, second_thread_freed).unwrap();
    assert_eq!(r.step, linear_first_step(&t, second_thread_freed));
    assert!(r.step.is_some());
    assert!(r.replays <= bisect_budget(t.len()));
}

#[test]
fn save_load_replay_chain() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.dprt");
    let (_, t) = record(failing_dead_yield(), 1000).unwrap();
    t.save(&path).unwrap();
    let loaded = ReplayTrace::load(&path).unwrap();
    assert_eq!(loaded, t);
    let (_, k) = replay(&loaded).unwrap();
    assert_eq!(k.state_hash(), t.final_hash);
}

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.dprt");
    let (_, t) = record(fork_bomb(2), 500).unwrap();
    let bytes = t.to_bytes();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(ReplayTrace::load(&path), Err(ReplayError::Format { .. })));
    assert!(matches!(ReplayTrace::load(&dir.path().join("missing")), Err(ReplayError::Io(_))));
}

#[test]
fn magic_key_run_replays_to_its_shell() {
    let config = KernelConfig { record_trace: true, ..fork_bomb(8) };
    let mut k = Kernel::boot(config).unwrap();
    k.run(400);
    shell::press_magic_key(&mut k);
    let t = ReplayTrace::from_kernel(&k).unwrap();
    assert_eq!(t.outcome, RunOutcome::ShellEntered { panic: None });
    let (o, r) = replay(&t).unwrap();
    assert_eq!(o, t.outcome);
    assert_eq!(r.state_hash(), t.final_hash);
}

#[test]
fn shell_replay_commands() {
    let config = KernelConfig { record_trace: true, ..fork_bomb(3) };
    let mut k = Kernel::boot(config).unwrap();
    k.run(600);
    let live_hash = k.state_hash();
    shell::press_magic_key(&mut k);

    let r = shell::exec(&mut k, "break 250");
    assert!(r.ok, "{}", r.text);
    let r = shell::exec(&mut k, "replay 100");
    assert_eq!(r.data["stopped"], "until");
    assert_eq!(r.data["step"], 100);
    let ps_then = shell::exec(&mut k, "ps");
    let r = shell::exec(&mut k, "step");
    assert_eq!(r.data["step"], 101);
    let r = shell::exec(&mut k, "continue");
    assert_eq!(r.data["stopped"], "break");
    assert_eq!(r.data["step"], 250);
    let r = shell::exec(&mut k, "continue");
    assert_eq!(r.data["stopped"], "end");
    assert_eq!(r.data["hash"], live_hash);

    // inspection during a replay looks at the replayed kernel
    let mut fresh = Kernel::boot(fork_bomb(3)).unwrap();
    fresh.run(100);
    let pids = |v: &serde_json::Value| v["rows"].as_array().unwrap().len();
    assert_eq!(pids(&ps_then.data), fresh.processes().len());

    let r = shell::exec(&mut k, "replay 99999");
    assert_eq!(r.data["error"], "BAD_ARGUMENT");
    shell::exec(&mut k, "quit");
    assert!(!k.shell_active());
    assert_eq!(k.step(), 600);
}

#[test]
fn shell_replay_needs_a_recording() {
    let mut k = Kernel::boot(fork_bomb(3)).unwrap();
    k.run(10);
    shell::press_magic_key(&mut k);
    assert_eq!(shell::exec(&mut k, "replay 5").data["error"], "NO_TRACE");
    assert_eq!(shell::exec(&mut k, "step").data["error"], "NO_REPLAY");
}
