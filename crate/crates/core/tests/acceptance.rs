//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use serde_json::Value;

use dkernel::dmode::counters::{ObjType, COUNTER_TABLE_BYTES};
use dkernel::dmode::safe_area::{safe_area_budget, WORKING_AREA_BYTES};
use dkernel::dmode::validate::validate;
use dkernel::dmode::vmlog::{VmOpLog, VmOpRecord, RECORD_BYTES};
use dkernel::kernel::KernelEvent;
use dkernel::replay::{bisect, bisect_budget, record, replay};
use dkernel::shell::{self, CommandResult};
use dkernel::vm::VmOpKind;
use dkernel::workloads::bench::{bench712, bench_mutex712};
use dkernel::workloads::{buggy_config, ScenarioKind, Workload, RUG_ADDR};
use dkernel::{BugFlags, HeapSlots, Kernel, KernelConfig, PanicReason, RunOutcome};

/// Wall-clock ceiling for criterion 1.
const DETERMINISM_LIMIT: Duration = Duration::from_secs(60);
/// Step budget per determinism run (fork_bomb and rug_pull never finish).
const DETERMINISM_STEPS: u64 = 20_000;
const DETERMINISM_SEEDS: u64 = 100;
/// Minimum number of panicking dead_yield seeds for criterion 2.
const MIN_PANIC_SEEDS: usize = 20;
const SEED_SWEEP: u64 = 400;
const BISECT_SIZES: [u64; 3] = [256, 1024, 4096];
const PCB_CAPACITY: u32 = 64;
const MAX_LIVE: usize = 2;
const VMLOG_CAPACITY: u32 = 1000;
const SAFE_AREA_BYTES: usize = 20216;
const TRANSPARENCY_SEEDS: u64 = 50;
const BENCH_N: u32 = 100;
const REGION_POOL: u32 = 128;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn boot(config: KernelConfig) -> Kernel {
    Kernel::boot(config).expect("valid config")
}

fn sh(k: &mut Kernel, line: &str) -> CommandResult {
    shell::exec(k, line)
}

fn memstat_count(r: &CommandResult, ty: &str) -> u64 {
    r.data["rows"]
        .as_array()
        .and_then(|rows| rows.iter().find(|row| row["type"] == ty || row["type_name"] == ty))
        .and_then(|row| row["count"].as_u64())
        .unwrap_or(u64::MAX)
}

fn ps_live(r: &CommandResult) -> usize {
    r.data["rows"]
        .as_array()
        .map_or(usize::MAX, |ps| ps.iter().filter(|p| p["state"] == "LIVE").count())
}

fn vmlog_rows(r: &CommandResult) -> Vec<Value> {
    r.data["records"].as_array().cloned().unwrap_or_default()
}

/// The scenario's bug with d-mode off, so a panic halts the run.
fn plain(kind: ScenarioKind, seed: u64) -> KernelConfig {
    KernelConfig { dmode_enabled: false, ..buggy_config(kind, seed) }
}

fn run_twice(config: &KernelConfig) -> (Vec<KernelEvent>, u64, Vec<KernelEvent>, u64) {
    let mut a = boot(config.clone());
    a.run(DETERMINISM_STEPS);
    let mut b = boot(config.clone());
    b.run(DETERMINISM_STEPS);
    (a.events().to_vec(), a.state_hash(), b.events().to_vec(), b.state_hash())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    for kind in [ScenarioKind::ForkBomb, ScenarioKind::RugPull, ScenarioKind::DeadYield] {
        for seed in 0..DETERMINISM_SEEDS {
            let (ea, ha, eb, hb) = run_twice(&plain(kind, seed));
            check(ea == eb, format!("{kind} seed {seed}: event traces differ"))?;
            check(ha == hb, format!("{kind} seed {seed}: hashes differ"))?;
            check(!ea.is_empty(), format!("{kind} seed {seed}: empty trace"))?;
            runs += 2;
        }
    }
    let took = start.elapsed();
    check(took < DETERMINISM_LIMIT, format!("took {took:?}"))?;
    Ok(format!("{runs} runs identical in {:.2}s (limit 60s)", took.as_secs_f64()))
}

fn dead_yield_panic_seeds() -> Vec<u64> {
    (0..SEED_SWEEP)
        .filter(|&seed| {
            let mut k = boot(plain(ScenarioKind::DeadYield, seed));
            matches!(k.run(DETERMINISM_STEPS), RunOutcome::Panicked(_))
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let seeds = dead_yield_panic_seeds();
    check(seeds.len() >= MIN_PANIC_SEEDS, format!("only {} panicking seeds in 0..{SEED_SWEEP}", seeds.len()))?;
    for &seed in &seeds {
        let (outcome, trace) = record(plain(ScenarioKind::DeadYield, seed), DETERMINISM_STEPS).unwrap();
        let RunOutcome::Panicked(live) = &outcome else {
            return Err(format!("seed {seed}: recorded run did not panic"));
        };
        let (again, k) = replay(&trace).map_err(|e| e.to_string())?;
        let RunOutcome::Panicked(ctx) = &again else {
            return Err(format!("seed {seed}: replay ended {}", again.name()));
        };
        let key = |c: &dkernel::PanicContext| (c.step, c.pid, c.tid, c.reason);
        check(key(ctx) == key(live), format!("seed {seed}: panic context differs"))?;
        check(ctx == live, format!("seed {seed}: panic detail differs"))?;
        check(k.state_hash() == trace.final_hash, format!("seed {seed}: final hash differs"))?;
    }
    Ok(format!("{} panicking seeds replayed with identical PanicContext and hash", seeds.len()))
}

/// First step at which `pred` holds, by stepping a fresh kernel one
/// micro-step at a time.
fn oracle_first(config: &KernelConfig, last: u64, pred: &dyn Fn(&Kernel) -> bool) -> Option<u64> {
    let mut k = boot(config.clone());
    if pred(&k) {
        return Some(0);
    }
    for _ in 0..last {
        k.run(1);
        if pred(&k) {
            return Some(k.step());
        }
    }
    None
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    for n in BISECT_SIZES {
        let config = KernelConfig {
            heap_slots: HeapSlots { pcb: PCB_CAPACITY, ..HeapSlots::default() },
            ..buggy_config(ScenarioKind::ForkBomb, 7)
        };
        let (_, trace) = record(config.clone(), n - 1).unwrap();
        check(trace.len() == n, format!("trace length {} != {n}", trace.len()))?;
        let budget = bisect_budget(n);
        let expected_budget = (n as f64).log2().ceil() as u32 + 1;
        check(budget == expected_budget, format!("budget {budget} for N={n}"))?;
        let thresholds = [1u32, 5, 17, 40, 63];
        for m in thresholds {
            let pred = move |k: &Kernel| k.live_objects(ObjType::Pcb) >= m as usize;
            let want = oracle_first(&config, n - 1, &pred);
            let got = bisect(&trace, pred).map_err(|e| e.to_string())?;
            check(got.step == want, format!("N={n} PCB>={m}: bisect {:?}, oracle {want:?}", got.step))?;
            check(got.replays <= budget, format!("N={n}: {} replays > {budget}", got.replays))?;
            checked += 1;
        }
        let tid_pred = move |k: &Kernel| k.threads_created() as u64 >= n / 8;
        let want = oracle_first(&config, n - 1, &tid_pred);
        let got = bisect(&trace, tid_pred).map_err(|e| e.to_string())?;
        check(got.step == want, format!("N={n} threads: bisect {:?}, oracle {want:?}", got.step))?;
        check(got.replays <= budget, format!("N={n}: {} replays > {budget}", got.replays))?;
        checked += 1;
    }
    Ok(format!("{checked} bisections matched the linear oracle within ceil(log2 N)+1 replays"))
}

fn criterion_4() -> Outcome {
    let config = KernelConfig {
        dmode_enabled: true,
        heap_slots: HeapSlots { pcb: PCB_CAPACITY, ..HeapSlots::default() },
        ..buggy_config(ScenarioKind::ForkBomb, 0)
    };
    check(config.bug_flags.contains(BugFlags::LEAK_PCB_ON_WAIT), "bug flag missing")?;
    let mut k = boot(config);
    let o = k.run(20_000);
    check(o == RunOutcome::StepBudgetExhausted, format!("fork_bomb ended {}", o.name()))?;
    shell::press_magic_key(&mut k);
    check(k.shell_active(), "magic key did not open the shell")?;
    let memstat = sh(&mut k, "memstat");
    let ps = sh(&mut k, "ps");
    let pcb = memstat_count(&memstat, "PCB");
    let live = ps_live(&ps);
    check(pcb == PCB_CAPACITY as u64, format!("memstat PCB={pcb}"))?;
    check(live <= MAX_LIVE, format!("ps LIVE={live}"))?;
    Ok(format!("one iteration: memstat PCB={pcb}, ps LIVE={live}"))
}

fn criterion_5() -> Outcome {
    let seed = (0..SEED_SWEEP)
        .find(|&s| {
            let mut k = boot(plain(ScenarioKind::RugPull, s));
            matches!(k.run(DETERMINISM_STEPS), RunOutcome::Panicked(ref p) if p.reason == PanicReason::PageFaultKernelMode)
        })
        .ok_or("no failing rug_pull seed")?;
    let mut k = boot(KernelConfig { dmode_enabled: true, ..buggy_config(ScenarioKind::RugPull, seed) });
    let o = k.run(DETERMINISM_STEPS);
    let RunOutcome::ShellEntered { panic: Some(p) } = &o else {
        return Err(format!("seed {seed}: ended {}", o.name()));
    };
    let faulting_tid = p.tid;
    let cr2 = sh(&mut k, "cr2");
    check(cr2.data["cr2"].as_u64() == Some(RUG_ADDR as u64), format!("cr2 data {}", cr2.data))?;
    check(cr2.text.contains("0x13370000"), format!("cr2 text {}", cr2.text))?;
    let log = sh(&mut k, "vmlog --addr 0x13370000");
    let rows = vmlog_rows(&log);
    let newest_change = rows
        .iter()
        .find(|r| r["op"] != "PAGE_FAULT" && r["op"] != "VALIDATE")
        .ok_or("no mapping change logged")?;
    check(newest_change["op"] == VmOpKind::RemovePages.name(), format!("newest change {newest_change}"))?;
    let tid = newest_change["tid"].as_u64().unwrap_or(0);
    check(tid != faulting_tid as u64, format!("REMOVE_PAGES by faulting tid {tid}"))?;
    check(k.dmode().unwrap().session().unwrap().command_history.len() == 2, "not one session")?;
    Ok(format!("seed {seed}: cr2=0x13370000, newest mapping change REMOVE_PAGES by tid {tid} (faulting tid {faulting_tid})"))
}

fn criterion_6() -> Outcome {
    let oracle = 4096 + 120 + 16 * 1000;
    check(oracle == SAFE_AREA_BYTES, "oracle arithmetic")?;
    check(WORKING_AREA_BYTES + COUNTER_TABLE_BYTES + RECORD_BYTES * 1000 == oracle, "component sizes")?;
    check(safe_area_budget(VMLOG_CAPACITY as usize) == oracle, "budget formula")?;
    let k = boot(KernelConfig { dmode_enabled: true, vmlog_capacity: VMLOG_CAPACITY, ..KernelConfig::default() });
    let image = k.dmode().unwrap().area.reservation_image();
    check(image.len() == oracle, format!("reservation image {} bytes", image.len()))?;
    let rec = VmOpRecord { pid: 1, tid: 2, op: VmOpKind::RemovePages, vaddr: RUG_ADDR };
    check(rec.encode().len() == 16, "record size")?;
    check(VmOpRecord::decode(&rec.encode()) == Some(rec), "record roundtrip")?;
    Ok(format!("reservation {} bytes, record 16 bytes", image.len()))
}

fn record_n(i: u64) -> VmOpRecord {
    VmOpRecord { pid: i as u32, tid: (i * 7) as u32, op: VmOpKind::ALL[(i % 6) as usize], vaddr: (i as u32) << 12 }
}

fn criterion_7() -> Outcome {
    let mut log = VmOpLog::new(1000);
    for i in 0..1500 {
        log.append(record_n(i));
    }
    let want: Vec<u64> = (500..1500).collect();
    check(log.retained_seqs() == want, "retained seqs are not 500..1499")?;
    check(log.iter().all(|o| o.record == record_n(o.seq)), "records do not match their seqs")?;

    let mut runner = TestRunner::new(PropConfig { cases: 256, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&(1usize..=64, 0u64..300), |(cap, n)| {
            let mut ring = VmOpLog::new(cap);
            let mut naive: VecDeque<(u64, VmOpRecord)> = VecDeque::new();
            for i in 0..n {
                let seq = ring.append(record_n(i));
                prop_assert_eq!(seq, i);
                naive.push_back((i, record_n(i)));
                if naive.len() > cap {
                    naive.pop_front();
                }
            }
            let got: Vec<(u64, VmOpRecord)> = ring.iter().map(|o| (o.seq, o.record)).collect();
            prop_assert_eq!(got, naive.into_iter().collect::<Vec<_>>());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("1500 appends keep 500..1499; capacities 1..64 agree with a naive list over 256 cases".into())
}

fn criterion_8() -> Outcome {
    let kinds = [ScenarioKind::ForkBomb, ScenarioKind::RugPull, ScenarioKind::DeadYield, ScenarioKind::Mutex712];
    for kind in kinds {
        for seed in 0..TRANSPARENCY_SEEDS {
            let mut config = buggy_config(kind, seed);
            if kind == ScenarioKind::Mutex712 {
                config.workload = Workload::mutex712(3);
            }
            let mut off = boot(KernelConfig { dmode_enabled: false, ..config.clone() });
            off.run(DETERMINISM_STEPS);
            let mut on = boot(KernelConfig { dmode_enabled: true, ..config });
            on.run(DETERMINISM_STEPS);
            check(off.events() == on.events(), format!("{kind} seed {seed}: traces differ with d-mode"))?;
        }
    }
    for cost in [1u32, 3] {
        let r = bench712(2 * BENCH_N, KernelConfig { append_cost: cost, ..KernelConfig::default() })
            .map_err(|e| e.to_string())?;
        let want = 2 * BENCH_N as u64 * cost as u64;
        check(r.overhead_ticks == want, format!("bench712 overhead {} != {want}", r.overhead_ticks))?;
        check(r.total_ticks == r.baseline_ticks, "bench712 ticks changed under d-mode")?;
    }
    let mut waits = Vec::new();
    for c in [1u32, 2, 4, 8] {
        let r = bench_mutex712(c, KernelConfig { seed: 3, ..KernelConfig::default() }).map_err(|e| e.to_string())?;
        check(r.outcome == RunOutcome::Completed, format!("mutex712 C={c} ended {}", r.outcome.name()))?;
        waits.push(r.lock_wait_ticks);
    }
    check(waits.windows(2).all(|w| w[0] <= w[1]), format!("lock wait not monotone: {waits:?}"))?;
    Ok(format!(
        "{TRANSPARENCY_SEEDS} seeds x {} scenarios transparent; bench712 overhead = 2N x cost; mutex712 waits {waits:?}; \
         hardware percentages not reproduced",
        kinds.len()
    ))
}

fn criterion_9() -> Outcome {
    let config = KernelConfig {
        dmode_enabled: true,
        bug_flags: BugFlags::LEAK_REGION_ON_REMOVE,
        heap_slots: HeapSlots { mem_region: REGION_POOL, ..HeapSlots::default() },
        workload: Workload::bench712(4 * REGION_POOL),
        ..KernelConfig::default()
    };
    let mut k = boot(config);
    let stopped = k.run_until(100_000, |k| k.console().iter().any(|l| l.text.starts_with("new_pages failed")));
    check(stopped.is_none(), format!("bench ended {:?} without exhaustion", stopped.map(|o| o.name())))?;
    let line = k.console().last().unwrap().text.clone();
    let failed_at: u32 = line.rsplit(' ').next().and_then(|s| s.parse().ok()).ok_or("bad failure line")?;
    check(failed_at == REGION_POOL + 1, format!("exhausted at allocation {failed_at}"))?;
    let fails = k
        .events()
        .iter()
        .filter(|e| matches!(e, KernelEvent::Syscall { call: "new_pages", ret: Some(r), .. } if *r < 0))
        .count();
    check(fails == 1, format!("{fails} failed new_pages"))?;
    shell::press_magic_key(&mut k);
    check(k.shell_active(), "shell not active")?;
    let m = sh(&mut k, "memstat");
    let regions = memstat_count(&m, "MemRegion");
    check(regions == REGION_POOL as u64, format!("memstat MemRegion={regions}"))?;
    Ok(format!("exhaustion at allocation {failed_at}, memstat MemRegion={regions}"))
}

fn criterion_10() -> Outcome {
    let config = KernelConfig {
        dmode_enabled: true,
        bug_flags: BugFlags::WILD_WRITE_ON_EXIT,
        workload: Workload::mutex712(4),
        ..KernelConfig::default()
    };
    let mut k = boot(config);
    let o = k.run(200_000);
    if !k.shell_active() {
        shell::press_magic_key(&mut k);
    }
    check(k.shell_active(), format!("no shell after {}", o.name()))?;
    let direct = validate(&k);
    check(!direct.is_clean(), "validate() found nothing")?;
    let v = sh(&mut k, "validate");
    let n = v.data["violations"].as_array().map_or(0, Vec::len);
    check(n >= 1 && n == direct.violations.len(), format!("shell validate reported {n}"))?;
    let m = sh(&mut k, "memstat");
    check(m.ok && m.data["rows"].as_array().is_some_and(|r| r.len() == 3), "memstat broken")?;
    let l = sh(&mut k, "vmlog --last 5");
    check(l.ok && vmlog_rows(&l).len() == 5, format!("vmlog broken: {}", l.text))?;
    let a = sh(&mut k, &format!("vmlog --addr 0x{:x}", dkernel::workloads::BENCH_BASE));
    check(a.ok && !vmlog_rows(&a).is_empty(), "vmlog --addr broken")?;
    Ok(format!("{} violations ({}), memstat and vmlog answer", n, direct.violations[0].contract))
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match f() {
            Ok(msg) => println!("criterion {n}: PASS {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL {msg}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
