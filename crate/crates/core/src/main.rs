use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dkernel::bridge::Bridge;
use dkernel::dmode::counters::ObjType;
use dkernel::kernel::{BugFlags, HeapSlots, Kernel, KernelConfig, RunOutcome};
use dkernel::replay::{bisect, bisect_budget, ReplayStop, ReplayTrace, Replayer};
use dkernel::shell;
use dkernel::workloads::bench::{bench712, bench_mutex712};
use dkernel::workloads::diagnosis::{
    find_failing_seed, memory_exhaustion_script, non_determinism_script, run_diagnosis, second_thread_freed,
    use_after_free_script,
};
use dkernel::workloads::{ScenarioKind, ScenarioReport, Workload};
use dkernel::PanicReason;

const EXIT_PANIC: u8 = 2;
const EXIT_USAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "dkernel", version, about = "Deterministic teaching-kernel simulator with a debug mode")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot a scenario and run it.
    Run(RunArgs),
    /// Replay a recorded trace.
    Replay(ReplayArgs),
    /// Run a benchmark.
    Bench {
        #[command(subcommand)]
        which: BenchCmd,
    },
    /// Serve the debug bridge for a scenario.
    Serve(ServeArgs),
    /// Run a scripted diagnosis session.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Clone)]
struct KernelOpts {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Injected bug (repeatable), e.g. LEAK_PCB_ON_WAIT.
    #[arg(long = "bug", value_parser = parse_bug)]
    bugs: Vec<BugFlags>,
    #[arg(long)]
    dmode: bool,
    #[arg(long, default_value_t = 4)]
    timer_period: u32,
    #[arg(long)]
    no_timer: bool,
    #[arg(long, default_value_t = 64)]
    pcb: u32,
    #[arg(long, default_value_t = 128)]
    tcb: u32,
    #[arg(long, default_value_t = 1024)]
    regions: u32,
    #[arg(long, default_value_t = 1000)]
    vmlog_capacity: u32,
}

impl KernelOpts {
    fn config(&self, workload: Workload) -> KernelConfig {
        KernelConfig {
            seed: self.seed,
            timer_period: self.timer_period,
            timer_enabled: !self.no_timer,
            heap_slots: HeapSlots { pcb: self.pcb, tcb: self.tcb, mem_region: self.regions },
            vmlog_capacity: self.vmlog_capacity,
            dmode_enabled: self.dmode,
            bug_flags: self.bugs.iter().fold(BugFlags::empty(), |a, b| a | *b),
            record_trace: false,
            append_cost: 1,
            workload,
        }
    }
}

#[derive(Args)]
struct WorkloadOpts {
    #[arg(long, value_parser = parse_scenario)]
    scenario: ScenarioKind,
    /// bench712: N allocations.
    #[arg(long)]
    ops: Option<u32>,
    /// mutex712: child processes.
    #[arg(long)]
    children: Option<u32>,
    /// dead_yield: getticks calls before the race.
    #[arg(long)]
    pad: Option<u32>,
}

impl WorkloadOpts {
    fn workload(&self) -> Workload {
        let mut w = Workload::new(self.scenario);
        if let Some(n) = self.ops {
            w.ops = n;
        }
        if let Some(c) = self.children {
            w.children = c;
        }
        if let Some(p) = self.pad {
            w.pad = p;
        }
        w
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadOpts,
    #[command(flatten)]
    kernel: KernelOpts,
    /// Save the run's trace here.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    max_steps: u64,
    /// Shell command to run afterwards (repeatable). Without a panic the
    /// shell is opened with the magic key; needs --dmode.
    #[arg(long = "cmd")]
    cmds: Vec<String>,
    /// A panic is the expected result: exit 0 on panic, 1 otherwise.
    #[arg(long)]
    expect_panic: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    file: PathBuf,
    /// Breakpoint step (repeatable).
    #[arg(long = "break")]
    breaks: Vec<u64>,
    /// Bisect for the first step where the named predicate holds:
    /// second-thread-freed, panicked, fault-set, step>=N, regions>=N.
    #[arg(long)]
    bisect: Option<String>,
    #[arg(long = "cmd")]
    cmds: Vec<String>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// N allocations and N deallocations in one process.
    #[command(name = "712")]
    B712 {
        /// Total operations 2N.
        #[arg(long, default_value_t = 200)]
        ops: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        append_cost: u32,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// C processes of 100 allocate/free pairs each.
    Mutex712 {
        #[arg(long, default_value_t = 2)]
        children: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        append_cost: u32,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 7712)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[command(flatten)]
    workload: WorkloadOpts,
    #[command(flatten)]
    kernel: KernelOpts,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// memory-exhaustion, use-after-free or non-determinism.
    which: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pad: u32,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_bug(s: &str) -> Result<BugFlags, String> {
    BugFlags::parse_one(s).ok_or_else(|| format!("unknown bug flag {s}"))
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse::<ScenarioKind>().map_err(|e| e.to_string())
}

fn emit(text: &str, doc: &Value, json_path: &Option<PathBuf>) -> Result<(), String> {
    print!("{text}");
    let body = serde_json::to_string_pretty(doc).unwrap();
    match json_path {
        Some(p) => std::fs::write(p, body).map_err(|e| format!("writing {}: {e}", p.display())),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

fn run_shell_commands(k: &mut Kernel, cmds: &[String]) -> Vec<Value> {
    if cmds.is_empty() {
        return Vec::new();
    }
    if !k.shell_active() && k.dmode().is_some() {
        let _ = shell::enter(k, shell::ShellTrigger::MagicKey, None);
    }
    cmds.iter()
        .map(|c| {
            let r = shell::exec(k, c);
            println!("dmode> {c}\n{}", r.text.trim_end());
            json!({ "command": c, "result": r })
        })
        .collect()
}

fn cmd_run(a: RunArgs) -> Result<ExitCode, String> {
    let mut config = a.kernel.config(a.workload.workload());
    config.record_trace = a.record.is_some();
    let mut k = Kernel::boot(config).map_err(|e| e.to_string())?;
    let outcome = k.run(a.max_steps);
    if let Some(path) = &a.record {
        let t = ReplayTrace::from_kernel(&k).expect("recording");
        t.save(path).map_err(|e| e.to_string())?;
    }
    let report = ScenarioReport::from_kernel(&k, outcome.clone());
    let shell_out = run_shell_commands(&mut k, &a.cmds);
    let doc = json!({ "report": report, "shell": shell_out });
    emit(&report.text(), &doc, &a.json)?;
    let panicked = outcome.panic().is_some();
    Ok(match (a.expect_panic, panicked) {
        (true, true) | (false, false) => ExitCode::SUCCESS,
        (true, false) => ExitCode::from(1),
        (false, true) => ExitCode::from(EXIT_PANIC),
    })
}

type Predicate = Box<dyn FnMut(&Kernel) -> bool>;

fn predicate(name: &str) -> Result<Predicate, String> {
    if let Some(n) = name.strip_prefix("step>=") {
        let n: u64 = n.parse().map_err(|_| format!("bad predicate {name}"))?;
        return Ok(Box::new(move |k| k.step() >= n));
    }
    if let Some(n) = name.strip_prefix("regions>=") {
        let n: usize = n.parse().map_err(|_| format!("bad predicate {name}"))?;
        return Ok(Box::new(move |k| k.live_objects(ObjType::MemRegion) >= n));
    }
    match name {
        "second-thread-freed" => Ok(Box::new(second_thread_freed)),
        "panicked" => Ok(Box::new(|k| k.outcome().and_then(RunOutcome::panic).is_some())),
        "fault-set" => Ok(Box::new(|k| k.fault_register().last_fault_vaddr.is_some())),
        _ => Err(format!("unknown predicate {name}")),
    }
}

fn cmd_replay(a: ReplayArgs) -> Result<ExitCode, String> {
    let trace = ReplayTrace::load(&a.file).map_err(|e| e.to_string())?;
    if let Some(name) = &a.bisect {
        let pred = predicate(name)?;
        let r = bisect(&trace, pred).map_err(|e| e.to_string())?;
        let budget = bisect_budget(trace.len());
        let text = match r.step {
            Some(s) => format!("first step where {name} holds: {s} ({} replays, bound {budget})\n", r.replays),
            None => format!("NOT_FOUND: {name} is false at the end of the trace ({} replays)\n", r.replays),
        };
        emit(&text, &json!({ "bisect": r, "bound": budget, "steps": trace.len() }), &a.json)?;
        return Ok(ExitCode::SUCCESS);
    }
    let mut r = Replayer::with_breakpoints(trace.clone(), a.breaks.iter().copied()).map_err(|e| e.to_string())?;
    let stop = r.resume();
    let k = r.kernel_mut();
    let text = match &stop {
        ReplayStop::Breakpoint(s) => format!("stopped at breakpoint {s}\n"),
        ReplayStop::Until(s) => format!("paused at step {s}\n"),
        ReplayStop::Finished(o) => {
            let same = k.state_hash() == trace.final_hash;
            format!("replay finished: {} at step {}, hash {}\n", o.name(), k.step(), if same { "matches" } else { "DIFFERS" })
        }
    };
    let shell_out = run_shell_commands(k, &a.cmds);
    let doc = json!({ "stop": stop, "step": k.step(), "hash": k.state_hash(), "recorded_hash": trace.final_hash, "shell": shell_out });
    emit(&text, &doc, &a.json)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(b: BenchCmd) -> Result<ExitCode, String> {
    let (report, json_path) = match b {
        BenchCmd::B712 { ops, seed, append_cost, json } => {
            if ops % 2 != 0 {
                return Err("--ops must be even (2N)".into());
            }
            let base = KernelConfig { seed, append_cost, ..KernelConfig::default() };
            (bench712(ops, base).map_err(|e| e.to_string())?, json)
        }
        BenchCmd::Mutex712 { children, seed, append_cost, json } => {
            if children == 0 {
                return Err("--children must be at least 1".into());
            }
            let base = KernelConfig { seed, append_cost, ..KernelConfig::default() };
            (bench_mutex712(children, base).map_err(|e| e.to_string())?, json)
        }
    };
    emit(&report.text(), &serde_json::to_value(&report).unwrap(), &json_path)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(a: ServeArgs) -> Result<ExitCode, String> {
    let mut config = a.kernel.config(a.workload.workload());
    config.dmode_enabled = true;
    config.record_trace = true;
    let k = Kernel::boot(config).map_err(|e| e.to_string())?;
    eprintln!("debug bridge listening on {}:{}", a.host, a.port);
    Bridge::new(k).serve((a.host.as_str(), a.port)).map_err(|e| e.to_string())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<ExitCode, String> {
    let script = match a.which.as_str() {
        "memory-exhaustion" => memory_exhaustion_script(a.seed.unwrap_or(0)),
        "use-after-free" => {
            let probe = use_after_free_script(0);
            let seed = match a.seed {
                Some(s) => s,
                None => find_failing_seed(&probe.config, PanicReason::PageFaultKernelMode, 1..=100, probe.max_steps)
                    .ok_or("no failing seed in 1..=100")?,
            };
            use_after_free_script(seed)
        }
        "non-determinism" => {
            let probe = non_determinism_script(0, a.pad);
            let seed = match a.seed {
                Some(s) => s,
                None => find_failing_seed(&probe.config, PanicReason::UseAfterFree, 1..=100, probe.max_steps)
                    .ok_or("no failing seed in 1..=100")?,
            };
            non_determinism_script(seed, a.pad)
        }
        other => return Err(format!("unknown diagnosis {other}")),
    };
    let report = run_diagnosis(&script).map_err(|e| e.to_string())?;
    emit(&report.text(), &serde_json::to_value(&report).unwrap(), &a.json)?;
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let r = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Bench { which } => cmd_bench(which),
        Command::Serve(a) => cmd_serve(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match r {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
