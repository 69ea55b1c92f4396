//! The d-mode shell.
//!
//! A session is entered on panic or on the magic key and lives in the
//! kernel's d-mode slot. While it is active the kernel is frozen and timer
//! interrupts are dropped. Command text is rendered into the safe area's
//! 4 KB working area; anything that does not fit is cut at a line boundary
//! (the structured `data` payload is always complete).
//!
//! `replay S` starts a replay of the current run from its recorded
//! interrupts. While a replay is active, inspection commands look at the
//! replayed kernel instead of the live one.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::dmode::counters::memstat;
use crate::dmode::safe_area::WORKING_AREA_BYTES;
use crate::dmode::validate::validate;
use crate::dmode::vmlog::VmLogFilter;
use crate::kernel::{InterruptKind, Kernel, PanicContext, MAGIC_KEY};
use crate::replay::{ReplayStop, ReplayTrace, Replayer};
use crate::vm::VmOpKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShellTrigger {
    Panic,
    MagicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShellError {
    #[error("d-mode is disabled")]
    Disabled,
    #[error("a shell session is already active")]
    AlreadyActive,
    #[error("no shell session is active")]
    NotActive,
}

pub struct ShellSession {
    pub trigger: ShellTrigger,
    pub panic_ctx: Option<PanicContext>,
    pub command_history: Vec<String>,
    pub breakpoints: BTreeSet<u64>,
    replay: Option<Box<Replayer>>,
    /// Largest rendered output so far, in working-area bytes.
    pub scratch_peak: usize,
}

impl std::fmt::Debug for ShellSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShellSession")
            .field("trigger", &self.trigger)
            .field("panic_ctx", &self.panic_ctx)
            .field("replay_step", &self.replay.as_ref().map(|r| r.kernel().step()))
            .finish()
    }
}

impl ShellSession {
    pub fn replay_step(&self) -> Option<u64> {
        self.replay.as_ref().map(|r| r.kernel().step())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandResult {
    pub ok: bool,
    pub text: String,
    pub data: Value,
}

impl CommandResult {
    fn ok(text: String, data: Value) -> Self {
        CommandResult { ok: true, text, data }
    }

    fn err(code: &str, msg: String) -> Self {
        CommandResult { ok: false, text: format!("{code}: {msg}"), data: json!({ "error": code, "message": msg }) }
    }
}

pub const HELP: &str = "\
commands:
  help                      this text
  memstat                   live objects and bytes per type
  ps                        process table
  cr2                       last faulting address
  vmlog [--addr A] [--pid P] [--op O] [--last K]
                            VM operation history, newest first
  validate                  run the contract validators
  trace                     recorded interrupts and replay position
  break S                   set a replay breakpoint at step S
  replay S                  replay this run up to step S
  step                      advance the replay one step
  continue                  resume the replay, or leave the shell
  quit                      leave the shell";

/// Opens a session. Fails if d-mode is off or a session is already open.
pub fn enter(k: &mut Kernel, trigger: ShellTrigger, panic_ctx: Option<PanicContext>) -> Result<(), ShellError> {
    let d = k.dmode_mut().ok_or(ShellError::Disabled)?;
    if d.session.is_some() {
        return Err(ShellError::AlreadyActive);
    }
    d.session = Some(ShellSession {
        trigger,
        panic_ctx,
        command_history: Vec::new(),
        breakpoints: BTreeSet::new(),
        replay: None,
        scratch_peak: 0,
    });
    Ok(())
}

/// Closes the session. A magic-key session lets the kernel run on; after
/// a panic the kernel stays halted.
pub fn quit(k: &mut Kernel) -> Result<(), ShellError> {
    let d = k.dmode_mut().ok_or(ShellError::Disabled)?;
    d.session.take().map(|_| ()).ok_or(ShellError::NotActive)
}

/// Sends the magic key to a running kernel.
pub fn press_magic_key(k: &mut Kernel) {
    k.deliver_interrupt(InterruptKind::Keyboard, Some(MAGIC_KEY));
}

fn parse_num(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

/// Runs one command line in the active session.
pub fn exec(k: &mut Kernel, line: &str) -> CommandResult {
    let Some(session) = k.dmode_mut().and_then(|d| d.session.as_mut()) else {
        return CommandResult::err("NO_SESSION", "no shell session is active".into());
    };
    session.command_history.push(line.to_string());
    let words: Vec<&str> = line.split_whitespace().collect();
    let Some((&cmd, args)) = words.split_first() else {
        return CommandResult::ok(String::new(), Value::Null);
    };
    let result = match cmd {
        "help" => CommandResult::ok(HELP.to_string(), json!({ "help": HELP })),
        "memstat" | "ps" | "cr2" | "vmlog" | "validate" => {
            let target = inspect_target(k);
            inspect(target, cmd, args)
        }
        "trace" => trace(k),
        "break" => breakpoint(k, args),
        "replay" => replay(k, args),
        "step" => step(k),
        "continue" => cont(k),
        "quit" => {
            let _ = quit(k);
            return CommandResult::ok("leaving d-mode".into(), json!({ "closed": true }));
        }
        _ => {
            return CommandResult::err("UNKNOWN_COMMAND", format!("{cmd}\n{HELP}"));
        }
    };
    render(k, result)
}

/// Copies the text into the working area, cutting it at the last line
/// that fits.
fn render(k: &mut Kernel, mut r: CommandResult) -> CommandResult {
    const MARK: &str = "\n[output truncated]";
    if r.text.len() > WORKING_AREA_BYTES {
        let room = WORKING_AREA_BYTES - MARK.len();
        let cut = r.text[..room].rfind('\n').unwrap_or(room);
        r.text.truncate(cut);
        r.text.push_str(MARK);
    }
    if let Some(d) = k.dmode_mut() {
        let bytes = r.text.as_bytes();
        d.area.working[..bytes.len()].copy_from_slice(bytes);
        d.area.working[bytes.len()..].fill(0);
        if let Some(s) = d.session.as_mut() {
            s.scratch_peak = s.scratch_peak.max(bytes.len());
        }
    }
    r
}

fn session(k: &Kernel) -> &ShellSession {
    k.dmode().and_then(|d| d.session.as_ref()).expect("session checked by exec")
}

fn session_mut(k: &mut Kernel) -> &mut ShellSession {
    k.dmode_mut().and_then(|d| d.session.as_mut()).expect("session checked by exec")
}

fn inspect_target(k: &Kernel) -> &Kernel {
    match &session(k).replay {
        Some(r) => r.kernel(),
        None => k,
    }
}

fn inspect(k: &Kernel, cmd: &str, args: &[&str]) -> CommandResult {
    match cmd {
        "memstat" => cmd_memstat(k),
        "ps" => cmd_ps(k),
        "cr2" => cmd_cr2(k),
        "vmlog" => cmd_vmlog(k, args),
        _ => cmd_validate(k),
    }
}

fn cmd_memstat(k: &Kernel) -> CommandResult {
    let d = k.dmode().expect("shell implies d-mode");
    let rows = memstat(&d.area.counters);
    let mut text = format!("{:<10} {:>8} {:>10}\n", "type", "count", "bytes");
    for r in &rows {
        let _ = writeln!(text, "{:<10} {:>8} {:>10}", r.type_name, r.count, r.bytes);
    }
    CommandResult::ok(text, json!({ "rows": rows }))
}

fn cmd_ps(k: &Kernel) -> CommandResult {
    let mut text = format!("{:>6} {:>6} {:<8} tids\n", "pid", "parent", "state");
    let mut rows = Vec::new();
    for p in k.processes() {
        let tids: Vec<u32> = p.thread_ids.iter().copied().collect();
        let state = serde_json::to_value(p.state).unwrap();
        let _ = writeln!(
            text,
            "{:>6} {:>6} {:<8} {}",
            p.pid,
            p.parent_pid,
            state.as_str().unwrap_or("?"),
            tids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
        );
        rows.push(json!({ "pid": p.pid, "parent": p.parent_pid, "state": state, "tids": tids }));
    }
    CommandResult::ok(text, json!({ "rows": rows }))
}

fn cmd_cr2(k: &Kernel) -> CommandResult {
    let cr2 = k.fault_register().last_fault_vaddr;
    let text = match cr2 {
        Some(a) => format!("cr2 = {a:#010x}"),
        None => "cr2 = (no fault recorded)".to_string(),
    };
    CommandResult::ok(text, json!({ "cr2": cr2 }))
}

fn parse_filter(args: &[&str]) -> Result<VmLogFilter, CommandResult> {
    let bad = |m: String| CommandResult::err("BAD_ARGUMENT", m);
    let mut f = VmLogFilter::default();
    let mut it = args.iter();
    while let Some(&flag) = it.next() {
        let Some(&v) = it.next() else {
            return Err(bad(format!("{flag} needs a value")));
        };
        match flag {
            "--addr" => f.vaddr = Some(parse_num(v).and_then(|n| u32::try_from(n).ok()).ok_or_else(|| bad(format!("bad address {v}")))?),
            "--pid" => f.pid = Some(parse_num(v).and_then(|n| u32::try_from(n).ok()).ok_or_else(|| bad(format!("bad pid {v}")))?),
            "--op" => f.op = Some(VmOpKind::parse(v).ok_or_else(|| bad(format!("unknown op {v}")))?),
            "--last" => f.last_k = Some(parse_num(v).ok_or_else(|| bad(format!("bad count {v}")))? as usize),
            _ => return Err(bad(format!("unknown flag {flag}"))),
        }
    }
    Ok(f)
}

fn cmd_vmlog(k: &Kernel, args: &[&str]) -> CommandResult {
    let filter = match parse_filter(args) {
        Ok(f) => f,
        Err(e) => return e,
    };
    let d = k.dmode().expect("shell implies d-mode");
    let recs = d.area.vmlog.query(&filter);
    let mut text = format!("{:>8} {:>5} {:>5} {:<13} vaddr\n", "seq", "pid", "tid", "op");
    for r in &recs {
        let _ = writeln!(
            text,
            "{:>8} {:>5} {:>5} {:<13} {:#010x}",
            r.seq,
            r.record.pid,
            r.record.tid,
            r.record.op.name(),
            r.record.vaddr
        );
    }
    CommandResult::ok(text, json!({ "records": recs }))
}

fn cmd_validate(k: &Kernel) -> CommandResult {
    let rep = validate(k);
    let text = if rep.is_clean() {
        "all contracts hold".to_string()
    } else {
        rep.violations.iter().map(|v| format!("VIOLATION {}: {}\n", v.contract, v.detail)).collect()
    };
    CommandResult::ok(text, serde_json::to_value(&rep).unwrap())
}

fn live_trace(k: &Kernel) -> Option<ReplayTrace> {
    ReplayTrace::from_kernel(k)
}

fn trace(k: &Kernel) -> CommandResult {
    let s = session(k);
    let replay_step = s.replay_step();
    let bps: Vec<u64> = s.breakpoints.iter().copied().collect();
    let Some(t) = live_trace(k) else {
        return CommandResult::err("NO_TRACE", "this run was not recorded".into());
    };
    let mut text = format!("{} interrupts recorded, steps 0..={}\n", t.events.len(), t.final_step);
    for e in t.events.iter().rev().take(20).rev() {
        let _ = writeln!(text, "  step {:>8} {:?} {:?}", e.step, e.kind, e.payload);
    }
    if let Some(s) = replay_step {
        let _ = writeln!(text, "replay at step {s}");
    }
    CommandResult::ok(
        text,
        json!({
            "final_step": t.final_step,
            "events": t.events,
            "breakpoints": bps,
            "replay_step": replay_step,
            "live_step": k.step(),
        }),
    )
}

fn step_arg(args: &[&str]) -> Result<u64, CommandResult> {
    match args {
        [s] => parse_num(s).ok_or_else(|| CommandResult::err("BAD_ARGUMENT", format!("bad step {s}"))),
        _ => Err(CommandResult::err("BAD_ARGUMENT", "expected one step number".into())),
    }
}

fn breakpoint(k: &mut Kernel, args: &[&str]) -> CommandResult {
    let s = match step_arg(args) {
        Ok(s) => s,
        Err(e) => return e,
    };
    let Some(t) = live_trace(k) else {
        return CommandResult::err("NO_TRACE", "this run was not recorded".into());
    };
    if s > t.final_step {
        return CommandResult::err("BAD_ARGUMENT", format!("step {s} is past the end of the run ({})", t.final_step));
    }
    let sess = session_mut(k);
    sess.breakpoints.insert(s);
    if let Some(r) = sess.replay.as_mut() {
        r.add_breakpoint(s);
    }
    let bps: Vec<u64> = sess.breakpoints.iter().copied().collect();
    CommandResult::ok(format!("breakpoint at step {s}"), json!({ "breakpoints": bps }))
}

fn stop_result(stop: ReplayStop, k: &Kernel) -> CommandResult {
    let step = k.step();
    let hash = k.state_hash();
    match stop {
        ReplayStop::Breakpoint(s) => CommandResult::ok(
            format!("replay stopped at breakpoint, step {s}"),
            json!({ "stopped": "break", "step": s, "hash": hash }),
        ),
        ReplayStop::Until(s) => {
            CommandResult::ok(format!("replay paused at step {s}"), json!({ "stopped": "until", "step": s, "hash": hash }))
        }
        ReplayStop::Finished(o) => {
            let text = match o.panic() {
                Some(p) => format!("replay finished at step {step}: {p}"),
                None => format!("replay finished at step {step}: {}", o.name()),
            };
            CommandResult::ok(text, json!({ "stopped": "end", "step": step, "outcome": o, "hash": hash }))
        }
    }
}

fn replay(k: &mut Kernel, args: &[&str]) -> CommandResult {
    let s = match step_arg(args) {
        Ok(s) => s,
        Err(e) => return e,
    };
    let Some(t) = live_trace(k) else {
        return CommandResult::err("NO_TRACE", "this run was not recorded".into());
    };
    if s > t.final_step {
        return CommandResult::err("BAD_ARGUMENT", format!("step {s} is past the end of the run ({})", t.final_step));
    }
    let mut r = match Replayer::new(t) {
        Ok(r) => r,
        Err(e) => return CommandResult::err("TRACE_INVALID", e.to_string()),
    };
    let sess = session_mut(k);
    for b in &sess.breakpoints {
        r.add_breakpoint(*b);
    }
    let stop = r.run_until(s);
    let res = stop_result(stop, r.kernel());
    sess.replay = Some(Box::new(r));
    res
}

fn step(k: &mut Kernel) -> CommandResult {
    let sess = session_mut(k);
    let Some(r) = sess.replay.as_mut() else {
        return CommandResult::err("NO_REPLAY", "start a replay with `replay S` first".into());
    };
    let stop = r.step();
    stop_result(stop, r.kernel())
}

fn cont(k: &mut Kernel) -> CommandResult {
    let sess = session_mut(k);
    match sess.replay.as_mut() {
        Some(r) => {
            let stop = r.resume();
            stop_result(stop, r.kernel())
        }
        None => {
            let _ = quit(k);
            CommandResult::ok("leaving d-mode".into(), json!({ "closed": true }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelConfig;

    fn booted() -> Kernel {
        let mut k = Kernel::boot(KernelConfig { timer_enabled: false, ..KernelConfig::default() }).unwrap();
        enter(&mut k, ShellTrigger::MagicKey, None).unwrap();
        k
    }

    #[test]
    fn nested_enter_is_rejected() {
        let mut k = booted();
        assert_eq!(enter(&mut k, ShellTrigger::MagicKey, None), Err(ShellError::AlreadyActive));
    }

    #[test]
    fn unknown_command_lists_help() {
        let mut k = booted();
        let r = exec(&mut k, "frobnicate");
        assert!(!r.ok);
        assert!(r.text.starts_with("UNKNOWN_COMMAND"));
        assert!(r.text.contains("memstat"));
    }

    #[test]
    fn memstat_after_boot() {
        let mut k = booted();
        let r = exec(&mut k, "memstat");
        assert!(r.ok);
        assert_eq!(r.data["rows"][0]["count"], 1);
        assert_eq!(r.data["rows"][1]["count"], 1);
        assert_eq!(r.data["rows"][2]["count"], 0);
    }

    #[test]
    fn bad_vmlog_flag() {
        let mut k = booted();
        assert!(!exec(&mut k, "vmlog --addr zz").ok);
        assert!(!exec(&mut k, "vmlog --last").ok);
        assert!(exec(&mut k, "vmlog --addr 0x13370000 --last 5").ok);
    }

    #[test]
    fn output_fits_the_working_area() {
        let mut k = booted();
        let r = render(&mut k, CommandResult::ok("line\n".repeat(2000), Value::Null));
        assert!(r.text.len() <= WORKING_AREA_BYTES);
        assert!(r.text.ends_with("[output truncated]"));
    }

    #[test]
    fn quit_closes_session() {
        let mut k = booted();
        assert!(exec(&mut k, "quit").ok);
        assert!(!k.shell_active());
        assert!(!exec(&mut k, "memstat").ok);
    }
}
