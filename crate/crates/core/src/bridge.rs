//! Debug bridge: newline-delimited JSON over a local TCP socket.
//!
//! Request  `{"id": 1, "cmd": "vmlog", "args": {"addr": "0x13370000", "last": 5}}`
//! Response `{"id": 1, "ok": true, "text": "...", "data": {...}}`
//! Event    `{"event": "panic" | "break" | "shell_entered", "payload": {...}}`
//!
//! `cmd` is any shell command. Arguments map onto shell flags: `addr`,
//! `pid`, `op` and `last` for `vmlog`, `step` for `break` and `replay`.
//! Three commands exist only on the bridge: `run {"steps": K}` advances the
//! kernel, `magic` sends the magic key, `status` reports where the kernel
//! is. Connections are served one at a time; the kernel is only touched
//! between micro-steps.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, ToSocketAddrs};

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::kernel::{Kernel, RunOutcome};
use crate::shell::{self, CommandResult};

#[derive(Debug, Deserialize)]
struct Request {
    id: i64,
    cmd: String,
    #[serde(default)]
    args: Map<String, Value>,
}

pub struct Bridge {
    kernel: Kernel,
}

fn response(id: Value, r: &CommandResult) -> String {
    let data = if r.data.is_object() { r.data.clone() } else { json!({ "value": r.data }) };
    json!({ "id": id, "ok": r.ok, "text": r.text, "data": data }).to_string()
}

fn event(name: &str, payload: Value) -> String {
    json!({ "event": name, "payload": payload }).to_string()
}

fn arg_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Shell command line for a request.
fn command_line(cmd: &str, args: &Map<String, Value>) -> Result<String, String> {
    let mut line = cmd.to_string();
    match cmd {
        "vmlog" => {
            for (k, v) in args {
                if !["addr", "pid", "op", "last"].contains(&k.as_str()) {
                    return Err(format!("unknown vmlog argument {k}"));
                }
                line.push_str(&format!(" --{k} {}", arg_text(v)));
            }
        }
        "break" | "replay" => {
            let s = args.get("step").ok_or("missing argument step")?;
            line.push_str(&format!(" {}", arg_text(s)));
        }
        _ => {
            if let Some(k) = args.keys().next() {
                return Err(format!("{cmd} takes no argument {k}"));
            }
        }
    }
    Ok(line)
}

impl Bridge {
    pub fn new(kernel: Kernel) -> Self {
        Bridge { kernel }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Handles one request line. Returns the response followed by any
    /// events it caused.
    pub fn handle_line(&mut self, line: &str) -> Vec<String> {
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_str::<Value>(line).ok().and_then(|v| v.get("id").cloned());
                let r = CommandResult { ok: false, text: format!("BAD_REQUEST: {e}"), data: json!({ "error": "BAD_REQUEST" }) };
                return vec![response(id.unwrap_or(Value::Null), &r)];
            }
        };
        let id = json!(req.id);
        let mut events = Vec::new();
        let r = match req.cmd.as_str() {
            "run" => self.run(&req.args, &mut events),
            "magic" => self.magic(&mut events),
            "status" => self.status(),
            cmd => match command_line(cmd, &req.args) {
                Err(m) => CommandResult { ok: false, text: format!("BAD_ARGUMENT: {m}"), data: json!({ "error": "BAD_ARGUMENT" }) },
                Ok(l) => {
                    let r = shell::exec(&mut self.kernel, &l);
                    if r.data["stopped"] == "break" {
                        events.push(event("break", json!({ "step": r.data["step"] })));
                    }
                    r
                }
            },
        };
        let mut out = vec![response(id, &r)];
        out.extend(events);
        out
    }

    fn status(&self) -> CommandResult {
        let k = &self.kernel;
        let session = k.dmode().and_then(|d| d.session());
        let data = json!({
            "step": k.step(),
            "ticks": k.clock().ticks,
            "outcome": k.outcome(),
            "shell_active": session.is_some(),
            "panic": session.and_then(|s| s.panic_ctx.clone()),
            "replay_step": session.and_then(|s| s.replay_step()),
        });
        CommandResult { ok: true, text: format!("step {}", k.step()), data }
    }

    fn shell_events(&self, events: &mut Vec<String>) {
        if let Some(s) = self.kernel.dmode().and_then(|d| d.session()) {
            if let Some(p) = &s.panic_ctx {
                events.push(event("panic", serde_json::to_value(p).unwrap()));
            }
            events.push(event("shell_entered", json!({ "trigger": s.trigger, "step": self.kernel.step() })));
        }
    }

    fn run(&mut self, args: &Map<String, Value>, events: &mut Vec<String>) -> CommandResult {
        let Some(steps) = args.get("steps").and_then(Value::as_u64) else {
            return CommandResult { ok: false, text: "BAD_ARGUMENT: steps".into(), data: json!({ "error": "BAD_ARGUMENT" }) };
        };
        let was_active = self.kernel.shell_active();
        let o = self.kernel.run(steps);
        if !was_active && matches!(o, RunOutcome::ShellEntered { .. }) {
            self.shell_events(events);
        }
        if let (false, RunOutcome::Panicked(p)) = (was_active, &o) {
            events.push(event("panic", serde_json::to_value(p).unwrap()));
        }
        CommandResult {
            ok: true,
            text: format!("{} at step {}", o.name(), self.kernel.step()),
            data: json!({ "outcome": o, "step": self.kernel.step() }),
        }
    }

    fn magic(&mut self, events: &mut Vec<String>) -> CommandResult {
        let was_active = self.kernel.shell_active();
        shell::press_magic_key(&mut self.kernel);
        let now = self.kernel.shell_active();
        if now && !was_active {
            self.shell_events(events);
        }
        CommandResult { ok: now, text: if now { "d-mode".into() } else { "d-mode unavailable".into() }, data: json!({ "shell_active": now }) }
    }

    /// Serves one connection at a time until the listener fails.
    pub fn serve(mut self, addr: impl ToSocketAddrs) -> io::Result<()> {
        let listener = TcpListener::bind(addr)?;
        self.serve_on(listener)
    }

    pub fn serve_on(&mut self, listener: TcpListener) -> io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            let mut out = stream.try_clone()?;
            for line in BufReader::new(stream).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                for reply in self.handle_line(&line) {
                    out.write_all(reply.as_bytes())?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }
}
