use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;

use serde_json::Value;

use dkernel::bridge::Bridge;
use dkernel::workloads::{buggy_config, RUG_ADDR};
use dkernel::workloads::ScenarioKind;
use dkernel::{Kernel, KernelConfig};

/// Seed at which the recorded rug_pull session faults.
const SESSION_SEED: u64 = 1;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rug_pull_bridge() -> Bridge {
    let config = KernelConfig { record_trace: true, ..buggy_config(ScenarioKind::RugPull, SESSION_SEED) };
    Bridge::new(Kernel::boot(config).unwrap())
}

fn session_transcript() -> Vec<String> {
    let requests = std::fs::read_to_string(fixture("rug_pull_requests.jsonl")).unwrap();
    let mut b = rug_pull_bridge();
    let mut out = Vec::new();
    for line in requests.lines().filter(|l| !l.trim().is_empty()) {
        out.push(format!("> {line}"));
        out.extend(b.handle_line(line));
    }
    out
}

fn parse(line: &str) -> Value {
    serde_json::from_str(line).unwrap()
}

#[test]
fn scripted_session_matches_fixture() {
    let got = session_transcript();
    let path = fixture("rug_pull_session.jsonl");
    if std::env::var_os("UPDATE_FIXTURES").is_some() {
        std::fs::write(&path, got.join("\n") + "\n").unwrap();
    }
    let want: Vec<String> = std::fs::read_to_string(&path).unwrap().lines().map(str::to_string).collect();
    assert_eq!(got, want);
}

#[test]
fn session_shows_the_fault_and_the_remover() {
    let got = session_transcript();
    let find = |id: i64| got.iter().map(|l| l.as_str()).filter(|l| !l.starts_with('>')).map(parse).find(|v| v["id"] == id).unwrap();
    let events: Vec<Value> = got.iter().filter(|l| !l.starts_with('>')).map(|l| parse(l)).filter(|v| v.get("event").is_some()).collect();

    let panic = events.iter().find(|e| e["event"] == "panic").unwrap();
    assert_eq!(panic["payload"]["faulting_vaddr"], RUG_ADDR as u64);
    assert!(events.iter().any(|e| e["event"] == "shell_entered"));
    let faulting_tid = panic["payload"]["tid"].as_u64().unwrap();

    assert_eq!(find(3)["data"]["cr2"], RUG_ADDR as u64);
    let removal = &find(5)["data"]["records"][0];
    assert_eq!(removal["op"], "REMOVE_PAGES");
    assert_ne!(removal["tid"].as_u64().unwrap(), faulting_tid);

    let brk = events.iter().find(|e| e["event"] == "break").unwrap();
    assert_eq!(brk["payload"]["step"], 12);
    assert_eq!(find(10)["data"]["stopped"], "break");
    assert_eq!(find(11)["data"]["stopped"], "end");
    assert_eq!(find(12)["ok"], false);
    assert_eq!(find(13)["data"]["error"], "UNKNOWN_COMMAND");
    assert_eq!(find(15)["data"]["shell_active"], false);
}

#[test]
fn serves_over_tcp() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let mut b = rug_pull_bridge();
        let _ = b.serve_on(listener);
    });
    let mut s = TcpStream::connect(addr).unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    let mut read = || {
        let mut l = String::new();
        r.read_line(&mut l).unwrap();
        parse(&l)
    };
    s.write_all(b"{\"id\":1,\"cmd\":\"run\",\"args\":{\"steps\":20000}}\n").unwrap();
    let resp = read();
    assert_eq!(resp["id"], 1);
    assert_eq!(read()["event"], "panic");
    assert_eq!(read()["event"], "shell_entered");
    s.write_all(b"{\"id\":2,\"cmd\":\"cr2\"}\n").unwrap();
    assert_eq!(read()["data"]["cr2"], RUG_ADDR as u64);
}
