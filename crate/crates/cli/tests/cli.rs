use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn pathguard(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathguard")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pathguard(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pathguard(dir, args).status.code().unwrap()
}

fn fixture_source(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn assembles_and_bundles_sources() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let bank = fixture_source("bank.gasm");
    let attacker = fixture_source("bank_attacker.gasm");
    let out = ok(d, &["asm", bank.to_str().unwrap(), "-o", "bank.json"]);
    assert!(out.starts_with("Bank: 3 functions"));
    ok(d, &["asm", attacker.to_str().unwrap(), "-o", "attacker.json"]);
    assert_eq!(json(&d.join("bank.json"))["name"], "Bank");
    ok(d, &["bundle", "bank.json", "attacker.json", "--protect", "Bank", "-o", "bundle.json"]);
    let b = json(&d.join("bundle.json"));
    assert_eq!(b["boundary"], serde_json::json!(["Bank"]));
    assert_eq!(b["programs"].as_array().unwrap().len(), 2);
    let table = ok(d, &["analyze", "bundle.json"]);
    assert!(table.lines().any(|l| l.starts_with("Bank") && l.contains("withdraw")));
    assert_eq!(code(d, &["bundle", "bank.json", "--protect", "Nope", "-o", "x.json"]), 2);
}

#[test]
fn configured_width_applies_to_sources_without_one() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    fs::write(d.join("c.gasm"), "contract C {\n fn f external selector=0x1 {\n  PUSH 1 POP STOP\n }\n}\n").unwrap();
    fs::write(d.join("cfg.json"), r#"{"width": 16}"#).unwrap();
    ok(d, &["--config", "cfg.json", "asm", "c.gasm", "-o", "c.json"]);
    assert_eq!(json(&d.join("c.json"))["width"], 16);
}

#[test]
fn analyze_dumps_graphs() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["bundle", "--fixture", "delegatecall", "--len", "20", "-o", "w.json"]);
    let cfgs: Value = serde_json::from_str(&ok(d, &["analyze", "w.json", "--dump-cfg"])).unwrap();
    let names: Vec<&str> = cfgs.as_array().unwrap().iter().map(|c| c["function"].as_str().unwrap()).collect();
    assert!(names.contains(&"initWallet") && names.contains(&"owner"));
    let cg: Value = serde_json::from_str(&ok(d, &["analyze", "w.json", "--dump-callgraph"])).unwrap();
    assert!(!cg["edges"].as_array().unwrap().is_empty());
    assert_eq!(code(d, &["analyze", "w.json", "--dump-cfg", "--dump-callgraph"]), 2);
}

#[test]
fn full_workflow_detects_and_approves() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let exported: Value = serde_json::from_str(&ok(d, &["bundle", "--fixture", "reentrancy", "--seed", "3", "--len", "60", "-o", "bank.json"])).unwrap();
    let attacks: Vec<u64> = exported["attacks"].as_array().unwrap().iter().map(|a| a.as_u64().unwrap()).collect();
    ok(d, &["train", "bank.json", "bank.train.jsonl", "-o", "snap.json"]);
    let protect = ok(d, &["protect", "bank.json", "snap.json", "-o", "guarded.json"]);
    assert!(protect.starts_with("Bank: "));
    let attack_list = attacks.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    ok(
        d,
        &[
            "run", "guarded.json", "bank.test.jsonl", "--alarms", "alarms.jsonl", "--report", "report.json", "--world", "world.json",
            "--attacks", &attack_list,
        ],
    );
    let log: Vec<Value> = fs::read_to_string(d.join("alarms.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let alarmed: Vec<u64> = log.iter().map(|l| l["alarm"]["tx_index"].as_u64().unwrap()).collect();
    assert_eq!(alarmed, attacks);
    assert_eq!(log[0]["tx"]["fn"], "attack");
    let report = json(&d.join("report.json"));
    assert_eq!(report["false_alarm_count"], 0);
    assert!(report["avg_deploy_overhead_pct"].as_f64().unwrap().is_finite());
    assert_eq!(report["transactions"].as_array().unwrap().len(), 60);

    // only the configured admin may approve, and only once
    assert_eq!(code(d, &["approve", "world.json", "alarms.jsonl", "--index", "0", "--admin", "0xe1"]), 2);
    let a: Value = serde_json::from_str(&ok(d, &["approve", "world.json", "alarms.jsonl", "--index", "0", "--admin", "0xad"])).unwrap();
    assert_eq!(a["replay"], "Accepted");
    assert!(a["gas"].as_u64().unwrap() >= 20000);
    assert_eq!(code(d, &["approve", "world.json", "alarms.jsonl", "--index", "0", "--admin", "0xad"]), 2);
    assert_eq!(code(d, &["approve", "world.json", "alarms.jsonl", "--index", "99", "--admin", "0xad"]), 2);
}

#[test]
fn simulate_false_alarms_reports_counts() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["bundle", "--fixture", "overflow", "--len", "40", "-o", "tok.json"]);
    let r: Value = serde_json::from_str(&ok(d, &["simulate-false-alarms", "tok.json", "tok.train.jsonl"])).unwrap();
    let n = r["alarmed"].as_array().unwrap().len();
    assert!(n >= 1 && n <= 3, "{r}");
    assert_eq!(r["replays_accepted"].as_u64().unwrap() as usize, n);
}

#[test]
fn exit_codes() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    // validation
    fs::write(d.join("bad.gasm"), "contract { }").unwrap();
    assert_eq!(code(d, &["asm", "bad.gasm", "-o", "bad.json"]), 2);
    assert_eq!(code(d, &["asm", "missing.gasm", "-o", "bad.json"]), 2);
    // size limit
    let mut big = String::from("contract Big {\n fn f external selector=0x1 {\n");
    for _ in 0..2500 {
        big += "  PUSH 1 POP\n";
    }
    big += "  STOP\n }\n}\n";
    fs::write(d.join("big.gasm"), big).unwrap();
    assert_eq!(code(d, &["asm", "big.gasm", "-o", "big.json"]), 3);
    // training failure: a transaction that runs out of gas
    ok(d, &["bundle", "--fixture", "reentrancy", "--len", "10", "-o", "bank.json"]);
    fs::write(d.join("bad.jsonl"), r#"{"origin":"0xa1","to":"Bank","fn":"deposit","value":"0x5","gas_limit":10}"#).unwrap();
    assert_eq!(code(d, &["train", "bank.json", "bad.jsonl", "-o", "snap.json"]), 4);
    // unknown function in a transaction file
    fs::write(d.join("bad.jsonl"), r#"{"origin":"0xa1","to":"Bank","fn":"nope","gas_limit":10}"#).unwrap();
    assert_eq!(code(d, &["train", "bank.json", "bad.jsonl", "-o", "snap.json"]), 2);
    // snapshot of a different bundle
    ok(d, &["bundle", "--fixture", "overflow", "--len", "10", "-o", "tok.json"]);
    ok(d, &["train", "tok.json", "tok.train.jsonl", "-o", "tok-snap.json"]);
    assert_eq!(code(d, &["protect", "bank.json", "tok-snap.json", "-o", "g.json"]), 2);
    // reserved tag collision
    ok(d, &["train", "bank.json", "bank.train.jsonl", "-o", "snap.json"]);
    fs::write(d.join("cfg.json"), r#"{"reserved_tags": ["0x8000000000000000"]}"#).unwrap();
    assert_eq!(code(d, &["--config", "cfg.json", "protect", "bank.json", "snap.json", "-o", "g.json"]), 2);
}
