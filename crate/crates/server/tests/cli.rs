mod common;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use chrono::Duration;
use escalate_core::forest::deserialize_model;
use escalate_core::ingestion::{randomize_labels, write_repository};
use escalate_core::model::{timestamp, EventKind, TicketEvent, TicketRecord, TicketState};
use escalate_core::RepositorySnapshot;

fn escalate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_escalate")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Value of a `key: value` report line.
fn field(out: &Output, key: &str) -> String {
    text(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in {}", text(&out.stdout)))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn mockgen(dir: &Path, name: &str, tickets: &str) -> String {
    let out = p(dir, name);
    let r = escalate(&["mockgen", "--seed", "42", "--customers", "30", "--tickets", tickets, "--out", &out]);
    assert!(r.status.success(), "{}", text(&r.stderr));
    out
}

#[test]
fn mockgen_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = mockgen(dir.path(), "a.jsonl", "500");
    let b = mockgen(dir.path(), "b.jsonl", "500");
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 500);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "x.jsonl");
    for args in [
        vec!["mockgen", "--rate", "1.5", "--out", out.as_str()],
        vec!["mockgen", "--rate", "0", "--out", out.as_str()],
        vec!["mockgen", "--tickets", "0", "--out", out.as_str()],
        vec!["train", "--out", out.as_str()],
        vec!["frobnicate"],
        vec![],
    ] {
        let r = Command::new(env!("CARGO_BIN_EXE_escalate"))
            .args(&args)
            .env_remove("ESCALATE_DATA")
            .output()
            .unwrap();
        assert_eq!(r.status.code(), Some(1), "{args:?}: {}", text(&r.stderr));
    }
    assert!(!Path::new(&out).exists());
    assert_eq!(escalate(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = mockgen(dir.path(), "repo.jsonl", "300");
    let before = fs::read(&data).unwrap();
    let (m1, m2) = (p(dir.path(), "m1.json"), p(dir.path(), "m2.json"));
    let r1 = escalate(&["train", "--data", &data, "--out", &m1, "--trees", "10", "--depth", "6"]);
    let r2 = escalate(&["train", "--data", &data, "--out", &m2, "--trees", "10", "--depth", "6"]);
    assert!(r1.status.success(), "{}", text(&r1.stderr));
    assert_eq!(field(&r1, "model_version"), field(&r2, "model_version"));
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let model = deserialize_model(&fs::read(&m1).unwrap()).unwrap();
    assert_eq!(model.model_version, field(&r1, "model_version"));
    assert_eq!(model.trees.len(), 10);
    let rows: usize = field(&r1, "rows").parse().unwrap();
    let pos: usize = field(&r1, "escalated").parse().unwrap();
    let neg: usize = field(&r1, "not_escalated").parse().unwrap();
    assert_eq!(rows, pos + neg);
    assert_eq!(fs::read(&data).unwrap(), before);

    let r3 = escalate(&["train", "--data", &data, "--out", &m2, "--trees", "10", "--depth", "6", "--seed", "7"]);
    assert_ne!(field(&r3, "model_version"), field(&r1, "model_version"));
}

fn write_snapshot(snapshot: &RepositorySnapshot, path: &Path) {
    write_repository(snapshot, fs::File::create(path).unwrap()).unwrap();
}

#[test]
fn single_class_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = mockgen(dir.path(), "repo.jsonl", "200");
    let repo = escalate_core::ingestion::load_repository(&data).unwrap().snapshot;
    let negative = dir.path().join("negative.jsonl");
    write_snapshot(&randomize_labels(&repo, 1, 0.0), &negative);
    let r = escalate(&["train", "--data", negative.to_str().unwrap(), "--out", &p(dir.path(), "m.json")]);
    assert_eq!(r.status.code(), Some(2));
    assert!(text(&r.stderr).contains("degenerate labels"), "{}", text(&r.stderr));
}

fn resolved_ticket(i: usize, severity: u8, escalated: bool) -> TicketRecord {
    let created = timestamp::parse("2017-02-01T08:00:00Z").unwrap() + Duration::hours(i as i64);
    let closed = created + Duration::days(3);
    let state = if escalated { TicketState::Escalated } else { TicketState::Closed };
    let id = format!("SEP-{i:03}");
    TicketRecord {
        ticket_id: id.clone(),
        customer_id: format!("C{i:03}"),
        product: "mq".into(),
        title: "queue manager down".into(),
        description: String::new(),
        severity,
        state,
        created_at: created,
        closed_at: Some(closed),
        events: vec![
            TicketEvent::new(format!("{id}-1"), created, EventKind::Created).with_detail("severity", severity.to_string()),
            TicketEvent::new(format!("{id}-2"), closed, EventKind::StateChange)
                .with_detail("old", "open")
                .with_detail("new", state.as_str()),
        ],
    }
}

#[test]
fn eval_reports_metrics_and_memorizes_separable_data() {
    let dir = tempfile::tempdir().unwrap();
    let tickets = (0..40).map(|i| resolved_ticket(i, if i % 2 == 0 { 1 } else { 4 }, i % 2 == 0));
    let data = dir.path().join("sep.jsonl");
    write_snapshot(&RepositorySnapshot::from_tickets(tickets, "fixture"), &data);
    let data = data.to_str().unwrap();
    let model = p(dir.path(), "m.json");
    assert!(escalate(&["train", "--data", data, "--out", &model]).status.success());

    let r = escalate(&["eval", "--data", data, "--model", &model, "--holdout-fraction", "1.0"]);
    assert!(r.status.success(), "{}", text(&r.stderr));
    assert_eq!(field(&r, "rows"), "40");
    assert_eq!(field(&r, "accuracy"), "1.0000");
    assert_eq!(field(&r, "auc"), "1.0000");
    assert_eq!(field(&r, "confusion"), "tp=20 fp=0 tn=20 fn=0");

    // 1% of 40 rows rounds to an empty holdout
    let r = escalate(&["eval", "--data", data, "--holdout-fraction", "0.01"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(text(&r.stderr).contains("holdout lacks a class"), "{}", text(&r.stderr));
}

#[test]
fn chained_scores_carry_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let data = mockgen(dir.path(), "repo.jsonl", "300");
    let model = p(dir.path(), "m.json");
    assert!(escalate(&["train", "--data", &data, "--out", &model, "--trees", "10"]).status.success());
    let (s1, s2) = (p(dir.path(), "s1.jsonl"), p(dir.path(), "s2.jsonl"));
    let r1 = escalate(&["score", "--data", &data, "--model", &model, "--out", &s1, "--as-of", "2017-12-20T00:00:00Z"]);
    assert!(r1.status.success(), "{}", text(&r1.stderr));
    assert_eq!(field(&r1, "with_delta"), "0");
    let first = fs::read(&s1).unwrap();
    let r2 = escalate(&["score", "--data", &data, "--model", &model, "--history", &s1, "--out", &s2]);
    assert!(r2.status.success(), "{}", text(&r2.stderr));
    assert_eq!(fs::read(&s1).unwrap(), first);

    let read = |path: &str| escalate_core::scoring::read_snapshots(BufReader::new(fs::File::open(path).unwrap())).unwrap();
    let (b1, b2) = (read(&s1), read(&s2));
    assert_eq!(b2.len(), field(&r2, "scored").parse::<usize>().unwrap());
    let mut carried = 0;
    for s in &b2 {
        match b1.iter().find(|p| p.ticket_id == s.ticket_id) {
            Some(prev) => {
                carried += 1;
                assert_eq!(s.previous_risk, Some(prev.risk));
                assert_eq!(s.delta, Some(s.risk - prev.risk));
            }
            None => assert_eq!(s.delta, None),
        }
    }
    assert!(carried > 0);
    assert_eq!(field(&r2, "with_delta"), carried.to_string());

    let missing = escalate(&["score", "--data", &data, "--model", &model, "--history", &p(dir.path(), "nope"), "--out", &s2]);
    assert_eq!(missing.status.code(), Some(2));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `serve` and returns it with the address it printed.
fn serve(cmd: &mut Command) -> (Server, String) {
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    (Server(child), addr)
}

fn trained(dir: &Path) -> (String, String) {
    let data = mockgen(dir, "repo.jsonl", "300");
    let model = p(dir, "m.json");
    assert!(escalate(&["train", "--data", &data, "--out", &model, "--trees", "10"]).status.success());
    (data, model)
}

#[test]
fn serve_reads_environment_and_answers() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained(dir.path());
    let store: PathBuf = dir.path().join("store.log");
    let (_server, addr) = serve(
        Command::new(env!("CARGO_BIN_EXE_escalate"))
            .arg("serve")
            .env("ESCALATE_DATA", &data)
            .env("ESCALATE_MODEL", &model)
            .env("ESCALATE_STORE", &store)
            .env("ESCALATE_PORT", "0")
            .env("ESCALATE_INTERVAL", "0"),
    );
    let (status, rows) = common::http(&addr, "GET", "/api/tickets", "ana");
    assert_eq!(status, 200);
    assert!(!rows.as_array().unwrap().is_empty());
    // interval 0: nothing scored until asked
    assert!(rows.as_array().unwrap().iter().all(|r| r["risk"].is_null()));
    let (status, _) = common::http(&addr, "POST", "/api/scoring/run", "ana");
    assert_eq!(status, 200);
    let (_, rows) = common::http(&addr, "GET", "/api/tickets", "ana");
    assert!(rows.as_array().unwrap().iter().all(|r| r["risk"].is_number()));
}

#[test]
fn serve_with_interval_scores_on_startup() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained(dir.path());
    let store = p(dir.path(), "store.log");
    let (_server, addr) = serve(Command::new(env!("CARGO_BIN_EXE_escalate")).args([
        "serve", "--data", &data, "--model", &model, "--store", &store, "--port", "0", "--interval", "3600",
    ]));
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(30);
    loop {
        let (_, rows) = common::http(&addr, "GET", "/api/tickets", "ana");
        if rows.as_array().unwrap().iter().all(|r| r["risk"].is_number()) {
            break;
        }
        assert!(std::time::Instant::now() < deadline, "interval run never landed");
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
}

#[test]
fn serve_startup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained(dir.path());
    let store = p(dir.path(), "store.log");
    let r = escalate(&["serve", "--data", &data, "--model", &p(dir.path(), "absent.json"), "--store", &store, "--port", "0"]);
    assert_eq!(r.status.code(), Some(2));

    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let r = escalate(&["serve", "--data", &data, "--model", &model, "--store", &store, "--port", &port]);
    assert_eq!(r.status.code(), Some(3));
    assert!(text(&r.stderr).contains("cannot bind"), "{}", text(&r.stderr));
}
