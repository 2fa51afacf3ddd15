//! The `convograph` binary: exit codes, frozen transcripts, file-level
//! duplication, event export and a `serve` smoke test.

mod support;

use std::io::{BufRead, BufReader};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::{json, Value};
use support::{fixture, fixture_path};

fn convograph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convograph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn path(rel: &str) -> String {
    fixture_path(rel).to_string_lossy().into_owned()
}

fn simulate(graph: &str, script: &str, extra: &[&str]) -> Output {
    let (graph, bot, script) = (path(graph), path("demo/bot.json"), path(script));
    let mut args = vec!["simulate", "--graph", &graph, "--bot", &bot, "--script", &script];
    args.extend_from_slice(extra);
    convograph(&args)
}

#[test]
fn validate_exit_codes() {
    let ok = convograph(&["validate", &path("demo/graph.json")]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stderr).contains("0 error(s), 0 warning(s)"));

    let livelock = convograph(&["validate", &path("invalid/livelock.json")]);
    assert_eq!(livelock.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&livelock.stderr);
    assert!(stderr.contains("E-LIVELOCK"), "{stderr}");
    assert!(livelock.stdout.is_empty());

    let dangling = convograph(&["validate", &path("invalid/dangling.json")]);
    assert_eq!(dangling.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&dangling.stderr).contains("E-DANGLE"));

    assert_eq!(convograph(&["validate", "/no/such/graph.json"]).status.code(), Some(4));
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{\"nodes\": ").unwrap();
    assert_eq!(convograph(&["validate", garbage.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_matches_frozen_transcripts() {
    for name in ["21-days", "escalation"] {
        let out = simulate("demo/graph.json", &format!("demo/scripts/{name}.txt"), &["--seed", "42"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let golden = fixture(&format!("demo/golden/{name}.txt"));
        assert!(out.stdout == golden.as_bytes(), "{name}: transcript differs from golden file");
    }
}

#[test]
fn simulate_is_seed_dependent_but_reproducible() {
    let script = "demo/scripts/21-days.txt";
    let a = simulate("demo/graph.json", script, &["--seed", "7"]);
    let b = simulate("demo/graph.json", script, &["--seed", "7"]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, fixture("demo/golden/21-days.txt").as_bytes());
}

#[test]
fn simulate_rejects_invalid_graphs_and_scripts() {
    let out = simulate("invalid/livelock.json", "demo/scripts/21-days.txt", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("E-LIVELOCK"));
    assert!(out.stdout.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.txt");
    std::fs::write(&script, "hi\n@advance soon\n").unwrap();
    let (graph, bot) = (path("demo/graph.json"), path("demo/bot.json"));
    let out = convograph(&["simulate", "--graph", &graph, "--bot", &bot, "--script", script.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.ndjson");
    let out = simulate("demo/graph.json", "demo/scripts/21-days.txt", &["--events", events.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<Value> = std::fs::read_to_string(&events)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let reminders = lines.iter().filter(|e| e["kind"] == "reminder_fired").count();
    let completed = lines.iter().filter(|e| e["kind"] == "program_completed").count();
    assert_eq!((reminders, completed), (21, 1));
    let transcript = String::from_utf8(out.stdout).unwrap();
    assert!(transcript.trim_end().ends_with(&format!("{} events ==", lines.len())));
}

#[test]
fn duplicate_writes_an_equivalent_graph() {
    let dir = tempfile::tempdir().unwrap();
    let dst = dir.path().join("copy.json");
    let out = convograph(&["duplicate", &path("demo/graph.json"), dst.to_str().unwrap(), "--suffix", "v7"]);
    assert_eq!(out.status.code(), Some(0));
    let copy: Value = serde_json::from_str(&std::fs::read_to_string(&dst).unwrap()).unwrap();
    let src: Value = serde_json::from_str(&fixture("demo/graph.json")).unwrap();
    assert_eq!(copy["nodes"].as_object().unwrap().len(), src["nodes"].as_object().unwrap().len());
    assert!(copy["nodes"].as_object().unwrap().keys().all(|k| k.ends_with("@v7")));
    assert_eq!(convograph(&["validate", dst.to_str().unwrap()]).status.code(), Some(0));
}

struct Child(std::process::Child);

impl Drop for Child {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_answers_then_exports_from_the_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut bot: Value = serde_json::from_str(&fixture("demo/bot.json")).unwrap();
    bot["graph_file"] = json!(path("demo/graph.json"));
    let config = json!({
        "port": port,
        "admin_token": "cli-admin",
        "data_dir": "data",
        "bots": [bot],
    });
    let config_path = dir.path().join("server.json");
    std::fs::write(&config_path, config.to_string()).unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_convograph"))
        .args(["serve", "--config", config_path.to_str().unwrap()])
        .env("RUST_LOG", "info")
        .env_remove(convograph_server::config::DATA_DIR_ENV)
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let stderr = BufReader::new(child.stderr.take().unwrap());
    let child = Child(child);
    // Keep draining stderr so the server never writes into a closed pipe.
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        for line in stderr.lines().map_while(Result::ok) {
            if line.contains("listening") {
                let _ = tx.send(());
            }
        }
    });
    rx.recv_timeout(Duration::from_secs(30)).expect("server did not start");

    let url = format!("http://127.0.0.1:{port}/v1/channels/demo/messages");
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let reply: Value = runtime.block_on(async {
        let resp = reqwest::Client::new()
            .post(&url)
            .bearer_auth("demo-token")
            .json(&json!({"user_id": "cli-user", "text": "hi"}))
            .timeout(Duration::from_secs(10))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        resp.json().await.unwrap()
    });
    assert_eq!(reply["messages"].as_array().unwrap().len(), 3);
    drop(child);

    let data = dir.path().join("data");
    let out = convograph(&["export-events", "--data-dir", data.to_str().unwrap(), "--bot", "demo"]);
    assert_eq!(out.status.code(), Some(0));
    let exported = String::from_utf8(out.stdout).unwrap();
    assert!(exported.lines().count() >= 4, "{exported}");
    assert!(exported.contains("\"message_in\""));
    let missing = convograph(&["export-events", "--data-dir", data.to_str().unwrap(), "--bot", "nobody"]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn example_server_config_bootstraps() {
    use convograph_server::config::{bootstrap, ServerConfig, DATA_DIR_ENV};
    use std::sync::Arc;

    let config = ServerConfig::load(&fixture_path("demo/server.json")).unwrap();
    if std::env::var_os(DATA_DIR_ENV).is_none() {
        assert_eq!(config.data_dir, fixture_path("demo/data"));
    }
    assert_eq!(config.bots[0].graph_file.as_deref(), Some(fixture_path("demo/graph.json").as_path()));

    let store = Arc::new(convograph_core::store::ContentStore::in_memory(config.redaction));
    let clock = Arc::new(convograph_core::scheduler::VirtualClock::new(support::start()));
    let host = convograph_core::host::Host::new(store.clone(), clock, 1).unwrap();
    bootstrap(&host, &config).unwrap();
    // A second bootstrap reuses the identical published version.
    bootstrap(&host, &config).unwrap();
    assert_eq!(store.list_versions().unwrap().len(), 1);
}
