use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mapnav::runner::Manifest;
use mapnav_core::agent::{StopReason, TrajectoryLog};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn mapnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapnav")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read_logs(p: &Path) -> Vec<TrajectoryLog> {
    mapnav::io::read_logs(p).unwrap()
}

fn scripted_run(out: &Path) -> Output {
    let suite = fixtures().join("suite");
    mapnav(&[
        "run",
        "--worlds", s(&suite.join("worlds")),
        "--episodes", s(&suite.join("episodes.jsonl")),
        "--backend", "scripted",
        "--script", s(&suite.join("script.jsonl")),
        "--output", s(out),
        "-j", "3",
    ])
}

#[test]
fn scripted_run_is_deterministic_and_quiet() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.jsonl"), tmp.path().join("b.jsonl"));
    let o = scripted_run(&a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty(), "run mode printed to stdout");
    assert!(scripted_run(&b).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.episodes, 21);
    assert_eq!(manifest.stop_reasons["AgentStop"], 21);
    assert_eq!(manifest.config.parallelism, 3);
    assert!(manifest.inputs.keys().any(|k| k.ends_with("script.jsonl")));
    assert_eq!(manifest.output_sha256, mapnav::runner::sha256_file(&a).unwrap());
}

#[test]
fn replay_miss_degrades_to_parse_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("empty-cache.jsonl");
    std::fs::write(&cache, "").unwrap();
    let out = tmp.path().join("out.jsonl");
    let g = fixtures().join("golden");
    let worlds = tmp.path().join("worlds");
    std::fs::create_dir(&worlds).unwrap();
    std::fs::copy(g.join("world.json"), worlds.join("golden.json")).unwrap();
    let o = mapnav(&[
        "run",
        "--worlds", s(&worlds),
        "--episodes", s(&g.join("episodes.jsonl")),
        "--backend", "replay",
        "--cache", s(&cache),
        "--output", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let logs = read_logs(&out);
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].stop_reason, StopReason::ParseFailure);
    assert!(logs[0].steps[0].failed_attempts[0].error.contains("no cached response"));
}

/// Answers every request with "Action: A" and counts them.
fn stop_server() -> (String, std::sync::Arc<std::sync::atomic::AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for sock in listener.incoming() {
            let mut sock = sock.unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 8192];
            loop {
                let n = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    let head = String::from_utf8_lossy(&buf[..i]).to_ascii_lowercase();
                    let len: usize = head
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length:"))
                        .map_or(0, |v| v.trim().parse().unwrap());
                    if buf.len() >= i + 4 + len {
                        break;
                    }
                }
            }
            counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let body = r#"{"choices":[{"message":{"content":"Thought: here\nNew Planning: done\nAction: A"}}]}"#;
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            sock.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, hits)
}

#[test]
fn cached_remote_run_makes_no_calls_the_second_time() {
    let (url, hits) = stop_server();
    let tmp = tempfile::tempdir().unwrap();
    let suite = fixtures().join("suite");
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "backend = \"remote\"\nmodel_id = \"test-model\"\ncache = \"cache.jsonl\"\nparallelism = 2\n\n[remote]\nendpoint = \"{url}\"\napi_key_env = \"MAPNAV_CLI_TEST_KEY\"\nmax_retries = 0\n"
        ),
    )
    .unwrap();
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_mapnav"))
            .args(["run", "--config", s(&config)])
            .args(["--worlds", s(&suite.join("worlds")), "--episodes", s(&suite.join("episodes.jsonl"))])
            .args(["--output", s(&tmp.path().join(out))])
            .env("MAPNAV_CLI_TEST_KEY", "k")
            .output()
            .unwrap()
    };
    let manifest = |out: &str| -> Manifest {
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join(format!("{out}.manifest.json"))).unwrap()).unwrap()
    };
    let o = run("first.jsonl");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest("first.jsonl").counters.remote_calls, 21);
    let o = run("second.jsonl");
    assert!(o.status.success());
    let m = manifest("second.jsonl");
    assert_eq!(m.counters.remote_calls, 0);
    assert_eq!(m.counters.cache_hits, 21);
    assert_eq!(hits.load(std::sync::atomic::Ordering::SeqCst), 21);
    assert_eq!(
        std::fs::read(tmp.path().join("first.jsonl")).unwrap(),
        std::fs::read(tmp.path().join("second.jsonl")).unwrap()
    );
}

#[test]
fn remote_without_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = fixtures().join("suite");
    let o = Command::new(env!("CARGO_BIN_EXE_mapnav"))
        .args(["run", "--backend", "remote"])
        .args(["--worlds", s(&suite.join("worlds")), "--episodes", s(&suite.join("episodes.jsonl"))])
        .args(["--output", s(&tmp.path().join("o.jsonl"))])
        .env_remove("OPENAI_API_KEY")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("OPENAI_API_KEY"));
}

#[test]
fn eval_groups_by_style_and_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let logs = tmp.path().join("logs.jsonl");
    assert!(scripted_run(&logs).status.success());
    let suite = fixtures().join("suite");
    let o = mapnav(&[
        "eval",
        "--logs", s(&logs),
        "--episodes", s(&suite.join("episodes.jsonl")),
        "--worlds", s(&suite.join("worlds")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(&cols[2..6], ["NE↓", "OSR↑", "SR↑", "SPL↑"]);
    for group in ["R2R", "REVERIE", "all"] {
        assert!(table.lines().any(|l| l.starts_with(group)), "no {group} row in\n{table}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("logs.jsonl.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["groups"]["R2R"]["sr"], 100.0);
    assert_eq!(summary["groups"]["REVERIE"]["episodes"], 1);
    assert_eq!(summary["episodes"].as_array().unwrap().len(), 21);
}

#[test]
fn eval_of_empty_logs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let logs = tmp.path().join("empty.jsonl");
    std::fs::write(&logs, "").unwrap();
    let suite = fixtures().join("suite");
    let o = mapnav(&[
        "eval",
        "--logs", s(&logs),
        "--episodes", s(&suite.join("episodes.jsonl")),
        "--worlds", s(&suite.join("worlds")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no episodes to aggregate"));
}

#[test]
fn prompt_dump_matches_golden_files() {
    let g = fixtures().join("golden");
    let (world, episodes, script) = (g.join("world.json"), g.join("episodes.jsonl"), g.join("script.jsonl"));
    let args = ["prompt", "--world", s(&world), "--episodes", s(&episodes), "--script", s(&script)];
    let a = mapnav(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, mapnav(&args).stdout);
    let expected: Vec<String> = (0..4)
        .map(|t| format!("=== step {t} ===\n{}", std::fs::read_to_string(g.join(format!("step{t}.txt"))).unwrap()))
        .collect();
    assert_eq!(stdout(&a), expected.join("\n"));

    let by_labels = mapnav(&[
        "prompt",
        "--world", s(&g.join("world.json")),
        "--episodes", s(&g.join("episodes.jsonl")),
        "--labels", "BBBA",
        "--mode", "one-stage",
    ]);
    let text = stdout(&by_labels);
    assert!(text.contains("The navigation has just begun, with no history"));
    assert!(text.contains("Navigation has just started, with no planning yet"));
    let step1 = text.split("=== step 1 ===").nth(1).unwrap();
    assert!(step1.contains("Map:") && step1.contains("Trajectory: Place 0 1"));
    assert!(text.contains("Image 0: <Img0>"));
}

#[test]
fn inspect_world_and_logs() {
    let g = fixtures().join("golden");
    let o = mapnav(&["inspect", "--world", s(&g.join("world.json"))]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("world golden: 4 nodes, 3 edges"));

    let tmp = tempfile::tempdir().unwrap();
    let logs = tmp.path().join("logs.jsonl");
    assert!(scripted_run(&logs).status.success());
    let o = mapnav(&["inspect", "--logs", s(&logs), "--episode-id", "reverie-ep0"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("visited: hall0 -> hall1 -> den -> hall1 -> hall2 -> hall3"), "{text}");
    assert!(text.contains("step 5: stop"));
    let o = mapnav(&["inspect", "--logs", s(&logs), "--episode-id", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = fixtures().join("suite");
    // Unknown flag.
    assert_eq!(mapnav(&["run", "--bogus"]).status.code(), Some(1));
    // Missing worlds directory.
    let o = mapnav(&[
        "run",
        "--worlds", s(&tmp.path().join("missing")),
        "--episodes", s(&suite.join("episodes.jsonl")),
        "--script", s(&suite.join("script.jsonl")),
        "--output", s(&tmp.path().join("o.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    // Zero parallelism.
    let o = mapnav(&[
        "run",
        "--worlds", s(&suite.join("worlds")),
        "--episodes", s(&suite.join("episodes.jsonl")),
        "--script", s(&suite.join("script.jsonl")),
        "--output", s(&tmp.path().join("o.jsonl")),
        "-j", "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    // Unreadable logs.
    let o = mapnav(&[
        "eval",
        "--logs", s(&tmp.path().join("none.jsonl")),
        "--episodes", s(&suite.join("episodes.jsonl")),
        "--worlds", s(&suite.join("worlds")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    // Output directory that does not exist.
    let o = mapnav(&[
        "run",
        "--worlds", s(&suite.join("worlds")),
        "--episodes", s(&suite.join("episodes.jsonl")),
        "--script", s(&suite.join("script.jsonl")),
        "--output", s(&tmp.path().join("no/such/dir/o.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(mapnav(&["--help"]).status.code(), Some(0));
}
