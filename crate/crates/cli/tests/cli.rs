use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use fedbell_cli::{EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn fedbell(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbell"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&fedbell(&[])), EXIT_USAGE);
    assert_eq!(code(&fedbell(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&fedbell(&["gen-data"])), EXIT_USAGE);
    assert_eq!(
        code(&fedbell(&["gen-data", "--out", "x", "--count", "many"])),
        EXIT_USAGE
    );
    assert_eq!(code(&fedbell(&["annotate-check"])), EXIT_USAGE);
}

#[test]
fn help_and_version_exit_0() {
    let help = fedbell(&["--help"]);
    assert_eq!(code(&help), EXIT_OK);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in [
        "serve",
        "client",
        "events",
        "simulate",
        "gen-data",
        "pipeline",
        "annotate-check",
    ] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(code(&fedbell(&["--version"])), EXIT_OK);
    assert_eq!(code(&fedbell(&["simulate", "--help"])), EXIT_OK);
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = fedbell(&["serve", "--config", p(&missing)]);
    assert_eq!(code(&out), EXIT_RUNTIME);
    assert!(stderr(&out).contains("nope.json"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"rounds": 0}"#).unwrap();
    assert_eq!(code(&fedbell(&["simulate", "--config", p(&bad)])), EXIT_RUNTIME);
    fs::write(&bad, r#"{"round": 3}"#).unwrap();
    assert_eq!(code(&fedbell(&["simulate", "--config", p(&bad)])), EXIT_RUNTIME);

    let out = dir.path().join("data");
    assert_eq!(
        code(&fedbell(&["gen-data", "--out", p(&out), "--classes", "9"])),
        EXIT_RUNTIME
    );
}

fn small_scenario(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("scenario.json");
    fs::write(
        &cfg,
        r#"{"num_clients": 3, "rounds": 3, "samples_per_client": 40, "hidden_dim": 8,
            "heldout_per_client": 4, "webhook_retry_base_ms": 5}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let run = fedbell(&["simulate", "--config", p(&cfg), "--seed", "42", "--out", p(out)]);
        assert_eq!(code(&run), EXIT_OK, "{}", stderr(&run));
    }
    let (a, b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(a, b);

    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["rounds"].as_array().unwrap().len(), 4);
    assert_eq!(report["scenario"]["seed"], 42);
    assert_eq!(report["clients"].as_array().unwrap().len(), 3);

    let other = fedbell(&["simulate", "--config", p(&cfg), "--seed", "7"]);
    assert_eq!(code(&other), EXIT_OK);
    assert_ne!(other.stdout, a);
}

#[test]
fn generated_data_passes_annotate_check_and_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = fedbell(&["gen-data", "--out", p(&data), "--count", "8", "--seed", "3"]);
    assert_eq!(code(&gen), EXIT_OK, "{}", stderr(&gen));
    assert_eq!(fs::read_dir(data.join("frames")).unwrap().count(), 8);

    let check = fedbell(&["annotate-check", p(&data.join("annotations"))]);
    assert_eq!(code(&check), EXIT_OK, "{}", stderr(&check));
    assert_eq!(
        String::from_utf8_lossy(&check.stdout)
            .lines()
            .filter(|l| l.starts_with("ok "))
            .count(),
        8
    );

    let run = fedbell(&["pipeline", "--frames", p(&data.join("frames")), "--period-ms", "100"]);
    assert_eq!(code(&run), EXIT_OK, "{}", stderr(&run));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&run.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0]["outcome"], "warmup");
    assert_eq!(lines[1]["timestamp_ms"], 100);
    assert!(lines.iter().any(|l| l["outcome"] == "roi" && l["bbox"].is_array()));
}

#[test]
fn malformed_annotation_names_the_element() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.xml");
    fs::write(
        &good,
        "<annotation><filename>a.pgm</filename><size><width>10</width><height>10</height></size>\
         <object><name>person</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>4</xmax><ymax>5</ymax></bndbox></object>\
         </annotation>",
    )
    .unwrap();
    let bad = dir.path().join("bad.xml");
    fs::write(
        &bad,
        "<annotation><filename>b.pgm</filename><size><width>10</width><height>10</height></size>\
         <object><name>person</name><bndbox><xmin>1</xmin><ymin>1</ymin><ymax>5</ymax></bndbox></object>\
         </annotation>",
    )
    .unwrap();
    let truncated = dir.path().join("cut.xml");
    fs::write(&truncated, "<annotation><filename>c.pgm</filename>").unwrap();

    assert_eq!(code(&fedbell(&["annotate-check", p(&good)])), EXIT_OK);
    let out = fedbell(&["annotate-check", p(&good), p(&bad)]);
    assert_eq!(code(&out), EXIT_RUNTIME);
    let err = stderr(&out);
    assert!(err.contains("bad.xml") && err.contains("<xmax>"), "{err}");
    let out = fedbell(&["annotate-check", p(&truncated)]);
    assert_eq!(code(&out), EXIT_RUNTIME);
    assert!(stderr(&out).contains("<xml>"));
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn serve_and_two_clients_over_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let server_cfg = dir.path().join("server.json");
    fs::write(
        &server_cfg,
        format!(
            r#"{{"bind": "127.0.0.1:{port}", "enrollment_secret": "s3cret", "expected_clients": 2,
                "min_quorum": 2, "round_timeout_ms": 30000, "total_rounds": 2,
                "model": {{"input_dim": 256, "hidden_dim": 4, "num_classes": 4, "seed": 1}}}}"#
        ),
    )
    .unwrap();
    let server = Command::new(env!("CARGO_BIN_EXE_fedbell"))
        .args(["serve", "--config", p(&server_cfg), "--until-finished"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(300));

    let mut clients = Vec::new();
    for k in 0..2 {
        let data = dir.path().join(format!("data{k}"));
        assert_eq!(
            code(&fedbell(&[
                "gen-data",
                "--out",
                p(&data),
                "--count",
                "12",
                "--seed",
                &k.to_string()
            ])),
            0
        );
        let cfg = dir.path().join(format!("client{k}.json"));
        fs::write(
            &cfg,
            format!(
                r#"{{"device_id": "door-{k}", "token": "tok-{k}", "enrollment_secret": "s3cret",
                    "server_url": "http://127.0.0.1:{port}", "poll_interval_ms": 5}}"#
            ),
        )
        .unwrap();
        clients.push(
            Command::new(env!("CARGO_BIN_EXE_fedbell"))
                .args([
                    "client",
                    "--config",
                    p(&cfg),
                    "--data",
                    p(&data),
                    "--observe",
                    p(&data.join("frames")),
                ])
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap(),
        );
    }
    for c in clients {
        let out = c.wait_with_output().unwrap();
        assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
        let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0]["round"], 1);
        assert_eq!(lines[1]["round"], 2);
        assert_eq!(lines[1]["total_samples"], 24);
        assert_eq!(lines.len(), 2 + 12);
    }
    let out = server.wait_with_output().unwrap();
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let rounds: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rounds.len(), 2);
    assert!(rounds
        .iter()
        .all(|r| r["contributors"] == 2 && r["total_samples"] == 24));
}
