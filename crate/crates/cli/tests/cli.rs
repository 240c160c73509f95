use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_precedent");

fn precedent(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("PRECEDENT_SCORER_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Four annotated cases; `q1` and `q2` cite earlier ones.
const CORPUS: &str = r#"{"doc_id":"p1","text":"","sentences":[{"text":"the landlord withheld the deposit after the lease ended.","role":"Facts"},{"text":"a deposit must be returned within thirty days.","role":"Reasoning"}]}
{"doc_id":"p2","text":"","sentences":[{"text":"the driver was speeding on the highway at night.","role":"Facts"},{"text":"negligence requires a breach of a duty of care.","role":"Reasoning"}]}
{"doc_id":"q1","text":"","citations":["p1"],"sentences":[{"text":"the tenant asked for the deposit and the landlord refused.","role":"Facts"},{"text":"whether the deposit was lawfully withheld.","role":"Issue"},{"text":"appeal allowed.","role":"Decision"}]}
{"doc_id":"q2","text":"","citations":["p2"],"sentences":[{"text":"a car on the highway struck a cyclist at night.","role":"Facts"},{"text":"the driver owed a duty of care.","role":"Reasoning"}]}
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.jsonl"), CORPUS).unwrap();
    fs::write(
        dir.path().join("experiment.toml"),
        "corpus = \"corpus.jsonl\"\noutput_dir = \"out\"\npresets = [\"full\", \"facts\"]\nk_range = [1, 3]\n\n[vector]\nindex = \"flat\"\ndimension = 64\n",
    )
    .unwrap();
    dir
}

#[test]
fn ingest_prints_stats() {
    let dir = workspace();
    let out = precedent(&["ingest", "--corpus", "corpus.jsonl", "--json"], dir.path());
    assert_eq!(code(&out), 0, "{out:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["stats"]["n_documents"], 4);
    assert_eq!(v["stats"]["n_query_documents"], 2);
}

#[test]
fn validation_errors_exit_1() {
    let dir = workspace();
    fs::write(dir.path().join("dup.jsonl"), "{\"doc_id\":\"a\",\"text\":\"\"}\n{\"doc_id\":\"a\",\"text\":\"\"}\n").unwrap();
    let out = precedent(&["ingest", "--corpus", "dup.jsonl"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate doc_id \"a\""));

    fs::write(dir.path().join("bad.toml"), "k_vec = 0\n").unwrap();
    let out = precedent(&["run", "--config", "bad.toml", "--corpus", "corpus.jsonl"], dir.path());
    assert_eq!(code(&out), 1);

    fs::write(dir.path().join("typo.toml"), "k_vecc = 10\n").unwrap();
    let out = precedent(&["run", "--config", "typo.toml"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_files_exit_2() {
    let dir = workspace();
    let out = precedent(&["ingest", "--corpus", "nowhere.jsonl"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn unreachable_service_exits_3() {
    let dir = workspace();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let out = precedent(&["conformance", "--endpoint", &addr], dir.path());
    assert_eq!(code(&out), 3, "{out:?}");
}

#[test]
fn run_then_eval_reproduces_the_report() {
    let dir = workspace();
    let out = precedent(&["run", "--config", "experiment.toml"], dir.path());
    assert_eq!(code(&out), 0, "{out:?}");
    let table = stdout(&out);
    assert!(table.starts_with("Query"));
    assert!(table.contains("Cross-encoder"));

    let root = dir.path().join("out");
    for f in ["manifest.json", "report.json", "report.txt", "report.csv", "qrels.txt", "runs/full.trace_full.run"] {
        assert!(root.join(f).exists(), "missing {f}");
    }

    let out = precedent(
        &["eval", "--qrels", "out/qrels.txt", "--run", "out/runs/full.trace_full.run", "--k-max", "3", "--output-dir", "ev"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{out:?}");
    let ours: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("ev/report.json")).unwrap()).unwrap();
    let theirs: serde_json::Value = serde_json::from_slice(&fs::read(root.join("report.json")).unwrap()).unwrap();
    let pick = |v: &serde_json::Value, config: &str| {
        v["best"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["method"] == "Cross-encoder" && r["config"] == config)
            .cloned()
            .unwrap()
    };
    let (a, b) = (pick(&ours, "full"), pick(&theirs, "Full Query"));
    for key in ["precision", "recall", "f1", "map", "mrr", "k"] {
        assert_eq!(a[key], b[key], "{key}");
    }
}

#[test]
fn search_and_export_qrels() {
    let dir = workspace();
    let out = precedent(
        &["search", "--config", "experiment.toml", "--method", "bm25_full", "--text", "deposit withheld by landlord", "--json"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{out:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let top: Vec<&str> = (0..2).map(|i| v["entries"][i]["doc_id"].as_str().unwrap()).collect();
    assert!(top.contains(&"p1") && top.contains(&"q1"), "{top:?}");

    let out = precedent(&["search", "--config", "experiment.toml", "--doc", "q2", "--method", "vector"], dir.path());
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(!stdout(&out).contains("\tq2\t"));

    let out = precedent(&["search", "--config", "experiment.toml", "--doc", "nope"], dir.path());
    assert_eq!(code(&out), 1);

    let out = precedent(&["export-qrels", "--corpus", "corpus.jsonl"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "q1 0 p1 1\nq2 0 p2 1\n");
}

#[test]
fn index_then_search_from_saved_indexes() {
    let dir = workspace();
    let out = precedent(&["index", "--config", "experiment.toml", "--out", "idx"], dir.path());
    assert_eq!(code(&out), 0, "{out:?}");
    let out = precedent(
        &["search", "--config", "experiment.toml", "--index-dir", "idx", "--doc", "q1", "--method", "trace_full"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{out:?}");

    // A different corpus invalidates the saved indexes.
    fs::write(dir.path().join("corpus.jsonl"), CORPUS.replace("speeding", "racing")).unwrap();
    let out = precedent(
        &["search", "--config", "experiment.toml", "--index-dir", "idx", "--doc", "q1"],
        dir.path(),
    );
    assert_ne!(code(&out), 0);
}

#[test]
fn conformance_against_served_stub() {
    let dir = workspace();
    let mut child = Command::new(BIN)
        .args(["serve-stub", "--addr", "127.0.0.1:0", "--dimension", "32"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = line.trim().rsplit(' ').next().unwrap().to_owned();

    let out = precedent(&["conformance", "--endpoint", &endpoint, "--json"], dir.path());
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(code(&out), 0, "{out:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}
