use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).to_string_lossy().into_owned()
}

/// The binary with ambient configuration removed.
fn sqlo1() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sqlo1"));
    cmd.env_remove("SQLO1_ENDPOINT").env_remove("SQLO1_API_KEY");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A loopback port with nothing listening on it.
fn dead_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = l.local_addr().unwrap().port();
    drop(l);
    format!("http://127.0.0.1:{port}/v1")
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn introspect_matches_golden_schema() {
    let out = run(sqlo1().args(["introspect", &fixture("concerts.sqlite")]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let got: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("golden/concerts_schema.json")).unwrap();
    assert_eq!(got, golden);
}

#[test]
fn introspect_with_zero_samples_has_empty_sample_lists() {
    let out = run(sqlo1().args(["introspect", &fixture("music.sqlite"), "--samples", "0"]));
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let tables = v["tables"].as_array().unwrap();
    assert_eq!(tables.len(), 3);
    for t in tables {
        for c in t["columns"].as_array().unwrap() {
            assert_eq!(c["sample_values"], serde_json::json!([]));
        }
    }
}

#[test]
fn introspect_missing_file_is_a_config_error() {
    let out = run(sqlo1().args(["introspect", "/nonexistent/x.sqlite"]));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
}

fn search_t10() -> Command {
    let mut cmd = sqlo1();
    cmd.args([
        "search",
        "--db",
        &fixture("music.sqlite"),
        "--question",
        "Which singers from the USA are older than 30?",
        "--scripted",
        &fixture("trie.json"),
    ]);
    cmd
}

#[test]
fn search_with_gold_prints_only_the_sql_on_stdout() {
    let gold = "SELECT name FROM singer WHERE age > 30 AND country = 'USA'";
    let out = run(search_t10().args(["--gold", gold]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).trim_end().trim_end_matches(';'), gold);
    assert_eq!(stdout(&out).lines().count(), 1);
}

#[test]
fn search_json_stats_and_rollout_flag() {
    let out = run(search_t10().args(["--json", "--rollouts", "1"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stats: serde_json::Value = serde_json::from_str(stderr(&out).lines().last().unwrap()).unwrap();
    assert_eq!(stats["reward_mode"], "blind");
    assert_eq!(stats["rollouts_used"], 1);
    assert!(stats["exec_reward"].as_i64().unwrap() <= 0);
    assert!(stats["nodes_created"].as_u64().unwrap() <= 1 + 3 * 8);
}

#[test]
fn invalid_hyperparameters_exit_with_config_error() {
    for bad in [
        vec!["--rollouts", "0"],
        vec!["--delta", "1.5"],
        vec!["--lambda", "1.2"],
        vec!["--top-d", "9"],
        vec!["--mode", "psychic"],
    ] {
        let out = run(search_t10().args(&bad));
        assert_eq!(code(&out), 1, "{bad:?}: {}", stderr(&out));
    }
}

#[test]
fn missing_policy_is_a_config_error() {
    let out = run(sqlo1().args(["search", "--db", &fixture("music.sqlite"), "--question", "q"]));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no policy configured"));
}

#[test]
fn unreachable_endpoint_exits_with_service_error() {
    let endpoint = dead_endpoint();
    let out = run(sqlo1()
        .args(["search", "--db", &fixture("music.sqlite"), "--question", "q", "--endpoint", &endpoint])
        .args(["--request-timeout-ms", "500"]));
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    // same through the environment
    let out = run(sqlo1()
        .env("SQLO1_ENDPOINT", &endpoint)
        .args(["search", "--db", &fixture("music.sqlite"), "--question", "q", "--request-timeout-ms", "500"]));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn scripted_flag_wins_over_an_environment_endpoint() {
    let out = run(search_t10().env("SQLO1_ENDPOINT", dead_endpoint()));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn config_file_values_apply_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[search]\nn_rollouts = 1\n").unwrap();
    let cfg = cfg.to_string_lossy().into_owned();

    let out = run(search_t10().args(["--json", "--config", &cfg]));
    let stats: serde_json::Value = serde_json::from_str(stderr(&out).lines().last().unwrap()).unwrap();
    assert_eq!(stats["rollouts_used"], 1);

    let out = run(search_t10().args(["--json", "--config", &cfg, "--rollouts", "4"]));
    let stats: serde_json::Value = serde_json::from_str(stderr(&out).lines().last().unwrap()).unwrap();
    assert_eq!(stats["rollouts_used"], 4);

    std::fs::write(dir.path().join("bad.toml"), "[search]\nno_such_key = 1\n").unwrap();
    let out = run(search_t10().args(["--config", &dir.path().join("bad.toml").to_string_lossy()]));
    assert_eq!(code(&out), 1);
}

#[test]
fn batch_with_a_broken_task_writes_every_record_and_exits_partial() {
    let dir = tempfile::tempdir().unwrap();
    let mut tasks: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("tasks.json")).unwrap()).unwrap();
    tasks[3]["db_id"] = "missing_db".into();
    let tasks_path = dir.path().join("tasks.json");
    std::fs::write(&tasks_path, serde_json::to_string(&tasks).unwrap()).unwrap();
    let out_path = dir.path().join("preds.jsonl");

    let out = run(sqlo1()
        .args(["batch", "--tasks"])
        .arg(&tasks_path)
        .arg("--out")
        .arg(&out_path)
        .args(["--db-root", &fixtures().to_string_lossy(), "--scripted", &fixture("trie.json"), "--workers", "3"]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert_eq!(lines(&out_path), 10);
    let records: Vec<serde_json::Value> = std::fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let failed: Vec<&str> = records
        .iter()
        .filter(|r| r["status"] == "failed")
        .map(|r| r["id"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["t04"]);
}

#[test]
fn batch_then_eval_reports_four_decimal_ex() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.jsonl");
    let out = run(sqlo1()
        .args(["batch", "--tasks", &fixture("tasks.json"), "--scripted", &fixture("trie.json")])
        .arg("--out")
        .arg(&preds));
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let report = dir.path().join("report.json");
    let out = run(sqlo1()
        .args(["eval", "--tasks", &fixture("tasks.json"), "--predictions"])
        .arg(&preds)
        .arg("--report")
        .arg(&report));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("1.0000"), "{}", stdout(&out));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["ex_correct"], 10);

    // corrupt three predictions: EX drops to 0.7000
    let text = std::fs::read_to_string(&preds).unwrap();
    let edited: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let mut r: serde_json::Value = serde_json::from_str(l).unwrap();
            if i < 3 {
                r["predicted_sql"] = "SELECT 1".into();
            }
            r.to_string()
        })
        .collect();
    std::fs::write(&preds, edited.join("\n") + "\n").unwrap();
    let out = run(sqlo1().args(["eval", "--tasks", &fixture("tasks.json"), "--predictions"]).arg(&preds));
    assert!(stdout(&out).contains("0.7000"), "{}", stdout(&out));
}

#[test]
fn prepare_writes_consistent_deterministic_corpora() {
    let run_prepare = |dir: &Path| {
        let out = run(sqlo1()
            .args(["prepare", "--tasks", &fixture("tasks.json"), "--scripted", &fixture("trie.json")])
            .arg("--out-dir")
            .arg(dir));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        serde_json::from_str::<serde_json::Value>(&stdout(&out)).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let summary = run_prepare(a.path());
    run_prepare(b.path());
    assert_eq!(summary["sft"].as_u64().unwrap() as usize, lines(&a.path().join("sft.jsonl")));
    assert_eq!(summary["psg"].as_u64().unwrap() as usize, lines(&a.path().join("psg.jsonl")));
    assert_eq!(summary["train"].as_u64().unwrap() as usize, lines(&a.path().join("train.jsonl")));
    assert_eq!(summary["sft"], 10);
    assert_eq!(summary["failures"], 3);
    assert_eq!(summary["train"], 13);
    for f in ["sft.jsonl", "psg.jsonl", "train.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
}

#[test]
fn sweep_prints_a_row_per_lambda() {
    let out = run(sqlo1().args([
        "sweep",
        "--tasks",
        &fixture("tasks.json"),
        "--scripted",
        &fixture("trie.json"),
        "--lambdas",
        "1.0,0.5,0.0",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.lines().next().unwrap().contains("prune_rate"));

    let out = run(sqlo1().args(["sweep", "--tasks", &fixture("tasks.json"), "--scripted", &fixture("trie.json")])
        .args(["--lambdas", "1.5"]));
    assert_eq!(code(&out), 1);
}
