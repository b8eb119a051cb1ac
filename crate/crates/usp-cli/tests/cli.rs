//! End-to-end tests through the `usp` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn usp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_usp"))
}

fn run_ok(args: &[&str]) -> Output {
    let output = usp().args(args).output().expect("binary runs");
    assert!(
        output.status.success(),
        "usp {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn gen_dataset(dir: &Path, task: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("{task}-{n}-{seed}.jsonl"));
    run_ok(&[
        "gen-synthetic",
        "--task",
        task,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

/// Stable snapshot of an artifact directory: file name -> bytes.
fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn run_modes_produce_artifacts_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = gen_dataset(tmp.path(), "cls", 24, 1);
    let mut dirs = Vec::new();
    for mode in ["zero-shot", "random-demo", "usp"] {
        let out = tmp.path().join(mode);
        run_ok(&[
            "run",
            "--dataset",
            dataset.to_str().unwrap(),
            "--mode",
            mode,
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        for file in [
            "config.json",
            "summary.json",
            "pool.jsonl",
            "demos.json",
            "trace.json",
            "predictions.jsonl",
        ] {
            assert!(out.join(file).is_file(), "{mode} missing {file}");
        }
        dirs.push(out);
    }
    let json_path = tmp.path().join("report.json");
    let report = run_ok(&[
        "report",
        dirs[0].to_str().unwrap(),
        dirs[1].to_str().unwrap(),
        dirs[2].to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]);
    let table = stdout(&report);
    assert!(table.contains("zero-shot"));
    assert!(table.contains("usp"));
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&json_path).unwrap()).unwrap();
    let runs = parsed["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    let zero = runs
        .iter()
        .find(|r| r["strategy"] == "zero-shot")
        .unwrap();
    assert_eq!(zero["gain_over_zero_shot"].as_f64().unwrap(), 0.0);

    // gain is (metric / zero-shot metric - 1) * 100
    let baseline = zero["primary_metric"].as_f64().unwrap();
    for run in runs {
        let metric = run["primary_metric"].as_f64().unwrap();
        let gain = run["gain_over_zero_shot"].as_f64().unwrap();
        assert!(
            (gain - (metric / baseline - 1.0) * 100.0).abs() < 1e-9,
            "gain formula mismatch for {}",
            run["strategy"]
        );
    }
}

#[test]
fn identical_runs_report_tied_ranks() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = gen_dataset(tmp.path(), "cls", 12, 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "run",
            "--dataset",
            dataset.to_str().unwrap(),
            "--mode",
            "usp",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let json_path = tmp.path().join("report.json");
    run_ok(&[
        "report",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]);
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&json_path).unwrap()).unwrap();
    let runs = parsed["runs"].as_array().unwrap();
    assert_eq!(
        runs[0]["primary_metric"].as_f64().unwrap(),
        runs[1]["primary_metric"].as_f64().unwrap()
    );
    // two identical metrics straddle ranks 1 and 2
    assert_eq!(runs[0]["average_rank"].as_f64().unwrap(), 1.5);
    assert_eq!(runs[1]["average_rank"].as_f64().unwrap(), 1.5);
}

#[test]
fn warm_cache_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = gen_dataset(tmp.path(), "sfg", 16, 3);
    let cache = tmp.path().join("cache");
    let warm_args = |out: &Path| {
        vec![
            "run".to_string(),
            "--dataset".into(),
            dataset.to_str().unwrap().into(),
            "--mode".into(),
            "usp".into(),
            "--seed".into(),
            "11".into(),
            "--cache".into(),
            cache.to_str().unwrap().to_string(),
            "--out".into(),
            out.to_str().unwrap().to_string(),
        ]
    };
    // warm the cache, then compare two warm replays
    run_ok(&[
        "cache-warm",
        "--dataset",
        dataset.to_str().unwrap(),
        "--mode",
        "usp",
        "--seed",
        "11",
        "--cache",
        cache.to_str().unwrap(),
    ]);
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    for out in [&first, &second] {
        let args: Vec<String> = warm_args(out);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        run_ok(&args);
    }
    assert_eq!(dir_snapshot(&first), dir_snapshot(&second));
}

#[test]
fn lfg_inspect_prints_the_single_demo() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = gen_dataset(tmp.path(), "lfg", 16, 4);
    let out = tmp.path().join("lfg-run");
    run_ok(&[
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--mode",
        "usp",
        "--out",
        out.to_str().unwrap(),
    ]);
    let listing = stdout(&run_ok(&["inspect", out.to_str().unwrap()]));
    assert!(listing.contains("1 demos:"), "one long-form demo:\n{listing}");
    assert!(listing.contains("F="));
}

#[test]
fn cls_inspect_groups_demos_by_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = tmp.path().join("cls3.jsonl");
    run_ok(&[
        "gen-synthetic",
        "--task",
        "cls",
        "--n",
        "32",
        "--classes",
        "3",
        "--seed",
        "5",
        "--out",
        dataset.to_str().unwrap(),
    ]);
    let out = tmp.path().join("cls-run");
    run_ok(&[
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--mode",
        "usp",
        "--out",
        out.to_str().unwrap(),
    ]);
    // K=5 over 3 classes: ceil(5/3) = 2 demos under each of 3 headers
    let listing = stdout(&run_ok(&["inspect", out.to_str().unwrap()]));
    for class in ["alpha", "beta", "gamma"] {
        assert!(
            listing.contains(&format!("class `{class}` (2 demos):")),
            "missing class {class}:\n{listing}"
        );
    }
}

#[test]
fn random_demo_mode_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = gen_dataset(tmp.path(), "sfg", 16, 8);
    let mut outputs = Vec::new();
    for name in ["r1", "r2"] {
        let out = tmp.path().join(name);
        run_ok(&[
            "run",
            "--dataset",
            dataset.to_str().unwrap(),
            "--mode",
            "random-demo",
            "--seed",
            "21",
            "--out",
            out.to_str().unwrap(),
        ]);
        outputs.push(std::fs::read(out.join("predictions.jsonl")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn corrupt_artifact_dir_fails_inspect_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let inspect = usp()
        .args(["inspect", empty.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!inspect.status.success());
    assert!(String::from_utf8_lossy(&inspect.stderr).contains("corrupt artifact"));
    let report = usp()
        .args(["report", empty.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!report.status.success());
}

#[test]
fn few_shot_and_usp_fs_modes_need_goldens() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = gen_dataset(tmp.path(), "sfg", 12, 6);

    // without goldens these modes fail with a named field
    let bare = usp()
        .args([
            "run",
            "--dataset",
            dataset.to_str().unwrap(),
            "--mode",
            "few-shot",
            "--out",
            tmp.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!bare.status.success());
    assert!(String::from_utf8_lossy(&bare.stderr).contains("golden_demos"));

    let config_path = tmp.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "k": 3,
            "golden_demos": [
                {"query_id": "g1", "query": "a solved example question", "response": "a solved answer"}
            ]
        })
        .to_string(),
    )
    .unwrap();
    let out = tmp.path().join("usp-fs");
    run_ok(&[
        "run",
        "--config",
        config_path.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--mode",
        "usp-fs",
        "--out",
        out.to_str().unwrap(),
    ]);
    let demos: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("demos.json")).unwrap()).unwrap();
    assert_eq!(demos["demos"].as_array().unwrap().len(), 2);
}

#[test]
fn report_reproduces_hand_computed_em_f1() {
    // four predictions built by hand: EM hits on 2 of 4 (50), token F1
    // mean = (1 + 1 + 2/3 + 0) / 4 * 100 = 66.67 under the squad profile
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fixture");
    std::fs::create_dir_all(&dir).unwrap();
    let config = serde_json::json!({
        "task_type": "sfg",
        "k": 5, "m": 6, "lambda": 0.2,
        "stage1_temperature": 0.7, "stage2_temperature": 0.0,
        "max_decode_tokens": 128, "rng_seed": 0, "unlabeled_cap": 64,
        "template_id": "qa", "normalization_profile": "squad",
        "cot_mode": false, "exclude_self_demos": false
    });
    let summary = serde_json::json!({
        "strategy": "usp",
        "dataset": "fixture",
        "diagnostics": {
            "stage1_decode_ops": 0, "stage1_scoring_ops": 0,
            "stage2_decode_ops": 0, "stage2_scoring_ops": 0
        }
    });
    let predictions = [
        ("p1", "the cat", vec!["cat"]),          // EM 1 (articles stripped), F1 1
        ("p2", "blue whale", vec!["Blue Whale"]), // EM 1 (case), F1 1
        ("p3", "red fox", vec!["red fox cub"]),  // EM 0, F1 2*(1)*(2/3)/(5/3) = 0.8
        ("p4", "", vec!["missing"]),             // EM 0, F1 0
    ];
    let lines: String = predictions
        .iter()
        .map(|(id, pred, refs)| {
            serde_json::json!({
                "query_id": id,
                "prompt": "",
                "raw_completion": *pred,
                "prediction": *pred,
                "references": refs,
            })
            .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(dir.join("config.json"), config.to_string()).unwrap();
    std::fs::write(dir.join("summary.json"), summary.to_string()).unwrap();
    std::fs::write(dir.join("pool.jsonl"), "").unwrap();
    std::fs::write(
        dir.join("demos.json"),
        serde_json::json!({"demos": [], "k_effective": 0}).to_string(),
    )
    .unwrap();
    std::fs::write(dir.join("trace.json"), "[]").unwrap();
    std::fs::write(dir.join("predictions.jsonl"), lines).unwrap();

    let json_path = tmp.path().join("report.json");
    run_ok(&[
        "report",
        dir.to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]);
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&json_path).unwrap()).unwrap();
    let run = &parsed["runs"][0];
    assert_eq!(run["primary_metric"].as_f64().unwrap(), 50.0);
    let f1 = run["secondary_metric"].as_f64().unwrap();
    let expected = (1.0 + 1.0 + 0.8 + 0.0) / 4.0 * 100.0;
    assert!((f1 - expected).abs() < 1e-9, "f1 {f1} vs {expected}");
}

#[test]
fn missing_references_are_skipped_with_notice() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = tmp.path().join("norefs.jsonl");
    std::fs::write(
        &dataset,
        "{\"id\":\"q1\",\"text\":\"say something\",\"task_type\":\"sfg\",\"references\":[\"ok\"]}\n{\"id\":\"q2\",\"text\":\"say more\",\"task_type\":\"sfg\"}\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    run_ok(&[
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--mode",
        "zero-shot",
        "--out",
        out.to_str().unwrap(),
    ]);
    let report = stdout(&run_ok(&["report", out.to_str().unwrap()]));
    assert!(report.contains("note: 1 of 2 queries had no references"));
}

#[test]
fn http_backend_failure_is_stage_attributed() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = gen_dataset(tmp.path(), "cls", 8, 7);
    let out = tmp.path().join("run");
    let output = usp()
        .args([
            "run",
            "--dataset",
            dataset.to_str().unwrap(),
            "--backend-url",
            "http://127.0.0.1:9/complete",
            "--mode",
            "usp",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("stage1"), "stderr: {stderr}");
}
