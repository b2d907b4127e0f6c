//! End-to-end tests of the `decn` binary: artifact schemas, exit codes, and
//! byte-level reproducibility of every output file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn decn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_decn"))
}

fn run(args: &[&str]) -> Output {
    decn().args(args).output().expect("binary runs")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("decn-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Trains inside `dir` with relative paths so identical commands in
/// different directories produce byte-identical artifacts.
fn train_tiny_model(dir: &Path, seed: &str) -> PathBuf {
    let out = decn()
        .current_dir(dir)
        .args([
            "train",
            "--preset",
            "ws3",
            "--suite",
            "low",
            "--dim",
            "2",
            "--epochs",
            "5",
            "--minibatch",
            "2",
            "--side",
            "6",
            "--seed",
            seed,
            "-o",
            "model.json",
        ])
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    dir.join("model.json")
}

#[test]
fn train_writes_model_and_log() {
    let dir = tmp_dir("train");
    let model = train_tiny_model(&dir, "7");
    assert!(model.exists());
    let log = dir.join("model.json_log.csv");
    assert!(log.exists());
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("epoch,mean_loss,grad_norm_pre,grad_norm_post,lr\n"));
    assert_eq!(log_text.lines().count(), 6);

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(json["version"], 1);
    assert_eq!(json["share_weights"], true);
    assert_eq!(json["depth"], 3);
    assert_eq!(json["kernel_sizes"], serde_json::json!([3, 5, 7]));
    assert_eq!(json["ems"].as_array().unwrap().len(), 1);
    assert_eq!(json["ems"][0]["k3"].as_array().unwrap().len(), 9);
    assert_eq!(json["ems"][0]["k5"].as_array().unwrap().len(), 25);
    assert_eq!(json["ems"][0]["k7"].as_array().unwrap().len(), 49);
    assert_eq!(json["trained_on"]["suite"], "low");
    assert_eq!(json["trained_on"]["D"], 2);
    assert_eq!(json["trained_on"]["L"], 6);
    assert_eq!(json["trained_on"]["seed"], 7);
}

#[test]
fn epochs_zero_writes_initialized_model() {
    let dir = tmp_dir("epochs-zero");
    let model = dir.join("init.json");
    let out = run(&[
        "train",
        "--suite",
        "low",
        "--dim",
        "2",
        "--epochs",
        "0",
        "--minibatch",
        "2",
        "--side",
        "6",
        "--seed",
        "3",
        "-o",
        model.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(model.exists());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(json["ems"][0]["k3"].as_array().unwrap().len(), 9);
}

#[test]
fn identical_commands_give_byte_identical_artifacts() {
    let dir_a = tmp_dir("repro-a");
    let dir_b = tmp_dir("repro-b");
    let model_a = train_tiny_model(&dir_a, "42");
    let model_b = train_tiny_model(&dir_b, "42");
    assert_eq!(
        fs::read(&model_a).unwrap(),
        fs::read(&model_b).unwrap(),
        "model files differ between identical commands"
    );
    assert_eq!(
        fs::read(dir_a.join("model.json_log.csv")).unwrap(),
        fs::read(dir_b.join("model.json_log.csv")).unwrap()
    );

    for dir in [&dir_a, &dir_b] {
        let out = decn()
            .current_dir(dir)
            .args([
                "run", "-m", "model.json", "--function", "F4", "--dim", "2", "--side", "6",
                "--repeats", "3", "--seed", "9", "-o", "runs",
            ])
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "run failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["run_F4_r00.csv", "run_F4_r01.csv", "run_F4_r02.csv", "summary.json"] {
        assert_eq!(
            fs::read(dir_a.join("runs").join(name)).unwrap(),
            fs::read(dir_b.join("runs").join(name)).unwrap(),
            "{name} differs between identical commands"
        );
    }
}

#[test]
fn run_emits_expected_csv_schema_and_summary() {
    let dir = tmp_dir("run");
    let model = train_tiny_model(&dir, "1");
    let out_dir = dir.join("runs");
    let out = run(&[
        "run",
        "-m",
        model.to_str().unwrap(),
        "--function",
        "F7",
        "--dim",
        "2",
        "--side",
        "6",
        "--repeats",
        "2",
        "--seed",
        "5",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let csv = fs::read_to_string(out_dir.join("run_F7_r00.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("gen,best,mean,evals"));
    // Depth 3 at L=6: snapshots after the initial evaluation and each step.
    assert_eq!(lines.count(), 4);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    for key in [
        "algorithm",
        "function",
        "D",
        "L",
        "repeats",
        "budget",
        "final_best_mean",
        "final_best_std",
        "seed",
    ] {
        assert!(summary.get(key).is_some(), "summary missing {key}");
    }
    assert_eq!(summary["algorithm"], "decn");
    assert_eq!(summary["function"], "F7");
    assert_eq!(summary["budget"], 144);
}

#[test]
fn run_rejects_undersized_lattice() {
    let dir = tmp_dir("small-l");
    let model = train_tiny_model(&dir, "2");
    let out = run(&[
        "run",
        "-m",
        model.to_str().unwrap(),
        "--function",
        "F4",
        "--dim",
        "2",
        "--side",
        "3",
        "--seed",
        "1",
        "-o",
        dir.join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kernel minimum"));
}

#[test]
fn missing_model_is_a_usage_error() {
    let out = run(&[
        "run",
        "-m",
        "/nonexistent/model.json",
        "--function",
        "F4",
        "--dim",
        "2",
        "-o",
        "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let out = run(&["train", "--preset", "bogus", "--suite", "low", "-o", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["no-such-subcommand"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_enforces_budget_parity() {
    let dir = tmp_dir("compare");
    let model = train_tiny_model(&dir, "11");
    let out_dir = dir.join("cmp");
    let out = run(&[
        "compare",
        "-m",
        model.to_str().unwrap(),
        "--function",
        "F4",
        "--dim",
        "2",
        "--side",
        "6",
        "--budget",
        "144",
        "--repeats",
        "3",
        "--de-pop",
        "20",
        "--seed",
        "3",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "compare failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("compare.json")).unwrap()).unwrap();
    let algos = doc["algorithms"].as_array().unwrap();
    assert_eq!(algos.len(), 3);
    for a in algos {
        assert_eq!(a["budget"], 144, "unequal budget for {}", a["algorithm"]);
    }
    for name in ["decn_r00.csv", "de_r00.csv", "random_r00.csv"] {
        let csv = fs::read_to_string(out_dir.join(name)).unwrap();
        assert!(csv.starts_with("gen,best,mean,evals\n"));
        assert!(csv.trim_end().lines().last().unwrap().ends_with(",144"));
    }

    // A budget that cannot be a whole number of lattice passes is rejected.
    let out = run(&[
        "compare",
        "-m",
        model.to_str().unwrap(),
        "--function",
        "F4",
        "--dim",
        "2",
        "--side",
        "6",
        "--budget",
        "150",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inconsistent"));
}

#[test]
fn arm_subcommand_trains_and_reports_both_algorithms() {
    let dir = tmp_dir("arm");
    let out = run(&[
        "arm",
        "--case",
        "sc",
        "--segments",
        "4",
        "--radius",
        "50",
        "--targets",
        "8",
        "--test-targets",
        "3",
        "--epochs",
        "5",
        "--minibatch",
        "1",
        "--side",
        "6",
        "--fe",
        "144",
        "--seed",
        "2",
        "-o",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "arm failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("arm_sc_model.json").exists());
    assert!(dir.join("arm_sc_summary.json").exists());
    assert!(dir.join("arm_sc_decn_r00.csv").exists());
    assert!(dir.join("arm_sc_random_r02.csv").exists());
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("arm_sc_summary.json")).unwrap())
            .unwrap();
    assert_eq!(doc["budget"], 144);
    assert!(doc["decn"]["final_best_mean"].as_f64().unwrap() >= 0.0);
    assert!(doc["random_search"]["final_best_mean"].as_f64().unwrap() >= 0.0);

    let out = run(&["arm", "--case", "zz", "-o", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dump_kernels_unshared_model_writes_one_csv_per_block_and_size() {
    let dir = tmp_dir("dump-nws15");
    let model = dir.join("nws15.json");
    // An initialized (untrained) model is enough to exercise the layout.
    let out = run(&[
        "train",
        "--preset",
        "nws15",
        "--suite",
        "low",
        "--dim",
        "2",
        "--epochs",
        "0",
        "--side",
        "6",
        "--L",
        "6",
        "--seed",
        "4",
        "-o",
        model.to_str().unwrap(),
    ]);
    // --side and its --L alias conflict when both are given.
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[
        "train",
        "--preset",
        "nws15",
        "--suite",
        "low",
        "--dim",
        "2",
        "--epochs",
        "0",
        "--L",
        "6",
        "--seed",
        "4",
        "-o",
        model.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let kdir = dir.join("kernels");
    let out = run(&[
        "dump-kernels",
        "-m",
        model.to_str().unwrap(),
        "-o",
        kdir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let count = fs::read_dir(&kdir).unwrap().count();
    assert_eq!(count, 45, "15 blocks x 3 sizes");
    assert!(kdir.join("em00_k3.csv").exists());
    assert!(kdir.join("em14_k7.csv").exists());
}

#[test]
fn dump_kernels_round_trips_with_model_json() {
    let dir = tmp_dir("dump");
    let model_path = train_tiny_model(&dir, "13");
    let kdir = dir.join("kernels");
    let out = run(&[
        "dump-kernels",
        "-m",
        model_path.to_str().unwrap(),
        "-o",
        kdir.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // Weight-shared ws3: one block, three kernel files.
    let mut files: Vec<String> = fs::read_dir(&kdir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, vec!["em_shared_k3.csv", "em_shared_k5.csv", "em_shared_k7.csv"]);

    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&model_path).unwrap()).unwrap();
    for (file, key, k) in [
        ("em_shared_k3.csv", "k3", 3usize),
        ("em_shared_k5.csv", "k5", 5),
        ("em_shared_k7.csv", "k7", 7),
    ] {
        let csv = fs::read_to_string(kdir.join(file)).unwrap();
        let parsed: Vec<f64> = csv
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(parsed.len(), k * k);
        let want: Vec<f64> = model["ems"][0][key]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(parsed, want, "{file} does not round-trip");
    }
}
