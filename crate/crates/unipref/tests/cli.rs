//! End-to-end runs of the `unipref` binary: exit codes, file layouts,
//! determinism, and resume behavior.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unipref"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn unipref");
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("spawn unipref");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let base = format!(
        "task.n_sft = 16\ntask.n_pref = 16\ntask.seed = 5\nseed = 5\nsteps = 6\nbatch_size = 4\n\
         lr_sft = 0.25\nlr_rl = 0.05\nlr_unified = 0.1\nlambda_adv = 0.01\n\
         eval_samples = 4\neval_teacher_samples = 24\ndiag_interval = 0\n\
         data_dir = {}\n{extra}",
        dir.join("data").display()
    );
    std::fs::write(&path, base).unwrap();
    path
}

fn generate(dir: &Path, config: &Path) {
    run_ok(&[
        "generate-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
    ]);
}

#[test]
fn generate_data_writes_loadable_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    generate(dir.path(), &config);
    let data = dir.path().join("data");
    for name in [
        "sft.jsonl",
        "pref.jsonl",
        "preference.jsonl",
        "binary.jsonl",
        "teacher.jsonl",
        "manifest.json",
    ] {
        assert!(data.join(name).exists(), "{name} missing");
    }
    let first = std::fs::read(data.join("sft.jsonl")).unwrap();

    let dir2 = tempfile::tempdir().unwrap();
    let config2 = write_config(dir2.path(), "");
    generate(dir2.path(), &config2);
    let second = std::fs::read(dir2.path().join("data").join("sft.jsonl")).unwrap();
    assert_eq!(first, second, "same seed must give byte-identical datasets");
    assert_eq!(
        std::fs::read(data.join("teacher.jsonl")).unwrap(),
        std::fs::read(dir2.path().join("data").join("teacher.jsonl")).unwrap()
    );
}

#[test]
fn unsatisfiable_generation_config_exits_2_naming_the_combination() {
    let dir = tempfile::tempdir().unwrap();
    // Keyword and forbidden families only, two constraints per prompt, tiny
    // word pool: some record draws the same word for both and cannot be
    // satisfied.
    let config = write_config(
        dir.path(),
        "task.vocab_size = 12\ntask.constraints_per_prompt = 2\ntask.prompt_len = 6\n\
         task.weight.keyword = 1\ntask.weight.forbidden = 1\n\
         task.weight.placeholders = 0\ntask.weight.palindrome = 0\ntask.weight.paragraphs = 0\n\
         task.n_sft = 60\n",
    );
    let (code, stderr) = exit_code(&[
        "generate-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(
        stderr.contains("unsatisfiable") || stderr.contains("generation"),
        "stderr: {stderr}"
    );
}

#[test]
fn train_writes_metrics_lines_matching_steps_and_stage_directories() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    generate(dir.path(), &config);
    let out = dir.path().join("run");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--pipeline",
        "a-sft:6->a-grpo:6",
    ]);
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
    assert!(out.join("ckpt").join("s00-a-sft").exists());
    assert!(out.join("ckpt").join("s01-a-grpo").exists());
    assert!(out.join("final").join("params.jsonl").exists());
    assert!(out.join("config.resolved.json").exists());
}

#[test]
fn resume_reproduces_the_uninterrupted_run_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ckpt_interval = 2\n");
    generate(dir.path(), &config);

    let full = dir.path().join("full");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
        "--pipeline",
        "grpo:6",
    ]);

    // Same run, then drop everything after the step-2 checkpoint and the
    // metrics suffix, emulating an interruption.
    let crashed = dir.path().join("crashed");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        crashed.to_str().unwrap(),
        "--pipeline",
        "grpo:6",
    ]);
    let stage_dir = crashed.join("ckpt").join("s00-grpo");
    for entry in std::fs::read_dir(&stage_dir).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() != "step000002" {
            std::fs::remove_dir_all(path).unwrap();
        }
    }
    std::fs::remove_dir_all(crashed.join("final")).unwrap();

    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        crashed.to_str().unwrap(),
        "--pipeline",
        "grpo:6",
        "--resume",
    ]);

    let full_params = std::fs::read(full.join("final").join("params.jsonl")).unwrap();
    let resumed_params = std::fs::read(crashed.join("final").join("params.jsonl")).unwrap();
    assert_eq!(full_params, resumed_params);
    let full_metrics = std::fs::read(full.join("metrics.jsonl")).unwrap();
    let resumed_metrics = std::fs::read(crashed.join("metrics.jsonl")).unwrap();
    assert_eq!(full_metrics, resumed_metrics);
}

#[test]
fn evaluate_teacher_checkpoint_meets_target_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "eval_samples = 16\n");
    generate(dir.path(), &config);
    let data = dir.path().join("data");
    let eval_a = dir.path().join("eval-a");
    let eval_b = dir.path().join("eval-b");
    for out in [&eval_a, &eval_b] {
        run_ok(&[
            "evaluate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--ckpt",
            data.join("teacher.jsonl").to_str().unwrap(),
        ]);
    }
    assert_eq!(
        std::fs::read(eval_a.join("eval_report.json")).unwrap(),
        std::fs::read(eval_b.join("eval_report.json")).unwrap()
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_a.join("eval_report.json")).unwrap())
            .unwrap();
    let pass = report["pass_rate"].as_f64().unwrap();
    let n = report["sample_count"].as_u64().unwrap() as f64;
    let p = 0.9;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!(pass >= p - 3.0 * sigma, "teacher pass rate {pass} too low");
}

#[test]
fn evaluate_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    generate(dir.path(), &config);
    let (code, _) = exit_code(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
        "--ckpt",
        dir.path().join("nope.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn ablate_produces_one_row_per_cell_and_rejects_empty_grids() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "steps = 3\n");
    generate(dir.path(), &config);
    let out = dir.path().join("sweep");
    run_ok(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--lambda-adv",
        "0.1,0.01,0.001,0.0001,0.00001",
        "--mode",
        "rlvr,rlvr+raw,rlvr+coef,separate",
    ]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(
        csv.lines().count(),
        1 + 5 + 4,
        "header + 5 lambda rows + 4 mode rows"
    );
    for needle in [
        "mode-rlvr,",
        "mode-rlvr+raw,",
        "mode-rlvr+coef,",
        "mode-separate,",
    ] {
        assert!(csv.contains(needle), "missing {needle} in {csv}");
    }
    for cell in ["lambda-0.1", "lambda-0.00001", "mode-separate"] {
        assert!(out
            .join("cells")
            .join(cell)
            .join("eval_report.json")
            .exists());
    }

    let (code, _) = exit_code(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--lambda-adv",
        "",
        "--mode",
        "",
    ]);
    assert_eq!(code, 1, "empty grid is a usage error");
}

#[test]
fn report_joins_runs_into_one_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    generate(dir.path(), &config);
    let data = dir.path().join("data");
    let mut runs = Vec::new();
    for name in ["sft-run", "grpo-run", "unified-run"] {
        let out = dir.path().join(name);
        run_ok(&[
            "evaluate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--ckpt",
            data.join("teacher.jsonl").to_str().unwrap(),
        ]);
        runs.push(out);
    }
    let report_out = dir.path().join("report");
    run_ok(&[
        "report",
        "--out",
        report_out.to_str().unwrap(),
        runs[0].to_str().unwrap(),
        runs[1].to_str().unwrap(),
        runs[2].to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(report_out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("run,pass_rate,"));
    for name in ["sft-run", "grpo-run", "unified-run"] {
        assert!(csv.contains(name));
    }
}

#[test]
fn usage_errors_exit_1() {
    let (code, _) = exit_code(&["train", "--config"]);
    assert_eq!(code, 1);
    let (code, _) = exit_code(&["no-such-command"]);
    assert_eq!(code, 1);
    let (code, _) = exit_code(&["train", "--unknown-flag", "x", "--out", "/tmp/x"]);
    assert_eq!(code, 1);
}

#[test]
fn out_of_range_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "alpha = 1.5\n").unwrap();
    let (code, stderr) = exit_code(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("alpha"), "stderr: {stderr}");
}
