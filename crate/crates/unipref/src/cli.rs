//! Operator entry point: data generation, training, evaluation, ablation
//! sweeps, and report assembly.
//!
//! Exit codes are a stable contract: 0 success, 1 usage, 2 input/data error,
//! 3 numerical abort. Every artifact of a run is written under its `--out`
//! directory together with the resolved configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{merge_maps, parse_config_file, validate_config};
use crate::data::{
    load_binary_dataset, load_preference_dataset, load_sft_dataset, save_binary_dataset,
    save_preference_dataset, save_sft_dataset,
};
use crate::error::{Error, Result};
use crate::loss::RewardMode;
use crate::metrics::{evaluate, write_report, EvalConfig, EvalReport};
use crate::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use crate::tasks::{
    attach_teacher_responses, build_teacher, generate_dataset, make_binary_dataset,
    make_gt_dataset, make_preference_dataset, measure_pass_rate, GtReport, TaskSpec, TeacherSpec,
};
use crate::trainer::{
    load_resume_point, PipelineSpec, StageKind, StageSpec, StepMetrics, TrainData, Trainer,
};
use crate::vocab::Vocabulary;

#[derive(Parser)]
#[command(
    name = "unipref",
    version,
    about = "Unified preference-learning trainer for tabular softmax policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets, the teacher checkpoint, and a manifest.
    GenerateData(GenerateArgs),
    /// Run a training pipeline; writes checkpoints and step metrics.
    Train(TrainArgs),
    /// Evaluate a policy checkpoint against the task datasets.
    Evaluate(EvaluateArgs),
    /// Sweep the adversarial coefficient and reward-mixing modes.
    Ablate(AblateArgs),
    /// Join run evaluations into one comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts of this invocation.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Stage list, e.g. `a-sft:200->a-grpo:800`.
    #[arg(long)]
    pipeline: Option<String>,
    /// Adversarial coefficient override.
    #[arg(long)]
    lambda_adv: Option<f64>,
    /// Unified mixing weight override.
    #[arg(long)]
    alpha: Option<f64>,
    /// Reward mixing for rollout stages: rlvr | rlvr+raw | rlvr+coef.
    #[arg(long)]
    mode: Option<String>,
    /// Continue from the most advanced checkpoint under --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Policy checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated adversarial coefficients to sweep.
    #[arg(long)]
    lambda_adv: Option<String>,
    /// Comma-separated reward modes: rlvr | rlvr+raw | rlvr+coef | separate.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory for the comparison table.
    #[arg(long)]
    out: PathBuf,
    /// Run directories containing eval_report.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenerateData(args) => cmd_generate_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn load_raw_config(path: Option<&PathBuf>) -> Result<BTreeMap<String, String>> {
    match path {
        Some(p) => parse_config_file(p),
        None => Ok(BTreeMap::new()),
    }
}

const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFiles {
    sft: String,
    pref: String,
    preference: String,
    binary: String,
    teacher: String,
}

/// Generation provenance written next to the datasets.
#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    version: u32,
    task: TaskSpec,
    teacher: TeacherSpec,
    teacher_pass_rate: f64,
    retention_sft: GtReport,
    retention_pref: GtReport,
    files: ManifestFiles,
}

fn cmd_generate_data(args: &GenerateArgs) -> Result<()> {
    let mut raw = load_raw_config(args.common.config.as_ref())?;
    if let Some(seed) = args.common.seed {
        raw.insert("task.seed".to_string(), seed.to_string());
    }
    // Reject bad training keys early even though generation ignores them.
    validate_config(&raw)?;
    let task = TaskSpec::from_map(&raw)?;
    let teacher_spec = TeacherSpec::from_map(&raw)?;
    let vocab = task.vocabulary()?;

    let out = &args.common.out;
    std::fs::create_dir_all(out)?;

    let teacher = build_teacher(&teacher_spec, &task)?;
    let teacher_pass_rate = measure_pass_rate(&teacher, &task, 1000, "teacher-accept")?;

    let (sft_raw, pref_raw) = generate_dataset(&task)?;
    let (mut sft, retention_sft) = make_gt_dataset(
        &sft_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        task.seed,
        "sft",
    )?;
    let (mut pref, retention_pref) = make_gt_dataset(
        &pref_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        task.seed,
        "pref",
    )?;
    attach_teacher_responses(&mut sft, &teacher, task.max_response_len, task.seed, "sft");
    attach_teacher_responses(
        &mut pref,
        &teacher,
        task.max_response_len,
        task.seed,
        "pref",
    );
    let preference = make_preference_dataset(&sft, &vocab, task.max_response_len, task.seed)?;
    let binary = make_binary_dataset(&sft, &vocab, task.max_response_len, task.seed)?;

    save_sft_dataset(&out.join("sft.jsonl"), &sft)?;
    save_sft_dataset(&out.join("pref.jsonl"), &pref)?;
    save_preference_dataset(&out.join("preference.jsonl"), &preference)?;
    save_binary_dataset(&out.join("binary.jsonl"), &binary)?;
    save_checkpoint(&teacher, &out.join("teacher.jsonl"))?;

    let manifest = DataManifest {
        version: 1,
        task: task.clone(),
        teacher: teacher_spec,
        teacher_pass_rate,
        retention_sft,
        retention_pref,
        files: ManifestFiles {
            sft: "sft.jsonl".into(),
            pref: "pref.jsonl".into(),
            preference: "preference.jsonl".into(),
            binary: "binary.jsonl".into(),
            teacher: "teacher.jsonl".into(),
        },
    };
    std::fs::write(
        out.join(MANIFEST_NAME),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    println!(
        "generated {} demonstration records (retention {:.2}), {} prompt records (retention {:.2})",
        manifest.retention_sft.kept,
        manifest.retention_sft.retention,
        manifest.retention_pref.kept,
        manifest.retention_pref.retention,
    );
    println!("teacher pass rate {:.3}", teacher_pass_rate);
    Ok(())
}

struct LoadedData {
    manifest: DataManifest,
    vocab: Vocabulary,
    data: TrainData,
    teacher: PolicyParams,
}

fn load_data(raw: &BTreeMap<String, String>) -> Result<LoadedData> {
    let data_dir: PathBuf = raw
        .get("data_dir")
        .ok_or_else(|| Error::Config {
            field: "data_dir".into(),
            message: "config must name the generated data directory".into(),
        })?
        .into();
    let manifest_path = data_dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(Error::Validation(format!(
            "no {MANIFEST_NAME} under {}; run generate-data first",
            data_dir.display()
        )));
    }
    let manifest: DataManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let vocab = manifest.task.vocabulary()?;
    let data = TrainData {
        sft: load_sft_dataset(&data_dir.join(&manifest.files.sft), &vocab)?,
        pref: load_sft_dataset(&data_dir.join(&manifest.files.pref), &vocab)?,
        preference: load_preference_dataset(&data_dir.join(&manifest.files.preference), &vocab)?,
        binary: load_binary_dataset(&data_dir.join(&manifest.files.binary), &vocab)?,
    };
    let teacher = load_checkpoint(&data_dir.join(&manifest.files.teacher))?;
    Ok(LoadedData {
        manifest,
        vocab,
        data,
        teacher,
    })
}

fn build_pipeline(
    raw: &BTreeMap<String, String>,
    pipeline_flag: Option<&String>,
    mode: Option<RewardMode>,
) -> Result<PipelineSpec> {
    let default_steps: usize = raw
        .get("steps")
        .map(|s| {
            s.parse().map_err(|_| Error::Config {
                field: "steps".into(),
                message: format!("cannot parse `{s}`"),
            })
        })
        .transpose()?
        .unwrap_or(200);
    let text = pipeline_flag
        .cloned()
        .or_else(|| raw.get("pipeline").cloned())
        .unwrap_or_else(|| "unified".to_string());
    let mut pipeline = PipelineSpec::parse(&text, default_steps)?;
    if let Some(mode) = mode {
        for stage in pipeline.stages.iter_mut() {
            if matches!(
                stage.kind,
                StageKind::Grpo | StageKind::AGrpo | StageKind::Unified
            ) {
                stage.reward_mode = mode;
            }
        }
    }
    Ok(pipeline)
}

/// Global ordering key of a metrics line, for resume-aware truncation.
fn metrics_key(m: &StepMetrics) -> (usize, usize) {
    (m.stage_index, m.step)
}

fn write_metrics(
    path: &Path,
    new_metrics: &[StepMetrics],
    resume_cutoff: Option<(usize, usize)>,
) -> Result<()> {
    let mut lines: Vec<String> = Vec::new();
    if let (Some(cutoff), true) = (resume_cutoff, path.exists()) {
        for line in std::fs::read_to_string(path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let m: StepMetrics = serde_json::from_str(line)?;
            if metrics_key(&m) < cutoff {
                lines.push(line.to_string());
            }
        }
    }
    for m in new_metrics {
        lines.push(serde_json::to_string(m)?);
    }
    std::fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

fn resolved_config_overrides(args: &TrainArgs) -> BTreeMap<String, String> {
    let mut over = BTreeMap::new();
    if let Some(seed) = args.common.seed {
        over.insert("seed".to_string(), seed.to_string());
    }
    if let Some(lambda) = args.lambda_adv {
        over.insert("lambda_adv".to_string(), lambda.to_string());
    }
    if let Some(alpha) = args.alpha {
        over.insert("alpha".to_string(), alpha.to_string());
    }
    over
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file_raw = load_raw_config(args.common.config.as_ref())?;
    let raw = merge_maps(&file_raw, &resolved_config_overrides(args));
    let cfg = validate_config(&raw)?;
    let mode = args.mode.as_deref().map(str::parse).transpose()?;
    let loaded = load_data(&raw)?;
    let pipeline = build_pipeline(&raw, args.pipeline.as_ref(), mode)?;

    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("config.resolved.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;

    let trainer = Trainer::new(
        cfg,
        loaded.data,
        Some(loaded.teacher),
        loaded.manifest.task.max_response_len,
    );
    let init = PolicyParams::uniform(loaded.vocab.clone(), loaded.manifest.task.context_order)?;

    let resume = if args.resume {
        load_resume_point(out, &pipeline)?
    } else {
        None
    };
    let cutoff = resume.as_ref().map(|r| (r.stage_index, r.next_step));
    let run = trainer.run_pipeline(init, &pipeline, Some(out), resume)?;

    write_metrics(&out.join("metrics.jsonl"), &run.metrics, cutoff)?;
    let final_dir = out.join("final");
    std::fs::create_dir_all(&final_dir)?;
    save_checkpoint(&run.params, &final_dir.join("params.jsonl"))?;

    println!(
        "trained {} stages, {} steps logged, final checkpoint at {}",
        pipeline.stages.len(),
        run.metrics.len(),
        final_dir.join("params.jsonl").display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut raw = load_raw_config(args.common.config.as_ref())?;
    if let Some(seed) = args.common.seed {
        raw.insert("seed".to_string(), seed.to_string());
    }
    let cfg = validate_config(&raw)?;
    let loaded = load_data(&raw)?;
    if !args.ckpt.exists() {
        return Err(Error::Validation(format!(
            "checkpoint {} not found",
            args.ckpt.display()
        )));
    }
    let student = load_checkpoint(&args.ckpt)?;
    let records = if loaded.data.pref.is_empty() {
        &loaded.data.sft
    } else {
        &loaded.data.pref
    };
    let eval_cfg = EvalConfig {
        samples_per_prompt: cfg.eval_samples,
        teacher_samples: cfg.eval_teacher_samples,
        max_len: loaded.manifest.task.max_response_len,
        seed: cfg.seed,
    };
    let report = evaluate(&student, Some(&loaded.teacher), records, &eval_cfg)?;
    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(
        args.common.out.join("config.resolved.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    write_report(&report, &args.common.out)?;
    println!(
        "pass rate {:.4}, logp gap std {:.4}, report at {}",
        report.pass_rate,
        report.logp_gap.as_ref().map(|g| g.std).unwrap_or(f64::NAN),
        args.common.out.join("eval_report.json").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    cell: String,
    lambda_adv: Option<f64>,
    mode: Option<String>,
    status: String,
    pass_rate: Option<f64>,
    logp_gap_std: Option<f64>,
    final_loss: Option<f64>,
}

fn parse_lambda_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad lambda value `{s}` in sweep list")))
        })
        .collect()
}

fn run_ablation_cell(
    trainer: &Trainer,
    init: &PolicyParams,
    pipeline: &PipelineSpec,
    eval_cfg: &EvalConfig,
    out: &Path,
) -> Result<(EvalReport, f64)> {
    std::fs::create_dir_all(out)?;
    let run = trainer.run_pipeline(init.clone(), pipeline, Some(out), None)?;
    write_metrics(&out.join("metrics.jsonl"), &run.metrics, None)?;
    let final_dir = out.join("final");
    std::fs::create_dir_all(&final_dir)?;
    save_checkpoint(&run.params, &final_dir.join("params.jsonl"))?;
    let report = evaluate(
        &run.params,
        trainer.teacher.as_ref(),
        if trainer.data.pref.is_empty() {
            &trainer.data.sft
        } else {
            &trainer.data.pref
        },
        eval_cfg,
    )?;
    write_report(&report, out)?;
    let final_loss = run.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    Ok((report, final_loss))
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let file_raw = load_raw_config(args.common.config.as_ref())?;
    let mut raw = file_raw;
    if let Some(seed) = args.common.seed {
        raw.insert("seed".to_string(), seed.to_string());
    }
    let cfg = validate_config(&raw)?;
    let lambdas_text = args
        .lambda_adv
        .clone()
        .or_else(|| raw.get("ablate.lambdas").cloned())
        .unwrap_or_else(|| "0.1,0.01,0.001,0.0001,0.00001".to_string());
    let modes_text = args
        .mode
        .clone()
        .or_else(|| raw.get("ablate.modes").cloned())
        .unwrap_or_else(|| "rlvr,rlvr+raw,rlvr+coef,separate".to_string());
    let lambdas = parse_lambda_list(&lambdas_text)?;
    let modes: Vec<String> = modes_text
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if lambdas.is_empty() && modes.is_empty() {
        return Err(Error::Usage("ablation sweep grid is empty".into()));
    }

    let loaded = load_data(&raw)?;
    let trainer = Trainer::new(
        cfg.clone(),
        loaded.data,
        Some(loaded.teacher),
        loaded.manifest.task.max_response_len,
    );
    let init = PolicyParams::uniform(loaded.vocab.clone(), loaded.manifest.task.context_order)?;
    let eval_cfg = EvalConfig {
        samples_per_prompt: cfg.eval_samples,
        teacher_samples: cfg.eval_teacher_samples,
        max_len: loaded.manifest.task.max_response_len,
        seed: cfg.seed,
    };
    let steps: usize = raw
        .get("steps")
        .map(|s| s.parse().unwrap_or(200))
        .unwrap_or(200);

    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("config.resolved.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    let mut rows: Vec<AblationRow> = Vec::new();

    for lambda in &lambdas {
        let cell = format!("lambda-{lambda}");
        let mut stage = StageSpec::new(StageKind::AGrpo, steps);
        stage
            .overrides
            .insert("lambda_adv".into(), lambda.to_string());
        let pipeline = PipelineSpec::new(vec![StageSpec::new(StageKind::Sft, steps), stage])?;
        let result = run_ablation_cell(
            &trainer,
            &init,
            &pipeline,
            &eval_cfg,
            &out.join("cells").join(&cell),
        );
        rows.push(match result {
            Ok((report, final_loss)) => AblationRow {
                cell,
                lambda_adv: Some(*lambda),
                mode: None,
                status: "ok".into(),
                pass_rate: Some(report.pass_rate),
                logp_gap_std: report.logp_gap.as_ref().map(|g| g.std),
                final_loss: Some(final_loss),
            },
            Err(err) => AblationRow {
                cell,
                lambda_adv: Some(*lambda),
                mode: None,
                status: format!("error: {err}"),
                pass_rate: None,
                logp_gap_std: None,
                final_loss: None,
            },
        });
    }

    for mode in &modes {
        let cell = format!("mode-{mode}");
        let pipeline = match mode.as_str() {
            "separate" => PipelineSpec::new(vec![
                StageSpec::new(StageKind::Sft, steps),
                StageSpec::new(StageKind::AGrpo, steps),
            ])?,
            other => {
                let reward_mode: RewardMode = other.parse()?;
                let mut stage = StageSpec::new(StageKind::Grpo, steps);
                stage.reward_mode = reward_mode;
                PipelineSpec::new(vec![StageSpec::new(StageKind::Sft, steps), stage])?
            }
        };
        let result = run_ablation_cell(
            &trainer,
            &init,
            &pipeline,
            &eval_cfg,
            &out.join("cells").join(&cell),
        );
        rows.push(match result {
            Ok((report, final_loss)) => AblationRow {
                cell,
                lambda_adv: None,
                mode: Some(mode.clone()),
                status: "ok".into(),
                pass_rate: Some(report.pass_rate),
                logp_gap_std: report.logp_gap.as_ref().map(|g| g.std),
                final_loss: Some(final_loss),
            },
            Err(err) => AblationRow {
                cell,
                lambda_adv: None,
                mode: Some(mode.clone()),
                status: format!("error: {err}"),
                pass_rate: None,
                logp_gap_std: None,
                final_loss: None,
            },
        });
    }

    let mut csv = String::from("cell,lambda_adv,mode,status,pass_rate,logp_gap_std,final_loss\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.cell,
            row.lambda_adv.map(|v| v.to_string()).unwrap_or_default(),
            row.mode.clone().unwrap_or_default(),
            row.status.replace(',', ";"),
            row.pass_rate.map(|v| v.to_string()).unwrap_or_default(),
            row.logp_gap_std.map(|v| v.to_string()).unwrap_or_default(),
            row.final_loss.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(out.join("ablation.csv"), &csv)?;
    std::fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    println!(
        "{} sweep cells written to {}",
        rows.len(),
        out.join("ablation.csv").display()
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut csv = String::from("run,pass_rate,logp_gap_mean,logp_gap_std,sample_count\n");
    for run_dir in &args.runs {
        let report_path = run_dir.join("eval_report.json");
        if !report_path.exists() {
            return Err(Error::Validation(format!(
                "no eval_report.json under {}",
                run_dir.display()
            )));
        }
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        let name = run_dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| run_dir.display().to_string());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name,
            report.pass_rate,
            report
                .logp_gap
                .as_ref()
                .map(|g| g.mean.to_string())
                .unwrap_or_default(),
            report
                .logp_gap
                .as_ref()
                .map(|g| g.std.to_string())
                .unwrap_or_default(),
            report.sample_count,
        ));
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("comparison.csv"), &csv)?;
    println!(
        "comparison over {} runs at {}",
        args.runs.len(),
        args.out.join("comparison.csv").display()
    );
    Ok(())
}
