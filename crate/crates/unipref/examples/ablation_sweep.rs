//! Library-level ablation sweep: the adversarial-coefficient grid and the
//! four reward-handling arms (verifiable reward only, plus raw score, plus
//! transformed coefficient, separate adversarial loss), one run per cell
//! with shared data and seeds.
//!
//! Run with: cargo run --release -p unipref --example ablation_sweep -- [steps]

use unipref::config::TrainingConfig;
use unipref::loss::RewardMode;
use unipref::metrics::{evaluate, EvalConfig};
use unipref::policy::PolicyParams;
use unipref::tasks::{
    attach_teacher_responses, build_teacher, generate_dataset, make_gt_dataset, TaskSpec,
    TeacherSpec,
};
use unipref::trainer::{PipelineSpec, StageKind, StageSpec, TrainData, Trainer};

fn main() -> unipref::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(150);
    let task = TaskSpec {
        n_sft: 32,
        n_pref: 32,
        seed: 29,
        ..TaskSpec::default()
    };
    let vocab = task.vocabulary()?;
    let teacher = build_teacher(&TeacherSpec::default(), &task)?;
    let (sft_raw, pref_raw) = generate_dataset(&task)?;
    let (mut sft, _) = make_gt_dataset(
        &sft_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        29,
        "sft",
    )?;
    let (mut pref, _) = make_gt_dataset(
        &pref_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        29,
        "pref",
    )?;
    attach_teacher_responses(&mut sft, &teacher, task.max_response_len, 29, "sft");
    attach_teacher_responses(&mut pref, &teacher, task.max_response_len, 29, "pref");

    let config = TrainingConfig {
        seed: 29,
        diag_interval: 0,
        ..TrainingConfig::default()
    };
    let trainer = Trainer::new(
        config,
        TrainData {
            sft,
            pref,
            ..TrainData::default()
        },
        Some(teacher.clone()),
        task.max_response_len,
    );
    let init = PolicyParams::uniform(vocab, task.context_order)?;
    let eval_cfg = EvalConfig {
        samples_per_prompt: 8,
        teacher_samples: 200,
        max_len: task.max_response_len,
        seed: 2,
    };

    let tuned = |mut stage: StageSpec| -> StageSpec {
        stage.overrides.insert("lr_sft".into(), "0.3".into());
        stage.overrides.insert("lr_rl".into(), "0.5".into());
        stage.overrides.insert("disc.scale".into(), "0.5".into());
        stage
    };
    let run_cell = |name: String, pipeline: PipelineSpec| -> unipref::Result<()> {
        let run = trainer.run_pipeline(init.clone(), &pipeline, None, None)?;
        let report = evaluate(&run.params, Some(&teacher), &trainer.data.pref, &eval_cfg)?;
        println!(
            "{name:18} pass {:.3}  gap std {:.3}  final loss {:+.4}",
            report.pass_rate,
            report.logp_gap.as_ref().unwrap().std,
            run.metrics.last().unwrap().loss
        );
        Ok(())
    };

    println!("adversarial-coefficient sweep (sft -> a-grpo):");
    for lambda in [0.1, 0.01, 0.001, 0.0001, 0.00001] {
        let stage = tuned(StageSpec::new(StageKind::AGrpo, steps))
            .with_override("lambda_adv", lambda.to_string());
        let pipeline =
            PipelineSpec::new(vec![tuned(StageSpec::new(StageKind::Sft, steps)), stage])?;
        run_cell(format!("lambda {lambda}"), pipeline)?;
    }

    println!("\nreward-handling arms (sft -> rollout stage):");
    for (name, kind, mode) in [
        ("rlvr", StageKind::Grpo, RewardMode::Rlvr),
        ("rlvr+raw", StageKind::Grpo, RewardMode::RlvrPlusRaw),
        ("rlvr+coef", StageKind::Grpo, RewardMode::RlvrPlusCoef),
        ("separate", StageKind::AGrpo, RewardMode::Rlvr),
    ] {
        let mut stage = tuned(StageSpec::new(kind, steps));
        stage.reward_mode = mode;
        let pipeline =
            PipelineSpec::new(vec![tuned(StageSpec::new(StageKind::Sft, steps)), stage])?;
        run_cell(name.to_string(), pipeline)?;
    }
    Ok(())
}
