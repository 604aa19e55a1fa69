//! Two-stage adversarial pipeline (a-sft then a-grpo) with checkpoints and
//! the drift diagnostic, mirroring the sequential training paradigms.
//!
//! Run with: cargo run -p unipref --example staged_pipeline

use unipref::config::TrainingConfig;
use unipref::metrics::{evaluate, EvalConfig};
use unipref::policy::PolicyParams;
use unipref::tasks::{
    attach_teacher_responses, build_teacher, generate_dataset, make_gt_dataset, TaskSpec,
    TeacherSpec,
};
use unipref::trainer::{PipelineSpec, TrainData, Trainer};

fn main() -> unipref::Result<()> {
    let task = TaskSpec {
        n_sft: 32,
        n_pref: 32,
        seed: 13,
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
        13,
        "sft",
    )?;
    let (mut pref, _) = make_gt_dataset(
        &pref_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        13,
        "pref",
    )?;
    attach_teacher_responses(&mut sft, &teacher, task.max_response_len, 13, "sft");
    attach_teacher_responses(&mut pref, &teacher, task.max_response_len, 13, "pref");

    let config = TrainingConfig {
        seed: 13,
        diag_interval: 40,
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

    let mut pipeline = PipelineSpec::parse("a-sft:150->a-grpo:250", 100)?;
    for stage in pipeline.stages.iter_mut() {
        stage.overrides.insert("lr_sft".into(), "0.3".into());
        stage.overrides.insert("lr_rl".into(), "0.5".into());
        stage.overrides.insert("lambda_adv".into(), "0.02".into());
        stage.overrides.insert("disc.scale".into(), "0.5".into());
    }

    let out = std::path::PathBuf::from("target/demo-pipeline");
    let init = PolicyParams::uniform(vocab, task.context_order)?;
    let run = trainer.run_pipeline(init, &pipeline, Some(&out), None)?;

    for m in run.metrics.iter().step_by(40) {
        println!(
            "stage {} ({:>6}) step {:3}: loss {:8.4}  pass {}",
            m.stage_index,
            m.stage,
            m.step,
            m.loss,
            m.pass_rate.map(|p| format!("{p:.2}")).unwrap_or_default()
        );
    }
    println!("checkpoints:");
    for c in &run.checkpoints {
        println!("  {}", c.display());
    }

    let eval_cfg = EvalConfig {
        samples_per_prompt: 8,
        teacher_samples: 200,
        max_len: task.max_response_len,
        seed: 5,
    };
    let report = evaluate(&run.params, Some(&teacher), &trainer.data.pref, &eval_cfg)?;
    println!("final pass rate {:.3}", report.pass_rate);
    Ok(())
}
