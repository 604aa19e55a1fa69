//! Single-stage unified training on mixed batches, watching the four
//! learning signals (imitation, preference, and the two adversarial
//! contributions) evolve step by step.
//!
//! Run with: cargo run -p unipref --example train_unified

use unipref::config::TrainingConfig;
use unipref::metrics::{evaluate, EvalConfig};
use unipref::policy::PolicyParams;
use unipref::tasks::{
    attach_teacher_responses, build_teacher, generate_dataset, make_gt_dataset, TaskSpec,
    TeacherSpec,
};
use unipref::trainer::{StageKind, StageSpec, TrainData, Trainer};

fn main() -> unipref::Result<()> {
    let task = TaskSpec {
        n_sft: 32,
        n_pref: 32,
        seed: 11,
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
        11,
        "sft",
    )?;
    let (mut pref, _) = make_gt_dataset(
        &pref_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        11,
        "pref",
    )?;
    attach_teacher_responses(&mut sft, &teacher, task.max_response_len, 11, "sft");
    attach_teacher_responses(&mut pref, &teacher, task.max_response_len, 11, "pref");

    let config = TrainingConfig {
        seed: 11,
        diag_interval: 50,
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
    let stage = StageSpec::new(StageKind::Unified, 300)
        .with_override("lr_unified", "0.4")
        .with_override("lambda_adv", "0.01")
        .with_override("disc.scale", "0.5");
    let init = PolicyParams::uniform(vocab, task.context_order)?;
    let run = trainer.run_stage(init, &stage, 0)?;

    println!("step |   loss    |sft|  |pref|  |adv-s|  |adv-p|  pass   drift");
    for m in run.metrics.iter().step_by(25) {
        let s = m.signals.as_ref().unwrap();
        println!(
            "{:4} | {:8.4}  {:.3}  {:.3}   {:.4}   {:.4}  {}  {}",
            m.step,
            m.loss,
            s.imitation_norm,
            s.preference_norm,
            s.adv_sft_norm,
            s.adv_pref_norm,
            m.pass_rate.map(|p| format!("{p:.2}")).unwrap_or_default(),
            m.kl_diag
                .as_ref()
                .map(|d| format!("{:.3}", d.mean_kl))
                .unwrap_or_default(),
        );
    }

    let eval_cfg = EvalConfig {
        samples_per_prompt: 8,
        teacher_samples: 200,
        max_len: task.max_response_len,
        seed: 99,
    };
    let report = evaluate(&run.params, Some(&teacher), &trainer.data.pref, &eval_cfg)?;
    println!(
        "final: pass rate {:.3}, logp gap mean {:.3} / std {:.3}",
        report.pass_rate,
        report.logp_gap.as_ref().unwrap().mean,
        report.logp_gap.as_ref().unwrap().std
    );
    Ok(())
}
