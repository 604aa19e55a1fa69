//! Reward-model-free preference stages: train on derived winner/loser pairs
//! and on desirable/undesirable labels, watching both losses fall.
//!
//! Run with: cargo run -p unipref --example preference_losses

use unipref::config::TrainingConfig;
use unipref::policy::PolicyParams;
use unipref::tasks::{
    build_teacher, generate_dataset, make_binary_dataset, make_gt_dataset, make_preference_dataset,
    TaskSpec, TeacherSpec,
};
use unipref::trainer::{StageKind, StageSpec, TrainData, Trainer};

fn main() -> unipref::Result<()> {
    let task = TaskSpec {
        n_sft: 32,
        n_pref: 0,
        seed: 17,
        ..TaskSpec::default()
    };
    let vocab = task.vocabulary()?;
    let teacher = build_teacher(&TeacherSpec::default(), &task)?;
    let (sft_raw, _) = generate_dataset(&task)?;
    let (sft, _) = make_gt_dataset(
        &sft_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        17,
        "sft",
    )?;
    let preference = make_preference_dataset(&sft, &vocab, task.max_response_len, 17)?;
    let binary = make_binary_dataset(&sft, &vocab, task.max_response_len, 17)?;
    println!(
        "{} preference pairs, {} labeled examples",
        preference.len(),
        binary.len()
    );

    let config = TrainingConfig {
        seed: 17,
        diag_interval: 0,
        ..TrainingConfig::default()
    };
    let trainer = Trainer::new(
        config,
        TrainData {
            preference,
            binary,
            ..TrainData::default()
        },
        None,
        task.max_response_len,
    );
    let init = PolicyParams::uniform(vocab, task.context_order)?;

    for kind in [StageKind::Dpo, StageKind::Kto] {
        let stage = StageSpec::new(kind, 120).with_override("lr_sft", "0.5");
        let run = trainer.run_stage(init.clone(), &stage, 0)?;
        let first = run.metrics.first().unwrap().loss;
        let last = run.metrics.last().unwrap().loss;
        println!(
            "{:>3}: loss {first:.4} -> {last:.4} over {} steps",
            kind.name(),
            stage.steps
        );
    }
    Ok(())
}
