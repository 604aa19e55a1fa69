//! Build a synthetic instruction task end to end: vocabulary, teacher
//! policy, ground-truth filtering, and the dataset files on disk.
//!
//! Run with: cargo run -p unipref --example generate_data -- [out_dir]

use unipref::data::save_sft_dataset;
use unipref::policy::save_checkpoint;
use unipref::tasks::{
    attach_teacher_responses, build_teacher, generate_dataset, make_gt_dataset, measure_pass_rate,
    TaskSpec, TeacherSpec,
};
use unipref::verify::Detokenizer;

fn main() -> unipref::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/demo-data".to_string());
    let out = std::path::PathBuf::from(out);
    std::fs::create_dir_all(&out)?;

    let task = TaskSpec {
        n_sft: 32,
        n_pref: 32,
        seed: 7,
        ..TaskSpec::default()
    };
    let vocab = task.vocabulary()?;
    println!(
        "vocabulary ({} tokens): {:?}",
        vocab.size(),
        vocab.symbols()
    );

    let teacher_spec = TeacherSpec::default();
    let teacher = build_teacher(&teacher_spec, &task)?;
    let rate = measure_pass_rate(&teacher, &task, 1000, "demo")?;
    println!(
        "teacher pass rate: {rate:.3} (target {})",
        teacher_spec.p_sat
    );

    let (sft_raw, _) = generate_dataset(&task)?;
    let (mut sft, report) = make_gt_dataset(
        &sft_raw,
        &teacher,
        task.gt_attempts,
        task.max_response_len,
        task.seed,
        "sft",
    )?;
    attach_teacher_responses(&mut sft, &teacher, task.max_response_len, task.seed, "sft");
    println!(
        "ground-truth filtering kept {}/{} records (retention {:.2})",
        report.kept, report.total, report.retention
    );

    let detok = Detokenizer::new(&vocab);
    for record in sft.iter().take(3) {
        println!("--");
        println!("prompt tokens : {:?}", record.prompt.tokens());
        println!("constraints   : {:?}", record.constraints);
        println!(
            "gt response   : {:?}",
            detok.text(record.gt_response.as_ref().unwrap())
        );
        println!(
            "teacher sample: {:?}",
            detok.text(record.teacher_response.as_ref().unwrap())
        );
    }

    save_sft_dataset(&out.join("sft.jsonl"), &sft)?;
    save_checkpoint(&teacher, &out.join("teacher.jsonl"))?;
    println!(
        "--\nwrote sft.jsonl and teacher checkpoint under {}",
        out.display()
    );
    Ok(())
}
