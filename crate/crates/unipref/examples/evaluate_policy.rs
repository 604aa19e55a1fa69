//! Evaluate policies against the task: pass rate, response-length
//! distribution, and the student-teacher logp gap statistics, comparing an
//! untrained policy with the teacher itself.
//!
//! Run with: cargo run -p unipref --example evaluate_policy

use unipref::metrics::{evaluate, length_tv_distance, EvalConfig};
use unipref::policy::PolicyParams;
use unipref::tasks::{build_teacher, generate_records, TaskSpec, TeacherSpec};

fn main() -> unipref::Result<()> {
    let task = TaskSpec {
        seed: 23,
        ..TaskSpec::default()
    };
    let vocab = task.vocabulary()?;
    let teacher = build_teacher(&TeacherSpec::default(), &task)?;
    let records = generate_records(&task, 24, "gen-pref")?;
    let eval_cfg = EvalConfig {
        samples_per_prompt: 16,
        teacher_samples: 300,
        max_len: task.max_response_len,
        seed: 1,
    };

    let uniform = PolicyParams::uniform(vocab, task.context_order)?;
    let student = evaluate(&uniform, Some(&teacher), &records, &eval_cfg)?;
    let teacher_report = evaluate(&teacher, Some(&teacher), &records, &eval_cfg)?;

    println!("                 uniform   teacher");
    println!(
        "pass rate        {:7.3}   {:7.3}",
        student.pass_rate, teacher_report.pass_rate
    );
    println!(
        "gap mean         {:7.3}   {:7.3}",
        student.logp_gap.as_ref().unwrap().mean,
        teacher_report.logp_gap.as_ref().unwrap().mean
    );
    println!(
        "gap std          {:7.3}   {:7.3}",
        student.logp_gap.as_ref().unwrap().std,
        teacher_report.logp_gap.as_ref().unwrap().std
    );

    println!("\nresponse length histograms (content tokens):");
    println!("len   uniform   teacher");
    for len in 0..=task.max_response_len {
        println!(
            "{len:3}   {:7}   {:7}",
            student.length_histogram.get(&len).copied().unwrap_or(0),
            teacher_report
                .length_histogram
                .get(&len)
                .copied()
                .unwrap_or(0)
        );
    }
    println!(
        "total-variation distance between the two length distributions: {:.3}",
        length_tv_distance(&student.length_histogram, &teacher_report.length_histogram)
    );
    Ok(())
}
