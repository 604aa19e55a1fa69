//! The score-to-coefficient transform and the built-in discriminators:
//! prints the transform curve, then scores student responses of varying
//! similarity against a teacher response, with and without ground-truth
//! anchoring.
//!
//! Run with: cargo run -p unipref --example discriminator_coef

use unipref::disc::{coef_transform, raw_score, response_score, DiscriminatorKind};
use unipref::tasks::{build_teacher, generate_records, TaskSpec, TeacherSpec};
use unipref::verify::Detokenizer;
use unipref::vocab::Sequence;

fn main() -> unipref::Result<()> {
    println!("coefficient transform (peaks at indistinguishable, falls to -1):");
    println!("   r      sigmoid(r)   coef");
    for r in [
        -20.0,
        -4.0,
        -2.0,
        -(3.0_f64.ln()),
        0.0,
        3.0_f64.ln(),
        2.0,
        4.0,
        20.0,
    ] {
        let p = 1.0 / (1.0 + (-r).exp());
        println!("{r:7.3}   {p:8.4}  {:7.4}", coef_transform(r));
    }

    let task = TaskSpec {
        seed: 3,
        ..TaskSpec::default()
    };
    let vocab = task.vocabulary()?;
    let detok = Detokenizer::new(&vocab);
    let teacher = build_teacher(&TeacherSpec::default(), &task)?;
    let record = &generate_records(&task, 1, "gen-sft")?[0];
    let mut rng = unipref::rng::seeded_rng(3, "demo");
    let teacher_resp = teacher.sample_response(&record.prompt, task.max_response_len, &mut rng);

    let kind = DiscriminatorKind::LogLikelihoodOracle {
        scorer: teacher.clone(),
        scale: 0.5,
    };
    println!("\nprompt constraints: {:?}", record.constraints);
    println!("teacher response  : {:?}", detok.text(&teacher_resp));
    println!("\nstudent response scored against the teacher response:");
    let students: Vec<Sequence> = vec![
        teacher_resp.clone(),
        teacher.sample_response(&record.prompt, task.max_response_len, &mut rng),
        unipref::policy::PolicyParams::uniform(vocab.clone(), 1)?.sample_response(
            &record.prompt,
            task.max_response_len,
            &mut rng,
        ),
    ];
    for student in &students {
        let r = raw_score(&kind, &record.prompt, &teacher_resp, student)?;
        let s = response_score(&kind, &record.prompt, None, &teacher_resp, student)?;
        println!(
            "  {:32} r {:7.3}  coef {:7.4}",
            format!("{:?}", detok.text(student)),
            r,
            s.coef
        );
    }

    println!("\nsame students under the gt-anchored variant:");
    let anchored = kind.anchored();
    let gt = teacher_resp.clone();
    for student in &students {
        let s = response_score(&anchored, &record.prompt, Some(&gt), &teacher_resp, student)?;
        println!(
            "  {:32} delta-r {:7.3}  coef {:7.4}",
            format!("{:?}", detok.text(student)),
            s.raw,
            s.coef
        );
    }
    Ok(())
}
