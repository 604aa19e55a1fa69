//! Evaluation: pass rates, response-length distributions, and
//! student-teacher log-probability divergence over a shared teacher-sampled
//! response set. Reports are reproducible from (checkpoint, seed) and carry
//! internal consistency invariants.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::ExampleRecord;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::seeded_rng;
use crate::verify::{verifiable_reward, Detokenizer};
use crate::vocab::Sequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Summary of per-response gaps `logp_student - logp_teacher`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapStats {
    pub mean: f64,
    /// Population standard deviation of the total-logp gaps.
    pub std: f64,
    /// Mean of per-token (length-normalized) gaps, kept as a secondary view.
    pub per_token_mean: f64,
    pub histogram: Vec<HistBin>,
    pub count: usize,
}

/// One evaluation of a policy checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pass_rate: f64,
    /// Response content length (trailing eos excluded) -> count.
    pub length_histogram: BTreeMap<usize, usize>,
    pub logp_gap: Option<GapStats>,
    pub sample_count: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Internal consistency: histogram mass equals the sample count and the
    /// pass rate is a valid fraction of it.
    pub fn check(&self) -> Result<()> {
        let total: usize = self.length_histogram.values().sum();
        if total != self.sample_count {
            return Err(Error::Validation(format!(
                "length histogram mass {total} != sample count {}",
                self.sample_count
            )));
        }
        if !(0.0..=1.0).contains(&self.pass_rate) {
            return Err(Error::Validation(format!(
                "pass rate {} outside [0,1]",
                self.pass_rate
            )));
        }
        let passes = self.pass_rate * self.sample_count as f64;
        if (passes - passes.round()).abs() > 1e-6 {
            return Err(Error::Validation(
                "pass rate is not consistent with an integer pass count".into(),
            ));
        }
        if let Some(gap) = &self.logp_gap {
            let mass: usize = gap.histogram.iter().map(|b| b.count).sum();
            if mass != gap.count {
                return Err(Error::Validation("gap histogram mass mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Mean verifiable reward over `n_samples_per_prompt` samples per record.
pub fn evaluate_pass_rate(
    params: &PolicyParams,
    records: &[ExampleRecord],
    n_samples_per_prompt: usize,
    max_len: usize,
    rng: &mut ChaCha12Rng,
) -> f64 {
    let detok = Detokenizer::new(params.vocab());
    let mut passes = 0.0;
    let mut total = 0usize;
    for rec in records {
        for _ in 0..n_samples_per_prompt {
            let resp = params.sample_response(&rec.prompt, max_len, rng);
            passes += verifiable_reward(&resp, &rec.constraints, &detok);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        passes / total as f64
    }
}

/// Counts of sampled response content lengths over `n` samples per prompt.
pub fn length_distribution(
    params: &PolicyParams,
    prompts: &[&Sequence],
    n: usize,
    max_len: usize,
    rng: &mut ChaCha12Rng,
) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for prompt in prompts {
        for _ in 0..n {
            let resp = params.sample_response(prompt, max_len, rng);
            *hist.entry(resp.content_len(params.vocab())).or_insert(0) += 1;
        }
    }
    hist
}

/// Total-variation distance between two length histograms.
pub fn length_tv_distance(a: &BTreeMap<usize, usize>, b: &BTreeMap<usize, usize>) -> f64 {
    let total_a: usize = a.values().sum();
    let total_b: usize = b.values().sum();
    if total_a == 0 || total_b == 0 {
        return if total_a == total_b { 0.0 } else { 1.0 };
    }
    let keys: std::collections::BTreeSet<usize> = a.keys().chain(b.keys()).copied().collect();
    0.5 * keys
        .iter()
        .map(|k| {
            let pa = *a.get(k).unwrap_or(&0) as f64 / total_a as f64;
            let pb = *b.get(k).unwrap_or(&0) as f64 / total_b as f64;
            (pa - pb).abs()
        })
        .sum::<f64>()
}

const GAP_HISTOGRAM_BINS: usize = 20;

/// Per-response total-logp gaps between student and teacher on a shared
/// response set.
pub fn logp_divergence(
    student: &PolicyParams,
    teacher: &PolicyParams,
    evals: &[(Sequence, Sequence)],
) -> Result<GapStats> {
    student.check_compatible(teacher)?;
    if evals.is_empty() {
        return Err(Error::Contract(
            "logp divergence needs at least one response".into(),
        ));
    }
    let mut gaps = Vec::with_capacity(evals.len());
    let mut per_token = Vec::with_capacity(evals.len());
    for (prompt, response) in evals {
        let gap =
            student.sequence_logprob(prompt, response) - teacher.sequence_logprob(prompt, response);
        gaps.push(gap);
        per_token.push(gap / response.len().max(1) as f64);
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
    let per_token_mean = per_token.iter().sum::<f64>() / n;

    let lo = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let histogram = if lo == hi {
        vec![HistBin {
            lo,
            hi,
            count: gaps.len(),
        }]
    } else {
        let width = (hi - lo) / GAP_HISTOGRAM_BINS as f64;
        let mut bins: Vec<HistBin> = (0..GAP_HISTOGRAM_BINS)
            .map(|i| HistBin {
                lo: lo + i as f64 * width,
                hi: lo + (i + 1) as f64 * width,
                count: 0,
            })
            .collect();
        for &g in &gaps {
            let idx = (((g - lo) / width) as usize).min(GAP_HISTOGRAM_BINS - 1);
            bins[idx].count += 1;
        }
        bins
    };
    Ok(GapStats {
        mean,
        std: var.sqrt(),
        per_token_mean,
        histogram,
        count: gaps.len(),
    })
}

/// Draw a fixed shared evaluation set of teacher responses: `n_total`
/// responses cycling over the prompts.
pub fn sample_teacher_eval_set(
    teacher: &PolicyParams,
    prompts: &[&Sequence],
    n_total: usize,
    max_len: usize,
    seed: u64,
    label: &str,
) -> Vec<(Sequence, Sequence)> {
    let mut rng = seeded_rng(seed, label);
    (0..n_total)
        .map(|i| {
            let prompt = prompts[i % prompts.len()].clone();
            let response = teacher.sample_response(&prompt, max_len, &mut rng);
            (prompt, response)
        })
        .collect()
}

/// Evaluation knobs; `teacher_samples` controls the shared gap-response set.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub samples_per_prompt: usize,
    pub teacher_samples: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// Full evaluation of a student checkpoint: pass rate and length histogram
/// from student samples, gap statistics against the teacher when one is
/// given.
pub fn evaluate(
    student: &PolicyParams,
    teacher: Option<&PolicyParams>,
    records: &[ExampleRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one record".into(),
        ));
    }
    let detok = Detokenizer::new(student.vocab());
    let mut rng = seeded_rng(cfg.seed, "eval/samples");
    let mut passes = 0usize;
    let mut length_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut sample_count = 0usize;
    for rec in records {
        for _ in 0..cfg.samples_per_prompt {
            let resp = student.sample_response(&rec.prompt, cfg.max_len, &mut rng);
            if verifiable_reward(&resp, &rec.constraints, &detok) == 1.0 {
                passes += 1;
            }
            *length_histogram
                .entry(resp.content_len(student.vocab()))
                .or_insert(0) += 1;
            sample_count += 1;
        }
    }
    let logp_gap = match teacher {
        Some(teacher) => {
            let prompts: Vec<&Sequence> = records.iter().map(|r| &r.prompt).collect();
            let evals = sample_teacher_eval_set(
                teacher,
                &prompts,
                cfg.teacher_samples,
                cfg.max_len,
                cfg.seed,
                "eval/teacher",
            );
            Some(logp_divergence(student, teacher, &evals)?)
        }
        None => None,
    };
    let report = EvalReport {
        pass_rate: passes as f64 / sample_count as f64,
        length_histogram,
        logp_gap,
        sample_count,
        seed: cfg.seed,
    };
    report.check()?;
    Ok(report)
}

/// Write `eval_report.json` plus CSV histograms next to it.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("eval_report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut lengths = String::from("length,count\n");
    for (len, count) in &report.length_histogram {
        lengths.push_str(&format!("{len},{count}\n"));
    }
    std::fs::write(dir.join("length_histogram.csv"), lengths)?;
    if let Some(gap) = &report.logp_gap {
        let mut bins = String::from("lo,hi,count\n");
        for b in &gap.histogram {
            bins.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
        }
        std::fs::write(dir.join("logp_gap_histogram.csv"), bins)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{build_teacher, generate_records, TaskSpec, TeacherSpec, T_EOS};

    fn task() -> TaskSpec {
        TaskSpec {
            n_sft: 8,
            n_pref: 8,
            seed: 21,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn always_failing_policy_scores_zero() {
        let task = task();
        let vocab = task.vocabulary().unwrap();
        let mut eos_only = PolicyParams::uniform(vocab, task.context_order).unwrap();
        for state in 0..eos_only.n_states() {
            eos_only.set_logit(state, T_EOS, 30.0);
        }
        let records = generate_records(&task, 6, "gen-sft").unwrap();
        let mut rng = seeded_rng(1, "t");
        let rate = evaluate_pass_rate(&eos_only, &records, 4, task.max_response_len, &mut rng);
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn teacher_pass_rate_close_to_target() {
        let task = task();
        let spec = TeacherSpec::default();
        let teacher = build_teacher(&spec, &task).unwrap();
        let records = generate_records(&task, 40, "gen-sft").unwrap();
        let mut rng = seeded_rng(2, "t");
        let rate = evaluate_pass_rate(&teacher, &records, 16, task.max_response_len, &mut rng);
        let n = (40 * 16) as f64;
        let sigma = (spec.p_sat * (1.0 - spec.p_sat) / n).sqrt();
        assert!(rate >= spec.p_sat - 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn pass_rate_deterministic_given_seed() {
        let task = task();
        let teacher = build_teacher(&TeacherSpec::default(), &task).unwrap();
        let records = generate_records(&task, 10, "gen-sft").unwrap();
        let a = evaluate_pass_rate(&teacher, &records, 4, 6, &mut seeded_rng(7, "x"));
        let b = evaluate_pass_rate(&teacher, &records, 4, 6, &mut seeded_rng(7, "x"));
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_policy_has_single_length_bin() {
        let task = task();
        let vocab = task.vocabulary().unwrap();
        let mut p = PolicyParams::uniform(vocab, task.context_order).unwrap();
        for state in 0..p.n_states() {
            p.set_logit(state, T_EOS, 40.0);
        }
        let records = generate_records(&task, 4, "gen-sft").unwrap();
        let prompts: Vec<&Sequence> = records.iter().map(|r| &r.prompt).collect();
        let hist = length_distribution(&p, &prompts, 5, 6, &mut seeded_rng(3, "t"));
        assert_eq!(hist.len(), 1);
        assert_eq!(hist.get(&0), Some(&20));
    }

    #[test]
    fn length_histogram_mass_is_conserved() {
        let task = task();
        let teacher = build_teacher(&TeacherSpec::default(), &task).unwrap();
        let records = generate_records(&task, 5, "gen-sft").unwrap();
        let prompts: Vec<&Sequence> = records.iter().map(|r| &r.prompt).collect();
        let hist = length_distribution(&teacher, &prompts, 7, 6, &mut seeded_rng(4, "t"));
        let total: usize = hist.values().sum();
        assert_eq!(total, 35);
    }

    #[test]
    fn tv_distance_is_symmetric_and_zero_on_self() {
        let task = task();
        let teacher = build_teacher(&TeacherSpec::default(), &task).unwrap();
        let records = generate_records(&task, 5, "gen-sft").unwrap();
        let prompts: Vec<&Sequence> = records.iter().map(|r| &r.prompt).collect();
        let a = length_distribution(&teacher, &prompts, 7, 6, &mut seeded_rng(5, "a"));
        let b = length_distribution(&teacher, &prompts, 7, 6, &mut seeded_rng(6, "b"));
        assert_eq!(length_tv_distance(&a, &a), 0.0);
        assert!((length_tv_distance(&a, &b) - length_tv_distance(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn identical_policies_have_zero_gap() {
        let task = task();
        let teacher = build_teacher(&TeacherSpec::default(), &task).unwrap();
        let records = generate_records(&task, 4, "gen-sft").unwrap();
        let prompts: Vec<&Sequence> = records.iter().map(|r| &r.prompt).collect();
        let evals = sample_teacher_eval_set(&teacher, &prompts, 50, 6, 9, "gap");
        let stats = logp_divergence(&teacher, &teacher, &evals).unwrap();
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.std, 0.0);
    }

    #[test]
    fn gap_sign_flips_when_arguments_swap() {
        let task = task();
        let teacher = build_teacher(&TeacherSpec::default(), &task).unwrap();
        let vocab = task.vocabulary().unwrap();
        let student =
            PolicyParams::random(vocab, task.context_order, 0.5, &mut seeded_rng(10, "s")).unwrap();
        let records = generate_records(&task, 4, "gen-sft").unwrap();
        let prompts: Vec<&Sequence> = records.iter().map(|r| &r.prompt).collect();
        let evals = sample_teacher_eval_set(&teacher, &prompts, 60, 6, 9, "gap");
        let ab = logp_divergence(&student, &teacher, &evals).unwrap();
        let ba = logp_divergence(&teacher, &student, &evals).unwrap();
        assert!((ab.mean + ba.mean).abs() < 1e-12);
        assert!((ab.std - ba.std).abs() < 1e-12);
    }

    #[test]
    fn full_report_is_consistent_and_reproducible() {
        let task = task();
        let teacher = build_teacher(&TeacherSpec::default(), &task).unwrap();
        let records = generate_records(&task, 6, "gen-sft").unwrap();
        let cfg = EvalConfig {
            samples_per_prompt: 8,
            teacher_samples: 40,
            max_len: 6,
            seed: 13,
        };
        let a = evaluate(&teacher, Some(&teacher), &records, &cfg).unwrap();
        let b = evaluate(&teacher, Some(&teacher), &records, &cfg).unwrap();
        a.check().unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.sample_count, 48);
    }

    #[test]
    fn report_files_round_trip() {
        let task = task();
        let teacher = build_teacher(&TeacherSpec::default(), &task).unwrap();
        let records = generate_records(&task, 4, "gen-sft").unwrap();
        let cfg = EvalConfig {
            samples_per_prompt: 4,
            teacher_samples: 20,
            max_len: 6,
            seed: 17,
        };
        let report = evaluate(&teacher, Some(&teacher), &records, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        let loaded: EvalReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("eval_report.json")).unwrap(),
        )
        .unwrap();
        loaded.check().unwrap();
        assert_eq!(loaded.pass_rate, report.pass_rate);
        assert!(dir.path().join("length_histogram.csv").exists());
        assert!(dir.path().join("logp_gap_histogram.csv").exists());
    }
}
