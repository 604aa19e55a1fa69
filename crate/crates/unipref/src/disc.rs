//! Deterministic discriminators, the score-to-coefficient transform, and the
//! adversarial gradient contribution.
//!
//! A discriminator scores how similar a student response is to a teacher
//! response for the same prompt. The raw signed score `r` (larger = more
//! similar, `0` = indistinguishable) is squashed to a similarity
//! `p = sigmoid(r)` and then to a coefficient `coef = 1 - 8 (p - 0.5)^2`,
//! which peaks at 1 exactly when the two responses are indistinguishable and
//! falls toward -1 as they become easy to tell apart in either direction.
//! The discriminator itself is never updated during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GradTable, PolicyParams};
use crate::vocab::{Sequence, Vocabulary};

/// Raw distance, sigmoid similarity, and adversarial coefficient for one
/// scored response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorScore {
    pub raw: f64,
    pub similarity: f64,
    pub coef: f64,
}

impl DiscriminatorScore {
    pub fn from_raw(raw: f64) -> Self {
        let similarity = sigmoid(raw);
        DiscriminatorScore {
            raw,
            similarity,
            coef: coef_transform(raw),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `coef = 1 - 8 (sigmoid(r) - 0.5)^2`, in `[-1, 1]` for all finite `r`, with
/// the maximum 1 attained exactly at `r = 0` and the limits at -1.
pub fn coef_transform(raw: f64) -> f64 {
    let p = sigmoid(raw);
    1.0 - 8.0 * (p - 0.5) * (p - 0.5)
}

/// Feature weights for the feature-distance discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub length: f64,
    pub counts: f64,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        FeatureWeights {
            length: 1.0,
            counts: 1.0,
        }
    }
}

/// The discriminator family. All variants are deterministic oracles; the
/// scoring policy of `LogLikelihoodOracle` stays frozen for a whole run.
#[derive(Debug, Clone)]
pub enum DiscriminatorKind {
    /// `r = -|mean_logprob(student) - mean_logprob(teacher)| * scale` under a
    /// frozen scoring policy.
    LogLikelihoodOracle { scorer: PolicyParams, scale: f64 },
    /// Negated weighted L1 distance between (length, per-token counts)
    /// feature vectors.
    FeatureDistance {
        weights: FeatureWeights,
        vocab: Vocabulary,
    },
    /// Scores both responses against a ground-truth reference and compares
    /// the two scores instead of comparing the responses directly.
    ReferenceAnchored { inner: Box<DiscriminatorKind> },
}

pub const DEFAULT_ORACLE_SCALE: f64 = 4.0;

impl DiscriminatorKind {
    pub fn anchored(self) -> Self {
        DiscriminatorKind::ReferenceAnchored {
            inner: Box::new(self),
        }
    }
}

fn check_nonempty(name: &str, response: &Sequence) -> Result<()> {
    if response.is_empty() {
        Err(Error::Contract(format!("{name} response is empty")))
    } else {
        Ok(())
    }
}

/// Signed similarity score between two responses; larger (less negative)
/// means more similar, and `r = 0` when the responses coincide.
/// `ReferenceAnchored` delegates to its inner kind (the anchoring happens in
/// [`reference_anchored_coef`]).
pub fn raw_score(
    kind: &DiscriminatorKind,
    prompt: &Sequence,
    teacher_response: &Sequence,
    student_response: &Sequence,
) -> Result<f64> {
    check_nonempty("teacher", teacher_response)?;
    check_nonempty("student", student_response)?;
    match kind {
        DiscriminatorKind::LogLikelihoodOracle { scorer, scale } => {
            let mean_lp =
                |resp: &Sequence| scorer.sequence_logprob(prompt, resp) / resp.len() as f64;
            Ok(-(mean_lp(student_response) - mean_lp(teacher_response)).abs() * scale)
        }
        DiscriminatorKind::FeatureDistance { weights, vocab } => {
            let ft = response_features(teacher_response, vocab);
            let fs = response_features(student_response, vocab);
            let mut dist = weights.length * (ft.0 - fs.0).abs();
            for (a, b) in ft.1.iter().zip(fs.1.iter()) {
                dist += weights.counts * (a - b).abs();
            }
            Ok(-dist)
        }
        DiscriminatorKind::ReferenceAnchored { inner } => {
            raw_score(inner, prompt, teacher_response, student_response)
        }
    }
}

fn response_features(response: &Sequence, vocab: &Vocabulary) -> (f64, Vec<f64>) {
    let content = response.content_tokens(vocab);
    let mut counts = vec![0.0; vocab.size()];
    for &t in content {
        counts[t] += 1.0;
    }
    (content.len() as f64, counts)
}

/// Score and transform in one step.
pub fn score(
    kind: &DiscriminatorKind,
    prompt: &Sequence,
    teacher_response: &Sequence,
    student_response: &Sequence,
) -> Result<DiscriminatorScore> {
    Ok(DiscriminatorScore::from_raw(raw_score(
        kind,
        prompt,
        teacher_response,
        student_response,
    )?))
}

/// Ground-truth-anchored coefficient: score teacher and student against the
/// gt reference separately and transform the score difference.
pub fn reference_anchored_coef(
    inner: &DiscriminatorKind,
    prompt: &Sequence,
    gt_response: &Sequence,
    teacher_response: &Sequence,
    student_response: &Sequence,
) -> Result<DiscriminatorScore> {
    check_nonempty("gt", gt_response)?;
    let r_teacher = raw_score(inner, prompt, gt_response, teacher_response)?;
    let r_student = raw_score(inner, prompt, gt_response, student_response)?;
    Ok(DiscriminatorScore::from_raw(r_teacher - r_student))
}

/// Dispatch scoring for one sampled response: anchored kinds require the
/// record's ground truth, plain kinds compare student to teacher directly.
pub fn response_score(
    kind: &DiscriminatorKind,
    prompt: &Sequence,
    gt_response: Option<&Sequence>,
    teacher_response: &Sequence,
    student_response: &Sequence,
) -> Result<DiscriminatorScore> {
    match kind {
        DiscriminatorKind::ReferenceAnchored { inner } => {
            let gt = gt_response.ok_or_else(|| {
                Error::Contract("anchored discriminator requires a gt response".into())
            })?;
            reference_anchored_coef(inner, prompt, gt, teacher_response, student_response)
        }
        _ => score(kind, prompt, teacher_response, student_response),
    }
}

/// Score-function estimate of the adversarial loss gradient for one sampled
/// response: `-(coef - baseline) * d(log pi(response | prompt))/d(logits)`.
/// The baseline is normally the batch mean of the coefficients.
pub fn adversarial_gradient(
    params: &PolicyParams,
    prompt: &Sequence,
    student_response: &Sequence,
    coef: f64,
    baseline: f64,
) -> GradTable {
    let mut table = GradTable::zeros_like(params);
    accumulate_adversarial_gradient(
        params,
        prompt,
        student_response,
        coef,
        baseline,
        1.0,
        &mut table,
    );
    table
}

/// Weighted accumulation form of [`adversarial_gradient`].
pub fn accumulate_adversarial_gradient(
    params: &PolicyParams,
    prompt: &Sequence,
    student_response: &Sequence,
    coef: f64,
    baseline: f64,
    weight: f64,
    table: &mut GradTable,
) {
    let w = -(coef - baseline) * weight;
    if w == 0.0 {
        return;
    }
    params.accumulate_logprob_gradient(prompt, student_response, w, table);
}
