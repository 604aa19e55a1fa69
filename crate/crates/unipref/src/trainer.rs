//! Staged training pipelines and the single-stage unified paradigm: plain
//! gradient descent over exact losses, deterministic batch scheduling,
//! checkpointing with bit-exact resumption, the per-step four-signal
//! gradient report, and the divergence-budget diagnostic against the
//! teacher.
//!
//! All randomness is derived per purpose from `(seed, stage, step, slot)`
//! labels, never from consumed shared streams. Two consequences the tests
//! rely on: equal seeds give bit-identical trajectories, and structurally
//! equivalent stages (unified at alpha boundaries, adversarial stages at
//! lambda 0) reproduce their plain counterparts exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{with_overrides, DiscKindName, TrainingConfig};
use crate::data::{BinaryLabelRecord, ExampleRecord, PreferenceRecord};
use crate::disc::{response_score, DiscriminatorKind};
use crate::error::{Error, Result};
use crate::loss::{
    agrpo_parts, asft_parts, dpo_loss, group_advantages, kto_loss, mixed_reward, sft_loss,
    unified_loss, AdvItem, GroupRollout, LossValue, RewardMode, SignalDecomposition,
};
use crate::policy::{load_checkpoint, save_checkpoint, GradTable, PolicyParams, PolicySnapshot};
use crate::rng::seeded_rng;
use crate::verify::{verifiable_reward, Detokenizer};
use crate::vocab::Sequence;

/// Training paradigms runnable as one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Sft,
    ASft,
    Grpo,
    AGrpo,
    Unified,
    Dpo,
    Kto,
}

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::Sft => "sft",
            StageKind::ASft => "a-sft",
            StageKind::Grpo => "grpo",
            StageKind::AGrpo => "a-grpo",
            StageKind::Unified => "unified",
            StageKind::Dpo => "dpo",
            StageKind::Kto => "kto",
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(
            self,
            StageKind::ASft | StageKind::AGrpo | StageKind::Unified
        )
    }
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Ok(StageKind::Sft),
            "a-sft" | "asft" => Ok(StageKind::ASft),
            "grpo" => Ok(StageKind::Grpo),
            "a-grpo" | "agrpo" => Ok(StageKind::AGrpo),
            "unified" => Ok(StageKind::Unified),
            "dpo" => Ok(StageKind::Dpo),
            "kto" => Ok(StageKind::Kto),
            other => Err(Error::Usage(format!("unknown stage kind `{other}`"))),
        }
    }
}

/// One pipeline stage: paradigm, step budget, config overrides, and the
/// reward-mixing mode for rollout stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub kind: StageKind,
    pub steps: usize,
    pub overrides: BTreeMap<String, String>,
    pub reward_mode: RewardMode,
}

impl StageSpec {
    pub fn new(kind: StageKind, steps: usize) -> Self {
        StageSpec {
            kind,
            steps,
            overrides: BTreeMap::new(),
            reward_mode: RewardMode::Rlvr,
        }
    }

    pub fn with_override(mut self, key: &str, value: impl ToString) -> Self {
        self.overrides.insert(key.to_string(), value.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Validation("stage steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// An ordered list of stages, e.g. `a-sft:200->a-grpo:800`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub stages: Vec<StageSpec>,
}

impl PipelineSpec {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Validation(
                "pipeline must have at least one stage".into(),
            ));
        }
        for s in &stages {
            s.validate()?;
        }
        Ok(PipelineSpec { stages })
    }

    /// Parse `kind[:steps]` segments joined by `->` (an arrow `→` works
    /// too); `default_steps` applies to segments without a step count.
    pub fn parse(text: &str, default_steps: usize) -> Result<Self> {
        let normalized = text.replace('→', "->");
        let mut stages = Vec::new();
        for segment in normalized.split("->") {
            let segment = segment.trim();
            if segment.is_empty() {
                return Err(Error::Usage(format!("empty stage in pipeline `{text}`")));
            }
            let (name, steps) = match segment.split_once(':') {
                Some((name, steps)) => {
                    let steps: usize = steps.trim().parse().map_err(|_| {
                        Error::Usage(format!("bad step count in pipeline segment `{segment}`"))
                    })?;
                    (name.trim(), steps)
                }
                None => (segment, default_steps),
            };
            stages.push(StageSpec::new(name.parse()?, steps));
        }
        PipelineSpec::new(stages)
    }
}

/// Data pools available to a run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    /// Demonstration records (ground truth required by SFT-family stages).
    pub sft: Vec<ExampleRecord>,
    /// Rollout prompt pool for the preference side.
    pub pref: Vec<ExampleRecord>,
    pub preference: Vec<PreferenceRecord>,
    pub binary: Vec<BinaryLabelRecord>,
}

/// Norms and pairwise cosines of the four learning signals at one step,
/// together with the recomposition check against the applied update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientReport {
    pub step: usize,
    pub imitation_norm: f64,
    pub preference_norm: f64,
    pub adv_sft_norm: f64,
    pub adv_pref_norm: f64,
    pub total_norm: f64,
    pub cosines: BTreeMap<String, f64>,
    pub recomposition_error: f64,
}

const RECOMPOSITION_TOL: f64 = 1e-9;

/// Verify that the independently computed signals recompose to the applied
/// gradient and summarize them.
pub fn gradient_decomposition(
    step: usize,
    signals: &SignalDecomposition,
    applied: &GradTable,
) -> Result<GradientReport> {
    let recomposed = signals.recomposed();
    let err = recomposed.max_abs_diff(applied);
    if err > RECOMPOSITION_TOL {
        return Err(Error::Numerical {
            message: format!("gradient recomposition error {err} exceeds {RECOMPOSITION_TOL}"),
            dump: None,
        });
    }
    let named: [(&str, &GradTable); 4] = [
        ("imitation", &signals.imitation),
        ("preference", &signals.preference),
        ("adv_sft", &signals.adv_sft),
        ("adv_pref", &signals.adv_pref),
    ];
    let mut cosines = BTreeMap::new();
    for i in 0..named.len() {
        for j in (i + 1)..named.len() {
            cosines.insert(
                format!("{}/{}", named[i].0, named[j].0),
                named[i].1.cosine(named[j].1),
            );
        }
    }
    Ok(GradientReport {
        step,
        imitation_norm: signals.imitation.l2_norm(),
        preference_norm: signals.preference.l2_norm(),
        adv_sft_norm: signals.adv_sft.l2_norm(),
        adv_pref_norm: signals.adv_pref.l2_norm(),
        total_norm: applied.l2_norm(),
        cosines,
        recomposition_error: err,
    })
}

/// Drift diagnostic: estimated divergence from the teacher and the fraction
/// of prompts over the budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlDiagnostic {
    pub mean_kl: f64,
    pub violation_fraction: f64,
    pub epsilon: f64,
}

/// Mean per-prompt divergence from the teacher, estimated as the average
/// per-position conditional KL along teacher-sampled responses.
#[allow(clippy::too_many_arguments)]
pub fn constraint_diagnostic(
    params: &PolicyParams,
    teacher: &PolicyParams,
    prompts: &[&Sequence],
    epsilon: f64,
    samples_per_prompt: usize,
    max_len: usize,
    seed: u64,
    label: &str,
) -> Result<KlDiagnostic> {
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Ok(KlDiagnostic {
            mean_kl: 0.0,
            violation_fraction: 0.0,
            epsilon,
        });
    }
    let mut total = 0.0;
    let mut violations = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        let mut rng = seeded_rng(seed, &format!("{label}/diag/{i}"));
        let mut prompt_kl = 0.0;
        for _ in 0..samples_per_prompt {
            let resp = teacher.sample_response(prompt, max_len, &mut rng);
            prompt_kl += params.kl_to(teacher, prompt, &resp)?;
        }
        prompt_kl /= samples_per_prompt as f64;
        total += prompt_kl;
        if prompt_kl > epsilon {
            violations += 1;
        }
    }
    Ok(KlDiagnostic {
        mean_kl: total / prompts.len() as f64,
        violation_fraction: violations as f64 / prompts.len() as f64,
        epsilon,
    })
}

/// One JSON object per training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage_index: usize,
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub pass_rate: Option<f64>,
    pub kl_diag: Option<KlDiagnostic>,
    pub signals: Option<GradientReport>,
}

/// Slice sizes of a mixed batch: `round(batch_size * sft_fraction)`
/// demonstrations, the remainder rollout prompts.
pub fn mixed_batch_sizes(batch_size: usize, sft_fraction: f64) -> (usize, usize) {
    let sft = ((batch_size as f64 * sft_fraction).round() as usize).min(batch_size);
    (sft, batch_size - sft)
}

fn epoch_permutation(
    seed: u64,
    stage_index: usize,
    pool: &str,
    epoch: usize,
    len: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seeded_rng(seed, &format!("s{stage_index}/{pool}/epoch{epoch}"));
    order.shuffle(&mut rng);
    order
}

/// Deterministic without-replacement scheduling: item positions
/// `first..first+count` map through per-epoch shuffles of the pool, so every
/// pool item appears exactly once per epoch.
pub fn scheduled_indices(
    seed: u64,
    stage_index: usize,
    pool: &str,
    pool_len: usize,
    first: usize,
    count: usize,
) -> Vec<usize> {
    assert!(pool_len > 0, "cannot schedule over an empty pool");
    let mut out = Vec::with_capacity(count);
    let mut cached_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for q in first..first + count {
        let epoch = q / pool_len;
        if epoch != cached_epoch {
            perm = epoch_permutation(seed, stage_index, pool, epoch, pool_len);
            cached_epoch = epoch;
        }
        out.push(perm[q % pool_len]);
    }
    out
}

/// Indices of one mixed batch drawn without replacement (per epoch) from the
/// demonstration and rollout-prompt pools.
pub fn build_mixed_batch(
    seed: u64,
    stage_index: usize,
    step: usize,
    sft_len: usize,
    pref_len: usize,
    batch_size: usize,
    sft_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n_sft, n_pref) = mixed_batch_sizes(batch_size, sft_fraction);
    if n_sft > 0 && sft_len == 0 {
        return Err(Error::Contract(
            "mixed batch needs a nonempty demonstration pool".into(),
        ));
    }
    if n_pref > 0 && pref_len == 0 {
        return Err(Error::Contract(
            "mixed batch needs a nonempty prompt pool".into(),
        ));
    }
    let sft = if n_sft > 0 {
        scheduled_indices(seed, stage_index, "sft", sft_len, step * n_sft, n_sft)
    } else {
        Vec::new()
    };
    let pref = if n_pref > 0 {
        scheduled_indices(seed, stage_index, "pref", pref_len, step * n_pref, n_pref)
    } else {
        Vec::new()
    };
    Ok((sft, pref))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointState {
    seed: u64,
    stage_index: usize,
    stage_kind: StageKind,
    /// First step the resumed run should execute.
    next_step: usize,
}

/// A mid-pipeline restart point loaded from a checkpoint.
#[derive(Debug, Clone)]
pub struct ResumePoint {
    pub stage_index: usize,
    pub next_step: usize,
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
}

/// Result of one stage.
#[derive(Debug)]
pub struct StageRun {
    pub params: PolicyParams,
    pub metrics: Vec<StepMetrics>,
}

/// Result of a whole pipeline.
#[derive(Debug)]
pub struct PipelineRun {
    pub params: PolicyParams,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Owns the run inputs and executes stages/pipelines.
pub struct Trainer {
    pub config: TrainingConfig,
    pub data: TrainData,
    pub teacher: Option<PolicyParams>,
    /// Sampling cap for rollouts, student samples, and diagnostics.
    pub max_response_len: usize,
}

fn stage_lr(cfg: &TrainingConfig, kind: StageKind) -> f64 {
    match kind {
        StageKind::Sft | StageKind::ASft | StageKind::Dpo | StageKind::Kto => cfg.lr_sft,
        StageKind::Grpo | StageKind::AGrpo => cfg.lr_rl,
        StageKind::Unified => cfg.lr_unified,
    }
}

impl Trainer {
    pub fn new(
        config: TrainingConfig,
        data: TrainData,
        teacher: Option<PolicyParams>,
        max_response_len: usize,
    ) -> Self {
        Trainer {
            config,
            data,
            teacher,
            max_response_len,
        }
    }

    fn discriminator(
        &self,
        cfg: &TrainingConfig,
        vocab: &crate::vocab::Vocabulary,
    ) -> Result<DiscriminatorKind> {
        let base = match cfg.disc_kind {
            DiscKindName::Loglik => {
                let teacher = self.teacher.as_ref().ok_or_else(|| Error::Config {
                    field: "disc.kind".into(),
                    message: "log-likelihood discriminator needs a teacher policy".into(),
                })?;
                DiscriminatorKind::LogLikelihoodOracle {
                    scorer: teacher.clone(),
                    scale: cfg.disc_scale,
                }
            }
            DiscKindName::Feature => DiscriminatorKind::FeatureDistance {
                weights: crate::disc::FeatureWeights::default(),
                vocab: vocab.clone(),
            },
        };
        Ok(if cfg.disc_anchored {
            base.anchored()
        } else {
            base
        })
    }

    fn teacher_response_for<'a>(&self, record: &'a ExampleRecord) -> Result<&'a Sequence> {
        record.teacher_response.as_ref().ok_or_else(|| {
            Error::Contract("adversarial stage needs teacher_response on every record".into())
        })
    }

    fn sft_pairs<'a>(&'a self, indices: &[usize]) -> Result<Vec<(&'a Sequence, &'a Sequence)>> {
        indices
            .iter()
            .map(|&i| {
                let rec = &self.data.sft[i];
                let gt = rec
                    .gt_response
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("sft record {i} has no gt_response")))?;
                Ok((&rec.prompt, gt))
            })
            .collect()
    }

    /// Sample one student response per demonstration record and score it.
    #[allow(clippy::type_complexity)]
    fn student_items(
        &self,
        params: &PolicyParams,
        cfg: &TrainingConfig,
        disc: &DiscriminatorKind,
        indices: &[usize],
        stage_index: usize,
        step: usize,
    ) -> Result<(Vec<(usize, Sequence, f64)>, f64)> {
        let vocab = params.vocab();
        let detok = Detokenizer::new(vocab);
        let mut out = Vec::with_capacity(indices.len());
        let mut passes = 0.0;
        for (slot, &i) in indices.iter().enumerate() {
            let rec = &self.data.sft[i];
            let mut rng = seeded_rng(cfg.seed, &format!("s{stage_index}/t{step}/student/{slot}"));
            let student = params.sample_response(&rec.prompt, self.max_response_len, &mut rng);
            passes += verifiable_reward(&student, &rec.constraints, &detok);
            let teacher_resp = self.teacher_response_for(rec)?;
            let score = response_score(
                disc,
                &rec.prompt,
                rec.gt_response.as_ref(),
                teacher_resp,
                &student,
            )?;
            out.push((i, student, score.coef));
        }
        let pass_rate = passes / indices.len().max(1) as f64;
        Ok((out, pass_rate))
    }

    /// Sample G responses per prompt under the behavior snapshot, score
    /// rewards (with optional reward mixing), and normalize advantages.
    #[allow(clippy::too_many_arguments)]
    fn build_rollouts(
        &self,
        cfg: &TrainingConfig,
        old: &PolicySnapshot,
        indices: &[usize],
        stage_index: usize,
        step: usize,
        disc: Option<&DiscriminatorKind>,
        need_coefs: bool,
        mode: RewardMode,
    ) -> Result<(Vec<GroupRollout>, f64)> {
        let vocab = old.params().vocab();
        let detok = Detokenizer::new(vocab);
        let needs_disc = need_coefs || mode != RewardMode::Rlvr;
        let mut rollouts = Vec::with_capacity(indices.len());
        let mut base_pass = 0.0;
        let mut n_responses = 0usize;
        for (slot, &i) in indices.iter().enumerate() {
            let rec = &self.data.pref[i];
            let mut rng = seeded_rng(cfg.seed, &format!("s{stage_index}/t{step}/rollout/{slot}"));
            let mut responses = Vec::with_capacity(cfg.group_size);
            let mut rewards = Vec::with_capacity(cfg.group_size);
            let mut old_logprobs = Vec::with_capacity(cfg.group_size);
            let mut coefs = need_coefs.then(Vec::new);
            for _ in 0..cfg.group_size {
                let resp =
                    old.params()
                        .sample_response(&rec.prompt, self.max_response_len, &mut rng);
                let base = verifiable_reward(&resp, &rec.constraints, &detok);
                base_pass += base;
                n_responses += 1;
                let reward = if needs_disc {
                    let disc = disc.ok_or_else(|| {
                        Error::Contract("reward mixing requires a discriminator".into())
                    })?;
                    let teacher_resp = self.teacher_response_for(rec)?;
                    let score = response_score(
                        disc,
                        &rec.prompt,
                        rec.gt_response.as_ref(),
                        teacher_resp,
                        &resp,
                    )?;
                    if let Some(cs) = coefs.as_mut() {
                        cs.push(score.coef);
                    }
                    mixed_reward(base, score.raw, score.coef, mode)
                } else {
                    base
                };
                let mut lps = Vec::with_capacity(resp.len());
                old.params()
                    .visit_response(&rec.prompt, &resp, |state, token, _| {
                        lps.push(old.params().token_logprob(state, token));
                    });
                responses.push(resp);
                rewards.push(reward);
                old_logprobs.push(lps);
            }
            let advantages = group_advantages(&rewards, cfg.std_eps);
            rollouts.push(GroupRollout {
                prompt: rec.prompt.clone(),
                responses,
                rewards,
                advantages,
                old_logprobs,
                coefs,
            });
        }
        Ok((rollouts, base_pass / n_responses.max(1) as f64))
    }

    fn diag_prompts(&self) -> Vec<&Sequence> {
        let pool = if self.data.pref.is_empty() {
            &self.data.sft
        } else {
            &self.data.pref
        };
        pool.iter().take(8).map(|r| &r.prompt).collect()
    }

    /// Run one stage from `start_step`, reusing `ref_override` as the frozen
    /// reference when resuming mid-stage.
    #[allow(clippy::too_many_arguments)]
    pub fn run_stage_from(
        &self,
        mut params: PolicyParams,
        stage: &StageSpec,
        stage_index: usize,
        start_step: usize,
        ref_override: Option<PolicyParams>,
        out: Option<&Path>,
    ) -> Result<StageRun> {
        stage.validate()?;
        let cfg = with_overrides(&self.config, &stage.overrides)?;
        let lr = stage_lr(&cfg, stage.kind);
        let reference = ref_override.unwrap_or_else(|| params.clone());
        let needs_adv = stage.kind.is_adversarial() && cfg.lambda_adv > 0.0;
        let needs_disc = needs_adv
            || (matches!(
                stage.kind,
                StageKind::Grpo | StageKind::AGrpo | StageKind::Unified
            ) && stage.reward_mode != RewardMode::Rlvr);
        if stage.kind.is_adversarial() && self.teacher.is_none() && cfg.lambda_adv > 0.0 {
            return Err(Error::Config {
                field: "pipeline".into(),
                message: format!("stage `{}` needs a teacher policy", stage.kind.name()),
            });
        }
        let disc = if needs_disc {
            Some(self.discriminator(&cfg, params.vocab())?)
        } else {
            None
        };

        let mut metrics = Vec::with_capacity(stage.steps.saturating_sub(start_step));
        for step in start_step..stage.steps {
            let (loss_value, pass_rate, signals): (
                LossValue,
                Option<f64>,
                Option<SignalDecomposition>,
            ) = match stage.kind {
                StageKind::Sft => {
                    if self.data.sft.is_empty() {
                        return Err(Error::Contract("sft stage needs demonstration data".into()));
                    }
                    let idx = scheduled_indices(
                        cfg.seed,
                        stage_index,
                        "sft",
                        self.data.sft.len(),
                        step * cfg.batch_size,
                        cfg.batch_size,
                    );
                    let pairs = self.sft_pairs(&idx)?;
                    (sft_loss(&params, &pairs)?, None, None)
                }
                StageKind::ASft => {
                    if self.data.sft.is_empty() {
                        return Err(Error::Contract(
                            "a-sft stage needs demonstration data".into(),
                        ));
                    }
                    let idx = scheduled_indices(
                        cfg.seed,
                        stage_index,
                        "sft",
                        self.data.sft.len(),
                        step * cfg.batch_size,
                        cfg.batch_size,
                    );
                    let pairs = self.sft_pairs(&idx)?;
                    if let Some(disc) = disc.as_ref() {
                        let (students, pass) =
                            self.student_items(&params, &cfg, disc, &idx, stage_index, step)?;
                        let items: Vec<AdvItem<'_>> = students
                            .iter()
                            .map(|(i, student, coef)| AdvItem {
                                prompt: &self.data.sft[*i].prompt,
                                response: student,
                                coef: *coef,
                            })
                            .collect();
                        let parts = asft_parts(&params, &pairs, &items, cfg.lambda_adv)?;
                        let mut adv_sft = parts.adv_gradient.clone();
                        adv_sft.scale(cfg.lambda_adv);
                        let zeros = GradTable::zeros_like(&params);
                        let signals = SignalDecomposition {
                            imitation: parts.sft.gradient.clone(),
                            preference: zeros.clone(),
                            adv_sft,
                            adv_pref: zeros,
                        };
                        (parts.combined, Some(pass), Some(signals))
                    } else {
                        (sft_loss(&params, &pairs)?, None, None)
                    }
                }
                StageKind::Grpo | StageKind::AGrpo => {
                    if self.data.pref.is_empty() {
                        return Err(Error::Contract("rollout stage needs a prompt pool".into()));
                    }
                    let idx = scheduled_indices(
                        cfg.seed,
                        stage_index,
                        "pref",
                        self.data.pref.len(),
                        step * cfg.batch_size,
                        cfg.batch_size,
                    );
                    let old = PolicySnapshot::new(params.clone());
                    let need_coefs = stage.kind == StageKind::AGrpo && cfg.lambda_adv > 0.0;
                    let (rollouts, pass) = self.build_rollouts(
                        &cfg,
                        &old,
                        &idx,
                        stage_index,
                        step,
                        disc.as_ref(),
                        need_coefs,
                        stage.reward_mode,
                    )?;
                    let parts = agrpo_parts(
                        &params,
                        &old,
                        &reference,
                        &rollouts,
                        cfg.clip_eps,
                        cfg.beta_kl,
                        if stage.kind == StageKind::AGrpo {
                            cfg.lambda_adv
                        } else {
                            0.0
                        },
                    )?;
                    let signals = if stage.kind == StageKind::AGrpo {
                        let mut adv_pref = parts.adv_gradient.clone();
                        adv_pref.scale(cfg.lambda_adv);
                        let zeros = GradTable::zeros_like(&params);
                        Some(SignalDecomposition {
                            imitation: zeros.clone(),
                            preference: parts.grpo.gradient.clone(),
                            adv_sft: zeros,
                            adv_pref,
                        })
                    } else {
                        None
                    };
                    (parts.combined, Some(pass), signals)
                }
                StageKind::Unified => {
                    let (sft_idx, pref_idx) = build_mixed_batch(
                        cfg.seed,
                        stage_index,
                        step,
                        self.data.sft.len(),
                        self.data.pref.len(),
                        cfg.batch_size,
                        cfg.sft_fraction,
                    )?;
                    if cfg.alpha > 0.0 && sft_idx.is_empty() {
                        return Err(Error::Contract(
                            "unified stage with alpha > 0 needs a demonstration slice".into(),
                        ));
                    }
                    if cfg.alpha < 1.0 && pref_idx.is_empty() {
                        return Err(Error::Contract(
                            "unified stage with alpha < 1 needs a prompt slice".into(),
                        ));
                    }
                    let pairs = self.sft_pairs(&sft_idx)?;
                    let (students, student_pass) = if cfg.alpha > 0.0 {
                        if let Some(disc) = disc.as_ref() {
                            let (s, p) = self.student_items(
                                &params,
                                &cfg,
                                disc,
                                &sft_idx,
                                stage_index,
                                step,
                            )?;
                            (s, Some(p))
                        } else {
                            (Vec::new(), None)
                        }
                    } else {
                        (Vec::new(), None)
                    };
                    let items: Vec<AdvItem<'_>> = students
                        .iter()
                        .map(|(i, student, coef)| AdvItem {
                            prompt: &self.data.sft[*i].prompt,
                            response: student,
                            coef: *coef,
                        })
                        .collect();
                    let old = PolicySnapshot::new(params.clone());
                    let (rollouts, rollout_pass) = if cfg.alpha < 1.0 {
                        let (r, p) = self.build_rollouts(
                            &cfg,
                            &old,
                            &pref_idx,
                            stage_index,
                            step,
                            disc.as_ref(),
                            cfg.lambda_adv > 0.0,
                            stage.reward_mode,
                        )?;
                        (r, Some(p))
                    } else {
                        (Vec::new(), None)
                    };
                    let outcome = unified_loss(
                        &params,
                        &old,
                        &reference,
                        &pairs,
                        &items,
                        &rollouts,
                        cfg.alpha,
                        cfg.lambda_adv,
                        cfg.clip_eps,
                        cfg.beta_kl,
                    )?;
                    (
                        outcome.loss,
                        rollout_pass.or(student_pass),
                        Some(outcome.signals),
                    )
                }
                StageKind::Dpo => {
                    if self.data.preference.is_empty() {
                        return Err(Error::Contract("dpo stage needs preference pairs".into()));
                    }
                    let idx = scheduled_indices(
                        cfg.seed,
                        stage_index,
                        "dpo",
                        self.data.preference.len(),
                        step * cfg.batch_size,
                        cfg.batch_size,
                    );
                    let batch: Vec<PreferenceRecord> = idx
                        .iter()
                        .map(|&i| self.data.preference[i].clone())
                        .collect();
                    (
                        dpo_loss(&params, &reference, &batch, cfg.beta_dpo)?,
                        None,
                        None,
                    )
                }
                StageKind::Kto => {
                    if self.data.binary.is_empty() {
                        return Err(Error::Contract("kto stage needs labeled examples".into()));
                    }
                    let idx = scheduled_indices(
                        cfg.seed,
                        stage_index,
                        "kto",
                        self.data.binary.len(),
                        step * cfg.batch_size,
                        cfg.batch_size,
                    );
                    let batch: Vec<BinaryLabelRecord> =
                        idx.iter().map(|&i| self.data.binary[i].clone()).collect();
                    (
                        kto_loss(&params, &reference, &batch, cfg.beta_dpo, cfg.loss_aversion)?,
                        None,
                        None,
                    )
                }
            };

            if !loss_value.is_finite() || !params.all_finite() {
                let dump = self.write_dump(out, stage, stage_index, step, &params, &loss_value)?;
                return Err(Error::Numerical {
                    message: format!("non-finite loss at stage {} step {step}", stage.kind.name()),
                    dump,
                });
            }

            let report = signals
                .as_ref()
                .map(|s| gradient_decomposition(step, s, &loss_value.gradient))
                .transpose()?;

            params.gradient_step(&loss_value.gradient, lr);
            if !params.all_finite() {
                let dump = self.write_dump(out, stage, stage_index, step, &params, &loss_value)?;
                return Err(Error::Numerical {
                    message: format!(
                        "non-finite parameters after stage {} step {step}",
                        stage.kind.name()
                    ),
                    dump,
                });
            }

            let kl_diag = match (&self.teacher, cfg.diag_interval) {
                (Some(teacher), interval) if interval > 0 && step % interval == 0 => {
                    Some(constraint_diagnostic(
                        &params,
                        teacher,
                        &self.diag_prompts(),
                        cfg.constraint_tol,
                        4,
                        self.max_response_len,
                        cfg.seed,
                        &format!("s{stage_index}/t{step}"),
                    )?)
                }
                _ => None,
            };

            metrics.push(StepMetrics {
                stage_index,
                stage: stage.kind.name().to_string(),
                step,
                loss: loss_value.scalar,
                components: loss_value.components.clone(),
                grad_norm: loss_value.gradient.l2_norm(),
                pass_rate,
                kl_diag,
                signals: report,
            });

            if let Some(out) = out {
                let next = step + 1;
                if cfg.ckpt_interval > 0 && next % cfg.ckpt_interval == 0 && next < stage.steps {
                    self.write_checkpoint(
                        out,
                        stage,
                        stage_index,
                        next,
                        &params,
                        &reference,
                        &cfg,
                    )?;
                }
            }
        }
        Ok(StageRun { params, metrics })
    }

    pub fn run_stage(
        &self,
        params: PolicyParams,
        stage: &StageSpec,
        stage_index: usize,
    ) -> Result<StageRun> {
        self.run_stage_from(params, stage, stage_index, 0, None, None)
    }

    /// Run stages in order, each starting from the previous stage's
    /// parameters, checkpointing at stage boundaries (and mid-stage at the
    /// configured interval). A resume point skips completed work and
    /// continues bit-identically.
    pub fn run_pipeline(
        &self,
        init: PolicyParams,
        pipeline: &PipelineSpec,
        out: Option<&Path>,
        resume: Option<ResumePoint>,
    ) -> Result<PipelineRun> {
        if pipeline.stages.is_empty() {
            return Err(Error::Validation(
                "pipeline must have at least one stage".into(),
            ));
        }
        let mut params = init;
        let mut metrics = Vec::new();
        let mut checkpoints = Vec::new();
        let (start_stage, mut start_step, mut ref_override) = match resume {
            Some(point) => {
                if point.stage_index >= pipeline.stages.len() {
                    return Err(Error::Validation(format!(
                        "resume stage {} outside pipeline of {} stages",
                        point.stage_index,
                        pipeline.stages.len()
                    )));
                }
                params = point.params;
                (point.stage_index, point.next_step, Some(point.ref_params))
            }
            None => (0, 0, None),
        };
        for (stage_index, stage) in pipeline.stages.iter().enumerate().skip(start_stage) {
            let cfg = with_overrides(&self.config, &stage.overrides)?;
            let run = self.run_stage_from(
                params,
                stage,
                stage_index,
                start_step,
                ref_override.take(),
                out,
            )?;
            params = run.params;
            metrics.extend(run.metrics);
            start_step = 0;
            if let Some(out) = out {
                let dir = self.write_checkpoint(
                    out,
                    stage,
                    stage_index,
                    stage.steps,
                    &params,
                    &params,
                    &cfg,
                )?;
                checkpoints.push(dir);
            }
        }
        Ok(PipelineRun {
            params,
            metrics,
            checkpoints,
        })
    }

    fn checkpoint_dir(out: &Path, stage: &StageSpec, stage_index: usize, step: usize) -> PathBuf {
        out.join("ckpt")
            .join(format!("s{stage_index:02}-{}", stage.kind.name()))
            .join(format!("step{step:06}"))
    }

    #[allow(clippy::too_many_arguments)]
    fn write_checkpoint(
        &self,
        out: &Path,
        stage: &StageSpec,
        stage_index: usize,
        next_step: usize,
        params: &PolicyParams,
        reference: &PolicyParams,
        cfg: &TrainingConfig,
    ) -> Result<PathBuf> {
        let dir = Self::checkpoint_dir(out, stage, stage_index, next_step);
        std::fs::create_dir_all(&dir)?;
        save_checkpoint(params, &dir.join("params.jsonl"))?;
        save_checkpoint(reference, &dir.join("ref_params.jsonl"))?;
        let state = CheckpointState {
            seed: cfg.seed,
            stage_index,
            stage_kind: stage.kind,
            next_step,
        };
        std::fs::write(
            dir.join("state.json"),
            serde_json::to_string_pretty(&state)?,
        )?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        Ok(dir)
    }

    fn write_dump(
        &self,
        out: Option<&Path>,
        stage: &StageSpec,
        stage_index: usize,
        step: usize,
        params: &PolicyParams,
        loss_value: &LossValue,
    ) -> Result<Option<PathBuf>> {
        let Some(out) = out else { return Ok(None) };
        std::fs::create_dir_all(out)?;
        let path = out.join(format!("dump-s{stage_index:02}-t{step:06}.json"));
        let dump = serde_json::json!({
            "stage": stage.kind.name(),
            "stage_index": stage_index,
            "step": step,
            "loss": loss_value.scalar,
            "components": loss_value.components,
            "gradient_finite": loss_value.gradient.is_finite(),
            "params_finite": params.all_finite(),
        });
        std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
        let params_path = out.join(format!("dump-s{stage_index:02}-t{step:06}.params.jsonl"));
        save_checkpoint(params, &params_path)?;
        Ok(Some(path))
    }
}

/// Locate the most advanced checkpoint under `out/ckpt` and load it as a
/// resume point.
pub fn load_resume_point(out: &Path, pipeline: &PipelineSpec) -> Result<Option<ResumePoint>> {
    let root = out.join("ckpt");
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, usize, PathBuf)> = None;
    for stage_entry in std::fs::read_dir(&root)? {
        let stage_dir = stage_entry?.path();
        if !stage_dir.is_dir() {
            continue;
        }
        for step_entry in std::fs::read_dir(&stage_dir)? {
            let step_dir = step_entry?.path();
            let state_path = step_dir.join("state.json");
            if !state_path.exists() {
                continue;
            }
            let state: CheckpointState =
                serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
            let key = (state.stage_index, state.next_step);
            if best
                .as_ref()
                .map(|(s, t, _)| (key.0, key.1) > (*s, *t))
                .unwrap_or(true)
            {
                best = Some((key.0, key.1, step_dir));
            }
        }
    }
    let Some((stage_index, mut next_step, dir)) = best else {
        return Ok(None);
    };
    let state: CheckpointState =
        serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
    let params = load_checkpoint(&dir.join("params.jsonl"))?;
    let ref_params = load_checkpoint(&dir.join("ref_params.jsonl"))?;
    let mut stage_index = stage_index;
    if let Some(stage) = pipeline.stages.get(stage_index) {
        if stage.kind != state.stage_kind {
            return Err(Error::Validation(format!(
                "checkpoint stage kind `{}` does not match pipeline stage {stage_index} `{}`",
                state.stage_kind.name(),
                stage.kind.name()
            )));
        }
        // A stage-boundary checkpoint resumes at the next stage.
        if next_step >= stage.steps {
            stage_index += 1;
            next_step = 0;
        }
    }
    if stage_index >= pipeline.stages.len() {
        return Ok(None);
    }
    Ok(Some(ResumePoint {
        stage_index,
        next_step,
        params,
        ref_params,
    }))
}
