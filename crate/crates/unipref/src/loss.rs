//! Every training objective, each returning a scalar loss together with its
//! exact gradient over the logit table and a labeled component breakdown.
//!
//! Conventions: losses are minimized; the clipped surrogate enters negated;
//! the adversarial term is a score-function (likelihood-ratio) estimator with
//! a batch-mean baseline, since discriminator scores are not differentiable
//! through sampled tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryLabel, BinaryLabelRecord, PreferenceRecord};
use crate::error::{Error, Result};
use crate::policy::{enumerate_response_space, GradTable, PolicyParams, PolicySnapshot};
use crate::vocab::{Sequence, Vocabulary};

/// Scalar loss plus its exact gradient and additive component breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub scalar: f64,
    pub gradient: GradTable,
    /// Labeled additive sub-scalars (`sft`, `clip`, `kl`, `adv`, ...); they
    /// sum to `scalar` where additive.
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    fn new(scalar: f64, gradient: GradTable) -> Self {
        LossValue {
            scalar,
            gradient,
            components: BTreeMap::new(),
        }
    }

    fn with_component(mut self, name: &str, value: f64) -> Self {
        self.components.insert(name.to_string(), value);
        self
    }

    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }

    pub fn components_sum(&self) -> f64 {
        self.components.values().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.scalar.is_finite() && self.gradient.is_finite()
    }
}

/// G sampled responses for one prompt with rewards, normalized advantages,
/// behavior-policy logprobs, and (for adversarial stages) discriminator
/// coefficients.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub prompt: Sequence,
    pub responses: Vec<Sequence>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per-response, per-token logprobs under the behavior snapshot.
    pub old_logprobs: Vec<Vec<f64>>,
    pub coefs: Option<Vec<f64>>,
}

impl GroupRollout {
    pub fn validate(&self) -> Result<()> {
        let g = self.responses.len();
        if g < 2 {
            return Err(Error::Contract(format!("group size {g} < 2")));
        }
        if self.rewards.len() != g || self.advantages.len() != g || self.old_logprobs.len() != g {
            return Err(Error::Contract(
                "rollout group lists have mismatched lengths".into(),
            ));
        }
        if let Some(coefs) = &self.coefs {
            if coefs.len() != g {
                return Err(Error::Contract(
                    "coefs length differs from group size".into(),
                ));
            }
        }
        for (resp, lps) in self.responses.iter().zip(self.old_logprobs.iter()) {
            if resp.len() != lps.len() {
                return Err(Error::Contract(
                    "old_logprobs length differs from response".into(),
                ));
            }
            if resp.is_empty() {
                return Err(Error::Contract("empty response in rollout group".into()));
            }
        }
        Ok(())
    }
}

/// Group-relative advantages: center by the group mean and scale by the
/// population standard deviation plus `std_eps`. Degenerate (constant-reward)
/// groups yield all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_eps: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let denom = var.sqrt() + std_eps;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Negative mean sequence log-likelihood over (prompt, target) pairs.
pub fn sft_loss(params: &PolicyParams, batch: &[(&Sequence, &Sequence)]) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Contract("sft batch is empty".into()));
    }
    let n = batch.len() as f64;
    let mut grad = GradTable::zeros_like(params);
    let mut scalar = 0.0;
    for (prompt, target) in batch {
        scalar -= params.sequence_logprob(prompt, target) / n;
        params.accumulate_logprob_gradient(prompt, target, -1.0 / n, &mut grad);
    }
    Ok(LossValue::new(scalar, grad).with_component("sft", scalar))
}

/// One sampled student response with its discriminator coefficient.
#[derive(Debug, Clone)]
pub struct AdvItem<'a> {
    pub prompt: &'a Sequence,
    pub response: &'a Sequence,
    pub coef: f64,
}

/// Batch adversarial term: the loss estimate is the negated mean coefficient,
/// the gradient is the mean score-function term with the batch-mean baseline.
pub fn adversarial_term(params: &PolicyParams, items: &[AdvItem<'_>]) -> (f64, GradTable) {
    let mut grad = GradTable::zeros_like(params);
    if items.is_empty() {
        return (0.0, grad);
    }
    let n = items.len() as f64;
    let baseline = items.iter().map(|it| it.coef).sum::<f64>() / n;
    let mut scalar = 0.0;
    for item in items {
        scalar -= item.coef / n;
        crate::disc::accumulate_adversarial_gradient(
            params,
            item.prompt,
            item.response,
            item.coef,
            baseline,
            1.0 / n,
            &mut grad,
        );
    }
    (scalar, grad)
}

/// Imitation loss plus its separately-kept adversarial part.
#[derive(Debug, Clone)]
pub struct AsftParts {
    pub combined: LossValue,
    pub sft: LossValue,
    pub adv_scalar: f64,
    pub adv_gradient: GradTable,
}

pub fn asft_parts(
    params: &PolicyParams,
    batch: &[(&Sequence, &Sequence)],
    adv_items: &[AdvItem<'_>],
    lambda_adv: f64,
) -> Result<AsftParts> {
    let sft = sft_loss(params, batch)?;
    let (adv_scalar, adv_gradient) = adversarial_term(params, adv_items);
    let combined = if lambda_adv == 0.0 || adv_items.is_empty() {
        sft.clone()
    } else {
        let mut gradient = sft.gradient.clone();
        gradient.add_scaled(&adv_gradient, lambda_adv);
        LossValue::new(sft.scalar + lambda_adv * adv_scalar, gradient)
            .with_component("sft", sft.scalar)
            .with_component("adv", lambda_adv * adv_scalar)
    };
    Ok(AsftParts {
        combined,
        sft,
        adv_scalar,
        adv_gradient,
    })
}

/// Imitation objective augmented with the adversarial signal:
/// `sft + lambda_adv * adv`.
pub fn asft_loss(
    params: &PolicyParams,
    batch: &[(&Sequence, &Sequence)],
    adv_items: &[AdvItem<'_>],
    lambda_adv: f64,
) -> Result<LossValue> {
    Ok(asft_parts(params, batch, adv_items, lambda_adv)?.combined)
}

/// Clipped-surrogate objective with a KL penalty against a frozen reference:
/// `-(J_clip - beta_kl * KL)`, aggregated by token mean within a response,
/// response mean within a group, and group mean across the batch. The clip
/// follows the standard min rule, so clipped tokens contribute zero gradient.
pub fn grpo_loss(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicyParams,
    rollouts: &[GroupRollout],
    clip_eps: f64,
    beta_kl: f64,
) -> Result<LossValue> {
    if rollouts.is_empty() {
        return Err(Error::Contract("no rollout groups".into()));
    }
    params.check_compatible(old.params())?;
    params.check_compatible(reference)?;
    let n_groups = rollouts.len() as f64;
    let mut grad = GradTable::zeros_like(params);
    let mut j_total = 0.0;
    let mut kl_total = 0.0;
    let lo = 1.0 - clip_eps;
    let hi = 1.0 + clip_eps;
    for group in rollouts {
        group.validate()?;
        let g = group.responses.len() as f64;
        for (i, response) in group.responses.iter().enumerate() {
            let adv = group.advantages[i];
            let len = response.len() as f64;
            let token_w = 1.0 / (n_groups * g * len);
            params.visit_response(&group.prompt, response, |state, token, pos| {
                let lp_new = params.token_logprob(state, token);
                let ratio = (lp_new - group.old_logprobs[i][pos]).exp();
                let unclipped = ratio * adv;
                let clipped = ratio.clamp(lo, hi) * adv;
                let value = unclipped.min(clipped);
                j_total += value * token_w;
                if unclipped <= clipped {
                    // Unclipped branch active: d value = adv * ratio * d logp.
                    let coeff = adv * ratio * token_w;
                    let dist = params.distribution_at(state);
                    for (u, &p_u) in dist.iter().enumerate() {
                        let indicator = if u == token { 1.0 } else { 0.0 };
                        grad.add_at(state, u, -coeff * (indicator - p_u));
                    }
                }
            });
            kl_total += params.kl_to(reference, &group.prompt, response)? / (n_groups * g);
            if beta_kl != 0.0 {
                params.accumulate_kl_gradient(
                    reference,
                    &group.prompt,
                    response,
                    beta_kl / (n_groups * g),
                    &mut grad,
                );
            }
        }
    }
    let scalar = -j_total + beta_kl * kl_total;
    Ok(LossValue::new(scalar, grad)
        .with_component("clip", -j_total)
        .with_component("kl", beta_kl * kl_total))
}

/// Preference loss plus its separately-kept adversarial part.
#[derive(Debug, Clone)]
pub struct AgrpoParts {
    pub combined: LossValue,
    pub grpo: LossValue,
    pub adv_scalar: f64,
    pub adv_gradient: GradTable,
}

pub fn agrpo_parts(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicyParams,
    rollouts: &[GroupRollout],
    clip_eps: f64,
    beta_kl: f64,
    lambda_adv: f64,
) -> Result<AgrpoParts> {
    let grpo = grpo_loss(params, old, reference, rollouts, clip_eps, beta_kl)?;
    let mut items: Vec<AdvItem<'_>> = Vec::new();
    if lambda_adv != 0.0 {
        for group in rollouts {
            if let Some(coefs) = &group.coefs {
                for (response, &coef) in group.responses.iter().zip(coefs.iter()) {
                    items.push(AdvItem {
                        prompt: &group.prompt,
                        response,
                        coef,
                    });
                }
            }
        }
    }
    let (adv_scalar, adv_gradient) = adversarial_term(params, &items);
    let combined = if lambda_adv == 0.0 || items.is_empty() {
        grpo.clone()
    } else {
        let mut gradient = grpo.gradient.clone();
        gradient.add_scaled(&adv_gradient, lambda_adv);
        LossValue::new(grpo.scalar + lambda_adv * adv_scalar, gradient)
            .with_component("clip", grpo.component("clip"))
            .with_component("kl", grpo.component("kl"))
            .with_component("adv", lambda_adv * adv_scalar)
    };
    Ok(AgrpoParts {
        combined,
        grpo,
        adv_scalar,
        adv_gradient,
    })
}

/// Preference objective augmented with the adversarial signal; requires
/// coefficients on the rollouts when `lambda_adv > 0`.
pub fn agrpo_loss(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicyParams,
    rollouts: &[GroupRollout],
    clip_eps: f64,
    beta_kl: f64,
    lambda_adv: f64,
) -> Result<LossValue> {
    Ok(agrpo_parts(
        params, old, reference, rollouts, clip_eps, beta_kl, lambda_adv,
    )?
    .combined)
}

/// The four learning signals of a unified step, stored with their mixing
/// weights already applied so that their plain sum is the applied gradient.
#[derive(Debug, Clone)]
pub struct SignalDecomposition {
    /// `alpha * g_sft`
    pub imitation: GradTable,
    /// `(1 - alpha) * g_grpo`
    pub preference: GradTable,
    /// `lambda_adv * alpha * g_adv` on the demonstration slice.
    pub adv_sft: GradTable,
    /// `lambda_adv * (1 - alpha) * g_adv` on the preference slice.
    pub adv_pref: GradTable,
}

impl SignalDecomposition {
    pub fn recomposed(&self) -> GradTable {
        let mut total = self.imitation.clone();
        total.add_scaled(&self.preference, 1.0);
        total.add_scaled(&self.adv_sft, 1.0);
        total.add_scaled(&self.adv_pref, 1.0);
        total
    }
}

/// Result of one unified-objective evaluation.
#[derive(Debug, Clone)]
pub struct UnifiedOutcome {
    pub loss: LossValue,
    pub asft: LossValue,
    pub agrpo: Option<LossValue>,
    pub signals: SignalDecomposition,
}

/// Single unified objective over a mixed batch:
/// `alpha * asft + (1 - alpha) * agrpo`, with the four-signal decomposition
/// exposed. At the boundaries `alpha == 1.0` / `alpha == 0.0` the missing
/// slice is skipped and the result equals the corresponding plain objective
/// bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn unified_loss(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicyParams,
    sft_batch: &[(&Sequence, &Sequence)],
    sft_adv_items: &[AdvItem<'_>],
    rollouts: &[GroupRollout],
    alpha: f64,
    lambda_adv: f64,
    clip_eps: f64,
    beta_kl: f64,
) -> Result<UnifiedOutcome> {
    if alpha > 0.0 && sft_batch.is_empty() {
        return Err(Error::Contract(
            "unified loss with alpha > 0 requires an sft slice".into(),
        ));
    }
    if alpha < 1.0 && rollouts.is_empty() {
        return Err(Error::Contract(
            "unified loss with alpha < 1 requires a preference slice".into(),
        ));
    }
    let zeros = GradTable::zeros_like(params);

    if alpha == 1.0 {
        let asft = asft_parts(params, sft_batch, sft_adv_items, lambda_adv)?;
        let mut adv_sft = asft.adv_gradient.clone();
        adv_sft.scale(lambda_adv);
        let signals = SignalDecomposition {
            imitation: asft.sft.gradient.clone(),
            preference: zeros.clone(),
            adv_sft,
            adv_pref: zeros,
        };
        return Ok(UnifiedOutcome {
            loss: asft.combined,
            asft: asft.sft,
            agrpo: None,
            signals,
        });
    }
    if alpha == 0.0 {
        let agrpo = agrpo_parts(
            params, old, reference, rollouts, clip_eps, beta_kl, lambda_adv,
        )?;
        let mut adv_pref = agrpo.adv_gradient.clone();
        adv_pref.scale(lambda_adv);
        let signals = SignalDecomposition {
            imitation: zeros.clone(),
            preference: agrpo.grpo.gradient.clone(),
            adv_sft: zeros,
            adv_pref,
        };
        return Ok(UnifiedOutcome {
            loss: agrpo.combined,
            asft: LossValue::new(0.0, GradTable::zeros_like(params)),
            agrpo: Some(agrpo.grpo),
            signals,
        });
    }

    let asft = asft_parts(params, sft_batch, sft_adv_items, lambda_adv)?;
    let agrpo = agrpo_parts(
        params, old, reference, rollouts, clip_eps, beta_kl, lambda_adv,
    )?;

    let mut gradient = GradTable::zeros_like(params);
    gradient.add_scaled(&asft.combined.gradient, alpha);
    gradient.add_scaled(&agrpo.combined.gradient, 1.0 - alpha);
    let scalar = alpha * asft.combined.scalar + (1.0 - alpha) * agrpo.combined.scalar;

    let mut imitation = asft.sft.gradient.clone();
    imitation.scale(alpha);
    let mut preference = agrpo.grpo.gradient.clone();
    preference.scale(1.0 - alpha);
    let mut adv_sft = asft.adv_gradient.clone();
    adv_sft.scale(lambda_adv * alpha);
    let mut adv_pref = agrpo.adv_gradient.clone();
    adv_pref.scale(lambda_adv * (1.0 - alpha));

    let loss = LossValue::new(scalar, gradient)
        .with_component("sft", alpha * asft.sft.scalar)
        .with_component("clip", (1.0 - alpha) * agrpo.grpo.component("clip"))
        .with_component("kl", (1.0 - alpha) * agrpo.grpo.component("kl"))
        .with_component(
            "adv",
            lambda_adv * (alpha * asft.adv_scalar + (1.0 - alpha) * agrpo.adv_scalar),
        );
    Ok(UnifiedOutcome {
        loss,
        asft: asft.sft,
        agrpo: Some(agrpo.grpo),
        signals: SignalDecomposition {
            imitation,
            preference,
            adv_sft,
            adv_pref,
        },
    })
}

fn ln_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Pairwise preference loss against a frozen reference:
/// `-mean log sigmoid(beta * (delta_w - delta_l))` with
/// `delta_y = log pi(y|x) - log pi_ref(y|x)`.
pub fn dpo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferenceRecord],
    beta: f64,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Contract("dpo batch is empty".into()));
    }
    params.check_compatible(reference)?;
    let n = batch.len() as f64;
    let mut grad = GradTable::zeros_like(params);
    let mut scalar = 0.0;
    for rec in batch {
        let delta_w = params.sequence_logprob(&rec.prompt, &rec.winner)
            - reference.sequence_logprob(&rec.prompt, &rec.winner);
        let delta_l = params.sequence_logprob(&rec.prompt, &rec.loser)
            - reference.sequence_logprob(&rec.prompt, &rec.loser);
        let z = beta * (delta_w - delta_l);
        scalar += -ln_sigmoid(z) / n;
        let w = -sigmoid(-z) * beta / n;
        params.accumulate_logprob_gradient(&rec.prompt, &rec.winner, w, &mut grad);
        params.accumulate_logprob_gradient(&rec.prompt, &rec.loser, -w, &mut grad);
    }
    Ok(LossValue::new(scalar, grad).with_component("dpo", scalar))
}

/// Binary-label preference loss with asymmetric loss aversion. Desirable
/// items contribute `1 - sigmoid(beta * (delta - z))`, undesirable items
/// `loss_aversion * (1 - sigmoid(beta * (z - delta)))`, where `z` is the
/// batch mean of `delta`. The reference point `z` is differentiated exactly
/// rather than detached, so the gradient matches finite differences of the
/// scalar.
pub fn kto_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[BinaryLabelRecord],
    beta: f64,
    loss_aversion: f64,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Contract("kto batch is empty".into()));
    }
    params.check_compatible(reference)?;
    let n = batch.len() as f64;
    let deltas: Vec<f64> = batch
        .iter()
        .map(|rec| {
            params.sequence_logprob(&rec.prompt, &rec.response)
                - reference.sequence_logprob(&rec.prompt, &rec.response)
        })
        .collect();
    let z = deltas.iter().sum::<f64>() / n;

    let mut scalar = 0.0;
    // a_i = d(term_i)/d(delta_i), s_i = d(term_i)/dz.
    let mut a = vec![0.0; batch.len()];
    let mut s_sum = 0.0;
    for (i, rec) in batch.iter().enumerate() {
        match rec.label {
            BinaryLabel::Desirable => {
                let u = beta * (deltas[i] - z);
                let sig = sigmoid(u);
                scalar += (1.0 - sig) / n;
                let dsig = beta * sig * (1.0 - sig);
                a[i] = -dsig;
                s_sum += dsig;
            }
            BinaryLabel::Undesirable => {
                let v = beta * (z - deltas[i]);
                let sig = sigmoid(v);
                scalar += loss_aversion * (1.0 - sig) / n;
                let dsig = loss_aversion * beta * sig * (1.0 - sig);
                a[i] = dsig;
                s_sum += -dsig;
            }
        }
    }
    let mut grad = GradTable::zeros_like(params);
    for (i, rec) in batch.iter().enumerate() {
        let weight = a[i] / n + s_sum / (n * n);
        params.accumulate_logprob_gradient(&rec.prompt, &rec.response, weight, &mut grad);
    }
    Ok(LossValue::new(scalar, grad).with_component("kto", scalar))
}

/// Reward-mixing ablation settings: leave the verifiable reward alone, add
/// the raw discriminator score, or add the transformed coefficient. The
/// fourth ablation arm (separate adversarial loss term) is realized by the
/// adversarial objective itself, not by reward mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Rlvr,
    RlvrPlusRaw,
    RlvrPlusCoef,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rlvr" => Ok(RewardMode::Rlvr),
            "rlvr+raw" | "rlvr_plus_raw" => Ok(RewardMode::RlvrPlusRaw),
            "rlvr+coef" | "rlvr_plus_coef" => Ok(RewardMode::RlvrPlusCoef),
            other => Err(Error::Usage(format!("unknown reward mode `{other}`"))),
        }
    }
}

pub fn mixed_reward(base: f64, raw: f64, coef: f64, mode: RewardMode) -> f64 {
    match mode {
        RewardMode::Rlvr => base,
        RewardMode::RlvrPlusRaw => base + raw,
        RewardMode::RlvrPlusCoef => base + coef,
    }
}

/// Grid report for the Dirac-delta reward equivalence: over every policy in a
/// logit grid, brute-forced expected Dirac reward versus negative
/// log-likelihood of the target response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiracReport {
    pub grid_points: usize,
    pub expected_reward: Vec<f64>,
    pub nll: Vec<f64>,
    pub argmax_expected_reward: Vec<usize>,
    pub argmin_nll: Vec<usize>,
    pub maximizer_sets_equal: bool,
    /// max |expected reward - pi(target)| over the grid.
    pub max_pointwise_gap: f64,
}

const DIRAC_MAX_VOCAB: usize = 3;
const DIRAC_MAX_LEN: usize = 2;
const DIRAC_MAX_GRID: usize = 10_000_000;

/// Brute-force the equivalence between expected-Dirac-reward maximization and
/// NLL minimization on a small instance: policies vary over a uniform grid of
/// begin-state logits, everything else stays uniform.
pub fn dirac_equivalence_check(
    vocab: &Vocabulary,
    target: &Sequence,
    max_len: usize,
    resolution: usize,
    logit_lo: f64,
    logit_hi: f64,
) -> Result<DiracReport> {
    if vocab.size() > DIRAC_MAX_VOCAB || max_len > DIRAC_MAX_LEN {
        return Err(Error::Refused(format!(
            "dirac check enumerates exhaustively; vocab {} / max_len {} exceed the supported bound",
            vocab.size(),
            max_len
        )));
    }
    if resolution < 2 {
        return Err(Error::Contract("grid resolution must be >= 2".into()));
    }
    target
        .validate(vocab)
        .map_err(|e| Error::Contract(format!("invalid target: {e}")))?;
    if target.is_empty() || target.len() > max_len {
        return Err(Error::Contract(
            "target must be a nonempty response within max_len".into(),
        ));
    }
    let v = vocab.size();
    let grid_points = resolution.pow(v as u32);
    if grid_points > DIRAC_MAX_GRID {
        return Err(Error::Refused(format!(
            "grid of {grid_points} points is too large"
        )));
    }
    let axis: Vec<f64> = (0..resolution)
        .map(|i| logit_lo + (logit_hi - logit_lo) * i as f64 / (resolution - 1) as f64)
        .collect();
    let space = enumerate_response_space(vocab, max_len)?;
    let prompt = Sequence::empty();
    let mut params = PolicyParams::uniform(vocab.clone(), 1)?;
    let begin_state = params.state_for(&[]);

    // Probability of a response as a product of next-token probabilities;
    // the same route computes both the enumeration and the pointwise pi(y*).
    fn response_prob(params: &PolicyParams, prompt: &Sequence, response: &Sequence) -> f64 {
        let mut prob = 1.0;
        params.visit_response(prompt, response, |state, token, _| {
            prob *= params.distribution_at(state)[token];
        });
        prob
    }

    let mut expected_reward = Vec::with_capacity(grid_points);
    let mut nll = Vec::with_capacity(grid_points);
    let mut max_gap = 0.0f64;
    let mut index = vec![0usize; v];
    for _ in 0..grid_points {
        for (t, &i) in index.iter().enumerate() {
            params.set_logit(begin_state, t, axis[i]);
        }
        let mut er = 0.0;
        for response in &space {
            if response == target {
                er += response_prob(&params, &prompt, response);
            }
        }
        let direct = response_prob(&params, &prompt, target);
        max_gap = max_gap.max((er - direct).abs());
        expected_reward.push(er);
        nll.push(-params.sequence_logprob(&prompt, target));

        // Advance the mixed-radix grid index.
        for slot in index.iter_mut() {
            *slot += 1;
            if *slot < resolution {
                break;
            }
            *slot = 0;
        }
    }

    let max_er = expected_reward
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let min_nll = nll.iter().cloned().fold(f64::INFINITY, f64::min);
    let argmax_expected_reward: Vec<usize> = expected_reward
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == max_er)
        .map(|(i, _)| i)
        .collect();
    let argmin_nll: Vec<usize> = nll
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == min_nll)
        .map(|(i, _)| i)
        .collect();
    let maximizer_sets_equal = argmax_expected_reward == argmin_nll;
    Ok(DiracReport {
        grid_points,
        expected_reward,
        nll,
        argmax_expected_reward,
        argmin_nll,
        maximizer_sets_equal,
        max_pointwise_gap: max_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disc::{score, DiscriminatorKind, DEFAULT_ORACLE_SCALE};
    use crate::rng::seeded_rng;

    fn vocab(n: usize) -> Vocabulary {
        let symbols: Vec<String> = (0..n - 1)
            .map(|i| format!("w{i}"))
            .chain(std::iter::once("<eos>".to_string()))
            .collect();
        Vocabulary::new(symbols, n - 1).unwrap()
    }

    fn random_policy(v: usize, k: usize, seed: u64) -> PolicyParams {
        let mut rng = seeded_rng(seed, "loss-policy");
        PolicyParams::random(vocab(v), k, 1.5, &mut rng).unwrap()
    }

    fn finite_diff<F: Fn(&PolicyParams) -> f64>(params: &PolicyParams, f: F, h: f64) -> GradTable {
        let mut out = GradTable::zeros_like(params);
        for state in 0..params.n_states() {
            for t in 0..params.vocab().size() {
                let mut plus = params.clone();
                plus.add_logit(state, t, h);
                let mut minus = params.clone();
                minus.add_logit(state, t, -h);
                out.add_at(state, t, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        out
    }

    fn assert_grad_close(analytic: &GradTable, numeric: &GradTable, label: &str) {
        let diff = analytic.max_abs_diff(numeric);
        let scale = analytic.l2_norm().max(1.0);
        assert!(
            diff / scale < 1e-5,
            "{label}: fd mismatch {diff} vs scale {scale}"
        );
    }

    #[test]
    fn group_advantages_hand_case() {
        let adv = group_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-8);
        for (a, e) in adv.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn group_advantages_degenerate_group_is_zero() {
        let adv = group_advantages(&[1.0, 1.0, 1.0], 1e-8);
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn group_advantages_zero_mean() {
        let mut rng = seeded_rng(3, "adv-mean");
        use rand::Rng;
        for _ in 0..50 {
            let rewards: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 3.0).collect();
            let adv = group_advantages(&rewards, 1e-8);
            let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn sft_uniform_nll() {
        let p = PolicyParams::uniform(vocab(4), 1).unwrap();
        let prompt = Sequence::new(vec![0]);
        let resp = Sequence::new(vec![1, 2, 3]);
        let lv = sft_loss(&p, &[(&prompt, &resp)]).unwrap();
        assert!((lv.scalar - 3.0 * 4.0_f64.ln()).abs() < 1e-12);
        assert!((lv.scalar - 4.158883).abs() < 1e-6);
    }

    #[test]
    fn sft_empty_batch_is_contract_error() {
        let p = PolicyParams::uniform(vocab(4), 1).unwrap();
        assert!(matches!(sft_loss(&p, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn sft_gradient_matches_fd_and_descends() {
        let p = random_policy(4, 1, 101);
        let prompt = Sequence::new(vec![0]);
        let r1 = Sequence::new(vec![1, 2, 3]);
        let r2 = Sequence::new(vec![2, 3]);
        let batch = vec![(&prompt, &r1), (&prompt, &r2)];
        let lv = sft_loss(&p, &batch).unwrap();
        let numeric = finite_diff(&p, |q| sft_loss(q, &batch).unwrap().scalar, 1e-5);
        assert_grad_close(&lv.gradient, &numeric, "sft");

        let mut stepped = p.clone();
        stepped.gradient_step(&lv.gradient, 1e-3);
        assert!(sft_loss(&stepped, &batch).unwrap().scalar < lv.scalar);
    }

    fn make_rollout(
        params: &PolicyParams,
        old: &PolicySnapshot,
        prompt: Vec<usize>,
        seed: u64,
        g: usize,
        with_coefs: bool,
    ) -> GroupRollout {
        let mut rng = seeded_rng(seed, "rollout");
        let prompt = Sequence::new(prompt);
        let responses: Vec<Sequence> = (0..g)
            .map(|_| old.params().sample_response(&prompt, 4, &mut rng))
            .collect();
        let rewards: Vec<f64> = responses.iter().map(|r| (r.len() % 2) as f64).collect();
        let advantages = group_advantages(&rewards, 1e-8);
        let old_logprobs: Vec<Vec<f64>> = responses
            .iter()
            .map(|r| {
                let mut lps = Vec::new();
                old.params().visit_response(&prompt, r, |state, token, _| {
                    lps.push(old.params().token_logprob(state, token));
                });
                lps
            })
            .collect();
        let coefs = with_coefs.then(|| {
            responses
                .iter()
                .enumerate()
                .map(|(i, _)| 0.2 + 0.1 * i as f64)
                .collect()
        });
        let _ = params;
        GroupRollout {
            prompt,
            responses,
            rewards,
            advantages,
            old_logprobs,
            coefs,
        }
    }

    #[test]
    fn grpo_unit_ratio_single_token_hand_value() {
        // pi == pi_old, one-token responses, advantages +2/-2, beta 0:
        // J = mean(min(1*adv, clip(1)*adv)) = mean(adv) over the group.
        let p = random_policy(3, 1, 111);
        let old = PolicySnapshot::new(p.clone());
        let prompt = Sequence::new(vec![0]);
        let responses = vec![Sequence::new(vec![0]), Sequence::new(vec![1])];
        let old_logprobs: Vec<Vec<f64>> = responses
            .iter()
            .map(|r| {
                vec![old
                    .params()
                    .token_logprob(old.params().state_for(&[0]), r.tokens()[0])]
            })
            .collect();
        let rollout = GroupRollout {
            prompt,
            responses,
            rewards: vec![1.0, 0.0],
            advantages: vec![2.0, -2.0],
            old_logprobs,
            coefs: None,
        };
        let lv = grpo_loss(&p, &old, &p.clone(), &[rollout], 0.2, 0.0).unwrap();
        // J = (2 + (-2)) / 2 = 0, and each response contributes exactly
        // ratio-1 values, so the loss is -0 = 0.
        assert!(lv.scalar.abs() < 1e-12);
        // Single-response group with advantage 2 at unit ratio: J = 2.
        let p2 = random_policy(3, 1, 112);
        let old2 = PolicySnapshot::new(p2.clone());
        let prompt2 = Sequence::new(vec![0]);
        let responses2 = vec![Sequence::new(vec![0]), Sequence::new(vec![0])];
        let old_lp2: Vec<Vec<f64>> = responses2
            .iter()
            .map(|r| vec![p2.token_logprob(p2.state_for(&[0]), r.tokens()[0])])
            .collect();
        let rollout2 = GroupRollout {
            prompt: prompt2,
            responses: responses2,
            rewards: vec![1.0, 1.0],
            advantages: vec![2.0, 2.0],
            old_logprobs: old_lp2,
            coefs: None,
        };
        let lv2 = grpo_loss(&p2, &old2, &p2.clone(), &[rollout2], 0.2, 0.0).unwrap();
        assert!((lv2.scalar - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn grpo_clip_rule_hand_values() {
        // ratio 1.5 with advantage 1 contributes min(1.5, 1.2) = 1.2;
        // ratio 0.5 with advantage -1 contributes min(-0.5, -0.8) = -0.8.
        // Build ratios exactly: old uniform (p = 1/2), new p = 3/4 or 1/4.
        let v = vocab(2);
        let old_params = PolicyParams::uniform(v.clone(), 1).unwrap();
        let old = PolicySnapshot::new(old_params.clone());
        let prompt = Sequence::new(vec![0]);
        let state = old_params.state_for(&[0]);

        let mut up = PolicyParams::uniform(v.clone(), 1).unwrap();
        up.set_logit(state, 0, 3.0_f64.ln()); // p(token 0) = 3/4, ratio 1.5
        let responses = vec![Sequence::new(vec![0]), Sequence::new(vec![0])];
        let old_lp: Vec<Vec<f64>> = responses
            .iter()
            .map(|r| vec![old_params.token_logprob(state, r.tokens()[0])])
            .collect();
        let rollout = GroupRollout {
            prompt: prompt.clone(),
            responses: responses.clone(),
            rewards: vec![1.0, 1.0],
            advantages: vec![1.0, 1.0],
            old_logprobs: old_lp.clone(),
            coefs: None,
        };
        let lv = grpo_loss(&up, &old, &old_params, &[rollout], 0.2, 0.0).unwrap();
        assert!((lv.scalar - (-1.2)).abs() < 1e-12);
        // Clipped tokens contribute zero gradient.
        assert_eq!(lv.gradient.l2_norm(), 0.0);

        let mut down = PolicyParams::uniform(v, 1).unwrap();
        down.set_logit(state, 0, -(3.0_f64.ln())); // p(token 0) = 1/4, ratio 0.5
        let rollout = GroupRollout {
            prompt,
            responses,
            rewards: vec![0.0, 0.0],
            advantages: vec![-1.0, -1.0],
            old_logprobs: old_lp,
            coefs: None,
        };
        let lv = grpo_loss(&down, &old, &old_params, &[rollout], 0.2, 0.0).unwrap();
        assert!((lv.scalar - 0.8).abs() < 1e-12);
        assert_eq!(lv.gradient.l2_norm(), 0.0);
    }

    #[test]
    fn grpo_gradient_matches_fd_away_from_kinks() {
        for case in 0..20 {
            let p = random_policy(3, 1, 200 + case);
            let mut old_params = p.clone();
            // Perturb the behavior policy slightly so ratios are near but not
            // exactly 1, keeping all tokens away from clip kinks.
            for state in 0..old_params.n_states() {
                for t in 0..3 {
                    old_params.add_logit(state, t, 0.01 * ((state + t) % 3) as f64);
                }
            }
            let old = PolicySnapshot::new(old_params);
            let reference = random_policy(3, 1, 300 + case);
            let rollout = make_rollout(&p, &old, vec![0], 400 + case, 4, false);
            let beta = 0.05;
            let lv = grpo_loss(
                &p,
                &old,
                &reference,
                std::slice::from_ref(&rollout),
                0.2,
                beta,
            )
            .unwrap();
            let numeric = finite_diff(
                &p,
                |q| {
                    grpo_loss(
                        q,
                        &old,
                        &reference,
                        std::slice::from_ref(&rollout),
                        0.2,
                        beta,
                    )
                    .unwrap()
                    .scalar
                },
                1e-5,
            );
            assert_grad_close(&lv.gradient, &numeric, "grpo");
        }
    }

    #[test]
    fn grpo_rejects_mismatched_vocabulary() {
        let p = random_policy(3, 1, 501);
        let other = random_policy(4, 1, 502);
        let old = PolicySnapshot::new(p.clone());
        let rollout = make_rollout(&p, &old, vec![0], 503, 2, false);
        let err = grpo_loss(&p, &old, &other, &[rollout], 0.2, 0.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn asft_reduces_to_sft_at_zero_lambda() {
        let p = random_policy(4, 1, 601);
        let prompt = Sequence::new(vec![0]);
        let gt = Sequence::new(vec![1, 3]);
        let student = Sequence::new(vec![2, 3]);
        let batch = vec![(&prompt, &gt)];
        let items = vec![AdvItem {
            prompt: &prompt,
            response: &student,
            coef: 0.4,
        }];
        let plain = sft_loss(&p, &batch).unwrap();
        let asft = asft_loss(&p, &batch, &items, 0.0).unwrap();
        assert_eq!(plain, asft);
    }

    #[test]
    fn asft_gradient_is_additive() {
        let p = random_policy(4, 1, 602);
        let prompt = Sequence::new(vec![0]);
        let gt = Sequence::new(vec![1, 3]);
        let s1 = Sequence::new(vec![2, 3]);
        let s2 = Sequence::new(vec![1, 2, 3]);
        let batch = vec![(&prompt, &gt)];
        let items = vec![
            AdvItem {
                prompt: &prompt,
                response: &s1,
                coef: 0.4,
            },
            AdvItem {
                prompt: &prompt,
                response: &s2,
                coef: -0.2,
            },
        ];
        let lambda = 0.02;
        let parts = asft_parts(&p, &batch, &items, lambda).unwrap();
        let mut expected = parts.sft.gradient.clone();
        expected.add_scaled(&parts.adv_gradient, lambda);
        assert!(parts.combined.gradient.max_abs_diff(&expected) < 1e-15);
        let sum = parts.combined.components_sum();
        assert!((sum - parts.combined.scalar).abs() < 1e-12);
    }

    #[test]
    fn agrpo_reduces_to_grpo_at_zero_lambda_and_on_equal_coefs() {
        let p = random_policy(3, 1, 603);
        let old = PolicySnapshot::new(p.clone());
        let reference = p.clone();
        let rollout = make_rollout(&p, &old, vec![0], 604, 4, true);
        let plain = grpo_loss(
            &p,
            &old,
            &reference,
            std::slice::from_ref(&rollout),
            0.2,
            0.01,
        )
        .unwrap();
        let a0 = agrpo_loss(
            &p,
            &old,
            &reference,
            std::slice::from_ref(&rollout),
            0.2,
            0.01,
            0.0,
        )
        .unwrap();
        assert_eq!(plain, a0);

        // Constant coefs with the batch-mean baseline: adversarial gradient
        // vanishes, so the gradient equals plain grpo even at lambda > 0.
        let mut equal = rollout.clone();
        equal.coefs = Some(vec![0.7; equal.responses.len()]);
        let a1 = agrpo_loss(&p, &old, &reference, &[equal], 0.2, 0.01, 0.05).unwrap();
        assert!(a1.gradient.max_abs_diff(&plain.gradient) < 1e-15);
    }

    #[test]
    fn unified_boundaries_match_plain_objectives_exactly() {
        let p = random_policy(3, 1, 605);
        let old = PolicySnapshot::new(p.clone());
        let reference = p.clone();
        let prompt = Sequence::new(vec![0]);
        let gt = Sequence::new(vec![1, 2]);
        let student = Sequence::new(vec![0, 2]);
        let batch = vec![(&prompt, &gt)];
        let items = vec![AdvItem {
            prompt: &prompt,
            response: &student,
            coef: 0.3,
        }];
        let rollout = make_rollout(&p, &old, vec![0], 606, 4, true);
        let lambda = 0.01;

        let at_one = unified_loss(
            &p,
            &old,
            &reference,
            &batch,
            &items,
            &[],
            1.0,
            lambda,
            0.2,
            0.01,
        )
        .unwrap();
        let asft = asft_loss(&p, &batch, &items, lambda).unwrap();
        assert_eq!(at_one.loss, asft);

        let at_zero = unified_loss(
            &p,
            &old,
            &reference,
            &[],
            &[],
            std::slice::from_ref(&rollout),
            0.0,
            lambda,
            0.2,
            0.01,
        )
        .unwrap();
        let agrpo = agrpo_loss(
            &p,
            &old,
            &reference,
            std::slice::from_ref(&rollout),
            0.2,
            0.01,
            lambda,
        )
        .unwrap();
        assert_eq!(at_zero.loss, agrpo);
    }

    #[test]
    fn unified_gradient_is_convex_combination_and_signals_recompose() {
        let p = random_policy(3, 1, 607);
        let old = PolicySnapshot::new(p.clone());
        let reference = random_policy(3, 1, 608);
        let prompt = Sequence::new(vec![0]);
        let gt = Sequence::new(vec![1, 2]);
        let student = Sequence::new(vec![0, 2]);
        let batch = vec![(&prompt, &gt)];
        let items = vec![AdvItem {
            prompt: &prompt,
            response: &student,
            coef: 0.3,
        }];
        let rollout = make_rollout(&p, &old, vec![0], 609, 4, true);
        let (alpha, lambda) = (0.5, 0.02);

        let out = unified_loss(
            &p,
            &old,
            &reference,
            &batch,
            &items,
            std::slice::from_ref(&rollout),
            alpha,
            lambda,
            0.2,
            0.01,
        )
        .unwrap();
        let asft = asft_loss(&p, &batch, &items, lambda).unwrap();
        let agrpo = agrpo_loss(
            &p,
            &old,
            &reference,
            std::slice::from_ref(&rollout),
            0.2,
            0.01,
            lambda,
        )
        .unwrap();
        let mut expected = GradTable::zeros_like(&p);
        expected.add_scaled(&asft.gradient, alpha);
        expected.add_scaled(&agrpo.gradient, 1.0 - alpha);
        assert!(out.loss.gradient.max_abs_diff(&expected) < 1e-12);

        let recomposed = out.signals.recomposed();
        assert!(recomposed.max_abs_diff(&out.loss.gradient) < 1e-12);
    }

    #[test]
    fn unified_missing_weighted_slice_is_contract_error() {
        let p = random_policy(3, 1, 610);
        let old = PolicySnapshot::new(p.clone());
        let err = unified_loss(&p, &old, &p.clone(), &[], &[], &[], 1.0, 0.0, 0.2, 0.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn dpo_loss_at_reference_is_ln2() {
        let p = random_policy(3, 1, 701);
        let batch = vec![PreferenceRecord {
            prompt: Sequence::new(vec![0]),
            winner: Sequence::new(vec![1, 2]),
            loser: Sequence::new(vec![0, 2]),
        }];
        let lv = dpo_loss(&p, &p.clone(), &batch, 0.5).unwrap();
        assert!((lv.scalar - 2.0_f64.ln()).abs() < 1e-12);
        assert!((lv.scalar - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn dpo_unit_margin_hand_value() {
        // theta shifts the winner's single-token logit by exactly 1 relative
        // to the reference, so delta_w - delta_l = 1 and loss = -ln sigmoid(1).
        let v = vocab(2);
        let reference = PolicyParams::uniform(v.clone(), 1).unwrap();
        let mut p = PolicyParams::uniform(v, 1).unwrap();
        let state = p.state_for(&[0]);
        p.set_logit(state, 0, 1.0);
        let batch = vec![PreferenceRecord {
            prompt: Sequence::new(vec![0]),
            winner: Sequence::new(vec![0]),
            loser: Sequence::new(vec![1]),
        }];
        let lv = dpo_loss(&p, &reference, &batch, 1.0).unwrap();
        let expected = -(ln_sigmoid(1.0));
        assert!((lv.scalar - expected).abs() < 1e-12);
        assert!((lv.scalar - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn dpo_gradient_matches_fd() {
        let p = random_policy(3, 2, 702);
        let reference = random_policy(3, 2, 703);
        let batch = vec![
            PreferenceRecord {
                prompt: Sequence::new(vec![0, 1]),
                winner: Sequence::new(vec![1, 2]),
                loser: Sequence::new(vec![0, 0, 2]),
            },
            PreferenceRecord {
                prompt: Sequence::new(vec![1]),
                winner: Sequence::new(vec![0, 2]),
                loser: Sequence::new(vec![1, 2]),
            },
        ];
        let lv = dpo_loss(&p, &reference, &batch, 0.7).unwrap();
        let numeric = finite_diff(
            &p,
            |q| dpo_loss(q, &reference, &batch, 0.7).unwrap().scalar,
            1e-5,
        );
        assert_grad_close(&lv.gradient, &numeric, "dpo");
    }

    #[test]
    fn dpo_invariant_under_joint_constant_logit_shift() {
        let p = random_policy(3, 1, 704);
        let reference = random_policy(3, 1, 705);
        let batch = vec![PreferenceRecord {
            prompt: Sequence::new(vec![0]),
            winner: Sequence::new(vec![1, 2]),
            loser: Sequence::new(vec![0, 2]),
        }];
        let before = dpo_loss(&p, &reference, &batch, 0.5).unwrap().scalar;
        let mut p2 = p.clone();
        let mut r2 = reference.clone();
        for state in 0..p2.n_states() {
            for t in 0..3 {
                p2.add_logit(state, t, 1.37);
                r2.add_logit(state, t, 1.37);
            }
        }
        let after = dpo_loss(&p2, &r2, &batch, 0.5).unwrap().scalar;
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn kto_symmetric_batch_at_reference() {
        // At theta == reference all deltas are zero, so desirable items
        // contribute 1 - sigmoid(0) = 0.5 and undesirable items contribute
        // loss_aversion * 0.5.
        let p = random_policy(3, 1, 801);
        let batch = vec![
            BinaryLabelRecord {
                prompt: Sequence::new(vec![0]),
                response: Sequence::new(vec![1, 2]),
                label: BinaryLabel::Desirable,
            },
            BinaryLabelRecord {
                prompt: Sequence::new(vec![0]),
                response: Sequence::new(vec![0, 2]),
                label: BinaryLabel::Undesirable,
            },
        ];
        let la = 1.5;
        let lv = kto_loss(&p, &p.clone(), &batch, 1.0, la).unwrap();
        assert!((lv.scalar - (0.5 + la * 0.5) / 2.0).abs() < 1e-12);

        // With loss_aversion 1 the two mirrored contributions are equal.
        let lv1 = kto_loss(&p, &p.clone(), &batch, 1.0, 1.0).unwrap();
        assert!((lv1.scalar - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kto_gradient_matches_fd() {
        let p = random_policy(3, 1, 802);
        let reference = random_policy(3, 1, 803);
        let batch = vec![
            BinaryLabelRecord {
                prompt: Sequence::new(vec![0]),
                response: Sequence::new(vec![1, 2]),
                label: BinaryLabel::Desirable,
            },
            BinaryLabelRecord {
                prompt: Sequence::new(vec![1]),
                response: Sequence::new(vec![0, 0, 2]),
                label: BinaryLabel::Undesirable,
            },
            BinaryLabelRecord {
                prompt: Sequence::new(vec![0]),
                response: Sequence::new(vec![0, 2]),
                label: BinaryLabel::Desirable,
            },
        ];
        let lv = kto_loss(&p, &reference, &batch, 0.8, 1.5).unwrap();
        let numeric = finite_diff(
            &p,
            |q| kto_loss(q, &reference, &batch, 0.8, 1.5).unwrap().scalar,
            1e-5,
        );
        assert_grad_close(&lv.gradient, &numeric, "kto");
    }

    #[test]
    fn sft_minimizer_is_the_empirical_conditional() {
        // Full-batch descent on a one-token instance converges to the
        // empirical distribution of the batch: 3 of 4 targets are token 0.
        let mut p = PolicyParams::uniform(vocab(3), 1).unwrap();
        let prompt = Sequence::new(vec![1]);
        let t0 = Sequence::new(vec![0]);
        let t1 = Sequence::new(vec![1]);
        let batch = vec![
            (&prompt, &t0),
            (&prompt, &t0),
            (&prompt, &t0),
            (&prompt, &t1),
        ];
        for _ in 0..4000 {
            let lv = sft_loss(&p, &batch).unwrap();
            p.gradient_step(&lv.gradient, 0.5);
        }
        let dist = p.distribution_at(p.state_for(&[1]));
        assert!((dist[0] - 0.75).abs() < 1e-3, "{dist:?}");
        assert!((dist[1] - 0.25).abs() < 1e-3, "{dist:?}");
    }

    #[test]
    fn raising_probability_of_positive_advantage_response_lowers_grpo_loss() {
        let v = vocab(2);
        let old_params = PolicyParams::uniform(v.clone(), 1).unwrap();
        let old = PolicySnapshot::new(old_params.clone());
        let prompt = Sequence::new(vec![0]);
        let state = old_params.state_for(&[0]);
        let responses = vec![Sequence::new(vec![0]), Sequence::new(vec![0])];
        let old_lp: Vec<Vec<f64>> = vec![vec![old_params.token_logprob(state, 0)]; 2];
        let rollout = |_: ()| GroupRollout {
            prompt: prompt.clone(),
            responses: responses.clone(),
            rewards: vec![1.0, 1.0],
            advantages: vec![1.0, 1.0],
            old_logprobs: old_lp.clone(),
            coefs: None,
        };
        // Ratios stay inside the clip band: probabilities rise from 0.5 to
        // at most 0.55 < 0.5 * 1.2.
        let mut prev = f64::INFINITY;
        for bump in [0.0, 0.1, 0.2] {
            let mut p = PolicyParams::uniform(v.clone(), 1).unwrap();
            p.set_logit(state, 0, bump);
            let lv = grpo_loss(&p, &old, &old_params, &[rollout(())], 0.2, 0.0).unwrap();
            assert!(
                lv.scalar < prev,
                "loss must strictly decrease, got {} then {prev}",
                lv.scalar
            );
            prev = lv.scalar;
        }
    }

    #[test]
    fn mixed_reward_modes() {
        assert_eq!(mixed_reward(1.0, -2.0, 0.5, RewardMode::Rlvr), 1.0);
        assert_eq!(mixed_reward(1.0, -2.0, 0.5, RewardMode::RlvrPlusCoef), 1.5);
        assert_eq!(mixed_reward(0.0, -2.0, 0.5, RewardMode::RlvrPlusRaw), -2.0);
    }

    #[test]
    fn dirac_grid_equivalence_single_token() {
        let v = vocab(2);
        let target = Sequence::new(vec![0]);
        let report = dirac_equivalence_check(&v, &target, 1, 50, -3.0, 3.0).unwrap();
        assert_eq!(report.grid_points, 2500);
        assert!(report.maximizer_sets_equal);
        assert_eq!(report.max_pointwise_gap, 0.0);
        // Expected reward grows with the target logit and NLL shrinks.
        for i in 0..report.grid_points {
            let er = report.expected_reward[i];
            let nll = report.nll[i];
            assert!(((-nll).exp() - er).abs() < 1e-12);
        }
    }

    #[test]
    fn dirac_refuses_large_instances() {
        let v = vocab(4);
        let err = dirac_equivalence_check(&v, &Sequence::new(vec![0]), 1, 10, -1.0, 1.0);
        assert!(matches!(err, Err(Error::Refused(_))));
    }

    #[test]
    fn adversarial_composite_fd_on_enumerable_instance() {
        // On a one-step enumerable policy the exact adversarial loss
        // L(theta) = -sum_y pi(y) coef(y) can be differentiated numerically;
        // the expectation of the estimator must match it.
        let v = vocab(2);
        let mut rng = seeded_rng(901, "adv-fd");
        let params = PolicyParams::random(v.clone(), 1, 1.0, &mut rng).unwrap();
        let prompt = Sequence::new(vec![0]);
        let scorer = random_policy(2, 1, 902);
        let kind = DiscriminatorKind::LogLikelihoodOracle {
            scorer,
            scale: DEFAULT_ORACLE_SCALE,
        };
        let teacher_resp = Sequence::new(vec![0]);
        let responses = [Sequence::new(vec![0]), Sequence::new(vec![1])];
        let coefs: Vec<f64> = responses
            .iter()
            .map(|r| score(&kind, &prompt, &teacher_resp, r).unwrap().coef)
            .collect();

        let exact_loss = |q: &PolicyParams| {
            let state = q.state_for(&[0]);
            let dist = q.distribution_at(state);
            -(dist[0] * coefs[0] + dist[1] * coefs[1])
        };
        let numeric = finite_diff(&params, exact_loss, 1e-5);

        // Expectation of the estimator over the enumerable response space.
        let state = params.state_for(&[0]);
        let dist = params.distribution_at(state);
        let baseline = dist[0] * coefs[0] + dist[1] * coefs[1];
        let mut analytic = GradTable::zeros_like(&params);
        for (y, resp) in responses.iter().enumerate() {
            let g = crate::disc::adversarial_gradient(&params, &prompt, resp, coefs[y], baseline);
            analytic.add_scaled(&g, dist[y]);
        }
        assert_grad_close(&analytic, &numeric, "adversarial composite");
    }
}
