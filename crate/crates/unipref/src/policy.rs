//! Exact autoregressive softmax policies over a context-order-k logit table.
//!
//! A policy conditions its next-token distribution on the previous `k` tokens
//! of the full sequence (prompt followed by response so far); positions with
//! fewer than `k` predecessors are left-padded with a reserved begin state.
//! Everything downstream — sampling, log-likelihoods, analytic gradients, KL
//! terms — is exact, which is what lets every loss be checked against finite
//! differences and brute-force enumeration.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Sequence, Vocabulary};

/// Dense gradient (or generic tangent) table with the same shape as a
/// policy's logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    n_states: usize,
    vocab_size: usize,
    values: Vec<f64>,
}

impl GradTable {
    pub fn zeros(n_states: usize, vocab_size: usize) -> Self {
        GradTable {
            n_states,
            vocab_size,
            values: vec![0.0; n_states * vocab_size],
        }
    }

    pub fn zeros_like(params: &PolicyParams) -> Self {
        GradTable::zeros(params.n_states, params.vocab.size())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, state: usize, token: usize) -> f64 {
        self.values[state * self.vocab_size + token]
    }

    pub fn add_at(&mut self, state: usize, token: usize, delta: f64) {
        self.values[state * self.vocab_size + token] += delta;
    }

    fn assert_same_shape(&self, other: &GradTable) {
        assert_eq!(
            self.n_states, other.n_states,
            "gradient table state mismatch"
        );
        assert_eq!(
            self.vocab_size, other.vocab_size,
            "gradient table vocab mismatch"
        );
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &GradTable, c: f64) {
        self.assert_same_shape(other);
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.values.iter_mut() {
            *a *= c;
        }
    }

    pub fn dot(&self, other: &GradTable) -> f64 {
        self.assert_same_shape(other);
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Cosine similarity; 0 when either argument is the zero table.
    pub fn cosine(&self, other: &GradTable) -> f64 {
        let na = self.l2_norm();
        let nb = other.l2_norm();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            self.dot(other) / (na * nb)
        }
    }

    pub fn max_abs_diff(&self, other: &GradTable) -> f64 {
        self.assert_same_shape(other);
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Context-conditioned logit table defining an autoregressive softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocabulary,
    context_order: usize,
    n_states: usize,
    logits: Vec<f64>,
}

/// Incrementally tracks the context state while walking a token sequence.
#[derive(Debug, Clone)]
pub struct ContextRoller {
    base: usize,
    msd: usize, // base^(k-1), weight of the oldest context slot
    state: usize,
}

impl ContextRoller {
    fn new(vocab_size: usize, context_order: usize) -> Self {
        let base = vocab_size + 1; // extra code for the begin state
        let bos = vocab_size;
        let mut msd = 1;
        let mut state = 0;
        for _ in 0..context_order {
            state = state * base + bos;
        }
        for _ in 0..context_order.saturating_sub(1) {
            msd *= base;
        }
        ContextRoller { base, msd, state }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn push(&mut self, token: usize) {
        self.state = (self.state % self.msd) * self.base + token;
    }
}

impl PolicyParams {
    /// Uniform policy: all logits zero.
    pub fn uniform(vocab: Vocabulary, context_order: usize) -> Result<Self> {
        if context_order == 0 {
            return Err(Error::Validation("context_order must be >= 1".into()));
        }
        let base = vocab.size() + 1;
        let mut n_states: usize = 1;
        for _ in 0..context_order {
            n_states = n_states
                .checked_mul(base)
                .ok_or_else(|| Error::Validation("context state space overflows".into()))?;
        }
        let len = n_states
            .checked_mul(vocab.size())
            .ok_or_else(|| Error::Validation("logit table too large".into()))?;
        Ok(PolicyParams {
            vocab,
            context_order,
            n_states,
            logits: vec![0.0; len],
        })
    }

    /// Policy with iid uniform logits in `[-scale, scale]`.
    pub fn random(
        vocab: Vocabulary,
        context_order: usize,
        scale: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let mut p = PolicyParams::uniform(vocab, context_order)?;
        for l in p.logits.iter_mut() {
            *l = (rng.random::<f64>() * 2.0 - 1.0) * scale;
        }
        Ok(p)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logit(&self, state: usize, token: usize) -> f64 {
        self.logits[state * self.vocab.size() + token]
    }

    pub fn set_logit(&mut self, state: usize, token: usize, value: f64) {
        self.logits[state * self.vocab.size() + token] = value;
    }

    pub fn add_logit(&mut self, state: usize, token: usize, delta: f64) {
        self.logits[state * self.vocab.size() + token] += delta;
    }

    pub fn roller(&self) -> ContextRoller {
        ContextRoller::new(self.vocab.size(), self.context_order)
    }

    /// State reached after consuming `context` from the begin state. Only the
    /// last `context_order` tokens matter.
    pub fn state_for(&self, context: &[usize]) -> usize {
        let mut roller = self.roller();
        let start = context.len().saturating_sub(self.context_order);
        for &t in &context[start..] {
            roller.push(t);
        }
        roller.state()
    }

    fn row(&self, state: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[state * v..(state + 1) * v]
    }

    /// Softmax of the logit row for `state`. Entries are positive and sum to
    /// one within 1e-12.
    pub fn distribution_at(&self, state: usize) -> Vec<f64> {
        let row = self.row(state);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for p in out.iter_mut() {
            *p /= sum;
        }
        out
    }

    /// Next-token distribution given the trailing `context` tokens.
    pub fn next_token_distribution(&self, context: &[usize]) -> Vec<f64> {
        self.distribution_at(self.state_for(context))
    }

    fn log_partition(&self, state: usize) -> f64 {
        let row = self.row(state);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
        max + sum.ln()
    }

    pub fn token_logprob(&self, state: usize, token: usize) -> f64 {
        self.logit(state, token) - self.log_partition(state)
    }

    /// Walk `response` conditioned on `prompt`, invoking
    /// `visit(state, token, position)` at every response position.
    pub fn visit_response<F: FnMut(usize, usize, usize)>(
        &self,
        prompt: &Sequence,
        response: &Sequence,
        mut visit: F,
    ) {
        let mut roller = self.roller();
        for &t in prompt.tokens() {
            roller.push(t);
        }
        for (pos, &t) in response.tokens().iter().enumerate() {
            visit(roller.state(), t, pos);
            roller.push(t);
        }
    }

    fn walk<F: FnMut(usize, usize)>(&self, prompt: &Sequence, response: &Sequence, mut visit: F) {
        self.visit_response(prompt, response, |state, token, _| visit(state, token));
    }

    /// Sum of per-token conditional log-probabilities of `response` given
    /// `prompt`.
    pub fn sequence_logprob(&self, prompt: &Sequence, response: &Sequence) -> f64 {
        let mut total = 0.0;
        self.walk(prompt, response, |state, token| {
            total += self.token_logprob(state, token);
        });
        total
    }

    /// Sample a response token by token until eos is drawn or `max_len`
    /// tokens have been emitted.
    pub fn sample_response(
        &self,
        prompt: &Sequence,
        max_len: usize,
        rng: &mut ChaCha12Rng,
    ) -> Sequence {
        assert!(max_len >= 1, "max_len must be >= 1");
        let mut roller = self.roller();
        for &t in prompt.tokens() {
            roller.push(t);
        }
        let mut out = Sequence::empty();
        for _ in 0..max_len {
            let dist = self.distribution_at(roller.state());
            let token = sample_index(&dist, rng);
            out.push(token);
            if token == self.vocab.eos_index() {
                break;
            }
            roller.push(token);
        }
        out
    }

    /// Exact gradient of `sequence_logprob` with respect to the logit table:
    /// at each visited context, one-hot of the taken token minus the
    /// predicted distribution; zero elsewhere.
    pub fn logprob_gradient(&self, prompt: &Sequence, response: &Sequence) -> GradTable {
        let mut table = GradTable::zeros_like(self);
        self.accumulate_logprob_gradient(prompt, response, 1.0, &mut table);
        table
    }

    /// `table += weight * d(sequence_logprob)/d(logits)`.
    pub fn accumulate_logprob_gradient(
        &self,
        prompt: &Sequence,
        response: &Sequence,
        weight: f64,
        table: &mut GradTable,
    ) {
        self.walk(prompt, response, |state, token| {
            let dist = self.distribution_at(state);
            for (u, &p_u) in dist.iter().enumerate() {
                let indicator = if u == token { 1.0 } else { 0.0 };
                table.add_at(state, u, weight * (indicator - p_u));
            }
        });
    }

    /// Mean over response positions of the exact per-context categorical KL
    /// `KL(self(.|ctx) || other(.|ctx))`.
    pub fn kl_to(
        &self,
        other: &PolicyParams,
        prompt: &Sequence,
        response: &Sequence,
    ) -> Result<f64> {
        self.check_compatible(other)?;
        let mut total = 0.0;
        let mut count = 0usize;
        self.walk(prompt, response, |state, _token| {
            let p = self.distribution_at(state);
            let q = other.distribution_at(state);
            total += categorical_kl(&p, &q);
            count += 1;
        });
        if count == 0 {
            Ok(0.0)
        } else {
            Ok(total / count as f64)
        }
    }

    /// `table += weight * d/d(self logits) [ mean-position KL(self || other) ]`
    /// along the contexts visited by `response`.
    pub fn accumulate_kl_gradient(
        &self,
        other: &PolicyParams,
        prompt: &Sequence,
        response: &Sequence,
        weight: f64,
        table: &mut GradTable,
    ) {
        let positions = response.len();
        if positions == 0 {
            return;
        }
        let v = self.vocab.size();
        let w = weight / positions as f64;
        self.walk(prompt, response, |state, _token| {
            let p = self.distribution_at(state);
            let q = other.distribution_at(state);
            let kl = categorical_kl(&p, &q);
            for u in 0..v {
                table.add_at(state, u, w * p[u] * ((p[u] / q[u]).ln() - kl));
            }
        });
    }

    /// Contract check: same vocabulary and context order.
    pub fn check_compatible(&self, other: &PolicyParams) -> Result<()> {
        if self.vocab != other.vocab {
            return Err(Error::Contract(
                "policies have different vocabularies".into(),
            ));
        }
        if self.context_order != other.context_order {
            return Err(Error::Contract(
                "policies have different context orders".into(),
            ));
        }
        Ok(())
    }

    /// Exact KL between the full response distributions of two policies by
    /// enumerating every response of length up to `max_len`. Refuses
    /// instances too large to enumerate.
    pub fn exact_sequence_kl(
        &self,
        other: &PolicyParams,
        prompt: &Sequence,
        max_len: usize,
    ) -> Result<f64> {
        self.check_compatible(other)?;
        let mut total = 0.0;
        for response in enumerate_response_space(&self.vocab, max_len)? {
            let p = self.sequence_logprob(prompt, &response).exp();
            let q = other.sequence_logprob(prompt, &response).exp();
            if p > 0.0 {
                total += p * (p / q).ln();
            }
        }
        Ok(total)
    }

    /// In-place plain gradient-descent step: `logits -= lr * grad`.
    pub fn gradient_step(&mut self, grad: &GradTable, lr: f64) {
        assert_eq!(grad.n_states, self.n_states);
        assert_eq!(grad.vocab_size, self.vocab.size());
        for (l, g) in self.logits.iter_mut().zip(grad.values.iter()) {
            *l -= lr * g;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.logits.iter().all(|l| l.is_finite())
    }
}

/// Frozen copy of policy parameters taken at a step boundary.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: PolicyParams,
}

impl PolicySnapshot {
    pub fn new(params: PolicyParams) -> Self {
        PolicySnapshot { params }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// Inverse-CDF draw from a probability vector.
fn sample_index(dist: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut cum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    dist.len() - 1
}

const ENUMERATION_MAX_LEN: usize = 6;
const ENUMERATION_MAX_SEQUENCES: usize = 2_000_000;

/// All sequences a sampler can emit with the given cap: responses that end
/// with eos at some length `<= max_len`, plus eos-free responses of exactly
/// `max_len` tokens. Their probabilities under any policy sum to one.
pub fn enumerate_response_space(vocab: &Vocabulary, max_len: usize) -> Result<Vec<Sequence>> {
    if max_len > ENUMERATION_MAX_LEN {
        return Err(Error::Refused(format!(
            "max_len {max_len} exceeds enumeration bound {ENUMERATION_MAX_LEN}"
        )));
    }
    let v = vocab.size();
    let mut bound: usize = 1;
    for _ in 0..max_len {
        bound = bound.saturating_mul(v);
        if bound > ENUMERATION_MAX_SEQUENCES {
            return Err(Error::Refused(format!(
                "vocabulary size {v} with max_len {max_len} is too large to enumerate"
            )));
        }
    }
    let eos = vocab.eos_index();
    let non_eos: Vec<usize> = (0..v).filter(|&t| t != eos).collect();
    let mut out = Vec::new();
    let mut prefix: Vec<usize> = Vec::new();
    fn recurse(
        prefix: &mut Vec<usize>,
        non_eos: &[usize],
        eos: usize,
        max_len: usize,
        out: &mut Vec<Sequence>,
    ) {
        if prefix.len() == max_len {
            out.push(Sequence::new(prefix.clone()));
            return;
        }
        let mut with_eos = prefix.clone();
        with_eos.push(eos);
        out.push(Sequence::new(with_eos));
        for &t in non_eos {
            prefix.push(t);
            recurse(prefix, non_eos, eos, max_len, out);
            prefix.pop();
        }
    }
    recurse(&mut prefix, &non_eos, eos, max_len, &mut out);
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    context_order: usize,
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRow {
    state: usize,
    logits: Vec<f64>,
}

/// Line-delimited checkpoint: a header line followed by one
/// (state, logit vector) row per context state. Round-trip exact.
pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CheckpointHeader {
        version: 1,
        context_order: params.context_order,
        vocab: params.vocab.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let v = params.vocab.size();
    for state in 0..params.n_states {
        let row = CheckpointRow {
            state,
            logits: params.logits[state * v..(state + 1) * v].to_vec(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        message: "missing checkpoint header".into(),
    })??;
    let header: CheckpointHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: 1,
            message: e.to_string(),
        })?;
    if header.version != 1 {
        return Err(Error::Parse {
            path: display.clone(),
            line: 1,
            message: format!("unsupported checkpoint version {}", header.version),
        });
    }
    let mut params = PolicyParams::uniform(header.vocab, header.context_order)?;
    let v = params.vocab.size();
    let mut seen = 0usize;
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CheckpointRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: idx + 2,
            message: e.to_string(),
        })?;
        if row.state >= params.n_states || row.logits.len() != v {
            return Err(Error::Parse {
                path: display.clone(),
                line: idx + 2,
                message: "checkpoint row shape mismatch".into(),
            });
        }
        for (token, &l) in row.logits.iter().enumerate() {
            params.set_logit(row.state, token, l);
        }
        seen += 1;
    }
    if seen != params.n_states {
        return Err(Error::Validation(format!(
            "checkpoint covers {seen} of {} states",
            params.n_states
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn vocab(n: usize) -> Vocabulary {
        let symbols: Vec<String> = (0..n - 1)
            .map(|i| format!("w{i}"))
            .chain(std::iter::once("<eos>".to_string()))
            .collect();
        Vocabulary::new(symbols, n - 1).unwrap()
    }

    fn random_policy(v: usize, k: usize, seed: u64) -> PolicyParams {
        let mut rng = seeded_rng(seed, "test-policy");
        PolicyParams::random(vocab(v), k, 2.0, &mut rng).unwrap()
    }

    #[test]
    fn uniform_distribution_on_zero_logits() {
        let p = PolicyParams::uniform(vocab(4), 1).unwrap();
        let d = p.next_token_distribution(&[]);
        assert_eq!(d, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn closed_form_softmax() {
        let mut p = PolicyParams::uniform(vocab(2), 1).unwrap();
        let state = p.state_for(&[]);
        p.set_logit(state, 0, 2.0_f64.ln());
        p.set_logit(state, 1, 0.0);
        let d = p.distribution_at(state);
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn distributions_normalize() {
        let p = random_policy(7, 2, 9);
        for state in 0..p.n_states() {
            let d = p.distribution_at(state);
            let sum: f64 = d.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut p = random_policy(5, 1, 11);
        let state = p.state_for(&[2]);
        let before = p.distribution_at(state);
        for t in 0..5 {
            p.add_logit(state, t, 7.25);
        }
        let after = p.distribution_at(state);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_sequence_logprob() {
        let p = PolicyParams::uniform(vocab(2), 1).unwrap();
        let lp = p.sequence_logprob(&Sequence::new(vec![0]), &Sequence::new(vec![0, 0]));
        assert!((lp - 2.0 * (0.5_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn near_deterministic_policy_logprob_near_zero() {
        // +20 logit margin: log p = -ln(1 + (V-1) e^{-20}) per position.
        let v = 4;
        let mut p = PolicyParams::uniform(vocab(v), 1).unwrap();
        let path = [0usize, 1, 2, 3];
        let mut ctx: Vec<usize> = vec![];
        for &t in &path {
            let state = p.state_for(&ctx);
            p.set_logit(state, t, 20.0);
            ctx.push(t);
        }
        let lp = p.sequence_logprob(&Sequence::empty(), &Sequence::new(path.to_vec()));
        let per_pos = -(1.0 + (v as f64 - 1.0) * (-20.0_f64).exp()).ln();
        assert!((lp - 4.0 * per_pos).abs() < 1e-12);
        assert!(lp.abs() < 1e-8 * 4.0 + 1e-7);
    }

    #[test]
    fn logprob_chain_rule() {
        let p = random_policy(5, 2, 13);
        let prompt = Sequence::new(vec![0, 1]);
        let whole = Sequence::new(vec![2, 3, 1, 4]);
        let first = Sequence::new(vec![2, 3]);
        let mut extended_prompt = prompt.clone();
        extended_prompt.push(2);
        extended_prompt.push(3);
        let second = Sequence::new(vec![1, 4]);
        let lhs = p.sequence_logprob(&prompt, &whole);
        let rhs =
            p.sequence_logprob(&prompt, &first) + p.sequence_logprob(&extended_prompt, &second);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn deterministic_policy_samples_greedy_path() {
        let v = 3;
        let mut p = PolicyParams::uniform(vocab(v), 1).unwrap();
        for state in 0..p.n_states() {
            p.set_logit(state, 0, 50.0);
        }
        // After emitting token 0, keep emitting eos.
        let s0 = p.state_for(&[0]);
        p.set_logit(s0, 0, 0.0);
        p.set_logit(s0, 2, 50.0);
        for trial in 0..5 {
            let mut rng = seeded_rng(trial, "greedy");
            let resp = p.sample_response(&Sequence::new(vec![1]), 8, &mut rng);
            assert_eq!(resp.tokens(), &[0, 2]);
        }
    }

    #[test]
    fn uniform_sampling_frequencies_within_3_sigma() {
        let v = 4;
        let p = PolicyParams::uniform(vocab(v), 1).unwrap();
        let n = 100_000;
        let mut rng = seeded_rng(7, "freq");
        let mut counts = vec![0usize; v];
        let prompt = Sequence::new(vec![0]);
        for _ in 0..n {
            let resp = p.sample_response(&prompt, 1, &mut rng);
            counts[resp.tokens()[0]] += 1;
        }
        let expected = n as f64 / v as f64;
        let sigma = (n as f64 * (1.0 / v as f64) * (1.0 - 1.0 / v as f64)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "count {c} outside 3 sigma of {expected}"
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let p = random_policy(6, 1, 17);
        let prompt = Sequence::new(vec![1, 2]);
        let a = p.sample_response(&prompt, 10, &mut seeded_rng(5, "s"));
        let b = p.sample_response(&prompt, 10, &mut seeded_rng(5, "s"));
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_one_hot_minus_uniform() {
        let p = PolicyParams::uniform(vocab(2), 1).unwrap();
        let prompt = Sequence::empty();
        let resp = Sequence::new(vec![0]);
        let g = p.logprob_gradient(&prompt, &resp);
        let state = p.state_for(&[]);
        assert!((g.get(state, 0) - 0.5).abs() < 1e-15);
        assert!((g.get(state, 1) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradient_zero_on_unvisited_contexts() {
        let p = random_policy(4, 1, 3);
        let g = p.logprob_gradient(&Sequence::new(vec![0]), &Sequence::new(vec![1, 3]));
        // Visited states: after prompt token 0, and after response token 1.
        let visited = [p.state_for(&[0]), p.state_for(&[1])];
        for state in 0..p.n_states() {
            if visited.contains(&state) {
                continue;
            }
            for t in 0..4 {
                assert_eq!(g.get(state, t), 0.0);
            }
        }
    }

    /// Central finite differences of `sequence_logprob` over every logit.
    fn finite_diff_logprob(
        params: &PolicyParams,
        prompt: &Sequence,
        response: &Sequence,
        h: f64,
    ) -> GradTable {
        let mut out = GradTable::zeros_like(params);
        let v = params.vocab().size();
        for state in 0..params.n_states() {
            for t in 0..v {
                let mut plus = params.clone();
                plus.add_logit(state, t, h);
                let mut minus = params.clone();
                minus.add_logit(state, t, -h);
                let d = (plus.sequence_logprob(prompt, response)
                    - minus.sequence_logprob(prompt, response))
                    / (2.0 * h);
                out.add_at(state, t, d);
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for case in 0..100 {
            let v = 2 + (case % 3);
            let p = random_policy(v, 1 + (case % 2), 1000 + case as u64);
            let mut rng = seeded_rng(case as u64, "fd-seqs");
            let prompt = p.sample_response(&Sequence::empty(), 3, &mut rng);
            let prompt = if prompt.content_len(p.vocab()) == 0 {
                Sequence::new(vec![0])
            } else {
                Sequence::new(prompt.content_tokens(p.vocab()).to_vec())
            };
            let response = p.sample_response(&prompt, 4, &mut rng);
            let analytic = p.logprob_gradient(&prompt, &response);
            let numeric = finite_diff_logprob(&p, &prompt, &response, 1e-5);
            let diff = analytic.max_abs_diff(&numeric);
            let scale = analytic.l2_norm().max(1.0);
            assert!(
                diff / scale < 1e-5,
                "case {case}: fd mismatch {diff} vs norm {scale}"
            );
        }
    }

    #[test]
    fn higher_order_context_keeps_a_sliding_window() {
        let p = random_policy(4, 3, 71);
        // Only the last k tokens matter.
        assert_eq!(p.state_for(&[2, 0, 1, 3]), p.state_for(&[0, 1, 3]));
        assert_ne!(p.state_for(&[0, 1, 3]), p.state_for(&[1, 1, 3]));
        // Short contexts are padded with the begin state, so they differ
        // from any real-token context.
        assert_ne!(p.state_for(&[1, 3]), p.state_for(&[0, 1, 3]));
        // The incremental roller agrees with direct state computation.
        let mut roller = p.roller();
        for &t in &[2usize, 0, 1, 3] {
            roller.push(t);
        }
        assert_eq!(roller.state(), p.state_for(&[2, 0, 1, 3]));
        // Probabilities still normalize at order 3.
        let d = p.next_token_distribution(&[2, 0, 1, 3]);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_identities() {
        let p = random_policy(4, 1, 21);
        let q = random_policy(4, 1, 22);
        let prompt = Sequence::new(vec![0]);
        let resp = Sequence::new(vec![1, 2, 3]);
        assert_eq!(p.kl_to(&p, &prompt, &resp).unwrap(), 0.0);
        assert!(p.kl_to(&q, &prompt, &resp).unwrap() >= 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // p = [0.5, 0.5], q = [0.75, 0.25] at a single position.
        let mut p = PolicyParams::uniform(vocab(2), 1).unwrap();
        let mut q = PolicyParams::uniform(vocab(2), 1).unwrap();
        let state = p.state_for(&[0]);
        p.set_logit(state, 0, 0.0);
        q.set_logit(state, 0, 3.0_f64.ln());
        let prompt = Sequence::new(vec![0]);
        let resp = Sequence::new(vec![0]);
        let kl = p.kl_to(&q, &prompt, &resp).unwrap();
        let expected = 0.5 * (0.5_f64 / 0.75).ln() + 0.5 * (0.5_f64 / 0.25).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_mismatched_vocabulary() {
        let p = random_policy(4, 1, 31);
        let q = random_policy(5, 1, 32);
        let err = p.kl_to(&q, &Sequence::new(vec![0]), &Sequence::new(vec![1]));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn exact_sequence_kl_identical_policies_zero() {
        let p = random_policy(3, 1, 41);
        let kl = p.exact_sequence_kl(&p, &Sequence::new(vec![0]), 3).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn exact_sequence_kl_single_position_reduces_to_kl_to() {
        let p = random_policy(3, 1, 43);
        let q = random_policy(3, 1, 44);
        let prompt = Sequence::new(vec![1]);
        // With max_len 1 every response is a single token, so the sequence KL
        // is the categorical KL at the prompt's final context.
        let seq_kl = p.exact_sequence_kl(&q, &prompt, 1).unwrap();
        let state = p.state_for(&[1]);
        let pd = p.distribution_at(state);
        let qd = q.distribution_at(state);
        let cat: f64 = pd
            .iter()
            .zip(qd.iter())
            .map(|(&a, &b)| a * (a / b).ln())
            .sum();
        assert!((seq_kl - cat).abs() < 1e-12);
    }

    #[test]
    fn exact_sequence_kl_matches_independent_enumeration() {
        let p = random_policy(2, 1, 45);
        let q = random_policy(2, 1, 46);
        let prompt = Sequence::new(vec![0]);
        let got = p.exact_sequence_kl(&q, &prompt, 3).unwrap();
        // Independent brute force: walk the 8 leaves of the depth-3 sampling
        // tree by hand (token 0 = content, token 1 = eos).
        let mut expected = 0.0;
        let seqs: Vec<Vec<usize>> = vec![vec![1], vec![0, 1], vec![0, 0, 1], vec![0, 0, 0]];
        for tokens in seqs {
            let resp = Sequence::new(tokens);
            let lp = p.sequence_logprob(&prompt, &resp);
            let lq = q.sequence_logprob(&prompt, &resp);
            expected += lp.exp() * (lp - lq);
        }
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn exact_sequence_kl_refuses_large_instances() {
        let p = random_policy(4, 1, 47);
        let err = p.exact_sequence_kl(&p, &Sequence::new(vec![0]), 12);
        assert!(matches!(err, Err(Error::Refused(_))));
    }

    #[test]
    fn response_space_probabilities_sum_to_one() {
        let p = random_policy(3, 2, 51);
        let prompt = Sequence::new(vec![0, 1]);
        let total: f64 = enumerate_response_space(p.vocab(), 4)
            .unwrap()
            .iter()
            .map(|r| p.sequence_logprob(&prompt, r).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let p = random_policy(5, 2, 61);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.jsonl");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }
}
