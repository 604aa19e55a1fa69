//! Synthetic instruction-following environments: prompt/constraint
//! generation, a constructed teacher policy, and ground-truth datasets built
//! by rejection filtering against the verifier.
//!
//! Constraints are encoded into the prompt through reserved marker tokens so
//! a policy can condition on them; the encoding is bijective on the supported
//! families, and the informative tokens sit at the end of the prompt where a
//! low-order context window can see them. The teacher is deliberately
//! imperfect: its sample pass rate targets `p_sat`, not 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryLabel, BinaryLabelRecord, ExampleRecord, PreferenceRecord};
use crate::error::{Error, Result};
use crate::loss::sft_loss;
use crate::policy::PolicyParams;
use crate::rng::seeded_rng;
use crate::verify::{verifiable_reward, ConstraintSpec, Detokenizer};
use crate::vocab::{Sequence, Vocabulary};

// Fixed vocabulary layout: eos, six constraint markers, the placeholder and
// divider words, then plain content words (palindromes first).
pub const T_EOS: usize = 0;
pub const T_KW: usize = 1;
pub const T_PH: usize = 2;
pub const T_PAL: usize = 3;
pub const T_PARA: usize = 4;
pub const T_LEN: usize = 5;
pub const T_FORBID: usize = 6;
pub const T_PLACEHOLDER: usize = 7;
pub const T_DIVIDER: usize = 8;
pub const PLAIN_START: usize = 9;

const MARKERS: [(&str, usize); 6] = [
    ("<kw>", T_KW),
    ("<ph>", T_PH),
    ("<pal>", T_PAL),
    ("<para>", T_PARA),
    ("<len>", T_LEN),
    ("<forbid>", T_FORBID),
];

/// Plain content words; the two leading palindromes satisfy the palindrome
/// constraint. None is a substring of another, which keeps the
/// substring-based keyword check exact at the word level.
const PLAIN_WORDS: [&str; 22] = [
    "noon", "level", "amber", "basil", "cedar", "delta", "ember", "flint", "grove", "haze", "iris",
    "jade", "koru", "lumen", "maple", "quartz", "ridge", "sable", "tide", "wren", "yarrow",
    "zephyr",
];

const MIN_VOCAB: usize = PLAIN_START + 3;

/// Relative sampling weights of the constraint families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeights {
    pub keyword: f64,
    pub placeholders: f64,
    pub palindrome: f64,
    pub paragraphs: f64,
    pub length: f64,
    pub forbidden: f64,
}

impl Default for FamilyWeights {
    fn default() -> Self {
        FamilyWeights {
            keyword: 3.0,
            placeholders: 2.0,
            palindrome: 1.0,
            paragraphs: 1.0,
            length: 0.0,
            forbidden: 0.0,
        }
    }
}

impl FamilyWeights {
    fn entries(&self) -> [(Family, f64); 6] {
        [
            (Family::Keyword, self.keyword),
            (Family::Placeholders, self.placeholders),
            (Family::Palindrome, self.palindrome),
            (Family::Paragraphs, self.paragraphs),
            (Family::Length, self.length),
            (Family::Forbidden, self.forbidden),
        ]
    }

    fn validate(&self) -> Result<()> {
        let entries = self.entries();
        if entries.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::Validation(
                "constraint family weights must be nonnegative".into(),
            ));
        }
        if entries.iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::Validation(
                "at least one constraint family weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Keyword,
    Placeholders,
    Palindrome,
    Paragraphs,
    Length,
    Forbidden,
}

/// Synthetic task description: vocabulary, prompt/response geometry,
/// constraint mix, dataset sizes, and the generation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub max_response_len: usize,
    pub weights: FamilyWeights,
    pub n_sft: usize,
    pub n_pref: usize,
    pub constraints_per_prompt: usize,
    pub placeholder_max_n: usize,
    pub paragraph_max_n: usize,
    pub context_order: usize,
    /// Teacher samples tried per record when filtering for ground truth.
    pub gt_attempts: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 14,
            prompt_len: 4,
            max_response_len: 6,
            weights: FamilyWeights::default(),
            n_sft: 64,
            n_pref: 64,
            constraints_per_prompt: 1,
            placeholder_max_n: 2,
            paragraph_max_n: 2,
            context_order: 2,
            gt_attempts: 4,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Validation(format!(
                "task vocab_size must be >= {MIN_VOCAB} (eos, markers, special and plain words)"
            )));
        }
        if self.vocab_size > PLAIN_START + PLAIN_WORDS.len() {
            return Err(Error::Validation(format!(
                "task vocab_size must be <= {}",
                PLAIN_START + PLAIN_WORDS.len()
            )));
        }
        if self.prompt_len < 3 {
            return Err(Error::Validation("prompt_len must be >= 3".into()));
        }
        if self.max_response_len < 3 {
            return Err(Error::Validation("max_response_len must be >= 3".into()));
        }
        if self.constraints_per_prompt < 1 {
            return Err(Error::Validation(
                "constraints_per_prompt must be >= 1".into(),
            ));
        }
        if self.placeholder_max_n < 1 || self.placeholder_max_n > 3 {
            return Err(Error::Validation(
                "placeholder_max_n must be in 1..=3".into(),
            ));
        }
        if !(2..=3).contains(&self.paragraph_max_n) {
            return Err(Error::Validation("paragraph_max_n must be 2 or 3".into()));
        }
        if self.context_order == 0 || self.context_order > 3 {
            return Err(Error::Validation("context_order must be in 1..=3".into()));
        }
        if self.gt_attempts < 1 {
            return Err(Error::Validation("gt_attempts must be >= 1".into()));
        }
        self.weights.validate()
    }

    /// Read `task.*` keys from a raw config map, leaving other keys alone.
    pub fn from_map(raw: &BTreeMap<String, String>) -> Result<TaskSpec> {
        let mut task = TaskSpec::default();
        for (key, value) in raw {
            let Some(field) = key.strip_prefix("task.") else {
                continue;
            };
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::Config {
                    field: key.clone(),
                    message: format!("cannot parse `{v}`"),
                })
            };
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Config {
                    field: key.clone(),
                    message: format!("cannot parse `{v}`"),
                })
            };
            match field {
                "vocab_size" => task.vocab_size = parse_usize(value)?,
                "prompt_len" => task.prompt_len = parse_usize(value)?,
                "max_response_len" => task.max_response_len = parse_usize(value)?,
                "n_sft" => task.n_sft = parse_usize(value)?,
                "n_pref" => task.n_pref = parse_usize(value)?,
                "constraints_per_prompt" => task.constraints_per_prompt = parse_usize(value)?,
                "placeholder_max_n" => task.placeholder_max_n = parse_usize(value)?,
                "paragraph_max_n" => task.paragraph_max_n = parse_usize(value)?,
                "context_order" => task.context_order = parse_usize(value)?,
                "gt_attempts" => task.gt_attempts = parse_usize(value)?,
                "seed" => {
                    task.seed = value.parse().map_err(|_| Error::Config {
                        field: key.clone(),
                        message: format!("cannot parse `{value}`"),
                    })?
                }
                "weight.keyword" => task.weights.keyword = parse_f64(value)?,
                "weight.placeholders" => task.weights.placeholders = parse_f64(value)?,
                "weight.palindrome" => task.weights.palindrome = parse_f64(value)?,
                "weight.paragraphs" => task.weights.paragraphs = parse_f64(value)?,
                "weight.length" => task.weights.length = parse_f64(value)?,
                "weight.forbidden" => task.weights.forbidden = parse_f64(value)?,
                // Teacher keys are read by TeacherSpec::from_map.
                "teacher_mode" | "p_sat" | "train_budget" => {}
                other => {
                    return Err(Error::Config {
                        field: format!("task.{other}"),
                        message: "unknown task key".into(),
                    })
                }
            }
        }
        task.validate()?;
        Ok(task)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.validate()?;
        let mut symbols = vec!["<eos>".to_string()];
        for (name, _) in MARKERS {
            symbols.push(name.to_string());
        }
        symbols.push("[x]".to_string());
        symbols.push("***".to_string());
        for word in PLAIN_WORDS.iter().take(self.vocab_size - PLAIN_START) {
            symbols.push(word.to_string());
        }
        Vocabulary::new(symbols, T_EOS)
    }
}

fn plain_tokens(vocab: &Vocabulary) -> Vec<usize> {
    (PLAIN_START..vocab.size()).collect()
}

fn palindrome_tokens(vocab: &Vocabulary) -> Vec<usize> {
    plain_tokens(vocab)
        .into_iter()
        .filter(|&t| {
            let w = vocab.symbol(t);
            let chars: Vec<char> = w.chars().collect();
            chars.len() >= 2 && chars.iter().eq(chars.iter().rev())
        })
        .collect()
}

fn draw_index(weights: &[f64], rng: &mut rand_chacha::ChaCha12Rng) -> usize {
    use rand::Rng;
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn draw_range(lo: usize, hi: usize, rng: &mut rand_chacha::ChaCha12Rng) -> usize {
    use rand::Rng;
    rng.random_range(lo..=hi)
}

/// Encode one constraint as its marker token followed by positional
/// parameter tokens (counts are encoded as the token with that index).
fn encode_constraint(spec: &ConstraintSpec, vocab: &Vocabulary) -> Result<Vec<usize>> {
    match spec {
        ConstraintSpec::KeywordInclusion { keywords } => {
            let mut out = Vec::new();
            for kw in keywords {
                let token = vocab.index_of(kw).ok_or_else(|| {
                    Error::Generation(format!("keyword `{kw}` is not a vocabulary word"))
                })?;
                out.push(T_KW);
                out.push(token);
            }
            Ok(out)
        }
        ConstraintSpec::MinPlaceholders { n, .. } => Ok(vec![T_PH, *n]),
        ConstraintSpec::PalindromeRequired => Ok(vec![T_PAL]),
        ConstraintSpec::ParagraphCount { n, .. } => Ok(vec![T_PARA, *n]),
        ConstraintSpec::LengthRange { min, max } => Ok(vec![T_LEN, *min, *max]),
        ConstraintSpec::ForbiddenWords { words } => {
            let mut out = Vec::new();
            for w in words {
                let token = vocab.index_of(w).ok_or_else(|| {
                    Error::Generation(format!("forbidden word `{w}` is not a vocabulary word"))
                })?;
                out.push(T_FORBID);
                out.push(token);
            }
            Ok(out)
        }
    }
}

/// Inverse of the constraint encoding over a whole prompt: skips leading filler
/// tokens and parses marker-headed encodings to the end.
pub fn decode_constraints(prompt: &Sequence, vocab: &Vocabulary) -> Result<Vec<ConstraintSpec>> {
    let tokens = prompt.tokens();
    let is_marker = |t: usize| (T_KW..=T_FORBID).contains(&t);
    let start = tokens
        .iter()
        .position(|&t| is_marker(t))
        .unwrap_or(tokens.len());
    let mut out = Vec::new();
    let mut i = start;
    let take = |i: &mut usize| -> Result<usize> {
        let t = tokens
            .get(*i)
            .copied()
            .ok_or_else(|| Error::Validation("truncated constraint encoding in prompt".into()))?;
        *i += 1;
        Ok(t)
    };
    while i < tokens.len() {
        let head = take(&mut i)?;
        match head {
            T_KW => {
                let token = take(&mut i)?;
                out.push(ConstraintSpec::KeywordInclusion {
                    keywords: vec![vocab.symbol(token).to_string()],
                });
            }
            T_PH => {
                let n = take(&mut i)?;
                out.push(ConstraintSpec::MinPlaceholders {
                    n,
                    open: "[".into(),
                    close: "]".into(),
                });
            }
            T_PAL => out.push(ConstraintSpec::PalindromeRequired),
            T_PARA => {
                let n = take(&mut i)?;
                out.push(ConstraintSpec::ParagraphCount {
                    n,
                    divider: "***".into(),
                });
            }
            T_LEN => {
                let min = take(&mut i)?;
                let max = take(&mut i)?;
                out.push(ConstraintSpec::LengthRange { min, max });
            }
            T_FORBID => {
                let token = take(&mut i)?;
                out.push(ConstraintSpec::ForbiddenWords {
                    words: vec![vocab.symbol(token).to_string()],
                });
            }
            other => {
                return Err(Error::Validation(format!(
                    "unexpected token {other} inside constraint encoding"
                )))
            }
        }
    }
    // Merge consecutive keyword constraints back into one list to mirror the
    // encoder, which flattens a multi-keyword constraint into repeated pairs.
    Ok(out)
}

fn describe_constraints(constraints: &[ConstraintSpec]) -> String {
    let parts: Vec<String> = constraints.iter().map(|c| format!("{c:?}")).collect();
    parts.join(" + ")
}

/// Deterministically assemble a response satisfying `constraints`, or report
/// the combination as unsatisfiable under `max_len`. The witness doubles as a
/// satisfiability certificate: it is checked with the verifier before use.
fn build_witness(
    constraints: &[ConstraintSpec],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Sequence> {
    let mut required: Vec<usize> = Vec::new();
    let mut forbidden: Vec<usize> = Vec::new();
    let mut placeholder_n = 0usize;
    let mut paragraph_n: Option<usize> = None;
    let mut length_min = 0usize;
    let mut length_max = max_len;
    let mut need_palindrome = false;
    for spec in constraints {
        match spec {
            ConstraintSpec::KeywordInclusion { keywords } => {
                for kw in keywords {
                    let t = vocab.index_of(kw).ok_or_else(|| {
                        Error::Generation(format!("keyword `{kw}` not in vocabulary"))
                    })?;
                    required.push(t);
                }
            }
            ConstraintSpec::MinPlaceholders { n, .. } => placeholder_n = placeholder_n.max(*n),
            ConstraintSpec::PalindromeRequired => need_palindrome = true,
            ConstraintSpec::ParagraphCount { n, .. } => match paragraph_n {
                Some(existing) if existing != *n => {
                    return Err(Error::Generation(format!(
                        "unsatisfiable combination (conflicting paragraph counts): {}",
                        describe_constraints(constraints)
                    )))
                }
                _ => paragraph_n = Some(*n),
            },
            ConstraintSpec::LengthRange { min, max } => {
                length_min = length_min.max(*min);
                length_max = length_max.min(*max);
            }
            ConstraintSpec::ForbiddenWords { words } => {
                for w in words {
                    if let Some(t) = vocab.index_of(w) {
                        forbidden.push(t);
                    }
                }
            }
        }
    }

    let mut tokens: Vec<usize> = Vec::new();
    tokens.extend(required.iter().copied());
    if need_palindrome {
        let pal = palindrome_tokens(vocab)
            .into_iter()
            .find(|t| !forbidden.contains(t))
            .ok_or_else(|| {
                Error::Generation(format!(
                    "unsatisfiable combination (no usable palindrome word): {}",
                    describe_constraints(constraints)
                ))
            })?;
        if !tokens.contains(&pal) {
            tokens.push(pal);
        }
    }
    tokens.extend(std::iter::repeat_n(T_PLACEHOLDER, placeholder_n));
    if let Some(n) = paragraph_n {
        tokens.extend(std::iter::repeat_n(T_DIVIDER, n.saturating_sub(1)));
    }
    let filler = plain_tokens(vocab)
        .into_iter()
        .find(|t| !forbidden.contains(t) && !tokens.contains(t))
        .or_else(|| {
            plain_tokens(vocab)
                .into_iter()
                .find(|t| !forbidden.contains(t))
        });
    while tokens.len() < length_min {
        match filler {
            Some(f) => tokens.push(f),
            None => break,
        }
    }
    let mut witness = Sequence::new(tokens);
    if witness.len() < max_len {
        witness.push(T_EOS);
    }
    let detok = Detokenizer::new(vocab);
    let fits = witness.content_len(vocab) <= length_max && witness.len() <= max_len;
    if !fits || verifiable_reward(&witness, constraints, &detok) != 1.0 {
        return Err(Error::Generation(format!(
            "unsatisfiable combination under max_len {max_len}: {}",
            describe_constraints(constraints)
        )));
    }
    Ok(witness)
}

fn draw_constraint(
    task: &TaskSpec,
    vocab: &Vocabulary,
    family: Family,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> ConstraintSpec {
    let plain = plain_tokens(vocab);
    match family {
        Family::Keyword => {
            let t = plain[draw_range(0, plain.len() - 1, rng)];
            ConstraintSpec::KeywordInclusion {
                keywords: vec![vocab.symbol(t).to_string()],
            }
        }
        Family::Placeholders => ConstraintSpec::MinPlaceholders {
            n: draw_range(1, task.placeholder_max_n, rng),
            open: "[".into(),
            close: "]".into(),
        },
        Family::Palindrome => ConstraintSpec::PalindromeRequired,
        Family::Paragraphs => ConstraintSpec::ParagraphCount {
            n: draw_range(2, task.paragraph_max_n, rng),
            divider: "***".into(),
        },
        Family::Length => {
            let min = draw_range(1, 2, rng);
            ConstraintSpec::LengthRange {
                min,
                max: task.max_response_len.saturating_sub(1).max(min),
            }
        }
        Family::Forbidden => {
            let t = plain[draw_range(0, plain.len() - 1, rng)];
            ConstraintSpec::ForbiddenWords {
                words: vec![vocab.symbol(t).to_string()],
            }
        }
    }
}

fn generate_record(
    task: &TaskSpec,
    vocab: &Vocabulary,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<ExampleRecord> {
    let entries = task.weights.entries();
    let weights: Vec<f64> = entries.iter().map(|(_, w)| *w).collect();
    let count = draw_range(1, task.constraints_per_prompt, rng);
    let mut constraints: Vec<ConstraintSpec> = Vec::new();
    let mut used: Vec<Family> = Vec::new();
    for _ in 0..count {
        let mut family = entries[draw_index(&weights, rng)].0;
        let mut tries = 0;
        while used.contains(&family) && tries < 8 {
            family = entries[draw_index(&weights, rng)].0;
            tries += 1;
        }
        if used.contains(&family) {
            continue;
        }
        used.push(family);
        constraints.push(draw_constraint(task, vocab, family, rng));
    }

    let mut encoding: Vec<usize> = Vec::new();
    for c in &constraints {
        encoding.extend(encode_constraint(c, vocab)?);
    }
    if encoding.len() > task.prompt_len {
        return Err(Error::Generation(format!(
            "constraint encoding of {} tokens exceeds prompt_len {}: {}",
            encoding.len(),
            task.prompt_len,
            describe_constraints(&constraints)
        )));
    }
    // Satisfiability certificate; fails loudly naming the combination.
    build_witness(&constraints, vocab, task.max_response_len)?;

    let plain = plain_tokens(vocab);
    let mut prompt: Vec<usize> = Vec::new();
    while prompt.len() + encoding.len() < task.prompt_len {
        prompt.push(plain[draw_range(0, plain.len() - 1, rng)]);
    }
    prompt.extend(encoding);
    Ok(ExampleRecord {
        prompt: Sequence::new(prompt),
        constraints,
        gt_response: None,
        teacher_response: None,
    })
}

/// Generate `count` records (without ground truth) under the stream
/// `(task.seed, "{label}/{index}")`. Deterministic given the task spec.
pub fn generate_records(task: &TaskSpec, count: usize, label: &str) -> Result<Vec<ExampleRecord>> {
    task.validate()?;
    let vocab = task.vocabulary()?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seeded_rng(task.seed, &format!("{label}/{i}"));
        out.push(generate_record(task, &vocab, &mut rng)?);
    }
    Ok(out)
}

/// The demonstration pool and the rollout prompt pool, both without ground
/// truth.
pub fn generate_dataset(task: &TaskSpec) -> Result<(Vec<ExampleRecord>, Vec<ExampleRecord>)> {
    Ok((
        generate_records(task, task.n_sft, "gen-sft")?,
        generate_records(task, task.n_pref, "gen-pref")?,
    ))
}

/// How the teacher policy is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Logit rows placed directly so constraint-satisfying continuations
    /// carry the target probability mass.
    HandBuilt,
    /// Supervised training to convergence on enumerated satisfying responses.
    Trained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub mode: TeacherMode,
    /// Target sample pass rate; the built teacher must measure at least this.
    pub p_sat: f64,
    /// Epoch budget for `Trained` mode.
    pub train_budget: usize,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            mode: TeacherMode::HandBuilt,
            p_sat: 0.9,
            train_budget: 1500,
        }
    }
}

impl TeacherSpec {
    pub fn from_map(raw: &BTreeMap<String, String>) -> Result<TeacherSpec> {
        let mut spec = TeacherSpec::default();
        if let Some(mode) = raw.get("task.teacher_mode") {
            spec.mode = match mode.as_str() {
                "hand" | "hand_built" => TeacherMode::HandBuilt,
                "trained" => TeacherMode::Trained,
                other => {
                    return Err(Error::Config {
                        field: "task.teacher_mode".into(),
                        message: format!("unknown mode `{other}` (expected hand|trained)"),
                    })
                }
            };
        }
        if let Some(p) = raw.get("task.p_sat") {
            spec.p_sat = p.parse().map_err(|_| Error::Config {
                field: "task.p_sat".into(),
                message: format!("cannot parse `{p}`"),
            })?;
        }
        if let Some(b) = raw.get("task.train_budget") {
            spec.train_budget = b.parse().map_err(|_| Error::Config {
                field: "task.train_budget".into(),
                message: format!("cannot parse `{b}`"),
            })?;
        }
        if !(0.0..1.0).contains(&spec.p_sat) {
            return Err(Error::Config {
                field: "task.p_sat".into(),
                message: "must be in [0, 1)".into(),
            });
        }
        Ok(spec)
    }
}

/// Set `logit(state, target)` so the softmax mass on `target` equals `p`,
/// holding the other logits of the row fixed.
fn set_row_mass(params: &mut PolicyParams, state: usize, target: usize, p: f64) {
    let v = params.vocab().size();
    let mut others = 0.0;
    for t in 0..v {
        if t != target {
            others += params.logit(state, t).exp();
        }
    }
    params.set_logit(state, target, (p / (1.0 - p) * others).ln());
}

fn hand_built_teacher(task: &TaskSpec, p_sat: f64) -> Result<PolicyParams> {
    if task.context_order != 2 {
        return Err(Error::Build(
            "the hand-built teacher is wired for context_order 2 (marker/parameter pairs); \
             use the trained mode for other orders"
                .into(),
        ));
    }
    let vocab = task.vocabulary()?;
    let v = vocab.size();
    let mut params = PolicyParams::uniform(vocab.clone(), 2)?;
    // Per-rule hit probability. Two-step chains pass at roughly p_hit^2, so
    // the margin over p_sat is taken on the square root; kept strictly below
    // 1 so teacher samples are not universally passing.
    let p_hit = (p_sat.sqrt() + (1.0 - p_sat.sqrt()) * 0.65).min(0.985);

    let plain = plain_tokens(&vocab);
    let palindromes = palindrome_tokens(&vocab);

    // Default rows: plain words flat, markers and special words strongly
    // suppressed, eos carrying most of the mass so responses end quickly.
    for state in 0..params.n_states() {
        for t in 0..v {
            let suppressed = (T_KW..=T_FORBID).contains(&t) || t == T_PLACEHOLDER || t == T_DIVIDER;
            params.set_logit(state, t, if suppressed { -6.0 } else { 0.0 });
        }
        set_row_mass(&mut params, state, T_EOS, 0.70);
    }

    // Rule rows are keyed on the (previous, current) token pair; with
    // context order 2 and prompts of length >= 3 the begin state never
    // reaches a response position, so two-token states cover everything.
    let state_of = |params: &PolicyParams, a: usize, b: usize| params.state_for(&[a, b]);

    // Palindrome requirement: any context ending in the palindrome marker
    // emits a palindrome word. Written first; marker-headed rules below may
    // override cells where a count token collides with this marker's index.
    let pal_word = palindromes
        .first()
        .copied()
        .ok_or_else(|| Error::Build("vocabulary has no palindrome word".into()))?;
    for a in 0..v {
        let s = state_of(&params, a, T_PAL);
        set_row_mass(&mut params, s, pal_word, p_hit);
    }

    // Keyword: context (marker, word) emits that word.
    for &w in &plain {
        let s = state_of(&params, T_KW, w);
        set_row_mass(&mut params, s, w, p_hit);
    }

    // Placeholders: (marker, count) starts a placeholder chain; counts are
    // the token indices 1..=3, and the chain state (count, "[x]") continues
    // or stops depending on the remaining need.
    for n in 1..=3usize {
        let s = state_of(&params, T_PH, n);
        set_row_mass(&mut params, s, T_PLACEHOLDER, p_hit);
        let chain = state_of(&params, n, T_PLACEHOLDER);
        if n >= 2 {
            set_row_mass(&mut params, chain, T_PLACEHOLDER, p_hit);
        } else {
            set_row_mass(&mut params, chain, T_EOS, 0.9);
        }
    }
    // ("[x]", "[x]"): mostly stop; a modest continuation keeps n = 3
    // reachable without flooding shorter chains.
    let ph_chain = state_of(&params, T_PLACEHOLDER, T_PLACEHOLDER);
    set_row_mass(&mut params, ph_chain, T_PLACEHOLDER, 0.12);
    set_row_mass(&mut params, ph_chain, T_EOS, 0.80);

    // Paragraphs: (marker, count) emits a divider. The count token for a
    // 3-paragraph request owes one more divider from (count, divider); any
    // other (_, divider) context says a plain word next instead of stopping,
    // so the final paragraph is nonempty before eos.
    for n in 2..=3usize {
        let s = state_of(&params, T_PARA, n);
        set_row_mass(&mut params, s, T_DIVIDER, p_hit);
    }
    let count_three = 3usize; // the parameter token of a 3-paragraph request
    for a in 0..v {
        let s = state_of(&params, a, T_DIVIDER);
        if a == count_three {
            set_row_mass(&mut params, s, T_DIVIDER, p_hit);
        } else {
            params.set_logit(s, T_EOS, -2.0);
        }
    }

    Ok(params)
}

/// Measured sample pass rate over freshly generated prompts.
pub fn measure_pass_rate(
    params: &PolicyParams,
    task: &TaskSpec,
    samples: usize,
    label: &str,
) -> Result<f64> {
    let vocab = task.vocabulary()?;
    let detok = Detokenizer::new(&vocab);
    let records = generate_records(task, samples, &format!("{label}-prompts"))?;
    let mut passes = 0.0;
    for (i, rec) in records.iter().enumerate() {
        let mut rng = seeded_rng(task.seed, &format!("{label}-draw/{i}"));
        let resp = params.sample_response(&rec.prompt, task.max_response_len, &mut rng);
        passes += verifiable_reward(&resp, &rec.constraints, &detok);
    }
    Ok(passes / records.len() as f64)
}

fn trained_teacher(task: &TaskSpec, spec: &TeacherSpec) -> Result<PolicyParams> {
    let vocab = task.vocabulary()?;
    let records = generate_records(task, 96, "teacher-train")?;
    let witnesses: Vec<Sequence> = records
        .iter()
        .map(|r| build_witness(&r.constraints, &vocab, task.max_response_len))
        .collect::<Result<_>>()?;
    let mut params = PolicyParams::uniform(vocab, task.context_order)?;
    let batch: Vec<(&Sequence, &Sequence)> = records
        .iter()
        .zip(witnesses.iter())
        .map(|(r, w)| (&r.prompt, w))
        .collect();
    for epoch in 0..spec.train_budget {
        let lv = sft_loss(&params, &batch)?;
        params.gradient_step(&lv.gradient, 0.5);
        if (epoch + 1) % 50 == 0 {
            let rate = measure_pass_rate(&params, task, 300, "teacher-probe")?;
            if rate >= spec.p_sat + 0.02 {
                break;
            }
        }
    }
    Ok(params)
}

/// Construct the frozen teacher policy and verify its measured pass rate
/// reaches `p_sat` over at least 1000 seeded samples.
pub fn build_teacher(spec: &TeacherSpec, task: &TaskSpec) -> Result<PolicyParams> {
    let params = match spec.mode {
        TeacherMode::HandBuilt => hand_built_teacher(task, spec.p_sat)?,
        TeacherMode::Trained => trained_teacher(task, spec)?,
    };
    let measured = measure_pass_rate(&params, task, 1000, "teacher-accept")?;
    if measured < spec.p_sat {
        return Err(Error::Build(format!(
            "teacher pass rate {measured:.3} below target {:.3}",
            spec.p_sat
        )));
    }
    Ok(params)
}

/// Retention statistics of the ground-truth filtering pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtReport {
    pub total: usize,
    pub kept: usize,
    pub retention: f64,
}

/// Rejection-filter records through the teacher: up to `attempts` samples per
/// record, the first one passing the verifier becomes the ground truth;
/// records with no passing sample are dropped.
pub fn make_gt_dataset(
    records: &[ExampleRecord],
    teacher: &PolicyParams,
    attempts: usize,
    max_len: usize,
    seed: u64,
    label: &str,
) -> Result<(Vec<ExampleRecord>, GtReport)> {
    let vocab = teacher.vocab().clone();
    let detok = Detokenizer::new(&vocab);
    let mut kept = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let mut rng = seeded_rng(seed, &format!("{label}/gt/{i}"));
        for _ in 0..attempts {
            let candidate = teacher.sample_response(&record.prompt, max_len, &mut rng);
            if verifiable_reward(&candidate, &record.constraints, &detok) == 1.0 {
                let mut with_gt = record.clone();
                with_gt.gt_response = Some(candidate);
                kept.push(with_gt);
                break;
            }
        }
    }
    let report = GtReport {
        total: records.len(),
        kept: kept.len(),
        retention: if records.is_empty() {
            0.0
        } else {
            kept.len() as f64 / records.len() as f64
        },
    };
    Ok((kept, report))
}

/// Attach one seeded teacher sample per record (used by the discriminator;
/// not guaranteed to pass verification).
pub fn attach_teacher_responses(
    records: &mut [ExampleRecord],
    teacher: &PolicyParams,
    max_len: usize,
    seed: u64,
    label: &str,
) {
    for (i, record) in records.iter_mut().enumerate() {
        let mut rng = seeded_rng(seed, &format!("{label}/teacher/{i}"));
        record.teacher_response = Some(teacher.sample_response(&record.prompt, max_len, &mut rng));
    }
}

/// Derive winner/loser pairs for pairwise preference training: the ground
/// truth wins against a sampled response that fails the verifier.
pub fn make_preference_dataset(
    records: &[ExampleRecord],
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    let sampler = PolicyParams::uniform(vocab.clone(), 1)?;
    let mut out = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let Some(gt) = &record.gt_response else {
            continue;
        };
        let Some(loser) =
            sample_failing_response(&sampler, record, max_len, seed, &format!("pref/{i}"))
        else {
            continue;
        };
        if &loser == gt {
            continue;
        }
        out.push(PreferenceRecord {
            prompt: record.prompt.clone(),
            winner: gt.clone(),
            loser,
        });
    }
    Ok(out)
}

/// Derive desirable/undesirable labeled examples: the ground truth is
/// desirable, a failing sample undesirable.
pub fn make_binary_dataset(
    records: &[ExampleRecord],
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<Vec<BinaryLabelRecord>> {
    let sampler = PolicyParams::uniform(vocab.clone(), 1)?;
    let mut out = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let Some(gt) = &record.gt_response else {
            continue;
        };
        out.push(BinaryLabelRecord {
            prompt: record.prompt.clone(),
            response: gt.clone(),
            label: BinaryLabel::Desirable,
        });
        if let Some(bad) =
            sample_failing_response(&sampler, record, max_len, seed, &format!("bin/{i}"))
        {
            out.push(BinaryLabelRecord {
                prompt: record.prompt.clone(),
                response: bad,
                label: BinaryLabel::Undesirable,
            });
        }
    }
    Ok(out)
}

/// Draw from a uniform policy until a response fails the record's verifier.
fn sample_failing_response(
    sampler: &PolicyParams,
    record: &ExampleRecord,
    max_len: usize,
    seed: u64,
    label: &str,
) -> Option<Sequence> {
    let detok = Detokenizer::new(sampler.vocab());
    let mut rng = seeded_rng(seed, label);
    for _ in 0..16 {
        let resp = sampler.sample_response(&record.prompt, max_len, &mut rng);
        if verifiable_reward(&resp, &record.constraints, &detok) == 0.0 {
            return Some(resp);
        }
    }
    None
}
