//! Training configuration: defaults, validation, and the flat key-value
//! config file format. CLI flags are merged over file values before
//! validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which built-in discriminator backs the adversarial signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscKindName {
    /// Similarity from mean per-token log-likelihood under a frozen scoring
    /// policy (the teacher).
    Loglik,
    /// Negated weighted L1 distance between (length, token counts) features.
    Feature,
}

/// Hyperparameters shared by every stage. Stage specs may override any field
/// through the same key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Mixing weight between the imitation side and the preference side of
    /// the unified objective.
    pub alpha: f64,
    /// Weight of the adversarial term.
    pub lambda_adv: f64,
    /// Weight of the KL penalty against the reference policy.
    pub beta_kl: f64,
    /// Preference-loss temperature (DPO/KTO).
    pub beta_dpo: f64,
    /// Responses sampled per prompt for group-relative advantages.
    pub group_size: usize,
    /// Clip range of the surrogate objective.
    pub clip_eps: f64,
    pub lr_sft: f64,
    pub lr_rl: f64,
    pub lr_unified: f64,
    /// Floor added to the group reward standard deviation.
    pub std_eps: f64,
    pub seed: u64,
    /// Divergence budget for the drift diagnostic.
    pub constraint_tol: f64,
    /// Asymmetric weight on undesirable items in the binary-label loss.
    pub loss_aversion: f64,
    pub batch_size: usize,
    /// Fraction of a mixed batch drawn from the demonstration pool.
    pub sft_fraction: f64,
    pub disc_kind: DiscKindName,
    pub disc_scale: f64,
    pub disc_anchored: bool,
    /// Emit the drift diagnostic every this many steps (0 disables).
    pub diag_interval: usize,
    /// Write a mid-stage checkpoint every this many steps (0 = stage
    /// boundaries only).
    pub ckpt_interval: usize,
    /// Samples per prompt for pass-rate evaluation.
    pub eval_samples: usize,
    /// Teacher-sampled responses for the log-probability gap statistics.
    pub eval_teacher_samples: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.5,
            lambda_adv: 0.001,
            beta_kl: 0.001,
            beta_dpo: 0.1,
            group_size: 8,
            clip_eps: 0.2,
            lr_sft: 1e-5,
            lr_rl: 1e-7,
            lr_unified: 1e-6,
            std_eps: 1e-8,
            seed: 0,
            constraint_tol: 0.1,
            loss_aversion: 1.5,
            batch_size: 4,
            sft_fraction: 0.5,
            disc_kind: DiscKindName::Loglik,
            disc_scale: 4.0,
            disc_anchored: false,
            diag_interval: 50,
            ckpt_interval: 0,
            eval_samples: 16,
            eval_teacher_samples: 500,
        }
    }
}

fn parse_value<T: std::str::FromStr>(field: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        field: field.to_string(),
        message: format!("cannot parse `{raw}`"),
    })
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Key prefixes handled by other modules but allowed to share the config
/// file: task generation, pipeline selection, and sweep grids.
const FOREIGN_PREFIXES: &[&str] = &["task.", "ablate."];
const FOREIGN_KEYS: &[&str] = &["pipeline", "steps", "data_dir"];

pub fn is_training_key(key: &str) -> bool {
    !FOREIGN_KEYS.contains(&key) && !FOREIGN_PREFIXES.iter().any(|p| key.starts_with(p))
}

/// Build a [`TrainingConfig`] from a raw key-value map: defaults applied,
/// ranges enforced, unknown training keys rejected by name.
pub fn validate_config(raw: &BTreeMap<String, String>) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::default();
    apply_config_keys(&mut cfg, raw)?;
    check_ranges(&cfg)?;
    Ok(cfg)
}

/// Apply stage-local overrides on top of an existing config and re-validate.
pub fn with_overrides(
    base: &TrainingConfig,
    overrides: &BTreeMap<String, String>,
) -> Result<TrainingConfig> {
    let mut cfg = base.clone();
    apply_config_keys(&mut cfg, overrides)?;
    check_ranges(&cfg)?;
    Ok(cfg)
}

fn apply_config_keys(cfg: &mut TrainingConfig, raw: &BTreeMap<String, String>) -> Result<()> {
    for (key, value) in raw {
        if !is_training_key(key) {
            continue;
        }
        match key.as_str() {
            "alpha" => cfg.alpha = parse_value(key, value)?,
            "lambda_adv" => cfg.lambda_adv = parse_value(key, value)?,
            "beta_kl" => cfg.beta_kl = parse_value(key, value)?,
            "beta_dpo" => cfg.beta_dpo = parse_value(key, value)?,
            "group_size" => cfg.group_size = parse_value(key, value)?,
            "clip_eps" => cfg.clip_eps = parse_value(key, value)?,
            "lr_sft" => cfg.lr_sft = parse_value(key, value)?,
            "lr_rl" => cfg.lr_rl = parse_value(key, value)?,
            "lr_unified" => cfg.lr_unified = parse_value(key, value)?,
            "std_eps" => cfg.std_eps = parse_value(key, value)?,
            "seed" => cfg.seed = parse_value(key, value)?,
            "constraint_tol" => cfg.constraint_tol = parse_value(key, value)?,
            "loss_aversion" => cfg.loss_aversion = parse_value(key, value)?,
            "batch_size" => cfg.batch_size = parse_value(key, value)?,
            "sft_fraction" => cfg.sft_fraction = parse_value(key, value)?,
            "disc.kind" => {
                cfg.disc_kind = match value.as_str() {
                    "loglik" => DiscKindName::Loglik,
                    "feature" => DiscKindName::Feature,
                    other => {
                        return Err(config_err(
                            key,
                            format!(
                                "unknown discriminator kind `{other}` (expected loglik|feature)"
                            ),
                        ))
                    }
                }
            }
            "disc.scale" => cfg.disc_scale = parse_value(key, value)?,
            "disc.anchored" => cfg.disc_anchored = parse_value(key, value)?,
            "diag_interval" => cfg.diag_interval = parse_value(key, value)?,
            "ckpt_interval" => cfg.ckpt_interval = parse_value(key, value)?,
            "eval_samples" => cfg.eval_samples = parse_value(key, value)?,
            "eval_teacher_samples" => cfg.eval_teacher_samples = parse_value(key, value)?,
            other => return Err(config_err(other, "unknown configuration key")),
        }
    }
    Ok(())
}

fn check_ranges(cfg: &TrainingConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(config_err("alpha", format!("{} outside [0, 1]", cfg.alpha)));
    }
    if cfg.lambda_adv < 0.0 {
        return Err(config_err("lambda_adv", "must be nonnegative"));
    }
    if cfg.beta_kl < 0.0 {
        return Err(config_err("beta_kl", "must be nonnegative"));
    }
    if cfg.beta_dpo <= 0.0 {
        return Err(config_err("beta_dpo", "must be positive"));
    }
    if cfg.group_size < 2 {
        return Err(config_err("group_size", "must be >= 2"));
    }
    if cfg.clip_eps <= 0.0 {
        return Err(config_err("clip_eps", "must be positive"));
    }
    for (name, lr) in [
        ("lr_sft", cfg.lr_sft),
        ("lr_rl", cfg.lr_rl),
        ("lr_unified", cfg.lr_unified),
    ] {
        if lr <= 0.0 {
            return Err(config_err(name, "must be positive"));
        }
    }
    if cfg.std_eps <= 0.0 {
        return Err(config_err("std_eps", "must be positive"));
    }
    if cfg.constraint_tol <= 0.0 {
        return Err(config_err("constraint_tol", "must be positive"));
    }
    if cfg.loss_aversion < 1.0 {
        return Err(config_err("loss_aversion", "must be >= 1"));
    }
    if cfg.batch_size < 1 {
        return Err(config_err("batch_size", "must be >= 1"));
    }
    if !(0.0..=1.0).contains(&cfg.sft_fraction) {
        return Err(config_err("sft_fraction", "outside [0, 1]"));
    }
    if cfg.disc_scale <= 0.0 {
        return Err(config_err("disc.scale", "must be positive"));
    }
    Ok(())
}

/// Parse a flat `key = value` config file. `#` starts a comment; blank lines
/// are ignored.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text, &display)
}

pub fn parse_config_text(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: source.to_string(),
            line: idx + 1,
            message: "expected `key = value`".into(),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Merge `overrides` over `base` (overrides win).
pub fn merge_maps(
    base: &BTreeMap<String, String>,
    overrides: &BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    let mut merged = base.clone();
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    merged
}
