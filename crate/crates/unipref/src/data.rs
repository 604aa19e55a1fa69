//! Dataset records and line-delimited JSON file I/O.
//!
//! Each file holds one JSON object per line with an explicit `version` field.
//! Loading validates every record against its type invariants (sequence
//! shape, gt passing its own constraints, winner != loser) and reports the
//! offending line on failure. Saving canonical records and reloading them is
//! byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verify::{verifiable_reward, ConstraintSpec, Detokenizer};
use crate::vocab::{Sequence, Vocabulary};

pub const DATASET_VERSION: u32 = 1;

/// One row of the demonstration data / rollout prompt pool: a prompt, its
/// verification constraints, and optional ground-truth and teacher responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub prompt: Sequence,
    pub constraints: Vec<ConstraintSpec>,
    pub gt_response: Option<Sequence>,
    pub teacher_response: Option<Sequence>,
}

/// A winner/loser comparison for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: Sequence,
    pub winner: Sequence,
    pub loser: Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Desirable,
    Undesirable,
}

/// A single response with a desirable/undesirable label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryLabelRecord {
    pub prompt: Sequence,
    pub response: Sequence,
    pub label: BinaryLabel,
}

impl ExampleRecord {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Validation("prompt must be nonempty".into()));
        }
        self.prompt.validate(vocab)?;
        for c in &self.constraints {
            c.validate()?;
        }
        if let Some(t) = &self.teacher_response {
            t.validate(vocab)?;
        }
        if let Some(gt) = &self.gt_response {
            gt.validate(vocab)?;
            let detok = Detokenizer::new(vocab);
            if verifiable_reward(gt, &self.constraints, &detok) != 1.0 {
                return Err(Error::Validation(
                    "gt_response fails its own constraints".into(),
                ));
            }
        }
        Ok(())
    }
}

impl PreferenceRecord {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.prompt.validate(vocab)?;
        self.winner.validate(vocab)?;
        self.loser.validate(vocab)?;
        if self.winner == self.loser {
            return Err(Error::Validation("winner equals loser".into()));
        }
        Ok(())
    }
}

impl BinaryLabelRecord {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.prompt.validate(vocab)?;
        self.response.validate(vocab)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct VersionedLine<T> {
    #[serde(flatten)]
    record: T,
    version: u32,
}

fn load_lines<T, V>(path: &Path, validate: V) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    V: Fn(&T) -> Result<()>,
{
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: VersionedLine<T> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if parsed.version != DATASET_VERSION {
            return Err(Error::Parse {
                path: display.clone(),
                line: idx + 1,
                message: format!("unsupported record version {}", parsed.version),
            });
        }
        validate(&parsed.record)
            .map_err(|e| Error::Validation(format!("{display}:{}: {e}", idx + 1)))?;
        out.push(parsed.record);
    }
    Ok(out)
}

fn save_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        let line = VersionedLine {
            record,
            version: DATASET_VERSION,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sft_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<ExampleRecord>> {
    load_lines(path, |r: &ExampleRecord| r.validate(vocab))
}

pub fn save_sft_dataset(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    save_lines(path, records)
}

pub fn load_preference_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<PreferenceRecord>> {
    load_lines(path, |r: &PreferenceRecord| r.validate(vocab))
}

pub fn save_preference_dataset(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    save_lines(path, records)
}

pub fn load_binary_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<BinaryLabelRecord>> {
    load_lines(path, |r: &BinaryLabelRecord| r.validate(vocab))
}

pub fn save_binary_dataset(path: &Path, records: &[BinaryLabelRecord]) -> Result<()> {
    save_lines(path, records)
}
