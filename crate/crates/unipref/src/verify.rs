//! Constraint checkers and the binary verifiable reward.
//!
//! Responses are detokenized to space-joined text (trailing eos dropped) and
//! every constraint is checked on that text; the reward is 1 iff all
//! constraints pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Sequence, Vocabulary};

/// One verification-function variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSpec {
    /// Every keyword must occur in the text (case-insensitive substring).
    KeywordInclusion { keywords: Vec<String> },
    /// At least `n` `open`...`close` marker pairs.
    MinPlaceholders {
        n: usize,
        open: String,
        close: String,
    },
    /// Splitting on `divider` must yield exactly `n` parts.
    ParagraphCount { n: usize, divider: String },
    /// Some whitespace-delimited word of length >= 2 reads identically
    /// reversed (case-insensitive).
    PalindromeRequired,
    /// Response length in tokens (trailing eos excluded) within `[min, max]`.
    LengthRange { min: usize, max: usize },
    /// None of the words may occur (case-insensitive substring).
    ForbiddenWords { words: Vec<String> },
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConstraintSpec::KeywordInclusion { keywords } if keywords.is_empty() => Err(
                Error::Validation("keyword_inclusion requires a nonempty keyword list".into()),
            ),
            ConstraintSpec::ForbiddenWords { words } if words.is_empty() => Err(Error::Validation(
                "forbidden_words requires a nonempty word list".into(),
            )),
            ConstraintSpec::MinPlaceholders { n, .. }
            | ConstraintSpec::ParagraphCount { n, .. }
                if *n < 1 =>
            {
                Err(Error::Validation("constraint count must be >= 1".into()))
            }
            ConstraintSpec::LengthRange { min, max } if min > max => Err(Error::Validation(
                format!("length_range min {min} exceeds max {max}"),
            )),
            _ => Ok(()),
        }
    }

    /// Evaluate this constraint on detokenized response text. Total function;
    /// `LengthRange` counts whitespace-delimited words, which matches token
    /// count under the space-joining detokenizer.
    pub fn check(&self, text: &str) -> bool {
        match self {
            ConstraintSpec::KeywordInclusion { keywords } => {
                let lower = text.to_lowercase();
                keywords.iter().all(|k| lower.contains(&k.to_lowercase()))
            }
            ConstraintSpec::MinPlaceholders { n, open, close } => {
                count_marker_pairs(text, open, close) >= *n
            }
            ConstraintSpec::ParagraphCount { n, divider } => {
                text.split(divider.as_str()).count() == *n
            }
            ConstraintSpec::PalindromeRequired => text.split_whitespace().any(is_palindrome_word),
            ConstraintSpec::LengthRange { min, max } => {
                let words = text.split_whitespace().count();
                *min <= words && words <= *max
            }
            ConstraintSpec::ForbiddenWords { words } => {
                let lower = text.to_lowercase();
                !words.iter().any(|w| lower.contains(&w.to_lowercase()))
            }
        }
    }
}

fn count_marker_pairs(text: &str, open: &str, close: &str) -> usize {
    if open.is_empty() || close.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut rest = text;
    while let Some(start) = rest.find(open) {
        let after_open = &rest[start + open.len()..];
        match after_open.find(close) {
            Some(end) => {
                count += 1;
                rest = &after_open[end + close.len()..];
            }
            None => break,
        }
    }
    count
}

fn is_palindrome_word(word: &str) -> bool {
    let chars: Vec<char> = word.to_lowercase().chars().collect();
    chars.len() >= 2 && chars.iter().eq(chars.iter().rev())
}

/// Renders token sequences as space-joined symbols, dropping a trailing eos.
#[derive(Debug, Clone, Copy)]
pub struct Detokenizer<'v> {
    vocab: &'v Vocabulary,
}

impl<'v> Detokenizer<'v> {
    pub fn new(vocab: &'v Vocabulary) -> Self {
        Detokenizer { vocab }
    }

    pub fn text(&self, response: &Sequence) -> String {
        response
            .content_tokens(self.vocab)
            .iter()
            .map(|&t| self.vocab.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Binary verifiable reward: 1.0 iff every constraint passes on the
/// detokenized response, else 0.0.
pub fn verifiable_reward(
    response: &Sequence,
    constraints: &[ConstraintSpec],
    detok: &Detokenizer,
) -> f64 {
    let text = detok.text(response);
    if constraints.iter().all(|c| c.check(&text)) {
        1.0
    } else {
        0.0
    }
}

/// Keep exactly the records whose candidate response passes the verifier and
/// set it as the record's ground truth. `candidates` is parallel to
/// `records`; `None` entries are dropped.
pub fn filter_by_verifier(
    records: &[crate::data::ExampleRecord],
    candidates: &[Option<Sequence>],
    detok: &Detokenizer,
) -> Vec<crate::data::ExampleRecord> {
    records
        .iter()
        .zip(candidates.iter())
        .filter_map(|(record, candidate)| {
            let candidate = candidate.as_ref()?;
            if verifiable_reward(candidate, &record.constraints, detok) == 1.0 {
                let mut kept = record.clone();
                kept.gt_response = Some(candidate.clone());
                Some(kept)
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ExampleRecord;

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            vec![
                "item".into(),
                "peak".into(),
                "noon".into(),
                "[x]".into(),
                "***".into(),
                "cedar".into(),
                "<eos>".into(),
            ],
            6,
        )
        .unwrap()
    }

    #[test]
    fn keyword_inclusion_case_insensitive() {
        let spec = ConstraintSpec::KeywordInclusion {
            keywords: vec!["item".into(), "peak".into()],
        };
        assert!(spec.check("the ITEM at peak"));
        assert!(!spec.check("the item only"));
    }

    #[test]
    fn keyword_on_empty_text() {
        let spec = ConstraintSpec::KeywordInclusion {
            keywords: vec!["a".into()],
        };
        assert!(!spec.check(""));
    }

    #[test]
    fn placeholder_counting() {
        let spec = ConstraintSpec::MinPlaceholders {
            n: 6,
            open: "[".into(),
            close: "]".into(),
        };
        assert!(spec.check("[x] [x] [x] [x] [x] [x]"));
        assert!(!spec.check("[x] [x] [x] [x] [x]"));
    }

    #[test]
    fn paragraph_counting() {
        let spec = ConstraintSpec::ParagraphCount {
            n: 2,
            divider: "***".into(),
        };
        assert!(spec.check("cedar *** noon"));
        assert!(spec.check("*** noon"));
        assert!(!spec.check("cedar noon"));
        assert!(!spec.check("a *** b *** c"));
    }

    #[test]
    fn palindrome_detection() {
        let spec = ConstraintSpec::PalindromeRequired;
        assert!(spec.check("the word noon here"));
        assert!(spec.check("LeveL holds"));
        assert!(!spec.check("cedar item peak"));
        // Single characters do not count.
        assert!(!spec.check("a b c"));
    }

    #[test]
    fn length_range_counts_words() {
        let spec = ConstraintSpec::LengthRange { min: 2, max: 3 };
        assert!(!spec.check("one"));
        assert!(spec.check("one two"));
        assert!(spec.check("one two three"));
        assert!(!spec.check("one two three four"));
    }

    #[test]
    fn forbidden_words() {
        let spec = ConstraintSpec::ForbiddenWords {
            words: vec!["peak".into()],
        };
        assert!(spec.check("cedar noon"));
        assert!(!spec.check("the PEAK here"));
    }

    #[test]
    fn detokenizer_drops_trailing_eos() {
        let v = vocab();
        let d = Detokenizer::new(&v);
        assert_eq!(d.text(&Sequence::new(vec![0, 1, 6])), "item peak");
        assert_eq!(d.text(&Sequence::new(vec![6])), "");
    }

    #[test]
    fn reward_is_vacuous_conjunction_on_empty_list() {
        let v = vocab();
        let d = Detokenizer::new(&v);
        assert_eq!(verifiable_reward(&Sequence::new(vec![0, 6]), &[], &d), 1.0);
    }

    #[test]
    fn reward_conjunction_fails_on_one_failure() {
        let v = vocab();
        let d = Detokenizer::new(&v);
        let constraints = vec![
            ConstraintSpec::KeywordInclusion {
                keywords: vec!["item".into()],
            },
            ConstraintSpec::KeywordInclusion {
                keywords: vec!["peak".into()],
            },
        ];
        let resp = Sequence::new(vec![0, 6]); // "item"
        assert_eq!(verifiable_reward(&resp, &constraints, &d), 0.0);
    }

    #[test]
    fn reward_monotone_under_added_constraints() {
        let v = vocab();
        let d = Detokenizer::new(&v);
        let resp = Sequence::new(vec![0, 1, 6]);
        let mut constraints = vec![ConstraintSpec::KeywordInclusion {
            keywords: vec!["item".into()],
        }];
        let before = verifiable_reward(&resp, &constraints, &d);
        constraints.push(ConstraintSpec::PalindromeRequired);
        let after = verifiable_reward(&resp, &constraints, &d);
        assert!(after <= before);
    }

    #[test]
    fn filter_retains_exactly_passing_candidates() {
        let v = vocab();
        let d = Detokenizer::new(&v);
        let record = |kw: &str| ExampleRecord {
            prompt: Sequence::new(vec![5]),
            constraints: vec![ConstraintSpec::KeywordInclusion {
                keywords: vec![kw.into()],
            }],
            gt_response: None,
            teacher_response: None,
        };
        let records = vec![record("item"), record("peak"), record("noon")];
        let candidates = vec![
            Some(Sequence::new(vec![0, 6])), // "item" passes
            Some(Sequence::new(vec![0, 6])), // "item" fails the "peak" record
            None,
        ];
        let kept = filter_by_verifier(&records, &candidates, &d);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].constraints, records[0].constraints);
        // Retained records satisfy the gt invariant.
        let gt = kept[0].gt_response.as_ref().unwrap();
        assert_eq!(verifiable_reward(gt, &kept[0].constraints, &d), 1.0);
    }
}
