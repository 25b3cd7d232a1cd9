//! Question supply: MCQ validation, the deterministic question bank, and the
//! [`QuestionSource`] trait the session engine draws from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DifficultyLevel, Mcq, MAX_HINTS};

pub const OPTIONS_PER_QUESTION: usize = 3;

const FORBIDDEN_PHRASES: [&str; 2] = ["none of the above", "all of the above"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    OptionCount,
    HintCount,
    ForbiddenPhrase,
    DuplicateOption,
    BadCorrectIndex,
    EmptyText,
    DifficultyRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return f.write_str("valid");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{:?}: {}", v.code, v.message))
            .collect();
        write!(f, "invalid ({})", parts.join("; "))
    }
}

/// Lowercases and collapses every run of non-alphanumeric characters into a
/// single space, so hyphenated and punctuated spellings compare equal.
fn normalize(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn contains_forbidden_phrase(option: &str) -> Option<&'static str> {
    let padded = format!(" {} ", normalize(option));
    FORBIDDEN_PHRASES
        .into_iter()
        .find(|phrase| padded.contains(&format!(" {phrase} ")))
}

pub fn validate_mcq(mcq: &Mcq) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |code, message: String| violations.push(Violation { code, message });

    if mcq.options.len() != OPTIONS_PER_QUESTION {
        push(
            ViolationCode::OptionCount,
            format!("expected 3 options, found {}", mcq.options.len()),
        );
    }
    if mcq.hints.len() != usize::from(MAX_HINTS) {
        push(
            ViolationCode::HintCount,
            format!("expected 3 hints, found {}", mcq.hints.len()),
        );
    }
    if mcq.correct_index >= OPTIONS_PER_QUESTION || mcq.correct_index >= mcq.options.len() {
        push(
            ViolationCode::BadCorrectIndex,
            format!("correct_index {} is not a valid option", mcq.correct_index),
        );
    }
    if mcq.stem.trim().is_empty() {
        push(ViolationCode::EmptyText, "stem is empty".into());
    }
    for (i, option) in mcq.options.iter().enumerate() {
        if option.trim().is_empty() {
            push(ViolationCode::EmptyText, format!("option {i} is empty"));
        }
        if let Some(phrase) = contains_forbidden_phrase(option) {
            push(
                ViolationCode::ForbiddenPhrase,
                format!("option {i} uses \"{phrase}\""),
            );
        }
    }
    for (i, hint) in mcq.hints.iter().enumerate() {
        if hint.trim().is_empty() {
            push(ViolationCode::EmptyText, format!("hint {} is empty", i + 1));
        }
    }
    let normalized: Vec<String> = mcq.options.iter().map(|o| normalize(o)).collect();
    for i in 0..normalized.len() {
        for j in (i + 1)..normalized.len() {
            if !normalized[i].is_empty() && normalized[i] == normalized[j] {
                push(
                    ViolationCode::DuplicateOption,
                    format!("options {i} and {j} are the same"),
                );
            }
        }
    }
    if !(mcq.difficulty.is_finite() && (0.0..=1.0).contains(&mcq.difficulty)) {
        push(
            ViolationCode::DifficultyRange,
            format!("difficulty {} outside [0, 1]", mcq.difficulty),
        );
    }

    ValidationReport {
        valid: violations.is_empty(),
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("no candidate question left for chapter `{0}`")]
    NoCandidates(String),
    #[error("completion endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("completion request timed out")]
    Timeout,
    #[error("generation rejected after {attempts} attempts: {last}")]
    InvalidGeneration {
        attempts: u32,
        last: String,
    },
}

/// Anything that can hand the session engine a question near a target difficulty.
pub trait QuestionSource: Send + Sync {
    fn provide(
        &self,
        chapter_id: &str,
        target: DifficultyLevel,
        exclude: &BTreeSet<String>,
    ) -> Result<Mcq, ProviderError>;
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("reading bank: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed bank document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported bank version {0}")]
    Version(u32),
    #[error("duplicate question id `{0}`")]
    DuplicateId(String),
    #[error("duplicate chapter `{0}`")]
    DuplicateChapter(String),
    #[error("{} invalid question(s)", .0.len())]
    Invalid(Vec<(String, ValidationReport)>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    version: u32,
    chapters: Vec<BankChapter>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankChapter {
    id: String,
    questions: Vec<BankQuestion>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankQuestion {
    id: String,
    stem: String,
    options: Vec<String>,
    correct_index: usize,
    hints: Vec<String>,
    difficulty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    explanation: Option<String>,
}

/// Immutable, validated set of questions keyed by chapter.
#[derive(Debug, Clone, Default)]
pub struct QuestionBank {
    chapters: BTreeMap<String, Vec<Mcq>>,
}

impl QuestionBank {
    /// Validates every question and fails with the complete list of
    /// violations when any question is invalid.
    pub fn from_questions(
        chapters: impl IntoIterator<Item = (String, Vec<Mcq>)>,
    ) -> Result<Self, BankError> {
        let mut out: BTreeMap<String, Vec<Mcq>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        let mut invalid = Vec::new();
        for (chapter_id, questions) in chapters {
            if out.contains_key(&chapter_id) {
                return Err(BankError::DuplicateChapter(chapter_id));
            }
            let mut list = Vec::with_capacity(questions.len());
            for mut mcq in questions {
                if !seen.insert(mcq.id.clone()) {
                    return Err(BankError::DuplicateId(mcq.id));
                }
                mcq.chapter_id = chapter_id.clone();
                let report = validate_mcq(&mcq);
                if !report.valid {
                    invalid.push((mcq.id.clone(), report));
                }
                list.push(mcq);
            }
            out.insert(chapter_id, list);
        }
        if !invalid.is_empty() {
            return Err(BankError::Invalid(invalid));
        }
        Ok(Self { chapters: out })
    }

    pub fn from_json(text: &str) -> Result<Self, BankError> {
        let file: BankFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(BankError::Version(file.version));
        }
        Self::from_questions(file.chapters.into_iter().map(|ch| {
            let questions = ch
                .questions
                .into_iter()
                .map(|q| Mcq {
                    id: q.id,
                    chapter_id: ch.id.clone(),
                    stem: q.stem,
                    options: q.options,
                    correct_index: q.correct_index,
                    hints: q.hints,
                    difficulty: q.difficulty,
                    explanation: q.explanation,
                })
                .collect();
            (ch.id, questions)
        }))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Validates a bank document question by question without rejecting it,
    /// for reporting tools. Structural errors are still returned as `Err`.
    pub fn validate_document(text: &str) -> Result<Vec<(String, ValidationReport)>, BankError> {
        let file: BankFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(BankError::Version(file.version));
        }
        let mut reports = Vec::new();
        for ch in file.chapters {
            for q in ch.questions {
                let mcq = Mcq {
                    id: q.id,
                    chapter_id: ch.id.clone(),
                    stem: q.stem,
                    options: q.options,
                    correct_index: q.correct_index,
                    hints: q.hints,
                    difficulty: q.difficulty,
                    explanation: q.explanation,
                };
                let report = validate_mcq(&mcq);
                reports.push((mcq.id, report));
            }
        }
        Ok(reports)
    }

    pub fn chapter_ids(&self) -> impl Iterator<Item = &str> {
        self.chapters.keys().map(String::as_str)
    }

    pub fn questions(&self, chapter_id: &str) -> &[Mcq] {
        self.chapters.get(chapter_id).map_or(&[], Vec::as_slice)
    }

    pub fn get(&self, mcq_id: &str) -> Option<&Mcq> {
        self.chapters.values().flatten().find(|m| m.id == mcq_id)
    }

    pub fn len(&self) -> usize {
        self.chapters.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks the question closest to `target`. Ties go to the lower difficulty,
/// then to the lexicographically smallest id.
pub fn select_question<'a>(
    bank: &'a QuestionBank,
    chapter_id: &str,
    target: DifficultyLevel,
    exclude: &BTreeSet<String>,
) -> Result<&'a Mcq, ProviderError> {
    // Distances are compared at nanounit resolution so that 0.5-0.4 and
    // 0.6-0.5 register as a tie.
    let key = |m: &Mcq| {
        let distance = ((m.difficulty - target.value()).abs() * 1e9).round() as i64;
        let difficulty = (m.difficulty * 1e9).round() as i64;
        (distance, difficulty)
    };
    bank.questions(chapter_id)
        .iter()
        .filter(|m| !exclude.contains(&m.id))
        .min_by(|a, b| key(a).cmp(&key(b)).then_with(|| a.id.cmp(&b.id)))
        .ok_or_else(|| ProviderError::NoCandidates(chapter_id.to_string()))
}

impl QuestionSource for QuestionBank {
    fn provide(
        &self,
        chapter_id: &str,
        target: DifficultyLevel,
        exclude: &BTreeSet<String>,
    ) -> Result<Mcq, ProviderError> {
        select_question(self, chapter_id, target, exclude).cloned()
    }
}

/// Tries `primary` first and falls back to `fallback` when it fails with an
/// endpoint, timeout, or generation error.
pub struct FallbackSource<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: QuestionSource, F: QuestionSource> QuestionSource for FallbackSource<P, F> {
    fn provide(
        &self,
        chapter_id: &str,
        target: DifficultyLevel,
        exclude: &BTreeSet<String>,
    ) -> Result<Mcq, ProviderError> {
        match self.primary.provide(chapter_id, target, exclude) {
            Ok(mcq) => Ok(mcq),
            Err(e @ ProviderError::NoCandidates(_)) => Err(e),
            Err(_) => self.fallback.provide(chapter_id, target, exclude),
        }
    }
}
