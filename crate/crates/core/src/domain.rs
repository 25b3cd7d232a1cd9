//! Value types shared by every part of the engine.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("difficulty {0} outside [0, 1]")]
    DifficultyOutOfRange(f64),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("{0} is not a non-negative multiple of 0.5")]
    InvalidMarks(f64),
    #[error("session total {0} outside [0, 10]")]
    TotalOutOfRange(f64),
    #[error("unknown mastery level `{0}`")]
    UnknownMastery(String),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("chapter ordinals must be contiguous from 1")]
    ChapterOrdinals,
    #[error("duplicate chapter id")]
    DuplicateChapter,
}

/// Marks available for one question when no hints are taken.
pub const MARKS_PER_QUESTION: Marks = Marks::from_half_marks(4);
/// Number of questions in one practice session.
pub const QUESTIONS_PER_SESSION: usize = 5;
/// Maximum total marks of a session.
pub const MAX_SESSION_MARKS: Marks = Marks::from_half_marks(20);
/// Hints available per question.
pub const MAX_HINTS: u8 = 3;

/// Difficulty of a question on the closed interval `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct DifficultyLevel(f64);

impl DifficultyLevel {
    pub const MIN: DifficultyLevel = DifficultyLevel(0.0);
    pub const MAX: DifficultyLevel = DifficultyLevel(1.0);
    pub const DEFAULT: DifficultyLevel = DifficultyLevel(0.5);

    pub fn new(value: f64) -> Result<Self, DomainError> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(DomainError::DifficultyOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for DifficultyLevel {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl<'de> Deserialize<'de> for DifficultyLevel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = f64::deserialize(deserializer)?;
        DifficultyLevel::new(raw).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for DifficultyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Clamps a finite real into `[0, 1]`.
pub fn clamp_difficulty(x: f64) -> Result<DifficultyLevel, DomainError> {
    if !x.is_finite() {
        return Err(DomainError::NonFinite(x));
    }
    Ok(DifficultyLevel(x.clamp(0.0, 1.0)))
}

/// A mark total held as an exact count of half marks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Marks(u16);

impl Marks {
    pub const ZERO: Marks = Marks(0);

    pub const fn from_half_marks(half_marks: u16) -> Self {
        Self(half_marks)
    }

    /// Converts a real mark value, rejecting anything that is not a
    /// non-negative multiple of 0.5.
    pub fn from_f64(value: f64) -> Result<Self, DomainError> {
        let doubled = value * 2.0;
        if !value.is_finite() || value < 0.0 || doubled.fract() != 0.0 || doubled > u16::MAX as f64
        {
            return Err(DomainError::InvalidMarks(value));
        }
        Ok(Self(doubled as u16))
    }

    pub const fn half_marks(self) -> u16 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub fn saturating_sub(self, other: Marks) -> Marks {
        Marks(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for Marks {
    type Output = Marks;

    fn add(self, rhs: Marks) -> Marks {
        Marks(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Marks {
    fn sum<I: Iterator<Item = Marks>>(iter: I) -> Marks {
        iter.fold(Marks::ZERO, |acc, m| acc + m)
    }
}

impl fmt::Display for Marks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_multiple_of(2) {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}.5", self.0 / 2)
        }
    }
}

impl Serialize for Marks {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Marks {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = f64::deserialize(deserializer)?;
        Marks::from_f64(raw).map_err(serde::de::Error::custom)
    }
}

/// Ordinal knowledge-mastery rank shown in the learner model.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum MasteryLevel {
    #[default]
    NotQualified,
    Qualified,
    Proficient,
    Mastered,
}

impl MasteryLevel {
    pub const ALL: [MasteryLevel; 4] = [
        MasteryLevel::NotQualified,
        MasteryLevel::Qualified,
        MasteryLevel::Proficient,
        MasteryLevel::Mastered,
    ];

    /// Label used by the progress table. `NotQualified` renders as "not passed".
    pub fn display_label(self) -> &'static str {
        match self {
            MasteryLevel::NotQualified => "not passed",
            MasteryLevel::Qualified => "qualified",
            MasteryLevel::Proficient => "proficient",
            MasteryLevel::Mastered => "mastered",
        }
    }
}

impl fmt::Display for MasteryLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MasteryLevel::NotQualified => "NotQualified",
            MasteryLevel::Qualified => "Qualified",
            MasteryLevel::Proficient => "Proficient",
            MasteryLevel::Mastered => "Mastered",
        };
        f.write_str(s)
    }
}

impl FromStr for MasteryLevel {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MasteryLevel::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| DomainError::UnknownMastery(s.to_string()))
    }
}

/// Maps a session total (0 to 10 marks) onto a mastery rank.
///
/// `[0,5)` NotQualified, `[5,7)` Qualified, `[7,9)` Proficient, `[9,10]` Mastered.
pub fn mastery_from_score(total: Marks) -> Result<MasteryLevel, DomainError> {
    if total > MAX_SESSION_MARKS {
        return Err(DomainError::TotalOutOfRange(total.as_f64()));
    }
    let level = match total.half_marks() {
        0..=9 => MasteryLevel::NotQualified,
        10..=13 => MasteryLevel::Qualified,
        14..=17 => MasteryLevel::Proficient,
        _ => MasteryLevel::Mastered,
    };
    Ok(level)
}

/// The three difficulty-adaptation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Difficulty follows the learner's aggregate performance so far.
    AllInAll,
    /// Difficulty follows the previous question's outcome.
    OneAfterOne,
    /// Difficulty is fixed at the default.
    Static,
}

impl PolicyKind {
    /// Ordering used by the rating tables.
    pub const TABLE_ORDER: [PolicyKind; 3] =
        [PolicyKind::OneAfterOne, PolicyKind::Static, PolicyKind::AllInAll];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::AllInAll => "all-in-all",
            PolicyKind::OneAfterOne => "one-after-one",
            PolicyKind::Static => "static",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-in-all" => Ok(PolicyKind::AllInAll),
            "one-after-one" => Ok(PolicyKind::OneAfterOne),
            "static" => Ok(PolicyKind::Static),
            other => Err(DomainError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chapter {
    pub id: String,
    pub title: String,
    pub ordinal: u32,
    pub policy: PolicyKind,
    #[serde(default)]
    pub content_ref: Option<String>,
}

/// Checks that chapter ordinals run 1, 2, 3, ... with unique ids.
pub fn check_chapter_list(chapters: &[Chapter]) -> Result<(), DomainError> {
    let mut ordinals: Vec<u32> = chapters.iter().map(|c| c.ordinal).collect();
    ordinals.sort_unstable();
    for (expected, got) in (1u32..).zip(&ordinals) {
        if expected != *got {
            return Err(DomainError::ChapterOrdinals);
        }
    }
    let mut ids: Vec<&str> = chapters.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(DomainError::DuplicateChapter);
    }
    Ok(())
}

/// A multiple-choice question with three options and three hint tiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mcq {
    pub id: String,
    #[serde(default)]
    pub chapter_id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    /// Ordered from least to most revealing.
    pub hints: Vec<String>,
    // Kept as a raw real so validation can report out-of-range values.
    pub difficulty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl Mcq {
    pub fn difficulty_level(&self) -> DifficultyLevel {
        clamp_difficulty(self.difficulty).unwrap_or_default()
    }
}
