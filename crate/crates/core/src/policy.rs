//! Next-question difficulty from performance history.
//!
//! Every policy starts at the default difficulty of 0.5. `OneAfterOne` moves
//! by at most `step` per question based on the last outcome; `AllInAll`
//! places the target `spread` either side of 0.5 according to the mean mark
//! ratio over the whole chapter history; `Static` never moves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{clamp_difficulty, DifficultyLevel, Marks, PolicyKind, MARKS_PER_QUESTION};

/// Outcome of one answered question, as consumed by the policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerformanceRecord {
    pub question_index: u32,
    pub presented_difficulty: DifficultyLevel,
    /// Marks earned divided by the per-question maximum; a multiple of 0.25.
    pub mark_ratio: f64,
    pub hints_used: u8,
}

impl PerformanceRecord {
    pub fn new(
        question_index: u32,
        presented_difficulty: DifficultyLevel,
        marks: Marks,
        hints_used: u8,
    ) -> Self {
        Self {
            question_index,
            presented_difficulty,
            mark_ratio: f64::from(marks.half_marks()) / f64::from(MARKS_PER_QUESTION.half_marks()),
            hints_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyParamsError {
    #[error("step {0} outside [0.1, 0.3]")]
    Step(f64),
    #[error("spread {0} outside [0.1, 0.5]")]
    Spread(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawParams")]
pub struct PolicyParams {
    step: f64,
    spread: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    #[serde(default = "default_step")]
    step: f64,
    #[serde(default = "default_spread")]
    spread: f64,
}

fn default_step() -> f64 {
    PolicyParams::DEFAULT_STEP
}

fn default_spread() -> f64 {
    PolicyParams::DEFAULT_SPREAD
}

impl TryFrom<RawParams> for PolicyParams {
    type Error = PolicyParamsError;

    fn try_from(raw: RawParams) -> Result<Self, Self::Error> {
        PolicyParams::new(raw.step, raw.spread)
    }
}

// Small tolerance so that values such as 0.1 + 0.2 still count as in-band.
const BAND_EPS: f64 = 1e-9;

impl PolicyParams {
    pub const DEFAULT_STEP: f64 = 0.1;
    pub const DEFAULT_SPREAD: f64 = 0.3;

    pub fn new(step: f64, spread: f64) -> Result<Self, PolicyParamsError> {
        if !(0.1 - BAND_EPS..=0.3 + BAND_EPS).contains(&step) {
            return Err(PolicyParamsError::Step(step));
        }
        if !(0.1 - BAND_EPS..=0.5 + BAND_EPS).contains(&spread) {
            return Err(PolicyParamsError::Spread(spread));
        }
        Ok(Self { step, spread })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            step: Self::DEFAULT_STEP,
            spread: Self::DEFAULT_SPREAD,
        }
    }
}

pub fn static_difficulty() -> DifficultyLevel {
    DifficultyLevel::DEFAULT
}

pub fn one_after_one(prev: &PerformanceRecord, params: &PolicyParams) -> DifficultyLevel {
    let next = prev.presented_difficulty.value() + params.step * (2.0 * prev.mark_ratio - 1.0);
    clamp_or_default(next)
}

pub fn all_in_all(history: &[PerformanceRecord], params: &PolicyParams) -> DifficultyLevel {
    if history.is_empty() {
        return DifficultyLevel::DEFAULT;
    }
    let mean_ratio = history.iter().map(|r| r.mark_ratio).sum::<f64>() / history.len() as f64;
    clamp_or_default(0.5 + params.spread * (2.0 * mean_ratio - 1.0))
}

/// Dispatches on `kind`. `history` is ordered oldest first.
pub fn next_difficulty(
    kind: PolicyKind,
    history: &[PerformanceRecord],
    params: &PolicyParams,
) -> DifficultyLevel {
    match kind {
        PolicyKind::Static => static_difficulty(),
        PolicyKind::OneAfterOne => match history.last() {
            Some(prev) => one_after_one(prev, params),
            None => DifficultyLevel::DEFAULT,
        },
        PolicyKind::AllInAll => all_in_all(history, params),
    }
}

fn clamp_or_default(x: f64) -> DifficultyLevel {
    // Non-finite only arises from a corrupted record.
    clamp_difficulty(x).unwrap_or_default()
}
