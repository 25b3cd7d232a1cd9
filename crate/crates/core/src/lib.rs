//! Adaptive multiple-choice practice engine.
//!
//! - [`domain`]: difficulty, marks, mastery ranks, chapters and questions.
//! - [`policy`]: next-question difficulty under the three adaptation methods.
//! - [`session`]: the five-question session with hints and scoring.
//! - [`provider`]: question validation, the question bank and question sources.
//! - [`llm`]: completion-endpoint question generator.
//! - [`transcript`]: signed, replayable session record.
//! - [`olm`]: the open learner model and its event log.
//! - [`analysis`]: Likert rating aggregation and policy simulation.

pub mod analysis;
pub mod domain;
pub mod llm;
pub mod olm;
pub mod policy;
pub mod provider;
pub mod session;
pub mod transcript;

pub use domain::{
    clamp_difficulty, mastery_from_score, Chapter, DifficultyLevel, DomainError, Marks,
    MasteryLevel, Mcq, PolicyKind,
};
pub use policy::{next_difficulty, PerformanceRecord, PolicyParams};
pub use provider::{validate_mcq, QuestionBank, QuestionSource, ValidationReport, ViolationCode};
pub use session::{SessionError, SessionResult, SessionState};
