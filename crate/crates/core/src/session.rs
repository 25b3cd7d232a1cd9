//! The five-question practice session.
//!
//! A session moves through `next_question` → (`request_hint` ≤ 3) →
//! `submit_answer` five times and is then finalized. Every operation checks
//! all of its preconditions before touching state, so a rejected call leaves
//! the session exactly as it was.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    mastery_from_score, Chapter, DifficultyLevel, Marks, MasteryLevel, Mcq, PolicyKind, MAX_HINTS,
    MAX_SESSION_MARKS, MARKS_PER_QUESTION, QUESTIONS_PER_SESSION,
};
use crate::policy::{next_difficulty, PerformanceRecord, PolicyParams};
use crate::provider::{validate_mcq, ProviderError, QuestionSource, OPTIONS_PER_QUESTION};

/// Marks still attainable on a question after `hints_used` hints: 2 − 0.5·h.
pub fn attainable(hints_used: u8) -> Marks {
    MARKS_PER_QUESTION.saturating_sub(Marks::from_half_marks(u16::from(hints_used)))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session already has five answered questions")]
    SessionComplete,
    #[error("the current question has not been answered yet")]
    QuestionPending,
    #[error("no question is awaiting an answer")]
    NoActiveQuestion,
    #[error("all three hints for this question have been used")]
    HintsExhausted,
    #[error("option {0} does not exist")]
    InvalidOption(usize),
    #[error("session has {answered} answered question(s); five are required")]
    SessionIncomplete { answered: usize },
    #[error("session is {0:?}")]
    NotActive(SessionStatus),
    #[error("question source: {0}")]
    Provider(#[from] ProviderError),
    #[error("question source returned an unusable question `{id}`: {reason}")]
    UnusableQuestion { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    Active,
    Finalized,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Presented,
    Answered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionSlot {
    pub index: u8,
    pub mcq: Mcq,
    /// Policy target at presentation time.
    pub presented_difficulty: DifficultyLevel,
    pub hints_used: u8,
    pub state: SlotState,
    pub selected_option: Option<usize>,
    pub marks_earned: Marks,
}

impl QuestionSlot {
    pub fn attainable(&self) -> Marks {
        attainable(self.hints_used)
    }

    pub fn is_correct(&self) -> bool {
        self.selected_option == Some(self.mcq.correct_index)
    }
}

/// One step of a session, in the order it happened. This is the event
/// stream a transcript carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionEvent {
    QuestionPresented {
        index: u8,
        mcq_id: String,
        difficulty: DifficultyLevel,
    },
    HintRequested {
        index: u8,
        tier: u8,
        attainable_after: Marks,
    },
    AnswerSubmitted {
        index: u8,
        selected: usize,
        correct: bool,
        marks: Marks,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintResponse {
    pub tier: u8,
    pub text: String,
    pub attainable: Marks,
    pub hints_remaining: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerFeedback {
    pub correct: bool,
    pub marks: Marks,
    pub correct_index: usize,
    pub feedback: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub index: u8,
    pub marks_earned: Marks,
    pub hints_used: u8,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session_id: String,
    pub total_marks: Marks,
    pub max_marks: Marks,
    pub mastery: MasteryLevel,
    pub per_question: Vec<QuestionOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session_id: String,
    pub learner_id: String,
    pub chapter_id: String,
    pub policy: PolicyKind,
    pub params: PolicyParams,
    pub slots: Vec<QuestionSlot>,
    pub status: SessionStatus,
    pub started_at_ms: i64,
    pub last_activity_ms: i64,
    pub finalized_at_ms: Option<i64>,
    history: Vec<PerformanceRecord>,
    records: Vec<PerformanceRecord>,
    events: Vec<SessionEvent>,
}

const OPTION_LETTERS: [char; 3] = ['A', 'B', 'C'];

impl SessionState {
    /// Opens an active session with no questions. `history` is the learner's
    /// prior performance on this chapter, oldest first.
    pub fn start(
        session_id: impl Into<String>,
        learner_id: impl Into<String>,
        chapter: &Chapter,
        params: PolicyParams,
        history: Vec<PerformanceRecord>,
        now_ms: i64,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            learner_id: learner_id.into(),
            chapter_id: chapter.id.clone(),
            policy: chapter.policy,
            params,
            slots: Vec::with_capacity(QUESTIONS_PER_SESSION),
            status: SessionStatus::Active,
            started_at_ms: now_ms,
            last_activity_ms: now_ms,
            finalized_at_ms: None,
            history,
            records: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn history(&self) -> &[PerformanceRecord] {
        &self.history
    }

    /// Records emitted by answered questions of this session.
    pub fn records(&self) -> &[PerformanceRecord] {
        &self.records
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn current_slot(&self) -> Option<&QuestionSlot> {
        self.slots.last().filter(|s| s.state == SlotState::Presented)
    }

    pub fn answered_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.state == SlotState::Answered)
            .count()
    }

    pub fn running_total(&self) -> Marks {
        self.slots.iter().map(|s| s.marks_earned).sum()
    }

    /// Difficulty the policy would target for the next question.
    pub fn target_difficulty(&self) -> DifficultyLevel {
        let mut combined = Vec::with_capacity(self.history.len() + self.records.len());
        combined.extend_from_slice(&self.history);
        combined.extend_from_slice(&self.records);
        next_difficulty(self.policy, &combined, &self.params)
    }

    fn ensure_active(&self) -> Result<(), SessionError> {
        match self.status {
            SessionStatus::Active => Ok(()),
            other => Err(SessionError::NotActive(other)),
        }
    }

    pub fn next_question(
        &mut self,
        source: &dyn QuestionSource,
        now_ms: i64,
    ) -> Result<&QuestionSlot, SessionError> {
        self.ensure_active()?;
        if self.current_slot().is_some() {
            return Err(SessionError::QuestionPending);
        }
        if self.slots.len() >= QUESTIONS_PER_SESSION {
            return Err(SessionError::SessionComplete);
        }
        let target = self.target_difficulty();
        let used: BTreeSet<String> = self.slots.iter().map(|s| s.mcq.id.clone()).collect();
        let mcq = source.provide(&self.chapter_id, target, &used)?;
        if used.contains(&mcq.id) {
            return Err(SessionError::UnusableQuestion {
                id: mcq.id,
                reason: "already used in this session".into(),
            });
        }
        let report = validate_mcq(&mcq);
        if !report.valid {
            return Err(SessionError::UnusableQuestion {
                id: mcq.id,
                reason: report.to_string(),
            });
        }

        let index = self.slots.len() as u8;
        self.events.push(SessionEvent::QuestionPresented {
            index,
            mcq_id: mcq.id.clone(),
            difficulty: target,
        });
        self.slots.push(QuestionSlot {
            index,
            mcq,
            presented_difficulty: target,
            hints_used: 0,
            state: SlotState::Presented,
            selected_option: None,
            marks_earned: Marks::ZERO,
        });
        self.last_activity_ms = now_ms;
        Ok(self.slots.last().expect("slot just pushed"))
    }

    pub fn request_hint(&mut self, now_ms: i64) -> Result<HintResponse, SessionError> {
        self.ensure_active()?;
        let slot = match self.slots.last_mut() {
            Some(s) if s.state == SlotState::Presented => s,
            _ => return Err(SessionError::NoActiveQuestion),
        };
        if slot.hints_used >= MAX_HINTS {
            return Err(SessionError::HintsExhausted);
        }
        slot.hints_used += 1;
        let tier = slot.hints_used;
        let response = HintResponse {
            tier,
            text: slot.mcq.hints[usize::from(tier - 1)].clone(),
            attainable: slot.attainable(),
            hints_remaining: MAX_HINTS - tier,
        };
        self.events.push(SessionEvent::HintRequested {
            index: slot.index,
            tier,
            attainable_after: response.attainable,
        });
        self.last_activity_ms = now_ms;
        Ok(response)
    }

    pub fn submit_answer(
        &mut self,
        option_index: usize,
        now_ms: i64,
    ) -> Result<AnswerFeedback, SessionError> {
        self.ensure_active()?;
        let slot = match self.slots.last_mut() {
            Some(s) if s.state == SlotState::Presented => s,
            _ => return Err(SessionError::NoActiveQuestion),
        };
        if option_index >= OPTIONS_PER_QUESTION {
            return Err(SessionError::InvalidOption(option_index));
        }
        let correct = option_index == slot.mcq.correct_index;
        let marks = if correct { slot.attainable() } else { Marks::ZERO };
        slot.state = SlotState::Answered;
        slot.selected_option = Some(option_index);
        slot.marks_earned = marks;

        let feedback = feedback_text(slot, correct, marks);
        let answer = AnswerFeedback {
            correct,
            marks,
            correct_index: slot.mcq.correct_index,
            feedback,
        };
        self.records.push(PerformanceRecord::new(
            u32::from(slot.index),
            slot.presented_difficulty,
            marks,
            slot.hints_used,
        ));
        self.events.push(SessionEvent::AnswerSubmitted {
            index: slot.index,
            selected: option_index,
            correct,
            marks,
        });
        self.last_activity_ms = now_ms;
        Ok(answer)
    }

    pub fn finalize(&mut self, now_ms: i64) -> Result<SessionResult, SessionError> {
        self.ensure_active()?;
        let answered = self.answered_count();
        if self.slots.len() != QUESTIONS_PER_SESSION || answered != QUESTIONS_PER_SESSION {
            return Err(SessionError::SessionIncomplete { answered });
        }
        self.status = SessionStatus::Finalized;
        self.finalized_at_ms = Some(now_ms);
        self.last_activity_ms = now_ms;
        Ok(self.result().expect("finalized session has a result"))
    }

    /// Result of a finalized session.
    pub fn result(&self) -> Option<SessionResult> {
        if self.status != SessionStatus::Finalized {
            return None;
        }
        let total = self.running_total();
        Some(SessionResult {
            session_id: self.session_id.clone(),
            total_marks: total,
            max_marks: MAX_SESSION_MARKS,
            mastery: mastery_from_score(total).expect("five questions never exceed 10 marks"),
            per_question: self
                .slots
                .iter()
                .map(|s| QuestionOutcome {
                    index: s.index,
                    marks_earned: s.marks_earned,
                    hints_used: s.hints_used,
                    correct: s.is_correct(),
                })
                .collect(),
        })
    }

    /// Marks an active session idle for longer than `ttl_ms` as expired.
    /// Returns whether the session is now expired.
    pub fn expire_if_idle(&mut self, now_ms: i64, ttl_ms: i64) -> bool {
        if self.status == SessionStatus::Active && now_ms - self.last_activity_ms > ttl_ms {
            self.status = SessionStatus::Expired;
        }
        self.status == SessionStatus::Expired
    }
}

fn feedback_text(slot: &QuestionSlot, correct: bool, marks: Marks) -> String {
    let letter = OPTION_LETTERS[slot.mcq.correct_index];
    let answer = &slot.mcq.options[slot.mcq.correct_index];
    let mut text = if correct {
        format!("Correct. The answer is {letter}: {answer}.")
    } else {
        format!("Incorrect. The correct answer is {letter}: {answer}.")
    };
    if let Some(explanation) = &slot.mcq.explanation {
        text.push(' ');
        text.push_str(explanation);
    }
    text.push_str(&format!(
        " You earned {marks} of {MARKS_PER_QUESTION} marks"
    ));
    if slot.hints_used > 0 {
        text.push_str(&format!(
            " ({} hint{} used)",
            slot.hints_used,
            if slot.hints_used == 1 { "" } else { "s" }
        ));
    }
    text.push('.');
    text
}
