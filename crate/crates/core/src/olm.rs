//! The open learner model.
//!
//! Each learner has, per chapter, the list of verified attempts and a
//! re-evaluation flag. The displayed level is always the mastery of the most
//! recent attempt. Mastery changes only through [`OlmStore::apply_transcript`];
//! there is no direct write path.
//!
//! The store persists an append-only log of newline-delimited JSON events
//! (`init`, `apply`, `reevaluate`). Models are rebuilt by replaying the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Chapter, Marks, MasteryLevel};
use crate::policy::PerformanceRecord;
use crate::transcript::TranscriptSummary;

#[derive(Debug, Error)]
pub enum OlmError {
    #[error("learner `{0}` already exists")]
    DuplicateLearner(String),
    #[error("unknown learner `{0}`")]
    UnknownLearner(String),
    #[error("unknown chapter `{0}`")]
    UnknownChapter(String),
    #[error("transcript belongs to learner `{found}`, not `{expected}`")]
    LearnerMismatch { expected: String, found: String },
    #[error("chapter `{0}` has no attempt to re-evaluate")]
    NoPriorAttempt(String),
    #[error("chapter `{0}` is locked until the previous chapter is passed")]
    Locked(String),
    #[error("mastery can only change through an uploaded transcript")]
    Forbidden,
    #[error("event log: {0}")]
    Log(#[from] io::Error),
    #[error("event log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
}

impl OlmError {
    pub fn code(&self) -> &'static str {
        match self {
            OlmError::DuplicateLearner(_) => "DuplicateLearner",
            OlmError::UnknownLearner(_) => "UnknownLearner",
            OlmError::UnknownChapter(_) => "UnknownChapter",
            OlmError::LearnerMismatch { .. } => "LearnerMismatch",
            OlmError::NoPriorAttempt(_) => "NoPriorAttempt",
            OlmError::Locked(_) => "Locked",
            OlmError::Forbidden => "Forbidden",
            OlmError::Log(_) => "LogError",
            OlmError::CorruptLog { .. } => "CorruptLog",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub session_id: String,
    pub total_marks: Marks,
    pub mastery: MasteryLevel,
    pub timestamp_ms: i64,
    #[serde(default)]
    pub records: Vec<PerformanceRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChapterProgress {
    /// Ordered by `(timestamp_ms, session_id)`.
    attempts: Vec<Attempt>,
    reevaluation_open: bool,
}

impl ChapterProgress {
    /// Mastery of the most recent attempt, or `NotQualified` if none.
    pub fn current(&self) -> MasteryLevel {
        self.attempts.last().map_or(MasteryLevel::NotQualified, |a| a.mastery)
    }

    pub fn attempts(&self) -> &[Attempt] {
        &self.attempts
    }

    pub fn reevaluation_open(&self) -> bool {
        self.reevaluation_open
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerModel {
    learner_id: String,
    chapters: BTreeMap<String, ChapterProgress>,
}

impl LearnerModel {
    pub fn new<I, S>(learner_id: impl Into<String>, chapter_ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            learner_id: learner_id.into(),
            chapters: chapter_ids
                .into_iter()
                .map(|id| (id.into(), ChapterProgress::default()))
                .collect(),
        }
    }

    pub fn learner_id(&self) -> &str {
        &self.learner_id
    }

    pub fn chapter(&self, chapter_id: &str) -> Option<&ChapterProgress> {
        self.chapters.get(chapter_id)
    }

    pub fn chapters(&self) -> impl Iterator<Item = (&str, &ChapterProgress)> {
        self.chapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn current(&self, chapter_id: &str) -> Option<MasteryLevel> {
        self.chapter(chapter_id).map(ChapterProgress::current)
    }

    fn has_session(&self, session_id: &str) -> bool {
        self.chapters
            .values()
            .flat_map(|c| &c.attempts)
            .any(|a| a.session_id == session_id)
    }

    /// Records a verified attempt. Returns `Ok(false)` without changes when
    /// the transcript's session was already applied.
    pub fn apply_transcript(&mut self, summary: &TranscriptSummary) -> Result<bool, OlmError> {
        if summary.learner_id != self.learner_id {
            return Err(OlmError::LearnerMismatch {
                expected: self.learner_id.clone(),
                found: summary.learner_id.clone(),
            });
        }
        if !self.chapters.contains_key(&summary.chapter_id) {
            return Err(OlmError::UnknownChapter(summary.chapter_id.clone()));
        }
        if self.has_session(&summary.session_id) {
            return Ok(false);
        }
        let progress = self
            .chapters
            .get_mut(&summary.chapter_id)
            .expect("chapter checked above");
        let attempt = Attempt {
            session_id: summary.session_id.clone(),
            total_marks: summary.total_marks,
            mastery: summary.mastery,
            timestamp_ms: summary.finalized_at_ms,
            records: summary.records.clone(),
        };
        let key = (attempt.timestamp_ms, attempt.session_id.as_str());
        let at = progress
            .attempts
            .partition_point(|a| (a.timestamp_ms, a.session_id.as_str()) < key);
        progress.attempts.insert(at, attempt);
        progress.reevaluation_open = false;
        Ok(true)
    }

    pub fn request_reevaluation(&mut self, chapter_id: &str) -> Result<(), OlmError> {
        let progress = self
            .chapters
            .get_mut(chapter_id)
            .ok_or_else(|| OlmError::UnknownChapter(chapter_id.to_string()))?;
        if progress.attempts.is_empty() {
            return Err(OlmError::NoPriorAttempt(chapter_id.to_string()));
        }
        progress.reevaluation_open = true;
        Ok(())
    }

    /// Chapter 1 is always open. Chapter k > 1 opens when chapter k−1 is at
    /// least `Qualified`, when chapter k has an open re-evaluation, or when
    /// gating is off.
    pub fn is_chapter_unlocked(&self, chapters: &[Chapter], chapter_id: &str, gating: bool) -> bool {
        let Some(chapter) = chapters.iter().find(|c| c.id == chapter_id) else {
            return false;
        };
        if !gating || chapter.ordinal <= 1 {
            return true;
        }
        if self.chapter(chapter_id).is_some_and(|p| p.reevaluation_open) {
            return true;
        }
        chapters
            .iter()
            .find(|c| c.ordinal == chapter.ordinal - 1)
            .and_then(|prev| self.current(&prev.id))
            .is_some_and(|level| level >= MasteryLevel::Qualified)
    }

    /// Every answered question on the chapter across all attempts, oldest first.
    pub fn chapter_history(&self, chapter_id: &str) -> Vec<PerformanceRecord> {
        self.chapter(chapter_id)
            .map(|p| p.attempts.iter().flat_map(|a| a.records.iter().copied()).collect())
            .unwrap_or_default()
    }
}

/// One persisted change to the learner models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OlmEvent {
    Init {
        ts: i64,
        learner_id: String,
        chapters: Vec<String>,
    },
    Apply {
        ts: i64,
        summary: TranscriptSummary,
    },
    Reevaluate {
        ts: i64,
        learner_id: String,
        chapter_id: String,
    },
}

/// Destination for appended log events.
pub trait EventSink: Send + Sync {
    fn append(&mut self, event: &OlmEvent) -> io::Result<()>;
}

/// Appends NDJSON lines to a file, flushing after every record.
pub struct FileSink {
    file: File,
    path: PathBuf,
}

impl FileSink {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { file, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for FileSink {
    fn append(&mut self, event: &OlmEvent) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()
    }
}

/// In-memory NDJSON sink whose lines can be read back while the store lives.
#[derive(Clone, Default)]
pub struct MemorySink(Arc<Mutex<Vec<String>>>);

impl MemorySink {
    pub fn lines(&self) -> Vec<String> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl EventSink for MemorySink {
    fn append(&mut self, event: &OlmEvent) -> io::Result<()> {
        let line = serde_json::to_string(event).map_err(io::Error::other)?;
        self.0.lock().unwrap_or_else(|e| e.into_inner()).push(line);
        Ok(())
    }
}

struct Inner {
    models: BTreeMap<String, LearnerModel>,
    sink: Box<dyn EventSink>,
    last_ts: i64,
}

/// Thread-safe learner-model store with a single serialized appender.
pub struct OlmStore {
    chapters: Vec<Chapter>,
    gating: bool,
    inner: RwLock<Inner>,
}

impl OlmStore {
    pub fn new(chapters: Vec<Chapter>, gating: bool, sink: Box<dyn EventSink>) -> Self {
        Self {
            chapters,
            gating,
            inner: RwLock::new(Inner {
                models: BTreeMap::new(),
                sink,
                last_ts: 0,
            }),
        }
    }

    /// Rebuilds the models from existing `lines` and keeps appending to `sink`.
    pub fn from_log<I, S>(
        chapters: Vec<Chapter>,
        gating: bool,
        lines: I,
        sink: Box<dyn EventSink>,
    ) -> Result<Self, OlmError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let (models, last_ts) = replay_log(lines)?;
        Ok(Self {
            chapters,
            gating,
            inner: RwLock::new(Inner {
                models,
                sink,
                last_ts,
            }),
        })
    }

    /// Opens (creating if needed) a file-backed store and replays its log.
    pub fn open(chapters: Vec<Chapter>, gating: bool, path: impl AsRef<Path>) -> Result<Self, OlmError> {
        let path = path.as_ref();
        let lines = match File::open(path) {
            Ok(f) => BufReader::new(f).lines().collect::<Result<Vec<_>, _>>()?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Self::from_log(chapters, gating, lines, Box::new(FileSink::open(path)?))
    }

    pub fn chapters(&self) -> &[Chapter] {
        &self.chapters
    }

    pub fn gating(&self) -> bool {
        self.gating
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> BTreeMap<String, LearnerModel> {
        self.read().models.clone()
    }

    pub fn learner(&self, learner_id: &str) -> Option<LearnerModel> {
        self.read().models.get(learner_id).cloned()
    }

    pub fn init_learner(&self, learner_id: &str, now_ms: i64) -> Result<LearnerModel, OlmError> {
        let mut inner = self.write();
        if inner.models.contains_key(learner_id) {
            return Err(OlmError::DuplicateLearner(learner_id.to_string()));
        }
        let chapters: Vec<String> = self.chapters.iter().map(|c| c.id.clone()).collect();
        let model = LearnerModel::new(learner_id, chapters.clone());
        let ts = next_ts(&mut inner, now_ms);
        inner.sink.append(&OlmEvent::Init {
            ts,
            learner_id: learner_id.to_string(),
            chapters,
        })?;
        inner.models.insert(learner_id.to_string(), model.clone());
        Ok(model)
    }

    /// Returns the model, creating it first when the learner is new.
    pub fn ensure_learner(&self, learner_id: &str, now_ms: i64) -> Result<LearnerModel, OlmError> {
        if let Some(model) = self.learner(learner_id) {
            return Ok(model);
        }
        match self.init_learner(learner_id, now_ms) {
            Err(OlmError::DuplicateLearner(_)) => self
                .learner(learner_id)
                .ok_or_else(|| OlmError::UnknownLearner(learner_id.to_string())),
            other => other,
        }
    }

    /// `summary` must come from `transcript::parse_and_verify`.
    pub fn apply_transcript(
        &self,
        learner_id: &str,
        summary: &TranscriptSummary,
        now_ms: i64,
    ) -> Result<LearnerModel, OlmError> {
        let mut inner = self.write();
        let mut model = inner
            .models
            .get(learner_id)
            .cloned()
            .ok_or_else(|| OlmError::UnknownLearner(learner_id.to_string()))?;
        if model.apply_transcript(summary)? {
            let ts = next_ts(&mut inner, now_ms);
            inner.sink.append(&OlmEvent::Apply {
                ts,
                summary: summary.clone(),
            })?;
            inner.models.insert(learner_id.to_string(), model.clone());
        }
        Ok(model)
    }

    pub fn request_reevaluation(
        &self,
        learner_id: &str,
        chapter_id: &str,
        now_ms: i64,
    ) -> Result<LearnerModel, OlmError> {
        let mut inner = self.write();
        let mut model = inner
            .models
            .get(learner_id)
            .cloned()
            .ok_or_else(|| OlmError::UnknownLearner(learner_id.to_string()))?;
        model.request_reevaluation(chapter_id)?;
        let ts = next_ts(&mut inner, now_ms);
        inner.sink.append(&OlmEvent::Reevaluate {
            ts,
            learner_id: learner_id.to_string(),
            chapter_id: chapter_id.to_string(),
        })?;
        inner.models.insert(learner_id.to_string(), model.clone());
        Ok(model)
    }

    pub fn is_chapter_unlocked(&self, learner_id: &str, chapter_id: &str) -> Result<bool, OlmError> {
        let inner = self.read();
        if !self.chapters.iter().any(|c| c.id == chapter_id) {
            return Err(OlmError::UnknownChapter(chapter_id.to_string()));
        }
        let model = inner
            .models
            .get(learner_id)
            .ok_or_else(|| OlmError::UnknownLearner(learner_id.to_string()))?;
        Ok(model.is_chapter_unlocked(&self.chapters, chapter_id, self.gating))
    }

    /// Checks that the learner may practice the chapter and returns the
    /// chapter's performance history for the adaptation policy.
    pub fn session_history(
        &self,
        learner_id: &str,
        chapter_id: &str,
    ) -> Result<Vec<PerformanceRecord>, OlmError> {
        if !self.is_chapter_unlocked(learner_id, chapter_id)? {
            return Err(OlmError::Locked(chapter_id.to_string()));
        }
        Ok(self
            .learner(learner_id)
            .map(|m| m.chapter_history(chapter_id))
            .unwrap_or_default())
    }

    /// There is no direct way to set a mastery level.
    pub fn direct_set_mastery(
        &self,
        _learner_id: &str,
        _chapter_id: &str,
        _level: MasteryLevel,
    ) -> Result<LearnerModel, OlmError> {
        Err(OlmError::Forbidden)
    }
}

// Log timestamps never go backwards, so replay order equals append order.
fn next_ts(inner: &mut Inner, now_ms: i64) -> i64 {
    inner.last_ts = inner.last_ts.max(now_ms);
    inner.last_ts
}

/// Rebuilds learner models from NDJSON log lines. Blank lines are skipped.
pub fn replay_log<I, S>(lines: I) -> Result<(BTreeMap<String, LearnerModel>, i64), OlmError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut models: BTreeMap<String, LearnerModel> = BTreeMap::new();
    let mut last_ts = 0;
    for (i, line) in lines.into_iter().enumerate() {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        let corrupt = |message: String| OlmError::CorruptLog {
            line: i + 1,
            message,
        };
        let event: OlmEvent = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        match event {
            OlmEvent::Init {
                ts,
                learner_id,
                chapters,
            } => {
                last_ts = last_ts.max(ts);
                if models.contains_key(&learner_id) {
                    return Err(corrupt(format!("learner `{learner_id}` initialized twice")));
                }
                models.insert(learner_id.clone(), LearnerModel::new(learner_id, chapters));
            }
            OlmEvent::Apply { ts, summary } => {
                last_ts = last_ts.max(ts);
                let model = models
                    .get_mut(&summary.learner_id)
                    .ok_or_else(|| corrupt(format!("unknown learner `{}`", summary.learner_id)))?;
                model
                    .apply_transcript(&summary)
                    .map_err(|e| corrupt(e.to_string()))?;
            }
            OlmEvent::Reevaluate {
                ts,
                learner_id,
                chapter_id,
            } => {
                last_ts = last_ts.max(ts);
                let model = models
                    .get_mut(&learner_id)
                    .ok_or_else(|| corrupt(format!("unknown learner `{learner_id}`")))?;
                model
                    .request_reevaluation(&chapter_id)
                    .map_err(|e| corrupt(e.to_string()))?;
            }
        }
    }
    Ok((models, last_ts))
}
