//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists (round-tripped through the `json` module); errors raise
//! `ValueError("<Code>: <message>")`.

use std::borrow::Cow;
use std::sync::Arc;

use metacq_core::analysis::{self, RatingDataset};
use metacq_core::olm::{MemorySink, OlmStore as CoreStore};
use metacq_core::transcript::{self, DigestKey};
use metacq_core::{
    Chapter, DifficultyLevel, Marks, Mcq, PerformanceRecord, PolicyKind, PolicyParams,
    QuestionBank as CoreBank, SessionState,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;
use serde_json::Value;

fn err(code: &str, e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(format!("{code}: {e}"))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err("Encode", e))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err("Decode", e))
}

fn policy(name: &str) -> PyResult<PolicyKind> {
    name.parse().map_err(|e| err("UnknownPolicy", e))
}

fn params(step: f64, spread: f64) -> PyResult<PolicyParams> {
    PolicyParams::new(step, spread).map_err(|e| err("InvalidParams", e))
}

#[pyfunction]
fn clamp_difficulty(x: f64) -> PyResult<f64> {
    metacq_core::clamp_difficulty(x)
        .map(DifficultyLevel::value)
        .map_err(|e| err("NonFinite", e))
}

/// Mastery level name for a session total in marks (multiple of 0.5).
#[pyfunction]
fn mastery_from_score(total: f64) -> PyResult<String> {
    let marks = Marks::from_f64(total).map_err(|e| err("InvalidMarks", e))?;
    metacq_core::mastery_from_score(marks)
        .map(|m| m.to_string())
        .map_err(|e| err("TotalOutOfRange", e))
}

/// `history` is a list of `(presented_difficulty, marks, hints_used)`.
#[pyfunction]
#[pyo3(signature = (policy_name, history, step = 0.1, spread = 0.3))]
fn next_difficulty(
    policy_name: &str,
    history: Vec<(f64, f64, u8)>,
    step: f64,
    spread: f64,
) -> PyResult<f64> {
    let records = history
        .into_iter()
        .enumerate()
        .map(|(i, (d, marks, hints))| {
            let d = DifficultyLevel::new(d).map_err(|e| err("DifficultyOutOfRange", e))?;
            let m = Marks::from_f64(marks).map_err(|e| err("InvalidMarks", e))?;
            Ok(PerformanceRecord::new(i as u32, d, m, hints))
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(metacq_core::next_difficulty(policy(policy_name)?, &records, &params(step, spread)?).value())
}

/// Validates a question dict; returns the report as a dict.
#[pyfunction]
fn validate_mcq<'py>(py: Python<'py>, mcq: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let mcq: Mcq = from_py(mcq)?;
    to_py(py, &metacq_core::validate_mcq(&mcq))
}

#[pyfunction]
fn aggregate<'py>(py: Python<'py>, ratings: Vec<u8>) -> PyResult<Bound<'py, PyAny>> {
    let stats = analysis::aggregate(&ratings).map_err(|e| err("InvalidRatings", e))?;
    to_py(py, &stats)
}

/// Takes two `{policy: mean}` dicts, returns `{policy: mean_of_means}`.
#[pyfunction]
fn cross_task_means<'py>(
    py: Python<'py>,
    task1: std::collections::HashMap<String, f64>,
    task2: std::collections::HashMap<String, f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let convert = |m: std::collections::HashMap<String, f64>| {
        m.into_iter()
            .map(|(k, v)| Ok((policy(&k)?, v)))
            .collect::<PyResult<Vec<_>>>()
    };
    let rows = analysis::cross_task_means(&convert(task1)?, &convert(task2)?)
        .map_err(|e| err("MissingPolicy", e))?;
    let out: serde_json::Map<String, Value> = rows
        .into_iter()
        .map(|(p, m)| (p.as_str().to_string(), Value::from(m)))
        .collect();
    to_py(py, &out)
}

/// Full analysis report for a ratings CSV.
#[pyfunction]
#[pyo3(signature = (path, task = None))]
fn analyze_csv<'py>(py: Python<'py>, path: &str, task: Option<u8>) -> PyResult<Bound<'py, PyAny>> {
    let ds: RatingDataset = analysis::ingest_csv(path).map_err(|e| err("Ingest", e))?;
    let report = analysis::build_report(&ds, task).map_err(|e| err("Analysis", e))?;
    to_py(py, &report)
}

/// Verifies transcript bytes; returns the summary dict.
#[pyfunction]
fn verify_transcript<'py>(py: Python<'py>, data: &[u8], key: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    let summary = transcript::parse_and_verify(data, &DigestKey::new(key.to_vec()))
        .map_err(|e| err(e.code(), &e))?;
    to_py(py, &summary)
}

#[pyclass(frozen)]
struct QuestionBank {
    inner: Arc<CoreBank>,
}

#[pymethods]
impl QuestionBank {
    #[new]
    fn new(path: &str) -> PyResult<Self> {
        let inner = CoreBank::load(path).map_err(|e| err("InvalidBank", e))?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn chapter_ids(&self) -> Vec<String> {
        self.inner.chapter_ids().map(str::to_string).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A five-question practice session drawing from a bank.
#[pyclass]
struct Session {
    state: SessionState,
    bank: Arc<CoreBank>,
}

fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (bank, session_id, learner_id, chapter_id, policy_name, step = 0.1, spread = 0.3))]
    fn new(
        bank: &QuestionBank,
        session_id: &str,
        learner_id: &str,
        chapter_id: &str,
        policy_name: &str,
        step: f64,
        spread: f64,
    ) -> PyResult<Self> {
        let chapter = Chapter {
            id: chapter_id.to_string(),
            title: chapter_id.to_string(),
            ordinal: 1,
            policy: policy(policy_name)?,
            content_ref: None,
        };
        Ok(Self {
            state: SessionState::start(
                session_id,
                learner_id,
                &chapter,
                params(step, spread)?,
                Vec::new(),
                now_ms(),
            ),
            bank: bank.inner.clone(),
        })
    }

    /// Presents the next question: stem, options, index, difficulty.
    fn next_question<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let slot = self
            .state
            .next_question(self.bank.as_ref(), now_ms())
            .map_err(|e| err("Session", e))?;
        let view = serde_json::json!({
            "index": slot.index,
            "stem": slot.mcq.stem,
            "options": slot.mcq.options,
            "presented_difficulty": slot.presented_difficulty,
            "attainable": slot.attainable(),
        });
        to_py(py, &view)
    }

    fn hint<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let h = self.state.request_hint(now_ms()).map_err(|e| err("Session", e))?;
        to_py(py, &h)
    }

    fn answer<'py>(&mut self, py: Python<'py>, option_index: usize) -> PyResult<Bound<'py, PyAny>> {
        let fb = self
            .state
            .submit_answer(option_index, now_ms())
            .map_err(|e| err("Session", e))?;
        to_py(py, &fb)
    }

    fn finalize<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let result = self.state.finalize(now_ms()).map_err(|e| err("Session", e))?;
        to_py(py, &result)
    }

    fn running_total(&self) -> f64 {
        self.state.running_total().as_f64()
    }

    /// Signed transcript bytes of a finalized session.
    fn transcript(&self, key: &[u8]) -> PyResult<Cow<'static, [u8]>> {
        transcript::serialize(&self.state, &DigestKey::new(key.to_vec()))
            .map(Cow::Owned)
            .map_err(|e| err(e.code(), &e))
    }
}

/// In-memory learner-model store; the event log is readable via `log()`.
#[pyclass(frozen)]
struct OlmStore {
    inner: CoreStore,
    sink: MemorySink,
}

#[pymethods]
impl OlmStore {
    /// `chapters` is a list of `(id, policy_name)` in course order.
    #[new]
    #[pyo3(signature = (chapters, gating = true))]
    fn new(chapters: Vec<(String, String)>, gating: bool) -> PyResult<Self> {
        let chapters = chapters
            .into_iter()
            .enumerate()
            .map(|(i, (id, p))| {
                Ok(Chapter {
                    title: id.clone(),
                    id,
                    ordinal: i as u32 + 1,
                    policy: policy(&p)?,
                    content_ref: None,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let sink = MemorySink::default();
        Ok(Self {
            inner: CoreStore::new(chapters, gating, Box::new(sink.clone())),
            sink,
        })
    }

    fn init_learner(&self, learner_id: &str) -> PyResult<()> {
        self.inner
            .init_learner(learner_id, now_ms())
            .map(|_| ())
            .map_err(|e| err(e.code(), &e))
    }

    fn apply_transcript(&self, learner_id: &str, data: &[u8], key: &[u8]) -> PyResult<()> {
        let summary = transcript::parse_and_verify(data, &DigestKey::new(key.to_vec()))
            .map_err(|e| err(e.code(), &e))?;
        self.inner
            .apply_transcript(learner_id, &summary, now_ms())
            .map(|_| ())
            .map_err(|e| err(e.code(), &e))
    }

    fn request_reevaluation(&self, learner_id: &str, chapter_id: &str) -> PyResult<()> {
        self.inner
            .request_reevaluation(learner_id, chapter_id, now_ms())
            .map(|_| ())
            .map_err(|e| err(e.code(), &e))
    }

    fn current(&self, learner_id: &str, chapter_id: &str) -> PyResult<String> {
        let model = self
            .inner
            .learner(learner_id)
            .ok_or_else(|| err("UnknownLearner", learner_id))?;
        model
            .current(chapter_id)
            .map(|m| m.to_string())
            .ok_or_else(|| err("UnknownChapter", chapter_id))
    }

    fn is_chapter_unlocked(&self, learner_id: &str, chapter_id: &str) -> PyResult<bool> {
        self.inner
            .is_chapter_unlocked(learner_id, chapter_id)
            .map_err(|e| err(e.code(), &e))
    }

    /// Always raises: levels change only through transcripts.
    fn set_mastery(&self, learner_id: &str, chapter_id: &str, level: &str) -> PyResult<()> {
        let level = level.parse().map_err(|e| err("UnknownMastery", e))?;
        self.inner
            .direct_set_mastery(learner_id, chapter_id, level)
            .map(|_| ())
            .map_err(|e| err(e.code(), &e))
    }

    fn log(&self) -> Vec<String> {
        self.sink.lines()
    }
}

#[pymodule]
fn metacq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(clamp_difficulty, m)?)?;
    m.add_function(wrap_pyfunction!(mastery_from_score, m)?)?;
    m.add_function(wrap_pyfunction!(next_difficulty, m)?)?;
    m.add_function(wrap_pyfunction!(validate_mcq, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(cross_task_means, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_csv, m)?)?;
    m.add_function(wrap_pyfunction!(verify_transcript, m)?)?;
    m.add_class::<QuestionBank>()?;
    m.add_class::<Session>()?;
    m.add_class::<OlmStore>()?;
    Ok(())
}
