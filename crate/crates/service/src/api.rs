use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use metacq_core::olm::{LearnerModel, OlmError};
use metacq_core::provider::ProviderError;
use metacq_core::session::{QuestionSlot, SessionError, SessionStatus};
use metacq_core::transcript::{self, TranscriptError, FILE_SUFFIX};
use metacq_core::{
    DifficultyLevel, Marks, MasteryLevel, PolicyKind, SessionResult, SessionState,
};
use serde::{Deserialize, Serialize};

use crate::app::{now_ms, App, SharedSession};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        let conflict = |code| ApiError::new(StatusCode::CONFLICT, code, message.clone());
        match e {
            SessionError::SessionComplete => conflict("SessionComplete"),
            SessionError::QuestionPending => conflict("QuestionPending"),
            SessionError::NoActiveQuestion => conflict("NoActiveQuestion"),
            SessionError::HintsExhausted => conflict("HintsExhausted"),
            SessionError::SessionIncomplete { .. } => conflict("SessionIncomplete"),
            SessionError::NotActive(SessionStatus::Expired) => conflict("SessionExpired"),
            SessionError::NotActive(_) => conflict("SessionFinalized"),
            SessionError::InvalidOption(_) => ApiError::bad_request("InvalidOption", message),
            SessionError::Provider(ProviderError::NoCandidates(_)) => {
                ApiError::new(StatusCode::CONFLICT, "NoCandidates", message)
            }
            SessionError::Provider(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ProviderUnavailable", message)
            }
            SessionError::UnusableQuestion { .. } => {
                ApiError::new(StatusCode::BAD_GATEWAY, "UnusableQuestion", message)
            }
        }
    }
}

impl From<TranscriptError> for ApiError {
    fn from(e: TranscriptError) -> Self {
        let status = match e {
            TranscriptError::NotFinalized => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<OlmError> for ApiError {
    fn from(e: OlmError) -> Self {
        let status = match e {
            OlmError::DuplicateLearner(_) | OlmError::Locked(_) => StatusCode::CONFLICT,
            OlmError::UnknownLearner(_) | OlmError::UnknownChapter(_) => StatusCode::NOT_FOUND,
            OlmError::LearnerMismatch { .. } | OlmError::NoPriorAttempt(_) => {
                StatusCode::BAD_REQUEST
            }
            OlmError::Forbidden => StatusCode::FORBIDDEN,
            OlmError::Log(_) | OlmError::CorruptLog { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/chapters", get(list_chapters))
        .route("/chapters/{id}/content", get(chapter_content))
        .route("/learners", post(create_learner))
        .route("/learners/{id}/olm", get(learner_olm))
        .route("/learners/{id}/olm/upload", post(upload_transcript))
        .route(
            "/learners/{id}/olm/{chapter}",
            axum::routing::put(direct_write)
                .patch(direct_write)
                .post(direct_write),
        )
        .route("/learners/{id}/olm/{chapter}/reevaluate", post(reevaluate))
        .route("/learners/{id}/sessions", post(start_session))
        .route("/sessions/{sid}", get(get_session))
        .route("/sessions/{sid}/question", post(next_question))
        .route("/sessions/{sid}/hint", post(request_hint))
        .route("/sessions/{sid}/answer", post(submit_answer))
        .route("/sessions/{sid}/finalize", post(finalize))
        .route("/sessions/{sid}/transcript", get(download_transcript))
        .fallback(|| async { ApiError::not_found("NotFound", "no such route") })
        .with_state(app)
}

// ---- chapters ----

#[derive(Debug, Deserialize)]
struct ChaptersQuery {
    learner_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChapterView {
    pub id: String,
    pub title: String,
    pub ordinal: u32,
    pub policy: PolicyKind,
    pub unlocked: bool,
    pub has_content: bool,
}

fn model_or_fresh(app: &App, learner_id: Option<&str>) -> LearnerModel {
    learner_id
        .and_then(|id| app.olm.learner(id))
        .unwrap_or_else(|| {
            LearnerModel::new(
                learner_id.unwrap_or(""),
                app.config.chapters.iter().map(|c| c.id.clone()),
            )
        })
}

async fn list_chapters(
    State(app): State<Arc<App>>,
    Query(q): Query<ChaptersQuery>,
) -> Json<Vec<ChapterView>> {
    let model = model_or_fresh(&app, q.learner_id.as_deref());
    let chapters = &app.config.chapters;
    Json(
        chapters
            .iter()
            .map(|c| ChapterView {
                id: c.id.clone(),
                title: c.title.clone(),
                ordinal: c.ordinal,
                policy: c.policy,
                unlocked: model.is_chapter_unlocked(chapters, &c.id, app.config.gating_enabled),
                has_content: c.content_ref.is_some(),
            })
            .collect(),
    )
}

async fn chapter_content(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let chapter = app
        .chapter(&id)
        .ok_or_else(|| ApiError::not_found("UnknownChapter", format!("unknown chapter `{id}`")))?;
    let path = chapter
        .content_ref
        .as_ref()
        .ok_or_else(|| ApiError::not_found("NoContent", format!("chapter `{id}` has no content")))?;
    let text = tokio::fs::read_to_string(path)
        .await
        .map_err(|e| ApiError::internal(format!("reading chapter content: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], text).into_response())
}

// ---- learner model ----

#[derive(Debug, Deserialize)]
struct CreateLearner {
    learner_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptView {
    pub session_id: String,
    pub total_marks: Marks,
    pub mastery: MasteryLevel,
    pub label: String,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlmRow {
    pub chapter_id: String,
    pub title: String,
    pub ordinal: u32,
    pub policy: PolicyKind,
    pub current: MasteryLevel,
    pub label: String,
    pub unlocked: bool,
    pub reevaluation_open: bool,
    pub history: Vec<AttemptView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlmView {
    pub learner_id: String,
    pub chapters: Vec<OlmRow>,
}

fn olm_rows(app: &App, model: &LearnerModel) -> Vec<OlmRow> {
    let chapters = &app.config.chapters;
    chapters
        .iter()
        .map(|c| {
            let progress = model.chapter(&c.id).cloned().unwrap_or_default();
            let current = progress.current();
            OlmRow {
                chapter_id: c.id.clone(),
                title: c.title.clone(),
                ordinal: c.ordinal,
                policy: c.policy,
                current,
                label: current.display_label().to_string(),
                unlocked: model.is_chapter_unlocked(chapters, &c.id, app.config.gating_enabled),
                reevaluation_open: progress.reevaluation_open(),
                history: progress
                    .attempts()
                    .iter()
                    .map(|a| AttemptView {
                        session_id: a.session_id.clone(),
                        total_marks: a.total_marks,
                        mastery: a.mastery,
                        label: a.mastery.display_label().to_string(),
                        timestamp_ms: a.timestamp_ms,
                    })
                    .collect(),
            }
        })
        .collect()
}

fn olm_view(app: &App, model: &LearnerModel) -> OlmView {
    OlmView {
        learner_id: model.learner_id().to_string(),
        chapters: olm_rows(app, model),
    }
}

async fn create_learner(
    State(app): State<Arc<App>>,
    Json(body): Json<CreateLearner>,
) -> ApiResult<(StatusCode, Json<OlmView>)> {
    if body.learner_id.trim().is_empty() {
        return Err(ApiError::bad_request("InvalidLearner", "learner_id is empty"));
    }
    let model = app.olm.init_learner(&body.learner_id, now_ms())?;
    Ok((StatusCode::CREATED, Json(olm_view(&app, &model))))
}

async fn learner_olm(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
) -> ApiResult<Json<OlmView>> {
    let model = app.olm.learner(&id).ok_or(OlmError::UnknownLearner(id))?;
    Ok(Json(olm_view(&app, &model)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub applied: bool,
    pub row: OlmRow,
}

async fn upload_transcript(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    request: Request,
) -> ApiResult<Json<UploadResponse>> {
    let bytes = upload_bytes(request, &app).await?;
    let summary = transcript::parse_and_verify(&bytes, &app.key)?;
    let before = app.olm.learner(&id).ok_or(OlmError::UnknownLearner(id.clone()))?;
    let model = app.olm.apply_transcript(&id, &summary, now_ms())?;
    let row = olm_rows(&app, &model)
        .into_iter()
        .find(|r| r.chapter_id == summary.chapter_id)
        .ok_or(OlmError::UnknownChapter(summary.chapter_id.clone()))?;
    Ok(Json(UploadResponse {
        applied: before != model,
        row,
    }))
}

/// The transcript file: the first multipart field, or the raw body.
async fn upload_bytes(request: Request, app: &Arc<App>) -> ApiResult<Bytes> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let mut form = Multipart::from_request(request, app)
            .await
            .map_err(|e| ApiError::bad_request("MalformedUpload", e.body_text()))?;
        let field = form
            .next_field()
            .await
            .map_err(|e| ApiError::bad_request("MalformedUpload", e.body_text()))?
            .ok_or_else(|| ApiError::bad_request("MalformedUpload", "no file in upload"))?;
        field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request("MalformedUpload", e.body_text()))
    } else {
        Bytes::from_request(request, app)
            .await
            .map_err(|e| ApiError::bad_request("MalformedUpload", e.body_text()))
    }
}

async fn reevaluate(
    State(app): State<Arc<App>>,
    Path((id, chapter)): Path<(String, String)>,
) -> ApiResult<Json<OlmRow>> {
    let model = app.olm.request_reevaluation(&id, &chapter, now_ms())?;
    olm_rows(&app, &model)
        .into_iter()
        .find(|r| r.chapter_id == chapter)
        .map(Json)
        .ok_or_else(|| OlmError::UnknownChapter(chapter).into())
}

#[derive(Debug, Deserialize)]
struct DirectWrite {
    mastery: Option<MasteryLevel>,
}

// Any attempt to write a level directly is refused by the store.
async fn direct_write(
    State(app): State<Arc<App>>,
    Path((id, chapter)): Path<(String, String)>,
    body: Option<Json<DirectWrite>>,
) -> ApiResult<Json<OlmView>> {
    let level = body.and_then(|b| b.0.mastery).unwrap_or_default();
    let model = app.olm.direct_set_mastery(&id, &chapter, level)?;
    Ok(Json(olm_view(&app, &model)))
}

// ---- sessions ----

#[derive(Debug, Deserialize)]
struct StartSession {
    chapter_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub learner_id: String,
    pub chapter_id: String,
    pub policy: PolicyKind,
    pub status: SessionStatus,
    pub answered: usize,
    pub total_questions: usize,
    pub running_total: Marks,
    pub current: Option<QuestionView>,
}

/// What a learner sees of an open question. Hints and the answer key stay
/// on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub session_id: String,
    pub index: u8,
    pub number: u8,
    pub total_questions: usize,
    pub stem: String,
    pub options: Vec<String>,
    pub presented_difficulty: DifficultyLevel,
    pub attainable: Marks,
    pub hints_used: u8,
    pub hints_remaining: u8,
}

fn question_view(session_id: &str, slot: &QuestionSlot) -> QuestionView {
    QuestionView {
        session_id: session_id.to_string(),
        index: slot.index,
        number: slot.index + 1,
        total_questions: metacq_core::domain::QUESTIONS_PER_SESSION,
        stem: slot.mcq.stem.clone(),
        options: slot.mcq.options.clone(),
        presented_difficulty: slot.presented_difficulty,
        attainable: slot.attainable(),
        hints_used: slot.hints_used,
        hints_remaining: metacq_core::domain::MAX_HINTS - slot.hints_used,
    }
}

fn session_view(state: &SessionState) -> SessionView {
    SessionView {
        session_id: state.session_id.clone(),
        learner_id: state.learner_id.clone(),
        chapter_id: state.chapter_id.clone(),
        policy: state.policy,
        status: state.status,
        answered: state.answered_count(),
        total_questions: metacq_core::domain::QUESTIONS_PER_SESSION,
        running_total: state.running_total(),
        current: state
            .current_slot()
            .map(|slot| question_view(&state.session_id, slot)),
    }
}

fn lookup(app: &App, sid: &str) -> ApiResult<SharedSession> {
    app.session(sid)
        .ok_or_else(|| ApiError::not_found("UnknownSession", format!("unknown session `{sid}`")))
}

/// Runs `op` under the session's lock after applying the idle timeout.
fn with_session<T>(
    app: &App,
    sid: &str,
    op: impl FnOnce(&mut crate::app::SessionEntry, i64) -> ApiResult<T>,
) -> ApiResult<T> {
    let shared = lookup(app, sid)?;
    let mut entry = shared.lock().unwrap_or_else(|e| e.into_inner());
    let now = now_ms();
    entry.state.expire_if_idle(now, app.ttl_ms());
    op(&mut entry, now)
}

async fn start_session(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Json(body): Json<StartSession>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let chapter = app.chapter(&body.chapter_id).cloned().ok_or_else(|| {
        ApiError::from(OlmError::UnknownChapter(body.chapter_id.clone()))
    })?;
    let now = now_ms();
    app.olm.ensure_learner(&id, now)?;
    let history = app.olm.session_history(&id, &chapter.id)?;
    let state = SessionState::start(
        uuid::Uuid::new_v4().to_string(),
        id,
        &chapter,
        app.config.policy_params,
        history,
        now,
    );
    let view = session_view(&state);
    app.insert_session(state);
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(
    State(app): State<Arc<App>>,
    Path(sid): Path<String>,
) -> ApiResult<Json<SessionView>> {
    with_session(&app, &sid, |entry, _| Ok(Json(session_view(&entry.state))))
}

async fn next_question(
    State(app): State<Arc<App>>,
    Path(sid): Path<String>,
) -> ApiResult<Json<QuestionView>> {
    // The question source may block on a remote generator.
    tokio::task::spawn_blocking(move || {
        with_session(&app, &sid, |entry, now| {
            let slot = entry.state.next_question(app.source.as_ref(), now)?;
            Ok(Json(question_view(&sid, slot)))
        })
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintView {
    pub tier: u8,
    pub hint: String,
    pub attainable: Marks,
    pub hints_remaining: u8,
}

async fn request_hint(
    State(app): State<Arc<App>>,
    Path(sid): Path<String>,
) -> ApiResult<Json<HintView>> {
    with_session(&app, &sid, |entry, now| {
        let hint = entry.state.request_hint(now)?;
        Ok(Json(HintView {
            tier: hint.tier,
            hint: hint.text,
            attainable: hint.attainable,
            hints_remaining: hint.hints_remaining,
        }))
    })
}

#[derive(Debug, Deserialize)]
struct AnswerBody {
    option_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerView {
    pub correct: bool,
    pub marks: Marks,
    pub correct_index: usize,
    pub feedback: String,
    pub answered: usize,
    pub running_total: Marks,
    pub session_complete: bool,
}

async fn submit_answer(
    State(app): State<Arc<App>>,
    Path(sid): Path<String>,
    Json(body): Json<AnswerBody>,
) -> ApiResult<Json<AnswerView>> {
    with_session(&app, &sid, |entry, now| {
        let fb = entry.state.submit_answer(body.option_index, now)?;
        let answered = entry.state.answered_count();
        Ok(Json(AnswerView {
            correct: fb.correct,
            marks: fb.marks,
            correct_index: fb.correct_index,
            feedback: fb.feedback,
            answered,
            running_total: entry.state.running_total(),
            session_complete: answered == metacq_core::domain::QUESTIONS_PER_SESSION,
        }))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeView {
    #[serde(flatten)]
    pub result: SessionResult,
    pub label: String,
    pub transcript_url: String,
    pub applied: bool,
}

async fn finalize(
    State(app): State<Arc<App>>,
    Path(sid): Path<String>,
) -> ApiResult<Json<FinalizeView>> {
    let (result, bytes, learner_id) = with_session(&app, &sid, |entry, now| {
        let result = entry.state.finalize(now)?;
        let bytes = Arc::new(transcript::serialize(&entry.state, &app.key)?);
        entry.transcript = Some(bytes.clone());
        Ok((result, bytes, entry.state.learner_id.clone()))
    })?;
    app.persist_transcript(&sid, &bytes)
        .map_err(|e| ApiError::internal(format!("writing transcript: {e}")))?;
    let applied = if app.config.auto_apply_transcripts {
        let summary = transcript::parse_and_verify(&bytes, &app.key)?;
        app.olm.apply_transcript(&learner_id, &summary, now_ms())?;
        true
    } else {
        false
    };
    Ok(Json(FinalizeView {
        label: result.mastery.display_label().to_string(),
        transcript_url: format!("/sessions/{sid}/transcript"),
        result,
        applied,
    }))
}

async fn download_transcript(
    State(app): State<Arc<App>>,
    Path(sid): Path<String>,
) -> ApiResult<Response> {
    let bytes = match app.session(&sid) {
        Some(shared) => {
            let entry = shared.lock().unwrap_or_else(|e| e.into_inner());
            match &entry.transcript {
                Some(bytes) => bytes.as_ref().clone(),
                None => return Err(TranscriptError::NotFinalized.into()),
            }
        }
        None => app.stored_transcript(&sid).ok_or_else(|| {
            ApiError::not_found("UnknownSession", format!("no transcript for session `{sid}`"))
        })?,
    };
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, "application/json".parse().unwrap());
    let disposition = format!("attachment; filename=\"{sid}{FILE_SUFFIX}\"");
    headers.insert(
        header::CONTENT_DISPOSITION,
        disposition
            .parse()
            .map_err(|_| ApiError::bad_request("InvalidSession", "session id is not a header value"))?,
    );
    Ok((headers, bytes).into_response())
}
