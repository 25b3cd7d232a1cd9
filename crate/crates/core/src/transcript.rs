//! Signed session transcripts.
//!
//! A transcript is canonical JSON: object keys sorted, no insignificant
//! whitespace, UTF-8. Its `digest` field is the lowercase hex HMAC-SHA256 of
//! the canonical encoding of every other field. Verification rejects any
//! document that is not byte-for-byte canonical, checks the digest, and then
//! replays the event log through the session scoring rules.

use std::collections::BTreeSet;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::Sha256;
use thiserror::Error;

use crate::domain::{
    mastery_from_score, DifficultyLevel, Marks, MasteryLevel, PolicyKind, MAX_HINTS,
    QUESTIONS_PER_SESSION,
};
use crate::policy::{next_difficulty, PerformanceRecord, PolicyParams};
use crate::provider::OPTIONS_PER_QUESTION;
use crate::session::{attainable, SessionEvent, SessionState, SessionStatus};

pub const TRANSCRIPT_VERSION: u32 = 1;
/// Recommended file suffix for downloaded transcripts.
pub const FILE_SUFFIX: &str = ".metacq.json";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("session is not finalized")]
    NotFinalized,
    #[error("malformed transcript: {0}")]
    MalformedDocument(String),
    #[error("unsupported transcript version {0}")]
    VersionUnsupported(u64),
    #[error("transcript digest does not verify")]
    DigestMismatch,
    #[error("transcript events are inconsistent: {0}")]
    ReplayMismatch(String),
}

impl TranscriptError {
    pub fn code(&self) -> &'static str {
        match self {
            TranscriptError::NotFinalized => "NotFinalized",
            TranscriptError::MalformedDocument(_) => "MalformedDocument",
            TranscriptError::VersionUnsupported(_) => "VersionUnsupported",
            TranscriptError::DigestMismatch => "DigestMismatch",
            TranscriptError::ReplayMismatch(_) => "ReplayMismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalBlock {
    pub total_marks: Marks,
    pub mastery: MasteryLevel,
}

/// Every transcript field except the digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptBody {
    pub version: u32,
    pub session_id: String,
    pub learner_id: String,
    pub chapter_id: String,
    pub policy: PolicyKind,
    pub params: PolicyParams,
    pub finalized_at_ms: i64,
    pub events: Vec<SessionEvent>,
    #[serde(rename = "final")]
    pub final_block: FinalBlock,
}

/// What the learner model needs from a verified transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptSummary {
    pub session_id: String,
    pub learner_id: String,
    pub chapter_id: String,
    pub total_marks: Marks,
    pub mastery: MasteryLevel,
    pub finalized_at_ms: i64,
    /// Per-question performance recovered by replay, in question order.
    pub records: Vec<PerformanceRecord>,
}

/// Server-held signing key. Never serialized.
#[derive(Clone)]
pub struct DigestKey(Vec<u8>);

impl DigestKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }

    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var)
            .ok()
            .filter(|v| !v.is_empty())
            .map(|v| Self(v.into_bytes()))
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("HMAC accepts keys of any length")
    }
}

impl std::fmt::Debug for DigestKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DigestKey(..)")
    }
}

/// Writes `value` with sorted object keys and no whitespace.
pub fn canonical_json(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, key).expect("string encoding is infallible");
                out.push(b':');
                write_canonical(&map[key], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("scalar encoding is infallible"),
    }
}

impl TranscriptBody {
    pub fn from_session(session: &SessionState) -> Result<Self, TranscriptError> {
        if session.status != SessionStatus::Finalized {
            return Err(TranscriptError::NotFinalized);
        }
        let result = session.result().ok_or(TranscriptError::NotFinalized)?;
        Ok(Self {
            version: TRANSCRIPT_VERSION,
            session_id: session.session_id.clone(),
            learner_id: session.learner_id.clone(),
            chapter_id: session.chapter_id.clone(),
            policy: session.policy,
            params: session.params,
            finalized_at_ms: session.finalized_at_ms.unwrap_or(session.last_activity_ms),
            events: session.events().to_vec(),
            final_block: FinalBlock {
                total_marks: result.total_marks,
                mastery: result.mastery,
            },
        })
    }

    /// Canonical signed encoding.
    pub fn sign(&self, key: &DigestKey) -> Vec<u8> {
        let mut value = serde_json::to_value(self).expect("transcript body is serializable");
        let digest = digest_hex(key, &canonical_json(&value));
        value
            .as_object_mut()
            .expect("body serializes to an object")
            .insert("digest".into(), Value::String(digest));
        canonical_json(&value)
    }
}

fn digest_hex(key: &DigestKey, bytes: &[u8]) -> String {
    let mut mac = key.mac();
    mac.update(bytes);
    hex::encode(mac.finalize().into_bytes())
}

/// Serializes a finalized session into its signed transcript bytes.
pub fn serialize(session: &SessionState, key: &DigestKey) -> Result<Vec<u8>, TranscriptError> {
    Ok(TranscriptBody::from_session(session)?.sign(key))
}

fn malformed(msg: impl Into<String>) -> TranscriptError {
    TranscriptError::MalformedDocument(msg.into())
}

/// Parses and fully verifies transcript bytes. Pure in `(bytes, key)`.
pub fn parse_and_verify(bytes: &[u8], key: &DigestKey) -> Result<TranscriptSummary, TranscriptError> {
    let mut value: Value =
        serde_json::from_slice(bytes).map_err(|e| malformed(format!("not JSON: {e}")))?;
    if canonical_json(&value) != bytes {
        return Err(malformed("document is not in canonical form"));
    }
    let object = value
        .as_object_mut()
        .ok_or_else(|| malformed("top level is not an object"))?;
    let digest = match object.remove("digest") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(malformed("digest is not a string")),
        None => return Err(malformed("missing digest")),
    };
    if digest.len() != 64 || !digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(malformed("digest is not 64 lowercase hex characters"));
    }
    let claimed = hex::decode(&digest).map_err(|e| malformed(e.to_string()))?;
    let mut mac = key.mac();
    mac.update(&canonical_json(&value));
    mac.verify_slice(&claimed)
        .map_err(|_| TranscriptError::DigestMismatch)?;

    match value.get("version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(TRANSCRIPT_VERSION) => {}
        Some(v) => return Err(TranscriptError::VersionUnsupported(v)),
        None => return Err(malformed("missing or non-integer version")),
    }
    let body: TranscriptBody =
        serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    let records = replay(&body)?;
    Ok(TranscriptSummary {
        session_id: body.session_id,
        learner_id: body.learner_id,
        chapter_id: body.chapter_id,
        total_marks: body.final_block.total_marks,
        mastery: body.final_block.mastery,
        finalized_at_ms: body.finalized_at_ms,
        records,
    })
}

/// Re-runs the event log through the session rules and checks that it
/// reproduces the stored final block. Returns the per-question records.
pub fn replay(body: &TranscriptBody) -> Result<Vec<PerformanceRecord>, TranscriptError> {
    let mismatch = |msg: String| TranscriptError::ReplayMismatch(msg);
    let mut events = body.events.iter();
    let mut seen_ids = BTreeSet::new();
    let mut records: Vec<PerformanceRecord> = Vec::with_capacity(QUESTIONS_PER_SESSION);
    let mut total = Marks::ZERO;

    for index in 0..QUESTIONS_PER_SESSION as u8 {
        let difficulty = match events.next() {
            Some(SessionEvent::QuestionPresented {
                index: i,
                mcq_id,
                difficulty,
            }) if *i == index => {
                if !seen_ids.insert(mcq_id.as_str()) {
                    return Err(mismatch(format!("question `{mcq_id}` presented twice")));
                }
                *difficulty
            }
            other => {
                return Err(mismatch(format!(
                    "expected question {index} to be presented, found {other:?}"
                )))
            }
        };
        check_policy_target(body, &records, index, difficulty)?;

        let mut hints = 0u8;
        let (correct, marks) = loop {
            match events.next() {
                Some(SessionEvent::HintRequested {
                    index: i,
                    tier,
                    attainable_after,
                }) if *i == index => {
                    if hints >= MAX_HINTS || *tier != hints + 1 {
                        return Err(mismatch(format!("bad hint tier {tier} on question {index}")));
                    }
                    hints += 1;
                    if *attainable_after != attainable(hints) {
                        return Err(mismatch(format!(
                            "hint {tier} on question {index} claims {attainable_after} attainable"
                        )));
                    }
                }
                Some(SessionEvent::AnswerSubmitted {
                    index: i,
                    selected,
                    correct,
                    marks,
                }) if *i == index => {
                    if *selected >= OPTIONS_PER_QUESTION {
                        return Err(mismatch(format!("option {selected} does not exist")));
                    }
                    let expected = if *correct { attainable(hints) } else { Marks::ZERO };
                    if *marks != expected {
                        return Err(mismatch(format!(
                            "question {index} awards {marks}, rules give {expected}"
                        )));
                    }
                    break (*correct, *marks);
                }
                other => {
                    return Err(mismatch(format!(
                        "unexpected event on question {index}: {other:?}"
                    )))
                }
            }
        };
        debug_assert!(correct || marks == Marks::ZERO);
        total = total + marks;
        records.push(PerformanceRecord::new(
            u32::from(index),
            difficulty,
            marks,
            hints,
        ));
    }
    if let Some(extra) = events.next() {
        return Err(mismatch(format!("event after the fifth answer: {extra:?}")));
    }

    let mastery = mastery_from_score(total).map_err(|e| mismatch(e.to_string()))?;
    if total != body.final_block.total_marks || mastery != body.final_block.mastery {
        return Err(mismatch(format!(
            "events give {total} ({mastery}), file claims {} ({})",
            body.final_block.total_marks, body.final_block.mastery
        )));
    }
    Ok(records)
}

// Targets after the first question depend only on in-session outcomes for
// the static and one-after-one policies, so those are checked exactly.
fn check_policy_target(
    body: &TranscriptBody,
    earlier: &[PerformanceRecord],
    index: u8,
    difficulty: DifficultyLevel,
) -> Result<(), TranscriptError> {
    let expected = match body.policy {
        PolicyKind::Static => Some(next_difficulty(PolicyKind::Static, &[], &body.params)),
        PolicyKind::OneAfterOne if index > 0 => {
            Some(next_difficulty(PolicyKind::OneAfterOne, earlier, &body.params))
        }
        _ => None,
    };
    match expected {
        Some(e) if e != difficulty => Err(TranscriptError::ReplayMismatch(format!(
            "question {index} presented at {difficulty}, policy gives {e}"
        ))),
        _ => Ok(()),
    }
}
