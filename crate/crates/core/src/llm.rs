//! External completion adapter for generated questions.
//!
//! The generator builds a prompt carrying the MCQ authoring constraints and a
//! numeric target difficulty, sends it through a [`CompletionTransport`],
//! parses the returned question and runs it through [`validate_mcq`]. Invalid
//! generations are retried up to `max_retries` extra times.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{DifficultyLevel, Mcq};
use crate::provider::{validate_mcq, ProviderError, QuestionSource};

/// JSON body sent to the completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub chapter_id: String,
    pub target_difficulty: f64,
    pub prompt: String,
}

/// JSON body expected back from the completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Unavailable(String),
    Timeout,
}

pub trait CompletionTransport: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, TransportError>;
}

#[derive(Debug, Deserialize)]
struct GeneratedQuestion {
    stem: String,
    options: Vec<String>,
    correct_index: usize,
    hints: Vec<String>,
    #[serde(default)]
    difficulty: Option<f64>,
    #[serde(default)]
    explanation: Option<String>,
}

pub fn build_prompt(context: &str, target: DifficultyLevel) -> String {
    format!(
        "You write one multiple-choice practice question about the chapter text below.\n\
         Rules:\n\
         - exactly three answer options, exactly one of them correct;\n\
         - never use \"none of the above\" or \"all of the above\" as an option;\n\
         - exactly three hints, ordered from least to most revealing;\n\
         - a one-sentence explanation of the correct answer;\n\
         - target difficulty {:.2} on a scale from 0 (easiest) to 1 (hardest).\n\
         Reply with a single JSON object with keys stem, options, correct_index (0-based), \
         hints, difficulty, explanation.\n\n\
         Chapter text:\n{context}",
        target.value()
    )
}

/// Extracts the outermost JSON object from a completion and converts it into
/// an [`Mcq`] with a content-derived id.
pub fn parse_completion(
    completion: &str,
    chapter_id: &str,
    target: DifficultyLevel,
) -> Result<Mcq, String> {
    let start = completion.find('{').ok_or("no JSON object in completion")?;
    let end = completion.rfind('}').ok_or("no JSON object in completion")?;
    if end < start {
        return Err("no JSON object in completion".into());
    }
    let generated: GeneratedQuestion =
        serde_json::from_str(&completion[start..=end]).map_err(|e| e.to_string())?;
    let mut hasher = Sha256::new();
    hasher.update(chapter_id.as_bytes());
    hasher.update([0]);
    hasher.update(generated.stem.as_bytes());
    let digest = hex::encode(hasher.finalize());
    Ok(Mcq {
        id: format!("gen-{chapter_id}-{}", &digest[..12]),
        chapter_id: chapter_id.to_string(),
        stem: generated.stem,
        options: generated.options,
        correct_index: generated.correct_index,
        hints: generated.hints,
        difficulty: generated.difficulty.unwrap_or(target.value()),
        explanation: generated.explanation,
    })
}

/// Counting gate for concurrent outbound requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct LlmGenerator<T> {
    transport: T,
    contexts: HashMap<String, String>,
    max_retries: u32,
    gate: Gate,
}

impl<T: CompletionTransport> LlmGenerator<T> {
    /// `contexts` maps chapter id to the chapter prose embedded in prompts.
    pub fn new(
        transport: T,
        contexts: HashMap<String, String>,
        max_retries: u32,
        max_concurrent: usize,
    ) -> Self {
        Self {
            transport,
            contexts,
            max_retries,
            gate: Gate::new(max_concurrent),
        }
    }

    pub fn generate(
        &self,
        chapter_id: &str,
        target: DifficultyLevel,
        exclude: &BTreeSet<String>,
    ) -> Result<Mcq, ProviderError> {
        let context = self.contexts.get(chapter_id).map_or("", String::as_str);
        let request = CompletionRequest {
            chapter_id: chapter_id.to_string(),
            target_difficulty: target.value(),
            prompt: build_prompt(context, target),
        };
        let attempts = self.max_retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            let response = {
                let _permit = self.gate.acquire();
                self.transport.complete(&request)
            };
            let response = match response {
                Ok(r) => r,
                Err(TransportError::Unavailable(msg)) => {
                    return Err(ProviderError::EndpointUnavailable(msg))
                }
                Err(TransportError::Timeout) => return Err(ProviderError::Timeout),
            };
            match parse_completion(&response.completion, chapter_id, target) {
                Ok(mcq) if exclude.contains(&mcq.id) => {
                    last = format!("question `{}` already used", mcq.id);
                }
                Ok(mcq) => {
                    let report = validate_mcq(&mcq);
                    if report.valid {
                        return Ok(mcq);
                    }
                    last = report.to_string();
                }
                Err(e) => last = e,
            }
        }
        Err(ProviderError::InvalidGeneration { attempts, last })
    }
}

impl<T: CompletionTransport> QuestionSource for LlmGenerator<T> {
    fn provide(
        &self,
        chapter_id: &str,
        target: DifficultyLevel,
        exclude: &BTreeSet<String>,
    ) -> Result<Mcq, ProviderError> {
        self.generate(chapter_id, target, exclude)
    }
}

#[cfg(feature = "http-llm")]
pub use http::HttpTransport;

#[cfg(feature = "http-llm")]
mod http {
    use std::time::Duration;

    use super::{CompletionRequest, CompletionResponse, CompletionTransport, TransportError};

    /// Blocking HTTP transport: POSTs a [`CompletionRequest`] as JSON with a
    /// bearer credential and expects a [`CompletionResponse`].
    pub struct HttpTransport {
        agent: ureq::Agent,
        url: String,
        credential: Option<String>,
    }

    impl HttpTransport {
        pub fn new(url: impl Into<String>, credential: Option<String>, timeout: Duration) -> Self {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into();
            Self {
                agent,
                url: url.into(),
                credential,
            }
        }

        /// Reads the credential from the environment variable `credential_env`.
        pub fn from_env(url: impl Into<String>, credential_env: &str, timeout: Duration) -> Self {
            Self::new(url, std::env::var(credential_env).ok(), timeout)
        }
    }

    impl CompletionTransport for HttpTransport {
        fn complete(
            &self,
            request: &CompletionRequest,
        ) -> Result<CompletionResponse, TransportError> {
            let mut call = self.agent.post(&self.url);
            if let Some(token) = &self.credential {
                call = call.header("Authorization", &format!("Bearer {token}"));
            }
            let mut response = call.send_json(request).map_err(map_err)?;
            response
                .body_mut()
                .read_json::<CompletionResponse>()
                .map_err(map_err)
        }
    }

    fn map_err(e: ureq::Error) -> TransportError {
        match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Unavailable(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;

    struct Scripted {
        replies: Vec<Result<String, TransportError>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: Vec<Result<String, TransportError>>) -> Self {
            Self {
                replies,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl CompletionTransport for Scripted {
        fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse, TransportError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            let reply = &self.replies[i.min(self.replies.len() - 1)];
            reply.clone().map(|completion| CompletionResponse { completion })
        }
    }

    const GOOD: &str = r#"Sure! {"stem":"Which principle limits data collection to a stated purpose?","options":["Purpose limitation","Data portability","Right to erasure"],"correct_index":0,"hints":["Think about why data is collected.","The name mentions a goal.","It starts with P."],"difficulty":0.6}"#;
    const BAD: &str = r#"{"stem":"Pick one","options":["Yes","No","None of the above"],"correct_index":0,"hints":["a","b","c"]}"#;

    fn generator(replies: Vec<Result<String, TransportError>>) -> LlmGenerator<Scripted> {
        let contexts = HashMap::from([("ch1".to_string(), "Data privacy basics.".to_string())]);
        LlmGenerator::new(Scripted::new(replies), contexts, 2, 4)
    }

    #[test]
    fn well_formed_response_passes_through() {
        let g = generator(vec![Ok(GOOD.into())]);
        let mcq = g.generate("ch1", DifficultyLevel::DEFAULT, &BTreeSet::new()).unwrap();
        assert_eq!(mcq.options.len(), 3);
        assert_eq!(mcq.difficulty, 0.6);
        assert!(mcq.id.starts_with("gen-ch1-"));
        assert!(validate_mcq(&mcq).valid);
    }

    #[test]
    fn forbidden_option_is_retried_then_rejected() {
        let g = generator(vec![Ok(BAD.into())]);
        let err = g
            .generate("ch1", DifficultyLevel::DEFAULT, &BTreeSet::new())
            .unwrap_err();
        assert!(matches!(err, ProviderError::InvalidGeneration { attempts: 3, .. }));
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_recovers_after_bad_generation() {
        let g = generator(vec![Ok(BAD.into()), Ok("not json".into()), Ok(GOOD.into())]);
        assert!(g.generate("ch1", DifficultyLevel::DEFAULT, &BTreeSet::new()).is_ok());
    }

    #[test]
    fn endpoint_down_is_reported() {
        let g = generator(vec![Err(TransportError::Unavailable("refused".into()))]);
        assert_eq!(
            g.generate("ch1", DifficultyLevel::DEFAULT, &BTreeSet::new()),
            Err(ProviderError::EndpointUnavailable("refused".into()))
        );
        let g = generator(vec![Err(TransportError::Timeout)]);
        assert_eq!(
            g.generate("ch1", DifficultyLevel::DEFAULT, &BTreeSet::new()),
            Err(ProviderError::Timeout)
        );
    }

    #[test]
    fn missing_difficulty_defaults_to_target() {
        let text = GOOD.replace(r#","difficulty":0.6"#, "");
        let target = DifficultyLevel::new(0.3).unwrap();
        let mcq = parse_completion(&text, "ch1", target).unwrap();
        assert_eq!(mcq.difficulty, 0.3);
    }

    #[test]
    fn prompt_embeds_constraints_and_target() {
        let p = build_prompt("Body", DifficultyLevel::new(0.7).unwrap());
        assert!(p.contains("three answer options"));
        assert!(p.contains("none of the above"));
        assert!(p.contains("0.70"));
        assert!(p.ends_with("Body"));
    }
}
