use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use metacq_core::olm::OlmStore;
use metacq_core::transcript::{DigestKey, FILE_SUFFIX};
use metacq_core::{Chapter, QuestionBank, QuestionSource, SessionState};

use crate::config::ServiceConfig;

/// One in-memory session plus its signed transcript once finalized.
pub struct SessionEntry {
    pub state: SessionState,
    pub transcript: Option<Arc<Vec<u8>>>,
}

pub type SharedSession = Arc<Mutex<SessionEntry>>;

pub struct App {
    pub config: ServiceConfig,
    pub olm: OlmStore,
    pub source: Arc<dyn QuestionSource>,
    pub key: DigestKey,
    sessions: Mutex<HashMap<String, SharedSession>>,
}

pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

impl App {
    /// Loads the bank and replays the OLM event log named in `config`.
    pub fn new(config: ServiceConfig, key: DigestKey) -> anyhow::Result<Arc<Self>> {
        let bank = QuestionBank::load(&config.bank_path)
            .with_context(|| format!("loading bank {}", config.bank_path.display()))?;
        for chapter in &config.chapters {
            if bank.questions(&chapter.id).is_empty() {
                tracing::warn!(chapter = %chapter.id, "bank has no questions for chapter");
            }
        }
        let source = build_source(&config, bank);
        Self::with_source(config, key, source)
    }

    pub fn with_source(
        config: ServiceConfig,
        key: DigestKey,
        source: Arc<dyn QuestionSource>,
    ) -> anyhow::Result<Arc<Self>> {
        config.validate()?;
        if let Some(parent) = config.event_log_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        if let Some(dir) = &config.transcript_dir {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating transcript dir {}", dir.display()))?;
        }
        let olm = OlmStore::open(
            config.chapters.clone(),
            config.gating_enabled,
            &config.event_log_path,
        )
        .with_context(|| format!("opening event log {}", config.event_log_path.display()))?;
        Ok(Arc::new(Self {
            config,
            olm,
            source,
            key,
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    pub fn chapter(&self, chapter_id: &str) -> Option<&Chapter> {
        self.config.chapters.iter().find(|c| c.id == chapter_id)
    }

    fn registry(&self) -> std::sync::MutexGuard<'_, HashMap<String, SharedSession>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn insert_session(&self, state: SessionState) -> SharedSession {
        let id = state.session_id.clone();
        let entry = Arc::new(Mutex::new(SessionEntry {
            state,
            transcript: None,
        }));
        self.registry().insert(id, entry.clone());
        entry
    }

    pub fn session(&self, session_id: &str) -> Option<SharedSession> {
        self.registry().get(session_id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.registry().len()
    }

    pub fn ttl_ms(&self) -> i64 {
        self.config.session_ttl_secs.saturating_mul(1000) as i64
    }

    /// Drops sessions idle past the TTL. Active ones are marked expired
    /// first so a handler still holding the entry sees the new status.
    pub fn sweep(&self, now_ms: i64) -> usize {
        let ttl = self.ttl_ms();
        let mut registry = self.registry();
        let before = registry.len();
        registry.retain(|_, entry| {
            let mut entry = entry.lock().unwrap_or_else(|e| e.into_inner());
            entry.state.expire_if_idle(now_ms, ttl);
            now_ms - entry.state.last_activity_ms <= ttl
        });
        before - registry.len()
    }

    pub fn transcript_path(&self, session_id: &str) -> Option<PathBuf> {
        let dir = self.config.transcript_dir.as_ref()?;
        let safe = !session_id.is_empty()
            && session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        safe.then(|| dir.join(format!("{session_id}{FILE_SUFFIX}")))
    }

    pub fn persist_transcript(&self, session_id: &str, bytes: &[u8]) -> std::io::Result<()> {
        match self.transcript_path(session_id) {
            Some(path) => {
                let tmp = path.with_extension("tmp");
                std::fs::write(&tmp, bytes)?;
                std::fs::rename(tmp, path)
            }
            None => Ok(()),
        }
    }

    pub fn stored_transcript(&self, session_id: &str) -> Option<Vec<u8>> {
        std::fs::read(self.transcript_path(session_id)?).ok()
    }
}

#[cfg(feature = "http-llm")]
fn chapter_contexts(chapters: &[Chapter]) -> HashMap<String, String> {
    chapters
        .iter()
        .filter_map(|c| {
            let text = std::fs::read_to_string(c.content_ref.as_ref()?).ok()?;
            Some((c.id.clone(), text))
        })
        .collect()
}

#[cfg(feature = "http-llm")]
fn build_source(config: &ServiceConfig, bank: QuestionBank) -> Arc<dyn QuestionSource> {
    use metacq_core::llm::{HttpTransport, LlmGenerator};
    use metacq_core::provider::FallbackSource;

    match &config.llm {
        Some(llm) => {
            let transport = HttpTransport::from_env(
                llm.url.clone(),
                &llm.credential_env,
                std::time::Duration::from_secs(llm.timeout_secs),
            );
            let generator = LlmGenerator::new(
                transport,
                chapter_contexts(&config.chapters),
                llm.max_retries,
                llm.max_concurrent,
            );
            Arc::new(FallbackSource {
                primary: generator,
                fallback: bank,
            })
        }
        None => Arc::new(bank),
    }
}

#[cfg(not(feature = "http-llm"))]
fn build_source(config: &ServiceConfig, bank: QuestionBank) -> Arc<dyn QuestionSource> {
    if config.llm.is_some() {
        tracing::warn!("llm settings ignored: built without the http-llm feature");
    }
    Arc::new(bank)
}
