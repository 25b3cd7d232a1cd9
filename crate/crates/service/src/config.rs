use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use metacq_core::domain::check_chapter_list;
use metacq_core::{Chapter, PolicyKind, PolicyParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub url: String,
    #[serde(default = "default_llm_credential_env")]
    pub credential_env: String,
    #[serde(default = "default_llm_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_llm_retries")]
    pub max_retries: u32,
    #[serde(default = "default_llm_concurrency")]
    pub max_concurrent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub bank_path: PathBuf,
    pub event_log_path: PathBuf,
    /// Finalized transcripts are also written here so they survive restarts.
    #[serde(default)]
    pub transcript_dir: Option<PathBuf>,
    #[serde(default = "default_key_env")]
    pub digest_key_env: String,
    #[serde(default)]
    pub policy_params: PolicyParams,
    #[serde(default = "default_true")]
    pub gating_enabled: bool,
    /// Apply transcripts to the learner model at finalize time instead of
    /// waiting for an upload.
    #[serde(default)]
    pub auto_apply_transcripts: bool,
    #[serde(default = "default_ttl")]
    pub session_ttl_secs: u64,
    #[serde(default = "default_chapters")]
    pub chapters: Vec<Chapter>,
    #[serde(default)]
    pub llm: Option<LlmConfig>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_key_env() -> String {
    "METACQ_DIGEST_KEY".into()
}

fn default_true() -> bool {
    true
}

fn default_ttl() -> u64 {
    1800
}

fn default_llm_credential_env() -> String {
    "METACQ_LLM_TOKEN".into()
}

fn default_llm_timeout() -> u64 {
    30
}

fn default_llm_retries() -> u32 {
    2
}

fn default_llm_concurrency() -> usize {
    4
}

/// Chapter 1 one-after-one, chapter 2 static, chapter 3 all-in-all.
pub fn default_chapters() -> Vec<Chapter> {
    [
        ("ch1", "Introduction to Data Privacy", PolicyKind::OneAfterOne),
        ("ch2", "Laws about Data Privacy", PolicyKind::Static),
        ("ch3", "Data Privacy Management", PolicyKind::AllInAll),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (id, title, policy))| Chapter {
        id: id.into(),
        title: title.into(),
        ordinal: i as u32 + 1,
        policy,
        content_ref: None,
    })
    .collect()
}

impl ServiceConfig {
    /// Minimal config with defaults for everything but the file locations.
    pub fn new(bank_path: impl Into<PathBuf>, event_log_path: impl Into<PathBuf>) -> Self {
        Self {
            listen: default_listen(),
            bank_path: bank_path.into(),
            event_log_path: event_log_path.into(),
            transcript_dir: None,
            digest_key_env: default_key_env(),
            policy_params: PolicyParams::default(),
            gating_enabled: true,
            auto_apply_transcripts: false,
            session_ttl_secs: default_ttl(),
            chapters: default_chapters(),
            llm: None,
        }
    }

    /// Loads a JSON config. Relative paths are resolved against the
    /// directory holding the config file.
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ServiceConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.bank_path);
        fix(&mut self.event_log_path);
        if let Some(dir) = self.transcript_dir.as_mut() {
            fix(dir);
        }
        for chapter in &mut self.chapters {
            if let Some(content) = chapter.content_ref.as_mut() {
                let p = Path::new(content.as_str());
                if p.is_relative() {
                    *content = base.join(p).to_string_lossy().into_owned();
                }
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.chapters.is_empty() {
            bail!("config lists no chapters");
        }
        check_chapter_list(&self.chapters)?;
        if self.session_ttl_secs == 0 {
            bail!("session_ttl_secs must be positive");
        }
        Ok(())
    }
}
