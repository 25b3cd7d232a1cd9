#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use metacq_core::transcript::DigestKey;
use metacq_service::{App, ServiceConfig};
use serde_json::Value;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const TEST_KEY: &[u8] = b"integration-test-digest-key";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn test_config(dir: &Path) -> ServiceConfig {
    let mut config = ServiceConfig::new(fixtures().join("bank.json"), dir.join("olm-events.ndjson"));
    config.transcript_dir = Some(dir.join("transcripts"));
    for chapter in &mut config.chapters {
        let content = fixtures().join("chapters").join(format!("{}.md", chapter.id));
        chapter.content_ref = Some(content.to_string_lossy().into_owned());
    }
    config
}

pub struct Server {
    pub base: String,
    pub app: Arc<App>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub async fn start(config: ServiceConfig) -> Server {
        let app = App::new(config, DigestKey::new(TEST_KEY)).expect("app starts");
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(metacq_service::serve_on(listener, app.clone(), async {
            let _ = rx.await;
        }));
        Server {
            base,
            app,
            shutdown: Some(tx),
            handle: Some(handle),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.handle.take() {
            handle.await.unwrap().unwrap();
        }
    }
}

/// Answer key from the shipped bank, keyed by question stem. Lets a test
/// client choose right or wrong answers without the server revealing them.
pub fn answer_key() -> HashMap<String, usize> {
    let text = std::fs::read_to_string(fixtures().join("bank.json")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let mut key = HashMap::new();
    for chapter in doc["chapters"].as_array().unwrap() {
        for q in chapter["questions"].as_array().unwrap() {
            key.insert(
                q["stem"].as_str().unwrap().to_string(),
                q["correct_index"].as_u64().unwrap() as usize,
            );
        }
    }
    key
}

/// True if any object key anywhere in `value` is one of `names`.
pub fn contains_key(value: &Value, names: &[&str]) -> bool {
    match value {
        Value::Object(map) => map
            .iter()
            .any(|(k, v)| names.contains(&k.as_str()) || contains_key(v, names)),
        Value::Array(items) => items.iter().any(|v| contains_key(v, names)),
        _ => false,
    }
}

/// Thin JSON client over reqwest.
pub struct Client {
    pub http: reqwest::Client,
    pub base: String,
}

impl Client {
    pub fn new(base: &str) -> Client {
        Client {
            http: reqwest::Client::new(),
            base: base.to_string(),
        }
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(format!("{}{}", self.base, path)).send().await.unwrap();
        decode(resp).await
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let resp = self
            .http
            .post(format!("{}{}", self.base, path))
            .json(&body)
            .send()
            .await
            .unwrap();
        decode(resp).await
    }

    pub async fn post_empty(&self, path: &str) -> (u16, Value) {
        let resp = self.http.post(format!("{}{}", self.base, path)).send().await.unwrap();
        decode(resp).await
    }

    pub async fn download(&self, path: &str) -> (u16, Option<String>, Vec<u8>) {
        let resp = self.http.get(format!("{}{}", self.base, path)).send().await.unwrap();
        let status = resp.status().as_u16();
        let disposition = resp
            .headers()
            .get("content-disposition")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        (status, disposition, resp.bytes().await.unwrap().to_vec())
    }

    pub async fn upload(&self, learner: &str, bytes: Vec<u8>) -> (u16, Value) {
        let part = reqwest::multipart::Part::bytes(bytes).file_name("session.metacq.json");
        let form = reqwest::multipart::Form::new().part("file", part);
        let resp = self
            .http
            .post(format!("{}/learners/{learner}/olm/upload", self.base))
            .multipart(form)
            .send()
            .await
            .unwrap();
        decode(resp).await
    }
}

async fn decode(resp: reqwest::Response) -> (u16, Value) {
    let status = resp.status().as_u16();
    let bytes = resp.bytes().await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

/// Runs one five-question session on `chapter`. `plan[i]` is
/// `(hints, answer_correctly)`. Every response is checked for leaked answer
/// keys while the question is open. Returns the finalize body.
pub async fn run_session(
    client: &Client,
    learner: &str,
    chapter: &str,
    plan: [(u8, bool); 5],
) -> (String, Value) {
    let key = answer_key();
    let (status, session) = client
        .post(&format!("/learners/{learner}/sessions"), serde_json::json!({ "chapter_id": chapter }))
        .await;
    assert_eq!(status, 201, "start session: {session}");
    let sid = session["session_id"].as_str().unwrap().to_string();
    for (hints, correct) in plan {
        let (status, q) = client.post_empty(&format!("/sessions/{sid}/question")).await;
        assert_eq!(status, 200, "question: {q}");
        assert!(!contains_key(&q, &["correct_index", "hints"]), "leak in {q}");
        for tier in 1..=hints {
            let (status, h) = client.post_empty(&format!("/sessions/{sid}/hint")).await;
            assert_eq!(status, 200, "hint: {h}");
            assert_eq!(h["tier"], tier);
            assert!(!contains_key(&h, &["correct_index"]), "leak in {h}");
            let (_, view) = client.get(&format!("/sessions/{sid}")).await;
            assert!(!contains_key(&view, &["correct_index", "hints"]), "leak in {view}");
        }
        let right = key[q["stem"].as_str().unwrap()];
        let option = if correct { right } else { (right + 1) % 3 };
        let (status, a) = client
            .post(&format!("/sessions/{sid}/answer"), serde_json::json!({ "option_index": option }))
            .await;
        assert_eq!(status, 200, "answer: {a}");
        assert_eq!(a["correct"], correct);
    }
    let (status, result) = client.post_empty(&format!("/sessions/{sid}/finalize")).await;
    assert_eq!(status, 200, "finalize: {result}");
    (sid, result)
}
