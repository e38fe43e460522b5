//! Shared fixtures: a temporary workspace with a small trained model.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dvagen::commands::cmd_train;
use dvagen::pipeline::Pipeline;
use dvagen::server::{router, AppState};
use dvagen::AppConfig;
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn config_text(data: &Path, steps: usize, extra: &str) -> String {
    format!(
        r#"
[paths]
corpus = "{corpus}"
test = "{test}"
vocab = "out/vocab.txt"
checkpoint = "out/model.ckpt"
index = "out/index.bin"
train_log = "out/train_log.jsonl"
report_dir = "out/report"

[vocab]
size = 256

[model]
d_model = 32
max_seq_len = 96

[model.backbone]
n_layers = 1
n_heads = 4

[model.phrase_encoder]
n_layers = 1
n_heads = 4

[train]
batch_size = 8
learning_rate = 3e-3
steps = {steps}
seed = 3

[train.sampler]
strategy = "nword"
n = 3
max_phrases = 8

[sampler]
strategy = "nword"
n = 3
max_phrases = 8

[generation]
strategy = "greedy"
min_new_ids = 4
max_new_ids = 12
k_docs = 4
candidate_cap = 32

[server]
session_capacity = 16

[eval]
prefix_words = 4
max_samples = 10
batch_size = 4
batch_sizes = [1, 2, 4, 8]
benchmark_length = 16
benchmark_repeats = 1
{extra}
"#,
        corpus = data.join("toy_corpus.txt").display(),
        test = data.join("toy_test.txt").display(),
    )
}

pub struct Workspace {
    pub dir: TempDir,
    pub config_path: PathBuf,
}

impl Workspace {
    pub fn new(steps: usize, extra: &str) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let config_path = dir.path().join("config.toml");
        fs::write(&config_path, config_text(&data_dir(), steps, extra)).expect("write config");
        Self { dir, config_path }
    }

    pub fn config(&self, overrides: &[&str]) -> AppConfig {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        AppConfig::load(&self.config_path, &o).expect("config loads")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Train in place and return a loaded pipeline.
    pub fn trained(steps: usize) -> (Self, Pipeline) {
        let ws = Self::new(steps, "");
        let cfg = ws.config(&[]);
        cmd_train(&cfg, &mut Vec::new()).expect("training succeeds");
        let p = Pipeline::load(&cfg).expect("pipeline loads");
        (ws, p)
    }
}

pub fn app(pipeline: &Pipeline) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(pipeline).expect("state"));
    (router(state.clone()), state)
}

pub async fn send(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => builder.body(Body::empty()),
    }
    .expect("request");
    let resp = app.clone().oneshot(req).await.expect("response");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body").to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

pub fn assert_error(status: StatusCode, body: &Value, want_status: StatusCode, code: &str) {
    assert_eq!(status, want_status, "body: {body}");
    assert_eq!(body["error"]["code"], code, "body: {body}");
    assert!(body["error"]["message"]
        .as_str()
        .is_some_and(|m| !m.is_empty()));
}
