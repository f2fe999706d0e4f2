//! Live HTTP clients.
//!
//! Chat speaks the common chat-completion convention (`model` + `messages`,
//! answer in `choices[0].message.content`). VQA, grounding and embedding talk
//! to small sidecar services:
//!
//! | capability | request body | response body |
//! |---|---|---|
//! | vqa | `{model, observation, question, image_base64?}` | `{answer}` |
//! | ground | `{model, kind, phrase, observations: [{ref, image_base64?}]}` | `{scores: [f64]}` |
//! | embed | `{model, text}` | `{embedding: [f64]}` or `{data: [{embedding}]}` |
//!
//! Transport failures, 429 and 5xx responses are retried with exponential
//! backoff; other statuses fail immediately.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use serde::Serialize;
use serde_json::Value;

use super::{
    BackendError, ChatBackend, ChatTurn, DecodeParams, EmbedBackend, GroundBackend, GroundingKind,
    VqaBackend,
};
use crate::env_model::ObsRef;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl Endpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Endpoint {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

struct Client {
    endpoint: Endpoint,
    agent: ureq::Agent,
}

impl Client {
    fn new(endpoint: Endpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Client { endpoint, agent }
    }

    fn post_json(&self, body: &impl Serialize) -> Result<Value, BackendError> {
        let retry = self.endpoint.retry;
        let mut backoff = retry.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=retry.attempts.max(1) {
            let mut req = self.agent.post(&self.endpoint.url);
            if let Some(key) = &self.endpoint.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text).map_err(|e| {
                            BackendError::Decode(format!("{e}: {}", truncate(&text)))
                        });
                    }
                    if status != 429 && status < 500 {
                        return Err(BackendError::Status {
                            status,
                            body: truncate(&text),
                        });
                    }
                    last = format!("status {status}: {}", truncate(&text));
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < retry.attempts {
                log::warn!(
                    "{} attempt {attempt} failed: {last}; retrying in {backoff:?}",
                    self.endpoint.url
                );
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(BackendError::Transport {
            attempts: retry.attempts.max(1),
            message: last,
        })
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 400;
    if s.len() <= MAX {
        return s.to_string();
    }
    let mut end = MAX;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &s[..end])
}

/// Resolves observation refs against a media directory.
///
/// A ref naming an existing file under the root is inlined as base64. A ref
/// with a file extension that does not exist is unresolvable; anything else
/// is forwarded as an opaque id for the sidecar to resolve.
#[derive(Debug, Clone, Default)]
pub struct MediaResolver {
    root: Option<PathBuf>,
}

impl MediaResolver {
    pub fn new(root: Option<PathBuf>) -> Self {
        MediaResolver { root }
    }

    pub fn inline(&self, obs: &ObsRef) -> Result<Option<String>, BackendError> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let path = root.join(obs.as_str());
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(
                base64::engine::general_purpose::STANDARD.encode(bytes),
            )),
            Err(_) if path.extension().is_some() => Err(BackendError::Unresolvable(obs.clone())),
            Err(_) => Ok(None),
        }
    }
}

pub struct HttpChat {
    client: Client,
}

impl HttpChat {
    pub fn new(endpoint: Endpoint) -> Self {
        HttpChat {
            client: Client::new(endpoint),
        }
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, turns: &[ChatTurn], params: &DecodeParams) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": params.model,
            "messages": turns,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let resp = self.client.post_json(&body)?;
        let choice = resp
            .pointer("/choices/0/message/content")
            .or_else(|| resp.pointer("/choices/0/text"))
            .and_then(Value::as_str)
            .ok_or_else(|| {
                BackendError::Decode(format!(
                    "no completion in response: {}",
                    truncate(&resp.to_string())
                ))
            })?;
        Ok(choice.to_string())
    }
}

pub struct HttpVqa {
    client: Client,
    media: MediaResolver,
}

impl HttpVqa {
    pub fn new(endpoint: Endpoint, media: MediaResolver) -> Self {
        HttpVqa {
            client: Client::new(endpoint),
            media,
        }
    }
}

impl VqaBackend for HttpVqa {
    fn answer(&self, observation: &ObsRef, question: &str) -> Result<String, BackendError> {
        let mut body = serde_json::json!({
            "model": self.client.endpoint.model,
            "observation": observation,
            "question": question,
        });
        if let Some(b64) = self.media.inline(observation)? {
            body["image_base64"] = Value::String(b64);
        }
        let resp = self.client.post_json(&body)?;
        resp.get("answer")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Decode("missing \"answer\" field".into()))
    }
}

pub struct HttpGround {
    client: Client,
    media: MediaResolver,
    kind: GroundingKind,
}

impl HttpGround {
    pub fn new(endpoint: Endpoint, media: MediaResolver, kind: GroundingKind) -> Self {
        HttpGround {
            client: Client::new(endpoint),
            media,
            kind,
        }
    }
}

impl GroundBackend for HttpGround {
    fn scores(&self, phrase: &str, observations: &[ObsRef]) -> Result<Vec<f64>, BackendError> {
        let obs = observations
            .iter()
            .map(|o| {
                let mut v = serde_json::json!({ "ref": o });
                if let Some(b64) = self.media.inline(o)? {
                    v["image_base64"] = Value::String(b64);
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        let body = serde_json::json!({
            "model": self.client.endpoint.model,
            "kind": self.kind,
            "phrase": phrase,
            "observations": obs,
        });
        let resp = self.client.post_json(&body)?;
        float_array(resp.get("scores"), "scores")
    }

    fn kind(&self) -> GroundingKind {
        self.kind
    }
}

pub struct HttpEmbed {
    client: Client,
}

impl HttpEmbed {
    pub fn new(endpoint: Endpoint) -> Self {
        HttpEmbed {
            client: Client::new(endpoint),
        }
    }
}

impl EmbedBackend for HttpEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let body = serde_json::json!({ "model": self.client.endpoint.model, "text": text });
        let resp = self.client.post_json(&body)?;
        let v = resp
            .get("embedding")
            .or_else(|| resp.pointer("/data/0/embedding"));
        float_array(v, "embedding")
    }
}

fn float_array(v: Option<&Value>, field: &str) -> Result<Vec<f64>, BackendError> {
    v.and_then(Value::as_array)
        .ok_or_else(|| BackendError::Decode(format!("missing {field:?} array")))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| BackendError::Decode(format!("non-numeric entry in {field:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    use super::*;

    /// Serves canned `(status, body)` responses in order, capturing request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let captured = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                captured
                    .lock()
                    .unwrap()
                    .push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen)
    }

    fn fast(url: &str) -> Endpoint {
        Endpoint::new(url, "gpt-test")
            .with_api_key(Some("k".into()))
            .with_retry(RetryPolicy {
                attempts: 3,
                initial_backoff: Duration::from_millis(1),
            })
    }

    #[test]
    fn chat_wire_format() {
        let (url, seen) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"OK"}}]}"#.into(),
        )]);
        let chat = HttpChat::new(fast(&url));
        let out = chat
            .complete(
                &[ChatTurn::user("Say OK")],
                &DecodeParams::deterministic("gpt-test"),
            )
            .unwrap();
        assert_eq!(out, "OK");
        let body: Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "Say OK");
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = serve(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (200, r#"{"embedding":[3.0,4.0]}"#.into()),
        ]);
        let embed = HttpEmbed::new(fast(&url));
        assert_eq!(embed.embed("abc").unwrap(), [3.0, 4.0]);
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, _) = serve(vec![
            (500, "a".into()),
            (502, "b".into()),
            (503, "c".into()),
        ]);
        let vqa = HttpVqa::new(fast(&url), MediaResolver::default());
        let err = vqa.answer(&ObsRef::new("x"), "q").unwrap_err();
        assert!(
            matches!(err, BackendError::Transport { attempts: 3, .. }),
            "{err}"
        );
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let ground = HttpGround::new(
            fast(&url),
            MediaResolver::default(),
            GroundingKind::Detection,
        );
        let err = ground.scores("sofa", &[ObsRef::new("v")]).unwrap_err();
        assert!(matches!(err, BackendError::Status { status: 400, .. }));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn sidecar_payloads_inline_media() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f.png"), b"png").unwrap();
        let (url, seen) = serve(vec![
            (200, r#"{"answer":"a chair"}"#.into()),
            (200, r#"{"scores":[0.25,0.75]}"#.into()),
        ]);
        let media = MediaResolver::new(Some(dir.path().to_path_buf()));
        let vqa = HttpVqa::new(fast(&url), media.clone());
        assert_eq!(
            vqa.answer(&ObsRef::new("f.png"), "What?").unwrap(),
            "a chair"
        );
        let ground = HttpGround::new(fast(&url), media, GroundingKind::Similarity);
        assert_eq!(
            ground
                .scores("sofa", &[ObsRef::new("f.png"), ObsRef::new("opaque-id")])
                .unwrap(),
            [0.25, 0.75]
        );

        let seen = seen.lock().unwrap();
        let vqa_body: Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(vqa_body["image_base64"], "cG5n");
        assert_eq!(vqa_body["question"], "What?");
        let ground_body: Value = serde_json::from_str(&seen[1]).unwrap();
        assert_eq!(ground_body["kind"], "similarity");
        assert_eq!(ground_body["observations"][1]["ref"], "opaque-id");
        assert!(ground_body["observations"][1].get("image_base64").is_none());
    }

    #[test]
    fn missing_media_file_is_unresolvable() {
        let dir = tempfile::tempdir().unwrap();
        let media = MediaResolver::new(Some(dir.path().to_path_buf()));
        let vqa = HttpVqa::new(fast("http://127.0.0.1:9"), media);
        assert!(matches!(
            vqa.answer(&ObsRef::new("missing.png"), "q"),
            Err(BackendError::Unresolvable(_))
        ));
    }
}
