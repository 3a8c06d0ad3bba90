use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_local_prompt, IMAGINE_INSTRUCTION, SUMMARIZE_INSTRUCTION};
use crate::canvas::RasterImage;
use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "LLM_API_KEY";

/// A text (and optionally image) completion service.
///
/// Implementations return the full response text or an error; partial
/// responses are never surfaced.
pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;

    fn supports_images(&self) -> bool;

    fn complete_text(&self, prompt: &str) -> Result<String>;

    fn complete_multimodal(&self, image: &RasterImage, prompt: &str) -> Result<String>;
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<T: LlmBackend + ?Sized> LlmBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn supports_images(&self) -> bool {
        (**self).supports_images()
    }

    fn complete_text(&self, prompt: &str) -> Result<String> {
        (**self).complete_text(prompt)
    }

    fn complete_multimodal(&self, image: &RasterImage, prompt: &str) -> Result<String> {
        (**self).complete_multimodal(image, prompt)
    }
}

/// Deterministic offline backend; output is a pure function of the prompt and image content.
#[derive(Debug, Default, Clone)]
pub struct StubBackend;

const STUB_SUMMARY_WORDS: usize = 77;

impl StubBackend {
    pub fn new() -> Self {
        Self
    }
}

impl LlmBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete_text(&self, prompt: &str) -> Result<String> {
        let mut lines = prompt.lines();
        let head = lines.next().unwrap_or("");
        if head == IMAGINE_INSTRUCTION {
            let annotated = lines.next().unwrap_or("").trim();
            let k = prompt
                .lines()
                .last()
                .and_then(|l| l.strip_prefix("Reply with "))
                .and_then(|l| l.split_whitespace().next())
                .and_then(|n| n.parse::<usize>().ok())
                .unwrap_or(1);
            return Ok((1..=k)
                .map(|i| format!("beyond the scene of '{annotated}' (variant {i})"))
                .collect::<Vec<_>>()
                .join("\n"));
        }
        if head == SUMMARIZE_INSTRUCTION {
            let parts: Vec<&str> = lines.map(str::trim).filter(|l| !l.is_empty()).collect();
            let summary = format!("summary: {}", parts.join(" | "));
            let words: Vec<&str> = summary.split_whitespace().take(STUB_SUMMARY_WORDS).collect();
            return Ok(words.join(" "));
        }
        Ok(format!("response to prompt#{}", &sha256_hex(prompt.as_bytes())[..16]))
    }

    fn complete_multimodal(&self, image: &RasterImage, prompt: &str) -> Result<String> {
        let hash = &image.content_sha256()[..16];
        Ok(match parse_local_prompt(prompt) {
            Some(d) => format!("continuation({d}) of image#{hash}"),
            None => format!(
                "response to prompt#{} with image#{hash}",
                &sha256_hex(prompt.as_bytes())[..16]
            ),
        })
    }
}

/// Wraps a backend and hides its image capability.
#[derive(Debug, Clone)]
pub struct TextOnly<B>(pub B);

impl<B: LlmBackend> LlmBackend for TextOnly<B> {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn supports_images(&self) -> bool {
        false
    }

    fn complete_text(&self, prompt: &str) -> Result<String> {
        self.0.complete_text(prompt)
    }

    fn complete_multimodal(&self, _image: &RasterImage, _prompt: &str) -> Result<String> {
        Err(Error::Capability(format!(
            "backend {} is text-only",
            self.0.id()
        )))
    }
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt_sha256: String,
    pub image_sha256: Option<String>,
    pub response: String,
    /// Id of the backend that produced the response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

impl TranscriptEntry {
    pub fn new(prompt: &str, image: Option<&RasterImage>, response: impl Into<String>) -> Self {
        Self {
            prompt_sha256: sha256_hex(prompt.as_bytes()),
            image_sha256: image.map(RasterImage::content_sha256),
            response: response.into(),
            backend: None,
        }
    }
}

/// Recorded request/response pairs keyed by content hashes.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Self { entries }
    }

    /// Parses JSON Lines; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry = serde_json::from_str(line).map_err(|e| {
                Error::Validation(format!("transcript line {}: {e}", i + 1))
            })?;
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Replays a [`Transcript`]; the first entry for a key wins.
#[derive(Debug, Clone)]
pub struct TranscriptBackend {
    responses: HashMap<(String, Option<String>), String>,
    id: String,
}

impl TranscriptBackend {
    pub fn new(transcript: &Transcript) -> Self {
        let mut responses = HashMap::new();
        for e in transcript.entries() {
            responses
                .entry((e.prompt_sha256.clone(), e.image_sha256.clone()))
                .or_insert_with(|| e.response.clone());
        }
        let id = transcript
            .entries()
            .iter()
            .find_map(|e| e.backend.clone())
            .unwrap_or_else(|| "transcript".to_string());
        Self { responses, id }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(&Transcript::load(path)?))
    }

    fn lookup(&self, prompt: &str, image: Option<&RasterImage>) -> Result<String> {
        let key = (
            sha256_hex(prompt.as_bytes()),
            image.map(RasterImage::content_sha256),
        );
        self.responses.get(&key).cloned().ok_or_else(|| Error::Backend {
            backend: "transcript".into(),
            message: format!("no recorded response for prompt {}", &key.0[..16]),
            retryable: false,
        })
    }
}

impl LlmBackend for TranscriptBackend {
    /// The recording backend's id when the transcript names one.
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete_text(&self, prompt: &str) -> Result<String> {
        self.lookup(prompt, None)
    }

    fn complete_multimodal(&self, image: &RasterImage, prompt: &str) -> Result<String> {
        self.lookup(prompt, Some(image))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedCall {
    pub prompt: String,
    pub image_sha256: Option<String>,
    /// `None` when the call failed.
    pub response: Option<String>,
}

/// Forwards to an inner backend and records every call.
#[derive(Debug)]
pub struct Recorder<B> {
    inner: B,
    calls: Mutex<Vec<RecordedCall>>,
}

impl<B: LlmBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().expect("recorder lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("recorder lock").len()
    }

    /// Successful calls as a replayable transcript.
    pub fn transcript(&self) -> Transcript {
        Transcript::new(
            self.calls()
                .into_iter()
                .filter_map(|c| {
                    Some(TranscriptEntry {
                        prompt_sha256: sha256_hex(c.prompt.as_bytes()),
                        image_sha256: c.image_sha256,
                        response: c.response?,
                        backend: Some(self.inner.id().to_string()),
                    })
                })
                .collect(),
        )
    }

    fn record(&self, prompt: &str, image: Option<&RasterImage>, out: &Result<String>) {
        self.calls.lock().expect("recorder lock").push(RecordedCall {
            prompt: prompt.to_string(),
            image_sha256: image.map(RasterImage::content_sha256),
            response: out.as_ref().ok().cloned(),
        });
    }
}

impl<B: LlmBackend> LlmBackend for Recorder<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn complete_text(&self, prompt: &str) -> Result<String> {
        let out = self.inner.complete_text(prompt);
        self.record(prompt, None, &out);
        out
    }

    fn complete_multimodal(&self, image: &RasterImage, prompt: &str) -> Result<String> {
        let out = self.inner.complete_multimodal(image, prompt);
        self.record(prompt, Some(image), &out);
        out
    }
}

#[derive(Serialize)]
struct RequestDocument<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Deserialize)]
struct ResponseDocument {
    text: String,
}

/// Extracts `text` from a `{"text": ...}` response body.
pub fn parse_response_document(body: &[u8]) -> Result<String> {
    let doc: ResponseDocument = serde_json::from_slice(body)
        .map_err(|e| Error::Protocol(format!("malformed response document: {e}")))?;
    Ok(doc.text)
}

/// Posts `{prompt, image?}` JSON to a single endpoint and reads `{text}` back.
///
/// Images travel as base64-encoded PNG.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    supports_images: bool,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent,
            supports_images: true,
        }
    }

    /// Reads `LLM_ENDPOINT` (required) and `LLM_API_KEY` (optional).
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| Error::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        Ok(Self::new(endpoint, key))
    }

    pub fn with_image_support(mut self, yes: bool) -> Self {
        self.supports_images = yes;
        self
    }

    fn post(&self, prompt: &str, image: Option<&RasterImage>) -> Result<String> {
        let image = image
            .map(|img| {
                img.to_png_bytes()
                    .map(|png| base64::engine::general_purpose::STANDARD.encode(png))
            })
            .transpose()?;
        let body = serde_json::to_string(&RequestDocument { prompt, image })?;
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let transport = |e: ureq::Error| Error::Backend {
            backend: "http".into(),
            message: e.to_string(),
            retryable: true,
        };
        let mut resp = req.send(body.as_str()).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(Error::Backend {
                backend: "http".into(),
                message: format!("status {status}"),
                retryable: status == 429 || status >= 500,
            });
        }
        parse_response_document(text.as_bytes())
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn supports_images(&self) -> bool {
        self.supports_images
    }

    fn complete_text(&self, prompt: &str) -> Result<String> {
        self.post(prompt, None)
    }

    fn complete_multimodal(&self, image: &RasterImage, prompt: &str) -> Result<String> {
        self.post(prompt, Some(image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::local_prompt;
    use crate::canvas::Direction;

    #[test]
    fn stub_local_caption_names_direction_and_hash() {
        let img = RasterImage::filled(4, 4, 0.25).unwrap();
        let out = StubBackend
            .complete_multimodal(&img, &local_prompt(Direction::Left))
            .unwrap();
        assert_eq!(
            out,
            format!("continuation(left) of image#{}", &img.content_sha256()[..16])
        );
    }

    #[test]
    fn transcript_replays_and_misses() {
        let img = RasterImage::filled(2, 2, 0.1).unwrap();
        let t = Transcript::new(vec![
            TranscriptEntry::new("hello", None, "world"),
            TranscriptEntry::new("look", Some(&img), "a grey square"),
        ]);
        let parsed = Transcript::parse(&t.to_jsonl()).unwrap();
        assert_eq!(parsed.entries(), t.entries());
        let b = TranscriptBackend::new(&parsed);
        assert_eq!(b.complete_text("hello").unwrap(), "world");
        assert_eq!(b.complete_multimodal(&img, "look").unwrap(), "a grey square");
        let miss = b.complete_text("look").unwrap_err();
        assert!(!miss.is_retryable());
    }

    #[test]
    fn malformed_transcript_line_is_reported() {
        let err = Transcript::parse("{\"prompt_sha256\":1}\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn response_document_parsing() {
        assert_eq!(parse_response_document(br#"{"text":"hi"}"#).unwrap(), "hi");
        assert!(matches!(
            parse_response_document(b"{}"),
            Err(Error::Protocol(_))
        ));
    }
}
