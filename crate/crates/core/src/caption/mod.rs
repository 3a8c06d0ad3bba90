//! Caption generation through an LLM backend.
//!
//! Training data uses two text-only calls per annotated caption: one that
//! imagines captions for the scene outside the image, and one that summarizes
//! everything into a global caption. At inference a multimodal call proposes
//! the caption for the next strip in a given direction.

mod backend;

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use backend::{
    parse_response_document, HttpBackend, LlmBackend, Recorder, RecordedCall, StubBackend,
    TextOnly, Transcript, TranscriptBackend, TranscriptEntry, ENV_API_KEY, ENV_ENDPOINT,
};

use crate::canvas::{Direction, RasterImage};
use crate::error::{Error, Result};

pub const IMAGINE_INSTRUCTION: &str =
    "Imagine caption for what happen outside of these caption without sound.";
pub const SUMMARIZE_INSTRUCTION: &str = "Summarize the captions";
const LOCAL_PREFIX: &str = "Create a short sentence outside of the given image to expand this image to the ";

pub const DEFAULT_IMAGINED: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionKind {
    /// Human caption shipped with the dataset.
    Annotated,
    /// Imagined by the LLM from an annotated caption.
    LocalImagined,
    Global,
    /// Proposed by the LLM for the next strip at inference.
    LocalInference,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawCaption")]
pub struct Caption {
    text: String,
    kind: CaptionKind,
}

#[derive(Deserialize)]
struct RawCaption {
    text: String,
    kind: CaptionKind,
}

impl TryFrom<RawCaption> for Caption {
    type Error = Error;

    fn try_from(raw: RawCaption) -> Result<Self> {
        Caption::new(raw.text, raw.kind)
    }
}

impl Caption {
    pub fn new(text: impl Into<String>, kind: CaptionKind) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Validation("caption text is empty".into()));
        }
        Ok(Self { text, kind })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> CaptionKind {
        self.kind
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub annotated: Caption,
    pub imagined_locals: Vec<Caption>,
    pub global: Caption,
}

pub fn imagine_prompt(annotated: &str, k: usize) -> String {
    format!("{IMAGINE_INSTRUCTION}\n{annotated}\n\nReply with {k} captions, one per line.")
}

pub fn summarize_prompt(annotated: &str, locals: &[&str]) -> String {
    let mut p = format!("{SUMMARIZE_INSTRUCTION}\n{annotated}");
    for l in locals {
        p.push('\n');
        p.push_str(l);
    }
    p
}

pub fn local_prompt(direction: Direction) -> String {
    format!("{LOCAL_PREFIX}{}.", direction.name())
}

/// Inverse of [`local_prompt`].
pub fn parse_local_prompt(prompt: &str) -> Option<Direction> {
    prompt
        .strip_prefix(LOCAL_PREFIX)?
        .strip_suffix('.')?
        .parse()
        .ok()
}

/// Trims whitespace and one layer of surrounding quotation marks.
pub fn clean_text(raw: &str) -> String {
    let mut s = raw.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('`', '`')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
            break;
        }
    }
    s.to_string()
}

/// Keeps text up to and including the first sentence terminator followed by whitespace.
pub fn first_sentence(text: &str) -> String {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '\n' {
            return text[..i].trim().to_string();
        }
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => break,
                Some((_, n)) if n.is_whitespace() => {
                    return text[..i + c.len_utf8()].to_string();
                }
                _ => {}
            }
        }
    }
    text.to_string()
}

fn strip_list_marker(line: &str) -> &str {
    let l = line.trim_start();
    for bullet in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = l.strip_prefix(bullet) {
            return rest;
        }
    }
    let digits = l.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &l[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r;
        }
    }
    l
}

/// Splits a multi-caption reply into cleaned, non-empty captions.
pub fn parse_caption_lines(response: &str) -> Vec<String> {
    response
        .lines()
        .map(|l| clean_text(strip_list_marker(l)))
        .filter(|l| !l.is_empty())
        .collect()
}

/// First paragraph of a reply, with line breaks folded to spaces.
pub fn single_paragraph(response: &str) -> String {
    let trimmed = response.trim();
    let para = trimmed.split("\n\n").next().unwrap_or("");
    let joined = para.split_whitespace().collect::<Vec<_>>().join(" ");
    clean_text(&joined)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total backend calls allowed per logical operation.
    pub max_attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            backoff: Duration::ZERO,
        }
    }

    /// Runs `call` then `parse` until one attempt yields a value.
    ///
    /// Retryable backend errors and protocol errors from `parse` consume an
    /// attempt; any other error is returned immediately.
    fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<String>,
        mut parse: impl FnMut(&str) -> Result<T>,
    ) -> Result<T> {
        let attempts = self.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            let outcome = call().and_then(|text| {
                if text.trim().is_empty() {
                    Err(Error::Protocol("backend returned an empty response".into()))
                } else {
                    parse(&text)
                }
            });
            match outcome {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() || matches!(e, Error::Protocol(_)) => {
                    log::warn!("LLM attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                    if attempt < attempts && !self.backoff.is_zero() {
                        thread::sleep(self.backoff * attempt);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt ran"))
    }
}

/// Caption operations bound to one backend and retry policy.
#[derive(Clone, Copy)]
pub struct CaptionService<'a> {
    backend: &'a dyn LlmBackend,
    retry: RetryPolicy,
}

impl<'a> CaptionService<'a> {
    pub fn new(backend: &'a dyn LlmBackend) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend(&self) -> &'a dyn LlmBackend {
        self.backend
    }

    pub fn imagine_local_captions(&self, annotated: &Caption, k: usize) -> Result<Vec<Caption>> {
        if annotated.kind() != CaptionKind::Annotated {
            return Err(Error::Validation(format!(
                "expected an annotated caption, got {:?}",
                annotated.kind()
            )));
        }
        if k == 0 {
            return Err(Error::Validation(
                "number of imagined captions must be at least 1".into(),
            ));
        }
        let prompt = imagine_prompt(annotated.text(), k);
        self.retry.run(
            || self.backend.complete_text(&prompt),
            |text| {
                let lines = parse_caption_lines(text);
                if lines.len() < k {
                    return Err(Error::Protocol(format!(
                        "asked for {k} captions, got {}",
                        lines.len()
                    )));
                }
                lines
                    .into_iter()
                    .take(k)
                    .map(|l| Caption::new(l, CaptionKind::LocalImagined))
                    .collect()
            },
        )
    }

    pub fn summarize_to_global(&self, annotated: &Caption, locals: &[Caption]) -> Result<Caption> {
        if locals.is_empty() {
            return Err(Error::Validation(
                "summarizing needs at least one local caption".into(),
            ));
        }
        let texts: Vec<&str> = locals.iter().map(Caption::text).collect();
        let prompt = summarize_prompt(annotated.text(), &texts);
        self.retry.run(
            || self.backend.complete_text(&prompt),
            |text| {
                Caption::new(single_paragraph(text), CaptionKind::Global)
                    .map_err(|_| Error::Protocol("summary is empty after cleanup".into()))
            },
        )
    }

    pub fn inference_local_caption(
        &self,
        local_image: &RasterImage,
        direction: Direction,
    ) -> Result<Caption> {
        if !self.backend.supports_images() {
            return Err(Error::Capability(format!(
                "backend {} cannot take image inputs",
                self.backend.id()
            )));
        }
        let prompt = local_prompt(direction);
        self.retry.run(
            || self.backend.complete_multimodal(local_image, &prompt),
            |text| {
                Caption::new(first_sentence(&clean_text(text)), CaptionKind::LocalInference)
                    .map_err(|_| Error::Protocol("local caption is empty after cleanup".into()))
            },
        )
    }

    pub fn build_caption_record(&self, annotated: &Caption, k: usize) -> Result<CaptionRecord> {
        let imagined_locals = self.imagine_local_captions(annotated, k)?;
        let global = self.summarize_to_global(annotated, &imagined_locals)?;
        Ok(CaptionRecord {
            annotated: annotated.clone(),
            imagined_locals,
            global,
        })
    }
}
