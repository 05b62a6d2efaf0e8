//! Speech recognition adapter: language identification, prompted long-form
//! transcription, and the no-speech segment filter.

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{AudioRef, BackendError, RateLimited, Retrying};

pub use http::HttpAsr;
pub use scripted::{AsrCall, AsrScript, ScriptedAsr, ScriptedLanguage, ScriptedTranscript};

pub const DEFAULT_NO_SPEECH_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    #[serde(rename = "start")]
    pub start_s: f64,
    #[serde(rename = "end")]
    pub end_s: f64,
    pub text: String,
    pub no_speech_prob: f64,
}

impl TranscriptSegment {
    pub fn new(start_s: f64, end_s: f64, text: impl Into<String>, no_speech_prob: f64) -> Self {
        TranscriptSegment {
            start_s,
            end_s,
            text: text.into(),
            no_speech_prob,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    fn check(&self) -> Result<(), String> {
        if !(self.start_s >= 0.0 && self.start_s < self.end_s && self.end_s.is_finite()) {
            return Err(format!(
                "segment [{}, {}] is not a positive time span",
                self.start_s, self.end_s
            ));
        }
        if !(0.0..=1.0).contains(&self.no_speech_prob) {
            return Err(format!("no_speech_prob {} outside [0, 1]", self.no_speech_prob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptPrediction {
    pub segments: Vec<TranscriptSegment>,
    pub detected_language: String,
    pub run_index: u32,
}

impl TranscriptPrediction {
    /// Segment texts, trimmed, with empty ones dropped.
    pub fn lines(&self) -> Vec<String> {
        self.segments
            .iter()
            .map(|s| s.text.trim())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn end_time(&self) -> f64 {
        self.segments.iter().map(|s| s.end_s).fold(0.0, f64::max)
    }
}

/// Wire body of a transcription reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscribeResponse {
    pub language: String,
    pub segments: Vec<TranscriptSegment>,
}

impl TranscribeResponse {
    /// Validates segment values and orders segments by start time.
    pub fn into_prediction(self, run_index: u32) -> Result<TranscriptPrediction, BackendError> {
        let mut segments = Vec::with_capacity(self.segments.len());
        for segment in self.segments {
            match segment.check() {
                Ok(()) => segments.push(segment),
                // zero-length segments happen in practice; they carry no lyric time
                Err(msg) if segment.start_s >= segment.end_s && segment.start_s >= 0.0 => {
                    log::debug!("dropping degenerate segment: {msg}");
                }
                Err(msg) => return Err(BackendError::Protocol(msg)),
            }
        }
        segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        Ok(TranscriptPrediction {
            segments,
            detected_language: self.language,
            run_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRequest {
    pub audio: AudioRef,
    pub prompt: String,
    pub language_hint: Option<String>,
    /// Seeds backend sampling; distinct runs may differ.
    pub run_index: u32,
    /// Restricts transcription to part of the track.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<TimeSpan>,
}

impl AsrRequest {
    pub fn full_track(audio: AudioRef, prompt: impl Into<String>, run_index: u32) -> Self {
        AsrRequest {
            audio,
            prompt: prompt.into(),
            language_hint: None,
            run_index,
            span: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageGuess {
    pub language: String,
    #[serde(rename = "probability")]
    pub confidence: f64,
}

pub trait AsrBackend: Send + Sync {
    fn detect_language(&self, audio: &AudioRef) -> Result<LanguageGuess, BackendError>;
    fn transcribe(&self, request: &AsrRequest) -> Result<TranscriptPrediction, BackendError>;
}

impl<T: AsrBackend + ?Sized> AsrBackend for Arc<T> {
    fn detect_language(&self, audio: &AudioRef) -> Result<LanguageGuess, BackendError> {
        (**self).detect_language(audio)
    }
    fn transcribe(&self, request: &AsrRequest) -> Result<TranscriptPrediction, BackendError> {
        (**self).transcribe(request)
    }
}

impl<T: AsrBackend + ?Sized> AsrBackend for &T {
    fn detect_language(&self, audio: &AudioRef) -> Result<LanguageGuess, BackendError> {
        (**self).detect_language(audio)
    }
    fn transcribe(&self, request: &AsrRequest) -> Result<TranscriptPrediction, BackendError> {
        (**self).transcribe(request)
    }
}

impl<B: AsrBackend> AsrBackend for Retrying<B> {
    fn detect_language(&self, audio: &AudioRef) -> Result<LanguageGuess, BackendError> {
        self.policy.run(|| self.inner.detect_language(audio))
    }
    fn transcribe(&self, request: &AsrRequest) -> Result<TranscriptPrediction, BackendError> {
        self.policy.run(|| self.inner.transcribe(request))
    }
}

impl<B: AsrBackend> AsrBackend for RateLimited<B> {
    fn detect_language(&self, audio: &AudioRef) -> Result<LanguageGuess, BackendError> {
        self.limiter.acquire();
        self.inner.detect_language(audio)
    }
    fn transcribe(&self, request: &AsrRequest) -> Result<TranscriptPrediction, BackendError> {
        self.limiter.acquire();
        self.inner.transcribe(request)
    }
}

/// Drops segments whose no-speech probability is strictly above `threshold`.
pub fn filter_segments(prediction: &TranscriptPrediction, threshold: f64) -> TranscriptPrediction {
    TranscriptPrediction {
        segments: prediction
            .segments
            .iter()
            .filter(|s| s.no_speech_prob <= threshold)
            .cloned()
            .collect(),
        detected_language: prediction.detected_language.clone(),
        run_index: prediction.run_index,
    }
}

pub const FALLBACK_PROMPT: &str = "lyrics:";

/// Per-language prefix prompts. The defaults cover the six dataset
/// languages; the table deserializes from a plain `{code: word}` map so it can
/// be edited in configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTable(BTreeMap<String, String>);

impl Default for PromptTable {
    fn default() -> Self {
        let entries = [
            ("en", "lyrics"),
            ("fr", "paroles"),
            ("de", "liedtext"),
            ("es", "letra"),
            ("it", "testo"),
            ("ru", "текст песни"),
        ];
        PromptTable(
            entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

impl PromptTable {
    pub fn empty() -> Self {
        PromptTable(BTreeMap::new())
    }

    /// Adds or replaces entries; a trailing colon in `word` is optional.
    pub fn insert(&mut self, code: &str, word: &str) {
        self.0
            .insert(code.to_ascii_lowercase(), word.trim().trim_end_matches(':').to_string());
    }

    pub fn merge(&mut self, other: &PromptTable) {
        for (code, word) in &other.0 {
            self.insert(code, word);
        }
    }

    pub fn prompt_for(&self, language: &str) -> String {
        let code = language
            .split(['-', '_'])
            .next()
            .unwrap_or("")
            .trim()
            .to_ascii_lowercase();
        match self.0.get(&code) {
            Some(word) if !word.is_empty() => format!("{}:", word.trim_end_matches(':')),
            _ => FALLBACK_PROMPT.to_string(),
        }
    }
}

/// Prefix prompt for `language` from the default table.
pub fn localized_prompt(language: &str) -> String {
    PromptTable::default().prompt_for(language)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prediction(probs: &[f64]) -> TranscriptPrediction {
        TranscriptPrediction {
            segments: probs
                .iter()
                .enumerate()
                .map(|(i, &p)| TranscriptSegment::new(i as f64, i as f64 + 1.0, format!("s{i}"), p))
                .collect(),
            detected_language: "en".into(),
            run_index: 0,
        }
    }

    #[test]
    fn filter_threshold_is_strict() {
        let kept = filter_segments(&prediction(&[0.95, 0.5, 0.9, 0.91]), 0.9);
        let texts: Vec<_> = kept.segments.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["s1", "s2"]);
    }

    #[test]
    fn filter_is_idempotent() {
        let once = filter_segments(&prediction(&[0.1, 0.99, 0.3]), 0.9);
        assert_eq!(filter_segments(&once, 0.9), once);
    }

    #[test]
    fn prompts() {
        assert_eq!(localized_prompt("en"), "lyrics:");
        assert_eq!(localized_prompt("fr"), "paroles:");
        assert_eq!(localized_prompt("de"), "liedtext:");
        assert_eq!(localized_prompt("xx"), "lyrics:");
        assert_eq!(localized_prompt("FR-ca"), "paroles:");
        assert_eq!(localized_prompt(""), "lyrics:");
    }

    #[test]
    fn prompt_table_overrides() {
        let mut table = PromptTable::default();
        table.insert("es", "letras:");
        table.insert("pt", "letra");
        assert_eq!(table.prompt_for("es"), "letras:");
        assert_eq!(table.prompt_for("pt"), "letra:");
        let parsed: PromptTable = serde_json::from_str(r#"{"ja": "歌詞"}"#).unwrap();
        assert_eq!(parsed.prompt_for("ja"), "歌詞:");
        assert_eq!(parsed.prompt_for("en"), "lyrics:");
    }

    #[test]
    fn response_validation() {
        let ok = TranscribeResponse {
            language: "en".into(),
            segments: vec![
                TranscriptSegment::new(5.0, 6.0, "b", 0.1),
                TranscriptSegment::new(1.0, 2.0, "a", 0.1),
                TranscriptSegment::new(3.0, 3.0, "zero length", 0.1),
            ],
        };
        let p = ok.into_prediction(2).unwrap();
        assert_eq!(p.run_index, 2);
        assert_eq!(p.lines(), vec!["a", "b"]);

        let bad = TranscribeResponse {
            language: "en".into(),
            segments: vec![TranscriptSegment::new(0.0, 1.0, "x", 1.5)],
        };
        assert!(matches!(bad.into_prediction(0), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn segment_wire_names() {
        let json = serde_json::to_value(TranscriptSegment::new(0.5, 1.5, "hi", 0.2)).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"start": 0.5, "end": 1.5, "text": "hi", "no_speech_prob": 0.2})
        );
    }
}
