use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AsrBackend, AsrRequest, LanguageGuess, TimeSpan, TranscribeResponse, TranscriptPrediction,
    TranscriptSegment,
};
use crate::backend::{read_script, AudioRef, BackendError, CallLog, ScriptedFailure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedLanguage {
    pub language: String,
    pub probability: f64,
}

/// One scripted reply. Optional fields act as wildcards; the first entry in
/// file order that matches a request wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTranscript {
    pub audio: AudioRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// `[start, end]`; entries without a span only answer full-track requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<TranscribeResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) error: Option<ScriptedFailure>,
}

impl ScriptedTranscript {
    pub fn reply(audio: &str, run_index: Option<u32>, response: TranscribeResponse) -> Self {
        ScriptedTranscript {
            audio: AudioRef::new(audio),
            run_index,
            prompt: None,
            span: None,
            response: Some(response),
            error: None,
        }
    }

    pub fn with_prompt(mut self, prompt: &str) -> Self {
        self.prompt = Some(prompt.to_string());
        self
    }

    pub fn with_span(mut self, start_s: f64, end_s: f64) -> Self {
        self.span = Some([start_s, end_s]);
        self
    }

    pub fn transport_failure(audio: &str) -> Self {
        ScriptedTranscript {
            audio: AudioRef::new(audio),
            run_index: None,
            prompt: None,
            span: None,
            response: None,
            error: Some(ScriptedFailure::Transport),
        }
    }

    fn matches(&self, request: &AsrRequest) -> bool {
        if self.audio != request.audio {
            return false;
        }
        if self.run_index.is_some_and(|r| r != request.run_index) {
            return false;
        }
        if self.prompt.as_ref().is_some_and(|p| *p != request.prompt) {
            return false;
        }
        match (self.span, request.span) {
            (None, None) => true,
            (Some([s, e]), Some(span)) => {
                (s - span.start_s).abs() < 1e-6 && (e - span.end_s).abs() < 1e-6
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AsrScript {
    #[serde(default)]
    pub languages: BTreeMap<AudioRef, ScriptedLanguage>,
    #[serde(default)]
    pub transcripts: Vec<ScriptedTranscript>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum AsrCall {
    DetectLanguage { audio: AudioRef },
    Transcribe(AsrRequest),
}

/// Deterministic ASR backed by a script.
///
/// Span requests without a dedicated entry fall back to the full-track reply
/// for run 0 (any prompt), restricted to segments overlapping the span.
#[derive(Debug, Default)]
pub struct ScriptedAsr {
    script: AsrScript,
    log: CallLog<AsrCall>,
}

impl ScriptedAsr {
    pub fn new(script: AsrScript) -> Self {
        ScriptedAsr {
            script,
            log: CallLog::default(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(read_script(path)?))
    }

    /// Also appends every call as a JSON line to `path`.
    pub fn with_log_file(mut self, path: &Path) -> std::io::Result<Self> {
        self.log = CallLog::with_file(path)?;
        Ok(self)
    }

    pub fn calls(&self) -> Vec<AsrCall> {
        self.log.snapshot()
    }

    pub fn transcribe_calls(&self) -> Vec<AsrRequest> {
        self.calls()
            .into_iter()
            .filter_map(|c| match c {
                AsrCall::Transcribe(r) => Some(r),
                AsrCall::DetectLanguage { .. } => None,
            })
            .collect()
    }

    fn span_fallback(&self, request: &AsrRequest, span: TimeSpan) -> Option<TranscribeResponse> {
        let full = self.script.transcripts.iter().find(|t| {
            t.audio == request.audio
                && t.span.is_none()
                && t.run_index.is_none_or(|r| r == 0)
                && t.response.is_some()
        })?;
        let response = full.response.as_ref()?;
        let segments = response
            .segments
            .iter()
            .filter(|s| s.start_s < span.end_s && s.end_s > span.start_s)
            .map(|s| TranscriptSegment {
                start_s: s.start_s.max(span.start_s),
                end_s: s.end_s.min(span.end_s),
                ..s.clone()
            })
            .collect();
        Some(TranscribeResponse {
            language: response.language.clone(),
            segments,
        })
    }
}

impl AsrBackend for ScriptedAsr {
    fn detect_language(&self, audio: &AudioRef) -> Result<LanguageGuess, BackendError> {
        self.log.record(AsrCall::DetectLanguage {
            audio: audio.clone(),
        });
        self.script
            .languages
            .get(audio)
            .map(|l| LanguageGuess {
                language: l.language.clone(),
                confidence: l.probability,
            })
            .ok_or_else(|| BackendError::Input(format!("unreadable audio {audio}")))
    }

    fn transcribe(&self, request: &AsrRequest) -> Result<TranscriptPrediction, BackendError> {
        self.log.record(AsrCall::Transcribe(request.clone()));
        let entry = self.script.transcripts.iter().find(|t| t.matches(request));
        let response = match entry {
            Some(ScriptedTranscript {
                error: Some(failure),
                ..
            }) => return Err(failure.to_error(request.audio.as_str())),
            Some(ScriptedTranscript {
                response: Some(response),
                ..
            }) => response.clone(),
            _ => request
                .span
                .and_then(|span| self.span_fallback(request, span))
                .ok_or_else(|| {
                    BackendError::Input(format!(
                        "unreadable audio {} (no scripted transcript for run {})",
                        request.audio, request.run_index
                    ))
                })?,
        };
        response.into_prediction(request.run_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn response(texts: &[&str]) -> TranscribeResponse {
        TranscribeResponse {
            language: "en".into(),
            segments: texts
                .iter()
                .enumerate()
                .map(|(i, t)| TranscriptSegment::new(i as f64 * 2.0, i as f64 * 2.0 + 2.0, *t, 0.1))
                .collect(),
        }
    }

    fn script() -> AsrScript {
        AsrScript {
            languages: [(
                AudioRef::new("a.wav"),
                ScriptedLanguage {
                    language: "fr".into(),
                    probability: 0.98,
                },
            )]
            .into_iter()
            .collect(),
            transcripts: vec![
                ScriptedTranscript::reply("a.wav", Some(1), response(&["second run"])),
                ScriptedTranscript::reply("a.wav", None, response(&["first", "line two"])),
                ScriptedTranscript::reply("a.wav", None, response(&["thank you"])).with_span(2.0, 4.0),
            ],
        }
    }

    #[test]
    fn language_passthrough() {
        let asr = ScriptedAsr::new(script());
        let guess = asr.detect_language(&"a.wav".into()).unwrap();
        assert_eq!(guess.language, "fr");
        assert_eq!(guess.confidence, 0.98);
        assert!(matches!(
            asr.detect_language(&"missing.wav".into()),
            Err(BackendError::Input(_))
        ));
    }

    #[test]
    fn run_indexed_variants() {
        let asr = ScriptedAsr::new(script());
        let r0 = asr
            .transcribe(&AsrRequest::full_track("a.wav".into(), "lyrics:", 0))
            .unwrap();
        let r1 = asr
            .transcribe(&AsrRequest::full_track("a.wav".into(), "lyrics:", 1))
            .unwrap();
        assert_eq!(r0.lines(), vec!["first", "line two"]);
        assert_eq!(r1.lines(), vec!["second run"]);
        assert_eq!(r1.run_index, 1);
        assert_eq!(asr.transcribe_calls().len(), 2);
    }

    #[test]
    fn span_requests() {
        let asr = ScriptedAsr::new(script());
        let mut req = AsrRequest::full_track("a.wav".into(), "lyrics:", 0);
        req.span = Some(TimeSpan {
            start_s: 2.0,
            end_s: 4.0,
        });
        assert_eq!(asr.transcribe(&req).unwrap().lines(), vec!["thank you"]);
        req.span = Some(TimeSpan {
            start_s: 0.5,
            end_s: 1.5,
        });
        let echoed = asr.transcribe(&req).unwrap();
        assert_eq!(echoed.lines(), vec!["first"]);
        assert_eq!(echoed.segments[0].start_s, 0.5);
    }

    #[test]
    fn unknown_audio_is_input_error() {
        let asr = ScriptedAsr::new(script());
        let err = asr
            .transcribe(&AsrRequest::full_track("b.wav".into(), "lyrics:", 0))
            .unwrap_err();
        assert!(matches!(err, BackendError::Input(_)));
    }

    #[test]
    fn script_json_shape() {
        let text = r#"{
            "languages": {"t.wav": {"language": "en", "probability": 0.9}},
            "transcripts": [
                {"audio": "t.wav", "run_index": 0, "prompt": "lyrics:",
                 "response": {"language": "en", "segments": [
                    {"start": 0.0, "end": 1.0, "text": "hey", "no_speech_prob": 0.05}]}},
                {"audio": "t.wav", "error": "transport"}
            ]
        }"#;
        let asr = ScriptedAsr::new(serde_json::from_str(text).unwrap());
        let ok = asr
            .transcribe(&AsrRequest::full_track("t.wav".into(), "lyrics:", 0))
            .unwrap();
        assert_eq!(ok.lines(), vec!["hey"]);
        let err = asr
            .transcribe(&AsrRequest::full_track("t.wav".into(), "", 0))
            .unwrap_err();
        assert!(err.is_retryable());
    }
}
