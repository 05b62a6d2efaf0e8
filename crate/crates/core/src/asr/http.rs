use std::time::Duration;

use serde::Serialize;

use super::{AsrBackend, AsrRequest, LanguageGuess, TranscribeResponse, TranscriptPrediction};
use crate::backend::{AudioField, AudioRef, AudioTransport, BackendError, HttpJsonClient};

/// ASR over HTTP.
///
/// `POST /transcribe` takes `{audio, prompt, language?, seed, start?, end?}`
/// and answers `{language, segments: [{start, end, text, no_speech_prob}]}`;
/// `POST /detect_language` takes `{audio}` and answers `{language, probability}`.
#[derive(Debug, Clone)]
pub struct HttpAsr {
    client: HttpJsonClient,
    transport: AudioTransport,
}

#[derive(Serialize)]
struct TranscribeBody<'a> {
    #[serde(flatten)]
    audio: AudioField,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    language: Option<&'a str>,
    seed: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    end: Option<f64>,
}

impl HttpAsr {
    pub fn new(base_url: &str, timeout: Duration, transport: AudioTransport) -> Self {
        HttpAsr {
            client: HttpJsonClient::new(base_url, timeout),
            transport,
        }
    }
}

impl AsrBackend for HttpAsr {
    fn detect_language(&self, audio: &AudioRef) -> Result<LanguageGuess, BackendError> {
        let body = self.transport.encode(audio)?;
        let guess: LanguageGuess = self.client.post("/detect_language", &body)?;
        if !(0.0..=1.0).contains(&guess.confidence) {
            return Err(BackendError::Protocol(format!(
                "language probability {} outside [0, 1]",
                guess.confidence
            )));
        }
        Ok(guess)
    }

    fn transcribe(&self, request: &AsrRequest) -> Result<TranscriptPrediction, BackendError> {
        let body = TranscribeBody {
            audio: self.transport.encode(&request.audio)?,
            prompt: &request.prompt,
            language: request.language_hint.as_deref(),
            seed: request.run_index,
            start: request.span.map(|s| s.start_s),
            end: request.span.map(|s| s.end_s),
        };
        let response: TranscribeResponse = self.client.post("/transcribe", &body)?;
        response.into_prediction(request.run_index)
    }
}
