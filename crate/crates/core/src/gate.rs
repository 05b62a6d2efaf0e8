//! Vocal gate over audio-tagging probabilities.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    read_script, AudioRef, AudioTransport, BackendError, CallLog, HttpJsonClient, RateLimited,
    Retrying,
};

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.07;

/// AudioSet labels in the singing and speech family.
pub const DEFAULT_VOCAL_TAGS: [&str; 12] = [
    "Singing",
    "Choir",
    "Yodeling",
    "Chant",
    "Mantra",
    "Male singing",
    "Female singing",
    "Child singing",
    "Synthetic singing",
    "Rapping",
    "Humming",
    "Speech",
];

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("vocal tag set is empty")]
    NoTags,
    #[error("gate threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("tag {tag:?} has probability {value} outside [0, 1]")]
    Probability { tag: String, value: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagScores {
    pub scores: BTreeMap<String, f64>,
}

impl TagScores {
    pub fn validate(&self) -> Result<(), GateError> {
        match self.scores.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            Some((tag, &value)) => Err(GateError::Probability {
                tag: tag.clone(),
                value,
            }),
            None => Ok(()),
        }
    }

    pub fn get(&self, tag: &str) -> f64 {
        self.scores.get(tag).copied().unwrap_or(0.0)
    }
}

impl<K: Into<String>> FromIterator<(K, f64)> for TagScores {
    fn from_iter<I: IntoIterator<Item = (K, f64)>>(iter: I) -> Self {
        TagScores {
            scores: iter.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub vocal_tags: BTreeSet<String>,
    pub threshold: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            vocal_tags: DEFAULT_VOCAL_TAGS.iter().map(|s| s.to_string()).collect(),
            threshold: DEFAULT_GATE_THRESHOLD,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if self.vocal_tags.is_empty() {
            return Err(GateError::NoTags);
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(GateError::Threshold(self.threshold));
        }
        Ok(())
    }

    /// Highest score among the vocal tags; absent tags count as 0.
    pub fn vocal_score(&self, scores: &TagScores) -> f64 {
        self.vocal_tags
            .iter()
            .map(|t| scores.get(t))
            .fold(0.0, f64::max)
    }
}

pub fn is_vocal(scores: &TagScores, config: &GateConfig) -> bool {
    config.vocal_score(scores) >= config.threshold
}

pub trait TagBackend: Send + Sync {
    fn tag(&self, audio: &AudioRef) -> Result<TagScores, BackendError>;
}

impl<T: TagBackend + ?Sized> TagBackend for Arc<T> {
    fn tag(&self, audio: &AudioRef) -> Result<TagScores, BackendError> {
        (**self).tag(audio)
    }
}

impl<T: TagBackend + ?Sized> TagBackend for &T {
    fn tag(&self, audio: &AudioRef) -> Result<TagScores, BackendError> {
        (**self).tag(audio)
    }
}

impl<B: TagBackend> TagBackend for Retrying<B> {
    fn tag(&self, audio: &AudioRef) -> Result<TagScores, BackendError> {
        self.policy.run(|| self.inner.tag(audio))
    }
}

impl<B: TagBackend> TagBackend for RateLimited<B> {
    fn tag(&self, audio: &AudioRef) -> Result<TagScores, BackendError> {
        self.limiter.acquire();
        self.inner.tag(audio)
    }
}

pub fn tag(audio: &AudioRef, client: &dyn TagBackend) -> Result<TagScores, BackendError> {
    client.tag(audio)
}

/// `POST /tag` with `{audio}`, answering `{scores: {tag: probability}}`.
#[derive(Debug, Clone)]
pub struct HttpTagger {
    client: HttpJsonClient,
    transport: AudioTransport,
}

impl HttpTagger {
    pub fn new(base_url: &str, timeout: Duration, transport: AudioTransport) -> Self {
        HttpTagger {
            client: HttpJsonClient::new(base_url, timeout),
            transport,
        }
    }
}

impl TagBackend for HttpTagger {
    fn tag(&self, audio: &AudioRef) -> Result<TagScores, BackendError> {
        let body = self.transport.encode(audio)?;
        let scores: TagScores = self.client.post("/tag", &body)?;
        scores
            .validate()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(scores)
    }
}

/// Script file: `{audio: {scores: {...}}}`.
#[derive(Debug, Default)]
pub struct ScriptedTagger {
    script: BTreeMap<AudioRef, TagScores>,
    log: CallLog<AudioRef>,
}

impl ScriptedTagger {
    pub fn new(script: BTreeMap<AudioRef, TagScores>) -> Self {
        ScriptedTagger {
            script,
            log: CallLog::default(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(read_script(path)?))
    }

    pub fn with_log_file(mut self, path: &Path) -> std::io::Result<Self> {
        self.log = CallLog::with_file(path)?;
        Ok(self)
    }

    pub fn calls(&self) -> Vec<AudioRef> {
        self.log.snapshot()
    }
}

impl TagBackend for ScriptedTagger {
    fn tag(&self, audio: &AudioRef) -> Result<TagScores, BackendError> {
        self.log.record(audio.clone());
        self.script
            .get(audio)
            .cloned()
            .ok_or_else(|| BackendError::Input(format!("unreadable audio {audio}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, f64)]) -> TagScores {
        pairs.iter().map(|&(k, v)| (k, v)).collect()
    }

    #[test]
    fn threshold_examples() {
        let config = GateConfig::default();
        assert!(!is_vocal(&scores(&[("Singing", 0.03), ("Guitar", 0.9)]), &config));
        assert!(is_vocal(&scores(&[("Singing", 0.5)]), &config));
        assert!(!is_vocal(&TagScores::default(), &config));
        assert!(is_vocal(&scores(&[("Speech", 0.07)]), &config));
    }

    #[test]
    fn max_over_vocal_tags() {
        let config = GateConfig::default();
        let s = scores(&[("Singing", 0.01), ("Choir", 0.02), ("Rapping", 0.3)]);
        assert_eq!(config.vocal_score(&s), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        let mut c = GateConfig::default();
        c.threshold = 1.0;
        assert_eq!(c.validate(), Err(GateError::Threshold(1.0)));
        c.threshold = 0.5;
        c.vocal_tags.clear();
        assert_eq!(c.validate(), Err(GateError::NoTags));
    }

    #[test]
    fn score_validation() {
        assert!(scores(&[("Singing", 1.2)]).validate().is_err());
        assert!(scores(&[("Singing", 1.0)]).validate().is_ok());
    }

    #[test]
    fn scripted_tagger() {
        let script: BTreeMap<AudioRef, TagScores> = serde_json::from_str(
            r#"{"song.wav": {"scores": {"Singing": 0.4, "Music": 0.9}}}"#,
        )
        .unwrap();
        let tagger = ScriptedTagger::new(script);
        let s = tag(&"song.wav".into(), &tagger).unwrap();
        assert_eq!(s.get("Singing"), 0.4);
        assert!(matches!(tagger.tag(&"nope.wav".into()), Err(BackendError::Input(_))));
        assert_eq!(tagger.calls().len(), 2);
    }
}
