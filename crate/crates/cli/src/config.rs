use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use lyricscribe::asr::{AsrBackend, HttpAsr, ScriptedAsr};
use lyricscribe::backend::{AudioTransport, RateLimited, RetryPolicy, Retrying};
use lyricscribe::ensemble::{ChatBackend, HttpChat, Mode, ScriptedChat};
use lyricscribe::gate::{HttpTagger, ScriptedTagger, TagBackend};
use lyricscribe::pipeline::{Backends, PipelineConfig};

use crate::{CliError, Common};

pub const API_KEY_ENV: &str = "LYRICSCRIBE_API_KEY";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub asr_endpoint: Option<String>,
    pub asr_mock: Option<PathBuf>,
    pub chat_endpoint: Option<String>,
    pub chat_mock: Option<PathBuf>,
    pub tagger_endpoint: Option<String>,
    pub tagger_mock: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
    pub chat_requests_per_minute: Option<u32>,
    pub audio_transport: Option<AudioTransport>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    pipeline: Option<toml::Table>,
    backends: BackendSection,
}

/// Settings after merging the config file under the flags.
pub struct Settings {
    pub pipeline: PipelineConfig,
    pub mode_explicit: bool,
    pub backends: BackendSection,
}

fn relative_to(base: &Path, path: Option<PathBuf>) -> Option<PathBuf> {
    path.map(|p| if p.is_relative() { base.join(p) } else { p })
}

pub fn load(common: &Common) -> Result<Settings, CliError> {
    let mut settings = Settings {
        pipeline: PipelineConfig::default(),
        mode_explicit: false,
        backends: BackendSection::default(),
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        if let Some(table) = file.pipeline {
            settings.mode_explicit = table.contains_key("mode");
            settings.pipeline = toml::Value::Table(table)
                .try_into()
                .map_err(|e| CliError::Usage(format!("invalid [pipeline] in {}: {e}", path.display())))?;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut b = file.backends;
        b.asr_mock = relative_to(base, b.asr_mock);
        b.chat_mock = relative_to(base, b.chat_mock);
        b.tagger_mock = relative_to(base, b.tagger_mock);
        settings.backends = b;
    }

    let p = &mut settings.pipeline;
    if let Some(v) = common.runs {
        p.num_runs = v;
    }
    if let Some(v) = common.no_speech_threshold {
        p.no_speech_threshold = v;
    }
    if let Some(v) = common.align_threshold {
        p.align_threshold = v;
    }
    if let Some(v) = common.max_char_rate {
        p.max_char_rate = v;
    }
    if let Some(v) = common.gate_threshold {
        p.gate.threshold = v;
    }
    if let Some(v) = common.workers {
        p.worker_count = v;
    }
    if let Some(v) = common.mode {
        p.mode = v;
        settings.mode_explicit = true;
    }

    let b = &mut settings.backends;
    override_pair(&mut b.asr_endpoint, &mut b.asr_mock, &common.asr_endpoint, &common.asr_mock);
    override_pair(&mut b.chat_endpoint, &mut b.chat_mock, &common.chat_endpoint, &common.chat_mock);
    override_pair(
        &mut b.tagger_endpoint,
        &mut b.tagger_mock,
        &common.tagger_endpoint,
        &common.tagger_mock,
    );
    if let Some(v) = common.timeout_secs {
        b.timeout_secs = Some(v);
    }
    if let Some(v) = common.chat_rpm {
        b.chat_requests_per_minute = Some(v);
    }
    if let Some(v) = common.audio_transport {
        b.audio_transport = Some(v);
    }
    Ok(settings)
}

/// A flag for either side of a backend replaces both values from the file.
fn override_pair(
    endpoint: &mut Option<String>,
    mock: &mut Option<PathBuf>,
    flag_endpoint: &Option<String>,
    flag_mock: &Option<PathBuf>,
) {
    if flag_endpoint.is_some() || flag_mock.is_some() {
        *endpoint = flag_endpoint.clone();
        *mock = flag_mock.clone();
    }
}

pub fn resolve_mode(settings: &Settings, default: Mode) -> Mode {
    if settings.mode_explicit {
        settings.pipeline.mode
    } else {
        default
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub asr: bool,
    pub chat: bool,
    pub tagger: bool,
}

enum Source<'a> {
    Endpoint(&'a str),
    Mock(&'a Path),
    Missing,
}

fn source<'a>(name: &str, endpoint: &'a Option<String>, mock: &'a Option<PathBuf>) -> Result<Source<'a>, CliError> {
    match (endpoint, mock) {
        (Some(_), Some(_)) => Err(CliError::Usage(format!(
            "give either --{name}-endpoint or --{name}-mock, not both"
        ))),
        (Some(e), None) => Ok(Source::Endpoint(e)),
        (None, Some(m)) => Ok(Source::Mock(m)),
        (None, None) => Ok(Source::Missing),
    }
}

fn missing(name: &str) -> CliError {
    CliError::Usage(format!("no {name} backend: pass --{name}-endpoint or --{name}-mock"))
}

struct Unconfigured(&'static str);

impl Unconfigured {
    fn error(&self) -> lyricscribe::backend::BackendError {
        lyricscribe::backend::BackendError::Input(format!("no {} backend configured", self.0))
    }
}

impl AsrBackend for Unconfigured {
    fn detect_language(
        &self,
        _: &lyricscribe::backend::AudioRef,
    ) -> Result<lyricscribe::asr::LanguageGuess, lyricscribe::backend::BackendError> {
        Err(self.error())
    }
    fn transcribe(
        &self,
        _: &lyricscribe::asr::AsrRequest,
    ) -> Result<lyricscribe::asr::TranscriptPrediction, lyricscribe::backend::BackendError> {
        Err(self.error())
    }
}

impl ChatBackend for Unconfigured {
    fn complete(
        &self,
        _: &lyricscribe::ensemble::ChatRequest,
    ) -> Result<String, lyricscribe::backend::BackendError> {
        Err(self.error())
    }
}

impl TagBackend for Unconfigured {
    fn tag(
        &self,
        _: &lyricscribe::backend::AudioRef,
    ) -> Result<lyricscribe::gate::TagScores, lyricscribe::backend::BackendError> {
        Err(self.error())
    }
}

fn mock_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("cannot load mock script {}: {e}", path.display()))
}

fn log_file(dir: Option<&Path>, name: &str) -> Result<Option<PathBuf>, CliError> {
    match dir {
        None => Ok(None),
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Runtime(anyhow::anyhow!("cannot create {}: {e}", dir.display())))?;
            Ok(Some(dir.join(name)))
        }
    }
}

fn attach<T>(
    backend: T,
    log: Option<PathBuf>,
    with_log: impl FnOnce(T, &Path) -> std::io::Result<T>,
) -> Result<T, CliError> {
    match log {
        None => Ok(backend),
        Some(path) => with_log(backend, &path)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("cannot open {}: {e}", path.display()))),
    }
}

/// Builds the backends a command needs. HTTP adapters retry transient
/// failures; the chat adapter is also rate limited.
pub fn build_backends(b: &BackendSection, needs: Needs, mock_log: Option<&Path>) -> Result<Backends, CliError> {
    let timeout = Duration::from_secs(b.timeout_secs.unwrap_or(120));
    let transport = b.audio_transport.unwrap_or_default();
    let retry = RetryPolicy::default();

    let asr: Arc<dyn AsrBackend> = match source("asr", &b.asr_endpoint, &b.asr_mock)? {
        Source::Endpoint(url) => Arc::new(Retrying::new(HttpAsr::new(url, timeout, transport), retry)),
        Source::Mock(path) => {
            let mock = ScriptedAsr::from_file(path).map_err(|e| mock_error(path, e))?;
            Arc::new(attach(mock, log_file(mock_log, "asr.jsonl")?, ScriptedAsr::with_log_file)?)
        }
        Source::Missing if needs.asr => return Err(missing("asr")),
        Source::Missing => Arc::new(Unconfigured("asr")),
    };

    let chat: Arc<dyn ChatBackend> = match source("chat", &b.chat_endpoint, &b.chat_mock)? {
        Source::Endpoint(url) => {
            let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
            if key.is_none() {
                log::warn!("{API_KEY_ENV} is not set; calling the chat endpoint without credentials");
            }
            let http = Retrying::new(HttpChat::new(url, timeout, key), retry);
            Arc::new(RateLimited::new(http, b.chat_requests_per_minute.unwrap_or(60)))
        }
        Source::Mock(path) => {
            let mock = ScriptedChat::from_file(path).map_err(|e| mock_error(path, e))?;
            Arc::new(attach(mock, log_file(mock_log, "chat.jsonl")?, ScriptedChat::with_log_file)?)
        }
        Source::Missing if needs.chat => return Err(missing("chat")),
        Source::Missing => Arc::new(Unconfigured("chat")),
    };

    let tagger: Arc<dyn TagBackend> = match source("tagger", &b.tagger_endpoint, &b.tagger_mock)? {
        Source::Endpoint(url) => Arc::new(Retrying::new(HttpTagger::new(url, timeout, transport), retry)),
        Source::Mock(path) => {
            let mock = ScriptedTagger::from_file(path).map_err(|e| mock_error(path, e))?;
            Arc::new(attach(mock, log_file(mock_log, "tagger.jsonl")?, ScriptedTagger::with_log_file)?)
        }
        Source::Missing if needs.tagger => return Err(missing("tagger")),
        Source::Missing => Arc::new(Unconfigured("tagger")),
    };

    Ok(Backends { asr, chat, tagger })
}
