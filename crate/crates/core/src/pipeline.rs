//! Per-track transcription flow and the dataset build.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{
    align_lines, char_rate_ok, AlignedLine, DEFAULT_ALIGN_THRESHOLD, DEFAULT_MAX_CHAR_RATE,
};
use crate::asr::{
    filter_segments, AsrBackend, AsrRequest, PromptTable, TimeSpan, TranscriptPrediction,
    DEFAULT_NO_SPEECH_THRESHOLD,
};
use crate::backend::{AudioRef, BackendError};
use crate::ensemble::{ensemble, ChatBackend, EnsembleError, EnsembleOutcome, Mode, PredictionSet, PromptMode};
use crate::gate::{is_vocal, GateConfig, GateError, TagBackend};
use crate::metrics::tokenize;
use crate::textnorm::{normalize_text, NormalizationRules};

pub const MIN_RUNS: u32 = 3;
pub const MAX_RUNS: u32 = 5;
pub const DEFAULT_MIN_TOTAL_WORDS: usize = 10;
pub const DEFAULT_MAX_TOTAL_WORDS: usize = 2000;
pub const DEFAULT_LICENSE: &str = "CC BY-NC-SA 4.0";
pub const THANK_YOU: &str = "thank you";

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("num_runs must be in [{MIN_RUNS}, {MAX_RUNS}], got {0}")]
    Runs(u32),
    #[error("{name} must be in {domain}, got {value}")]
    OutOfDomain {
        name: &'static str,
        domain: &'static str,
        value: f64,
    },
    #[error("min_total_words {min} exceeds max_total_words {max}")]
    WordBounds { min: usize, max: usize },
    #[error("worker_count must be at least 1")]
    Workers,
    #[error(transparent)]
    Gate(#[from] GateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub num_runs: u32,
    pub no_speech_threshold: f64,
    pub align_threshold: f64,
    pub max_char_rate: f64,
    pub gate: GateConfig,
    pub min_total_words: usize,
    pub max_total_words: usize,
    pub mode: Mode,
    pub worker_count: usize,
    /// Language code to prefix prompt word.
    pub prompts: PromptTable,
    /// Off sends an empty prompt.
    pub use_prompt: bool,
    /// Off transcribes once and keeps that run.
    pub use_ensemble: bool,
    /// Multi-run ensembling for utterance-level evaluation items.
    pub utterance_ensemble: bool,
    pub license: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            num_runs: MIN_RUNS,
            no_speech_threshold: DEFAULT_NO_SPEECH_THRESHOLD,
            align_threshold: DEFAULT_ALIGN_THRESHOLD,
            max_char_rate: DEFAULT_MAX_CHAR_RATE,
            gate: GateConfig::default(),
            min_total_words: DEFAULT_MIN_TOTAL_WORDS,
            max_total_words: DEFAULT_MAX_TOTAL_WORDS,
            mode: Mode::Dataset,
            worker_count: 1,
            prompts: PromptTable::default(),
            use_prompt: true,
            use_ensemble: true,
            utterance_ensemble: false,
            license: DEFAULT_LICENSE.to_string(),
        }
    }
}

fn check_range(name: &'static str, domain: &'static str, value: f64, ok: bool) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::OutOfDomain { name, domain, value })
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(MIN_RUNS..=MAX_RUNS).contains(&self.num_runs) {
            return Err(ConfigError::Runs(self.num_runs));
        }
        let t = self.no_speech_threshold;
        check_range("no_speech_threshold", "[0, 1]", t, (0.0..=1.0).contains(&t))?;
        let t = self.align_threshold;
        check_range("align_threshold", "[0, 1]", t, (0.0..=1.0).contains(&t))?;
        let r = self.max_char_rate;
        check_range("max_char_rate", "(0, inf)", r, r > 0.0 && r.is_finite())?;
        if self.min_total_words > self.max_total_words {
            return Err(ConfigError::WordBounds {
                min: self.min_total_words,
                max: self.max_total_words,
            });
        }
        if self.worker_count == 0 {
            return Err(ConfigError::Workers);
        }
        self.gate.validate()?;
        Ok(())
    }

    pub fn prompt_for(&self, language: &str) -> String {
        if self.use_prompt {
            self.prompts.prompt_for(language)
        } else {
            String::new()
        }
    }
}

/// The three model backends, shared across workers.
#[derive(Clone)]
pub struct Backends {
    pub asr: Arc<dyn AsrBackend>,
    pub chat: Arc<dyn ChatBackend>,
    pub tagger: Arc<dyn TagBackend>,
}

#[derive(Debug, Error)]
pub enum TrackError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// How the final lines were obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionRecord {
    Ensemble { key: String, corrected: bool },
    Fallback { reason: String },
    SingleRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub language: String,
    pub prompt: String,
    /// Runs after no-speech filtering, in run order.
    pub runs: Vec<TranscriptPrediction>,
    pub lines: Vec<String>,
    /// Index into `runs` of the run whose segments carry the timestamps.
    pub source_run: usize,
    pub selection: SelectionRecord,
}

impl Transcription {
    pub fn source_segments(&self) -> &[crate::asr::TranscriptSegment] {
        &self.runs[self.source_run].segments
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrackOutcome {
    GatedOut { vocal_score: f64 },
    Invalid { language: String, reason: String },
    Transcribed(Transcription),
}

/// Gate (dataset mode only), language, prompt, runs, segment filter and
/// ensemble for one track. `language` skips identification when given.
pub fn transcribe_track(
    audio: &AudioRef,
    language: Option<&str>,
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<TrackOutcome, TrackError> {
    if config.mode == Mode::Dataset {
        let scores = backends.tagger.tag(audio)?;
        if !is_vocal(&scores, &config.gate) {
            return Ok(TrackOutcome::GatedOut {
                vocal_score: config.gate.vocal_score(&scores),
            });
        }
    }
    let language = match language {
        Some(code) if !code.trim().is_empty() => code.trim().to_string(),
        _ => backends.asr.detect_language(audio)?.language,
    };
    let prompt = config.prompt_for(&language);
    let num_runs = if config.use_ensemble { config.num_runs } else { 1 };
    multi_run(audio, None, &language, prompt, num_runs, config, backends)
}

pub(crate) fn multi_run(
    audio: &AudioRef,
    span: Option<TimeSpan>,
    language: &str,
    prompt: String,
    num_runs: u32,
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<TrackOutcome, TrackError> {
    let mut runs = Vec::with_capacity(num_runs as usize);
    for run_index in 0..num_runs {
        let request = AsrRequest {
            audio: audio.clone(),
            prompt: prompt.clone(),
            language_hint: Some(language.to_string()),
            run_index,
            span,
        };
        let prediction = backends.asr.transcribe(&request)?;
        runs.push(filter_segments(&prediction, config.no_speech_threshold));
    }

    let surviving: Vec<usize> = (0..runs.len()).filter(|&i| !runs[i].lines().is_empty()).collect();
    let invalid = |reason: &str| {
        Ok(TrackOutcome::Invalid {
            language: language.to_string(),
            reason: reason.to_string(),
        })
    };
    let single = |source_run: usize, runs: Vec<TranscriptPrediction>| {
        Ok(TrackOutcome::Transcribed(Transcription {
            language: language.to_string(),
            prompt: prompt.clone(),
            lines: runs[source_run].lines(),
            runs,
            source_run,
            selection: SelectionRecord::SingleRun,
        }))
    };
    match surviving.len() {
        0 => return invalid("no speech left after segment filtering"),
        1 if num_runs == 1 || config.mode == Mode::Benchmark => return single(surviving[0], runs),
        1 => return invalid("only one run survived segment filtering"),
        _ => {}
    }

    let set = PredictionSet::new(surviving.iter().map(|&i| runs[i].lines()).collect(), language);
    let mode = PromptMode {
        mode: config.mode,
        language: language.to_string(),
    };
    let (lines, source_run, selection) = match ensemble(&set, &mode, backends.chat.as_ref())? {
        EnsembleOutcome::Invalid { reason } => return invalid(&reason),
        EnsembleOutcome::Final { key, lines, corrected } => {
            let position = set.keys().iter().position(|k| *k == key).unwrap_or(0);
            (lines, surviving[position], SelectionRecord::Ensemble { key, corrected })
        }
        EnsembleOutcome::FallbackUsed { lines, reason } => {
            (lines, surviving[0], SelectionRecord::Fallback { reason })
        }
    };
    Ok(TrackOutcome::Transcribed(Transcription {
        language: language.to_string(),
        prompt,
        runs,
        lines,
        source_run,
        selection,
    }))
}

pub fn total_words(lines: &[String]) -> usize {
    lines.iter().map(|l| tokenize(l).len()).sum()
}

/// Inclusive bounds on the whitespace word count of all lines.
pub fn length_filter(lines: &[String], config: &PipelineConfig) -> bool {
    let words = total_words(lines);
    config.min_total_words <= words && words <= config.max_total_words
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThankYouResult {
    pub kept: Vec<AlignedLine>,
    pub dropped: usize,
    /// Indices into `kept` of lines whose second pass failed.
    pub flagged: Vec<usize>,
}

/// Re-transcribes each line's span and drops lines heard as exactly
/// "thank you". Lines whose second pass fails are kept and flagged.
pub fn thank_you_filter(
    aligned: &[AlignedLine],
    audio: &AudioRef,
    asr: &dyn AsrBackend,
    prompt: &str,
    language: &str,
) -> ThankYouResult {
    let rules = NormalizationRules::for_code(language);
    let mut result = ThankYouResult {
        kept: Vec::with_capacity(aligned.len()),
        dropped: 0,
        flagged: Vec::new(),
    };
    for line in aligned {
        let request = AsrRequest {
            audio: audio.clone(),
            prompt: prompt.to_string(),
            language_hint: Some(language.to_string()),
            run_index: 0,
            span: Some(TimeSpan {
                start_s: line.start_s,
                end_s: line.end_s,
            }),
        };
        match asr.transcribe(&request) {
            Ok(prediction) => {
                if normalize_text(&prediction.lines().join(" "), &rules) == THANK_YOU {
                    result.dropped += 1;
                    continue;
                }
            }
            Err(err) => {
                log::warn!(
                    "second pass failed for {audio} [{:.2}, {:.2}]: {err}",
                    line.start_s,
                    line.end_s
                );
                result.flagged.push(result.kept.len());
            }
        }
        result.kept.push(line.clone());
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTrack {
    pub track_id: String,
    pub audio: AudioRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_lyrics: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tracks: Vec<CorpusTrack>,
    /// Manifest lines that were skipped, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Reads a JSONL corpus manifest. Blank lines are ignored; malformed lines
/// and repeated track ids are skipped with a warning.
pub fn read_corpus(path: &Path) -> std::io::Result<Corpus> {
    let file = File::open(path)?;
    let mut corpus = Corpus {
        tracks: Vec::new(),
        skipped: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let number = index + 1;
        match serde_json::from_str::<CorpusTrack>(&line) {
            Ok(track) if track.track_id.trim().is_empty() => {
                corpus.skipped.push((number, "empty track_id".into()));
            }
            Ok(track) if !seen.insert(track.track_id.clone()) => {
                corpus
                    .skipped
                    .push((number, format!("duplicate track_id {:?}", track.track_id)));
            }
            Ok(track) => corpus.tracks.push(track),
            Err(err) => corpus.skipped.push((number, err.to_string())),
        }
    }
    for (number, reason) in &corpus.skipped {
        log::warn!("{}:{number}: skipping manifest line: {reason}", path.display());
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyricLine {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineCounts {
    /// Final lines entering alignment.
    pub lines_in: usize,
    pub dropped_alignment: usize,
    pub dropped_char_rate: usize,
    pub dropped_thank_you: usize,
    pub emitted: usize,
}

impl LineCounts {
    fn add(&mut self, other: &LineCounts) {
        self.lines_in += other.lines_in;
        self.dropped_alignment += other.dropped_alignment;
        self.dropped_char_rate += other.dropped_char_rate;
        self.dropped_thank_you += other.dropped_thank_you;
        self.emitted += other.emitted;
    }

    pub fn is_consistent(&self) -> bool {
        self.lines_in
            == self.emitted + self.dropped_alignment + self.dropped_char_rate + self.dropped_thank_you
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub num_runs: u32,
    pub surviving_runs: usize,
    pub prompt: String,
    pub source_run: u32,
    pub selection: SelectionRecord,
    pub filters: LineCounts,
    /// Indices into `lines` whose second pass could not be run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unchecked_lines: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub track_id: String,
    pub language: String,
    pub duration_s: f64,
    pub lines: Vec<LyricLine>,
    pub provenance: Provenance,
    pub license: String,
}

/// Where a track left the build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackExit {
    Failed,
    GatedOut,
    Invalid,
    LengthFiltered,
    /// Every line was removed by the line filters.
    Emptied,
    Emitted,
}

/// One journal line: the complete result of one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub track_id: String,
    pub exit: TrackExit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default)]
    pub lines: LineCounts,
    #[serde(default)]
    pub unchecked_lines: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<DatasetEntry>,
}

impl TrackRecord {
    fn new(track_id: &str, exit: TrackExit) -> Self {
        TrackRecord {
            track_id: track_id.to_string(),
            exit,
            language: None,
            lines: LineCounts::default(),
            unchecked_lines: 0,
            detail: None,
            entry: None,
        }
    }
}

/// Runs one corpus track through the dataset-mode flow.
pub fn process_track(track: &CorpusTrack, config: &PipelineConfig, backends: &Backends) -> TrackRecord {
    let mut config = config.clone();
    config.mode = Mode::Dataset;
    let outcome = match transcribe_track(&track.audio, track.language.as_deref(), &config, backends) {
        Ok(outcome) => outcome,
        Err(err) => {
            log::warn!("track {} failed: {err}", track.track_id);
            let mut record = TrackRecord::new(&track.track_id, TrackExit::Failed);
            record.detail = Some(err.to_string());
            return record;
        }
    };
    let t = match outcome {
        TrackOutcome::GatedOut { vocal_score } => {
            let mut record = TrackRecord::new(&track.track_id, TrackExit::GatedOut);
            record.detail = Some(format!("vocal score {vocal_score}"));
            return record;
        }
        TrackOutcome::Invalid { language, reason } => {
            let mut record = TrackRecord::new(&track.track_id, TrackExit::Invalid);
            record.language = Some(language);
            record.detail = Some(reason);
            return record;
        }
        TrackOutcome::Transcribed(t) => t,
    };

    let mut record = TrackRecord::new(&track.track_id, TrackExit::LengthFiltered);
    record.language = Some(t.language.clone());
    if !length_filter(&t.lines, &config) {
        record.detail = Some(format!("{} words", total_words(&t.lines)));
        return record;
    }

    let rules = NormalizationRules::for_code(&t.language);
    let alignment = align_lines(t.source_segments(), &t.lines, config.align_threshold, &rules);
    let mut counts = LineCounts {
        lines_in: t.lines.len(),
        dropped_alignment: alignment.dropped.len(),
        ..LineCounts::default()
    };
    let rate_ok: Vec<AlignedLine> = alignment
        .aligned
        .into_iter()
        .filter(|line| char_rate_ok(line, config.max_char_rate).unwrap_or(false))
        .collect();
    counts.dropped_char_rate = counts.lines_in - counts.dropped_alignment - rate_ok.len();
    let second = thank_you_filter(&rate_ok, &track.audio, backends.asr.as_ref(), &t.prompt, &t.language);
    counts.dropped_thank_you = second.dropped;
    counts.emitted = second.kept.len();
    record.lines = counts;
    record.unchecked_lines = second.flagged.len();

    if second.kept.is_empty() {
        record.exit = TrackExit::Emptied;
        return record;
    }
    let duration_s = track
        .duration_s
        .unwrap_or_else(|| t.runs.iter().map(|r| r.end_time()).fold(0.0, f64::max));
    record.exit = TrackExit::Emitted;
    record.entry = Some(DatasetEntry {
        track_id: track.track_id.clone(),
        language: t.language.clone(),
        duration_s,
        lines: second
            .kept
            .iter()
            .map(|l| LyricLine {
                start_s: l.start_s,
                end_s: l.end_s,
                text: l.text.clone(),
            })
            .collect(),
        provenance: Provenance {
            num_runs: t.runs.len() as u32,
            surviving_runs: t.runs.iter().filter(|r| !r.lines().is_empty()).count(),
            prompt: t.prompt.clone(),
            source_run: t.runs[t.source_run].run_index,
            selection: t.selection.clone(),
            filters: counts,
            unchecked_lines: second.flagged,
        },
        license: config.license.clone(),
    });
    record
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackCounts {
    pub tracks_in: usize,
    pub failed: usize,
    pub gated_out: usize,
    pub invalid: usize,
    pub length_filtered: usize,
    pub emptied: usize,
    pub emitted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageStats {
    pub songs: usize,
    pub lines: usize,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub entered: usize,
    pub passed: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tracks: TrackCounts,
    pub lines: LineCounts,
    pub unchecked_lines: usize,
    pub manifest_lines_skipped: usize,
    pub per_language: BTreeMap<String, LanguageStats>,
    pub total_duration_s: f64,
    pub failures: Vec<(String, String)>,
}

impl RunManifest {
    pub fn from_records(records: &[TrackRecord], manifest_lines_skipped: usize) -> Self {
        let mut m = RunManifest {
            manifest_lines_skipped,
            ..RunManifest::default()
        };
        for r in records {
            m.tracks.tracks_in += 1;
            match r.exit {
                TrackExit::Failed => {
                    m.tracks.failed += 1;
                    m.failures
                        .push((r.track_id.clone(), r.detail.clone().unwrap_or_default()));
                }
                TrackExit::GatedOut => m.tracks.gated_out += 1,
                TrackExit::Invalid => m.tracks.invalid += 1,
                TrackExit::LengthFiltered => m.tracks.length_filtered += 1,
                TrackExit::Emptied => m.tracks.emptied += 1,
                TrackExit::Emitted => m.tracks.emitted += 1,
            }
            m.lines.add(&r.lines);
            m.unchecked_lines += r.unchecked_lines;
            if let Some(entry) = &r.entry {
                let stats = m.per_language.entry(entry.language.clone()).or_default();
                stats.songs += 1;
                stats.lines += entry.lines.len();
                stats.duration_s += entry.duration_s;
                m.total_duration_s += entry.duration_s;
            }
        }
        m
    }

    /// Track and line flow per stage, in pipeline order.
    pub fn stages(&self) -> Vec<StageCount> {
        let t = &self.tracks;
        let l = &self.lines;
        let mut stages = Vec::new();
        let mut entered = t.tracks_in;
        for (name, dropped) in [
            ("backend_failure", t.failed),
            ("vocal_gate", t.gated_out),
            ("ensemble_invalid", t.invalid),
            ("length_filter", t.length_filtered),
            ("no_lines_left", t.emptied),
        ] {
            let passed = entered.saturating_sub(dropped);
            stages.push(StageCount {
                stage: name.to_string(),
                entered,
                passed,
                dropped,
            });
            entered = passed;
        }
        let mut entered = l.lines_in;
        for (name, dropped) in [
            ("alignment", l.dropped_alignment),
            ("char_rate", l.dropped_char_rate),
            ("thank_you", l.dropped_thank_you),
        ] {
            let passed = entered.saturating_sub(dropped);
            stages.push(StageCount {
                stage: name.to_string(),
                entered,
                passed,
                dropped,
            });
            entered = passed;
        }
        stages
    }

    /// Every stage conserves its input, and the track and line flows end at
    /// the emitted counts.
    pub fn is_consistent(&self) -> bool {
        let t = &self.tracks;
        let tracks_ok = t.tracks_in
            == t.failed + t.gated_out + t.invalid + t.length_filtered + t.emptied + t.emitted;
        let stages = self.stages();
        let flows_ok = stages.iter().all(|s| s.entered == s.passed + s.dropped);
        let songs: usize = self.per_language.values().map(|s| s.songs).sum();
        let lines: usize = self.per_language.values().map(|s| s.lines).sum();
        tracks_ok
            && flows_ok
            && self.lines.is_consistent()
            && songs == t.emitted
            && lines == self.lines.emitted
            && stages[4].passed == t.emitted
            && stages[7].passed == self.lines.emitted
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupted journal {path} line {line}: {reason}")]
    Journal {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> BuildError + '_ {
    move |source| BuildError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads completed records. A final line without its newline is treated as
/// an interrupted write and discarded.
pub fn read_journal(path: &Path, corpus: &Corpus) -> Result<Vec<TrackRecord>, BuildError> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(err) => return Err(io_error(path)(err)),
    };
    let known: HashSet<&str> = corpus.tracks.iter().map(|t| t.track_id.as_str()).collect();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    let mut seen = HashSet::new();
    for (index, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let journal_error = |reason: String| BuildError::Journal {
            path: path.to_path_buf(),
            line: index + 1,
            reason,
        };
        let record: TrackRecord = match serde_json::from_str(line) {
            Ok(record) => record,
            Err(_) if !complete && index + 1 == lines.len() => {
                log::warn!("{}: discarding partial final line", path.display());
                break;
            }
            Err(err) => return Err(journal_error(err.to_string())),
        };
        if !known.contains(record.track_id.as_str()) {
            return Err(journal_error(format!(
                "track id {:?} is not in the corpus manifest",
                record.track_id
            )));
        }
        if !seen.insert(record.track_id.clone()) {
            return Err(journal_error(format!("track id {:?} appears twice", record.track_id)));
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub out_dir: PathBuf,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub manifest: RunManifest,
    pub dataset_path: PathBuf,
    pub manifest_path: PathBuf,
    /// Tracks taken from the journal instead of being processed.
    pub resumed: usize,
}

/// Builds the dataset for `corpus` into `options.out_dir`.
///
/// Every finished track is appended to the journal as it completes; the
/// dataset and manifest are written at the end in corpus order, so the output
/// does not depend on the worker count or on how the work was split across
/// resumed runs.
pub fn build_dataset(
    corpus: &Corpus,
    config: &PipelineConfig,
    backends: &Backends,
    options: &BuildOptions,
) -> Result<BuildSummary, BuildError> {
    config.validate()?;
    let out = &options.out_dir;
    fs::create_dir_all(out).map_err(io_error(out))?;
    let journal_path = out.join(JOURNAL_FILE);

    let done = if options.resume {
        read_journal(&journal_path, corpus)?
    } else {
        Vec::new()
    };
    let resumed = done.len();
    if resumed > 0 {
        log::info!("resuming: {resumed} of {} tracks already done", corpus.tracks.len());
    }
    // rewrite so a discarded partial line does not linger
    let mut journal = File::create(&journal_path).map_err(io_error(&journal_path))?;
    for record in &done {
        write_record(&mut journal, record).map_err(io_error(&journal_path))?;
    }
    let done_ids: HashSet<String> = done.iter().map(|r| r.track_id.clone()).collect();
    let pending: Vec<&CorpusTrack> = corpus
        .tracks
        .iter()
        .filter(|t| !done_ids.contains(&t.track_id))
        .collect();

    let journal = Mutex::new(journal);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count)
        .build()
        .map_err(|e| BuildError::Pool(e.to_string()))?;
    let fresh: Vec<TrackRecord> = pool.install(|| {
        pending
            .par_iter()
            .map(|track| {
                let record = process_track(track, config, backends);
                let mut file = journal.lock().expect("journal lock poisoned");
                write_record(&mut *file, &record).map_err(io_error(&journal_path))?;
                Ok(record)
            })
            .collect::<Result<_, BuildError>>()
    })?;

    let mut by_id: HashMap<String, TrackRecord> = done
        .into_iter()
        .chain(fresh)
        .map(|r| (r.track_id.clone(), r))
        .collect();
    let records: Vec<TrackRecord> = corpus
        .tracks
        .iter()
        .filter_map(|t| by_id.remove(&t.track_id))
        .collect();

    let dataset_path = out.join(DATASET_FILE);
    let mut dataset = String::new();
    for entry in records.iter().filter_map(|r| r.entry.as_ref()) {
        dataset.push_str(&serde_json::to_string(entry).expect("dataset entry serializes"));
        dataset.push('\n');
    }
    fs::write(&dataset_path, dataset).map_err(io_error(&dataset_path))?;

    let manifest = RunManifest::from_records(&records, corpus.skipped.len());
    let manifest_path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_error(&manifest_path))?;

    Ok(BuildSummary {
        manifest,
        dataset_path,
        manifest_path,
        resumed,
    })
}

fn write_record(file: &mut impl Write, record: &TrackRecord) -> std::io::Result<()> {
    let line = serde_json::to_string(record).expect("track record serializes");
    writeln!(file, "{line}")?;
    file.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::{AsrScript, ScriptedAsr, ScriptedLanguage, ScriptedTranscript, TranscribeResponse, TranscriptSegment};
    use crate::ensemble::{ChatStrategy, ScriptedChat};
    use crate::gate::{ScriptedTagger, TagScores};

    fn words(n: usize) -> Vec<String> {
        vec![vec!["word"; n].join(" ")]
    }

    #[test]
    fn length_filter_bounds() {
        let config = PipelineConfig::default();
        assert!(!length_filter(&words(5), &config));
        assert!(length_filter(&words(10), &config));
        assert!(length_filter(&words(300), &config));
        assert!(length_filter(&words(2000), &config));
        assert!(!length_filter(&words(2001), &config));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            num_runs: 6,
            ..PipelineConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ConfigError::Runs(6))));
        let bad = PipelineConfig {
            max_char_rate: 0.0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            min_total_words: 50,
            max_total_words: 10,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_from_partial_json() {
        let c: PipelineConfig = serde_json::from_str(r#"{"num_runs": 4, "mode": "benchmark"}"#).unwrap();
        assert_eq!(c.num_runs, 4);
        assert_eq!(c.mode, Mode::Benchmark);
        assert_eq!(c.max_char_rate, 37.5);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"runs": 4}"#).is_err());
    }

    fn seg(start: f64, text: &str, nsp: f64) -> TranscriptSegment {
        TranscriptSegment::new(start, start + 2.0, text, nsp)
    }

    fn reply(segments: Vec<TranscriptSegment>) -> TranscribeResponse {
        TranscribeResponse {
            language: "en".into(),
            segments,
        }
    }

    fn backends(asr: ScriptedAsr, chat: ScriptedChat, tagger: ScriptedTagger) -> (Backends, Arc<ScriptedAsr>, Arc<ScriptedChat>) {
        let asr = Arc::new(asr);
        let chat = Arc::new(chat);
        (
            Backends {
                asr: asr.clone(),
                chat: chat.clone(),
                tagger: Arc::new(tagger),
            },
            asr,
            chat,
        )
    }

    fn tagger(audio: &str, singing: f64) -> ScriptedTagger {
        ScriptedTagger::new(
            [(AudioRef::new(audio), [("Singing", singing)].into_iter().collect::<TagScores>())]
                .into_iter()
                .collect(),
        )
    }

    fn languages(audio: &str) -> std::collections::BTreeMap<AudioRef, ScriptedLanguage> {
        [(
            AudioRef::new(audio),
            ScriptedLanguage {
                language: "en".into(),
                probability: 0.99,
            },
        )]
        .into_iter()
        .collect()
    }

    #[test]
    fn identical_runs_pass_through_ensemble() {
        let asr = ScriptedAsr::new(AsrScript {
            languages: languages("a.wav"),
            transcripts: vec![ScriptedTranscript::reply(
                "a.wav",
                None,
                reply(vec![seg(0.0, "hello there", 0.1), seg(2.0, "general kenobi", 0.2)]),
            )],
        });
        let (b, _, chat) = backends(asr, ScriptedChat::with_strategy(ChatStrategy::First), tagger("a.wav", 0.5));
        let out = transcribe_track(&"a.wav".into(), None, &PipelineConfig::default(), &b).unwrap();
        let TrackOutcome::Transcribed(t) = out else {
            panic!("expected transcription, got {out:?}")
        };
        assert_eq!(t.lines, vec!["hello there", "general kenobi"]);
        assert_eq!(t.prompt, "lyrics:");
        let calls = chat.calls();
        assert_eq!(calls.len(), 1);
        let user = calls[0].request.user_content().unwrap();
        assert_eq!(
            user,
            r#"{"prediction_1":"hello there;general kenobi","prediction_2":"hello there;general kenobi","prediction_3":"hello there;general kenobi"}"#
        );
    }

    #[test]
    fn gated_out_track_makes_no_asr_or_chat_calls() {
        let (b, asr, chat) = backends(
            ScriptedAsr::default(),
            ScriptedChat::with_strategy(ChatStrategy::First),
            tagger("a.wav", 0.01),
        );
        let out = transcribe_track(&"a.wav".into(), None, &PipelineConfig::default(), &b).unwrap();
        assert!(matches!(out, TrackOutcome::GatedOut { .. }));
        assert!(asr.calls().is_empty());
        assert!(chat.calls().is_empty());
    }

    #[test]
    fn all_silent_runs_short_circuit() {
        let asr = ScriptedAsr::new(AsrScript {
            languages: languages("a.wav"),
            transcripts: vec![ScriptedTranscript::reply(
                "a.wav",
                None,
                reply(vec![seg(0.0, "la la", 0.95), seg(2.0, "hmm", 0.99)]),
            )],
        });
        let (b, _, chat) = backends(asr, ScriptedChat::with_strategy(ChatStrategy::First), tagger("a.wav", 0.5));
        let out = transcribe_track(&"a.wav".into(), None, &PipelineConfig::default(), &b).unwrap();
        assert!(matches!(out, TrackOutcome::Invalid { .. }));
        assert!(chat.calls().is_empty());
    }

    fn aligned(start: f64, text: &str) -> AlignedLine {
        AlignedLine {
            text: text.into(),
            start_s: start,
            end_s: start + 2.0,
            source_segment_index: 0,
            distance: 0.0,
        }
    }

    #[test]
    fn thank_you_second_pass() {
        let asr = ScriptedAsr::new(AsrScript {
            languages: languages("a.wav"),
            transcripts: vec![
                ScriptedTranscript::reply("a.wav", None, reply(vec![seg(0.0, "Thank you.", 0.1)])).with_span(0.0, 2.0),
                ScriptedTranscript::reply("a.wav", None, reply(vec![seg(2.0, "thank you so much", 0.1)]))
                    .with_span(2.0, 4.0),
                ScriptedTranscript::transport_failure("a.wav"),
            ],
        });
        let lines = vec![aligned(0.0, "thank you"), aligned(2.0, "thank you so much"), aligned(4.0, "bye")];
        let out = thank_you_filter(&lines, &"a.wav".into(), &asr, "lyrics:", "en");
        assert_eq!(out.dropped, 1);
        let kept: Vec<_> = out.kept.iter().map(|l| l.text.as_str()).collect();
        assert_eq!(kept, vec!["thank you so much", "bye"]);
        assert_eq!(out.flagged, vec![1]);
    }

    #[test]
    fn manifest_consistency() {
        let mut emitted = TrackRecord::new("a", TrackExit::Emitted);
        emitted.lines = LineCounts {
            lines_in: 4,
            dropped_alignment: 1,
            dropped_char_rate: 1,
            dropped_thank_you: 0,
            emitted: 2,
        };
        emitted.entry = Some(DatasetEntry {
            track_id: "a".into(),
            language: "en".into(),
            duration_s: 100.0,
            lines: vec![
                LyricLine { start_s: 0.0, end_s: 1.0, text: "x".into() },
                LyricLine { start_s: 1.0, end_s: 2.0, text: "y".into() },
            ],
            provenance: Provenance {
                num_runs: 3,
                surviving_runs: 3,
                prompt: "lyrics:".into(),
                source_run: 0,
                selection: SelectionRecord::SingleRun,
                filters: emitted.lines,
                unchecked_lines: vec![],
            },
            license: DEFAULT_LICENSE.into(),
        });
        let records = vec![
            emitted,
            TrackRecord::new("b", TrackExit::GatedOut),
            TrackRecord::new("c", TrackExit::Invalid),
        ];
        let m = RunManifest::from_records(&records, 0);
        assert!(m.is_consistent());
        assert_eq!(m.tracks.tracks_in, 3);
        assert_eq!(m.per_language["en"].songs, 1);
        assert_eq!(m.total_duration_s, 100.0);
        let mut broken = m.clone();
        broken.lines.emitted = 3;
        assert!(!broken.is_consistent());
        assert!(RunManifest::from_records(&[], 0).is_consistent());
    }
}
