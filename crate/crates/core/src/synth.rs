//! Seeded synthetic corpora with matching scripts for the scripted backends.
//!
//! Each track has reference lyric lines on a timeline. Every transcription
//! run corrupts words independently, and instrumental gaps appear as segments
//! with high no-speech probability. Optional extras include fast lines that
//! break the character-rate limit, trailing "Thank you." hallucinations,
//! failing second-pass spans, and chat replies that reject a track or
//! rewrite its lyrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{
    filter_segments, localized_prompt, AsrScript, ScriptedAsr, ScriptedLanguage, ScriptedTranscript,
    TranscribeResponse, TranscriptSegment, DEFAULT_NO_SPEECH_THRESHOLD,
};
use crate::backend::AudioRef;
use crate::ensemble::{
    build_chat_request, request_digest, ChatScript, ChatStrategy, EnsembleResponse, PredictionSet,
    PromptMode, PromptTemplate, ScriptedChat, Selection,
};
use crate::eval::{BenchmarkItem, Granularity};
use crate::gate::{ScriptedTagger, TagScores};
use crate::pipeline::{Backends, Corpus, CorpusTrack};

const VOCAB: [(&str, [&str; 16]); 6] = [
    ("en", ["love", "night", "heart", "fire", "dream", "road", "light", "rain", "home", "sky", "gold", "river", "stone", "song", "wind", "shadow"]),
    ("fr", ["amour", "nuit", "coeur", "feu", "rêve", "route", "lumière", "pluie", "maison", "ciel", "été", "rivière", "pierre", "chanson", "vent", "ombre"]),
    ("de", ["liebe", "nacht", "herz", "feuer", "traum", "straße", "licht", "regen", "heimat", "himmel", "gold", "fluss", "stein", "lied", "wind", "schatten"]),
    ("es", ["amor", "noche", "corazón", "fuego", "sueño", "camino", "luz", "lluvia", "casa", "cielo", "oro", "río", "piedra", "canción", "viento", "sombra"]),
    ("it", ["amore", "notte", "cuore", "fuoco", "sogno", "strada", "luce", "pioggia", "casa", "cielo", "oro", "fiume", "pietra", "canzone", "vento", "ombra"]),
    ("ru", ["любовь", "ночь", "сердце", "огонь", "мечта", "дорога", "свет", "дождь", "дом", "небо", "золото", "река", "камень", "песня", "ветер", "тень"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Vocal,
    Instrumental,
    /// Every segment of every run is above the no-speech threshold.
    Silent,
    /// The chat script declares every candidate invalid.
    Rejected,
    /// Too few words to pass the length filter.
    Short,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub vocal: usize,
    pub instrumental: usize,
    pub silent: usize,
    pub rejected: usize,
    pub short: usize,
    pub runs: u32,
    /// Per-word substitution probability in each prompted run.
    pub corruption: f64,
    /// When set, unprompted requests get their own, noisier runs.
    pub unprompted_corruption: Option<f64>,
    pub hallucination_prob: f64,
    pub fast_line_prob: f64,
    /// Chance that a lyric segment is marked as non-speech in one run.
    pub dropout_prob: f64,
    /// Chance that the chat reply rewrites a track's lines to the reference.
    pub rewrite_prob: f64,
    pub second_pass_failure_prob: f64,
}

impl SynthOptions {
    /// A corpus exercising every dataset filter.
    pub fn dataset(seed: u64, vocal: usize) -> Self {
        SynthOptions {
            seed,
            vocal,
            instrumental: 0,
            silent: 0,
            rejected: 0,
            short: 0,
            runs: 3,
            corruption: 0.15,
            unprompted_corruption: None,
            hallucination_prob: 0.4,
            fast_line_prob: 0.08,
            dropout_prob: 0.05,
            rewrite_prob: 0.3,
            second_pass_failure_prob: 0.03,
        }
    }

    /// Clean vocal tracks for evaluation.
    pub fn benchmark(seed: u64, vocal: usize, corruption: f64) -> Self {
        SynthOptions {
            corruption,
            hallucination_prob: 0.0,
            fast_line_prob: 0.0,
            dropout_prob: 0.0,
            rewrite_prob: 0.0,
            second_pass_failure_prob: 0.0,
            ..SynthOptions::dataset(seed, vocal)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTrack {
    pub track_id: String,
    pub audio: AudioRef,
    pub language: String,
    pub kind: TrackKind,
    pub reference: Vec<String>,
    /// Time span of each reference line.
    pub spans: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub tracks: Vec<SynthTrack>,
    pub asr: AsrScript,
    pub chat: ChatScript,
    pub tags: BTreeMap<AudioRef, TagScores>,
}

/// Scripted backends over one script, kept typed for call inspection.
#[derive(Clone)]
pub struct ScriptedBackends {
    pub asr: Arc<ScriptedAsr>,
    pub chat: Arc<ScriptedChat>,
    pub tagger: Arc<ScriptedTagger>,
}

impl ScriptedBackends {
    pub fn backends(&self) -> Backends {
        Backends {
            asr: self.asr.clone(),
            chat: self.chat.clone(),
            tagger: self.tagger.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub asr: PathBuf,
    pub chat: PathBuf,
    pub tagger: PathBuf,
    pub corpus: PathBuf,
    pub benchmark: PathBuf,
}

struct Event {
    start: f64,
    end: f64,
    line: Option<usize>,
    text: &'static str,
}

fn capitalize(words: &[&str]) -> String {
    let mut line = words.join(" ");
    if let Some(first) = line.chars().next() {
        let upper: String = first.to_uppercase().collect();
        line.replace_range(..first.len_utf8(), &upper);
    }
    line
}

fn corrupt(rng: &mut ChaCha8Rng, line: &str, vocab: &[&'static str], p: f64) -> String {
    let words: Vec<&str> = line
        .split_whitespace()
        .map(|w| {
            if rng.random_bool(p) {
                *vocab
                    .iter()
                    .filter(|v| !w.eq_ignore_ascii_case(v))
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .expect("vocabulary has alternatives")
            } else {
                w
            }
        })
        .collect();
    words.join(" ")
}

fn run_response(
    rng: &mut ChaCha8Rng,
    track: &SynthTrack,
    events: &[Event],
    vocab: &[&'static str],
    corruption: f64,
    options: &SynthOptions,
) -> TranscribeResponse {
    let segments = events
        .iter()
        .map(|e| {
            let (text, nsp) = match e.line {
                Some(i) => {
                    let text = corrupt(rng, &track.reference[i], vocab, corruption);
                    let nsp = if track.kind == TrackKind::Silent {
                        rng.random_range(0.92..1.0)
                    } else if rng.random_bool(options.dropout_prob) {
                        rng.random_range(0.91..0.99)
                    } else {
                        rng.random_range(0.0..0.5)
                    };
                    (text, nsp)
                }
                None if e.text.starts_with('♪') => (e.text.to_string(), rng.random_range(0.95..1.0)),
                None if track.kind == TrackKind::Silent => (e.text.to_string(), rng.random_range(0.92..1.0)),
                None => (e.text.to_string(), rng.random_range(0.2..0.6)),
            };
            TranscriptSegment::new(e.start, e.end, text, nsp)
        })
        .collect();
    TranscribeResponse {
        language: track.language.clone(),
        segments,
    }
}

impl SynthCorpus {
    pub fn generate(options: &SynthOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut kinds: Vec<TrackKind> = [
            (TrackKind::Vocal, options.vocal),
            (TrackKind::Instrumental, options.instrumental),
            (TrackKind::Silent, options.silent),
            (TrackKind::Rejected, options.rejected),
            (TrackKind::Short, options.short),
        ]
        .iter()
        .flat_map(|&(k, n)| std::iter::repeat_n(k, n))
        .collect();
        kinds.shuffle(&mut rng);

        let mut corpus = SynthCorpus {
            tracks: Vec::with_capacity(kinds.len()),
            asr: AsrScript::default(),
            chat: ChatScript::default(),
            tags: BTreeMap::new(),
        };
        for (index, kind) in kinds.into_iter().enumerate() {
            corpus.add_track(&mut rng, index, kind, options);
        }
        corpus.chat.strategy = Some(ChatStrategy::MinWer {
            references: corpus.tracks.iter().map(|t| t.reference.clone()).collect(),
        });
        corpus
    }

    fn add_track(&mut self, rng: &mut ChaCha8Rng, index: usize, kind: TrackKind, options: &SynthOptions) {
        let (language, vocab) = VOCAB[rng.random_range(0..VOCAB.len())];
        let track_id = format!("track_{index:03}");
        let audio = AudioRef::new(format!("synth/{track_id}.wav"));

        let n_lines = if kind == TrackKind::Short { 1 } else { rng.random_range(6..=14) };
        let reference: Vec<String> = (0..n_lines)
            .map(|_| {
                let n_words = if kind == TrackKind::Short { 3 } else { rng.random_range(3..=7) };
                let words: Vec<&str> = (0..n_words).map(|_| *vocab.choose(rng).expect("non-empty")).collect();
                capitalize(&words)
            })
            .collect();

        let mut events = Vec::new();
        let mut t = rng.random_range(1.0..5.0);
        events.push(Event {
            start: 0.0,
            end: t,
            line: None,
            text: "♪",
        });
        let mut spans = Vec::with_capacity(n_lines);
        for (i, line) in reference.iter().enumerate() {
            let fast = kind == TrackKind::Vocal && rng.random_bool(options.fast_line_prob);
            let rate = if fast { rng.random_range(48.0..70.0) } else { rng.random_range(8.0..18.0) };
            let end = t + line.chars().count() as f64 / rate;
            events.push(Event {
                start: t,
                end,
                line: Some(i),
                text: "",
            });
            spans.push([t, end]);
            t = end + rng.random_range(0.3..2.0);
            if rng.random_bool(0.2) {
                let gap_end = t + rng.random_range(3.0..8.0);
                events.push(Event {
                    start: t,
                    end: gap_end,
                    line: None,
                    text: "♪ ♪",
                });
                t = gap_end + rng.random_range(0.2..1.0);
            }
        }
        if kind == TrackKind::Vocal && rng.random_bool(options.hallucination_prob) {
            events.push(Event {
                start: t,
                end: t + 1.2,
                line: None,
                text: "Thank you.",
            });
        }

        let track = SynthTrack {
            track_id,
            audio: audio.clone(),
            language: language.to_string(),
            kind,
            reference,
            spans,
        };

        let prompt = localized_prompt(language);
        let mut prompted_runs = Vec::new();
        for run in 0..options.runs {
            let response = run_response(rng, &track, &events, &vocab, options.corruption, options);
            prompted_runs.push(response.clone());
            let mut entry = ScriptedTranscript::reply(audio.as_str(), Some(run), response);
            if options.unprompted_corruption.is_some() {
                entry = entry.with_prompt(&prompt);
            }
            self.asr.transcripts.push(entry);
        }
        if let Some(q) = options.unprompted_corruption {
            for run in 0..options.runs {
                let response = run_response(rng, &track, &events, &vocab, q, options);
                self.asr
                    .transcripts
                    .push(ScriptedTranscript::reply(audio.as_str(), Some(run), response));
            }
        }
        for span in &track.spans {
            if rng.random_bool(options.second_pass_failure_prob) {
                self.asr
                    .transcripts
                    .insert(0, ScriptedTranscript::transport_failure(audio.as_str()).with_span(span[0], span[1]));
            }
        }
        self.asr.languages.insert(
            audio.clone(),
            ScriptedLanguage {
                language: language.to_string(),
                probability: rng.random_range(0.6..1.0),
            },
        );

        let singing = if kind == TrackKind::Instrumental {
            rng.random_range(0.0..0.06)
        } else {
            rng.random_range(0.1..0.95)
        };
        let speech = rng.random_range(0.0..0.05);
        self.tags.insert(
            audio.clone(),
            [("Singing", singing), ("Speech", speech), ("Music", rng.random_range(0.7..1.0))]
                .into_iter()
                .collect(),
        );

        let rewrite = kind == TrackKind::Vocal && rng.random_bool(options.rewrite_prob);
        if kind == TrackKind::Rejected || rewrite {
            let runs: Vec<Vec<String>> = prompted_runs
                .iter()
                .enumerate()
                .filter_map(|(i, r)| {
                    let p = r.clone().into_prediction(i as u32).ok()?;
                    let lines = filter_segments(&p, DEFAULT_NO_SPEECH_THRESHOLD).lines();
                    (!lines.is_empty()).then_some(lines)
                })
                .collect();
            let set = PredictionSet::new(runs, language);
            let request = build_chat_request(&set, &PromptMode::dataset(language), &PromptTemplate::default())
                .expect("synthetic runs are non-empty");
            let response = EnsembleResponse {
                reasons: "scripted".into(),
                selection: if kind == TrackKind::Rejected {
                    Selection::NoneValid
                } else {
                    Selection::Chosen {
                        key: "prediction_1".into(),
                        lines: track.reference.clone(),
                    }
                },
            };
            self.chat.responses.insert(request_digest(&request), response.to_json());
        }
        self.tracks.push(track);
    }

    pub fn track(&self, track_id: &str) -> Option<&SynthTrack> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    /// Full-track segments the scripted ASR returns for a prompted run.
    pub fn run_segments(&self, track_id: &str, run: u32) -> Option<Vec<TranscriptSegment>> {
        let track = self.track(track_id)?;
        self.asr
            .transcripts
            .iter()
            .find(|t| t.audio == track.audio && t.span.is_none() && t.run_index == Some(run))
            .and_then(|t| t.response.as_ref())
            .map(|r| r.segments.clone())
    }

    /// Tracks with the language filled in for every other track.
    pub fn corpus(&self) -> Corpus {
        Corpus {
            tracks: self
                .tracks
                .iter()
                .enumerate()
                .map(|(i, t)| CorpusTrack {
                    track_id: t.track_id.clone(),
                    audio: t.audio.clone(),
                    language: (i % 2 == 0).then(|| t.language.clone()),
                    ref_lyrics: None,
                    duration_s: None,
                })
                .collect(),
            skipped: Vec::new(),
        }
    }

    /// Vocal tracks as song-level items, or one utterance item per line.
    pub fn benchmark(&self, granularity: Granularity) -> Vec<BenchmarkItem> {
        let vocal = self.tracks.iter().filter(|t| t.kind == TrackKind::Vocal);
        match granularity {
            Granularity::Song => vocal
                .map(|t| BenchmarkItem {
                    item_id: t.track_id.clone(),
                    audio: t.audio.clone(),
                    reference: t.reference.join("\n"),
                    language: t.language.clone(),
                    granularity,
                    span: None,
                })
                .collect(),
            Granularity::Utterance => vocal
                .flat_map(|t| {
                    t.reference.iter().zip(&t.spans).enumerate().map(move |(i, (line, span))| BenchmarkItem {
                        item_id: format!("{}_{i:02}", t.track_id),
                        audio: t.audio.clone(),
                        reference: line.clone(),
                        language: t.language.clone(),
                        granularity,
                        span: Some(*span),
                    })
                })
                .collect(),
        }
    }

    pub fn scripted(&self) -> ScriptedBackends {
        ScriptedBackends {
            asr: Arc::new(ScriptedAsr::new(self.asr.clone())),
            chat: Arc::new(ScriptedChat::new(self.chat.clone())),
            tagger: Arc::new(ScriptedTagger::new(self.tags.clone())),
        }
    }

    /// Writes the three mock scripts, the corpus manifest and a song-level
    /// benchmark manifest into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<SynthFiles> {
        std::fs::create_dir_all(dir)?;
        let files = SynthFiles {
            asr: dir.join("asr.json"),
            chat: dir.join("chat.json"),
            tagger: dir.join("tagger.json"),
            corpus: dir.join("corpus.jsonl"),
            benchmark: dir.join("benchmark.jsonl"),
        };
        std::fs::write(&files.asr, pretty(&self.asr))?;
        std::fs::write(&files.chat, pretty(&self.chat))?;
        std::fs::write(&files.tagger, pretty(&self.tags))?;
        std::fs::write(&files.corpus, jsonl(self.corpus().tracks.iter()))?;
        std::fs::write(&files.benchmark, jsonl(self.benchmark(Granularity::Song).iter()))?;
        Ok(files)
    }
}

fn jsonl<'a, T: Serialize + 'a>(items: impl Iterator<Item = &'a T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}
