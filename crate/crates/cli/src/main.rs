mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lyricscribe::align::align_lines;
use lyricscribe::backend::{AudioRef, AudioTransport};
use lyricscribe::ensemble::{gt_selection_experiment, GtItem, Mode, PredictionSet, PromptMode};
use lyricscribe::eval::{
    ablation_label, ablation_matrix, evaluate, read_benchmark, render_language_table, render_wer_table,
};
use lyricscribe::pipeline::{
    build_dataset, read_corpus, transcribe_track, BuildOptions, Corpus, CorpusTrack, LyricLine,
    SelectionRecord, TrackOutcome,
};
use lyricscribe::textnorm::NormalizationRules;

use config::{build_backends, resolve_mode, Needs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser)]
#[command(name = "lyricscribe", version, about = "Zero-shot lyrics transcription with LLM ensembling")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with [pipeline] and [backends] tables; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "URL")]
    pub asr_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "SCRIPT")]
    pub asr_mock: Option<PathBuf>,
    /// Credential is read from LYRICSCRIBE_API_KEY.
    #[arg(long, global = true, value_name = "URL")]
    pub chat_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "SCRIPT")]
    pub chat_mock: Option<PathBuf>,
    #[arg(long, global = true, value_name = "URL")]
    pub tagger_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "SCRIPT")]
    pub tagger_mock: Option<PathBuf>,
    /// Transcription runs per track (3 to 5).
    #[arg(long, global = true)]
    pub runs: Option<u32>,
    #[arg(long, global = true)]
    pub no_speech_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub align_threshold: Option<f64>,
    /// Characters per second.
    #[arg(long, global = true)]
    pub max_char_rate: Option<f64>,
    #[arg(long, global = true)]
    pub gate_threshold: Option<f64>,
    /// benchmark or dataset.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Seeds ground-truth placement in gt-experiment.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Directory where mock backends append their calls as JSON lines.
    #[arg(long, global = true, value_name = "DIR")]
    pub mock_log: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[arg(long, global = true)]
    pub timeout_secs: Option<u64>,
    /// Chat requests per minute.
    #[arg(long, global = true)]
    pub chat_rpm: Option<u32>,
    /// path or base64.
    #[arg(long, global = true, value_parser = parse_transport)]
    pub audio_transport: Option<AudioTransport>,
}

fn parse_transport(s: &str) -> Result<AudioTransport, String> {
    match s {
        "path" => Ok(AudioTransport::Path),
        "base64" => Ok(AudioTransport::Base64),
        other => Err(format!("unknown audio transport {other:?} (expected path or base64)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Transcribe tracks into plain-text lyrics plus provenance.
    Transcribe {
        audio: Vec<String>,
        /// Corpus manifest (JSONL) instead of positional audio.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Skip language identification.
        #[arg(long)]
        language: Option<String>,
    },
    /// Build a JSONL dataset from a corpus manifest.
    BuildDataset {
        corpus: PathBuf,
        /// Continue from the journal in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a benchmark manifest.
    Evaluate {
        benchmark: PathBuf,
        #[arg(long, default_value = "lyricscribe")]
        label: String,
    },
    /// Evaluate the ensemble x prompt ablation grid.
    Ablate { benchmark: PathBuf },
    /// Measure how often the chat model picks a planted ground truth.
    GtExperiment { corpus: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.common.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut settings = config::load(&cli.common)?;
    let common = &cli.common;
    let default_mode = match cli.command {
        Command::BuildDataset { .. } => Mode::Dataset,
        _ => Mode::Benchmark,
    };
    settings.pipeline.mode = resolve_mode(&settings, default_mode);
    if matches!(cli.command, Command::BuildDataset { .. }) && settings.pipeline.mode != Mode::Dataset {
        log::warn!("build-dataset always runs in dataset mode");
        settings.pipeline.mode = Mode::Dataset;
    }
    settings
        .pipeline
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dataset_mode = settings.pipeline.mode == Mode::Dataset;
    let needs = match cli.command {
        Command::GtExperiment { .. } => Needs {
            asr: false,
            chat: true,
            tagger: false,
        },
        _ => Needs {
            asr: true,
            chat: true,
            tagger: dataset_mode,
        },
    };
    let backends = build_backends(&settings.backends, needs, common.mock_log.as_deref())?;
    let config = settings.pipeline;
    let out = &common.out;

    match cli.command {
        Command::Transcribe {
            audio,
            manifest,
            language,
        } => {
            let tracks = transcribe_targets(audio, manifest, language)?;
            create_dir(out)?;
            let mut failures = 0;
            for track in &tracks {
                match transcribe_one(track, &config, &backends, out) {
                    Ok(path) => println!("{}: {}", track.track_id, path.display()),
                    Err(err) => {
                        failures += 1;
                        eprintln!("{}: {err:#}", track.track_id);
                    }
                }
            }
            if failures > 0 {
                return Err(anyhow::anyhow!("{failures} of {} tracks produced no lyrics", tracks.len()).into());
            }
        }
        Command::BuildDataset { corpus, resume } => {
            let corpus = read_corpus(&corpus)
                .map_err(|e| CliError::Usage(format!("cannot read corpus {}: {e}", corpus.display())))?;
            let options = BuildOptions {
                out_dir: out.clone(),
                resume,
            };
            let summary = build_dataset(&corpus, &config, &backends, &options).context("dataset build failed")?;
            let t = &summary.manifest.tracks;
            println!(
                "tracks {} (resumed {}), emitted {}, gated out {}, invalid {}, length filtered {}, emptied {}, failed {}, skipped manifest lines {}",
                t.tracks_in,
                summary.resumed,
                t.emitted,
                t.gated_out,
                t.invalid,
                t.length_filtered,
                t.emptied,
                t.failed,
                summary.manifest.manifest_lines_skipped
            );
            println!("{}", summary.dataset_path.display());
            println!("{}", summary.manifest_path.display());
        }
        Command::Evaluate { benchmark, label } => {
            let items = read_benchmark(&benchmark).map_err(|e| CliError::Usage(e.to_string()))?;
            let report = evaluate(&items, &config, &backends, &label).context("evaluation failed")?;
            create_dir(out)?;
            write_json(&out.join("report.json"), &report)?;
            let table = format!("{}\n{}", render_wer_table(std::slice::from_ref(&report)), render_language_table(&report));
            write_text(&out.join("report.txt"), &table)?;
            print!("{table}");
        }
        Command::Ablate { benchmark } => {
            let items = read_benchmark(&benchmark).map_err(|e| CliError::Usage(e.to_string()))?;
            let reports = ablation_matrix(&items, &config, &backends).context("ablation failed")?;
            create_dir(out)?;
            for report in &reports {
                let name = format!("ablation_{}.json", ablation_label(report.ablation));
                write_json(&out.join(name), report)?;
            }
            let table = render_wer_table(&reports);
            write_text(&out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::GtExperiment { corpus } => {
            let items = read_gt_corpus(&corpus)?;
            let mode = PromptMode {
                mode: config.mode,
                language: String::new(),
            };
            let report = gt_selection_experiment(&items, &mode, backends.chat.as_ref(), common.seed)
                .context("ground-truth experiment failed")?;
            create_dir(out)?;
            write_json(&out.join("gt_experiment.json"), &report)?;
            println!(
                "selection rate {:.4} ({} of {} attempted, {} excluded)",
                report.selection_rate,
                report.selected,
                report.attempted,
                report.excluded.len()
            );
        }
    }
    Ok(())
}

fn transcribe_targets(
    audio: Vec<String>,
    manifest: Option<PathBuf>,
    language: Option<String>,
) -> Result<Vec<CorpusTrack>, CliError> {
    let mut tracks = Vec::new();
    if let Some(path) = manifest {
        let Corpus { tracks: listed, .. } = read_corpus(&path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        tracks.extend(listed);
    }
    for a in audio {
        let stem = Path::new(&a)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| a.clone());
        tracks.push(CorpusTrack {
            track_id: stem,
            audio: AudioRef::new(a),
            language: language.clone(),
            ref_lyrics: None,
            duration_s: None,
        });
    }
    if tracks.is_empty() {
        return Err(CliError::Usage("no audio given: pass audio paths or --manifest".into()));
    }
    Ok(tracks)
}

#[derive(Serialize)]
struct TranscriptProvenance<'a> {
    track_id: &'a str,
    audio: &'a AudioRef,
    language: &'a str,
    prompt: &'a str,
    num_runs: usize,
    source_run: u32,
    selection: &'a SelectionRecord,
    lines: Vec<LyricLine>,
    unaligned: &'a [String],
}

fn transcribe_one(
    track: &CorpusTrack,
    config: &lyricscribe::pipeline::PipelineConfig,
    backends: &lyricscribe::pipeline::Backends,
    out: &Path,
) -> anyhow::Result<PathBuf> {
    let outcome = transcribe_track(&track.audio, track.language.as_deref(), config, backends)?;
    let t = match outcome {
        TrackOutcome::Transcribed(t) => t,
        TrackOutcome::GatedOut { vocal_score } => anyhow::bail!("not vocal (score {vocal_score})"),
        TrackOutcome::Invalid { reason, .. } => anyhow::bail!("invalid transcription: {reason}"),
    };
    let alignment = align_lines(
        t.source_segments(),
        &t.lines,
        config.align_threshold,
        &NormalizationRules::for_code(&t.language),
    );
    let text_path = out.join(format!("{}.txt", track.track_id));
    let mut text = t.lines.join("\n");
    text.push('\n');
    write_text(&text_path, &text)?;
    let provenance = TranscriptProvenance {
        track_id: &track.track_id,
        audio: &track.audio,
        language: &t.language,
        prompt: &t.prompt,
        num_runs: t.runs.len(),
        source_run: t.runs[t.source_run].run_index,
        selection: &t.selection,
        lines: alignment
            .aligned
            .iter()
            .map(|l| LyricLine {
                start_s: l.start_s,
                end_s: l.end_s,
                text: l.text.clone(),
            })
            .collect(),
        unaligned: &alignment.dropped,
    };
    write_json(&out.join(format!("{}.provenance.json", track.track_id)), &provenance)?;
    Ok(text_path)
}

#[derive(Deserialize)]
struct GtLine {
    candidates: Vec<Vec<String>>,
    ground_truth: Vec<String>,
    #[serde(default = "default_language")]
    language: String,
}

fn default_language() -> String {
    "en".to_string()
}

fn read_gt_corpus(path: &Path) -> Result<Vec<GtItem>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: GtLine = serde_json::from_str(l)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
            Ok(GtItem {
                set: PredictionSet::new(line.candidates, line.language),
                ground_truth: line.ground_truth,
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(CliError::Runtime)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
