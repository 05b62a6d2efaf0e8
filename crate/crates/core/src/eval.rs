//! Benchmark evaluation, ablations and plain-text report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::TimeSpan;
use crate::backend::AudioRef;
use crate::metrics::{
    tokenize, CorpusWerReport, ExcludedItem, ItemWer, MetricsError, WerBreakdown, score_texts,
};
use crate::pipeline::{multi_run, transcribe_track, Backends, ConfigError, PipelineConfig, TrackOutcome};
use crate::textnorm::{normalize_text, NormalizationRules};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Song,
    Utterance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub audio: AudioRef,
    pub reference: String,
    pub language: String,
    pub granularity: Granularity,
    /// Utterance boundaries inside `audio`; absent means the whole file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[f64; 2]>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut items = Vec::new();
    for (index, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| EvalError::Manifest {
            path: path.display().to_string(),
            line: index + 1,
            reason: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub ensemble: bool,
    pub prompt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub ablation: AblationFlags,
    pub per_item: Vec<ItemWer>,
    pub mean_wer: f64,
    pub pooled_wer: f64,
    pub per_language: BTreeMap<String, f64>,
    /// Items scored as WER 1.0 because no hypothesis was produced.
    pub failed: Vec<ExcludedItem>,
    /// Items left out because their reference normalizes to nothing.
    pub excluded: Vec<ExcludedItem>,
    pub hypotheses: BTreeMap<String, String>,
}

impl EvalReport {
    /// Mean and pooled WER recomputed from `per_item` match the stored ones.
    pub fn is_self_consistent(&self) -> bool {
        match CorpusWerReport::from_items(self.per_item.clone(), Vec::new()) {
            Ok(r) => {
                (r.mean_wer - self.mean_wer).abs() < 1e-12
                    && (r.pooled_wer - self.pooled_wer).abs() < 1e-12
                    && r.per_language == self.per_language
            }
            Err(_) => false,
        }
    }
}

fn hypothesis_for(item: &BenchmarkItem, config: &PipelineConfig, backends: &Backends) -> Result<String, String> {
    let outcome = match item.granularity {
        Granularity::Song => transcribe_track(&item.audio, Some(&item.language), config, backends),
        Granularity::Utterance => {
            let span = item.span.map(|[start_s, end_s]| TimeSpan { start_s, end_s });
            let runs = if config.use_ensemble && config.utterance_ensemble {
                config.num_runs
            } else {
                1
            };
            multi_run(
                &item.audio,
                span,
                &item.language,
                config.prompt_for(&item.language),
                runs,
                config,
                backends,
            )
        }
    };
    match outcome.map_err(|e| e.to_string())? {
        TrackOutcome::Transcribed(t) => Ok(t.lines.join(" ")),
        TrackOutcome::GatedOut { vocal_score } => Err(format!("gated out (vocal score {vocal_score})")),
        TrackOutcome::Invalid { reason, .. } => Err(format!("invalid: {reason}")),
    }
}

/// Transcribes and scores every item. Items without a hypothesis score 1.0
/// and are listed in `failed`.
pub fn evaluate(
    items: &[BenchmarkItem],
    config: &PipelineConfig,
    backends: &Backends,
    system: &str,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let hypotheses: Vec<Result<String, String>> =
        pool.install(|| items.par_iter().map(|item| hypothesis_for(item, config, backends)).collect());

    let mut per_item = Vec::with_capacity(items.len());
    let mut failed = Vec::new();
    let mut excluded = Vec::new();
    let mut texts = BTreeMap::new();
    for (item, hypothesis) in items.iter().zip(hypotheses) {
        let rules = NormalizationRules::for_code(&item.language);
        let breakdown = match &hypothesis {
            Ok(text) => score_texts(&item.reference, text, &rules),
            Err(_) => {
                let words = tokenize(&normalize_text(&item.reference, &rules)).len();
                if words == 0 {
                    Err(MetricsError::EmptyReference)
                } else {
                    Ok(WerBreakdown::all_deleted(words))
                }
            }
        };
        let breakdown = match breakdown {
            Ok(b) => b,
            Err(err) => {
                log::warn!("excluding item {}: {err}", item.item_id);
                excluded.push(ExcludedItem {
                    id: item.item_id.clone(),
                    reason: err.to_string(),
                });
                continue;
            }
        };
        match hypothesis {
            Ok(text) => {
                texts.insert(item.item_id.clone(), text);
            }
            Err(reason) => {
                log::warn!("item {} failed: {reason}", item.item_id);
                failed.push(ExcludedItem {
                    id: item.item_id.clone(),
                    reason,
                });
            }
        }
        per_item.push(ItemWer {
            id: item.item_id.clone(),
            language: item.language.clone(),
            breakdown,
        });
    }
    let corpus = CorpusWerReport::from_items(per_item, excluded)?;
    Ok(EvalReport {
        system: system.to_string(),
        ablation: AblationFlags {
            ensemble: config.use_ensemble,
            prompt: config.use_prompt,
        },
        per_item: corpus.per_item,
        mean_wer: corpus.mean_wer,
        pooled_wer: corpus.pooled_wer,
        per_language: corpus.per_language,
        failed,
        excluded: corpus.excluded,
        hypotheses: texts,
    })
}

pub fn ablation_label(flags: AblationFlags) -> &'static str {
    match (flags.ensemble, flags.prompt) {
        (true, true) => "full",
        (false, true) => "no-ensemble",
        (true, false) => "no-prompt",
        (false, false) => "no-ensemble-no-prompt",
    }
}

/// One report per cell of {ensemble on, off} x {prompt on, off}.
pub fn ablation_matrix(
    items: &[BenchmarkItem],
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<Vec<EvalReport>, EvalError> {
    let cells = [(true, true), (false, true), (true, false), (false, false)];
    cells
        .into_iter()
        .map(|(ensemble, prompt)| {
            let flags = AblationFlags { ensemble, prompt };
            let cell = PipelineConfig {
                use_ensemble: ensemble,
                use_prompt: prompt,
                ..config.clone()
            };
            evaluate(items, &cell, backends, ablation_label(flags))
        })
        .collect()
}

fn pct(rate: f64) -> String {
    format!("{:.2}", rate * 100.0)
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "  {cell:>w$}");
            }
        }
        out.trim_end().to_string()
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.clone()));
        out.push('\n');
    }
    out
}

/// One row per system with WER in percent.
pub fn render_wer_table(reports: &[EvalReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.system.clone(),
                r.per_item.len().to_string(),
                r.failed.len().to_string(),
                pct(r.mean_wer),
                pct(r.pooled_wer),
            ]
        })
        .collect();
    render(&["System", "Items", "Failed", "WER", "Pooled WER"], &rows)
}

/// Per-language song counts and WER in percent, with an overall row.
pub fn render_language_table(report: &EvalReport) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for item in &report.per_item {
        *counts.entry(item.language.as_str()).or_default() += 1;
    }
    let mut rows: Vec<Vec<String>> = report
        .per_language
        .iter()
        .map(|(lang, wer)| {
            vec![
                crate::ensemble::language_name(lang),
                counts.get(lang.as_str()).copied().unwrap_or(0).to_string(),
                pct(*wer),
            ]
        })
        .collect();
    rows.push(vec![
        "Overall".to_string(),
        report.per_item.len().to_string(),
        pct(report.mean_wer),
    ]);
    render(&["Language", "Songs", "WER"], &rows)
}
