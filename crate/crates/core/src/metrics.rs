//! Word error rate and corpus-level aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::{normalize_text, NormalizationRules};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("reference has no words")]
    EmptyReference,
    #[error("no item could be scored")]
    NoScorableItems,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub insertions: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub reference_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.insertions + self.substitutions + self.deletions
    }

    /// Score for an item that produced no hypothesis at all.
    pub fn all_deleted(reference_words: usize) -> Self {
        WerBreakdown {
            insertions: 0,
            substitutions: 0,
            deletions: reference_words,
            reference_words,
            wer: 1.0,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
struct Cell {
    // Field order is the comparison order: cost, then substitutions, then
    // insertions. Deletions are implied by the other three.
    cost: usize,
    subs: usize,
    ins: usize,
    dels: usize,
}

impl Cell {
    fn sub(self) -> Cell {
        Cell {
            cost: self.cost + 1,
            subs: self.subs + 1,
            ..self
        }
    }
    fn ins(self) -> Cell {
        Cell {
            cost: self.cost + 1,
            ins: self.ins + 1,
            ..self
        }
    }
    fn del(self) -> Cell {
        Cell {
            cost: self.cost + 1,
            dels: self.dels + 1,
            ..self
        }
    }
}

/// Minimum-edit alignment between reference and hypothesis tokens. Among
/// alignments of equal cost the one with the fewest substitutions, then the
/// fewest insertions, is reported.
pub fn word_error_rate<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    hypothesis: &[T],
) -> Result<WerBreakdown, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let n = hypothesis.len();
    let mut prev: Vec<Cell> = (0..=n)
        .map(|j| Cell {
            cost: j,
            ins: j,
            ..Cell::default()
        })
        .collect();
    let mut curr = vec![Cell::default(); n + 1];
    for (i, r) in reference.iter().enumerate() {
        curr[0] = Cell {
            cost: i + 1,
            dels: i + 1,
            ..Cell::default()
        };
        for (j, h) in hypothesis.iter().enumerate() {
            let diag = if r.as_ref() == h.as_ref() {
                prev[j]
            } else {
                prev[j].sub()
            };
            curr[j + 1] = diag.min(curr[j].ins()).min(prev[j + 1].del());
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let best = prev[n];
    Ok(WerBreakdown {
        insertions: best.ins,
        substitutions: best.subs,
        deletions: best.dels,
        reference_words: reference.len(),
        wer: best.cost as f64 / reference.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub language: String,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemWer {
    pub id: String,
    pub language: String,
    pub breakdown: WerBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusWerReport {
    pub per_item: Vec<ItemWer>,
    pub mean_wer: f64,
    pub pooled_wer: f64,
    pub per_language: BTreeMap<String, f64>,
    #[serde(default)]
    pub excluded: Vec<ExcludedItem>,
}

impl CorpusWerReport {
    /// Aggregates already-scored items.
    pub fn from_items(
        per_item: Vec<ItemWer>,
        excluded: Vec<ExcludedItem>,
    ) -> Result<Self, MetricsError> {
        if per_item.is_empty() {
            return Err(MetricsError::NoScorableItems);
        }
        let mean_wer = mean(per_item.iter().map(|i| i.breakdown.wer));
        let edits: usize = per_item.iter().map(|i| i.breakdown.edits()).sum();
        let words: usize = per_item.iter().map(|i| i.breakdown.reference_words).sum();
        let mut by_language: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for item in &per_item {
            by_language
                .entry(item.language.clone())
                .or_default()
                .push(item.breakdown.wer);
        }
        let per_language = by_language
            .into_iter()
            .map(|(lang, wers)| (lang, mean(wers.into_iter())))
            .collect();
        Ok(CorpusWerReport {
            per_item,
            mean_wer,
            pooled_wer: edits as f64 / words as f64,
            per_language,
            excluded,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Scores one reference/hypothesis pair after normalizing both sides.
pub fn score_texts(
    reference: &str,
    hypothesis: &str,
    rules: &NormalizationRules,
) -> Result<WerBreakdown, MetricsError> {
    let reference = normalize_text(reference, rules);
    let hypothesis = normalize_text(hypothesis, rules);
    word_error_rate(&tokenize(&reference), &tokenize(&hypothesis))
}

/// Items whose reference normalizes to nothing are excluded and listed in the
/// report instead of failing the run.
pub fn corpus_wer<F>(items: &[CorpusItem], rules_for: F) -> Result<CorpusWerReport, MetricsError>
where
    F: Fn(&str) -> NormalizationRules,
{
    let mut per_item = Vec::with_capacity(items.len());
    let mut excluded = Vec::new();
    for item in items {
        match score_texts(&item.reference, &item.hypothesis, &rules_for(&item.language)) {
            Ok(breakdown) => per_item.push(ItemWer {
                id: item.id.clone(),
                language: item.language.clone(),
                breakdown,
            }),
            Err(err) => {
                log::warn!("excluding item {}: {err}", item.id);
                excluded.push(ExcludedItem {
                    id: item.id.clone(),
                    reason: err.to_string(),
                });
            }
        }
    }
    CorpusWerReport::from_items(per_item, excluded)
}
