//! Transfers segment timestamps onto finalized lyric lines.
//!
//! Lines and segments are both in time order, so the matching is monotonic:
//! each line takes at most one segment, each segment serves at most one line,
//! and matched pairs never cross. A line may only take a segment whose
//! normalized edit distance is within the threshold; a line that takes none
//! is dropped at a cost of [`UNMATCHED_LINE_COST`]. Skipping a segment is
//! free. The matching with the lowest total cost wins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::TranscriptSegment;
use crate::textnorm::{normalize_text, NormalizationRules};

pub const DEFAULT_ALIGN_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MAX_CHAR_RATE: f64 = 37.5;

/// Cost charged for a line left without a segment: the largest possible
/// normalized distance.
pub const UNMATCHED_LINE_COST: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("line spans a non-positive duration ({start_s}..{end_s})")]
    NonPositiveDuration { start_s: f64, end_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedLine {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    pub source_segment_index: usize,
    pub distance: f64,
}

impl AlignedLine {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub aligned: Vec<AlignedLine>,
    pub dropped: Vec<String>,
    /// Sum of matched distances plus [`UNMATCHED_LINE_COST`] per dropped line.
    pub total_cost: f64,
}

/// Character-level Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            curr[j + 1] = substitution.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// `levenshtein(a, b) / max(|a|, |b|)` in characters; two empty strings are
/// at distance 0. Callers normalize the text first.
pub fn normalized_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Match,
    SkipSegment,
    DropLine,
}

/// Aligns `final_lines` onto `segments` (sorted by start time). Distances are
/// computed on text normalized with `rules`.
pub fn align_lines(
    segments: &[TranscriptSegment],
    final_lines: &[String],
    threshold: f64,
    rules: &NormalizationRules,
) -> Alignment {
    let lines: Vec<String> = final_lines.iter().map(|l| normalize_text(l, rules)).collect();
    let segs: Vec<String> = segments
        .iter()
        .map(|s| normalize_text(&s.text, rules))
        .collect();
    let (n, m) = (lines.len(), segs.len());

    let distance: Vec<Vec<f64>> = lines
        .iter()
        .map(|l| segs.iter().map(|s| normalized_distance(l, s)).collect())
        .collect();

    // cost[i][j]: best cost for the first i lines against the first j segments.
    let mut cost = vec![vec![0.0f64; m + 1]; n + 1];
    let mut step = vec![vec![Step::SkipSegment; m + 1]; n + 1];
    for i in 1..=n {
        cost[i][0] = cost[i - 1][0] + UNMATCHED_LINE_COST;
        step[i][0] = Step::DropLine;
        for j in 1..=m {
            let mut best = (cost[i - 1][j] + UNMATCHED_LINE_COST, Step::DropLine);
            if cost[i][j - 1] <= best.0 {
                best = (cost[i][j - 1], Step::SkipSegment);
            }
            let d = distance[i - 1][j - 1];
            if d <= threshold && cost[i - 1][j - 1] + d <= best.0 {
                best = (cost[i - 1][j - 1] + d, Step::Match);
            }
            cost[i][j] = best.0;
            step[i][j] = best.1;
        }
    }

    let mut aligned = Vec::new();
    let mut dropped = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 {
        match step[i][j] {
            Step::Match => {
                let seg = &segments[j - 1];
                aligned.push(AlignedLine {
                    text: final_lines[i - 1].trim().to_string(),
                    start_s: seg.start_s,
                    end_s: seg.end_s,
                    source_segment_index: j - 1,
                    distance: distance[i - 1][j - 1],
                });
                i -= 1;
                j -= 1;
            }
            Step::SkipSegment => j -= 1,
            Step::DropLine => {
                dropped.push(final_lines[i - 1].clone());
                i -= 1;
            }
        }
    }
    aligned.reverse();
    dropped.reverse();
    Alignment {
        aligned,
        dropped,
        total_cost: cost[n][m],
    }
}

/// True unless the line's character rate is strictly above `max_rate`.
/// Every character of the line text counts, spaces included.
pub fn char_rate_ok(line: &AlignedLine, max_rate: f64) -> Result<bool, AlignError> {
    let duration = line.duration();
    if !(duration > 0.0) {
        return Err(AlignError::NonPositiveDuration {
            start_s: line.start_s,
            end_s: line.end_s,
        });
    }
    let chars = line.text.chars().count() as f64;
    Ok(chars / duration <= max_rate)
}
