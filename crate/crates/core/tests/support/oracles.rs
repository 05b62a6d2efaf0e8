//! Slow reference implementations used by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;

use unicode_general_category::{get_general_category, GeneralCategory};

/// (cost, substitutions, insertions), minimised lexicographically over every
/// edit script turning `r` into `h`.
pub fn wer_oracle(r: &[u8], h: &[u8]) -> (usize, usize, usize) {
    fn go(r: &[u8], h: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), (usize, usize, usize)>) -> (usize, usize, usize) {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let add = |a: (usize, usize, usize), b: (usize, usize, usize)| (a.0 + b.0, a.1 + b.1, a.2 + b.2);
        let mut options = Vec::new();
        if i < r.len() && j < h.len() {
            let step = if r[i] == h[j] { (0, 0, 0) } else { (1, 1, 0) };
            options.push(add(step, go(r, h, i + 1, j + 1, memo)));
        }
        if i < r.len() {
            options.push(add((1, 0, 0), go(r, h, i + 1, j, memo)));
        }
        if j < h.len() {
            options.push(add((1, 0, 1), go(r, h, i, j + 1, memo)));
        }
        let best = options.into_iter().min().unwrap_or((0, 0, 0));
        memo.insert((i, j), best);
        best
    }
    go(r, h, 0, 0, &mut HashMap::new())
}

/// Textbook recursion over suffixes, no table.
pub fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                levenshtein_oracle(ra, rb)
            } else {
                1 + levenshtein_oracle(ra, rb)
                    .min(levenshtein_oracle(ra, b))
                    .min(levenshtein_oracle(a, rb))
            }
        }
    }
}

pub fn distance_oracle(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        0.0
    } else {
        levenshtein_oracle(&a, &b) as f64 / longest as f64
    }
}

/// Cheapest monotonic matching of lines to segments, enumerated exhaustively.
/// `dist[i][j]` is the distance between line i and segment j; a line may match
/// a segment only when the distance is within `threshold`, otherwise it is
/// dropped at `drop_cost`. Costs are summed in line order starting at zero.
pub fn alignment_oracle(dist: &[Vec<f64>], threshold: f64, drop_cost: f64) -> f64 {
    fn go(dist: &[Vec<f64>], threshold: f64, drop_cost: f64, line: usize, next_seg: usize, acc: f64) -> f64 {
        if line == dist.len() {
            return acc;
        }
        let mut best = go(dist, threshold, drop_cost, line + 1, next_seg, acc + drop_cost);
        for j in next_seg..dist[line].len() {
            let d = dist[line][j];
            if d <= threshold {
                best = best.min(go(dist, threshold, drop_cost, line + 1, j + 1, acc + d));
            }
        }
        best
    }
    go(dist, threshold, drop_cost, 0, 0, 0.0)
}

fn is_symbol(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::MathSymbol
            | GeneralCategory::CurrencySymbol
            | GeneralCategory::ModifierSymbol
            | GeneralCategory::OtherSymbol
    )
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    ) || c.is_ascii_punctuation()
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

fn is_wordish(c: char) -> bool {
    c.is_alphanumeric()
        || matches!(
            get_general_category(c),
            GeneralCategory::NonspacingMark | GeneralCategory::SpacingMark
        )
}

/// Checks the character classes allowed in normalized output. A letter counts
/// as uppercase when lowercasing would change it.
pub fn check_output_alphabet(s: &str, punctuation_stripped: bool) -> Result<(), String> {
    if s != s.trim() || s.contains("  ") {
        return Err(format!("untrimmed or doubled spaces in {s:?}"));
    }
    let chars: Vec<char> = s.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if is_symbol(c) {
            return Err(format!("symbol {c:?} in {s:?}"));
        }
        if c.is_whitespace() && c != ' ' {
            return Err(format!("whitespace {c:?} in {s:?}"));
        }
        if c.is_control() {
            return Err(format!("control {c:?} in {s:?}"));
        }
        if c.to_lowercase().ne(std::iter::once(c)) {
            return Err(format!("uppercase {c:?} in {s:?}"));
        }
        if punctuation_stripped && is_punctuation(c) {
            let intra = is_apostrophe(c)
                && i > 0
                && is_wordish(chars[i - 1])
                && chars.get(i + 1).is_some_and(|&n| is_wordish(n));
            if !intra {
                return Err(format!("punctuation {c:?} in {s:?}"));
            }
        }
    }
    Ok(())
}
