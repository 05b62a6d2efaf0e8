//! Text normalization shared by references, hypotheses and alignment.
//!
//! The pipeline is fixed: strip special characters, case-fold, spell out
//! digit runs (English only), strip punctuation, collapse whitespace.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormalizeError {
    #[error("number token {0:?} is not a non-empty run of ASCII digits")]
    NotADigitRun(String),
    #[error("number token {0:?} is outside 0..=999999")]
    OutOfRange(String),
}

/// Languages with dedicated handling. Anything else maps to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Fr,
    Es,
    It,
    Ru,
    De,
    Other,
}

impl Language {
    pub const SUPPORTED: [Language; 6] = [
        Language::En,
        Language::Fr,
        Language::Es,
        Language::It,
        Language::Ru,
        Language::De,
    ];

    /// Accepts ISO-639-1 codes, case-insensitively, with an optional region
    /// suffix (`en-US`, `pt_BR`).
    pub fn from_code(code: &str) -> Self {
        let primary = code
            .split(['-', '_'])
            .next()
            .unwrap_or("")
            .trim()
            .to_ascii_lowercase();
        match primary.as_str() {
            "en" => Language::En,
            "fr" => Language::Fr,
            "es" => Language::Es,
            "it" => Language::It,
            "ru" => Language::Ru,
            "de" => Language::De,
            _ => Language::Other,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Fr => "fr",
            Language::Es => "es",
            Language::It => "it",
            Language::Ru => "ru",
            Language::De => "de",
            Language::Other => "other",
        }
    }

    pub fn english_name(self) -> Option<&'static str> {
        match self {
            Language::En => Some("English"),
            Language::Fr => Some("French"),
            Language::Es => Some("Spanish"),
            Language::It => Some("Italian"),
            Language::Ru => Some("Russian"),
            Language::De => Some("German"),
            Language::Other => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationRules {
    pub language: Language,
    pub strip_punctuation: bool,
    /// Only has an effect for English.
    pub number_conversion: bool,
}

impl NormalizationRules {
    pub fn for_language(language: Language) -> Self {
        NormalizationRules {
            language,
            strip_punctuation: true,
            number_conversion: true,
        }
    }

    pub fn for_code(code: &str) -> Self {
        Self::for_language(Language::from_code(code))
    }

    fn converts_numbers(&self) -> bool {
        self.number_conversion && self.language == Language::En
    }
}

impl Default for NormalizationRules {
    fn default() -> Self {
        Self::for_language(Language::En)
    }
}

fn is_letter(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::UppercaseLetter
            | GeneralCategory::LowercaseLetter
            | GeneralCategory::TitlecaseLetter
            | GeneralCategory::ModifierLetter
            | GeneralCategory::OtherLetter
    )
}

fn is_digit(c: char) -> bool {
    get_general_category(c) == GeneralCategory::DecimalNumber
}

fn is_combining(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::NonspacingMark | GeneralCategory::SpacingMark
    )
}

/// ASCII punctuation that Unicode classes as punctuation rather than as a
/// symbol (`$`, `+`, `^`, `|` and friends are symbols).
fn is_ascii_punct_mark(c: char) -> bool {
    c.is_ascii_punctuation()
        && !matches!(
            get_general_category(c),
            GeneralCategory::MathSymbol | GeneralCategory::CurrencySymbol | GeneralCategory::ModifierSymbol
        )
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

fn is_word_char(c: char) -> bool {
    is_letter(c) || is_digit(c) || is_combining(c)
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops every character that is not a letter, a decimal digit, an ASCII
/// punctuation mark, whitespace, an apostrophe, or a combining mark sitting on a
/// letter. Whitespace runs collapse to one space and the ends are trimmed.
pub fn strip_special_unicode(text: &str) -> String {
    let mut kept = String::with_capacity(text.len());
    // Whether the previous input character was a kept letter (or a kept mark
    // stacked on one).
    let mut on_letter = false;
    for c in text.chars() {
        let keep = if is_letter(c) {
            on_letter = true;
            true
        } else if is_combining(c) {
            on_letter
        } else {
            on_letter = false;
            is_digit(c) || is_ascii_punct_mark(c) || c.is_whitespace() || is_apostrophe(c)
        };
        if keep {
            kept.push(c);
        }
    }
    collapse_whitespace(&kept)
}

const ONES: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];

const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

fn push_below_thousand(n: u32, words: &mut Vec<&'static str>) {
    debug_assert!(n > 0 && n < 1000);
    let hundreds = n / 100;
    let rest = n % 100;
    if hundreds > 0 {
        words.push(ONES[hundreds as usize]);
        words.push("hundred");
    }
    if rest >= 20 {
        words.push(TENS[(rest / 10) as usize]);
        if rest % 10 > 0 {
            words.push(ONES[(rest % 10) as usize]);
        }
    } else if rest > 0 {
        words.push(ONES[rest as usize]);
    }
}

fn english_cardinal(n: u32) -> String {
    if n == 0 {
        return ONES[0].to_string();
    }
    let mut words = Vec::new();
    let thousands = n / 1000;
    let rest = n % 1000;
    if thousands > 0 {
        push_below_thousand(thousands, &mut words);
        words.push("thousand");
    }
    if rest > 0 {
        push_below_thousand(rest, &mut words);
    }
    words.join(" ")
}

/// Spells a digit run as an English cardinal ("21" -> "twenty one").
/// Other languages get the token back unchanged.
pub fn number_to_words(token: &str, language: Language) -> Result<String, NormalizeError> {
    if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
        return Err(NormalizeError::NotADigitRun(token.to_string()));
    }
    if language != Language::En {
        return Ok(token.to_string());
    }
    match token.parse::<u32>() {
        Ok(n) if n <= 999_999 => Ok(english_cardinal(n)),
        _ => Err(NormalizeError::OutOfRange(token.to_string())),
    }
}

fn spell_digit_run(run: &str) -> String {
    let as_number = run.len() == 1 || !run.starts_with('0');
    match number_to_words(run, Language::En) {
        Ok(words) if as_number => words,
        // Long runs and zero-padded runs are read digit by digit.
        _ => run
            .bytes()
            .map(|b| ONES[(b - b'0') as usize])
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn convert_numbers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut run = String::new();
    for c in text.chars() {
        if c.is_ascii_digit() {
            run.push(c);
            continue;
        }
        if !run.is_empty() {
            out.push_str(&spell_digit_run(&run));
            run.clear();
        }
        out.push(c);
    }
    if !run.is_empty() {
        out.push_str(&spell_digit_run(&run));
    }
    out
}

fn strip_punctuation(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        let punct = c.is_ascii_punctuation() || is_apostrophe(c);
        if !punct {
            out.push(c);
            continue;
        }
        if is_apostrophe(c) {
            let left = i > 0 && is_word_char(chars[i - 1]);
            let right = chars.get(i + 1).is_some_and(|&n| is_word_char(n));
            if left && right {
                out.push(c);
            }
        }
    }
    out
}

/// Full case folding followed by lowercasing; the second step catches the
/// few scripts (Cherokee) whose folded form is uppercase.
fn fold_case(text: &str) -> String {
    caseless::default_case_fold_str(text)
        .chars()
        .flat_map(char::to_lowercase)
        .collect()
}

pub fn normalize_text(text: &str, rules: &NormalizationRules) -> String {
    let mut s = strip_special_unicode(text);
    s = fold_case(&s);
    if rules.converts_numbers() {
        s = convert_numbers(&s);
    }
    if rules.strip_punctuation {
        s = strip_punctuation(&s);
    }
    collapse_whitespace(&s)
}
