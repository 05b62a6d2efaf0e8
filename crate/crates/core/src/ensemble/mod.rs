//! LLM post-processing: the instruction prompt, the JSON exchange format,
//! response validation, and the ground-truth selection experiment.

mod chat;
mod prompt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::backend::BackendError;

pub use chat::{
    request_digest, ChatBackend, ChatCall, ChatMessage, ChatRequest, ChatScript, ChatStrategy,
    HttpChat, Role, ScriptedChat,
};
pub use prompt::{build_instruction_prompt, language_name, Mode, PromptMode, PromptTemplate};

/// Extra attempts after a reply that fails to parse or validate.
pub const PARSE_RETRIES: usize = 3;
pub const CHAT_TEMPERATURE: f64 = 0.0;
pub const NONE_MARKER: &str = "None";

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble input: {0}")]
    Contract(String),
    #[error("no JSON object found in reply")]
    NoJson,
    #[error("reply violates the response schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub key: String,
    pub lines: Vec<String>,
}

pub fn prediction_key(index: usize) -> String {
    format!("prediction_{}", index + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    candidates: Vec<Candidate>,
    pub language: String,
}

impl PredictionSet {
    /// Keys are assigned `prediction_1..n` in the given order.
    pub fn new(runs: Vec<Vec<String>>, language: impl Into<String>) -> Self {
        PredictionSet {
            candidates: runs
                .into_iter()
                .enumerate()
                .map(|(i, lines)| Candidate {
                    key: prediction_key(i),
                    lines,
                })
                .collect(),
            language: language.into(),
        }
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn keys(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.key.clone()).collect()
    }

    pub fn get(&self, key: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.key == key)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn join_lines(lines: &[String]) -> String {
    lines
        .iter()
        .map(|l| l.replace(';', ","))
        .collect::<Vec<_>>()
        .join(";")
}

fn split_lines(joined: &str) -> Vec<String> {
    joined
        .split(';')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

struct OrderedInput<'a>(&'a [Candidate]);

impl Serialize for OrderedInput<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for c in self.0 {
            map.serialize_entry(&c.key, &join_lines(&c.lines))?;
        }
        map.end()
    }
}

/// `{"prediction_1": "line1;line2", ...}` in key order. Semicolons inside a
/// line become commas so the line structure survives.
pub fn serialize_predictions(set: &PredictionSet) -> Result<String, EnsembleError> {
    if set.is_empty() {
        return Err(EnsembleError::Contract("no candidates".into()));
    }
    if let Some(c) = set.candidates.iter().find(|c| c.lines.is_empty()) {
        return Err(EnsembleError::Contract(format!("{} has no lines", c.key)));
    }
    serde_json::to_string(&OrderedInput(&set.candidates))
        .map_err(|e| EnsembleError::Contract(e.to_string()))
}

/// Inverse of [`serialize_predictions`], ordered by key number. `None` if the
/// text is not such an object.
pub fn parse_prediction_input(text: &str) -> Option<Vec<(String, Vec<String>)>> {
    let Value::Object(map) = serde_json::from_str::<Value>(text).ok()? else {
        return None;
    };
    let mut entries: Vec<(usize, String, Vec<String>)> = Vec::with_capacity(map.len());
    for (key, value) in map {
        let n = key.strip_prefix("prediction_")?.parse::<usize>().ok()?;
        entries.push((n, key, split_lines(value.as_str()?)));
    }
    entries.sort_by_key(|e| e.0);
    Some(entries.into_iter().map(|(_, k, l)| (k, l)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Chosen { key: String, lines: Vec<String> },
    /// The model judged every candidate invalid.
    NoneValid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleResponse {
    pub reasons: String,
    pub selection: Selection,
}

impl EnsembleResponse {
    pub fn closest_prediction(&self) -> Option<&str> {
        match &self.selection {
            Selection::Chosen { key, .. } => Some(key),
            Selection::NoneValid => None,
        }
    }

    /// The reply as the model is asked to write it.
    pub fn to_json(&self) -> String {
        let (closest, output) = match &self.selection {
            Selection::Chosen { key, lines } => (key.clone(), join_lines(lines)),
            Selection::NoneValid => (NONE_MARKER.to_string(), NONE_MARKER.to_string()),
        };
        serde_json::json!({
            "reasons": self.reasons,
            "closest_prediction": closest,
            "output": output,
        })
        .to_string()
    }
}

/// Byte range of the balanced `{...}` starting at `start`, honoring JSON
/// string escapes.
fn balanced_object_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` in `raw` that parses as a JSON object.
fn extract_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = raw.as_bytes();
    for (start, _) in raw.match_indices('{') {
        if let Some(end) = balanced_object_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str(&raw[start..end]) {
                return Some(map);
            }
        }
    }
    None
}

fn is_none_marker(value: &Value) -> bool {
    match value {
        Value::Null => true,
        Value::String(s) => s.trim().eq_ignore_ascii_case(NONE_MARKER),
        _ => false,
    }
}

fn text_field(map: &serde_json::Map<String, Value>, name: &str) -> Result<Value, EnsembleError> {
    map.get(name)
        .cloned()
        .ok_or_else(|| EnsembleError::Schema(format!("missing field {name:?}")))
}

fn string_or_list(value: &Value, name: &str) -> Result<Vec<String>, EnsembleError> {
    match value {
        Value::String(s) => Ok(split_lines(s)),
        Value::Array(items) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(|s| s.trim().to_string())
                    .ok_or_else(|| EnsembleError::Schema(format!("{name:?} holds a non-string")))
            })
            .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
            .collect(),
        _ => Err(EnsembleError::Schema(format!("{name:?} is not a string"))),
    }
}

/// Parses a model reply, tolerating prose or code fences around the object.
/// `keys` are the candidate keys that were sent.
pub fn parse_response(raw: &str, keys: &[String]) -> Result<EnsembleResponse, EnsembleError> {
    let map = extract_object(raw).ok_or(EnsembleError::NoJson)?;
    let reasons = match text_field(&map, "reasons")? {
        Value::String(s) => s,
        list @ Value::Array(_) => string_or_list(&list, "reasons")?.join("; "),
        _ => return Err(EnsembleError::Schema("\"reasons\" is not a string".into())),
    };
    let closest = text_field(&map, "closest_prediction")?;
    let output = text_field(&map, "output")?;

    let selection = match (is_none_marker(&closest), is_none_marker(&output)) {
        (true, true) => Selection::NoneValid,
        (true, false) => {
            return Err(EnsembleError::Schema(
                "closest_prediction is None but output is not".into(),
            ))
        }
        (false, true) => {
            return Err(EnsembleError::Schema(
                "output is None but closest_prediction is not".into(),
            ))
        }
        (false, false) => {
            let key = closest
                .as_str()
                .map(str::trim)
                .ok_or_else(|| EnsembleError::Schema("closest_prediction is not a string".into()))?;
            if !keys.iter().any(|k| k == key) {
                return Err(EnsembleError::Schema(format!("unknown prediction key {key:?}")));
            }
            let lines = string_or_list(&output, "output")?;
            if lines.is_empty() {
                return Err(EnsembleError::Schema("output has no lines".into()));
            }
            Selection::Chosen {
                key: key.to_string(),
                lines,
            }
        }
    };
    Ok(EnsembleResponse { reasons, selection })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum EnsembleOutcome {
    /// Lines from a validated reply's `output` field.
    Final {
        key: String,
        lines: Vec<String>,
        /// The output differs from the chosen candidate's lines.
        corrected: bool,
    },
    /// The model declared all candidates invalid, or (dataset mode) no
    /// usable reply arrived.
    Invalid { reason: String },
    /// Benchmark mode after every reply failed validation: `prediction_1`.
    FallbackUsed { lines: Vec<String>, reason: String },
}

pub fn build_chat_request(set: &PredictionSet, mode: &PromptMode, template: &PromptTemplate) -> Result<ChatRequest, EnsembleError> {
    Ok(ChatRequest {
        messages: vec![
            ChatMessage {
                role: Role::System,
                content: template.render(mode),
            },
            ChatMessage {
                role: Role::User,
                content: serialize_predictions(set)?,
            },
        ],
        temperature: CHAT_TEMPERATURE,
    })
}

pub fn ensemble(
    set: &PredictionSet,
    mode: &PromptMode,
    client: &dyn ChatBackend,
) -> Result<EnsembleOutcome, EnsembleError> {
    ensemble_with_template(set, mode, client, &PromptTemplate::default())
}

pub fn ensemble_with_template(
    set: &PredictionSet,
    mode: &PromptMode,
    client: &dyn ChatBackend,
    template: &PromptTemplate,
) -> Result<EnsembleOutcome, EnsembleError> {
    if set.len() < 2 {
        return Err(EnsembleError::Contract(format!(
            "need at least 2 candidates, got {}",
            set.len()
        )));
    }
    let request = build_chat_request(set, mode, template)?;
    let keys = set.keys();
    let mut last_error = None;
    for attempt in 0..=PARSE_RETRIES {
        let raw = client.complete(&request)?;
        match parse_response(&raw, &keys) {
            Ok(response) => {
                return Ok(match response.selection {
                    Selection::NoneValid => EnsembleOutcome::Invalid {
                        reason: "model judged all predictions invalid".into(),
                    },
                    Selection::Chosen { key, lines } => {
                        let corrected = set.get(&key).is_some_and(|c| c.lines != lines);
                        EnsembleOutcome::Final {
                            key,
                            lines,
                            corrected,
                        }
                    }
                })
            }
            Err(err) => {
                log::debug!("unusable ensemble reply (attempt {}): {err}", attempt + 1);
                last_error = Some(err);
            }
        }
    }
    let reason = format!(
        "no valid reply after {} attempts: {}",
        PARSE_RETRIES + 1,
        last_error.map(|e| e.to_string()).unwrap_or_default()
    );
    Ok(match mode.mode {
        Mode::Benchmark => EnsembleOutcome::FallbackUsed {
            lines: set.candidates[0].lines.clone(),
            reason,
        },
        Mode::Dataset => EnsembleOutcome::Invalid { reason },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtItem {
    pub set: PredictionSet,
    pub ground_truth: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtExperimentReport {
    /// `selected / attempted`; 0 when nothing could be attempted.
    pub selection_rate: f64,
    pub selected: usize,
    pub attempted: usize,
    /// Per-item key the ground truth was planted under, or `None` if excluded.
    pub planted_keys: Vec<Option<String>>,
    pub excluded: Vec<(usize, String)>,
}

/// Plants each item's ground truth among its candidates at a uniformly random
/// position and measures how often the model picks it.
pub fn gt_selection_experiment(
    corpus: &[GtItem],
    mode: &PromptMode,
    client: &dyn ChatBackend,
    seed: u64,
) -> Result<GtExperimentReport, EnsembleError> {
    if corpus.is_empty() {
        return Err(EnsembleError::Contract("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GtExperimentReport {
        selection_rate: 0.0,
        selected: 0,
        attempted: 0,
        planted_keys: Vec::with_capacity(corpus.len()),
        excluded: Vec::new(),
    };
    for (index, item) in corpus.iter().enumerate() {
        let mut runs: Vec<Vec<String>> = item.set.candidates.iter().map(|c| c.lines.clone()).collect();
        let position = rng.random_range(0..=runs.len());
        runs.insert(position, item.ground_truth.clone());
        let planted = PredictionSet::new(runs, item.set.language.clone());
        let gt_key = prediction_key(position);
        let item_mode = PromptMode {
            mode: mode.mode,
            language: item.set.language.clone(),
        };
        match ensemble(&planted, &item_mode, client) {
            Ok(outcome) => {
                report.attempted += 1;
                if matches!(&outcome, EnsembleOutcome::Final { key, .. } if *key == gt_key) {
                    report.selected += 1;
                }
                report.planted_keys.push(Some(gt_key));
            }
            Err(err) => {
                log::warn!("ground-truth experiment item {index} excluded: {err}");
                report.excluded.push((index, err.to_string()));
                report.planted_keys.push(None);
            }
        }
    }
    if report.attempted > 0 {
        report.selection_rate = report.selected as f64 / report.attempted as f64;
    }
    Ok(report)
}
