use serde::{Deserialize, Serialize};

use crate::textnorm::Language;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Selection only; a reply is always expected to pick a candidate.
    Benchmark,
    /// Adds the validity clauses and the language condition.
    Dataset,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "benchmark" => Ok(Mode::Benchmark),
            "dataset" => Ok(Mode::Dataset),
            other => Err(format!("unknown mode {other:?} (expected benchmark or dataset)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMode {
    pub mode: Mode,
    pub language: String,
}

impl PromptMode {
    pub fn benchmark(language: impl Into<String>) -> Self {
        PromptMode {
            mode: Mode::Benchmark,
            language: language.into(),
        }
    }

    pub fn dataset(language: impl Into<String>) -> Self {
        PromptMode {
            mode: Mode::Dataset,
            language: language.into(),
        }
    }
}

const DEFAULT_BODY: &str = include_str!("../../prompts/ensemble_instruction.txt");

const TASK_CLAUSE: &str = " Also filter out invalid lyrics when all predictions are nonsense.";
const SELECTION_CLAUSE: &str = " Only when all predictions greatly differ from each other or are completely nonsense or meaningless, which means that none of the predictions is valid, fill in \"None\" in this field.";
const OUTPUT_CLAUSE: &str = " If the \"closest_prediction\" field is \"None\", you should also output \"None\" in this field. The language of the input lyrics is ${language}.";

/// English name used in the language condition; unknown codes are passed
/// through as given.
pub fn language_name(code: &str) -> String {
    if let Some(name) = Language::from_code(code).english_name() {
        return name.to_string();
    }
    let primary = code.split(['-', '_']).next().unwrap_or(code).to_ascii_lowercase();
    let name = match primary.as_str() {
        "pt" => "Portuguese",
        "nl" => "Dutch",
        "pl" => "Polish",
        "sv" => "Swedish",
        "ja" => "Japanese",
        "zh" => "Chinese",
        "ko" => "Korean",
        "tr" => "Turkish",
        "uk" => "Ukrainian",
        "ca" => "Catalan",
        "el" => "Greek",
        _ => return code.to_string(),
    };
    name.to_string()
}

/// Instruction prompt with `${validity_task}`, `${validity_selection}` and
/// `${validity_output}` slots; the output clause carries `${language}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub body: String,
    pub task_clause: String,
    pub selection_clause: String,
    pub output_clause: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            body: DEFAULT_BODY.trim_end().to_string(),
            task_clause: TASK_CLAUSE.to_string(),
            selection_clause: SELECTION_CLAUSE.to_string(),
            output_clause: OUTPUT_CLAUSE.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn with_body(body: impl Into<String>) -> Self {
        PromptTemplate {
            body: body.into(),
            ..Self::default()
        }
    }

    pub fn render(&self, mode: &PromptMode) -> String {
        let (task, selection, output) = match mode.mode {
            Mode::Benchmark => (String::new(), String::new(), String::new()),
            Mode::Dataset => (
                self.task_clause.clone(),
                self.selection_clause.clone(),
                self.output_clause
                    .replace("${language}", &language_name(&mode.language)),
            ),
        };
        self.body
            .replace("${validity_task}", &task)
            .replace("${validity_selection}", &selection)
            .replace("${validity_output}", &output)
    }
}

pub fn build_instruction_prompt(mode: &PromptMode) -> String {
    PromptTemplate::default().render(mode)
}
