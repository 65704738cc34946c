//! Turning free-text answers into structured labels.
//!
//! Answers land in one of five categories: unsure (needs human), multiple
//! types or no usable answer (needs human), no polyp, polyp without a type,
//! or exactly one polyp type. A deterministic rule pass runs first; an
//! optional LLM pass handles only what the rules flag as unsure.
//!
//! Rule matching is driven by an editable surface-form table, scanned
//! case-insensitively with word boundaries, longest form first, and a short
//! look-behind window for negation cues ("no", "not", "without", …).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, Conversation, GenerationParams, Turn};
use crate::dataset::PathologyClass;

/// Which question the answer responds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Classify,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Detect => "detect",
            Task::Classify => "classify",
        })
    }
}

impl FromStr for Task {
    type Err = ExtractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detect" => Ok(Task::Detect),
            "classify" => Ok(Task::Classify),
            other => Err(ExtractionError::UnknownTask {
                value: other.to_string(),
            }),
        }
    }
}

/// Final scoreable label for one answer.
///
/// Detection uses `Polyp`/`NormalMucosa`/`NoAnswer`; classification uses the
/// six class labels plus `NormalMucosa`, `NoAnswer` ("No-A") and
/// `TwoOptions` ("2OP").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskLabel {
    Polyp,
    NormalMucosa,
    NoAnswer,
    TwoOptions,
    Class(PathologyClass),
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskLabel::Polyp => f.write_str("Polyp"),
            TaskLabel::NormalMucosa => f.write_str("Normal"),
            TaskLabel::NoAnswer => f.write_str("No-A"),
            TaskLabel::TwoOptions => f.write_str("2OP"),
            TaskLabel::Class(c) => f.write_str(c.code()),
        }
    }
}

impl FromStr for TaskLabel {
    type Err = ExtractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Polyp" => Ok(TaskLabel::Polyp),
            "Normal" => Ok(TaskLabel::NormalMucosa),
            "No-A" => Ok(TaskLabel::NoAnswer),
            "2OP" => Ok(TaskLabel::TwoOptions),
            other => other
                .parse::<PathologyClass>()
                .map(TaskLabel::Class)
                .map_err(|_| ExtractionError::UnknownLabel {
                    value: other.to_string(),
                }),
        }
    }
}

impl Serialize for TaskLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TaskLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The five answer categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionCategory {
    /// Hedged or unparseable; route to a human.
    NeedsHumanUnsure,
    /// Several polyp types named, or nothing usable; route to a human.
    NeedsHumanMultipleOrNone,
    NoPolyp,
    /// Polyp affirmed without naming a type.
    PolypDetected,
    /// Exactly one polyp type named.
    PolypType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMethod {
    Rules,
    Llm,
}

/// A categorized answer. `pathology` is present exactly when the category is
/// `PolypType`; `evidence_span` carries the matched substrings when any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub category: ExtractionCategory,
    pub pathology: Option<PathologyClass>,
    pub method: ExtractionMethod,
    pub evidence_span: Option<String>,
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("unknown task {value:?}; expected detect or classify")]
    UnknownTask { value: String },
    #[error("unknown label {value:?}")]
    UnknownLabel { value: String },
    #[error("surface-form table row {row}: unknown target {target:?}")]
    UnknownTarget { row: usize, target: String },
    #[error("surface-form table row {row}: empty surface form")]
    EmptySurface { row: usize },
    #[error("audit sample size {n} exceeds result count {len}")]
    SampleTooLarge { n: usize, len: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// What a matched surface form means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VocabTarget {
    Class(PathologyClass),
    /// Affirms normal mucosa / absence of findings.
    Normal,
    /// Affirms a polyp without typing it.
    Polyp,
    /// Hedging language.
    Hedge,
    /// Consumes a span so inner phrases cannot fire (e.g. prompt echoes).
    Ignore,
}

#[derive(Debug, Clone)]
struct VocabEntry {
    surface: String,
    target: VocabTarget,
}

/// The surface-form table, sorted longest form first so multi-word phrases
/// consume their spans before shorter forms can fire inside them.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
}

const BUILTIN_TABLE: &str = include_str!("../assets/synonyms.csv");

#[derive(Debug)]
struct ScanMatch {
    target: VocabTarget,
    start: usize,
    end: usize,
    negated: bool,
}

/// How far back (bytes) a negation cue can reach, within the same sentence.
const NEGATION_WINDOW: usize = 20;
const NEGATION_CUES: [&str; 7] = [
    "no",
    "not",
    "without",
    "free of",
    "absence of",
    "negative for",
    "rather than",
];

impl Vocabulary {
    /// The table shipped with the crate.
    pub fn builtin() -> Self {
        Vocabulary::from_csv_str(BUILTIN_TABLE).expect("builtin table is valid")
    }

    /// Loads a `surface_form,class` CSV. Targets are the six class codes
    /// plus NORMAL, POLYP, HEDGE, IGNORE.
    pub fn from_csv_path(path: &Path) -> Result<Self, ExtractionError> {
        let mut reader = csv::Reader::from_path(path)?;
        Self::from_reader(&mut reader)
    }

    pub fn from_csv_str(content: &str) -> Result<Self, ExtractionError> {
        let mut reader = csv::Reader::from_reader(content.as_bytes());
        Self::from_reader(&mut reader)
    }

    fn from_reader<R: std::io::Read>(reader: &mut csv::Reader<R>) -> Result<Self, ExtractionError> {
        let mut entries = Vec::new();
        for (index, record) in reader.records().enumerate() {
            let row = index + 2;
            let record = record?;
            let surface = record.get(0).unwrap_or("").trim().to_ascii_lowercase();
            if surface.is_empty() {
                return Err(ExtractionError::EmptySurface { row });
            }
            let target_code = record.get(1).unwrap_or("").trim();
            let target = match target_code {
                "NORMAL" => VocabTarget::Normal,
                "POLYP" => VocabTarget::Polyp,
                "HEDGE" => VocabTarget::Hedge,
                "IGNORE" => VocabTarget::Ignore,
                code => code
                    .parse::<PathologyClass>()
                    .ok()
                    .filter(PathologyClass::is_polyp)
                    .map(VocabTarget::Class)
                    .ok_or_else(|| ExtractionError::UnknownTarget {
                        row,
                        target: target_code.to_string(),
                    })?,
            };
            entries.push(VocabEntry { surface, target });
        }
        entries.sort_by(|a, b| {
            b.surface
                .len()
                .cmp(&a.surface.len())
                .then_with(|| a.surface.cmp(&b.surface))
        });
        Ok(Vocabulary { entries })
    }

    /// All boundary-checked, non-overlapping matches, longest form first.
    fn scan(&self, lowered: &str) -> Vec<ScanMatch> {
        let bytes = lowered.as_bytes();
        let mut consumed: Vec<(usize, usize)> = Vec::new();
        let mut matches = Vec::new();
        for entry in &self.entries {
            let mut from = 0;
            while let Some(pos) = lowered[from..].find(&entry.surface) {
                let start = from + pos;
                let end = start + entry.surface.len();
                from = start + 1;
                let prev_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
                let next_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
                if !prev_ok || !next_ok {
                    continue;
                }
                if consumed.iter().any(|&(s, e)| start < e && s < end) {
                    continue;
                }
                consumed.push((start, end));
                matches.push(ScanMatch {
                    target: entry.target,
                    start,
                    end,
                    negated: negated_before(lowered, start),
                });
            }
        }
        matches.sort_by_key(|m| m.start);
        matches
    }
}

/// True when a negation cue appears shortly before `start`, without an
/// intervening sentence boundary.
fn negated_before(lowered: &str, start: usize) -> bool {
    let mut from = start.saturating_sub(NEGATION_WINDOW);
    while !lowered.is_char_boundary(from) {
        from += 1;
    }
    let window = &lowered[from..start];
    let window = window
        .rsplit(['.', ';', ':', '!', '?', '\n'])
        .next()
        .unwrap_or(window);
    NEGATION_CUES.iter().any(|cue| contains_word(window, cue))
}

fn contains_word(haystack: &str, word: &str) -> bool {
    let bytes = haystack.as_bytes();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(word) {
        let start = from + pos;
        let end = start + word.len();
        from = start + 1;
        let prev_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let next_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if prev_ok && next_ok {
            return true;
        }
    }
    false
}

/// Categorizes an answer by deterministic rules.
///
/// Cascade: exactly one affirmed polyp type → `PolypType`; an affirmed
/// normal/no-polyp statement → `NoPolyp`; two or more types →
/// `NeedsHumanMultipleOrNone`; hedging → `NeedsHumanUnsure`; an affirmed
/// untyped polyp → `PolypDetected`. With nothing recognized, a
/// classification answer is `NeedsHumanMultipleOrNone` (no usable type) and
/// a detection answer is `NeedsHumanUnsure`.
pub fn extract_rules(vocab: &Vocabulary, raw_text: &str, task: Task) -> ExtractionOutcome {
    let lowered = raw_text.to_ascii_lowercase();
    let matches = vocab.scan(&lowered);

    let mut classes: BTreeSet<PathologyClass> = BTreeSet::new();
    let mut class_spans: Vec<(usize, usize)> = Vec::new();
    let mut normal_span: Option<(usize, usize)> = None;
    let mut hedge_span: Option<(usize, usize)> = None;
    let mut polyp_span: Option<(usize, usize)> = None;

    for m in &matches {
        let span = (m.start, m.end);
        match (m.target, m.negated) {
            (VocabTarget::Class(c), false) => {
                if classes.insert(c) {
                    class_spans.push(span);
                }
            }
            (VocabTarget::Normal, false) | (VocabTarget::Polyp, true) => {
                normal_span.get_or_insert(span);
            }
            (VocabTarget::Hedge, false) => {
                hedge_span.get_or_insert(span);
            }
            (VocabTarget::Polyp, false) => {
                polyp_span.get_or_insert(span);
            }
            _ => {}
        }
    }

    let slice = |span: (usize, usize)| raw_text[span.0..span.1].to_string();
    let joined = |spans: &[(usize, usize)]| {
        spans
            .iter()
            .map(|&s| slice(s))
            .collect::<Vec<_>>()
            .join(" | ")
    };

    let (category, pathology, evidence) = if classes.len() == 1 {
        let class = *classes.iter().next().unwrap();
        (
            ExtractionCategory::PolypType,
            Some(class),
            Some(joined(&class_spans)),
        )
    } else if let Some(span) = normal_span {
        (ExtractionCategory::NoPolyp, None, Some(slice(span)))
    } else if classes.len() >= 2 {
        (
            ExtractionCategory::NeedsHumanMultipleOrNone,
            None,
            Some(joined(&class_spans)),
        )
    } else if let Some(span) = hedge_span {
        (ExtractionCategory::NeedsHumanUnsure, None, Some(slice(span)))
    } else if let Some(span) = polyp_span {
        (ExtractionCategory::PolypDetected, None, Some(slice(span)))
    } else {
        let category = match task {
            Task::Classify => ExtractionCategory::NeedsHumanMultipleOrNone,
            Task::Detect => ExtractionCategory::NeedsHumanUnsure,
        };
        (category, None, None)
    };

    ExtractionOutcome {
        category,
        pathology,
        method: ExtractionMethod::Rules,
        evidence_span: evidence,
    }
}

/// Instruction block sent to the extraction model; the answer under
/// conversion is appended after it.
const EXTRACTION_INSTRUCTIONS: &str = "\
You convert a colonoscopy assistant's free-text answer into one category.
Categories:
1 = unsure; needs human review
2 = several polyp types named, or no usable answer
3 = no polyp; normal mucosa
4 = polyp present, type not given
5 = exactly one polyp type named
Type codes: AC, TA, TVA, VA, HP, IP.
Reply with JSON only, nothing else: {\"category\": <1-5>, \"class\": <\"code\" or null>}
Answer to convert:
";

/// Generation settings for the extraction model: deterministic decoding and
/// structured output.
pub fn extraction_params() -> GenerationParams {
    GenerationParams {
        temperature: 0.0,
        max_tokens: 128,
        seed: Some(0),
    }
}

fn category_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""category"\s*:\s*(\d+)"#).unwrap())
}

fn category_array_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""category"\s*:\s*\[([^\]]*)\]"#).unwrap())
}

fn class_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""class"\s*:\s*"([A-Za-z]+)""#).unwrap())
}

/// Categorizes an answer with an LLM backend at temperature 0.
///
/// The reply must carry a JSON `category` (1–5) and, for category 5, a
/// `class` code. Unparseable replies fall back to `NeedsHumanUnsure`; a
/// reply naming several categories becomes `NeedsHumanMultipleOrNone`.
pub fn extract_llm(
    backend: &dyn ChatBackend,
    raw_text: &str,
    _task: Task,
) -> Result<ExtractionOutcome, ExtractionError> {
    let conversation = Conversation::new(vec![Turn::text(format!(
        "{EXTRACTION_INSTRUCTIONS}{raw_text}"
    ))])?;
    let response = backend.complete(&conversation, &extraction_params())?;
    Ok(parse_llm_reply(&response.raw_text))
}

fn parse_llm_reply(reply: &str) -> ExtractionOutcome {
    let mut categories: BTreeSet<u32> = category_regex()
        .captures_iter(reply)
        .filter_map(|c| c[1].parse().ok())
        .collect();
    for captures in category_array_regex().captures_iter(reply) {
        categories.extend(captures[1].split(',').filter_map(|v| v.trim().parse::<u32>().ok()));
    }

    let unsure = |evidence: Option<String>| ExtractionOutcome {
        category: ExtractionCategory::NeedsHumanUnsure,
        pathology: None,
        method: ExtractionMethod::Llm,
        evidence_span: evidence,
    };

    let category = match (categories.len(), categories.iter().next()) {
        (1, Some(&c)) => c,
        (0, _) => return unsure(None),
        _ => {
            return ExtractionOutcome {
                category: ExtractionCategory::NeedsHumanMultipleOrNone,
                pathology: None,
                method: ExtractionMethod::Llm,
                evidence_span: Some(reply.trim().to_string()),
            }
        }
    };

    let evidence = Some(reply.trim().to_string());
    let outcome = |category, pathology| ExtractionOutcome {
        category,
        pathology,
        method: ExtractionMethod::Llm,
        evidence_span: evidence.clone(),
    };
    match category {
        1 => outcome(ExtractionCategory::NeedsHumanUnsure, None),
        2 => outcome(ExtractionCategory::NeedsHumanMultipleOrNone, None),
        3 => outcome(ExtractionCategory::NoPolyp, None),
        4 => outcome(ExtractionCategory::PolypDetected, None),
        5 => {
            let class = class_regex()
                .captures(reply)
                .and_then(|c| c[1].parse::<PathologyClass>().ok())
                .filter(PathologyClass::is_polyp);
            match class {
                Some(c) => outcome(ExtractionCategory::PolypType, Some(c)),
                None => unsure(evidence),
            }
        }
        _ => unsure(evidence),
    }
}

/// Rules first; the LLM pass runs only when the rules come back unsure.
pub fn extract_with_fallback(
    vocab: &Vocabulary,
    backend: Option<&dyn ChatBackend>,
    raw_text: &str,
    task: Task,
) -> Result<ExtractionOutcome, ExtractionError> {
    let rules = extract_rules(vocab, raw_text, task);
    match (rules.category, backend) {
        (ExtractionCategory::NeedsHumanUnsure, Some(backend)) => {
            extract_llm(backend, raw_text, task)
        }
        _ => Ok(rules),
    }
}

/// Maps a categorized answer onto the task's label space.
pub fn to_task_label(outcome: &ExtractionOutcome, task: Task) -> TaskLabel {
    match task {
        Task::Detect => match outcome.category {
            ExtractionCategory::NoPolyp => TaskLabel::NormalMucosa,
            ExtractionCategory::PolypDetected | ExtractionCategory::PolypType => TaskLabel::Polyp,
            ExtractionCategory::NeedsHumanUnsure | ExtractionCategory::NeedsHumanMultipleOrNone => {
                TaskLabel::NoAnswer
            }
        },
        Task::Classify => match outcome.category {
            ExtractionCategory::PolypType => match outcome.pathology {
                Some(class) => TaskLabel::Class(class),
                None => TaskLabel::NoAnswer,
            },
            ExtractionCategory::NoPolyp => TaskLabel::NormalMucosa,
            ExtractionCategory::NeedsHumanMultipleOrNone => TaskLabel::TwoOptions,
            ExtractionCategory::NeedsHumanUnsure | ExtractionCategory::PolypDetected => {
                TaskLabel::NoAnswer
            }
        },
    }
}

/// Seeded uniform sample without replacement, in original order, for human
/// review of response→category pairs.
pub fn sample_for_audit<T: Clone>(
    results: &[T],
    n: usize,
    seed: u64,
) -> Result<Vec<T>, ExtractionError> {
    if n > results.len() {
        return Err(ExtractionError::SampleTooLarge {
            n,
            len: results.len(),
        });
    }
    let mut indices: Vec<usize> = (0..results.len()).collect();
    indices.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = indices.into_iter().take(n).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| results[i].clone()).collect())
}

/// One exported review row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: String,
    pub raw_text: String,
    pub category: ExtractionCategory,
    pub pathology: Option<PathologyClass>,
}

/// Writes review rows as CSV (`id,raw_text,category,pathology`).
pub fn write_audit_csv(rows: &[AuditRow], path: &Path) -> Result<(), ExtractionError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockBackend;
    use proptest::prelude::*;

    use ExtractionCategory::*;
    use PathologyClass::{
        Adenocarcinoma as AC, HyperplasticPolyp as HP, InflammatoryPolyp as IP,
        TubularAdenoma as TA, TubulovillousAdenoma as TVA, VillousAdenoma as VA,
    };

    fn rules(text: &str, task: Task) -> ExtractionOutcome {
        extract_rules(&Vocabulary::builtin(), text, task)
    }

    #[test]
    fn numbered_option_strings_map_to_classes() {
        let cases = [
            ("1. normal", NoPolyp, None),
            ("2. adenocarcinoma", PolypType, Some(AC)),
            ("3. adenomatous-tubular polyp", PolypType, Some(TA)),
            ("4. adenomatous-tubulovillous polyp", PolypType, Some(TVA)),
            ("5. adenomatous-villous polyp", PolypType, Some(VA)),
            ("6. hyperplastic polyp", PolypType, Some(HP)),
            ("7. inflammatory polyp", PolypType, Some(IP)),
        ];
        for (text, category, pathology) in cases {
            let outcome = rules(text, Task::Classify);
            assert_eq!(outcome.category, category, "{text}");
            assert_eq!(outcome.pathology, pathology, "{text}");
            assert_eq!(outcome.method, ExtractionMethod::Rules);
        }
    }

    #[test]
    fn plain_normal_sentence_is_no_polyp() {
        let outcome = rules("This appears normal colonic mucosa, no lesion.", Task::Detect);
        assert_eq!(outcome.category, NoPolyp);
        assert_eq!(outcome.pathology, None);
        assert_eq!(outcome.evidence_span.as_deref(), Some("normal"));
    }

    #[test]
    fn two_class_mentions_need_human() {
        let outcome = rules("Could be tubular or villous adenoma", Task::Classify);
        assert_eq!(outcome.category, NeedsHumanMultipleOrNone);
        assert_eq!(outcome.pathology, None);
    }

    #[test]
    fn negated_class_does_not_fire() {
        let outcome = rules(
            "Not a hyperplastic polyp; this is a tubular adenoma.",
            Task::Classify,
        );
        assert_eq!(outcome.category, PolypType);
        assert_eq!(outcome.pathology, Some(TA));
    }

    #[test]
    fn negation_respects_sentence_boundary() {
        // "no" belongs to the previous sentence and must not negate the class.
        let outcome = rules("There is no bleeding. Tubular adenoma present.", Task::Classify);
        assert_eq!(outcome.category, PolypType);
        assert_eq!(outcome.pathology, Some(TA));
    }

    #[test]
    fn no_polyp_phrase_is_normal_signal() {
        let outcome = rules("There is no polyp in this frame.", Task::Detect);
        assert_eq!(outcome.category, NoPolyp);
    }

    #[test]
    fn hedging_without_commitment_is_unsure() {
        let outcome = rules(
            "I cannot determine the diagnosis from this image alone.",
            Task::Classify,
        );
        assert_eq!(outcome.category, NeedsHumanUnsure);
    }

    #[test]
    fn untyped_polyp_on_detect_is_polyp_detected() {
        let outcome = rules("There is a large pedunculated polyp visible.", Task::Detect);
        assert_eq!(outcome.category, PolypDetected);
        assert_eq!(outcome.evidence_span.as_deref(), Some("polyp"));
    }

    #[test]
    fn prompt_echo_enumeration_is_defused() {
        let text = "Differential includes inflammatory bowel disease, colorectal polyps, \
                    diverticulosis, and colorectal cancer. I cannot say which.";
        let outcome = rules(text, Task::Classify);
        assert_eq!(outcome.category, NeedsHumanUnsure);
    }

    #[test]
    fn unrecognized_classify_answer_needs_human() {
        let outcome = rules("The bowel preparation is adequate today.", Task::Classify);
        assert_eq!(outcome.category, NeedsHumanMultipleOrNone);
        let detect = rules("The bowel preparation is adequate today.", Task::Detect);
        assert_eq!(detect.category, NeedsHumanUnsure);
    }

    #[test]
    fn matching_is_case_insensitive_with_boundaries() {
        assert_eq!(rules("TUBULAR ADENOMA.", Task::Classify).pathology, Some(TA));
        // "normal" inside "abnormality" must not fire as a normal signal.
        let outcome = rules("A small abnormality is present.", Task::Detect);
        assert_eq!(outcome.category, PolypDetected);
    }

    #[test]
    fn tubulovillous_does_not_leak_inner_forms() {
        let outcome = rules("Consistent with tubulovillous adenoma.", Task::Classify);
        assert_eq!(outcome.category, PolypType);
        assert_eq!(outcome.pathology, Some(TVA));
    }

    #[test]
    fn label_mapping_covers_both_tasks() {
        let typed = ExtractionOutcome {
            category: PolypType,
            pathology: Some(TA),
            method: ExtractionMethod::Rules,
            evidence_span: None,
        };
        assert_eq!(to_task_label(&typed, Task::Classify), TaskLabel::Class(TA));
        assert_eq!(to_task_label(&typed, Task::Detect), TaskLabel::Polyp);

        let make = |category| ExtractionOutcome {
            category,
            pathology: None,
            method: ExtractionMethod::Rules,
            evidence_span: None,
        };
        assert_eq!(to_task_label(&make(NoPolyp), Task::Detect), TaskLabel::NormalMucosa);
        assert_eq!(to_task_label(&make(NoPolyp), Task::Classify), TaskLabel::NormalMucosa);
        assert_eq!(to_task_label(&make(NeedsHumanUnsure), Task::Detect), TaskLabel::NoAnswer);
        assert_eq!(
            to_task_label(&make(NeedsHumanMultipleOrNone), Task::Detect),
            TaskLabel::NoAnswer
        );
        assert_eq!(
            to_task_label(&make(NeedsHumanMultipleOrNone), Task::Classify),
            TaskLabel::TwoOptions
        );
        assert_eq!(to_task_label(&make(PolypDetected), Task::Detect), TaskLabel::Polyp);
        // A typeless detection answer gives no usable classification label.
        assert_eq!(to_task_label(&make(PolypDetected), Task::Classify), TaskLabel::NoAnswer);
    }

    #[test]
    fn task_label_display_round_trips() {
        let labels = [
            TaskLabel::Polyp,
            TaskLabel::NormalMucosa,
            TaskLabel::NoAnswer,
            TaskLabel::TwoOptions,
            TaskLabel::Class(TVA),
        ];
        for label in labels {
            assert_eq!(label.to_string().parse::<TaskLabel>().unwrap(), label);
        }
        assert_eq!(TaskLabel::NoAnswer.to_string(), "No-A");
        assert_eq!(TaskLabel::TwoOptions.to_string(), "2OP");
    }

    #[test]
    fn llm_extraction_scripted_category_five() {
        let backend = MockBackend::with_default("{\"category\": 5, \"class\": \"HP\"}");
        let outcome = extract_llm(&backend, "the polyp type is classified as hp", Task::Classify)
            .unwrap();
        assert_eq!(outcome.category, PolypType);
        assert_eq!(outcome.pathology, Some(HP));
        assert_eq!(outcome.method, ExtractionMethod::Llm);
    }

    #[test]
    fn llm_reply_missing_category_is_unsure() {
        let backend = MockBackend::with_default("{\"label\": \"polyp\"}");
        let outcome = extract_llm(&backend, "anything", Task::Detect).unwrap();
        assert_eq!(outcome.category, NeedsHumanUnsure);
    }

    #[test]
    fn llm_reply_with_two_categories_needs_human() {
        let backend =
            MockBackend::with_default("{\"category\": 3} or maybe {\"category\": 5, \"class\": \"TA\"}");
        let outcome = extract_llm(&backend, "anything", Task::Classify).unwrap();
        assert_eq!(outcome.category, NeedsHumanMultipleOrNone);
    }

    #[test]
    fn llm_category_five_without_class_is_unsure() {
        assert_eq!(parse_llm_reply("{\"category\": 5, \"class\": null}").category, NeedsHumanUnsure);
        assert_eq!(parse_llm_reply("{\"category\": 9}").category, NeedsHumanUnsure);
        assert_eq!(parse_llm_reply("{\"category\": [2, 4]}").category, NeedsHumanMultipleOrNone);
        assert_eq!(parse_llm_reply("{\"category\": 4}").category, PolypDetected);
    }

    #[test]
    fn fallback_consults_llm_only_when_unsure() {
        let vocab = Vocabulary::builtin();
        let backend = MockBackend::with_default("{\"category\": 3, \"class\": null}");
        // Rules already decide: the LLM answer must not override.
        let decided =
            extract_with_fallback(&vocab, Some(&backend), "6. hyperplastic polyp", Task::Classify)
                .unwrap();
        assert_eq!(decided.method, ExtractionMethod::Rules);
        assert_eq!(decided.pathology, Some(HP));
        // Rules are unsure: the LLM answer wins.
        let delegated = extract_with_fallback(
            &vocab,
            Some(&backend),
            "I am unsure what this shows.",
            Task::Classify,
        )
        .unwrap();
        assert_eq!(delegated.method, ExtractionMethod::Llm);
        assert_eq!(delegated.category, NoPolyp);
    }

    #[test]
    fn audit_sample_is_reproducible_and_distinct() {
        let results: Vec<u32> = (0..400).collect();
        let a = sample_for_audit(&results, 50, 7).unwrap();
        let b = sample_for_audit(&results, 50, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let distinct: BTreeSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 50);
        assert_ne!(a, sample_for_audit(&results, 50, 8).unwrap());
    }

    #[test]
    fn audit_sample_boundaries() {
        let results: Vec<u32> = (0..5).collect();
        assert_eq!(sample_for_audit(&results, 5, 1).unwrap().len(), 5);
        assert!(sample_for_audit(&results, 0, 1).unwrap().is_empty());
        assert!(matches!(
            sample_for_audit(&results, 6, 1),
            Err(ExtractionError::SampleTooLarge { n: 6, len: 5 })
        ));
    }

    #[test]
    fn audit_csv_has_expected_columns() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("audit.csv");
        let rows = vec![AuditRow {
            id: "img1".into(),
            raw_text: "6. hyperplastic polyp".into(),
            category: PolypType,
            pathology: Some(HP),
        }];
        write_audit_csv(&rows, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.starts_with("id,raw_text,category,pathology"));
        assert!(content.contains("polyp_type"));
        assert!(content.contains(",HP"));
    }

    #[test]
    fn vocabulary_rejects_unknown_target() {
        let err = Vocabulary::from_csv_str("surface_form,class\nfoo,BOGUS\n").unwrap_err();
        assert!(matches!(err, ExtractionError::UnknownTarget { row: 2, .. }));
    }

    #[test]
    fn vocabulary_rejects_normal_as_class_target() {
        // The pseudo-target for normal mucosa is NORMAL, not the class code.
        let err = Vocabulary::from_csv_str("surface_form,class\nfoo,Normal\n").unwrap_err();
        assert!(matches!(err, ExtractionError::UnknownTarget { .. }));
    }

    proptest! {
        #[test]
        fn extraction_is_total(text in ".*", detect in any::<bool>()) {
            let task = if detect { Task::Detect } else { Task::Classify };
            let outcome = rules(&text, task);
            let typed = outcome.category == PolypType;
            prop_assert_eq!(typed, outcome.pathology.is_some());
        }

        #[test]
        fn two_distinct_classes_never_yield_a_type(
            a in 0usize..6,
            b in 0usize..6,
            connector in " and | then maybe | vs ",
        ) {
            prop_assume!(a != b);
            let names = [
                "adenocarcinoma",
                "tubular adenoma",
                "tubulovillous adenoma",
                "villous adenoma",
                "hyperplastic polyp",
                "inflammatory polyp",
            ];
            let text = format!("Findings suggest {}{}{}.", names[a], connector, names[b]);
            let outcome = rules(&text, Task::Classify);
            prop_assert_ne!(outcome.category, PolypType);
        }
    }
}
