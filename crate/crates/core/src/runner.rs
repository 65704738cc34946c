//! Evaluation orchestration: walk every (image, backend, template) triple,
//! run the chat protocol, extract a label, and persist one JSONL row per
//! triple as it completes so interrupted runs resume without repeating work.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    cached_complete, BackendError, CacheMode, ChatBackend, Conversation, GenerationParams,
    ResponseCache, RunLedger, Turn,
};
use crate::dataset::{load_manifest, split_dataset, DatasetError, ImageRecord, SplitTag};
use crate::extraction::{
    extract_with_fallback, to_task_label, ExtractionCategory, ExtractionError, ExtractionMethod,
    TaskLabel, Vocabulary,
};
use crate::preprocess::{encode_png, load_rgb, resize_standard, PreprocessError};
use crate::prompts::{PromptError, PromptRegistry, PromptTemplate, TemplateId};

/// Which records of the split-tagged manifest a run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    Exp0,
    Main,
    All,
}

impl SplitFilter {
    fn tag(self) -> Option<SplitTag> {
        match self {
            SplitFilter::Exp0 => Some(SplitTag::Exp0),
            SplitFilter::Main => Some(SplitTag::Main),
            SplitFilter::All => None,
        }
    }
}

/// Multi-turn templates can be played turn-by-turn (each model reply fed
/// back before the next question) or flattened into one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatMode {
    #[default]
    Stepwise,
    SinglePass,
}

fn default_split_fraction() -> f64 {
    0.15
}

fn default_seed() -> u64 {
    123
}

fn default_cache_mode() -> CacheMode {
    CacheMode::Normal
}

/// JSON-loadable description of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// CSV manifest path; image paths inside resolve against its directory.
    pub manifest: PathBuf,
    pub backends: Vec<String>,
    pub templates: Vec<TemplateId>,
    pub split: SplitFilter,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    /// Seed for the stratified split shuffle.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_cache_mode")]
    pub cache_mode: CacheMode,
    /// Resize every image to the 300×300 standard before querying.
    #[serde(default)]
    pub resize: bool,
    #[serde(default)]
    pub chat_mode: ChatMode,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| RunnerError::Config {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.backends.is_empty() {
            return Err(RunnerError::Invalid("no backends listed".into()));
        }
        if self.templates.is_empty() {
            return Err(RunnerError::Invalid("no templates listed".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(RunnerError::Invalid(format!(
                "split_fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("cannot read run config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("invalid run config: {0}")]
    Invalid(String),
    #[error("backend {0:?} not registered")]
    UnknownBackend(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("results serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// What the model said and what we made of it; present only on success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub label: TaskLabel,
    pub category: ExtractionCategory,
    pub method: ExtractionMethod,
    pub raw_reply: String,
    /// True when at least one turn of the exchange was served from cache.
    pub cache_hit: bool,
}

/// One (image, backend, template) result, serialized as one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub image_id: String,
    pub backend_id: String,
    pub template: TemplateId,
    pub truth: crate::dataset::PathologyClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<RowOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRow {
    fn key(&self) -> (String, String, &'static str) {
        (
            self.image_id.clone(),
            self.backend_id.clone(),
            self.template.name(),
        )
    }
}

/// Live wiring a run executes against; backends are looked up by id.
pub struct ExecutionEnv<'a> {
    pub backends: BTreeMap<String, &'a dyn ChatBackend>,
    pub cache: Option<&'a ResponseCache>,
    pub ledger: Option<&'a RunLedger>,
    pub vocab: &'a Vocabulary,
    pub registry: &'a PromptRegistry,
    /// Optional chat backend for the second-stage reply classifier; rules
    /// alone are used when absent.
    pub fallback: Option<&'a dyn ChatBackend>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    /// Every row for the configured triples, canonically sorted.
    pub rows: Vec<RunRow>,
    /// Triples executed in this invocation.
    pub executed: usize,
    /// Triples skipped because a successful row already existed.
    pub skipped: usize,
    /// Rows recorded with an error in this invocation.
    pub failed: usize,
    pub results_path: PathBuf,
}

/// Plays a template against one backend and returns the final reply plus
/// whether any turn hit the cache.
fn run_chat(
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    image_png: &[u8],
    chat_mode: ChatMode,
    cache: Option<&ResponseCache>,
    cache_mode: CacheMode,
    ledger: Option<&RunLedger>,
) -> Result<(String, bool), BackendError> {
    let params = GenerationParams::evaluation();
    let make_turn = |turn: &crate::prompts::TurnTemplate| {
        if turn.wants_image {
            Turn::with_image(turn.text.clone(), image_png.to_vec())
        } else {
            Turn::text(turn.text.clone())
        }
    };
    match chat_mode {
        ChatMode::SinglePass => {
            let conversation =
                Conversation::new(template.turns.iter().map(make_turn).collect())?;
            let response =
                cached_complete(cache, cache_mode, backend, &conversation, &params, ledger)?;
            Ok((response.raw_text, response.cache_hit))
        }
        ChatMode::Stepwise => {
            let mut turns = template.turns.iter();
            let first = turns.next().expect("templates have at least one turn");
            let mut conversation = Conversation::new(vec![make_turn(first)])?;
            let mut response =
                cached_complete(cache, cache_mode, backend, &conversation, &params, ledger)?;
            let mut any_hit = response.cache_hit;
            for follow_up in turns {
                conversation = conversation.extended(&response.raw_text, make_turn(follow_up))?;
                response =
                    cached_complete(cache, cache_mode, backend, &conversation, &params, ledger)?;
                any_hit |= response.cache_hit;
            }
            Ok((response.raw_text, any_hit))
        }
    }
}

fn execute_triple(
    env: &ExecutionEnv,
    config: &RunConfig,
    record: &ImageRecord,
    backend_id: &str,
    template_id: TemplateId,
) -> Result<RowOutcome, String> {
    let backend = *env
        .backends
        .get(backend_id)
        .ok_or_else(|| format!("backend {backend_id:?} not registered"))?;
    let template = env.registry.get(template_id);

    let png = prepare_image(record, config.resize).map_err(|e| e.to_string())?;
    let (raw_reply, cache_hit) = run_chat(
        backend,
        template,
        &png,
        config.chat_mode,
        env.cache,
        config.cache_mode,
        env.ledger,
    )
    .map_err(|e| e.to_string())?;

    let task = template_id.task();
    let outcome = extract_with_fallback(env.vocab, env.fallback, &raw_reply, task)
        .map_err(|e: ExtractionError| e.to_string())?;
    Ok(RowOutcome {
        label: to_task_label(&outcome, task),
        category: outcome.category,
        method: outcome.method,
        raw_reply,
        cache_hit,
    })
}

fn prepare_image(record: &ImageRecord, resize: bool) -> Result<Vec<u8>, PreprocessError> {
    let image = load_rgb(&record.file_path)?;
    let image = if resize { resize_standard(&image)? } else { image };
    encode_png(&image)
}

/// Reads persisted rows from a results JSONL file; an absent file is an
/// empty run. Used both for resume and for rebuilding reports.
pub fn read_results(path: &Path) -> Result<Vec<RunRow>, RunnerError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RunRow = serde_json::from_str(line).map_err(|e| {
            RunnerError::Invalid(format!("corrupt results line {}: {e}", i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Runs every configured triple in canonical (image, backend, template)
/// order. Each completed triple is appended to `results.jsonl` immediately;
/// at the end the file is rewritten sorted with retries deduplicated
/// (latest row wins). Backend and image failures are confined to their row.
pub fn run_evaluation(
    config: &RunConfig,
    env: &ExecutionEnv,
    out_dir: &Path,
) -> Result<RunSummary, RunnerError> {
    config.validate()?;
    for id in &config.backends {
        if !env.backends.contains_key(id) {
            return Err(RunnerError::UnknownBackend(id.clone()));
        }
    }

    let manifest = load_manifest(&config.manifest)?;
    let tagged = split_dataset(&manifest, config.split_fraction, config.seed)?;
    let mut records: Vec<&ImageRecord> = tagged.filtered(config.split.tag());
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let mut backend_ids = config.backends.clone();
    backend_ids.sort();
    backend_ids.dedup();
    let mut template_ids = config.templates.clone();
    template_ids.sort_by_key(|t| t.name());
    template_ids.dedup();

    std::fs::create_dir_all(out_dir)?;
    let results_path = out_dir.join("results.jsonl");
    let existing = read_results(&results_path)?;
    let done: BTreeSet<(String, String, &'static str)> = existing
        .iter()
        .filter(|r| r.outcome.is_some())
        .map(RunRow::key)
        .collect();

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results_path)?;

    let mut keyed: BTreeMap<(String, String, &'static str), RunRow> =
        existing.into_iter().map(|r| (r.key(), r)).collect();
    let mut executed = 0usize;
    let mut skipped = 0usize;
    let mut failed = 0usize;

    for record in &records {
        for backend_id in &backend_ids {
            for &template_id in &template_ids {
                let key = (record.id.clone(), backend_id.clone(), template_id.name());
                if done.contains(&key) {
                    skipped += 1;
                    continue;
                }
                executed += 1;
                let mut row = RunRow {
                    image_id: record.id.clone(),
                    backend_id: backend_id.clone(),
                    template: template_id,
                    truth: record.pathology,
                    outcome: None,
                    error: None,
                };
                match execute_triple(env, config, record, backend_id, template_id) {
                    Ok(outcome) => row.outcome = Some(outcome),
                    Err(message) => {
                        failed += 1;
                        row.error = Some(message);
                    }
                }
                writeln!(file, "{}", serde_json::to_string(&row)?)?;
                file.flush()?;
                keyed.insert(key, row);
            }
        }
    }
    drop(file);

    // Keep only rows belonging to the configured triples, sorted.
    let wanted: BTreeSet<(String, String, &'static str)> = records
        .iter()
        .flat_map(|r| {
            backend_ids.iter().flat_map(|b| {
                template_ids
                    .iter()
                    .map(|t| (r.id.clone(), b.clone(), t.name()))
            })
        })
        .collect();
    let rows: Vec<RunRow> = keyed
        .into_iter()
        .filter(|(k, _)| wanted.contains(k))
        .map(|(_, row)| row)
        .collect();
    let mut rewrite = String::new();
    for row in &rows {
        rewrite.push_str(&serde_json::to_string(row)?);
        rewrite.push('\n');
    }
    std::fs::write(&results_path, rewrite)?;

    Ok(RunSummary {
        rows,
        executed,
        skipped,
        failed,
        results_path,
    })
}

/// Relative F1 change of the engineered prompt over the simple one,
/// in percent; undefined when the simple prompt scored zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum PromptChange {
    Percent(f64),
    NotApplicable,
}

impl PromptChange {
    pub fn percent(&self) -> Option<f64> {
        match self {
            PromptChange::Percent(p) => Some(*p),
            PromptChange::NotApplicable => None,
        }
    }
}

impl fmt::Display for PromptChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptChange::Percent(p) => write!(f, "{p:+.1}%"),
            PromptChange::NotApplicable => f.write_str("NA"),
        }
    }
}

/// `(engineered − simple) / simple × 100`.
pub fn prompt_change(f1_simple: f64, f1_engineered: f64) -> PromptChange {
    if f1_simple == 0.0 {
        PromptChange::NotApplicable
    } else {
        PromptChange::Percent((f1_engineered - f1_simple) / f1_simple * 100.0)
    }
}
