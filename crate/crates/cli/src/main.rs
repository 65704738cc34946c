//! `tileval`: evaluate chat vision backends on labeled image manifests,
//! probe them with tile occlusion, and verify the embedded metric fixtures.
//!
//! Exit codes: 0 success, 2 configuration error, 3 network/backend error,
//! 4 fixture verification failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use tileval_core::backends::{
    BackendConfigFile, BackendError, CacheMode, ChatBackend, MockBackend, RemoteBackend,
    ResponseCache, RunLedger, SystemClock,
};
use tileval_core::extraction::{extract_rules, to_task_label, Task, Vocabulary};
use tileval_core::preprocess::{load_rgb, resize_standard};
use tileval_core::prompts::PromptRegistry;
use tileval_core::report::{build_report, verify_builtin_fixtures, write_report_files};
use tileval_core::runner::{read_results, run_evaluation, ExecutionEnv, RunConfig, SplitFilter};
use tileval_core::tilense::{write_outputs, FillPolicy, TilenseSession};

const EXIT_CONFIG: u8 = 2;
const EXIT_NETWORK: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "tileval",
    version,
    about = "Zero-shot image-classification harness for chat vision backends"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration (required by `evaluate`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Backend id(s); overrides the run config's list. `mock` is built in.
    #[arg(long, global = true)]
    backend: Vec<String>,

    /// Overrides the run config's split seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for the response cache; caching is off when absent.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Directory for results, reports, and heatmaps.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// JSON file describing remote backends (credentials come from the
    /// environment variables it names).
    #[arg(long, global = true)]
    backends_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (image, backend, template) triple of a run config and
    /// write results plus a full report.
    Evaluate {
        /// Restrict to one split, overriding the run config.
        #[arg(long)]
        split: Option<String>,
    },
    /// Score tile-occlusion importance for one or more images and write a
    /// heatmap PNG plus JSON sidecar per image.
    Tilense {
        /// Image file(s) to probe.
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        /// Prompt template to probe with.
        #[arg(long, default_value = "simple_detect")]
        template: String,
        /// Queries per masking state.
        #[arg(long, default_value_t = 5)]
        runs: u32,
        /// Fill for masked tiles: black or mean.
        #[arg(long, default_value = "black")]
        fill: String,
        /// Resize images to the 300x300 standard before probing.
        #[arg(long)]
        resize: bool,
    },
    /// Run the reply-to-label extractor on a piece of text.
    Extract {
        /// Target task: detect or classify.
        #[arg(long)]
        task: String,
        /// Text to extract from.
        #[arg(long)]
        text: Option<String>,
        /// File to read the text from instead.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Recompute the embedded published-figure fixtures and compare.
    VerifyFixtures,
    /// Rebuild the report bundle from a persisted results file.
    Report {
        /// Path to a results.jsonl produced by `evaluate`.
        #[arg(long)]
        results: PathBuf,
    },
}

/// An error carrying its intended process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error,
        }
    }

    fn network(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_NETWORK,
            error,
        }
    }
}

fn backend_failure(error: &BackendError) -> u8 {
    match error {
        BackendError::Auth(_)
        | BackendError::Http { .. }
        | BackendError::Network(_)
        | BackendError::RetriesExhausted { .. } => EXIT_NETWORK,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

/// Instantiates every requested backend: `mock` is built in, everything
/// else must appear in the backends file.
fn build_backends(
    ids: &[String],
    backends_file: Option<&Path>,
) -> Result<BTreeMap<String, Box<dyn ChatBackend>>, Failure> {
    let remote_configs = match backends_file {
        Some(path) => {
            BackendConfigFile::load(path)
                .map_err(|e| Failure::config(anyhow!(e)))?
                .backends
        }
        None => Vec::new(),
    };
    let clock = Arc::new(SystemClock::new());
    let mut backends: BTreeMap<String, Box<dyn ChatBackend>> = BTreeMap::new();
    for id in ids {
        if backends.contains_key(id) {
            continue;
        }
        let backend: Box<dyn ChatBackend> = if id == "mock" {
            Box::new(MockBackend::with_default(
                "I cannot determine this without further information.",
            ))
        } else {
            let config = remote_configs
                .iter()
                .find(|c| &c.backend_id == id)
                .cloned()
                .ok_or_else(|| {
                    Failure::config(anyhow!(
                        "backend {id:?} is not `mock` and no --backends-file entry defines it"
                    ))
                })?;
            Box::new(
                RemoteBackend::new(config, clock.clone())
                    .map_err(|e| Failure::config(anyhow!(e)))?,
            )
        };
        backends.insert(id.clone(), backend);
    }
    Ok(backends)
}

fn open_cache(dir: Option<&Path>) -> Result<Option<ResponseCache>, Failure> {
    dir.map(|d| {
        ResponseCache::new(d)
            .with_context(|| format!("cannot open cache dir {}", d.display()))
            .map_err(Failure::config)
    })
    .transpose()
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match &cli.command {
        Command::Evaluate { split } => cmd_evaluate(&cli, split.as_deref()),
        Command::Tilense {
            image,
            template,
            runs,
            fill,
            resize,
        } => cmd_tilense(&cli, image, template, *runs, fill, *resize),
        Command::Extract { task, text, file } => cmd_extract(task, text.as_deref(), file.as_deref()),
        Command::VerifyFixtures => cmd_verify_fixtures(),
        Command::Report { results } => cmd_report(&cli, results),
    }
}

fn cmd_evaluate(cli: &Cli, split: Option<&str>) -> Result<u8, Failure> {
    let config_path = cli.config.as_deref().ok_or_else(|| {
        Failure::config(anyhow!(
            "evaluate needs --config <run.json>; see `tileval evaluate --help`"
        ))
    })?;
    let mut config = RunConfig::load(config_path).map_err(|e| Failure::config(anyhow!(e)))?;
    if !cli.backend.is_empty() {
        config.backends = cli.backend.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(split) = split {
        config.split = match split {
            "exp0" => SplitFilter::Exp0,
            "main" => SplitFilter::Main,
            "all" => SplitFilter::All,
            other => {
                return Err(Failure::config(anyhow!(
                    "unknown split {other:?}; use exp0, main, or all"
                )))
            }
        };
    }
    if cli.cache_dir.is_none() {
        config.cache_mode = CacheMode::Off;
    }

    let backends = build_backends(&config.backends, cli.backends_file.as_deref())?;
    let cache = open_cache(cli.cache_dir.as_deref())?;
    let ledger = RunLedger::open(cli.out_dir.join("run_ledger.jsonl"))
        .map_err(|e| Failure::config(anyhow!(e)))?;
    let vocab = Vocabulary::builtin();
    let registry = PromptRegistry::builtin();

    let env = ExecutionEnv {
        backends: backends
            .iter()
            .map(|(id, b)| (id.clone(), b.as_ref()))
            .collect(),
        cache: cache.as_ref(),
        ledger: Some(&ledger),
        vocab: &vocab,
        registry: &registry,
        fallback: None,
    };

    let summary = run_evaluation(&config, &env, &cli.out_dir).map_err(|e| Failure {
        code: match &e {
            tileval_core::runner::RunnerError::Backend(b) => backend_failure(b),
            _ => EXIT_CONFIG,
        },
        error: anyhow!(e),
    })?;

    let bundle = build_report(&summary.rows, Some(&cli.out_dir))
        .map_err(|e| Failure::config(anyhow!(e)))?;
    let files =
        write_report_files(&bundle, &cli.out_dir).map_err(|e| Failure::config(anyhow!(e)))?;

    println!(
        "evaluated {} triple(s) ({} skipped, {} failed); results in {}",
        summary.executed,
        summary.skipped,
        summary.failed,
        summary.results_path.display()
    );
    for file in files {
        println!("wrote {}", file.display());
    }
    Ok(0)
}

fn cmd_tilense(
    cli: &Cli,
    images: &[PathBuf],
    template_name: &str,
    runs: u32,
    fill: &str,
    resize: bool,
) -> Result<u8, Failure> {
    if runs == 0 {
        return Err(Failure::config(anyhow!("--runs must be at least 1")));
    }
    let fill: FillPolicy = fill.parse().map_err(|e| Failure::config(anyhow!("{e}")))?;
    let registry = PromptRegistry::builtin();
    let template = registry
        .get_by_name(template_name)
        .map_err(|e| Failure::config(anyhow!(e)))?;

    let backend_id = cli.backend.first().cloned().unwrap_or_else(|| "mock".to_string());
    let backends = build_backends(std::slice::from_ref(&backend_id), cli.backends_file.as_deref())?;
    let cache = open_cache(cli.cache_dir.as_deref())?;
    let ledger = RunLedger::open(cli.out_dir.join("tilense_ledger.jsonl"))
        .map_err(|e| Failure::config(anyhow!(e)))?;
    let vocab = Vocabulary::builtin();

    let session = TilenseSession {
        backend: backends[&backend_id].as_ref(),
        cache: cache.as_ref(),
        cache_mode: if cache.is_some() {
            CacheMode::Normal
        } else {
            CacheMode::Off
        },
        ledger: Some(&ledger),
        vocab: &vocab,
        template,
        n_runs: runs,
        fill,
    };

    let mut failures = 0usize;
    for path in images {
        let image_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        let result = (|| -> anyhow::Result<()> {
            let image = load_rgb(path)?;
            let image = if resize { resize_standard(&image)? } else { image };
            let sidecar = session.analyze(&image_id, &image)?;
            let (png, json) = write_outputs(&sidecar, &image, &cli.out_dir)?;
            println!(
                "{}: base answer {} -> {} and {}",
                path.display(),
                sidecar.base_answer,
                png.display(),
                json.display()
            );
            Ok(())
        })();
        if let Err(error) = result {
            failures += 1;
            eprintln!("{}: failed: {error:#}", path.display());
        }
    }
    if failures == images.len() && !images.is_empty() {
        return Err(Failure::network(anyhow!(
            "all {failures} image(s) failed; see messages above"
        )));
    }
    Ok(0)
}

fn cmd_extract(task: &str, text: Option<&str>, file: Option<&Path>) -> Result<u8, Failure> {
    let task: Task = task.parse().map_err(|e| Failure::config(anyhow!("{e}")))?;
    let text = match (text, file) {
        (Some(t), None) => t.to_string(),
        (None, Some(path)) => std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(Failure::config)?,
        _ => {
            return Err(Failure::config(anyhow!(
                "pass exactly one of --text or --file"
            )))
        }
    };
    let vocab = Vocabulary::builtin();
    let outcome = extract_rules(&vocab, &text, task);
    let label = to_task_label(&outcome, task);
    let rendered = serde_json::json!({
        "task": task,
        "category": outcome.category,
        "pathology": outcome.pathology,
        "label": label,
        "evidence": outcome.evidence_span,
    });
    println!("{}", serde_json::to_string_pretty(&rendered).unwrap());
    Ok(0)
}

fn cmd_verify_fixtures() -> Result<u8, Failure> {
    let reports = verify_builtin_fixtures().map_err(|e| Failure::config(anyhow!(e)))?;
    let mut all_pass = true;
    for report in &reports {
        print!("{}", report.render());
        all_pass &= report.all_pass();
    }
    if all_pass {
        Ok(0)
    } else {
        eprintln!("fixture verification failed");
        Ok(EXIT_VERIFICATION)
    }
}

fn cmd_report(cli: &Cli, results: &Path) -> Result<u8, Failure> {
    let rows = read_results(results).map_err(|e| Failure::config(anyhow!(e)))?;
    let artifact_dir = results.parent().map(Path::to_path_buf);
    let bundle = build_report(&rows, artifact_dir.as_deref())
        .map_err(|e| Failure::config(anyhow!(e)))?;
    let files =
        write_report_files(&bundle, &cli.out_dir).map_err(|e| Failure::config(anyhow!(e)))?;
    println!("rebuilt report from {} row(s)", rows.len());
    for file in files {
        println!("wrote {}", file.display());
    }
    Ok(0)
}
