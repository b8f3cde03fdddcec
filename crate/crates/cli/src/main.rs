//! Command-line front end for the MADRS transcript-scoring pipeline.
//!
//! Stages are separately invokable and file-backed so that the expensive
//! LLM calls are cacheable and resumable:
//!
//! ```text
//! madrs synth           generate a synthetic diarized corpus
//! madrs segment         classify clinician questions into items
//! madrs assess          run the per-item assessments (resumable)
//! madrs evaluate        score a run set against clinician ratings
//! madrs analyze-errors  fit the mixed-effects error models
//! ```
//!
//! Exit codes: 0 success, 1 partial failures present, 2 configuration error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use madrs_core::assessor::{assess_corpus, load_runset, AssessJob, ItemOutcome, RunStore};
use madrs_core::catalog::Catalog;
use madrs_core::gateway::{Backend, Gateway, LlmConfig};
use madrs_core::prompt::{ContextScope, PromptVariant};
use madrs_core::report::{
    analyze_errors, comparison_csv, error_table_text, evaluate_runset, metrics_csv,
    metrics_table_text, ErrorModelOutcome,
};
use madrs_core::segmenter::{segment_interview, SegmentedInterview};
use madrs_core::synth::{generate_corpus, MarkerTable, OraclePolicy, SynthSpec};
use madrs_core::transcript::{load_corpus, write_corpus, Corpus};

#[derive(Parser)]
#[command(
    name = "madrs",
    version,
    about = "Score MADRS depression severity from diarized interview transcripts with an LLM and evaluate against clinician ratings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic marker-planted corpus (JSONL).
    Synth(SynthArgs),
    /// Classify clinician questions into MADRS items and write per-interview segment files.
    Segment(SegmentArgs),
    /// Run per-item assessments over a corpus; output is resumable JSONL.
    Assess(AssessArgs),
    /// Evaluate a run set against clinician scores (tables, CSV, optional scope comparison).
    Evaluate(EvaluateArgs),
    /// Fit per-item mixed-effects models of absolute prediction errors.
    AnalyzeErrors(AnalyzeErrorsArgs),
}

/// Flags shared by every stage that talks to a backend.
#[derive(Args, Debug, Clone)]
struct BackendArgs {
    /// Backend: "mock" (deterministic oracle) or an endpoint base URL.
    #[arg(long)]
    backend: Option<String>,
    /// Model name sent to a remote endpoint.
    #[arg(long)]
    model: Option<String>,
    /// Perturbation probability of the mock oracle.
    #[arg(long)]
    mock_noise: Option<f64>,
    /// Catalog JSON path (defaults to the embedded catalog).
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Marker-table JSON path for the mock oracle (defaults to embedded).
    #[arg(long)]
    markers: Option<PathBuf>,
    /// RNG seed for mock determinism.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of patients.
    #[arg(long, default_value_t = 20)]
    patients: u32,
    /// Visits (interviews) per patient.
    #[arg(long, default_value_t = 2)]
    visits: u32,
    #[arg(long)]
    seed: Option<u64>,
    /// Output corpus file (JSONL).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    markers: Option<PathBuf>,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory (segments land in OUT/segments).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-segment even if outputs already exist.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Debug)]
struct AssessArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prompt variant: all | no-descriptive | no-demonstrative | none.
    #[arg(long)]
    variant: Option<String>,
    /// Context scope: full | segmented.
    #[arg(long)]
    scope: Option<String>,
    /// Repetitions over the full corpus.
    #[arg(long)]
    runs: Option<u32>,
    /// Directory of per-interview segment files (defaults to OUT/segments).
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Discard any existing run records and start fresh.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run-set JSONL produced by `madrs assess`.
    #[arg(long)]
    runs_file: PathBuf,
    /// Second run set for a full-vs-segmented comparison CSV.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeErrorsArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    runs_file: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Wald significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Exclude the age column from the design.
    #[arg(long)]
    no_age: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Optional JSON config mirroring the command-line flags.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    backend: Option<String>,
    model: Option<String>,
    mock_noise: Option<f64>,
    catalog: Option<PathBuf>,
    markers: Option<PathBuf>,
    seed: Option<u64>,
    variant: Option<String>,
    scope: Option<String>,
    runs: Option<u32>,
    alpha: Option<f64>,
    /// Remote transport overrides.
    llm: Option<LlmFileConfig>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LlmFileConfig {
    temperature: Option<f64>,
    max_output_tokens: Option<u32>,
    max_context_tokens: Option<u32>,
    request_timeout_ms: Option<u64>,
    max_retries: Option<u32>,
    max_in_flight: Option<usize>,
    retry_base_delay_ms: Option<u64>,
    api_key_env: Option<String>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

struct Resolved {
    corpus_path: PathBuf,
    out_dir: PathBuf,
    catalog: Catalog,
    catalog_path: Option<PathBuf>,
    markers: MarkerTable,
    seed: u64,
    backend_kind: String,
    model: String,
    mock_noise: f64,
    llm: LlmFileConfig,
}

impl Resolved {
    fn from(
        corpus: Option<PathBuf>,
        out: Option<PathBuf>,
        backend: &BackendArgs,
        file: &FileConfig,
    ) -> Result<Resolved> {
        let corpus_path = corpus
            .or_else(|| file.corpus.clone())
            .ok_or_else(|| anyhow!("--corpus is required (flag or config file)"))?;
        let out_dir = out
            .or_else(|| file.out.clone())
            .ok_or_else(|| anyhow!("--out is required (flag or config file)"))?;
        let catalog_path = backend.catalog.clone().or_else(|| file.catalog.clone());
        let catalog = match &catalog_path {
            Some(path) => Catalog::from_path(path)
                .with_context(|| format!("loading catalog {}", path.display()))?,
            None => Catalog::builtin(),
        };
        let markers = match backend.markers.clone().or_else(|| file.markers.clone()) {
            Some(path) => {
                let raw = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading marker table {}", path.display()))?;
                MarkerTable::from_json_str(&raw)
                    .with_context(|| format!("parsing marker table {}", path.display()))?
            }
            None => MarkerTable::builtin(),
        };
        Ok(Resolved {
            corpus_path,
            out_dir,
            catalog,
            catalog_path,
            markers,
            seed: backend.seed.or(file.seed).unwrap_or(0),
            backend_kind: backend
                .backend
                .clone()
                .or_else(|| file.backend.clone())
                .unwrap_or_else(|| "mock".to_string()),
            model: backend
                .model
                .clone()
                .or_else(|| file.model.clone())
                .unwrap_or_default(),
            mock_noise: backend.mock_noise.or(file.mock_noise).unwrap_or(0.0),
            llm: file.llm.clone().unwrap_or_default(),
        })
    }

    fn load_corpus(&self) -> Result<Corpus> {
        load_corpus(&self.corpus_path)
            .with_context(|| format!("loading corpus {}", self.corpus_path.display()))
    }

    fn gateway(&self, audit_path: &Path) -> Result<Gateway> {
        let audit = std::fs::File::create(audit_path)
            .with_context(|| format!("creating audit log {}", audit_path.display()))?;
        let gateway = if self.backend_kind == "mock" {
            Gateway::mock(
                Arc::new(OraclePolicy::new(
                    self.markers.clone(),
                    self.catalog.clone(),
                    self.mock_noise,
                )),
                self.seed,
            )
        } else {
            if self.model.is_empty() {
                bail!("--model is required with a remote backend");
            }
            let defaults = LlmConfig::default();
            Gateway::new(Backend::Remote(LlmConfig {
                endpoint_url: self.backend_kind.clone(),
                model_name: self.model.clone(),
                temperature: self.llm.temperature.unwrap_or(defaults.temperature),
                max_output_tokens: self
                    .llm
                    .max_output_tokens
                    .unwrap_or(defaults.max_output_tokens),
                max_context_tokens: self
                    .llm
                    .max_context_tokens
                    .unwrap_or(defaults.max_context_tokens),
                request_timeout_ms: self
                    .llm
                    .request_timeout_ms
                    .unwrap_or(defaults.request_timeout_ms),
                max_retries: self.llm.max_retries.unwrap_or(defaults.max_retries),
                max_in_flight: self.llm.max_in_flight.unwrap_or(defaults.max_in_flight),
                retry_base_delay_ms: self
                    .llm
                    .retry_base_delay_ms
                    .unwrap_or(defaults.retry_base_delay_ms),
                api_key_env: self.llm.api_key_env.clone().unwrap_or(defaults.api_key_env),
            }))
        };
        Ok(gateway.with_audit(Box::new(audit)))
    }

    /// Everything needed to re-run this stage bit-identically with the
    /// mock backend.
    fn manifest(&self, command: &str, extra: serde_json::Value) -> serde_json::Value {
        let config = serde_json::json!({
            "command": command,
            "corpus": self.corpus_path.display().to_string(),
            "backend": self.backend_kind,
            "model": self.model,
            "mock_noise": self.mock_noise,
            "seed": self.seed,
            "catalog_path": self.catalog_path.as_ref().map(|p| p.display().to_string()),
            "extra": extra,
        });
        let config_sha256 = sha256_hex(config.to_string().as_bytes());
        serde_json::json!({
            "code_version": env!("CARGO_PKG_VERSION"),
            "catalog_version": self.catalog.version(),
            "catalog_sha256": self.catalog.content_hash(),
            "config": config,
            "config_sha256": config_sha256,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut rendered = serde_json::to_string_pretty(value)?;
    rendered.push('\n');
    write_text(path, &rendered)
}

fn parse_variant(raw: Option<&str>) -> Result<PromptVariant> {
    PromptVariant::from_str(raw.unwrap_or("all")).map_err(|e| anyhow!(e))
}

fn parse_scope(raw: Option<&str>) -> Result<ContextScope> {
    ContextScope::from_str(raw.unwrap_or("full")).map_err(|e| anyhow!(e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Segment(args) => run_segment(args),
        Command::Assess(args) => run_assess(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::AnalyzeErrors(args) => run_analyze_errors(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run_synth(args: SynthArgs) -> Result<u8> {
    if args.out.exists() && !args.force {
        bail!(
            "{} already exists; pass --force to overwrite",
            args.out.display()
        );
    }
    let catalog = match &args.catalog {
        Some(path) => Catalog::from_path(path)?,
        None => Catalog::builtin(),
    };
    let markers = match &args.markers {
        Some(path) => MarkerTable::from_json_str(&std::fs::read_to_string(path)?)?,
        None => MarkerTable::builtin(),
    };
    let spec = SynthSpec {
        n_patients: args.patients,
        visits_per_patient: args.visits,
        seed: args.seed.unwrap_or(0),
        noise: 0.0,
        marker_table: markers,
    };
    let corpus = generate_corpus(&spec, &catalog);
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_corpus(&corpus, std::io::BufWriter::new(file))?;
    println!(
        "wrote {} interviews ({} patients x {} visits) to {}",
        corpus.len(),
        args.patients,
        args.visits,
        args.out.display()
    );
    Ok(0)
}

fn run_segment(args: SegmentArgs) -> Result<u8> {
    let file = load_file_config(args.backend.config.as_deref())?;
    let resolved = Resolved::from(args.corpus, args.out, &args.backend, &file)?;
    let corpus = resolved.load_corpus()?;

    let segments_dir = resolved.out_dir.join("segments");
    if segments_dir.exists() && std::fs::read_dir(&segments_dir)?.next().is_some() && !args.force {
        bail!(
            "{} already contains segment files; pass --force to re-segment",
            segments_dir.display()
        );
    }
    std::fs::create_dir_all(&segments_dir)?;
    let gateway = resolved.gateway(&resolved.out_dir.join("audit_segment.jsonl"))?;

    #[derive(Serialize)]
    struct SummaryEntry {
        interview_id: String,
        mapped_pairs: usize,
        unmapped_pairs: usize,
        unmapped_fraction: f64,
        warnings: usize,
        error: Option<String>,
    }
    let mut summary = Vec::new();
    let mut partial = false;
    for transcript in &corpus.transcripts {
        let interview_id = transcript.meta.interview_id.clone();
        match segment_interview(transcript, &gateway, &resolved.catalog) {
            Ok((segmented, warnings)) => {
                let mapped: usize = segmented.segments.values().map(Vec::len).sum();
                let unmapped = segmented.unmapped.len();
                write_json(
                    &segments_dir.join(format!("{interview_id}.json")),
                    &segmented,
                )?;
                if !warnings.is_empty() {
                    partial = true;
                }
                summary.push(SummaryEntry {
                    interview_id,
                    mapped_pairs: mapped,
                    unmapped_pairs: unmapped,
                    unmapped_fraction: segmented.unmapped_fraction(),
                    warnings: warnings.len(),
                    error: None,
                });
            }
            Err(e) => {
                partial = true;
                summary.push(SummaryEntry {
                    interview_id,
                    mapped_pairs: 0,
                    unmapped_pairs: 0,
                    unmapped_fraction: 1.0,
                    warnings: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    write_json(&resolved.out_dir.join("segment_summary.json"), &summary)?;
    write_json(
        &resolved.out_dir.join("manifest.json"),
        &resolved.manifest("segment", serde_json::json!({})),
    )?;
    println!(
        "segmented {} interviews into {}",
        corpus.len(),
        segments_dir.display()
    );
    Ok(u8::from(partial))
}

fn load_segments(dir: &Path, corpus: &Corpus) -> Result<BTreeMap<String, SegmentedInterview>> {
    let mut map = BTreeMap::new();
    for transcript in &corpus.transcripts {
        let id = &transcript.meta.interview_id;
        let path = dir.join(format!("{id}.json"));
        if !path.exists() {
            bail!(
                "no segment file for interview {id} at {} — run `madrs segment` first",
                path.display()
            );
        }
        let raw = std::fs::read_to_string(&path)?;
        let segmented: SegmentedInterview =
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        map.insert(id.clone(), segmented);
    }
    Ok(map)
}

fn run_assess(args: AssessArgs) -> Result<u8> {
    let file = load_file_config(args.backend.config.as_deref())?;
    let variant = parse_variant(args.variant.as_deref().or(file.variant.as_deref()))?;
    let scope = parse_scope(args.scope.as_deref().or(file.scope.as_deref()))?;
    let repetitions = args.runs.or(file.runs).unwrap_or(5);
    if repetitions == 0 {
        bail!("--runs must be at least 1");
    }
    let resolved = Resolved::from(args.corpus, args.out, &args.backend, &file)?;
    let corpus = resolved.load_corpus()?;

    let segments = match scope {
        ContextScope::Segmented => {
            let dir = args
                .segments
                .unwrap_or_else(|| resolved.out_dir.join("segments"));
            Some(load_segments(&dir, &corpus)?)
        }
        ContextScope::FullTranscript => None,
    };

    std::fs::create_dir_all(&resolved.out_dir)?;
    let runs_path = resolved
        .out_dir
        .join(format!("runs_{variant}_{scope}.jsonl"));
    if args.force && runs_path.exists() {
        std::fs::remove_file(&runs_path)?;
    }
    let mut store = RunStore::open(&runs_path, variant, scope)?;
    let already = store.len();
    let gateway = resolved.gateway(&resolved.out_dir.join("audit_assess.jsonl"))?;

    let job = AssessJob {
        corpus: &corpus,
        segments: segments.as_ref(),
        catalog: &resolved.catalog,
        variant,
        scope,
        repetitions,
    };
    let runset = assess_corpus(&job, &gateway, &mut store)?;

    let failures: usize = runset
        .runs
        .iter()
        .flat_map(|run| run.items.values())
        .filter(|outcome| matches!(outcome, ItemOutcome::Failed { .. }))
        .count();
    write_json(
        &resolved.out_dir.join("manifest.json"),
        &resolved.manifest(
            "assess",
            serde_json::json!({
                "variant": variant.flag_name(),
                "scope": scope.flag_name(),
                "runs": repetitions,
            }),
        ),
    )?;
    println!(
        "assessed {} interviews x {} runs -> {} ({} records, {} resumed, {} failures)",
        corpus.len(),
        repetitions,
        runs_path.display(),
        store.len(),
        already,
        failures
    );
    Ok(u8::from(failures > 0))
}

fn run_evaluate(args: EvaluateArgs) -> Result<u8> {
    let file = load_file_config(args.config.as_deref())?;
    let corpus_path = args
        .corpus
        .or_else(|| file.corpus.clone())
        .ok_or_else(|| anyhow!("--corpus is required"))?;
    let out_dir = args
        .out
        .or_else(|| file.out.clone())
        .ok_or_else(|| anyhow!("--out is required"))?;
    let corpus = load_corpus(&corpus_path)?;
    let runset = load_runset(&args.runs_file)
        .with_context(|| format!("loading run set {}", args.runs_file.display()))?;
    let report = evaluate_runset(&runset, &corpus)?;

    std::fs::create_dir_all(&out_dir)?;
    let stem = format!("report_{}_{}", report.variant, report.scope);
    write_json(&out_dir.join(format!("{stem}.json")), &report)?;
    write_text(
        &out_dir.join(format!("{stem}.txt")),
        &metrics_table_text(&report),
    )?;
    write_text(&out_dir.join(format!("{stem}.csv")), &metrics_csv(&report))?;

    if let Some(other_path) = args.compare {
        let other_runset = load_runset(&other_path)
            .with_context(|| format!("loading run set {}", other_path.display()))?;
        let other_report = evaluate_runset(&other_runset, &corpus)?;
        let (full, segmented) = match (report.scope, other_report.scope) {
            (ContextScope::FullTranscript, ContextScope::Segmented) => (&report, &other_report),
            (ContextScope::Segmented, ContextScope::FullTranscript) => (&other_report, &report),
            (a, b) => bail!("comparison needs one full and one segmented run set, got {a} and {b}"),
        };
        write_text(
            &out_dir.join("comparison_full_vs_segmented.csv"),
            &comparison_csv(full, segmented),
        )?;
    }
    println!("{}", metrics_table_text(&report));
    Ok(0)
}

fn run_analyze_errors(args: AnalyzeErrorsArgs) -> Result<u8> {
    let file = load_file_config(args.config.as_deref())?;
    let corpus_path = args
        .corpus
        .or_else(|| file.corpus.clone())
        .ok_or_else(|| anyhow!("--corpus is required"))?;
    let out_dir = args
        .out
        .or_else(|| file.out.clone())
        .ok_or_else(|| anyhow!("--out is required"))?;
    let alpha = args.alpha.or(file.alpha).unwrap_or(0.05);
    if !(0.0..=1.0).contains(&alpha) {
        bail!("--alpha must be in [0, 1]");
    }
    let corpus = load_corpus(&corpus_path)?;
    let runset = load_runset(&args.runs_file)
        .with_context(|| format!("loading run set {}", args.runs_file.display()))?;
    let analysis = analyze_errors(&runset, &corpus, alpha, !args.no_age)?;

    std::fs::create_dir_all(&out_dir)?;
    write_json(&out_dir.join("error_analysis.json"), &analysis)?;
    write_text(
        &out_dir.join("error_analysis.txt"),
        &error_table_text(&analysis),
    )?;
    println!("{}", error_table_text(&analysis));

    let troubled = analysis
        .models
        .values()
        .filter(|outcome| match outcome {
            ErrorModelOutcome::Fitted { fit, .. } => !fit.converged,
            ErrorModelOutcome::Failed { .. } => true,
        })
        .count();
    Ok(u8::from(troubled > 0))
}
