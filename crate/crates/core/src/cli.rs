//! Command implementations behind the `protocheck` binary.
//!
//! Exit codes: 0 on full completion, 2 when some items failed, 1 on
//! configuration or input errors. Every failure is also written to the
//! run log (line-delimited JSON) under the output directory.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::embed::provider_from_config;
use crate::context::{CachedEmbedder, ContextConfig, ContextMode, EmbeddingConfig, EmptyFallback, ProviderKind};
use crate::corpus::{load_session, Session};
use crate::evaluate::ablation::AblationInputs;
use crate::evaluate::{
    build_report, evaluation_records, load_ratings, normalize_priorities, render_report_table,
    run_ablation, ModelReport, NormalizationMode,
};
use crate::llm_client::{Backend, BackendConfig, BackendKind, HttpBackend, MockBackend, MockScript};
use crate::pipeline::{run_pipeline, PipelineOptions, PredictionRecord};
use crate::prompting::TemplateSet;
use crate::schema_parse::DEFAULT_FUZZY_THRESHOLD;

pub const ENV_BASE_URL: &str = "PROTOCHECK_BASE_URL";
pub const ENV_API_KEY: &str = "PROTOCHECK_API_KEY";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "protocheck", version, about = "Judge checklist compliance in transcribed sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Judge every evaluation item and write predictions.
    Run(RunArgs),
    /// Score predictions against ground truth in the manifests.
    Score(ScoreArgs),
    /// Run the pipeline once per context-selection condition.
    Ablate(AblateArgs),
    /// Check that the configured backend is reachable and serves the model.
    Health(CommonArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// Session manifest (repeatable).
    #[arg(long = "manifest", required = false)]
    pub manifests: Vec<PathBuf>,
    /// JSON config file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["mock", "http"])]
    pub backend: Option<String>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub delta_pre_s: Option<f64>,
    #[arg(long)]
    pub delta_post_s: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = ["auto_false", "top_k"])]
    pub empty_fallback: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, value_parser = ["hashing", "remote"])]
    pub embedding_provider: Option<String>,
    #[arg(long)]
    pub embedding_model: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub embedding_base_url: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    #[arg(long)]
    pub request_timeout_s: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub backoff_base_ms: Option<u64>,
    #[arg(long)]
    pub fuzzy_threshold: Option<f64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub condition: Option<String>,
    /// Skip items already present in the predictions file.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = ["scaled_to_count", "proportional"])]
    pub normalization: Option<String>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated conditions; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    pub conditions: Vec<String>,
    #[arg(long)]
    pub ratings: Option<PathBuf>,
}

/// Config file contents. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub manifests: Vec<PathBuf>,
    pub context: ContextConfig,
    pub embedding: EmbeddingConfig,
    pub backend: BackendConfig,
    pub templates: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub condition: Option<ContextMode>,
    pub fuzzy_threshold: Option<f64>,
    pub normalization: NormalizationMode,
}

/// Effective configuration after file, environment and flag merging.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub manifests: Vec<PathBuf>,
    pub context: ContextConfig,
    pub embedding: EmbeddingConfig,
    pub backend: BackendConfig,
    pub templates: PathBuf,
    pub mock_script: Option<PathBuf>,
    pub out: PathBuf,
    pub condition: ContextMode,
    pub fuzzy_threshold: f64,
    pub normalization: NormalizationMode,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

pub fn load_config_file(path: &Path) -> Result<ConfigFile, String> {
    let body = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg: ConfigFile =
        serde_json::from_str(&body).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    cfg.manifests = cfg.manifests.into_iter().map(|p| resolve(base, p)).collect();
    cfg.templates = cfg.templates.map(|p| resolve(base, p));
    cfg.mock_script = cfg.mock_script.map(|p| resolve(base, p));
    Ok(cfg)
}

impl RunConfig {
    /// Merges defaults < config file < environment < flags, then checks
    /// that every referenced path exists.
    pub fn build(common: &CommonArgs, condition: Option<&str>) -> Result<Self, String> {
        let file = match &common.config {
            Some(p) => load_config_file(p)?,
            None => ConfigFile::default(),
        };
        let mut context = file.context;
        let mut embedding = file.embedding;
        let mut backend = file.backend;

        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.is_empty() {
                backend.base_url = Some(url);
            }
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            if !key.is_empty() {
                backend.api_key = Some(key);
            }
        }

        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(context.delta_pre_s, common.delta_pre_s);
        set!(context.delta_post_s, common.delta_post_s);
        set!(context.tau, common.tau);
        set!(context.top_k, common.top_k);
        if let Some(f) = &common.empty_fallback {
            context.empty_fallback = match f.as_str() {
                "top_k" => EmptyFallback::TopK,
                _ => EmptyFallback::AutoFalse,
            };
        }
        if let Some(p) = &common.embedding_provider {
            embedding.provider = match p.as_str() {
                "remote" => ProviderKind::Remote,
                _ => ProviderKind::Hashing,
            };
        }
        set!(embedding.model, common.embedding_model);
        set!(embedding.dim, common.embedding_dim);
        if common.embedding_base_url.is_some() {
            embedding.base_url = common.embedding_base_url.clone();
        }
        if let Some(b) = &common.backend {
            backend.kind = if b == "http" { BackendKind::Http } else { BackendKind::Mock };
        }
        if common.base_url.is_some() {
            backend.base_url = common.base_url.clone();
        }
        set!(backend.model_id, common.model);
        set!(backend.temperature, common.temperature);
        set!(backend.max_output_tokens, common.max_output_tokens);
        set!(backend.request_timeout_s, common.request_timeout_s);
        set!(backend.max_retries, common.max_retries);
        set!(backend.max_in_flight, common.max_in_flight);
        set!(backend.backoff_base_ms, common.backoff_base_ms);
        if embedding.provider == ProviderKind::Remote && embedding.base_url.is_none() {
            embedding.base_url = backend.base_url.clone();
        }

        let condition = match condition {
            Some(c) => ContextMode::parse(c).ok_or_else(|| format!("unknown condition {c:?}"))?,
            None => file.condition.unwrap_or(ContextMode::TemporalThenSemantic),
        };
        let manifests = if common.manifests.is_empty() {
            file.manifests
        } else {
            common.manifests.clone()
        };
        let templates = common
            .templates
            .clone()
            .or(file.templates)
            .ok_or("no prompt template fixture given (--templates)")?;
        let mock_script = common.mock_script.clone().or(file.mock_script);
        let out = common.out.clone().ok_or("no output directory given (--out)")?;
        let fuzzy_threshold = common
            .fuzzy_threshold
            .or(file.fuzzy_threshold)
            .unwrap_or(DEFAULT_FUZZY_THRESHOLD);

        let cfg = Self {
            manifests,
            context,
            embedding,
            backend,
            templates,
            mock_script,
            out,
            condition,
            fuzzy_threshold,
            normalization: file.normalization,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.manifests.is_empty() {
            return Err("no session manifests given (--manifest)".into());
        }
        for p in self.manifests.iter().chain([&self.templates]).chain(self.mock_script.as_ref()) {
            if !p.exists() {
                return Err(format!("path does not exist: {}", p.display()));
            }
        }
        if self.backend.kind == BackendKind::Mock && self.mock_script.is_none() {
            return Err("mock backend needs --mock-script".into());
        }
        if !(0.0..=1.0).contains(&self.fuzzy_threshold) {
            return Err("fuzzy_threshold must be within [0, 1]".into());
        }
        if self.embedding.dim == 0 {
            return Err("embedding.dim must be positive".into());
        }
        self.context.validate().map_err(|e| e.to_string())?;
        self.backend.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn make_backend(&self) -> Result<Box<dyn Backend>, String> {
        match self.backend.kind {
            BackendKind::Mock => {
                let path = self.mock_script.as_ref().ok_or("mock backend needs a script")?;
                Ok(Box::new(MockBackend::new(MockScript::load(path)?)))
            }
            BackendKind::Http => Ok(Box::new(
                HttpBackend::new(self.backend.clone()).map_err(|e| e.to_string())?,
            )),
        }
    }

    pub fn make_embedder(&self) -> Result<CachedEmbedder, String> {
        let inner = provider_from_config(
            &self.embedding,
            self.backend.api_key.clone(),
            self.backend.request_timeout(),
        )
        .map_err(|e| e.to_string())?;
        Ok(CachedEmbedder::new(inner))
    }
}

struct Prepared {
    sessions: Vec<Session>,
    templates: TemplateSet,
    embedder: CachedEmbedder,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, String> {
    let sessions = load_sessions(&cfg.manifests)?;
    let templates = TemplateSet::load(&cfg.templates).map_err(|e| e.to_string())?;
    for s in &sessions {
        for item in s.evaluation_items() {
            templates.get(&item.event_id).map_err(|e| e.to_string())?;
        }
    }
    Ok(Prepared {
        sessions,
        templates,
        embedder: cfg.make_embedder()?,
    })
}

pub fn load_sessions(manifests: &[PathBuf]) -> Result<Vec<Session>, String> {
    let mut seen = BTreeSet::new();
    let mut sessions = Vec::new();
    for m in manifests {
        let s = load_session(m).map_err(|e| format!("{}: {e}", m.display()))?;
        if !seen.insert(s.session_id.clone()) {
            return Err(format!("duplicate session id {}", s.session_id));
        }
        sessions.push(s);
    }
    Ok(sessions)
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or(Duration::ZERO)
        .as_secs_f64()
}

/// Line-delimited JSON run log. The header is the only place a wall-clock
/// timestamp appears.
struct RunLog {
    lines: Vec<serde_json::Value>,
    path: PathBuf,
}

impl RunLog {
    fn new(out: &Path, command: &str, config: serde_json::Value) -> Self {
        Self {
            lines: vec![json!({
                "event": "start",
                "command": command,
                "started_at_unix": unix_now(),
                "config": config,
            })],
            path: out.join(RUN_LOG_FILE),
        }
    }

    fn push(&mut self, v: serde_json::Value) {
        self.lines.push(v);
    }

    fn write(&self) {
        if let Some(parent) = self.path.parent() {
            let _ = fs::create_dir_all(parent);
        }
        let mut body = String::new();
        for l in &self.lines {
            body.push_str(&l.to_string());
            body.push('\n');
        }
        if let Err(e) = fs::write(&self.path, body) {
            eprintln!("cannot write run log {}: {e}", self.path.display());
        }
    }
}

fn config_error(out: Option<&Path>, command: &str, detail: &str) -> i32 {
    eprintln!("error: {detail}");
    if let Some(out) = out {
        let mut log = RunLog::new(out, command, serde_json::Value::Null);
        log.push(json!({"event": "config_error", "detail": detail}));
        log.write();
    }
    EXIT_CONFIG
}

pub fn serialize_record(rec: &PredictionRecord) -> String {
    let mut line = serde_json::to_string(rec).expect("prediction serializes");
    line.push('\n');
    line
}

/// Reads a predictions file. A trailing line without a newline is an
/// interrupted append and is ignored.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, String> {
    let body = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let complete = match body.rfind('\n') {
        Some(i) => &body[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))
        })
        .collect()
}

/// Writes records sorted by `(session_id, item_id)` via a temp file and
/// rename.
fn write_sorted(path: &Path, records: &mut [PredictionRecord]) -> std::io::Result<()> {
    records.sort_by(|a, b| (&a.session_id, &a.item_id).cmp(&(&b.session_id, &b.item_id)));
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = File::create(&tmp)?;
        for r in records.iter() {
            f.write_all(serialize_record(r).as_bytes())?;
        }
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn truncate_partial_tail(path: &Path) -> std::io::Result<()> {
    let body = fs::read(path)?;
    let keep = body.iter().rposition(|&b| b == b'\n').map(|i| i + 1).unwrap_or(0);
    if keep != body.len() {
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> i32 {
    let out = args.common.out.clone();
    let cfg = match RunConfig::build(&args.common, args.condition.as_deref()) {
        Ok(c) => c,
        Err(e) => return config_error(out.as_deref(), "run", &e),
    };
    let mut log = RunLog::new(&cfg.out, "run", serde_json::to_value(&cfg).unwrap_or_default());
    let fail = |log: &mut RunLog, detail: String| {
        eprintln!("error: {detail}");
        log.push(json!({"event": "config_error", "detail": detail}));
        log.write();
        EXIT_CONFIG
    };
    let prepared = match prepare(&cfg) {
        Ok(p) => p,
        Err(e) => return fail(&mut log, e),
    };
    let backend = match cfg.make_backend() {
        Ok(b) => b,
        Err(e) => return fail(&mut log, e),
    };
    let health = backend.healthcheck();
    log.push(json!({"event": "healthcheck", "report": health}));
    if !health.healthy {
        return fail(&mut log, format!("backend healthcheck failed: {}", health.describe()));
    }
    if let Err(e) = fs::create_dir_all(&cfg.out) {
        return fail(&mut log, format!("{}: {e}", cfg.out.display()));
    }

    let pred_path = cfg.out.join(PREDICTIONS_FILE);
    let mut existing = Vec::new();
    if args.resume && pred_path.exists() {
        if let Err(e) = truncate_partial_tail(&pred_path) {
            return fail(&mut log, format!("{}: {e}", pred_path.display()));
        }
        existing = match read_predictions(&pred_path) {
            Ok(r) => r,
            Err(e) => return fail(&mut log, e),
        };
        log.push(json!({"event": "resume", "skipped": existing.len()}));
    }
    let skip: BTreeSet<(String, String)> = existing.iter().map(|r| r.key()).collect();
    let mut file = match OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&pred_path)
    {
        Ok(f) => f,
        Err(e) => return fail(&mut log, format!("{}: {e}", pred_path.display())),
    };

    let opts = PipelineOptions {
        context: &cfg.context,
        mode: cfg.condition,
        templates: &prepared.templates,
        embedder: &prepared.embedder,
        fuzzy_threshold: cfg.fuzzy_threshold,
        workers: cfg.backend.max_in_flight,
    };
    let mut write_error = None;
    let fresh = run_pipeline(&prepared.sessions, &opts, backend.as_ref(), &skip, |rec| {
        // one write per record keeps appends whole
        if write_error.is_none() {
            if let Err(e) = file.write_all(serialize_record(rec).as_bytes()).and_then(|_| file.flush()) {
                write_error = Some(e.to_string());
            }
        }
    });
    drop(file);
    if let Some(e) = write_error {
        return fail(&mut log, format!("writing predictions: {e}"));
    }

    let failed = fresh.iter().filter(|r| r.status.is_failure()).count();
    for r in &fresh {
        log.push(json!({
            "event": if r.status.is_failure() { "item_failed" } else { "item" },
            "session_id": r.session_id,
            "item_id": r.item_id,
            "status": r.status,
            "repair_applied": r.repair_applied,
            "fallback_used": r.fallback_used,
            "reasked": r.reasked,
            "rejection": r.rejection,
            "error": r.error,
        }));
    }
    let mut all = existing;
    all.extend(fresh);
    let prior_failed = all.iter().filter(|r| r.status.is_failure()).count() - failed;
    if let Err(e) = write_sorted(&pred_path, &mut all) {
        return fail(&mut log, format!("finalizing predictions: {e}"));
    }
    let code = if failed + prior_failed > 0 { EXIT_PARTIAL } else { EXIT_OK };
    log.push(json!({"event": "end", "items": all.len(), "failed": failed + prior_failed, "exit_code": code}));
    log.write();
    code
}

pub fn score_predictions(
    predictions: &[PredictionRecord],
    sessions: &[Session],
    ratings: Option<&[crate::evaluate::RatingRecord]>,
    normalization: NormalizationMode,
) -> Result<Vec<ModelReport>, String> {
    let mut records = evaluation_records(predictions, sessions).map_err(|e| e.to_string())?;
    normalize_priorities(&mut records, normalization).map_err(|e| e.to_string())?;
    build_report(&records, ratings).map_err(|e| e.to_string())
}

fn write_report(dir: &Path, reports: &[ModelReport]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&json!({ "models": reports })).expect("report serializes");
    fs::write(dir.join(REPORT_JSON), json + "\n")?;
    fs::write(dir.join(REPORT_TXT), render_report_table(reports))
}

pub fn cmd_score(args: &ScoreArgs) -> i32 {
    let fail = |e: String| config_error(Some(&args.out), "score", &e);
    let sessions = match load_sessions(&args.manifests) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let predictions = match read_predictions(&args.predictions) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let ratings = match &args.ratings {
        Some(p) => match load_ratings(p) {
            Ok(r) => Some(r),
            Err(e) => return fail(e.to_string()),
        },
        None => None,
    };
    let normalization = match args.normalization.as_deref() {
        Some("proportional") => NormalizationMode::Proportional,
        _ => NormalizationMode::ScaledToCount,
    };
    let reports = match score_predictions(&predictions, &sessions, ratings.as_deref(), normalization) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Err(e) = write_report(&args.out, &reports) {
        return fail(e.to_string());
    }
    print!("{}", render_report_table(&reports));
    EXIT_OK
}

pub fn cmd_ablate(args: &AblateArgs) -> i32 {
    let out = args.common.out.clone();
    let cfg = match RunConfig::build(&args.common, None) {
        Ok(c) => c,
        Err(e) => return config_error(out.as_deref(), "ablate", &e),
    };
    let conditions: Vec<ContextMode> = if args.conditions.is_empty() {
        ContextMode::ALL.to_vec()
    } else {
        let mut v = Vec::new();
        for c in &args.conditions {
            match ContextMode::parse(c.trim()) {
                Some(m) => v.push(m),
                None => return config_error(Some(&cfg.out), "ablate", &format!("unknown condition {c:?}")),
            }
        }
        v
    };
    let mut log = RunLog::new(&cfg.out, "ablate", serde_json::to_value(&cfg).unwrap_or_default());
    let prepared = match prepare(&cfg) {
        Ok(p) => p,
        Err(e) => {
            log.push(json!({"event": "config_error", "detail": e}));
            log.write();
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let ratings = match &args.ratings {
        Some(p) => match load_ratings(p) {
            Ok(r) => Some(r),
            Err(e) => return config_error(Some(&cfg.out), "ablate", &e.to_string()),
        },
        None => None,
    };
    let inputs = AblationInputs {
        sessions: &prepared.sessions,
        base: PipelineOptions {
            context: &cfg.context,
            mode: cfg.condition,
            templates: &prepared.templates,
            embedder: &prepared.embedder,
            fuzzy_threshold: cfg.fuzzy_threshold,
            workers: cfg.backend.max_in_flight,
        },
        normalization: cfg.normalization,
        ratings: ratings.as_deref(),
    };
    let table = run_ablation(&inputs, &conditions, &|| cfg.make_backend());

    let mut code = EXIT_OK;
    for row in &table.rows {
        let dir = cfg.out.join(row.condition.as_str());
        if !row.ok {
            code = EXIT_PARTIAL;
            log.push(json!({"event": "condition_failed", "condition": row.condition, "error": row.error}));
            continue;
        }
        if row.failed_items > 0 {
            code = EXIT_PARTIAL;
        }
        let io = (|| -> std::io::Result<()> {
            fs::create_dir_all(&dir)?;
            let mut preds = row.predictions.clone();
            write_sorted(&dir.join(PREDICTIONS_FILE), &mut preds)?;
            if let Some(rep) = &row.report {
                write_report(&dir, rep)?;
            }
            Ok(())
        })();
        if let Err(e) = io {
            log.push(json!({"event": "write_error", "condition": row.condition, "error": e.to_string()}));
            code = EXIT_PARTIAL;
        }
        log.push(json!({"event": "condition", "condition": row.condition, "items": row.items, "failed": row.failed_items}));
    }
    let summary = serde_json::to_string_pretty(&table).expect("summary serializes");
    let written = fs::create_dir_all(&cfg.out)
        .and_then(|_| fs::write(cfg.out.join("ablation_summary.json"), summary + "\n"))
        .and_then(|_| fs::write(cfg.out.join("ablation_summary.txt"), table.render()));
    if let Err(e) = written {
        eprintln!("error: {e}");
        code = EXIT_PARTIAL;
    }
    print!("{}", table.render());
    log.push(json!({"event": "end", "exit_code": code}));
    log.write();
    code
}

pub fn cmd_health(args: &CommonArgs) -> i32 {
    let mut common = args.clone();
    // health only needs backend settings
    if common.out.is_none() {
        common.out = Some(std::env::temp_dir());
    }
    let mut backend = match &common.config {
        Some(p) => match load_config_file(p) {
            Ok(f) => f.backend,
            Err(e) => return config_error(None, "health", &e),
        },
        None => BackendConfig::default(),
    };
    if let Some(b) = &common.backend {
        backend.kind = if b == "http" { BackendKind::Http } else { BackendKind::Mock };
    }
    if let Ok(url) = std::env::var(ENV_BASE_URL) {
        if !url.is_empty() {
            backend.base_url = Some(url);
        }
    }
    if common.base_url.is_some() {
        backend.base_url = common.base_url.clone();
    }
    if let Some(m) = &common.model {
        backend.model_id = m.clone();
    }
    backend.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
    let report = match backend.kind {
        BackendKind::Mock => MockBackend::new(MockScript::new()).healthcheck(),
        BackendKind::Http => match HttpBackend::new(backend) {
            Ok(b) => b.healthcheck(),
            Err(e) => return config_error(None, "health", &e.to_string()),
        },
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.healthy {
        EXIT_OK
    } else {
        EXIT_CONFIG
    }
}

pub fn dispatch(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Score(a) => cmd_score(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Health(a) => cmd_health(a),
    }
}
