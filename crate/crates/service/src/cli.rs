//! `pisco` command line. Exit codes: 0 ok, 1 usage, 2 config, 3 runtime.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use pisco_core::cluster::{ClusterId, ClusterStore, Label};
use pisco_core::embed::build_embedder;
use pisco_core::imgproc::preprocess;
use pisco_core::mailparse::split_mbox;
use pisco_core::process::ProcessLimiter;
use pisco_core::synthcorpus::{self, CampaignSpec};

use crate::config::{ConfigError, PipelineConfig};
use crate::pipeline::{Pipeline, PipelineError, StatsKind, DEAD_LETTER_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pisco", version, about = "Cluster emails by how they look")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set cluster.tau=0.9`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set service.data_dir=...`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a directory of messages (one per file), an mbox, or a single message.
    Ingest { path: PathBuf },
    /// Print the verdict for one message without storing it.
    Score { file: PathBuf },
    /// Label a cluster.
    Label {
        cluster: ClusterId,
        #[arg(value_parser = ["spam", "clean"])]
        label: String,
    },
    /// Export cluster statistics as CSV.
    Stats {
        #[arg(long, value_enum)]
        kind: StatsKind,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic kit corpus (PNGs plus manifest.csv).
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a synthetic corpus and report pairwise precision/recall.
    Eval {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "{f}");
            match f {
                Failure::Config(_) => EXIT_CONFIG,
                Failure::Runtime(_) => EXIT_RUNTIME,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(d) = &cli.data_dir {
        overrides.push(format!("service.data_dir={}", toml_string(&d.to_string_lossy())));
    }
    Ok(PipelineConfig::load(cli.config.as_deref(), &overrides)?)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn load_spec(path: Option<&Path>) -> Result<CampaignSpec, Failure> {
    let Some(path) = path else {
        return Ok(CampaignSpec::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let spec: CampaignSpec = toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(spec)
}

fn mtime(path: &Path) -> i64 {
    std::fs::metadata(path)
        .and_then(|m| m.modified())
        .ok()
        .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_secs() as i64)
}

/// Messages under `path` as `(raw, source, fallback_time)`, in a stable order.
pub fn collect_messages(path: &Path) -> std::io::Result<Vec<(Vec<u8>, String, i64)>> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let t = mtime(&f);
            out.push((std::fs::read(&f)?, f.display().to_string(), t));
        }
    } else {
        let data = std::fs::read(path)?;
        let t = mtime(path);
        if data.starts_with(b"From ") {
            for (i, msg) in split_mbox(&data).into_iter().enumerate() {
                out.push((msg, format!("{}#{}", path.display(), i + 1), t));
            }
        } else {
            out.push((data, path.display().to_string(), t));
        }
    }
    Ok(out)
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { path } => {
            let p = Pipeline::open(cfg)?;
            let msgs = collect_messages(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let results = p.ingest_batch(&msgs);
            let mut failed = 0;
            for r in &results {
                match r {
                    Ok(o) => writeln!(out, "{}", serde_json::to_string(o).expect("serializable")).map_err(runtime)?,
                    Err(e) => {
                        failed += 1;
                        writeln!(err, "{e}").map_err(runtime)?;
                    }
                }
            }
            writeln!(
                err,
                "ingested {} of {} messages ({} failed); {} emails in {} clusters",
                results.len() - failed,
                results.len(),
                failed,
                p.email_count(),
                p.cluster_count()
            )
            .map_err(runtime)?;
            if failed > 0 {
                return Err(runtime(format!("{failed} messages failed, see {}", p.data_dir().join(DEAD_LETTER_FILE).display())));
            }
            Ok(())
        }
        Command::Score { file } => {
            let p = Pipeline::open(cfg)?;
            let raw = std::fs::read(&file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
            let v = p.score_email(&raw).map_err(runtime)?;
            writeln!(out, "{}", serde_json::to_string(&v).expect("serializable")).map_err(runtime)
        }
        Command::Label { cluster, label } => {
            let p = Pipeline::open(cfg)?;
            let label: Label = label.parse().map_err(runtime)?;
            p.label_cluster(cluster, label).map_err(runtime)?;
            writeln!(out, "cluster {cluster} labeled {}", label.as_str()).map_err(runtime)
        }
        Command::Stats { kind, out: path } => {
            let p = Pipeline::open(cfg)?;
            match path {
                Some(path) => p.export_stats(kind, &path).map_err(runtime),
                None => out.write_all(p.stats_csv(kind).as_bytes()).map_err(runtime),
            }
        }
        Command::Synth { spec, out: dir } => {
            let spec = load_spec(spec.as_deref())?;
            let corpus = synthcorpus::generate(&spec).map_err(runtime)?;
            synthcorpus::write_corpus(&corpus, &dir).map_err(runtime)?;
            writeln!(out, "wrote {} images to {}", corpus.len(), dir.display()).map_err(runtime)
        }
        Command::Eval { spec } => {
            let spec = load_spec(spec.as_deref())?;
            let report = evaluate(&cfg, &spec)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("serializable")).map_err(runtime)
        }
        Command::Serve { listen } => {
            let mut cfg = cfg;
            if let Some(l) = listen {
                cfg.service.listen = l;
            }
            let addr = cfg.listen_addr()?;
            let p = Arc::new(Pipeline::open(cfg)?);
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(crate::http::serve(p, addr)).map_err(runtime)
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub emails: usize,
    pub kits: usize,
    pub clusters: usize,
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub predicted_pairs: u64,
    pub truth_pairs: u64,
    pub agreeing_pairs: u64,
    pub seconds: f64,
}

/// Generates the corpus, runs preprocess + embed + leader clustering with the
/// configured settings, and scores the result against the kit labels.
pub fn evaluate(cfg: &PipelineConfig, spec: &CampaignSpec) -> Result<EvalReport, Failure> {
    let start = std::time::Instant::now();
    cfg.imgproc.validate().map_err(|e| Failure::Config(format!("imgproc: {e}")))?;
    let embedder = build_embedder(&cfg.embed, ProcessLimiter::new(cfg.service.max_processes))
        .map_err(|e| Failure::Config(format!("embed: {e}")))?;
    let corpus = synthcorpus::generate(spec).map_err(runtime)?;
    let workers = cfg.service.workers.max(1);
    let chunk = corpus.len().div_ceil(workers).max(1);
    let embedder = &embedder;
    let vectors = std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|e| {
                            let img = preprocess(&e.image, &cfg.imgproc).map_err(runtime)?;
                            embedder.embed(&img).map_err(runtime)
                        })
                        .collect::<Result<Vec<_>, Failure>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect::<Result<Vec<_>, Failure>>()
    })?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();
    let mut store = ClusterStore::new(embedder.dim(), embedder.backend_id());
    let mut truth = HashMap::new();
    let mut predicted = HashMap::new();
    for (e, v) in corpus.iter().zip(&vectors) {
        let (c, _) = store
            .assign(&e.email_id, v, e.received_at, cfg.cluster.tau)
            .map_err(runtime)?;
        truth.insert(e.email_id.clone(), e.kit_id);
        predicted.insert(e.email_id.clone(), c);
    }
    let score = synthcorpus::score_clustering(&truth, &predicted).map_err(runtime)?;
    Ok(EvalReport {
        emails: corpus.len(),
        kits: spec.n_kits,
        clusters: store.len(),
        tau: cfg.cluster.tau,
        precision: score.precision,
        recall: score.recall,
        predicted_pairs: score.predicted_pairs,
        truth_pairs: score.truth_pairs,
        agreeing_pairs: score.agreeing_pairs,
        seconds: start.elapsed().as_secs_f64(),
    })
}
