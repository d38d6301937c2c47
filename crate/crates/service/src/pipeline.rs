//! parse → strip_banners → rewrite → render → preprocess → embed → insert → assign.
//!
//! Everything up to the embedding is pure and runs without locks. Insertion
//! and cluster assignment happen under one write lock in arrival order, and
//! state is persisted to `index.pvec` / `clusters.pclu` in the data dir.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use pisco_core::cluster::{
    self, ClusterError, ClusterId, ClusterRecord, ClusterStore, Label, LifespanRow, SizeHistogram, Verdict,
};
use pisco_core::embed::{build_embedder, Embedder};
use pisco_core::imgproc::preprocess;
use pisco_core::mailparse::{self, rewrite_email, strip_banners, BannerPatternSet, EmailRecord};
use pisco_core::process::ProcessLimiter;
use pisco_core::render::{build_renderer, Renderer};
use pisco_core::vindex::{IndexError, VectorIndex};
use pisco_core::EmbeddingVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};

pub const INDEX_FILE: &str = "index.pvec";
pub const CLUSTER_FILE: &str = "clusters.pclu";
pub const DEAD_LETTER_FILE: &str = "dead_letter.jsonl";

/// A failure tagged with the pipeline stage that produced it; displays as
/// `stage/Kind: message`.
#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize)]
#[error("{stage}/{kind}: {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub kind: &'static str,
    pub message: String,
    pub email_id: Option<String>,
}

impl StageError {
    fn new(stage: &'static str, kind: &'static str, message: impl ToString) -> Self {
        Self {
            stage,
            kind,
            message: message.to_string(),
            email_id: None,
        }
    }

    fn with_id(mut self, id: &str) -> Self {
        self.email_id = Some(id.to_string());
        self
    }

    /// `stage/Kind`.
    pub fn tag(&self) -> String {
        format!("{}/{}", self.stage, self.kind)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot open state: {0}")]
    State(String),
    #[error(transparent)]
    Stage(#[from] StageError),
}

/// Output of the lock-free stages for one email.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub email_id: String,
    pub received_at: i64,
    pub source: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub email_id: String,
    pub cluster_id: ClusterId,
    pub score: f64,
    /// Computed before this email was added.
    pub verdict: Verdict,
}

#[derive(Debug)]
struct State {
    index: VectorIndex,
    clusters: ClusterStore,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    banners: BannerPatternSet,
    renderer: Box<dyn Renderer>,
    embedder: Box<dyn Embedder>,
    state: RwLock<State>,
    data_dir: PathBuf,
    dead_letter: Mutex<()>,
}

fn index_err(e: IndexError) -> StageError {
    StageError::new("index", e.kind(), e)
}

fn cluster_err(e: ClusterError) -> StageError {
    StageError::new("cluster", e.kind(), e)
}

impl Pipeline {
    /// Validates `cfg`, builds the renderer and embedder, and loads any state
    /// already in the data dir.
    pub fn open(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        cfg.check_paths()?;
        let limiter = ProcessLimiter::new(cfg.service.max_processes);
        let banners = cfg.mailparse.pattern_set()?;
        let renderer = build_renderer(&cfg.render, limiter.clone())
            .map_err(|e| ConfigError::Invalid(format!("render: {e}")))?;
        let embedder =
            build_embedder(&cfg.embed, limiter).map_err(|e| ConfigError::Invalid(format!("embed: {e}")))?;
        let data_dir = cfg.service.data_dir.clone();
        std::fs::create_dir_all(&data_dir).map_err(|e| {
            ConfigError::Invalid(format!("service.data_dir {}: {e}", data_dir.display()))
        })?;
        let state = load_state(&cfg, &data_dir)?;
        Ok(Self {
            cfg,
            banners,
            renderer,
            embedder,
            state: RwLock::new(state),
            data_dir,
            dead_letter: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn tau(&self) -> f64 {
        self.cfg.cluster.tau
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Parses the message and returns the html that is handed to the renderer,
    /// after banner stripping and the rewrite round trip.
    pub fn render_input(&self, raw: &[u8], source: &str, fallback_time: i64) -> Result<(EmailRecord, String), StageError> {
        let rec = mailparse::parse_email(raw, source, fallback_time)
            .map_err(|e| StageError::new("parse", e.kind(), e))?;
        let html = mailparse::select_render_part(&rec)
            .map_err(|e| StageError::new("parse", e.kind(), e).with_id(&rec.id))?;
        let (stripped, removed) = strip_banners(&html, &self.banners);
        if removed == 0 {
            return Ok((rec, html));
        }
        let rewritten =
            rewrite_email(&rec, &stripped).map_err(|e| StageError::new("rewrite", e.kind(), e).with_id(&rec.id))?;
        let again = mailparse::parse_email(&rewritten, source, fallback_time)
            .map_err(|e| StageError::new("rewrite", e.kind(), e).with_id(&rec.id))?;
        let html = mailparse::select_render_part(&again)
            .map_err(|e| StageError::new("rewrite", e.kind(), e).with_id(&rec.id))?;
        Ok((rec, html))
    }

    /// All stages up to and including the embedding. Touches no state.
    pub fn prepare(&self, raw: &[u8], source: &str, fallback_time: i64) -> Result<Prepared, StageError> {
        let (rec, html) = self.render_input(raw, source, fallback_time)?;
        let id = rec.id.clone();
        let shot = self
            .renderer
            .render(&html, &id)
            .map_err(|e| StageError::new("render", e.kind(), e).with_id(&id))?;
        let clean = preprocess(&shot, &self.cfg.imgproc)
            .map_err(|e| StageError::new("preprocess", e.kind(), e).with_id(&id))?;
        let vector = self
            .embedder
            .embed(&clean)
            .map_err(|e| StageError::new("embed", e.kind(), e).with_id(&id))?;
        Ok(Prepared {
            email_id: id,
            received_at: rec.received_at,
            source: source.to_string(),
            vector,
        })
    }

    /// Inserts and assigns a prepared email in memory. Either both happen or
    /// neither does.
    fn commit_locked(&self, state: &mut State, p: &Prepared) -> Result<IngestOutcome, StageError> {
        let tau = self.tau();
        let tag = |e: StageError| e.with_id(&p.email_id);
        state.index.check_insert(&p.email_id, &p.vector).map_err(|e| tag(index_err(e)))?;
        if state.clusters.cluster_of(&p.email_id).is_some() {
            return Err(tag(cluster_err(ClusterError::DuplicateId(p.email_id.clone()))));
        }
        let verdict = state.clusters.verdict(&p.vector, tau).map_err(|e| tag(cluster_err(e)))?;
        state.index.insert(&p.email_id, &p.vector).map_err(|e| tag(index_err(e)))?;
        let (cluster_id, score) = state
            .clusters
            .assign(&p.email_id, &p.vector, p.received_at, tau)
            .expect("assignment pre-checked");
        Ok(IngestOutcome {
            email_id: p.email_id.clone(),
            cluster_id,
            score,
            verdict,
        })
    }

    fn persist_locked(&self, state: &mut State) -> Result<(), StageError> {
        let res = state
            .index
            .save(&self.data_dir.join(INDEX_FILE))
            .map_err(index_err)
            .and_then(|_| {
                state
                    .clusters
                    .save(&self.data_dir.join(CLUSTER_FILE))
                    .map_err(cluster_err)
            });
        if let Err(e) = res {
            // fall back to the last state that made it to disk
            if let Ok(disk) = load_state(&self.cfg, &self.data_dir) {
                *state = disk;
            }
            return Err(StageError { stage: "persist", ..e });
        }
        Ok(())
    }

    /// Full pipeline for one email, persisted before returning. Failures are
    /// written to the dead-letter log and leave state unchanged.
    pub fn ingest_email(&self, raw: &[u8], source: &str, fallback_time: i64) -> Result<IngestOutcome, StageError> {
        let res = self.prepare(raw, source, fallback_time).and_then(|p| {
            let mut state = self.write();
            let out = self.commit_locked(&mut state, &p)?;
            self.persist_locked(&mut state)?;
            Ok(out)
        });
        if let Err(e) = &res {
            self.record_failure(e, source);
        }
        res
    }

    /// Batch ingest: the pure stages run on `service.workers` threads, commits
    /// happen in input order, and state is persisted once at the end.
    pub fn ingest_batch(&self, emails: &[(Vec<u8>, String, i64)]) -> Vec<Result<IngestOutcome, StageError>> {
        let workers = self.cfg.service.workers.max(1);
        let chunk = emails.len().div_ceil(workers).max(1);
        let prepared: Vec<Result<Prepared, StageError>> = std::thread::scope(|s| {
            let handles: Vec<_> = emails
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|(raw, source, t)| self.prepare(raw, source, *t))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("ingest worker panicked"))
                .collect()
        });
        let mut results = Vec::with_capacity(prepared.len());
        {
            let mut state = self.write();
            for p in prepared {
                results.push(p.and_then(|p| self.commit_locked(&mut state, &p)));
            }
            if results.iter().any(|r| r.is_ok()) {
                if let Err(e) = self.persist_locked(&mut state) {
                    results = results
                        .into_iter()
                        .map(|r| r.and_then(|_| Err(e.clone())))
                        .collect();
                }
            }
        }
        for (r, (_, source, _)) in results.iter().zip(emails) {
            if let Err(e) = r {
                self.record_failure(e, source);
            }
        }
        results
    }

    /// Verdict only; never changes state.
    pub fn score_email(&self, raw: &[u8]) -> Result<Verdict, StageError> {
        let p = self.prepare(raw, "score", 0)?;
        self.score_vector(&p.vector)
    }

    pub fn score_vector(&self, v: &EmbeddingVector) -> Result<Verdict, StageError> {
        self.read().clusters.verdict(v, self.tau()).map_err(cluster_err)
    }

    pub fn label_cluster(&self, id: ClusterId, label: Label) -> Result<(), StageError> {
        let mut state = self.write();
        state.clusters.label_cluster(id, label).map_err(cluster_err)?;
        self.persist_locked(&mut state)
    }

    pub fn email_count(&self) -> usize {
        self.read().index.len()
    }

    pub fn cluster_count(&self) -> usize {
        self.read().clusters.len()
    }

    pub fn clusters(&self) -> Vec<ClusterRecord> {
        self.read().clusters.clusters().to_vec()
    }

    pub fn cluster(&self, id: ClusterId) -> Option<ClusterRecord> {
        self.read().clusters.get(id).cloned()
    }

    pub fn cluster_of(&self, email_id: &str) -> Option<ClusterId> {
        self.read().clusters.cluster_of(email_id)
    }

    pub fn size_histogram(&self) -> SizeHistogram {
        self.read().clusters.size_histogram()
    }

    pub fn lifespan_stats(&self) -> Vec<LifespanRow> {
        self.read().clusters.lifespan_stats()
    }

    pub fn stats_csv(&self, kind: StatsKind) -> String {
        match kind {
            StatsKind::Histogram => cluster::histogram_csv(&self.size_histogram()),
            StatsKind::Lifespan => cluster::lifespan_csv(&self.lifespan_stats()),
        }
    }

    pub fn export_stats(&self, kind: StatsKind, path: &Path) -> Result<(), StageError> {
        std::fs::write(path, self.stats_csv(kind)).map_err(|e| StageError::new("export", "IoFailure", e))
    }

    fn record_failure(&self, e: &StageError, source: &str) {
        let line = serde_json::json!({
            "time": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            "stage": e.stage,
            "error": e.tag(),
            "message": e.message,
            "email_id": e.email_id,
            "source": source,
        });
        let _guard = self.dead_letter.lock().unwrap_or_else(|p| p.into_inner());
        let res = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.data_dir.join(DEAD_LETTER_FILE))
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(err) = res {
            tracing::error!("dead-letter write failed: {err}");
        }
        tracing::warn!(source, "{e}");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StatsKind {
    Histogram,
    Lifespan,
}

fn load_state(cfg: &PipelineConfig, dir: &Path) -> Result<State, PipelineError> {
    let meta = cfg.index_meta();
    let (ip, cp) = (dir.join(INDEX_FILE), dir.join(CLUSTER_FILE));
    let state = match (ip.exists(), cp.exists()) {
        (false, false) => State {
            index: VectorIndex::new(meta.clone()).map_err(|e| PipelineError::State(e.to_string()))?,
            clusters: ClusterStore::new(meta.dim, meta.backend_id.clone()),
        },
        (true, true) => State {
            index: VectorIndex::load(&ip).map_err(|e| PipelineError::State(format!("{}: {e}", ip.display())))?,
            clusters: ClusterStore::load(&cp).map_err(|e| PipelineError::State(format!("{}: {e}", cp.display())))?,
        },
        _ => {
            return Err(PipelineError::State(format!(
                "{} and {} must both exist or both be absent",
                ip.display(),
                cp.display()
            )))
        }
    };
    if state.index.meta() != &meta {
        return Err(PipelineError::State(format!(
            "{} was built with {:?}, config asks for {:?}",
            ip.display(),
            state.index.meta(),
            meta
        )));
    }
    if state.clusters.dim() != meta.dim || state.clusters.backend_id() != meta.backend_id {
        return Err(PipelineError::State("cluster state does not match the embedding backend".into()));
    }
    let consistent = state.index.len() == state.clusters.email_count()
        && state.index.ids().iter().all(|id| state.clusters.cluster_of(id).is_some());
    if !consistent {
        return Err(PipelineError::State("index and cluster state disagree on the email set".into()));
    }
    Ok(state)
}
