//! Screenshot embeddings and the cosine similarity used everywhere downstream.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::process::{self, ProcessError, ProcessLimiter};
use crate::screenshot::Screenshot;

/// Backend id of [`embed_reference`].
pub const REFERENCE_BACKEND: &str = "ref-grid-v1";
/// Grid side of the reference embedder.
pub const REFERENCE_GRID: usize = 16;
pub const REFERENCE_DIM: usize = REFERENCE_GRID * REFERENCE_GRID;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("backend mismatch: {0:?} vs {1:?}")]
    BackendMismatch(String, String),
    #[error("vector norm {0} is neither 0 nor 1")]
    NotUnit(f64),
    #[error("embedding backend timed out after {0} s")]
    BackendTimeout(u64),
    #[error("embedding backend failed: {0}")]
    BackendFailed(String),
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

impl EmbedError {
    pub fn kind(&self) -> &'static str {
        match self {
            EmbedError::DimMismatch { .. } => "DimMismatch",
            EmbedError::BackendMismatch(..) => "BackendMismatch",
            EmbedError::NotUnit(_) => "NotUnit",
            EmbedError::BackendTimeout(_) => "BackendTimeout",
            EmbedError::BackendFailed(_) => "BackendFailed",
            EmbedError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

/// A unit-norm (or all-zero) vector tagged with the backend that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    backend_id: String,
}

impl EmbeddingVector {
    /// Wraps values that are already unit norm or all zero.
    pub fn new(values: Vec<f32>, backend_id: impl Into<String>) -> Result<Self, EmbedError> {
        let norm = l2_norm(&values);
        if norm != 0.0 && (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::NotUnit(norm));
        }
        Ok(Self {
            values,
            backend_id: backend_id.into(),
        })
    }

    /// L2-normalizes `raw`; a zero (or non-finite) input gives the zero vector.
    pub fn normalized(raw: &[f64], backend_id: impl Into<String>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let values = if norm > 0.0 && norm.is_finite() {
            raw.iter().map(|v| (v / norm) as f32).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self {
            values,
            backend_id: backend_id.into(),
        }
    }

    pub fn zeros(dim: usize, backend_id: impl Into<String>) -> Self {
        Self {
            values: vec![0.0; dim],
            backend_id: backend_id.into(),
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

/// Dot product accumulated in f64.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] as f64 * b[j] as f64;
        acc[1] += a[j + 1] as f64 * b[j + 1] as f64;
        acc[2] += a[j + 2] as f64 * b[j + 2] as f64;
        acc[3] += a[j + 3] as f64 * b[j + 3] as f64;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] as f64 * b[j] as f64;
    }
    s
}

/// Cosine on raw slices with the zero-vector conventions: both zero gives 1,
/// exactly one zero gives 0. Result clamped to [-1, 1].
#[inline]
pub fn cosine_values(a: &[f32], a_zero: bool, b: &[f32], b_zero: bool) -> f64 {
    match (a_zero, b_zero) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => dot(a, b).clamp(-1.0, 1.0),
    }
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    if u.backend_id != v.backend_id {
        return Err(EmbedError::BackendMismatch(
            u.backend_id.clone(),
            v.backend_id.clone(),
        ));
    }
    Ok(cosine_values(&u.values, u.is_zero(), &v.values, v.is_zero()))
}

/// Integer luminance, round(0.299 R + 0.587 G + 0.114 B).
#[inline]
pub fn luminance(rgb: [u8; 3]) -> u32 {
    (299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32 + 500) / 1000
}

/// Area-averaged luminance over a `grid` x `grid` partition of the image.
///
/// Pixel `p` spans `[p*grid, (p+1)*grid)` in scaled units and cell `c` spans
/// `[c*n, (c+1)*n)`, so all overlaps are integers and the per-cell sums are
/// exact. Works for images smaller than the grid.
pub fn luminance_grid(img: &Screenshot, grid: usize) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let g = grid as u64;
    // per-axis list of (cell, weight) pairs for each pixel coordinate
    let spans = |n: usize| -> Vec<Vec<(usize, u64)>> {
        (0..n)
            .map(|p| {
                let (lo, hi) = (p as u64 * g, (p as u64 + 1) * g);
                let first = (lo / n as u64) as usize;
                let last = ((hi - 1) / n as u64) as usize;
                (first..=last)
                    .map(|c| {
                        let (clo, chi) = (c as u64 * n as u64, (c as u64 + 1) * n as u64);
                        (c, hi.min(chi) - lo.max(clo))
                    })
                    .collect()
            })
            .collect()
    };
    let xs = spans(w);
    let ys = spans(h);

    let mut row_sums = vec![0u64; grid];
    let mut sums = vec![0u64; grid * grid];
    for (y, ycells) in ys.iter().enumerate() {
        row_sums.iter_mut().for_each(|s| *s = 0);
        for (x, xcells) in xs.iter().enumerate() {
            let l = luminance(img.pixel(x as u32, y as u32)) as u64;
            for &(cx, wx) in xcells {
                row_sums[cx] += l * wx;
            }
        }
        for &(cy, wy) in ycells {
            for cx in 0..grid {
                sums[cy * grid + cx] += row_sums[cx] * wy;
            }
        }
    }
    // each cell covers (w*g/g) x (h*g/g) scaled units: area w*h
    let area = (w as u64 * h as u64) as f64;
    sums.into_iter().map(|s| s as f64 / area).collect()
}

/// Deterministic layout embedding: 16x16 area-averaged luminance grid, mean
/// subtracted, L2-normalized. Constant images map to the zero vector.
pub fn embed_reference(img: &Screenshot) -> EmbeddingVector {
    let cells = luminance_grid(img, REFERENCE_GRID);
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    let centered: Vec<f64> = cells.iter().map(|c| c - mean).collect();
    EmbeddingVector::normalized(&centered, REFERENCE_BACKEND)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Reference,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedBackendConfig {
    pub kind: EmbedKind,
    pub dim: usize,
    /// Recorded with every vector; defaults to `ref-grid-v1` or `external-<dim>`.
    pub backend_id: Option<String>,
    /// Must contain `{input_png}` and `{output_vec}` for external backends.
    pub command_template: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EmbedBackendConfig {
    fn default() -> Self {
        Self {
            kind: EmbedKind::Reference,
            dim: REFERENCE_DIM,
            backend_id: None,
            command_template: None,
            timeout_secs: 60,
        }
    }
}

impl EmbedBackendConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 8 {
            return Err(EmbedError::InvalidConfig(format!("dim must be >= 8, got {}", self.dim)));
        }
        match self.kind {
            EmbedKind::Reference => {
                if self.dim != REFERENCE_DIM {
                    return Err(EmbedError::InvalidConfig(format!(
                        "reference embedder has dim {REFERENCE_DIM}, config says {}",
                        self.dim
                    )));
                }
            }
            EmbedKind::External => {
                let t = self.command_template.as_deref().ok_or_else(|| {
                    EmbedError::InvalidConfig("external backend requires command_template".into())
                })?;
                process::check_placeholders(t, &["input_png", "output_vec"])
                    .map_err(EmbedError::InvalidConfig)?;
            }
        }
        Ok(())
    }

    pub fn resolved_backend_id(&self) -> String {
        match (&self.backend_id, self.kind) {
            (Some(id), _) => id.clone(),
            (None, EmbedKind::Reference) => REFERENCE_BACKEND.to_string(),
            (None, EmbedKind::External) => format!("external-{}", self.dim),
        }
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, img: &Screenshot) -> Result<EmbeddingVector, EmbedError>;
    fn dim(&self) -> usize;
    fn backend_id(&self) -> &str;
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceEmbedder;

impl Embedder for ReferenceEmbedder {
    fn embed(&self, img: &Screenshot) -> Result<EmbeddingVector, EmbedError> {
        Ok(embed_reference(img))
    }

    fn dim(&self) -> usize {
        REFERENCE_DIM
    }

    fn backend_id(&self) -> &str {
        REFERENCE_BACKEND
    }
}

/// Subprocess backend: PNG in, one decimal float per line out.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    template: String,
    dim: usize,
    backend_id: String,
    timeout: Duration,
    limiter: ProcessLimiter,
}

impl ExternalEmbedder {
    pub fn new(cfg: &EmbedBackendConfig, limiter: ProcessLimiter) -> Result<Self, EmbedError> {
        let cfg = EmbedBackendConfig {
            kind: EmbedKind::External,
            ..cfg.clone()
        };
        cfg.validate()?;
        Ok(Self {
            template: cfg.command_template.clone().unwrap_or_default(),
            dim: cfg.dim,
            backend_id: cfg.resolved_backend_id(),
            timeout: Duration::from_secs(cfg.timeout_secs),
            limiter,
        })
    }
}

/// Parses the backend output: one float per non-empty line.
pub fn parse_vector_output(text: &str) -> Result<Vec<f64>, EmbedError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| EmbedError::BackendFailed(format!("line {}: not a finite number: {l:?}", i + 1)))
        })
        .collect()
}

impl Embedder for ExternalEmbedder {
    fn embed(&self, img: &Screenshot) -> Result<EmbeddingVector, EmbedError> {
        let io = |e: std::io::Error| EmbedError::BackendFailed(e.to_string());
        let work = tempfile::tempdir().map_err(io)?;
        let input = work.path().join("screenshot.png");
        let output = work.path().join("vector.txt");
        let png = img
            .to_png()
            .map_err(|e| EmbedError::BackendFailed(e.to_string()))?;
        std::fs::write(&input, png).map_err(io)?;
        run_backend(&self.template, &input, &output, work.path(), self.timeout, &self.limiter)?;
        let text = std::fs::read_to_string(&output)
            .map_err(|e| EmbedError::BackendFailed(format!("missing output vector: {e}")))?;
        let raw = parse_vector_output(&text)?;
        if raw.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                got: raw.len(),
            });
        }
        Ok(EmbeddingVector::normalized(&raw, self.backend_id.clone()))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> &str {
        &self.backend_id
    }
}

fn run_backend(
    template: &str,
    input: &Path,
    output: &Path,
    workdir: &Path,
    timeout: Duration,
    limiter: &ProcessLimiter,
) -> Result<(), EmbedError> {
    let argv = process::expand_template(
        template,
        &[
            ("input_png", &input.to_string_lossy()),
            ("output_vec", &output.to_string_lossy()),
        ],
    )
    .map_err(|e| EmbedError::InvalidConfig(e.to_string()))?;
    process::run(&argv, workdir, timeout, limiter).map_err(|e| match e {
        ProcessError::Timeout(d) => EmbedError::BackendTimeout(d.as_secs()),
        other => EmbedError::BackendFailed(other.to_string()),
    })
}

/// One-shot external embedding.
pub fn embed_external(img: &Screenshot, cfg: &EmbedBackendConfig) -> Result<EmbeddingVector, EmbedError> {
    ExternalEmbedder::new(cfg, ProcessLimiter::default())?.embed(img)
}

pub fn build_embedder(cfg: &EmbedBackendConfig, limiter: ProcessLimiter) -> Result<Box<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        EmbedKind::Reference => Box::new(ReferenceEmbedder),
        EmbedKind::External => Box::new(ExternalEmbedder::new(cfg, limiter)?),
    })
}
