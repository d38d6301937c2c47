//! HTML to screenshot through a pluggable renderer.
//!
//! `External` runs a command template such as
//! `my-renderer --width {width} {input_html} {output_png}`; the command must
//! exit 0 after writing a PNG. `Fixture` looks the PNG up by the SHA-256 of
//! the exact html string, which keeps tests hermetic.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::sha256_hex;
use crate::process::{self, ProcessError, ProcessLimiter};
use crate::screenshot::Screenshot;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("renderer timed out after {0} s")]
    RendererTimeout(u64),
    #[error("renderer failed ({status}): {stderr}")]
    RendererFailed { status: String, stderr: String },
    #[error("renderer output is not a decodable PNG: {0}")]
    BadImage(String),
    #[error("no render fixture at {0}")]
    FixtureMissing(PathBuf),
    #[error("invalid renderer config: {0}")]
    InvalidConfig(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

impl RenderError {
    pub fn kind(&self) -> &'static str {
        match self {
            RenderError::RendererTimeout(_) => "RendererTimeout",
            RenderError::RendererFailed { .. } => "RendererFailed",
            RenderError::BadImage(_) => "BadImage",
            RenderError::FixtureMissing(_) => "FixtureMissing",
            RenderError::InvalidConfig(_) => "InvalidConfig",
            RenderError::Io(_) => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    External,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub mode: RenderMode,
    /// Must contain `{input_html}`, `{output_png}` and `{width}` in external mode.
    pub command_template: Option<String>,
    pub viewport_width: u32,
    pub timeout_secs: u64,
    pub fixture_dir: Option<PathBuf>,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            mode: RenderMode::Fixture,
            command_template: None,
            viewport_width: 1024,
            timeout_secs: 30,
            fixture_dir: None,
        }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        match self.mode {
            RenderMode::External => {
                let t = self.command_template.as_deref().ok_or_else(|| {
                    RenderError::InvalidConfig("external mode requires command_template".into())
                })?;
                process::check_placeholders(t, &["input_html", "output_png", "width"])
                    .map_err(RenderError::InvalidConfig)?;
                if self.viewport_width == 0 {
                    return Err(RenderError::InvalidConfig("viewport_width must be positive".into()));
                }
                Ok(())
            }
            RenderMode::Fixture => {
                if self.fixture_dir.is_none() {
                    return Err(RenderError::InvalidConfig("fixture mode requires fixture_dir".into()));
                }
                Ok(())
            }
        }
    }
}

pub trait Renderer: Send + Sync {
    fn render(&self, html: &str, email_id: &str) -> Result<Screenshot, RenderError>;
}

/// File name a fixture renderer expects for `html`.
pub fn fixture_name(html: &str) -> String {
    format!("{}.png", sha256_hex(html.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct FixtureRenderer {
    dir: PathBuf,
}

impl FixtureRenderer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stores `img` as the fixture for `html`.
    pub fn store(&self, html: &str, img: &Screenshot) -> Result<PathBuf, RenderError> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(fixture_name(html));
        let png = img.to_png().map_err(|e| RenderError::BadImage(e.to_string()))?;
        std::fs::write(&path, png)?;
        Ok(path)
    }
}

impl Renderer for FixtureRenderer {
    fn render(&self, html: &str, email_id: &str) -> Result<Screenshot, RenderError> {
        let path = self.dir.join(fixture_name(html));
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(RenderError::FixtureMissing(path))
            }
            Err(e) => return Err(e.into()),
        };
        Screenshot::from_png(&bytes, email_id).map_err(|e| RenderError::BadImage(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct ExternalRenderer {
    template: String,
    width: u32,
    timeout: Duration,
    limiter: ProcessLimiter,
}

impl ExternalRenderer {
    pub fn new(cfg: &RendererConfig, limiter: ProcessLimiter) -> Result<Self, RenderError> {
        let cfg = RendererConfig {
            mode: RenderMode::External,
            ..cfg.clone()
        };
        cfg.validate()?;
        Ok(Self {
            template: cfg.command_template.unwrap_or_default(),
            width: cfg.viewport_width,
            timeout: Duration::from_secs(cfg.timeout_secs),
            limiter,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Renderer for ExternalRenderer {
    fn render(&self, html: &str, email_id: &str) -> Result<Screenshot, RenderError> {
        let work = tempfile::tempdir()?;
        let input = work.path().join("email.html");
        let output = work.path().join("screenshot.png");
        std::fs::write(&input, html)?;
        let width = self.width.to_string();
        let argv = process::expand_template(
            &self.template,
            &[
                ("input_html", &input.to_string_lossy()),
                ("output_png", &output.to_string_lossy()),
                ("width", &width),
            ],
        )
        .map_err(|e| RenderError::InvalidConfig(e.to_string()))?;
        process::run(&argv, work.path(), self.timeout, &self.limiter).map_err(|e| match e {
            ProcessError::Timeout(d) => RenderError::RendererTimeout(d.as_secs()),
            ProcessError::Failed { status, stderr } => RenderError::RendererFailed { status, stderr },
            ProcessError::Spawn(err) => RenderError::RendererFailed {
                status: "spawn failure".into(),
                stderr: err.to_string(),
            },
            ProcessError::BadTemplate(m) => RenderError::InvalidConfig(m),
            ProcessError::Io(err) => RenderError::Io(err),
        })?;
        let bytes = std::fs::read(&output)
            .map_err(|e| RenderError::BadImage(format!("missing output PNG: {e}")))?;
        Screenshot::from_png(&bytes, email_id).map_err(|e| RenderError::BadImage(e.to_string()))
    }
}

/// Builds the renderer described by `cfg`.
pub fn build_renderer(cfg: &RendererConfig, limiter: ProcessLimiter) -> Result<Box<dyn Renderer>, RenderError> {
    cfg.validate()?;
    Ok(match cfg.mode {
        RenderMode::External => Box::new(ExternalRenderer::new(cfg, limiter)?),
        RenderMode::Fixture => Box::new(FixtureRenderer::new(
            cfg.fixture_dir.clone().expect("validated"),
        )),
    })
}

/// One-shot render with a fresh renderer.
pub fn render(html: &str, email_id: &str, cfg: &RendererConfig) -> Result<Screenshot, RenderError> {
    build_renderer(cfg, ProcessLimiter::default())?.render(html, email_id)
}
