#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pisco_core::render::FixtureRenderer;
use pisco_core::synthcorpus::{generate, CampaignSpec, SynthEmail};
use pisco_core::Screenshot;
use pisco_service::{Pipeline, PipelineConfig};

pub struct Env {
    pub dir: tempfile::TempDir,
}

impl Env {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("fixtures")).unwrap();
        Self { dir }
    }

    pub fn fixtures(&self) -> PathBuf {
        self.dir.path().join("fixtures")
    }

    pub fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn config(&self) -> PipelineConfig {
        config_for(&self.fixtures(), &self.data())
    }

    pub fn open(&self) -> Pipeline {
        Pipeline::open(self.config()).unwrap()
    }

    /// Stores `img` as the render fixture for `raw`.
    pub fn add_fixture(&self, raw: &[u8], img: &Screenshot) {
        let p = self.open();
        let (_, html) = p.render_input(raw, "fixture", 0).unwrap();
        FixtureRenderer::new(self.fixtures()).store(&html, img).unwrap();
    }
}

pub fn config_for(fixtures: &Path, data: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.render.fixture_dir = Some(fixtures.to_path_buf());
    cfg.service.data_dir = data.to_path_buf();
    cfg.service.workers = 2;
    cfg
}

/// A small html email. `day` picks the Date header (April 2024).
pub fn email(subject: &str, body: &str, day: u32) -> Vec<u8> {
    format!(
        "From: promo@example.com\r\n\
To: user@example.org\r\n\
Subject: {subject}\r\n\
Date: {day:02} Apr 2024 09:30:00 +0000\r\n\
MIME-Version: 1.0\r\n\
Content-Type: text/html; charset=utf-8\r\n\
\r\n\
<html><body><div class=\"external-sender-banner\">CAUTION: external sender</div>\
<h1>{subject}</h1><p>{body}</p></body></html>\r\n"
    )
    .into_bytes()
}

/// Kit screenshots: `variants` perturbed renders for each of `kits` layouts.
pub fn kit_images(seed: u64, kits: usize, variants: usize) -> Vec<SynthEmail> {
    let mut corpus = generate(&CampaignSpec {
        seed,
        n_kits: kits,
        variants_per_kit: variants,
        ..Default::default()
    })
    .unwrap();
    corpus.sort_by(|a, b| a.email_id.cmp(&b.email_id));
    corpus
}

/// Sorted `(relative path, bytes)` for every file under `dir`.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}
