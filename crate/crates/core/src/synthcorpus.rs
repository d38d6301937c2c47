//! Synthetic "email kit" corpora: procedurally drawn layouts plus perturbed
//! variants, with pairwise scoring of a clustering against the kit labels.
//!
//! Every kit has a full-width header band and footer band, so whitespace
//! trimming keeps the whole canvas and the layout grid is stable across
//! variants.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::screenshot::Screenshot;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid campaign spec: {0}")]
    InvalidSpec(String),
    #[error("truth and prediction cover different emails: {0}")]
    IdMismatch(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl SynthError {
    pub fn kind(&self) -> &'static str {
        match self {
            SynthError::InvalidSpec(_) => "InvalidSpec",
            SynthError::IdMismatch(_) => "IdMismatch",
            SynthError::Io(_) => "IoFailure",
            SynthError::Image(_) => "BadImage",
        }
    }
}

/// Re-samples the glyph noise of every text block and moves blocks by up to
/// `shift_px`; ink density varies by up to `density_jitter` (relative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextNoise {
    pub shift_px: u32,
    pub density_jitter: f64,
}

impl Default for TextNoise {
    fn default() -> Self {
        Self {
            shift_px: 3,
            density_jitter: 0.05,
        }
    }
}

/// With `probability`, the logo patch gets a different color and mark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogoSwap {
    pub probability: f64,
}

impl Default for LogoSwap {
    fn default() -> Self {
        Self { probability: 0.5 }
    }
}

/// Rotates the hue of the header, footer and logo by up to `degrees`, keeping
/// their luma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HueJitter {
    pub degrees: f64,
}

impl Default for HueJitter {
    fn default() -> Self {
        Self { degrees: 20.0 }
    }
}

/// With `probability`, the footer text is rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FooterChange {
    pub probability: f64,
}

impl Default for FooterChange {
    fn default() -> Self {
        Self { probability: 0.5 }
    }
}

/// Enabled perturbations; a missing table disables that perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbations {
    pub text_noise: Option<TextNoise>,
    pub logo_swap: Option<LogoSwap>,
    pub hue_jitter: Option<HueJitter>,
    pub footer_change: Option<FooterChange>,
}

impl Default for Perturbations {
    fn default() -> Self {
        Self {
            text_noise: Some(TextNoise::default()),
            logo_swap: Some(LogoSwap::default()),
            hue_jitter: Some(HueJitter::default()),
            footer_change: Some(FooterChange::default()),
        }
    }
}

impl Perturbations {
    pub fn none() -> Self {
        Self {
            text_noise: None,
            logo_swap: None,
            hue_jitter: None,
            footer_change: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSpec {
    pub seed: u64,
    pub n_kits: usize,
    pub variants_per_kit: usize,
    /// `(width, height)` in pixels.
    pub canvas: (u32, u32),
    pub perturbations: Perturbations,
    /// `(start, end)` Unix seconds, inclusive.
    pub time_window: (i64, i64),
}

impl Default for CampaignSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_kits: 50,
            variants_per_kit: 20,
            canvas: (640, 800),
            perturbations: Perturbations::default(),
            // April 2024
            time_window: (1_711_929_600, 1_714_521_599),
        }
    }
}

impl CampaignSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_kits == 0 || self.variants_per_kit == 0 {
            return bad("n_kits and variants_per_kit must be at least 1".into());
        }
        if self.canvas.0 < 160 || self.canvas.1 < 200 {
            return bad(format!("canvas {:?} is smaller than 160x200", self.canvas));
        }
        if self.time_window.0 > self.time_window.1 {
            return bad("time_window start is after its end".into());
        }
        let p = &self.perturbations;
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SynthError::InvalidSpec(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        if let Some(t) = &p.text_noise {
            prob("text_noise.density_jitter", t.density_jitter)?;
        }
        if let Some(l) = &p.logo_swap {
            prob("logo_swap.probability", l.probability)?;
        }
        if let Some(f) = &p.footer_change {
            prob("footer_change.probability", f.probability)?;
        }
        if let Some(h) = &p.hue_jitter {
            if !(0.0..=180.0).contains(&h.degrees) {
                return bad(format!("hue_jitter.degrees must be in [0, 180], got {}", h.degrees));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEmail {
    pub email_id: String,
    pub kit_id: usize,
    pub received_at: i64,
    pub image: Screenshot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

#[derive(Debug, Clone)]
struct TextBlock {
    rect: Rect,
    ink: [u8; 3],
    density: f64,
    line_h: i64,
}

#[derive(Debug, Clone)]
struct Kit {
    bg: [u8; 3],
    header_h: i64,
    header: [u8; 3],
    footer_h: i64,
    footer: [u8; 3],
    footer_ink: [u8; 3],
    logo: Rect,
    logo_color: [u8; 3],
    logo_mark: u8,
    /// Solid rectangles drawn under the text, in order.
    panels: Vec<(Rect, [u8; 3])>,
    blocks: Vec<TextBlock>,
    footer_seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn rng_for(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ splitmix64(a)) ^ b))
}

fn random_color(rng: &mut ChaCha8Rng, lum_lo: f64, lum_hi: f64) -> [u8; 3] {
    loop {
        let c = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
        let l = luma(c);
        if (lum_lo..=lum_hi).contains(&l) {
            return c;
        }
    }
}

fn luma(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

fn make_kit(rng: &mut ChaCha8Rng, w: i64, h: i64) -> Kit {
    let header_h = rng.gen_range(h / 20..=h / 7);
    let footer_h = rng.gen_range(h / 25..=h / 8);
    let mut panels = Vec::new();
    // content area inside the body, depending on the layout style
    let body_y = header_h;
    let body_h = h - header_h - footer_h;
    let content = match rng.gen_range(0..3) {
        0 => Rect {
            x: 0,
            y: body_y,
            w,
            h: body_h,
        },
        1 => {
            let sw = rng.gen_range(w / 6..=w / 3);
            let left = rng.gen_bool(0.5);
            let sx = if left { 0 } else { w - sw };
            panels.push((
                Rect {
                    x: sx,
                    y: body_y,
                    w: sw,
                    h: body_h,
                },
                random_color(rng, 30.0, 220.0),
            ));
            Rect {
                x: if left { sw } else { 0 },
                y: body_y,
                w: w - sw,
                h: body_h,
            }
        }
        _ => {
            let cw = rng.gen_range(w / 2..=w * 5 / 6);
            let ch = rng.gen_range(body_h / 2..=body_h * 9 / 10);
            let card = Rect {
                x: rng.gen_range(0..=w - cw),
                y: body_y + rng.gen_range(0..=body_h - ch),
                w: cw,
                h: ch,
            };
            panels.push((
                Rect {
                    x: 0,
                    y: body_y,
                    w,
                    h: body_h,
                },
                random_color(rng, 60.0, 215.0),
            ));
            panels.push((card, [255, 255, 255]));
            card
        }
    };
    let side = rng.gen_range(content.w / 8..=content.w / 4);
    let logo_h = side * rng.gen_range(4..=8) / 8;
    let logo = Rect {
        x: content.x + rng.gen_range(0..=content.w - side),
        y: content.y + rng.gen_range(0..=(content.h / 3).min(content.h - logo_h)),
        w: side,
        h: logo_h,
    };
    if rng.gen_bool(0.6) {
        let hw = rng.gen_range(content.w / 3..=content.w);
        let hh = rng.gen_range(content.h / 8..=content.h / 3);
        let r = Rect {
            x: content.x + rng.gen_range(0..=content.w - hw),
            y: content.y + rng.gen_range(0..=content.h - hh),
            w: hw,
            h: hh,
        };
        panels.push((r, random_color(rng, 20.0, 200.0)));
    }
    let n_blocks = rng.gen_range(2..=6);
    let blocks = (0..n_blocks)
        .map(|_| {
            let bw = rng.gen_range(content.w / 4..=content.w * 9 / 10);
            let bh = rng.gen_range(content.h / 12..=content.h / 3);
            TextBlock {
                rect: Rect {
                    x: content.x + rng.gen_range(0..=content.w - bw),
                    y: content.y + rng.gen_range(0..=content.h - bh),
                    w: bw,
                    h: bh,
                },
                ink: random_color(rng, 0.0, 90.0),
                density: rng.gen_range(0.35..0.8),
                line_h: rng.gen_range(8..=16),
            }
        })
        .collect();
    Kit {
        bg: if rng.gen_bool(0.7) {
            [255, 255, 255]
        } else {
            random_color(rng, 225.0, 255.0)
        },
        header_h,
        header: random_color(rng, 10.0, 230.0),
        footer_h,
        footer: random_color(rng, 10.0, 230.0),
        footer_ink: random_color(rng, 0.0, 255.0),
        logo,
        logo_color: random_color(rng, 10.0, 200.0),
        logo_mark: rng.gen_range(0..3),
        panels,
        blocks,
        footer_seed: rng.gen(),
    }
}

struct Canvas {
    w: i64,
    h: i64,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: i64, h: i64, bg: [u8; 3]) -> Self {
        let px = bg.iter().copied().cycle().take((w * h * 3) as usize).collect();
        Self { w, h, px }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && x < self.w && y < self.h {
            let i = ((y * self.w + x) * 3) as usize;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn fill(&mut self, r: Rect, c: [u8; 3]) {
        for y in r.y.max(0)..(r.y + r.h).min(self.h) {
            for x in r.x.max(0)..(r.x + r.w).min(self.w) {
                self.set(x, y, c);
            }
        }
    }

    /// Lines of "words": runs of noisy ink pixels separated by gaps.
    fn text(&mut self, r: Rect, ink: [u8; 3], density: f64, line_h: i64, rng: &mut ChaCha8Rng) {
        let glyph_h = (line_h * 2 / 3).max(3);
        let mut y = r.y;
        while y + glyph_h <= r.y + r.h {
            let mut x = r.x;
            let line_end = r.x + r.w - rng.gen_range(0..=r.w / 4);
            while x < line_end {
                let word = rng.gen_range(line_h..=line_h * 5);
                for xx in x..(x + word).min(line_end) {
                    for yy in y..y + glyph_h {
                        if rng.gen_bool(density) {
                            self.set(xx, yy, ink);
                        }
                    }
                }
                x += word + line_h / 2 + 2;
            }
            y += line_h;
        }
    }

    fn into_screenshot(self, email_id: String) -> Screenshot {
        Screenshot::new(self.w as u32, self.h as u32, self.px, email_id).expect("canvas size matches")
    }
}

fn rotate_hue(c: [u8; 3], degrees: f64) -> [u8; 3] {
    // rotation about the gray axis in RGB space
    let (s, co) = degrees.to_radians().sin_cos();
    let k = (1.0 - co) / 3.0;
    let q = (1.0f64 / 3.0).sqrt() * s;
    let m = [
        [co + k, k - q, k + q],
        [k + q, co + k, k - q],
        [k - q, k + q, co + k],
    ];
    let v = c.map(|x| x as f64);
    let mut rot = [0.0f64; 3];
    for (i, row) in m.iter().enumerate() {
        rot[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
    }
    // shift back to the original luma so only the hue moves
    let d = luma(c) - (0.299 * rot[0] + 0.587 * rot[1] + 0.114 * rot[2]);
    rot.map(|x| (x + d).round().clamp(0.0, 255.0) as u8)
}

fn draw_variant(kit: &Kit, p: &Perturbations, w: i64, h: i64, rng: &mut ChaCha8Rng, email_id: String) -> Screenshot {
    let hue = p
        .hue_jitter
        .as_ref()
        .map_or(0.0, |j| rng.gen_range(-j.degrees..=j.degrees));
    let logo_swapped = p.logo_swap.as_ref().is_some_and(|l| rng.gen_bool(l.probability));
    let footer_changed = p.footer_change.as_ref().is_some_and(|f| rng.gen_bool(f.probability));

    let mut c = Canvas::new(w, h, kit.bg);
    c.fill(
        Rect {
            x: 0,
            y: 0,
            w,
            h: kit.header_h,
        },
        rotate_hue(kit.header, hue),
    );
    for &(r, color) in &kit.panels {
        c.fill(r, color);
    }
    for b in &kit.blocks {
        let (mut r, mut density) = (b.rect, b.density);
        if let Some(t) = &p.text_noise {
            let s = t.shift_px as i64;
            r.x += rng.gen_range(-s..=s);
            r.y += rng.gen_range(-s..=s);
            density = (density * (1.0 + rng.gen_range(-t.density_jitter..=t.density_jitter))).clamp(0.0, 1.0);
        }
        // glyphs are fixed per kit unless text noise is enabled
        let mut glyphs = if p.text_noise.is_some() {
            ChaCha8Rng::seed_from_u64(rng.gen())
        } else {
            ChaCha8Rng::seed_from_u64(splitmix64(b.rect.x as u64 ^ (b.rect.y as u64) << 32))
        };
        c.text(r, b.ink, density, b.line_h, &mut glyphs);
    }

    let (logo_color, mark) = if logo_swapped {
        // a different brand mark of similar weight
        let l = luma(kit.logo_color);
        (random_color(rng, (l - 20.0).max(0.0), l + 20.0), rng.gen_range(0..3))
    } else {
        (kit.logo_color, kit.logo_mark)
    };
    let logo_color = rotate_hue(logo_color, hue);
    c.fill(kit.logo, logo_color);
    let l = kit.logo;
    let light = [250, 250, 250];
    match mark {
        0 => c.fill(
            Rect {
                x: l.x + l.w / 4,
                y: l.y + l.h / 4,
                w: l.w / 2,
                h: l.h / 2,
            },
            light,
        ),
        1 => c.fill(
            Rect {
                x: l.x + l.w / 8,
                y: l.y + l.h * 3 / 8,
                w: l.w * 3 / 4,
                h: l.h / 4,
            },
            light,
        ),
        _ => c.fill(
            Rect {
                x: l.x + l.w * 3 / 8,
                y: l.y + l.h / 8,
                w: l.w / 4,
                h: l.h * 3 / 4,
            },
            light,
        ),
    }

    let footer = Rect {
        x: 0,
        y: h - kit.footer_h,
        w,
        h: kit.footer_h,
    };
    c.fill(footer, rotate_hue(kit.footer, hue));
    let mut footer_rng = if footer_changed {
        ChaCha8Rng::seed_from_u64(rng.gen())
    } else {
        ChaCha8Rng::seed_from_u64(kit.footer_seed)
    };
    let inner = Rect {
        x: footer.x + 12,
        y: footer.y + 4,
        w: footer.w - 24,
        h: footer.h - 8,
    };
    c.text(inner, kit.footer_ink, 0.5, 10, &mut footer_rng);
    c.into_screenshot(email_id)
}

/// Deterministic corpus for `spec`, ordered by `(received_at, email_id)`.
pub fn generate(spec: &CampaignSpec) -> Result<Vec<SynthEmail>, SynthError> {
    spec.validate()?;
    let (w, h) = (spec.canvas.0 as i64, spec.canvas.1 as i64);
    let kits: Vec<Kit> = (0..spec.n_kits)
        .map(|k| make_kit(&mut rng_for(spec.seed, k as u64, u64::MAX), w, h))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..spec.n_kits)
        .flat_map(|k| (0..spec.variants_per_kit).map(move |v| (k, v)))
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = jobs.len().div_ceil(threads);
    let mut out: Vec<SynthEmail> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let kits = &kits;
                s.spawn(move || {
                    part.iter()
                        .map(|&(k, v)| {
                            let mut rng = rng_for(spec.seed, k as u64, v as u64);
                            let received_at = rng.gen_range(spec.time_window.0..=spec.time_window.1);
                            let email_id = format!("synth-k{k:04}-v{v:04}");
                            let image = draw_variant(&kits[k], &spec.perturbations, w, h, &mut rng, email_id.clone());
                            SynthEmail {
                                email_id,
                                kit_id: k,
                                received_at,
                                image,
                            }
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });
    out.sort_by(|a, b| (a.received_at, &a.email_id).cmp(&(b.received_at, &b.email_id)));
    Ok(out)
}

/// Writes `<email_id>.png` files and `manifest.csv` (email_id,kit_id,received_at).
pub fn write_corpus(corpus: &[SynthEmail], dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("email_id,kit_id,received_at\n");
    for e in corpus {
        let png = e.image.to_png().map_err(|err| SynthError::Image(err.to_string()))?;
        std::fs::write(dir.join(format!("{}.png", e.email_id)), png)?;
        let _ = writeln!(manifest, "{},{},{}", e.email_id, e.kit_id, e.received_at);
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScore {
    pub precision: f64,
    pub recall: f64,
    /// Pairs in the same predicted cluster.
    pub predicted_pairs: u64,
    /// Pairs from the same kit.
    pub truth_pairs: u64,
    /// Pairs that are both.
    pub agreeing_pairs: u64,
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pairwise precision and recall of `predicted` against `truth`, both keyed by
/// email id. Ratios with no qualifying pairs are 1.0.
pub fn score_clustering<K, C>(truth: &HashMap<String, K>, predicted: &HashMap<String, C>) -> Result<ClusteringScore, SynthError>
where
    K: Eq + std::hash::Hash + Clone,
    C: Eq + std::hash::Hash + Clone,
{
    if truth.len() != predicted.len() {
        return Err(SynthError::IdMismatch(format!(
            "{} truth ids, {} predicted ids",
            truth.len(),
            predicted.len()
        )));
    }
    let mut joint: HashMap<(K, C), u64> = HashMap::new();
    let mut by_kit: HashMap<K, u64> = HashMap::new();
    let mut by_cluster: HashMap<C, u64> = HashMap::new();
    for (id, kit) in truth {
        let cluster = predicted
            .get(id)
            .ok_or_else(|| SynthError::IdMismatch(format!("{id:?} has no prediction")))?;
        *joint.entry((kit.clone(), cluster.clone())).or_default() += 1;
        *by_kit.entry(kit.clone()).or_default() += 1;
        *by_cluster.entry(cluster.clone()).or_default() += 1;
    }
    let agreeing: u64 = joint.values().map(|&n| pairs(n)).sum();
    let truth_pairs: u64 = by_kit.values().map(|&n| pairs(n)).sum();
    let predicted_pairs: u64 = by_cluster.values().map(|&n| pairs(n)).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(ClusteringScore {
        precision: ratio(agreeing, predicted_pairs),
        recall: ratio(agreeing, truth_pairs),
        predicted_pairs,
        truth_pairs,
        agreeing_pairs: agreeing,
    })
}
