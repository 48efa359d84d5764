//! Procedural glyph dataset: clean "support" images and cluttered,
//! rotated "target" images over a configurable charset, with labels
//! and per-character horizontal extents as ground truth.
//!
//! Everything downstream of a `Manifest` is a pure function of it:
//! regenerating from the same manifest reproduces every sample bitwise.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError};
use crate::decoder::{char_to_class, class_to_char};
use crate::font;
use crate::kv::{Kv, KvError};
use crate::seeding;
use crate::tensor::Tensor;

// ── errors ──────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum DataError {
    #[error("label \"{label}\" does not fit a {height}x{width} canvas at the configured rotation")]
    LabelTooLong {
        label: String,
        height: usize,
        width: usize,
    },
    #[error("charset too small to build labels for {split}/{domain} disjoint from the other splits")]
    CharsetTooSmall { split: Split, domain: Domain },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("character {0:?} has no glyph")]
    BadChar(char),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── splits and domains ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Support,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Support, Domain::Target];

    pub fn index(self) -> usize {
        match self {
            Domain::Support => 0,
            Domain::Target => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Support => "support",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ── manifest ────────────────────────────────────────────────────────

/// Full description of a dataset. Serialized as flat key = value text.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub charset: Vec<char>,
    pub min_len: usize,
    pub max_len: usize,
    /// Target-domain rotation range in degrees, uniform in +-rot_max_deg.
    pub rot_max_deg: f64,
    /// Number of darkened rectangles composited behind target text.
    pub clutter_rects: usize,
    /// Peak darkening applied by a clutter rectangle.
    pub clutter_amp: f64,
    /// Peak amplitude of the value-noise texture.
    pub noise_amp: f64,
    /// Background is lifted to at least ink + min_contrast before glyphs
    /// are drawn, so text stays darker than any clutter.
    pub min_contrast: f64,
    /// Per-sample background level jitter: bg = 1 - jitter * u.
    pub jitter: f64,
}

/// Twenty visually distinct classes: no O/0, I/1/l, S/5, Z/2, B/8
/// style confusion pairs, uppercase only.
pub const DESK_CHARSET: &str = "34679ACEFHJKLMNPRTUW";

impl Manifest {
    /// Desk-scale defaults: small images, reduced charset, counts that
    /// train in minutes on one core.
    pub fn desk(seed: u64) -> Self {
        Manifest {
            seed,
            height: 32,
            width: 128,
            train_count: 2000,
            val_count: 200,
            test_count: 200,
            charset: DESK_CHARSET.chars().collect(),
            min_len: 1,
            max_len: 8,
            rot_max_deg: 12.0,
            clutter_rects: 6,
            clutter_amp: 0.25,
            noise_amp: 0.1,
            min_contrast: 0.3,
            jitter: 0.15,
        }
    }

    /// Full-scale configuration: larger canvas, all 62 classes.
    pub fn full(seed: u64) -> Self {
        Manifest {
            height: 64,
            width: 256,
            train_count: 10000,
            val_count: 1000,
            test_count: 1000,
            charset: ('0'..='9').chain('A'..='Z').chain('a'..='z').collect(),
            ..Manifest::desk(seed)
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    pub fn charset_string(&self) -> String {
        self.charset.iter().collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Invalid(msg));
        if self.height < 16 || self.width < 16 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!(
                "image dims {}x{} must be multiples of 8 and at least 16",
                self.height, self.width
            ));
        }
        if self.train_count == 0 || self.val_count == 0 || self.test_count == 0 {
            return bad("every split count must be at least 1".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > 31 {
            return bad(format!(
                "label lengths {}..={} must satisfy 1 <= min <= max <= 31",
                self.min_len, self.max_len
            ));
        }
        if self.charset.is_empty() {
            return bad("charset is empty".into());
        }
        let mut seen = HashSet::new();
        for &c in &self.charset {
            if char_to_class(c).is_none() {
                return Err(DataError::BadChar(c));
            }
            if !seen.insert(c) {
                return bad(format!("charset repeats {c:?}"));
            }
        }
        if !(0.0..90.0).contains(&self.rot_max_deg) {
            return bad(format!("rot_max_deg {} outside [0, 90)", self.rot_max_deg));
        }
        for (name, v) in [("clutter_amp", self.clutter_amp), ("noise_amp", self.noise_amp)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [("min_contrast", self.min_contrast), ("jitter", self.jitter)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        // Ink tops out at 0.25; the darkest background must stay above the
        // contrast floor or support images would saturate.
        if 1.0 - self.jitter <= 0.25 + self.min_contrast {
            return bad(format!(
                "jitter {} and min_contrast {} leave no room between ink and background",
                self.jitter, self.min_contrast
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut kv = Kv::new();
        kv.set_display("seed", self.seed).unwrap();
        kv.set_display("height", self.height).unwrap();
        kv.set_display("width", self.width).unwrap();
        kv.set_display("train_count", self.train_count).unwrap();
        kv.set_display("val_count", self.val_count).unwrap();
        kv.set_display("test_count", self.test_count).unwrap();
        kv.set("charset", &self.charset_string()).unwrap();
        kv.set_display("min_len", self.min_len).unwrap();
        kv.set_display("max_len", self.max_len).unwrap();
        kv.set_display("rot_max_deg", self.rot_max_deg).unwrap();
        kv.set_display("clutter_rects", self.clutter_rects).unwrap();
        kv.set_display("clutter_amp", self.clutter_amp).unwrap();
        kv.set_display("noise_amp", self.noise_amp).unwrap();
        kv.set_display("min_contrast", self.min_contrast).unwrap();
        kv.set_display("jitter", self.jitter).unwrap();
        kv.to_text()
    }

    /// Parses manifest text, rejecting unknown keys and invalid values.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut kv = Kv::parse(text)?;
        let m = Manifest {
            seed: kv.parse_req("seed", "u64")?,
            height: kv.parse_req("height", "usize")?,
            width: kv.parse_req("width", "usize")?,
            train_count: kv.parse_req("train_count", "usize")?,
            val_count: kv.parse_req("val_count", "usize")?,
            test_count: kv.parse_req("test_count", "usize")?,
            charset: kv.require("charset")?.chars().collect(),
            min_len: kv.parse_req("min_len", "usize")?,
            max_len: kv.parse_req("max_len", "usize")?,
            rot_max_deg: kv.parse_req("rot_max_deg", "f64")?,
            clutter_rects: kv.parse_req("clutter_rects", "usize")?,
            clutter_amp: kv.parse_req("clutter_amp", "f64")?,
            noise_amp: kv.parse_req("noise_amp", "f64")?,
            min_contrast: kv.parse_req("min_contrast", "f64")?,
            jitter: kv.parse_req("jitter", "f64")?,
        };
        kv.reject_unknown()?;
        m.validate()?;
        Ok(m)
    }
}

// ── samples ─────────────────────────────────────────────────────────

/// One rendered image with its ground truth.
#[derive(Debug, Clone)]
pub struct GlyphSample {
    pub label: String,
    pub domain: Domain,
    /// (1, H, W) grayscale in [0, 1].
    pub image: Tensor,
    /// Per-character horizontal ink extents [start, end) in canvas
    /// columns, measured before any rotation.
    pub boxes: Vec<(usize, usize)>,
    /// Rotation applied to this sample. Kept in memory for diagnostics
    /// only; not persisted, so loaded samples report 0.
    pub angle_deg: f64,
}

// Distinct stream tags keep label generation and pixel rendering on
// unrelated substreams of the manifest seed.
const STREAM_LABELS: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

/// RNG for one sample, derived from manifest seed and sample address.
pub fn sample_rng(m: &Manifest, split: Split, domain: Domain, index: usize) -> ChaCha8Rng {
    seeding::sub_rng(&[
        m.seed,
        STREAM_SAMPLE,
        split.index() as u64,
        domain.index() as u64,
        index as u64,
    ])
}

struct Layout {
    scale: usize,
    x0: usize,
    y0: usize,
}

/// Largest integer glyph scale whose text strip, rotated by the worst
/// case +-rot_max_deg, still fits inside the canvas with a 1 px margin.
/// The same rule covers both domains so a support image and its
/// degenerate target twin share geometry exactly.
fn fit_scale(m: &Manifest, n_chars: usize) -> Option<usize> {
    let (sin, cos) = m.rot_max_deg.to_radians().sin_cos();
    let fits = |s: usize| {
        let tw = (s * (6 * n_chars - 1)) as f64;
        let th = (7 * s) as f64;
        tw * cos + th * sin <= (m.width - 2) as f64 && tw * sin + th * cos <= (m.height - 2) as f64
    };
    if !fits(1) {
        return None;
    }
    let mut s = 1;
    while fits(s + 1) {
        s += 1;
    }
    Some(s)
}

fn layout(m: &Manifest, label: &str) -> Result<Layout, DataError> {
    let n = label.chars().count();
    let scale = fit_scale(m, n).ok_or_else(|| DataError::LabelTooLong {
        label: label.to_string(),
        height: m.height,
        width: m.width,
    })?;
    Ok(Layout {
        scale,
        x0: (m.width - scale * (6 * n - 1)) / 2,
        y0: (m.height - 7 * scale) / 2,
    })
}

/// Stamps the label centered on the canvas; returns per-character ink
/// extents. Glyph cells advance 6 columns per character at scale 1,
/// leaving a 1-column gap.
fn draw_glyphs(
    canvas: &mut [f64],
    width: usize,
    label: &str,
    lay: &Layout,
    ink: f64,
) -> Result<Vec<(usize, usize)>, DataError> {
    let s = lay.scale;
    let mut boxes = Vec::new();
    for (i, ch) in label.chars().enumerate() {
        let rows = font::glyph(ch).ok_or(DataError::BadChar(ch))?;
        let cell_x = lay.x0 + 6 * s * i;
        for r in 0..font::GLYPH_H {
            for c in 0..font::GLYPH_W {
                if font::pixel(rows, r, c) {
                    for dy in 0..s {
                        for dx in 0..s {
                            canvas[(lay.y0 + s * r + dy) * width + cell_x + s * c + dx] = ink;
                        }
                    }
                }
            }
        }
        let (lo, hi) = font::ink_cols(rows);
        boxes.push((cell_x + s * lo, cell_x + s * (hi + 1)));
    }
    Ok(boxes)
}

/// Uniform integer in [lo, hi] driven by one f64 draw.
fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let span = (hi - lo + 1) as f64;
    lo + ((rng.gen::<f64>() * span) as usize).min(hi - lo)
}

/// Bilinear resample of a rotation about the image center, clamping
/// source coordinates to the edge.
fn rotate_image(src: &[f64], h: usize, w: usize, angle_deg: f64) -> Vec<f64> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, w as f64 - 1.0);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, h as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Shared head of both renderers. The first two draws (background
/// level, ink level) are taken in the same order by each domain so a
/// target render with all distortions at zero matches the support
/// render bitwise.
fn base_levels(m: &Manifest, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let bg = 1.0 - m.jitter * rng.gen::<f64>();
    let ink = 0.25 * rng.gen::<f64>();
    (bg, ink)
}

fn contrast_floor(canvas: &mut [f64], ink: f64, min_contrast: f64) {
    let floor = ink + min_contrast;
    for p in canvas.iter_mut() {
        if *p < floor {
            *p = floor;
        }
    }
}

fn finish(
    m: &Manifest,
    domain: Domain,
    label: &str,
    canvas: Vec<f64>,
    boxes: Vec<(usize, usize)>,
    angle_deg: f64,
) -> GlyphSample {
    let image = Tensor::new(vec![1, m.height, m.width], canvas).expect("canvas size");
    GlyphSample {
        label: label.to_string(),
        domain,
        image,
        boxes,
        angle_deg,
    }
}

/// Clean domain: uniform background, dark centered glyphs, no clutter,
/// no rotation.
pub fn render_support(
    m: &Manifest,
    label: &str,
    rng: &mut ChaCha8Rng,
) -> Result<GlyphSample, DataError> {
    let lay = layout(m, label)?;
    let (bg, ink) = base_levels(m, rng);
    let mut canvas = vec![bg; m.height * m.width];
    contrast_floor(&mut canvas, ink, m.min_contrast);
    let boxes = draw_glyphs(&mut canvas, m.width, label, &lay, ink)?;
    Ok(finish(m, Domain::Support, label, canvas, boxes, 0.0))
}

/// Cluttered domain: darkened rectangles, value-noise texture, contrast
/// floor, glyphs, then a whole-image rotation uniform in +-rot_max_deg.
pub fn render_target(
    m: &Manifest,
    label: &str,
    rng: &mut ChaCha8Rng,
) -> Result<GlyphSample, DataError> {
    let (h, w) = (m.height, m.width);
    let lay = layout(m, label)?;
    let (bg, ink) = base_levels(m, rng);
    let mut canvas = vec![bg; h * w];

    for _ in 0..m.clutter_rects {
        let rw = pick(rng, (w / 16).max(2), (w / 3).max(2));
        let rh = pick(rng, (h / 8).max(2), (h / 2).max(2));
        let rx = pick(rng, 0, w - rw);
        let ry = pick(rng, 0, h - rh);
        let dark = m.clutter_amp * rng.gen::<f64>();
        for y in ry..ry + rh {
            for x in rx..rx + rw {
                canvas[y * w + x] = (canvas[y * w + x] - dark).max(0.0);
            }
        }
    }

    // Value noise: control points on an 8 px lattice, bilinear between.
    let nx = w / 8 + 1;
    let ny = h / 8 + 1;
    let grid: Vec<f64> = (0..nx * ny).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
    for y in 0..h {
        for x in 0..w {
            let gx = x as f64 / 8.0;
            let gy = y as f64 / 8.0;
            let x0 = gx.floor() as usize;
            let y0 = gy.floor() as usize;
            let x1 = (x0 + 1).min(nx - 1);
            let y1 = (y0 + 1).min(ny - 1);
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            let top = grid[y0 * nx + x0] * (1.0 - fx) + grid[y0 * nx + x1] * fx;
            let bot = grid[y1 * nx + x0] * (1.0 - fx) + grid[y1 * nx + x1] * fx;
            let n = top * (1.0 - fy) + bot * fy;
            canvas[y * w + x] = (canvas[y * w + x] + m.noise_amp * n).clamp(0.0, 1.0);
        }
    }

    contrast_floor(&mut canvas, ink, m.min_contrast);
    let boxes = draw_glyphs(&mut canvas, w, label, &lay, ink)?;

    let angle = m.rot_max_deg * (2.0 * rng.gen::<f64>() - 1.0);
    if angle != 0.0 {
        canvas = rotate_image(&canvas, h, w, angle);
    }
    Ok(finish(m, Domain::Target, label, canvas, boxes, angle))
}

// ── split construction ──────────────────────────────────────────────

const LABEL_RETRY_CAP: usize = 1000;

/// Draws label lists per (split, domain). Within a split duplicates are
/// allowed; across splits of one domain labels never collide, enforced
/// by rejection sampling in the order val, test, train.
pub fn build_labels(m: &Manifest) -> Result<[[Vec<String>; 2]; 3], DataError> {
    let mut rng = seeding::sub_rng(&[m.seed, STREAM_LABELS]);
    let mut out: [[Vec<String>; 2]; 3] = Default::default();
    for domain in Domain::ALL {
        let mut sets: [HashSet<String>; 3] = Default::default();
        for split in [Split::Val, Split::Test, Split::Train] {
            let mut labels = Vec::with_capacity(m.count(split));
            'next_label: for _ in 0..m.count(split) {
                for _ in 0..LABEL_RETRY_CAP {
                    let cand = gen_label(m, &mut rng);
                    let clash = Split::ALL
                        .iter()
                        .any(|s| *s != split && sets[s.index()].contains(&cand));
                    if !clash {
                        sets[split.index()].insert(cand.clone());
                        labels.push(cand);
                        continue 'next_label;
                    }
                }
                return Err(DataError::CharsetTooSmall { split, domain });
            }
            out[split.index()][domain.index()] = labels;
        }
    }
    Ok(out)
}

fn gen_label(m: &Manifest, rng: &mut ChaCha8Rng) -> String {
    let len = pick(rng, m.min_len, m.max_len);
    (0..len)
        .map(|_| m.charset[pick(rng, 0, m.charset.len() - 1)])
        .collect()
}

// ── dataset ─────────────────────────────────────────────────────────

/// In-memory dataset: manifest plus samples indexed [split][domain].
pub struct Dataset {
    pub manifest: Manifest,
    samples: [[Vec<GlyphSample>; 2]; 3],
}

impl Dataset {
    pub fn generate(manifest: &Manifest) -> Result<Dataset, DataError> {
        manifest.validate()?;
        let labels = build_labels(manifest)?;
        let mut samples: [[Vec<GlyphSample>; 2]; 3] = Default::default();
        for split in Split::ALL {
            for domain in Domain::ALL {
                let list = &labels[split.index()][domain.index()];
                let bucket = &mut samples[split.index()][domain.index()];
                for (i, label) in list.iter().enumerate() {
                    let mut rng = sample_rng(manifest, split, domain, i);
                    let sample = match domain {
                        Domain::Support => render_support(manifest, label, &mut rng)?,
                        Domain::Target => render_target(manifest, label, &mut rng)?,
                    };
                    bucket.push(sample);
                }
            }
        }
        Ok(Dataset {
            manifest: manifest.clone(),
            samples,
        })
    }

    pub fn get(&self, split: Split, domain: Domain) -> &[GlyphSample] {
        &self.samples[split.index()][domain.index()]
    }

    /// Writes `manifest.txt` and `samples.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), self.manifest.to_text())?;
        let mut ar = Archive::new();
        for split in Split::ALL {
            for domain in Domain::ALL {
                for (i, s) in self.get(split, domain).iter().enumerate() {
                    let stem = format!("{split}/{domain}/{i}");
                    ar.push(&format!("{stem}/image"), s.image.clone())?;
                    let classes: Vec<f64> = s
                        .label
                        .chars()
                        .map(|c| char_to_class(c).expect("rendered label") as f64)
                        .collect();
                    let n = classes.len();
                    ar.push(&format!("{stem}/label"), Tensor::new(vec![n], classes).unwrap())?;
                    let flat: Vec<f64> = s
                        .boxes
                        .iter()
                        .flat_map(|&(a, b)| [a as f64, b as f64])
                        .collect();
                    ar.push(&format!("{stem}/boxes"), Tensor::new(vec![n, 2], flat).unwrap())?;
                }
            }
        }
        ar.save(&dir.join("samples.bin"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DataError> {
        let manifest = Manifest::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
        let ar = Archive::load(&dir.join("samples.bin"))?;
        let mut samples: [[Vec<GlyphSample>; 2]; 3] = Default::default();
        for split in Split::ALL {
            for domain in Domain::ALL {
                let bucket = &mut samples[split.index()][domain.index()];
                for i in 0..manifest.count(split) {
                    let stem = format!("{split}/{domain}/{i}");
                    let image = ar.require(&format!("{stem}/image"))?.clone();
                    let label_t = ar.require(&format!("{stem}/label"))?;
                    let label: String = label_t
                        .data
                        .iter()
                        .map(|&v| {
                            class_to_char(v as usize)
                                .ok_or(DataError::Invalid(format!("bad class id {v}")))
                        })
                        .collect::<Result<_, _>>()?;
                    let boxes_t = ar.require(&format!("{stem}/boxes"))?;
                    let boxes = boxes_t
                        .data
                        .chunks(2)
                        .map(|p| (p[0] as usize, p[1] as usize))
                        .collect();
                    bucket.push(GlyphSample {
                        label,
                        domain,
                        image,
                        boxes,
                        angle_deg: 0.0,
                    });
                }
            }
        }
        Ok(Dataset { manifest, samples })
    }
}

// ── tests ───────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn quiet_manifest() -> Manifest {
        // Rotation only; clutter and noise off so geometry is crisp.
        Manifest {
            rot_max_deg: 25.0,
            clutter_rects: 0,
            clutter_amp: 0.0,
            noise_amp: 0.0,
            ..Manifest::desk(7)
        }
    }

    #[test]
    fn manifest_roundtrips_through_text() {
        let m = Manifest::desk(17);
        let text = m.to_text();
        let back = Manifest::parse(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_values() {
        let mut text = Manifest::desk(1).to_text();
        text.push_str("extra_knob = 3\n");
        assert!(matches!(
            Manifest::parse(&text),
            Err(DataError::Config(KvError::UnknownKey { .. }))
        ));

        let mut m = Manifest::desk(1);
        m.height = 20;
        assert!(matches!(m.validate(), Err(DataError::Invalid(_))));
        let mut m = Manifest::desk(1);
        m.charset = vec!['A', 'A'];
        assert!(matches!(m.validate(), Err(DataError::Invalid(_))));
        let mut m = Manifest::desk(1);
        m.charset = vec!['?'];
        assert!(matches!(m.validate(), Err(DataError::BadChar('?'))));
        let mut m = Manifest::desk(1);
        m.max_len = 40;
        assert!(matches!(m.validate(), Err(DataError::Invalid(_))));
        let mut m = Manifest::desk(1);
        m.jitter = 0.5;
        m.min_contrast = 0.4;
        assert!(matches!(m.validate(), Err(DataError::Invalid(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let m = Manifest::desk(3);
        for domain in Domain::ALL {
            let render = |idx| {
                let mut rng = sample_rng(&m, Split::Train, domain, idx);
                match domain {
                    Domain::Support => render_support(&m, "A4C", &mut rng).unwrap(),
                    Domain::Target => render_target(&m, "A4C", &mut rng).unwrap(),
                }
            };
            let a = render(5);
            let b = render(5);
            assert_eq!(a.image.data, b.image.data);
            assert_eq!(a.boxes, b.boxes);
            let c = render(6);
            assert_ne!(a.image.data, c.image.data, "different index, different pixels");
        }
    }

    #[test]
    fn degenerate_target_equals_support_bitwise() {
        let m = Manifest {
            rot_max_deg: 0.0,
            clutter_rects: 0,
            clutter_amp: 0.0,
            noise_amp: 0.0,
            ..Manifest::desk(11)
        };
        let mut r1 = sample_rng(&m, Split::Val, Domain::Support, 0);
        let mut r2 = sample_rng(&m, Split::Val, Domain::Support, 0);
        let sup = render_support(&m, "HW3", &mut r1).unwrap();
        let tgt = render_target(&m, "HW3", &mut r2).unwrap();
        assert_eq!(sup.image.data, tgt.image.data);
        assert_eq!(sup.boxes, tgt.boxes);
        assert_eq!(tgt.angle_deg, 0.0);
    }

    #[test]
    fn pixels_stay_in_unit_range_and_single_char_is_one_glyph() {
        let m = Manifest::desk(5);
        let mut rng = sample_rng(&m, Split::Train, Domain::Target, 0);
        let t = render_target(&m, "W9K4A", &mut rng).unwrap();
        assert!(t.image.data.iter().all(|&p| (0.0..=1.0).contains(&p)));

        let mut rng = sample_rng(&m, Split::Train, Domain::Support, 0);
        let s = render_support(&m, "A", &mut rng).unwrap();
        assert_eq!(s.boxes.len(), 1);
        // Exactly the glyph's scaled ink pixel count is dark.
        let rows = font::glyph('A').unwrap();
        let ink_px: usize = (0..7)
            .map(|r| (0..5).filter(|&c| font::pixel(rows, r, c)).count())
            .sum();
        let scale = fit_scale(&m, 1).unwrap();
        let dark = s.image.data.iter().filter(|&&p| p < 0.5).count();
        assert_eq!(dark, ink_px * scale * scale);
    }

    #[test]
    fn background_fraction_above_regression_floor() {
        // Frozen bound from the spec of the renderer: 3-char labels on a
        // 32x128 canvas stay mostly background.
        let m = Manifest::desk(17);
        for idx in 0..8 {
            let mut rng = sample_rng(&m, Split::Train, Domain::Support, idx);
            let s = render_support(&m, "M4W", &mut rng).unwrap();
            let light = s.image.data.iter().filter(|&&p| p > 0.5).count();
            let frac = light as f64 / s.image.data.len() as f64;
            assert!(frac > 0.6, "background fraction {frac} too small");
        }
    }

    #[test]
    fn overlong_label_is_rejected_with_dims() {
        let m = Manifest::desk(1);
        let label: String = std::iter::repeat('W').take(22).collect();
        let mut rng = sample_rng(&m, Split::Train, Domain::Support, 0);
        match render_support(&m, &label, &mut rng) {
            Err(DataError::LabelTooLong { height, width, .. }) => {
                assert_eq!((height, width), (32, 128));
            }
            other => panic!("expected LabelTooLong, got {other:?}"),
        }
    }

    #[test]
    fn scale_shrinks_with_label_length() {
        let m = Manifest::desk(1);
        let s1 = fit_scale(&m, 1).unwrap();
        let s3 = fit_scale(&m, 3).unwrap();
        let s8 = fit_scale(&m, 8).unwrap();
        assert!(s1 >= s3 && s3 >= s8);
        assert!(s8 >= 1);
        // With rotation off the same text admits an equal or larger scale.
        let flat = Manifest {
            rot_max_deg: 0.0,
            ..Manifest::desk(1)
        };
        assert!(fit_scale(&flat, 3).unwrap() >= s3);
    }

    #[test]
    fn inverse_rotation_restores_char_boxes() {
        let m = quiet_manifest();
        // Find a sample whose drawn angle is large enough to matter.
        let (sample, _) = (0..200)
            .map(|i| {
                let mut rng = sample_rng(&m, Split::Train, Domain::Target, i);
                (render_target(&m, "HH", &mut rng).unwrap(), i)
            })
            .find(|(s, _)| s.angle_deg.abs() > 10.0)
            .expect("some sample rotates by more than 10 degrees");

        let (h, w) = (m.height, m.width);
        let restored = rotate_image(&sample.image.data, h, w, -sample.angle_deg);
        // Per character, measure dark-column extents inside the box
        // widened by one pixel; they must match the stored box within
        // one pixel on each side.
        for &(start, end) in &sample.boxes {
            let lo_win = start.saturating_sub(1);
            let hi_win = (end + 1).min(w);
            let dark_cols: Vec<usize> = (lo_win..hi_win)
                .filter(|&x| (0..h).any(|y| restored[y * w + x] < 0.55))
                .collect();
            assert!(!dark_cols.is_empty(), "no ink found near box {start}..{end}");
            let lo = *dark_cols.first().unwrap() as i64;
            let hi = *dark_cols.last().unwrap() as i64 + 1;
            assert!((lo - start as i64).abs() <= 1, "left edge {lo} vs {start}");
            assert!((hi - end as i64).abs() <= 1, "right edge {hi} vs {end}");
        }
    }

    #[test]
    fn rotating_there_and_back_is_near_identity() {
        let m = quiet_manifest();
        let mut rng = sample_rng(&m, Split::Train, Domain::Support, 3);
        let s = render_support(&m, "EK", &mut rng).unwrap();
        let spun = rotate_image(&s.image.data, m.height, m.width, 18.0);
        let back = rotate_image(&spun, m.height, m.width, -18.0);
        // Interior pixels survive the double bilinear pass; edges clamp.
        let mut worst: f64 = 0.0;
        for y in 8..m.height - 8 {
            for x in 8..m.width - 8 {
                let i = y * m.width + x;
                worst = worst.max((back[i] - s.image.data[i]).abs());
            }
        }
        assert!(worst < 0.45, "double rotation drifted by {worst}");
    }

    #[test]
    fn splits_have_exact_sizes_and_disjoint_labels() {
        let m = Manifest {
            train_count: 40,
            val_count: 10,
            test_count: 10,
            ..Manifest::desk(17)
        };
        let labels = build_labels(&m).unwrap();
        for domain in Domain::ALL {
            let d = domain.index();
            assert_eq!(labels[Split::Train.index()][d].len(), 40);
            assert_eq!(labels[Split::Val.index()][d].len(), 10);
            assert_eq!(labels[Split::Test.index()][d].len(), 10);
            let sets: Vec<HashSet<&String>> = Split::ALL
                .iter()
                .map(|s| labels[s.index()][d].iter().collect())
                .collect();
            for a in 0..3 {
                for b in a + 1..3 {
                    assert!(sets[a].is_disjoint(&sets[b]), "splits {a} and {b} overlap");
                }
            }
        }
        // Same manifest, same membership.
        let again = build_labels(&m).unwrap();
        assert_eq!(labels, again);
    }

    #[test]
    fn tiny_charset_cannot_satisfy_disjointness() {
        let m = Manifest {
            charset: vec!['A', 'C'],
            min_len: 1,
            max_len: 1,
            train_count: 2,
            val_count: 1,
            test_count: 1,
            ..Manifest::desk(1)
        };
        match build_labels(&m) {
            Err(DataError::CharsetTooSmall { split, .. }) => assert_eq!(split, Split::Train),
            other => panic!("expected CharsetTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn dataset_saves_and_loads_bitwise() {
        let m = Manifest {
            train_count: 4,
            val_count: 2,
            test_count: 2,
            max_len: 4,
            ..Manifest::desk(23)
        };
        let ds = Dataset::generate(&m).unwrap();
        assert_eq!(ds.get(Split::Train, Domain::Support).len(), 4);
        assert_eq!(ds.get(Split::Test, Domain::Target).len(), 2);

        let dir = tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, m);
        for split in Split::ALL {
            for domain in Domain::ALL {
                let (a, b) = (ds.get(split, domain), back.get(split, domain));
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.label, y.label);
                    assert_eq!(x.image.shape, y.image.shape);
                    assert_eq!(x.image.data, y.image.data);
                    assert_eq!(x.boxes, y.boxes);
                    assert_eq!(y.domain, domain);
                }
            }
        }
    }
}
