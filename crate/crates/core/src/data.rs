//! Labeled multi-domain datasets: directory ingestion, deterministic
//! synthetic domains, seeded splits and uniform-domain batching.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Gaussian-filtered RGB noise, the natural-image stand-in.
    SmoothTexture,
    /// Dark polylines on a white canvas.
    LineSketch,
    /// Flat-colored Voronoi cells with dark borders.
    FlatRegions,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] =
        [SyntheticKind::SmoothTexture, SyntheticKind::LineSketch, SyntheticKind::FlatRegions];

    /// Conventional domain name used for directory layouts and reports.
    pub fn domain_name(self) -> &'static str {
        match self {
            SyntheticKind::SmoothTexture => "natural",
            SyntheticKind::LineSketch => "sketch",
            SyntheticKind::FlatRegions => "comic",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            SyntheticKind::SmoothTexture => "smooth-texture",
            SyntheticKind::LineSketch => "line-sketch",
            SyntheticKind::FlatRegions => "flat-regions",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.tag() == s || k.domain_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic domain {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub kind: SyntheticKind,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

/// Stroke pixels allowed on a sketch canvas, as a fraction of its area.
pub const SKETCH_INK_BUDGET: f64 = 0.12;
pub const TEXTURE_SIGMA: f64 = 4.0;

fn item_rng(kind: SyntheticKind, seed: u64, height: usize, width: usize, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(kind.tag().as_bytes());
    for v in [seed, height as u64, width as u64, index as u64] {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Image `index` of a synthetic domain. Deterministic in all arguments.
pub fn synthesize_one(kind: SyntheticKind, seed: u64, height: usize, width: usize, index: usize) -> Result<Image> {
    if height < 64 || width < 64 {
        return Err(Error::Config(format!("synthetic images must be at least 64x64, got {height}x{width}")));
    }
    let mut rng = item_rng(kind, seed, height, width, index);
    Ok(match kind {
        SyntheticKind::SmoothTexture => smooth_texture(&mut rng, height, width),
        SyntheticKind::LineSketch => line_sketch(&mut rng, height, width),
        SyntheticKind::FlatRegions => flat_regions(&mut rng, height, width),
    })
}

pub fn synthesize(spec: &SyntheticDomainSpec) -> Result<Vec<Image>> {
    (0..spec.count).map(|i| synthesize_one(spec.kind, spec.seed, spec.height, spec.width, i)).collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable blur of one `h x w` plane with symmetric boundaries.
fn blur(plane: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * plane[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn smooth_texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let kernel = gaussian_kernel(TEXTURE_SIGMA);
    let mut planes = Vec::with_capacity(3);
    for _ in 0..3 {
        let noise: Vec<f32> = (0..h * w).map(|_| rng.gen::<f32>()).collect();
        let mut p = blur(&noise, h, w, &kernel);
        let (lo, hi) = p.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-6);
        for v in &mut p {
            *v = (*v - lo) / span;
        }
        planes.push(p);
    }
    Image::from_fn(h, w, |c, y, x| planes[c][y * w + x])
}

fn line_sketch(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let strokes = rng.gen_range(10..=40usize);
    let per_stroke = ((SKETCH_INK_BUDGET * (h * w) as f64) as usize / strokes).max(1);
    let mut canvas = vec![1.0f32; h * w];
    for _ in 0..strokes {
        let ink = rng.gen_range(0.0f32..0.35);
        let mut budget = per_stroke;
        let (mut x, mut y) = (rng.gen_range(0..w) as isize, rng.gen_range(0..h) as isize);
        let vertices = rng.gen_range(2..=6);
        'stroke: for _ in 0..vertices {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(5.0..25.0);
            let nx = (x as f64 + len * angle.cos()).round().clamp(0.0, (w - 1) as f64) as isize;
            let ny = (y as f64 + len * angle.sin()).round().clamp(0.0, (h - 1) as f64) as isize;
            for (px, py) in bresenham(x, y, nx, ny) {
                let i = py as usize * w + px as usize;
                if canvas[i] == 1.0 {
                    if budget == 0 {
                        break 'stroke;
                    }
                    budget -= 1;
                }
                canvas[i] = canvas[i].min(ink);
            }
            (x, y) = (nx, ny);
        }
    }
    Image::from_fn(h, w, |_, y, x| canvas[y * w + x])
}

fn bresenham(x0: isize, y0: isize, x1: isize, y1: isize) -> Vec<(isize, isize)> {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut out = Vec::new();
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub const BORDER_COLOR: [f32; 3] = [0.05, 0.05, 0.05];

fn flat_regions(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let cells = rng.gen_range(8..=24usize);
    let seeds: Vec<(f32, f32)> = (0..cells).map(|_| (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32))).collect();
    let colors: Vec<[f32; 3]> = (0..cells)
        .map(|_| {
            let q = |r: &mut ChaCha8Rng| (r.gen_range(3..=20u32) as f32) / 20.0;
            [q(rng), q(rng), q(rng)]
        })
        .collect();
    let owner: Vec<usize> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32 + 0.5, (i % w) as f32 + 0.5);
            let mut best = 0;
            let mut best_d = f32::MAX;
            for (k, &(sy, sx)) in seeds.iter().enumerate() {
                let d = (y - sy).powi(2) + (x - sx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect();
    Image::from_fn(h, w, |c, y, x| {
        let o = owner[y * w + x];
        let edge = (x + 1 < w && owner[y * w + x + 1] != o) || (y + 1 < h && owner[(y + 1) * w + x] != o);
        if edge {
            BORDER_COLOR[c]
        } else {
            colors[o][c]
        }
    })
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ItemSource {
    Path(PathBuf),
    Synthetic { kind: SyntheticKind, seed: u64, height: usize, width: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Stable identifier, also the split-hash key.
    pub name: String,
    pub label: usize,
    pub split: Split,
    pub source: ItemSource,
}

impl DatasetItem {
    pub fn load(&self) -> Result<Image> {
        let img = match &self.source {
            ItemSource::Path(p) => Image::load_png(p)?,
            ItemSource::Synthetic { kind, seed, height, width, index } => {
                synthesize_one(*kind, *seed, *height, *width, *index)?
            }
        };
        Ok(img.with_label(self.label))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub test: f64,
    /// Fraction of the non-test items held out for validation.
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { test: 0.2, val: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    /// Domain names by label; label 0 is the source domain.
    pub domains: Vec<String>,
    pub items: Vec<DatasetItem>,
}

fn unit_hash(seed: u64, salt: &str, name: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64)
}

/// Deterministic split of an item name under `seed`.
pub fn assign_split(seed: u64, name: &str, fractions: SplitFractions) -> Split {
    if unit_hash(seed, "test", name) < fractions.test {
        Split::Test
    } else if unit_hash(seed, "val", name) < fractions.val {
        Split::Val
    } else {
        Split::Train
    }
}

impl DomainDataset {
    /// Number of target domains.
    pub fn k(&self) -> usize {
        self.domains.len().saturating_sub(1)
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn label_of(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    /// Items of `split` with the given label.
    pub fn domain_split(&self, label: usize, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.split == split && i.label == label).collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Image>> {
        self.split(split).into_iter().map(DatasetItem::load).collect()
    }

    /// Keeps only the listed labels, relabeled in the given order.
    pub fn restrict(&self, labels: &[usize]) -> Result<DomainDataset> {
        let mut domains = Vec::with_capacity(labels.len());
        for &l in labels {
            domains.push(self.domains.get(l).cloned().ok_or_else(|| Error::Config(format!("no domain label {l}")))?);
        }
        let items = self
            .items
            .iter()
            .filter_map(|i| labels.iter().position(|&l| l == i.label).map(|nl| DatasetItem { label: nl, ..i.clone() }))
            .collect();
        Ok(DomainDataset { domains, items })
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("dataset has no domains".into()));
        }
        for (label, name) in self.domains.iter().enumerate() {
            if !self.items.iter().any(|i| i.label == label) {
                return Err(Error::Config(format!("domain {name:?} has no images")));
            }
            if !self.items.iter().any(|i| i.label == label && i.split == Split::Train) {
                return Err(Error::Config(format!("domain {name:?} has no training images")));
            }
        }
        if let Some(bad) = self.items.iter().find(|i| i.label >= self.domains.len()) {
            return Err(Error::Config(format!("item {} has label {} outside [0, {}]", bad.name, bad.label, self.k())));
        }
        Ok(())
    }

    /// Text manifest, one `split label domain name` line per item.
    pub fn manifest(&self) -> String {
        let mut out = String::from("# split\tlabel\tdomain\tname\n");
        let mut items: Vec<&DatasetItem> = self.items.iter().collect();
        items.sort_by(|a, b| (a.split, a.label, &a.name).cmp(&(b.split, b.label, &b.name)));
        for i in items {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", i.split, i.label, self.domains[i.label], i.name));
        }
        out
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn counts(&self) -> BTreeMap<(Split, usize), usize> {
        let mut m = BTreeMap::new();
        for i in &self.items {
            *m.entry((i.split, i.label)).or_insert(0) += 1;
        }
        m
    }
}

/// A synthetic dataset, one kind per domain in label order.
pub fn synthetic_dataset(
    kinds: &[SyntheticKind],
    per_domain: usize,
    height: usize,
    width: usize,
    seed: u64,
    fractions: SplitFractions,
) -> Result<DomainDataset> {
    if height < 64 || width < 64 {
        return Err(Error::Config(format!("synthetic images must be at least 64x64, got {height}x{width}")));
    }
    let mut items = Vec::with_capacity(kinds.len() * per_domain);
    for (label, &kind) in kinds.iter().enumerate() {
        for index in 0..per_domain {
            let name = format!("{}-{index:05}", kind.domain_name());
            items.push(DatasetItem {
                split: assign_split(seed, &name, fractions),
                name,
                label,
                source: ItemSource::Synthetic { kind, seed, height, width, index },
            });
        }
    }
    let ds = DomainDataset { domains: kinds.iter().map(|k| k.domain_name().to_string()).collect(), items };
    ds.validate()?;
    Ok(ds)
}

fn is_rgb_png(path: &Path) -> std::result::Result<bool, String> {
    let reader = image::ImageReader::open(path).map_err(|e| e.to_string())?;
    let reader = reader.with_guessed_format().map_err(|e| e.to_string())?;
    let img = reader.decode().map_err(|e| e.to_string())?;
    Ok(matches!(img.color(), image::ColorType::Rgb8 | image::ColorType::Rgba8 | image::ColorType::Rgb16 | image::ColorType::Rgba16))
}

/// Reads `root/<domain>/*.png`. The source domain gets label 0; the others
/// follow `order` if given, otherwise sorted directory names. Unreadable or
/// non-RGB files are skipped with a warning.
pub fn ingest_directory(
    root: impl AsRef<Path>,
    source_domain: &str,
    order: Option<&[String]>,
    seed: u64,
    fractions: SplitFractions,
) -> Result<DomainDataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let mut dirs: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    dirs.sort();
    if !dirs.iter().any(|d| d == source_domain) {
        return Err(Error::Config(format!("source domain directory {source_domain:?} missing under {}", root.display())));
    }
    let mut domains = vec![source_domain.to_string()];
    match order {
        Some(order) => {
            for d in order.iter().filter(|d| d.as_str() != source_domain) {
                if !dirs.contains(d) {
                    return Err(Error::Config(format!("domain directory {d:?} missing under {}", root.display())));
                }
                domains.push(d.clone());
            }
        }
        None => domains.extend(dirs.iter().filter(|d| d.as_str() != source_domain).cloned()),
    }
    let mut items = Vec::new();
    for (label, domain) in domains.iter().enumerate() {
        let dir = root.join(domain);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut kept = 0;
        for path in files {
            match is_rgb_png(&path) {
                Ok(true) => {}
                Ok(false) => {
                    log::warn!("skipping non-RGB image {}", path.display());
                    continue;
                }
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    continue;
                }
            }
            let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
            let name = format!("{domain}/{file}");
            items.push(DatasetItem { split: assign_split(seed, &name, fractions), name, label, source: ItemSource::Path(path) });
            kept += 1;
        }
        if kept == 0 {
            return Err(Error::Config(format!("domain {domain:?} has no readable RGB images")));
        }
    }
    let ds = DomainDataset { domains, items };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------- batching

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 3, crop, crop]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Draws one epoch of batches. Every domain contributes the same number of
/// samples (smaller domains are revisited in reshuffled order), the union
/// is shuffled, and each sample gets a random `crop x crop` window and an
/// optional horizontal flip. A trailing partial batch is kept.
pub fn epoch_batches(
    images: &[Image],
    batch_size: usize,
    crop: usize,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        if img.height() < crop || img.width() < crop {
            return Err(Error::Config(format!("crop {crop} larger than {}x{} image", img.height(), img.width())));
        }
        by_label.entry(img.domain_label.unwrap_or(0)).or_default().push(i);
    }
    let per_domain = by_label.values().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(per_domain * by_label.len());
    for idx in by_label.values() {
        let mut drawn = Vec::with_capacity(per_domain);
        while drawn.len() < per_domain {
            let mut pass = idx.clone();
            pass.shuffle(rng);
            drawn.extend(pass.into_iter().take(per_domain - drawn.len()));
        }
        order.extend(drawn);
    }
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut crops = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let img = &images[i];
            let top = rng.gen_range(0..=img.height() - crop);
            let left = rng.gen_range(0..=img.width() - crop);
            let mut c = img.crop(top, left, crop, crop)?;
            if augment && rng.gen_bool(0.5) {
                c = c.flip_horizontal();
            }
            crops.push(c);
        }
        let labels = crops.iter().map(|c| c.domain_label.unwrap_or(0)).collect();
        batches.push(Batch { images: batch_tensor(&crops)?, labels });
    }
    Ok(batches)
}
