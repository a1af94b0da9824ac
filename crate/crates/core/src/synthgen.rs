//! Deterministic synthetic images whose attributes live in known regions.
//!
//! Each image shows a colored garment on a gray background. The color is
//! global; one glyph sits in the top third, one in the bottom third, and a
//! stripe texture covers the middle band. Flipping a localized attribute
//! only changes pixels inside its band.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How an attribute is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeRole {
    BodyColor,
    TopShape,
    BottomShape,
    Pattern,
}

impl AttributeRole {
    fn max_values(self) -> usize {
        match self {
            AttributeRole::BodyColor => 12,
            AttributeRole::TopShape | AttributeRole::BottomShape => GLYPHS.len(),
            AttributeRole::Pattern => PATTERNS.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub role: AttributeRole,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

const GLYPHS: [&str; 6] = ["circle", "square", "triangle", "cross", "diamond", "ring"];
const PATTERNS: [&str; 6] = ["plain", "horizontal", "vertical", "diagonal", "checker", "dots"];

impl Default for AttributeSchema {
    fn default() -> Self {
        let attr = |name: &str, role, values: &[&str]| Attribute {
            name: name.into(),
            role,
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        let shapes = ["circle", "square", "triangle", "cross"];
        AttributeSchema {
            attributes: vec![
                attr("body-color", AttributeRole::BodyColor, &["red", "lime", "cyan", "violet"]),
                attr("top-shape", AttributeRole::TopShape, &shapes),
                attr("bottom-shape", AttributeRole::BottomShape, &shapes),
                attr("pattern", AttributeRole::Pattern, &["plain", "horizontal", "vertical", "diagonal"]),
            ],
        }
    }
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.len() < 2 {
            return Err(Error::Argument("schema needs at least 2 attributes".into()));
        }
        let mut names = HashSet::new();
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Argument(format!("duplicate attribute '{}'", a.name)));
            }
            if a.values.len() < 2 {
                return Err(Error::Argument(format!("attribute '{}' needs at least 2 values", a.name)));
            }
            if a.values.len() > a.role.max_values() {
                return Err(Error::Argument(format!(
                    "attribute '{}' has {} values; role supports at most {}",
                    a.name,
                    a.values.len(),
                    a.role.max_values()
                )));
            }
            let unique: HashSet<_> = a.values.iter().collect();
            if unique.len() != a.values.len() {
                return Err(Error::Argument(format!("attribute '{}' repeats a value name", a.name)));
            }
        }
        Ok(())
    }

    /// Number of attributes (A).
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn value_count(&self, a: usize) -> usize {
        self.attributes[a].values.len()
    }

    /// Total number of attribute values (C).
    pub fn total_values(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).sum()
    }

    /// Row of `(a, 0)` in the canonical attribute-major, value-minor order.
    pub fn row_offset(&self, a: usize) -> usize {
        self.attributes[..a].iter().map(|a| a.values.len()).sum()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn value_index(&self, a: usize, value: &str) -> Option<usize> {
        self.attributes.get(a)?.values.iter().position(|v| v == value)
    }

    pub fn validate_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Argument(format!(
                "expected {} labels, got {}",
                self.len(),
                labels.len()
            )));
        }
        for (a, &v) in labels.iter().enumerate() {
            if v >= self.value_count(a) {
                return Err(Error::Argument(format!(
                    "label {v} out of range for attribute '{}'",
                    self.attributes[a].name
                )));
            }
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `H×W×3` in `[0, 1]`, quantized to 8-bit levels.
    pub pixels: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f32,
    /// Maximum glyph displacement in pixels along each axis.
    pub jitter: i32,
    /// When set, bottom-shape copies top-shape for half of the images.
    pub correlated: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, noise_sigma: 0.02, jitter: 2, correlated: false }
    }
}

pub fn image_id(index: usize) -> String {
    format!("img{index:06}")
}

/// Band of rows `[start, end)` owned by a localized role.
pub fn band_rows(role: AttributeRole, height: usize) -> (usize, usize) {
    let third = height / 3;
    match role {
        AttributeRole::TopShape => (0, third),
        AttributeRole::Pattern => (third, height - third),
        AttributeRole::BottomShape => (height - third, height),
        AttributeRole::BodyColor => (0, height),
    }
}

pub fn generate_dataset(schema: &AttributeSchema, n: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    generate_dataset_with(schema, n, seed, &GenConfig::default())
}

pub fn generate_dataset_with(
    schema: &AttributeSchema,
    n: usize,
    seed: u64,
    config: &GenConfig,
) -> Result<Vec<LabeledImage>> {
    schema.validate()?;
    if n < 1 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    if config.height < 24 || config.width < 24 {
        return Err(Error::Argument("images must be at least 24×24".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
        label_rng.set_stream(2 * i as u64);
        let mut labels: Vec<usize> =
            (0..schema.len()).map(|a| label_rng.gen_range(0..schema.value_count(a))).collect();
        if config.correlated && label_rng.gen_bool(0.5) {
            correlate(schema, &mut labels);
        }
        let nuisance = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(2 * i as u64 + 1));
        let pixels = render(schema, &labels, nuisance, config)?;
        out.push(LabeledImage { id: image_id(i), pixels, labels });
    }
    Ok(out)
}

fn correlate(schema: &AttributeSchema, labels: &mut [usize]) {
    let find = |role| schema.attributes.iter().position(|a| a.role == role);
    if let (Some(t), Some(b)) = (find(AttributeRole::TopShape), find(AttributeRole::BottomShape)) {
        if labels[t] < schema.value_count(b) {
            labels[b] = labels[t];
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn glyph_contains(glyph: usize, dy: f32, dx: f32, r: f32) -> bool {
    match GLYPHS[glyph] {
        "circle" => dy * dy + dx * dx <= r * r,
        "square" => dy.abs() <= r * 0.8 && dx.abs() <= r * 0.8,
        "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.6,
        "cross" => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
        "diamond" => dy.abs() + dx.abs() <= r,
        _ => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

fn pattern_dark(pattern: usize, y: usize, x: usize) -> bool {
    match PATTERNS[pattern] {
        "plain" => false,
        "horizontal" => (y / 3) % 2 == 0,
        "vertical" => (x / 3) % 2 == 0,
        "diagonal" => ((y + x) / 3) % 2 == 0,
        "checker" => (y / 4 + x / 4) % 2 == 0,
        _ => y % 4 == 0 && x % 4 == 0,
    }
}

/// Glyph placement `(center_row, center_col, radius)` for a localized role.
fn glyph_center(role: AttributeRole, config: &GenConfig, jitter: (i32, i32)) -> (f32, f32, f32) {
    let (start, end) = band_rows(role, config.height);
    let cy = (start + end) as f32 / 2.0 - 0.5 + jitter.0 as f32;
    let cx = config.width as f32 / 2.0 - 0.5 + jitter.1 as f32;
    let r = (config.height / 3) as f32 / 2.0 - config.jitter as f32 - 1.5;
    (cy, cx, r.max(2.0))
}

/// Draws one image. `nuisance` seeds jitter and pixel noise independently
/// of the labels, so renders with equal `nuisance` differ only where the
/// labels differ.
pub fn render(
    schema: &AttributeSchema,
    labels: &[usize],
    nuisance: u64,
    config: &GenConfig,
) -> Result<Tensor<f32>> {
    schema.validate_labels(labels)?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(nuisance);
    let jitters: Vec<(i32, i32)> = schema
        .attributes
        .iter()
        .map(|_| {
            (
                rng.gen_range(-config.jitter..=config.jitter),
                rng.gen_range(-config.jitter..=config.jitter),
            )
        })
        .collect();

    let margin_x = w / 8;
    let mut body = [0.5f32; 3];
    for (a, attr) in schema.attributes.iter().enumerate() {
        if attr.role == AttributeRole::BodyColor {
            body = hsv_to_rgb(labels[a] as f32 / attr.values.len() as f32, 0.75, 0.9);
        }
    }

    let mut px = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let in_garment = y >= 1 && y + 1 < h && x >= margin_x && x + margin_x < w;
            let mut c = if in_garment { body } else { [0.5; 3] };
            if in_garment {
                for (a, attr) in schema.attributes.iter().enumerate() {
                    if attr.role != AttributeRole::Pattern {
                        continue;
                    }
                    let (start, end) = band_rows(attr.role, h);
                    if y >= start && y < end && pattern_dark(labels[a], y, x) {
                        c = c.map(|v| v * 0.45);
                    }
                }
            }
            for (a, attr) in schema.attributes.iter().enumerate() {
                if !matches!(attr.role, AttributeRole::TopShape | AttributeRole::BottomShape) {
                    continue;
                }
                let (cy, cx, r) = glyph_center(attr.role, config, jitters[a]);
                if glyph_contains(labels[a], y as f32 - cy, x as f32 - cx, r) {
                    c = [0.05; 3];
                }
            }
            px[(y * w + x) * 3..][..3].copy_from_slice(&c);
        }
    }

    let noise = Normal::new(0.0f32, config.noise_sigma.max(0.0)).expect("finite sigma");
    for v in px.iter_mut() {
        let n = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = quantize(*v + n);
    }
    Tensor::new([h, w, 3], px)
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub query: Vec<String>,
    pub gallery: Vec<String>,
}

/// Seeded shuffle, then query, gallery, and the remainder as train.
pub fn split(dataset: &[LabeledImage], n_query: usize, n_gallery: usize, seed: u64) -> Result<DatasetSplit> {
    if n_query + n_gallery >= dataset.len() {
        return Err(Error::Argument(format!(
            "{n_query} query + {n_gallery} gallery images leave no training data out of {}",
            dataset.len()
        )));
    }
    let mut ids: Vec<String> = dataset.iter().map(|d| d.id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = ids.split_off(n_query + n_gallery);
    let gallery = ids.split_off(n_query);
    Ok(DatasetSplit { train, query: ids, gallery })
}

/// Every `(attribute, value)` change of `query` that has an exact
/// post-manipulation match among `gallery`.
pub fn manipulations_available(query: &[usize], gallery: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let index: HashSet<&[usize]> = gallery.iter().map(Vec::as_slice).collect();
    let max_values: Vec<usize> = (0..query.len())
        .map(|a| gallery.iter().map(|l| l[a] + 1).max().unwrap_or(0))
        .collect();
    let mut out = Vec::new();
    let mut target = query.to_vec();
    for a in 0..query.len() {
        for v in 0..max_values[a] {
            if v == query[a] {
                continue;
            }
            target[a] = v;
            if index.contains(target.as_slice()) {
                out.push((a, v));
            }
        }
        target[a] = query[a];
    }
    out
}

/// On-disk dataset: `schema.json`, `manifest.jsonl`, `split.json`, `images/*.png`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub images: Vec<LabeledImage>,
    pub split: DatasetSplit,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    labels: Vec<usize>,
    file: String,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&LabeledImage> {
        // ids are zero-padded and written in order
        self.images
            .binary_search_by(|img| img.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.images[i])
            .or_else(|| self.images.iter().find(|img| img.id == id))
    }

    pub fn subset(&self, ids: &[String]) -> Result<Vec<&LabeledImage>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Argument(format!("unknown image id '{id}'"))))
            .collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("schema.json", self.schema.to_canonical_json())?;
        write("split.json", serde_json::to_string_pretty(&self.split)?)?;
        let mut manifest = String::new();
        for img in &self.images {
            let file = format!("images/{}.png", img.id);
            save_png(&dir.join(&file), &img.pixels)?;
            let rec = ManifestRecord { id: img.id.clone(), labels: img.labels.clone(), file };
            manifest.push_str(&serde_json::to_string(&rec)?);
            manifest.push('\n');
        }
        write("manifest.jsonl", manifest)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let schema: AttributeSchema = serde_json::from_str(&read("schema.json")?)?;
        schema.validate()?;
        let split: DatasetSplit = serde_json::from_str(&read("split.json")?)?;
        let mut images = Vec::new();
        for line in read("manifest.jsonl")?.lines().filter(|l| !l.trim().is_empty()) {
            let rec: ManifestRecord = serde_json::from_str(line)?;
            schema.validate_labels(&rec.labels)?;
            let pixels = load_png(&dir.join(&rec.file))?;
            images.push(LabeledImage { id: rec.id, pixels, labels: rec.labels });
        }
        images.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self { schema, images, split })
    }
}

pub fn to_rgb8(pixels: &Tensor<f32>) -> Result<image::RgbImage> {
    pixels.expect_rank(3)?;
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let bytes = pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Dimension(format!("pixels {:?} are not RGB", pixels.shape())))
}

pub fn save_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    to_rgb8(pixels)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new([h as usize, w as usize, 3], data)
}
