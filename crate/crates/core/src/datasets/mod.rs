//! Synthetic benchmarks, house-number ingestion and the on-disk dataset format.

pub mod glyphs;
pub mod sources;
pub mod svhn;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{purpose, substream};
use crate::types::{Image, LabeledSample, Rect};
pub use sources::{BaseImages, BaseSource};

/// Bumped whenever a generator's output for a given (seed, index) changes.
pub const GENERATOR_VERSION: u32 = 1;

pub const ANOMALY_SIDE: (usize, usize) = (3, 10);
pub const MULTI_CANVAS: usize = 56;
pub const MULTI_SHIFT: i64 = 4;
pub const ANCHOR_CANVAS: usize = 40;
pub const ANCHOR_NOISE_MAX: f32 = 0.2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<bool>,
    /// Inserted anomaly rectangle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_digit: Option<Rect>,
    /// `(row, column)` centre of the small digit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_center: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchors: Vec<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digit_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number_bbox: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub generator_version: u32,
    pub seed: u64,
    pub count: usize,
    /// `[height, width, channels]`.
    pub image_shape: [usize; 3],
    pub categories: usize,
    /// Source items dropped because no valid sample could be formed.
    #[serde(default)]
    pub skipped: usize,
    /// SHA-256 of each array file.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LabeledSample>,
    pub meta: Vec<SampleMeta>,
}

impl Dataset {
    /// In-memory dataset with default metadata; every image must share one shape.
    pub fn from_samples(name: &str, samples: Vec<LabeledSample>, categories: usize) -> Result<Self> {
        let shape = samples
            .first()
            .map(|s| s.image.shape())
            .ok_or_else(|| Error::data("dataset needs at least one sample"))?;
        if let Some(s) = samples.iter().find(|s| s.image.shape() != shape || s.label >= categories) {
            return Err(Error::data(format!(
                "sample {:?} with label {} does not fit {shape:?} and {categories} categories",
                s.image.shape(),
                s.label
            )));
        }
        let meta = samples
            .iter()
            .enumerate()
            .map(|(index, s)| SampleMeta {
                index,
                label: s.label,
                ..SampleMeta::default()
            })
            .collect();
        Ok(Dataset {
            manifest: DatasetManifest {
                name: name.into(),
                generator_version: GENERATOR_VERSION,
                seed: 0,
                count: samples.len(),
                image_shape: shape,
                categories,
                skipped: 0,
                checksums: BTreeMap::new(),
            },
            samples,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.manifest.image_shape
    }

    pub fn categories(&self) -> usize {
        self.manifest.categories
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// The first `count` samples.
    pub fn take(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        let mut manifest = self.manifest.clone();
        manifest.count = count;
        manifest.checksums.clear();
        Dataset {
            manifest,
            samples: self.samples[..count].to_vec(),
            meta: self.meta[..count].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    AnomalyMnist,
    AnomalyCifar,
    MultiDigit(usize),
    Anchors { noise: bool },
}

impl DatasetKind {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "anomaly-mnist" => DatasetKind::AnomalyMnist,
            "anomaly-cifar" => DatasetKind::AnomalyCifar,
            "multidigit-2" => DatasetKind::MultiDigit(2),
            "multidigit-4" => DatasetKind::MultiDigit(4),
            "anchors" => DatasetKind::Anchors { noise: false },
            "anchors-noise" => DatasetKind::Anchors { noise: true },
            _ => return None,
        })
    }

    pub fn name(&self) -> String {
        match self {
            DatasetKind::AnomalyMnist => "anomaly-mnist".into(),
            DatasetKind::AnomalyCifar => "anomaly-cifar".into(),
            DatasetKind::MultiDigit(n) => format!("multidigit-{n}"),
            DatasetKind::Anchors { noise: false } => "anchors".into(),
            DatasetKind::Anchors { noise: true } => "anchors-noise".into(),
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetKind::AnomalyMnist => [28, 28, 1],
            DatasetKind::AnomalyCifar => [32, 32, 3],
            DatasetKind::MultiDigit(_) => [MULTI_CANVAS, MULTI_CANVAS, 1],
            DatasetKind::Anchors { .. } => [ANCHOR_CANVAS, ANCHOR_CANVAS, 1],
        }
    }

    pub fn categories(&self) -> usize {
        match self {
            DatasetKind::AnomalyMnist | DatasetKind::AnomalyCifar => 2,
            DatasetKind::MultiDigit(_) => 10,
            DatasetKind::Anchors { .. } => 5,
        }
    }
}

/// Anchor squares: side length and top-left corners on the 40x40 canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLayout {
    pub side: usize,
    pub corners: Vec<(usize, usize)>,
}

impl Default for AnchorLayout {
    fn default() -> Self {
        AnchorLayout {
            side: 6,
            corners: vec![(2, 2), (2, 32), (32, 2), (32, 32)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub kind: DatasetKind,
    pub base: BaseSource,
    pub anchors: AnchorLayout,
}

impl GeneratorConfig {
    pub fn procedural(kind: DatasetKind) -> Self {
        GeneratorConfig {
            kind,
            base: BaseSource::Procedural,
            anchors: AnchorLayout::default(),
        }
    }
}

/// Generate `count` samples; sample `k` depends only on `(seed, k)`.
pub fn generate(config: &GeneratorConfig, seed: u64, count: usize) -> Result<Dataset> {
    let base = BaseImages::load(&config.base)?;
    let mut samples = Vec::with_capacity(count);
    let mut meta = Vec::with_capacity(count);
    for index in 0..count {
        let (s, m) = generate_sample(config, &base, seed, index)?;
        samples.push(s);
        meta.push(m);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            name: config.kind.name(),
            generator_version: GENERATOR_VERSION,
            seed,
            count,
            image_shape: config.kind.image_shape(),
            categories: config.kind.categories(),
            skipped: 0,
            checksums: BTreeMap::new(),
        },
        samples,
        meta,
    })
}

pub fn generate_sample(
    config: &GeneratorConfig,
    base: &BaseImages,
    seed: u64,
    index: usize,
) -> Result<(LabeledSample, SampleMeta)> {
    let mut rng = substream(seed, &[purpose::DATA, index as u64]);
    let (image, mut meta) = match &config.kind {
        DatasetKind::AnomalyMnist | DatasetKind::AnomalyCifar => anomaly_sample(&config.kind, base, &mut rng)?,
        DatasetKind::MultiDigit(n) => multidigit_sample(*n, base, &mut rng)?,
        DatasetKind::Anchors { noise } => anchors_sample(*noise, &config.anchors, base, &mut rng)?,
    };
    meta.index = index;
    let sample = LabeledSample::new(image, meta.label, config.kind.categories())?;
    Ok((sample, meta))
}

pub fn gen_anomaly(base: BaseSource, cifar: bool, count: usize, seed: u64) -> Result<Dataset> {
    let kind = if cifar {
        DatasetKind::AnomalyCifar
    } else {
        DatasetKind::AnomalyMnist
    };
    generate(
        &GeneratorConfig {
            base,
            ..GeneratorConfig::procedural(kind)
        },
        seed,
        count,
    )
}

pub fn gen_multidigit(digits: usize, count: usize, seed: u64) -> Result<Dataset> {
    if digits != 2 && digits != 4 {
        return Err(Error::config(format!("multi-digit composites hold 2 or 4 digits, not {digits}")));
    }
    generate(&GeneratorConfig::procedural(DatasetKind::MultiDigit(digits)), seed, count)
}

pub fn gen_anchors(count: usize, seed: u64, noise: bool) -> Result<Dataset> {
    generate(&GeneratorConfig::procedural(DatasetKind::Anchors { noise }), seed, count)
}

fn random_rect<R: Rng>(h: usize, w: usize, side: (usize, usize), rng: &mut R) -> Rect {
    let rh = rng.gen_range(side.0..=side.1);
    let rw = rng.gen_range(side.0..=side.1);
    Rect::new(rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw), rh, rw)
}

fn anomaly_sample<R: Rng>(kind: &DatasetKind, base: &BaseImages, rng: &mut R) -> Result<(Image, SampleMeta)> {
    let cifar = *kind == DatasetKind::AnomalyCifar;
    let [h, w, c] = kind.image_shape();
    let pixels = if cifar { base.object(rng) } else { base.digit(28, rng).0 };
    let mut image = Image::new(h, w, c, pixels)?;
    let altered = rng.gen_bool(0.5);
    let mut meta = SampleMeta {
        label: altered as usize,
        anomaly: Some(altered),
        ..SampleMeta::default()
    };
    if altered {
        let rect = random_rect(h, w, ANOMALY_SIDE, rng);
        let fill: Vec<f32> = if cifar {
            (0..3).map(|_| rng.gen::<f32>()).collect()
        } else {
            vec![rng.gen_range(100.0 / 255.0..=1.0f32)]
        };
        for y in rect.top..rect.top + rect.height {
            for x in rect.left..rect.left + rect.width {
                for (ch, &v) in fill.iter().enumerate() {
                    image.set(y, x, ch, v);
                }
            }
        }
        meta.rect = Some(rect);
    }
    Ok((image, meta))
}

/// Max-composite a square single-channel patch at a possibly negative offset.
fn paste_max(canvas: &mut [f32], canvas_side: usize, patch: &[f32], side: usize, top: i64, left: i64) {
    for y in 0..side {
        for x in 0..side {
            let (cy, cx) = (top + y as i64, left + x as i64);
            if cy >= 0 && cx >= 0 && (cy as usize) < canvas_side && (cx as usize) < canvas_side {
                let dst = &mut canvas[cy as usize * canvas_side + cx as usize];
                *dst = dst.max(patch[y * side + x]);
            }
        }
    }
}

fn multidigit_sample<R: Rng>(digits: usize, base: &BaseImages, rng: &mut R) -> Result<(Image, SampleMeta)> {
    let side = MULTI_CANVAS;
    let small = if digits == 2 { 18 } else { 14 };
    let mut quadrants: Vec<usize> = (0..4).collect();
    for i in 0..3 {
        let j = rng.gen_range(i..4);
        quadrants.swap(i, j);
    }
    let mut canvas = vec![0.0f32; side * side];
    let label = rng.gen_range(0..10);
    let mut meta = SampleMeta {
        label,
        ..SampleMeta::default()
    };
    for (k, &q) in quadrants[..digits].iter().enumerate() {
        let (oy, ox) = ((q / 2 * 28) as i64, (q % 2 * 28) as i64);
        let dy = rng.gen_range(-MULTI_SHIFT..=MULTI_SHIFT);
        let dx = rng.gen_range(-MULTI_SHIFT..=MULTI_SHIFT);
        if k == 0 {
            let patch = base.digit_of_class(label, small, rng);
            let inset = ((28 - small) / 2) as i64;
            let (top, left) = (oy + inset + dy, ox + inset + dx);
            paste_max(&mut canvas, side, &patch, small, top, left);
            meta.small_digit = Some(Rect::new(top as usize, left as usize, small, small));
            let half = small as f64 / 2.0;
            meta.small_center = Some([top as f64 + half, left as f64 + half]);
        } else {
            let (patch, _) = base.digit(28, rng);
            paste_max(&mut canvas, side, &patch, 28, oy + dy, ox + dx);
        }
    }
    meta.digit_count = Some(digits);
    Ok((Image::new(side, side, 1, canvas)?, meta))
}

fn anchors_sample<R: Rng>(
    noise: bool,
    layout: &AnchorLayout,
    base: &BaseImages,
    rng: &mut R,
) -> Result<(Image, SampleMeta)> {
    let side = ANCHOR_CANVAS;
    let label = rng.gen_range(0..5);
    let patch = base.digit_of_class(label, 28, rng);
    let mut canvas = vec![0.0f32; side * side];
    let (dy, dx) = (rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2));
    paste_max(&mut canvas, side, &patch, 28, 6 + dy, 6 + dx);
    let mut anchors = Vec::with_capacity(layout.corners.len());
    for &(top, left) in &layout.corners {
        let r = Rect::new(top, left, layout.side, layout.side);
        if !r.fits(side, side) {
            return Err(Error::config(format!("anchor {r:?} leaves the {side}x{side} canvas")));
        }
        for y in top..top + layout.side {
            for x in left..left + layout.side {
                canvas[y * side + x] = 1.0;
            }
        }
        anchors.push(r);
    }
    if noise {
        for v in canvas.iter_mut() {
            *v = (*v + rng.gen_range(0.0..ANCHOR_NOISE_MAX)).min(1.0);
        }
    }
    Ok((
        Image::new(side, side, 1, canvas)?,
        SampleMeta {
            label,
            anchors,
            ..SampleMeta::default()
        },
    ))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_arrays(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    let mut images = Vec::with_capacity(ds.len() * ds.image_shape().iter().product::<usize>() * 4);
    for s in &ds.samples {
        for &p in s.image.pixels() {
            images.extend_from_slice(&p.to_le_bytes());
        }
    }
    let mut labels = Vec::with_capacity(ds.len() * 4);
    for s in &ds.samples {
        labels.extend_from_slice(&(s.label as i32).to_le_bytes());
    }
    let mut meta = Vec::new();
    for m in &ds.meta {
        serde_json::to_writer(&mut meta, m)?;
        meta.push(b'\n');
    }
    Ok((images, labels, meta))
}

/// Write `manifest.json`, `images.bin`, `labels.bin` and `meta.jsonl` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (images, labels, meta) = encode_arrays(ds)?;
    let mut manifest = ds.manifest.clone();
    manifest.count = ds.len();
    manifest.checksums = BTreeMap::from([
        ("images.bin".to_string(), sha256_hex(&images)),
        ("labels.bin".to_string(), sha256_hex(&labels)),
        ("meta.jsonl".to_string(), sha256_hex(&meta)),
    ]);
    std::fs::write(dir.join("images.bin"), images)?;
    std::fs::write(dir.join("labels.bin"), labels)?;
    std::fs::write(dir.join("meta.jsonl"), meta)?;
    let mut w = BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_checked(dir: &Path, name: &str, manifest: &DatasetManifest) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|_| Error::MissingData {
        path: path.clone(),
        hint: "dataset directory is incomplete".into(),
    })?;
    match manifest.checksums.get(name) {
        Some(want) if *want == sha256_hex(&bytes) => Ok(bytes),
        _ => Err(Error::Checksum(path.display().to_string())),
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| Error::MissingData {
        path: manifest_path.clone(),
        hint: "not a dataset directory".into(),
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checksum(format!("{}: {e}", manifest_path.display())))?;
    let images = read_checked(dir, "images.bin", &manifest)?;
    let labels = read_checked(dir, "labels.bin", &manifest)?;
    let meta_bytes = read_checked(dir, "meta.jsonl", &manifest)?;
    let [h, w, c] = manifest.image_shape;
    let per = h * w * c;
    if images.len() != manifest.count * per * 4 || labels.len() != manifest.count * 4 {
        return Err(Error::Checksum(format!(
            "{}: array extents disagree with {} samples of {h}x{w}x{c}",
            dir.display(),
            manifest.count
        )));
    }
    let mut meta = Vec::with_capacity(manifest.count);
    for line in BufReader::new(meta_bytes.as_slice()).lines() {
        let line = line?;
        if !line.is_empty() {
            meta.push(serde_json::from_str::<SampleMeta>(&line)?);
        }
    }
    if meta.len() != manifest.count {
        return Err(Error::Checksum(format!("{}: {} metadata records", dir.display(), meta.len())));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let px: Vec<f32> = images[i * per * 4..(i + 1) * per * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let l = i32::from_le_bytes([labels[i * 4], labels[i * 4 + 1], labels[i * 4 + 2], labels[i * 4 + 3]]);
        if l < 0 {
            return Err(Error::data(format!("negative label at sample {i}")));
        }
        samples.push(LabeledSample::new(Image::new(h, w, c, px)?, l as usize, manifest.categories)?);
    }
    Ok(Dataset {
        manifest,
        samples,
        meta,
    })
}

#[cfg(test)]
mod tests;
