//! House-number ingestion: constrained random crops resized to 128x128, labelled by digit count.
//!
//! A source directory holds `index.csv` with the header `file,digit_count,x0,y0,x1,y1`
//! (number bounding box in source pixels, `x1`/`y1` exclusive) next to the listed PNG files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use super::glyphs::render_digit;
use super::{Dataset, DatasetManifest, SampleMeta, GENERATOR_VERSION};
use crate::autodiff::AxisTaps;
use crate::error::{Error, Result};
use crate::rng::{purpose, substream};
use crate::types::{Image, LabeledSample, Rect};

pub const SVHN_SIDE: usize = 128;
pub const SVHN_CATEGORIES: usize = 4;
pub const MIN_COVERAGE: f64 = 0.4;
pub const MIN_RETENTION: f64 = 0.95;
pub const ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SourceEntry {
    pub file: String,
    pub digit_count: usize,
    /// `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

pub fn read_index(dir: &Path) -> Result<Vec<SourceEntry>> {
    let path = dir.join("index.csv");
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingData {
        path: path.clone(),
        hint: "house-number source needs index.csv with file,digit_count,x0,y0,x1,y1".into(),
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<usize> {
            f.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::data(format!("{}:{}: bad field {i}", path.display(), n + 1)))
        };
        let entry = SourceEntry {
            file: f[0].to_string(),
            digit_count: num(1)?,
            bbox: (num(2)?, num(3)?, num(4)?, num(5)?),
        };
        if entry.bbox.0 >= entry.bbox.2 || entry.bbox.1 >= entry.bbox.3 {
            return Err(Error::data(format!("{}:{}: empty bounding box", path.display(), n + 1)));
        }
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::data(format!("{} lists no images", path.display())));
    }
    Ok(out)
}

fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("unreadable source image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(
        h as usize,
        w as usize,
        3,
        img.into_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

/// Bilinear resize of an HWC crop `(top, left, height, width)` to `side x side`.
pub fn resize_crop(src: &Image, crop: Rect, side: usize) -> Image {
    let c = src.channels();
    let ty = AxisTaps::new(crop.height, side);
    let tx = AxisTaps::new(crop.width, side);
    let mut out = vec![0.0f32; side * side * c];
    for oy in 0..side {
        let (y0, y1, fy) = (crop.top + ty.lo[oy], crop.top + ty.hi[oy], ty.frac[oy]);
        for ox in 0..side {
            let (x0, x1, fx) = (crop.left + tx.lo[ox], crop.left + tx.hi[ox], tx.frac[ox]);
            for ch in 0..c {
                let p = |y, x| src.get(y, x, ch) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * side + ox) * c + ch] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(side, side, c, out).expect("resized values stay in range")
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

/// Fraction of the number box `(x0, y0, x1, y1)` kept by `crop`.
pub fn retention(bbox: (usize, usize, usize, usize), crop: Rect) -> f64 {
    let ix = overlap((bbox.0, bbox.2), (crop.left, crop.left + crop.width));
    let iy = overlap((bbox.1, bbox.3), (crop.top, crop.top + crop.height));
    (ix * iy) as f64 / ((bbox.2 - bbox.0) * (bbox.3 - bbox.1)) as f64
}

pub fn crop_is_valid(bbox: (usize, usize, usize, usize), crop: Rect, height: usize, width: usize) -> bool {
    let aspect = crop.width as f64 / crop.height as f64;
    crop.fits(height, width)
        && crop.area() as f64 >= MIN_COVERAGE * (height * width) as f64
        && (ASPECT_RANGE.0..=ASPECT_RANGE.1).contains(&aspect)
        && retention(bbox, crop) >= MIN_RETENTION
}

fn sample_crop<R: Rng>(entry: &SourceEntry, height: usize, width: usize, rng: &mut R) -> Option<Rect> {
    let area = (height * width) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let a = rng.gen_range(MIN_COVERAGE..=1.0) * area;
        let r = rng.gen_range(ASPECT_RANGE.0..=ASPECT_RANGE.1);
        let cw = ((a * r).sqrt().ceil() as usize).max(1);
        let ch = ((a / r).sqrt().ceil() as usize).max(1);
        if cw > width || ch > height {
            continue;
        }
        let crop = Rect::new(rng.gen_range(0..=height - ch), rng.gen_range(0..=width - cw), ch, cw);
        if crop_is_valid(entry.bbox, crop, height, width) {
            return Some(crop);
        }
    }
    None
}

/// Number box mapped into output coordinates of a crop resized to `side`.
fn mapped_bbox(bbox: (usize, usize, usize, usize), crop: Rect, side: usize) -> Rect {
    let sx = side as f64 / crop.width as f64;
    let sy = side as f64 / crop.height as f64;
    let map = |v: usize, origin: usize, extent: usize, s: f64| -> f64 {
        (v.clamp(origin, origin + extent) - origin) as f64 * s
    };
    let x0 = map(bbox.0, crop.left, crop.width, sx).floor() as usize;
    let x1 = (map(bbox.2, crop.left, crop.width, sx).ceil() as usize).min(side);
    let y0 = map(bbox.1, crop.top, crop.height, sy).floor() as usize;
    let y1 = (map(bbox.3, crop.top, crop.height, sy).ceil() as usize).min(side);
    Rect::new(y0, x0, (y1 - y0).max(1), (x1 - x0).max(1))
}

/// Build up to `count` 128x128 samples, cycling through the source list.
pub fn ingest_svhn(source: &Path, count: usize, seed: u64) -> Result<Dataset> {
    let entries = read_index(source)?;
    let mut cache: BTreeMap<usize, Image> = BTreeMap::new();
    let mut samples = Vec::new();
    let mut meta = Vec::new();
    let mut skipped = 0;
    for index in 0..count {
        let e = index % entries.len();
        let entry = &entries[e];
        if !cache.contains_key(&e) {
            cache.insert(e, read_rgb(&source.join(&entry.file))?);
        }
        let img = &cache[&e];
        let (h, w) = (img.height(), img.width());
        if entry.bbox.2 > w || entry.bbox.3 > h {
            return Err(Error::data(format!("{}: bounding box leaves the image", entry.file)));
        }
        let mut rng = substream(seed, &[purpose::DATA, index as u64]);
        let Some(crop) = sample_crop(entry, h, w, &mut rng) else {
            skipped += 1;
            continue;
        };
        let out = resize_crop(img, crop, SVHN_SIDE);
        let label = entry.digit_count.clamp(1, SVHN_CATEGORIES) - 1;
        samples.push(LabeledSample::new(out, label, SVHN_CATEGORIES)?);
        meta.push(SampleMeta {
            index,
            label,
            digit_count: Some(entry.digit_count),
            number_bbox: Some(mapped_bbox(entry.bbox, crop, SVHN_SIDE)),
            source: Some(entry.file.clone()),
            ..SampleMeta::default()
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            name: "svhn".into(),
            generator_version: GENERATOR_VERSION,
            seed,
            count: samples.len(),
            image_shape: [SVHN_SIDE, SVHN_SIDE, 3],
            categories: SVHN_CATEGORIES,
            skipped,
            checksums: BTreeMap::new(),
        },
        samples,
        meta,
    })
}

/// Write a synthetic house-number source: coloured photos-like backgrounds with 1-5 digits.
pub fn write_synthetic_source(dir: &Path, count: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("file,digit_count,x0,y0,x1,y1\n");
    for k in 0..count {
        let mut rng = substream(seed, &[purpose::DATA, k as u64]);
        let (w, h) = (rng.gen_range(80..160usize), rng.gen_range(60..110usize));
        let digits = [1, 1, 2, 2, 2, 3, 3, 4, 5][rng.gen_range(0..9)];
        let size = rng.gen_range(h * 2 / 5..=h * 3 / 5);
        let step = size * 3 / 5;
        let span = step * (digits - 1) + size;
        let size = if span > w - 4 { (w - 4) * size / span } else { size };
        let step = size * 3 / 5;
        let span = step * (digits - 1) + size;
        let (left, top) = (rng.gen_range(2..=w - span - 2), rng.gen_range(2..=h - size - 2));
        let bg: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let fg: [f32; 3] = bg.map(|v| if v > 0.5 { v - 0.45 } else { v + 0.45 });
        let mut px = vec![0.0f32; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let shade = 0.15 * (x as f32 / w as f32 - 0.5);
                for c in 0..3 {
                    px[(y * w + x) * 3 + c] = (bg[c] + shade + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
            }
        }
        for d in 0..digits {
            let glyph = render_digit(rng.gen_range(0..10), size, &mut rng);
            let x0 = left + d * step;
            for y in 0..size {
                for x in 0..size {
                    let a = glyph[y * size + x];
                    let p = ((top + y) * w + x0 + x) * 3;
                    for c in 0..3 {
                        px[p + c] = px[p + c] * (1.0 - a) + fg[c] * a;
                    }
                }
            }
        }
        let inset = size * 4 / 28;
        let bbox = (left + inset, top + inset, left + span - inset, top + size - inset);
        let file = format!("{k:05}.png");
        let bytes: Vec<u8> = px.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::save_buffer(dir.join(&file), &bytes, w as u32, h as u32, image::ColorType::Rgb8)
            .map_err(|e| Error::data(format!("cannot write {file}: {e}")))?;
        index.push_str(&format!("{file},{digits},{},{},{},{}\n", bbox.0, bbox.1, bbox.2, bbox.3));
    }
    std::fs::write(dir.join("index.csv"), index)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingested_crops_honour_every_constraint() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_source(dir.path(), 12, 3).unwrap();
        let entries = read_index(dir.path()).unwrap();
        let ds = ingest_svhn(dir.path(), 24, 5).unwrap();
        assert_eq!(ds.len() + ds.manifest.skipped, 24);
        assert!(ds.len() >= 20);
        for (s, m) in ds.samples.iter().zip(&ds.meta) {
            assert_eq!(s.image.shape(), [128, 128, 3]);
            let e = &entries[m.index % entries.len()];
            assert_eq!(s.label, e.digit_count.clamp(1, 4) - 1);
            let b = m.number_bbox.unwrap();
            assert!(b.fits(128, 128));
        }
        let again = ingest_svhn(dir.path(), 24, 5).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn crop_validation_matches_the_rules() {
        let bbox = (20, 20, 60, 40);
        assert!(crop_is_valid(bbox, Rect::new(0, 0, 80, 100), 80, 100));
        // Too small a share of the source image.
        assert!(!crop_is_valid(bbox, Rect::new(10, 10, 40, 55), 80, 100));
        // Cuts off a third of the number.
        assert!(!crop_is_valid(bbox, Rect::new(0, 33, 75, 67), 80, 100));
        // Too elongated.
        assert!(!crop_is_valid(bbox, Rect::new(0, 0, 50, 100), 80, 100));
        assert!((retention(bbox, Rect::new(0, 0, 80, 40)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_svhn(dir.path(), 1, 0).unwrap_err();
        assert!(matches!(err, Error::MissingData { .. }));
    }
}
