//! Images, masks and the masked-image construction.
//!
//! Mask value 1 marks a pixel as visible to downstream models, 0 as hidden. A masked
//! image carries the zeroed pixel channels plus the mask itself as an indicator channel,
//! so a hidden pixel is distinguishable from a visible black one.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to every masking probability before any logarithm is taken.
pub const RHO_EPSILON: f64 = 1e-6;

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(RHO_EPSILON, 1.0 - RHO_EPSILON)
}

/// Pixel grid in `[0, 1]`, stored row-major as `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image extents must be positive"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Writes a pixel, clamping into `[0, 1]`.
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }

    /// Channels-first copy, `[channels, height, width]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.pixels.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v as f64;
            }
        }
        out
    }
}

/// Stack images into a `[n, channels, height, width]` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let mut data = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    let mut n = 0;
    for img in images {
        match shape {
            None => shape = Some(img.shape()),
            Some(s) => assert_eq!(s, img.shape(), "batch of differently shaped images"),
        }
        data.extend(img.to_chw());
        n += 1;
    }
    let [h, w, c] = shape.expect("empty image batch");
    Tensor::new(vec![n, c, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(image: Image, label: usize, categories: usize) -> Result<Self> {
        if label >= categories {
            return Err(Error::data(format!("label {label} not below category count {categories}")));
        }
        Ok(LabeledSample { image, label })
    }
}

/// Per-pixel keep probabilities, clamped into `[RHO_EPSILON, 1 - RHO_EPSILON]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskProbability {
    height: usize,
    width: usize,
    rho: Vec<f64>,
}

impl MaskProbability {
    pub fn new(height: usize, width: usize, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != height * width {
            return Err(Error::shape(format!("{} probabilities for a {height}x{width} mask", rho.len())));
        }
        if rho.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite masking probability"));
        }
        Ok(MaskProbability {
            height,
            width,
            rho: rho.into_iter().map(clamp_probability).collect(),
        })
    }

    pub fn uniform(height: usize, width: usize, p: f64) -> Self {
        MaskProbability {
            height,
            width,
            rho: vec![clamp_probability(p); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Boolean,
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    kind: MaskKind,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, kind: MaskKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!("{} mask values for a {height}x{width} mask", values.len())));
        }
        let ok = match kind {
            MaskKind::Boolean => values.iter().all(|&v| v == 0.0 || v == 1.0),
            MaskKind::Relaxed => values.iter().all(|v| (0.0..=1.0).contains(v)),
        };
        if !ok {
            return Err(Error::data(format!("mask values violate the {kind:?} range")));
        }
        Ok(Mask {
            height,
            width,
            kind,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, visible: bool) -> Self {
        Mask {
            height,
            width,
            kind: MaskKind::Boolean,
            values: vec![if visible { 1.0 } else { 0.0 }; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Visible fraction: the mean mask value.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Boolean mask visible wherever the value exceeds `level`.
    pub fn threshold(&self, level: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            kind: MaskKind::Boolean,
            values: self.values.iter().map(|&v| if v > level { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Rect {
            top,
            left,
            height,
            width,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.height <= height && self.left + self.width <= width
    }

    /// Row-major 0/1 indicator over a `height x width` grid.
    pub fn indicator(&self, height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; height * width];
        for y in self.top..(self.top + self.height).min(height) {
            for x in self.left..(self.left + self.width).min(width) {
                out[y * width + x] = 1.0;
            }
        }
        out
    }
}

/// Pixel channels zeroed where hidden, plus the mask as an indicator channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    height: usize,
    width: usize,
    channels: usize,
    /// `[height, width, channels]`.
    pixel_channel: Vec<f64>,
    /// `[height, width]`.
    indicator_channel: Vec<f64>,
}

impl MaskedImage {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixel_channel(&self) -> &[f64] {
        &self.pixel_channel
    }

    pub fn indicator_channel(&self) -> &[f64] {
        &self.indicator_channel
    }

    /// Model input layout `[channels + 1, height, width]`, indicator last.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * (self.channels + 1)];
        for (i, px) in self.pixel_channel.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out[self.channels * plane..].copy_from_slice(&self.indicator_channel);
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels + 1, self.height, self.width], self.to_chw())
    }
}

pub fn apply_mask(image: &Image, mask: &Mask) -> Result<MaskedImage> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    let c = image.channels();
    let pixel_channel = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &p)| p as f64 * mask.values()[i / c])
        .collect();
    Ok(MaskedImage {
        height: image.height(),
        width: image.width(),
        channels: c,
        pixel_channel,
        indicator_channel: mask.values().to_vec(),
    })
}

/// Batched, differentiable masking: `images` is `[n, c, h, w]`, `mask` is `[n, 1, h, w]`.
/// Returns the `[n, c + 1, h, w]` masked-image tensor (pixels times mask, then the mask).
pub fn apply_mask_graph(g: &mut Graph, images: Var, mask: Var) -> Var {
    let pixels = g.mul_channels(images, mask);
    g.concat(&[pixels, mask])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check;
    use proptest::prelude::*;

    fn image(values: &[f32], h: usize, w: usize) -> Image {
        Image::new(h, w, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn all_visible_mask_is_identity() {
        let img = image(&[0.1, 0.2, 0.3, 0.9], 2, 2);
        let mi = apply_mask(&img, &Mask::filled(2, 2, true)).unwrap();
        let want: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
        assert_eq!(mi.pixel_channel(), &want[..]);
        assert!(mi.indicator_channel().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_hidden_mask_zeroes_everything() {
        let img = image(&[0.1, 0.2, 0.3, 0.9], 2, 2);
        let mi = apply_mask(&img, &Mask::filled(2, 2, false)).unwrap();
        assert!(mi.pixel_channel().iter().all(|&v| v == 0.0));
        assert!(mi.indicator_channel().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_follows_the_pair_rule() {
        let img = image(&[0.7], 1, 1);
        let on = apply_mask(&img, &Mask::new(1, 1, MaskKind::Boolean, vec![1.0]).unwrap()).unwrap();
        assert!((on.pixel_channel()[0] - 0.7).abs() < 1e-7);
        assert_eq!(on.indicator_channel()[0], 1.0);
        let off = apply_mask(&img, &Mask::new(1, 1, MaskKind::Boolean, vec![0.0]).unwrap()).unwrap();
        assert_eq!((off.pixel_channel()[0], off.indicator_channel()[0]), (0.0, 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = image(&[0.0; 4], 2, 2);
        let err = apply_mask(&img, &Mask::filled(3, 3, true)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Mask::new(1, 1, MaskKind::Boolean, vec![0.5]).is_err());
        assert!(Mask::new(1, 1, MaskKind::Relaxed, vec![0.5]).is_ok());
        assert!(LabeledSample::new(Image::zeros(1, 1, 1), 2, 2).is_err());
    }

    #[test]
    fn probabilities_are_clamped() {
        let p = MaskProbability::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(p.values(), &[RHO_EPSILON, 0.5, 1.0 - RHO_EPSILON]);
    }

    #[test]
    fn relaxed_masking_gradient_matches_finite_differences() {
        let img = Tensor::new(vec![1, 3, 2, 2], (0..12).map(|v| v as f64 / 12.0).collect());
        let m = Tensor::new(vec![1, 1, 2, 2], vec![0.2, 0.9, 0.5, 0.33]);
        let r = check(&[img, m], 1e-5, |g, v| {
            let mi = apply_mask_graph(g, v[0], v[1]);
            let sq = g.square(mi);
            g.sum(sq)
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn boolean_masking_is_idempotent(
            px in proptest::collection::vec(0.0f32..=1.0, 12),
            bits in proptest::collection::vec(any::<bool>(), 4),
        ) {
            let img = Image::new(2, 2, 3, px).unwrap();
            let mask = Mask::new(2, 2, MaskKind::Boolean, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let once = apply_mask(&img, &mask).unwrap();
            let again_px: Vec<f32> = once.pixel_channel().iter().map(|&v| v as f32).collect();
            let twice = apply_mask(&Image::new(2, 2, 3, again_px).unwrap(), &mask).unwrap();
            prop_assert_eq!(once.pixel_channel(), twice.pixel_channel());
            for (i, &m) in mask.values().iter().enumerate() {
                if m == 0.0 {
                    prop_assert!(once.pixel_channel()[i * 3..i * 3 + 3].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
