//! Procedural handwritten-style digits and colour textures used in place of downloaded
//! image corpora.

use rand::Rng;
use rand_distr::{Distribution, Normal};

type Stroke = &'static [(f64, f64)];

const ZERO: &[Stroke] = &[&[
    (0.5, 0.08),
    (0.68, 0.14),
    (0.79, 0.3),
    (0.81, 0.5),
    (0.78, 0.7),
    (0.67, 0.87),
    (0.5, 0.93),
    (0.33, 0.87),
    (0.22, 0.7),
    (0.19, 0.5),
    (0.22, 0.3),
    (0.33, 0.14),
    (0.5, 0.08),
]];
const ONE: &[Stroke] = &[&[(0.32, 0.26), (0.56, 0.07), (0.56, 0.93)], &[(0.36, 0.93), (0.76, 0.93)]];
const TWO: &[Stroke] = &[&[
    (0.2, 0.3),
    (0.3, 0.13),
    (0.5, 0.07),
    (0.7, 0.13),
    (0.78, 0.3),
    (0.7, 0.5),
    (0.2, 0.92),
    (0.82, 0.92),
]];
const THREE: &[Stroke] = &[&[
    (0.22, 0.13),
    (0.5, 0.06),
    (0.74, 0.15),
    (0.75, 0.34),
    (0.45, 0.48),
    (0.77, 0.6),
    (0.78, 0.81),
    (0.52, 0.94),
    (0.2, 0.86),
]];
const FOUR: &[Stroke] = &[&[(0.62, 0.93), (0.62, 0.06), (0.14, 0.64), (0.86, 0.64)]];
const FIVE: &[Stroke] = &[&[
    (0.78, 0.08),
    (0.29, 0.08),
    (0.25, 0.45),
    (0.55, 0.39),
    (0.77, 0.53),
    (0.77, 0.78),
    (0.52, 0.94),
    (0.2, 0.86),
]];
const SIX: &[Stroke] = &[&[
    (0.7, 0.07),
    (0.42, 0.27),
    (0.26, 0.56),
    (0.28, 0.83),
    (0.5, 0.94),
    (0.72, 0.84),
    (0.75, 0.63),
    (0.52, 0.5),
    (0.27, 0.6),
]];
const SEVEN: &[Stroke] = &[&[(0.17, 0.08), (0.83, 0.08), (0.42, 0.93)], &[(0.38, 0.5), (0.72, 0.5)]];
const EIGHT: &[Stroke] = &[
    &[
        (0.5, 0.07),
        (0.7, 0.13),
        (0.72, 0.3),
        (0.5, 0.47),
        (0.28, 0.3),
        (0.3, 0.13),
        (0.5, 0.07),
    ],
    &[
        (0.5, 0.47),
        (0.76, 0.6),
        (0.77, 0.82),
        (0.5, 0.94),
        (0.23, 0.82),
        (0.24, 0.6),
        (0.5, 0.47),
    ],
];
const NINE: &[Stroke] = &[&[
    (0.74, 0.32),
    (0.6, 0.09),
    (0.4, 0.08),
    (0.26, 0.24),
    (0.3, 0.45),
    (0.52, 0.52),
    (0.74, 0.35),
    (0.72, 0.93),
]];

const DIGITS: [&[Stroke]; 10] = [ZERO, ONE, TWO, THREE, FOUR, FIVE, SIX, SEVEN, EIGHT, NINE];

/// Render `digit` on a `size x size` single-channel canvas with random style.
///
/// The glyph occupies the central `size * 20 / 28` pixels, like a centred handwritten digit.
pub fn render_digit<R: Rng>(digit: usize, size: usize, rng: &mut R) -> Vec<f32> {
    let jitter = Normal::new(0.0, 0.022).expect("valid sd");
    let angle: f64 = rng.gen_range(-0.25..0.25);
    let shear: f64 = rng.gen_range(-0.2..0.2);
    let sy: f64 = rng.gen_range(0.88..1.04);
    let sx: f64 = sy * rng.gen_range(0.78..1.1);
    let (tx, ty): (f64, f64) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
    let thickness: f64 = rng.gen_range(0.07..0.12);
    let peak: f32 = rng.gen_range(0.85..1.0);

    let box_side = size as f64 * 20.0 / 28.0;
    let margin = (size as f64 - box_side) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let place = |(x, y): (f64, f64)| -> (f64, f64) {
        let (x, y) = (x - 0.5, y - 0.5);
        let (x, y) = (sx * (x + shear * y), sy * y);
        let (x, y) = (cos * x - sin * y, sin * x + cos * y);
        (
            margin + (x + 0.5 + tx) * box_side,
            margin + (y + 0.5 + ty) * box_side,
        )
    };
    let mut segments = Vec::new();
    for stroke in DIGITS[digit % 10] {
        let pts: Vec<(f64, f64)> = stroke
            .iter()
            .map(|&(x, y)| place((x + jitter.sample(rng), y + jitter.sample(rng))))
            .collect();
        segments.extend(pts.windows(2).map(|w| (w[0], w[1])));
    }
    let half = 0.5 * thickness * box_side;
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let cover = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
            out[y * size + x] = peak * cover;
        }
    }
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// A `size x size` RGB texture (HWC): base colour, a few oriented waves, a soft blob and noise.
pub fn render_texture<R: Rng>(size: usize, rng: &mut R) -> Vec<f32> {
    let base: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.gen_range(0.15..0.9);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
            (theta.cos() * freq, theta.sin() * freq, phase, amp)
        })
        .collect();
    let s = size as f64;
    let (bx, by, br) = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s, rng.gen_range(0.15..0.35) * s);
    let blob: [f64; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let mut out = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let r2 = ((fx - bx).powi(2) + (fy - by).powi(2)) / (br * br);
            let w_blob = (-r2).exp();
            for c in 0..3 {
                let mut v = base[c] + blob[c] * w_blob;
                for &(kx, ky, ph, amp) in &waves {
                    v += amp[c] * (kx * fx + ky * fy + ph).sin();
                }
                v += rng.gen_range(-0.08..0.08);
                out[(y * size + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn digits_have_ink_inside_the_frame() {
        for d in 0..10 {
            let img = render_digit(d, 28, &mut substream(d as u64, &[]));
            let ink: f32 = img.iter().sum();
            assert!(ink > 30.0 && ink < 300.0, "digit {d} ink {ink}");
            for i in 0..28 {
                assert_eq!(img[i], 0.0, "top row touched by {d}");
                assert_eq!(img[27 * 28 + i], 0.0);
            }
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn digit_classes_differ_more_than_styles() {
        let mean = |d: usize| -> Vec<f32> {
            let mut acc = vec![0.0f32; 784];
            for k in 0..20 {
                let img = render_digit(d, 28, &mut substream(100 + k, &[d as u64]));
                acc.iter_mut().zip(img).for_each(|(a, v)| *a += v / 20.0);
            }
            acc
        };
        let means: Vec<Vec<f32>> = (0..10).map(mean).collect();
        let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
        for a in 0..10 {
            for b in (a + 1)..10 {
                assert!(dist(&means[a], &means[b]) > 5.0, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn textures_are_colourful_and_bounded() {
        let t = render_texture(32, &mut substream(1, &[]));
        assert_eq!(t.len(), 32 * 32 * 3);
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = t.iter().sum::<f32>() / t.len() as f32;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / t.len() as f32;
        assert!(var > 1e-3);
    }
}
