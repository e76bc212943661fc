//! Static figures: mask grids, l1 histograms and inside/outside bar summaries.
//!
//! Masks are drawn white where a pixel is hidden (opaque) and black where it is visible.

use image::{Rgb, RgbImage};
use ibsal::metrics::{MaskStats, HISTOGRAM_BINS};
use ibsal::types::Image;

use crate::font::{draw_text, text_width, HEIGHT as TEXT_H};

pub const CELL_ZOOM: u32 = 3;
pub const MARGIN: u32 = 10;
pub const BAR_W: u32 = 4;
const LABEL_H: u32 = TEXT_H + 6;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRAY: Rgb<u8> = Rgb([128, 128, 128]);
const HIDDEN_TINT: Rgb<u8> = Rgb([200, 40, 40]);

pub const PALETTE: [Rgb<u8>; 10] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
    Rgb([188, 189, 34]),
    Rgb([23, 190, 207]),
];

pub fn category_color(c: usize) -> Rgb<u8> {
    PALETTE[c % PALETTE.len()]
}

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pixel(img: &Image, y: usize, x: usize) -> Rgb<u8> {
    let [_, _, c] = img.shape();
    if c == 1 {
        let v = gray(img.get(y, x, 0));
        Rgb([v, v, v])
    } else {
        Rgb([gray(img.get(y, x, 0)), gray(img.get(y, x, 1)), gray(img.get(y, x, 2))])
    }
}

fn fill(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, color);
        }
    }
}

/// Rows: original images, masks (white = opaque), and images with hidden pixels tinted.
/// A legend for the mask colours sits under the grid.
pub fn mask_grid(samples: &[(&Image, Vec<f64>)]) -> RgbImage {
    let [h, w] = samples
        .first()
        .map(|(i, _)| [i.shape()[0], i.shape()[1]])
        .unwrap_or([1, 1]);
    let (cw, ch) = (w as u32 * CELL_ZOOM, h as u32 * CELL_ZOOM);
    let cols = samples.len().max(1) as u32;
    let legend_h = TEXT_H + 2 * MARGIN;
    let width = (MARGIN + cols * (cw + MARGIN)).max(2 * MARGIN + text_width("OPAQUE  TRANSPARENT") + 4 * TEXT_H);
    let height = MARGIN + 3 * (ch + MARGIN) + legend_h;
    let mut img = RgbImage::from_pixel(width, height, GRAY);
    for (k, (image, mask)) in samples.iter().enumerate() {
        let x0 = MARGIN + k as u32 * (cw + MARGIN);
        for y in 0..h {
            for x in 0..w {
                let visible = mask[y * w + x] >= 0.5;
                let original = pixel(image, y, x);
                let m = if visible { BLACK } else { WHITE };
                let overlay = if visible { original } else { HIDDEN_TINT };
                for (row, color) in [original, m, overlay].into_iter().enumerate() {
                    let y0 = MARGIN + row as u32 * (ch + MARGIN);
                    fill(
                        &mut img,
                        x0 + x as u32 * CELL_ZOOM,
                        y0 + y as u32 * CELL_ZOOM,
                        CELL_ZOOM,
                        CELL_ZOOM,
                        color,
                    );
                }
            }
        }
    }
    let ly = MARGIN + 3 * (ch + MARGIN) + MARGIN / 2;
    let mut x = MARGIN;
    for (swatch, label) in [(WHITE, "OPAQUE"), (BLACK, "TRANSPARENT")] {
        fill(&mut img, x, ly, TEXT_H, TEXT_H, swatch);
        x += TEXT_H + 4;
        draw_text(&mut img, x, ly, label, BLACK);
        x += text_width(label) + 2 * TEXT_H;
    }
    img
}

fn panel_height(max_count: usize) -> u32 {
    max_count.max(1) as u32
}

fn panel_stride(panel_h: u32) -> u32 {
    LABEL_H + panel_h + 2 + MARGIN
}

/// One panel per category, one bar per bin, one pixel of height per sample.
pub fn histogram_image(stats: &MaskStats) -> RgbImage {
    let k = stats.histograms.len().max(1) as u32;
    let max = stats.histograms.iter().flatten().copied().max().unwrap_or(0);
    let ph = panel_height(max);
    let width = 2 * MARGIN + HISTOGRAM_BINS as u32 * BAR_W;
    let height = MARGIN + k * panel_stride(ph);
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    for (c, hist) in stats.histograms.iter().enumerate() {
        let top = MARGIN + c as u32 * panel_stride(ph);
        draw_text(&mut img, MARGIN, top, &format!("CATEGORY {c}"), BLACK);
        let base = top + LABEL_H + ph - 1;
        fill(&mut img, MARGIN, base + 1, HISTOGRAM_BINS as u32 * BAR_W, 1, GRAY);
        for (b, &count) in hist.iter().enumerate() {
            let x = MARGIN + b as u32 * BAR_W;
            let n = count as u32;
            if n > 0 {
                fill(&mut img, x, base + 1 - n, BAR_W - 1, n, category_color(c));
            }
        }
    }
    img
}

/// Recover per-category bin counts from an image written by `histogram_image`.
pub fn read_histogram_image(img: &RgbImage, categories: usize) -> Vec<Vec<usize>> {
    let k = categories.max(1) as u32;
    let ph = (img.height() - MARGIN) / k - LABEL_H - 2 - MARGIN;
    (0..categories)
        .map(|c| {
            let top = MARGIN + c as u32 * panel_stride(ph);
            (0..HISTOGRAM_BINS as u32)
                .map(|b| {
                    let x = MARGIN + b * BAR_W;
                    (top + LABEL_H..top + LABEL_H + ph)
                        .filter(|&y| *img.get_pixel(x, y) == category_color(c))
                        .count()
                })
                .collect()
        })
        .collect()
}

/// Per-category pairs of bars: visible fraction inside (dark) and outside (light) the region.
pub fn region_bars(rows: &[(usize, f64, f64)]) -> RgbImage {
    let bar_h = 100u32;
    let group = 3 * BAR_W * 3;
    let width = 2 * MARGIN + (rows.len().max(1) as u32) * group + text_width("INSIDE  OUTSIDE") + 4 * TEXT_H;
    let height = 2 * MARGIN + LABEL_H + bar_h + LABEL_H + 2;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let base = MARGIN + LABEL_H + bar_h;
    fill(&mut img, MARGIN, base + 1, rows.len() as u32 * group, 1, GRAY);
    for (i, &(c, inside, outside)) in rows.iter().enumerate() {
        let x = MARGIN + i as u32 * group;
        let color = category_color(c);
        let light = Rgb(color.0.map(|v| ((v as u32 + 2 * 255) / 3) as u8));
        for (j, (v, col)) in [(inside, color), (outside, light)].into_iter().enumerate() {
            let n = (v.clamp(0.0, 1.0) * bar_h as f64).round() as u32;
            if n > 0 {
                fill(&mut img, x + j as u32 * 3 * BAR_W, base + 1 - n, 3 * BAR_W - 1, n, col);
            }
        }
        draw_text(&mut img, x, base + 4, &c.to_string(), BLACK);
    }
    let lx = MARGIN + rows.len() as u32 * group + TEXT_H;
    fill(&mut img, lx, MARGIN, TEXT_H, TEXT_H, category_color(0));
    draw_text(&mut img, lx + TEXT_H + 4, MARGIN, "INSIDE", BLACK);
    let light0 = Rgb(category_color(0).0.map(|v| ((v as u32 + 2 * 255) / 3) as u8));
    fill(&mut img, lx, MARGIN + LABEL_H, TEXT_H, TEXT_H, light0);
    draw_text(&mut img, lx + TEXT_H + 4, MARGIN + LABEL_H, "OUTSIDE", BLACK);
    img
}
