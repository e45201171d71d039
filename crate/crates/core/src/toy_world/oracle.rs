//! Rule-based classifier for styled-shape images.
//!
//! The background colour is the median of the border pixels. Foreground
//! membership is a soft mask from the distance to that colour. Content is the
//! shape whose mask template, searched over the rendering jitter range
//! (centre shifts of +-2 px in half-pixel steps, radius scales 0.9..1.1), has
//! the highest normalised cross-correlation with the foreground mask. Style is
//! the palette pattern with the lowest mean squared colour error over the
//! foreground.

use std::sync::OnceLock;

use crate::image::Image;

use super::render::{Shape, CENTER, CONTENTS, IMAGE_SIZE, RADIUS, SHAPES, STYLES, STYLE_SPECS};

const SHIFTS: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
const SCALES: [f64; 5] = [0.9, 0.95, 1.0, 1.05, 1.1];
const CONTENT_TEMPERATURE: f64 = 20.0;
const STYLE_TEMPERATURE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleLabel {
    pub style: usize,
    pub content: usize,
    pub style_confidence: f64,
    pub content_confidence: f64,
}

/// Zero-mean, unit-norm templates per shape.
fn templates() -> &'static Vec<Vec<Vec<f64>>> {
    static CELL: OnceLock<Vec<Vec<Vec<f64>>>> = OnceLock::new();
    CELL.get_or_init(|| {
        SHAPES
            .iter()
            .map(|&shape| {
                let mut out = Vec::new();
                for &dy in &SHIFTS {
                    for &dx in &SHIFTS {
                        for &s in &SCALES {
                            out.push(normalised(&mask_of(shape, CENTER + dx, CENTER + dy, RADIUS * s)));
                        }
                    }
                }
                out
            })
            .collect()
    })
}

fn mask_of(shape: Shape, cx: f64, cy: f64, r: f64) -> Vec<f64> {
    (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|i| {
            let (x, y) = ((i % IMAGE_SIZE) as f64 + 0.5, (i / IMAGE_SIZE) as f64 + 0.5);
            if shape.contains(x, y, cx, cy, r) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Centres and scales `v` to unit norm; a constant vector stays all zero.
fn normalised(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let mut out: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut out {
            *x /= norm;
        }
    }
    out
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

fn background(img: &Image) -> [f32; 3] {
    let (w, h) = (img.width, img.height);
    let border: Vec<[f32; 3]> = (0..w * h)
        .filter(|i| {
            let (x, y) = (i % w, i / w);
            x == 0 || y == 0 || x == w - 1 || y == h - 1
        })
        .map(|i| img.pixel(i % w, i / w))
        .collect();
    [0, 1, 2].map(|c| median(border.iter().map(|p| p[c]).collect()))
}

/// Soft foreground membership in `[0, 1]` per pixel.
pub fn foreground_mask(img: &Image) -> Vec<f64> {
    let bg = background(img);
    (0..img.width * img.height)
        .map(|i| {
            let p = img.pixel(i % img.width, i / img.width);
            let d = p.iter().zip(bg).map(|(&a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            ((d - 0.1) / 0.2).clamp(0.0, 1.0)
        })
        .collect()
}

fn softmax_confidence(scores: &[f64], best: usize) -> f64 {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
    (scores[best] - mx).exp() / total
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Classifies a 24x24 image into `(style, content)` with softmax confidences.
pub fn oracle_classify(img: &Image) -> OracleLabel {
    assert_eq!((img.width, img.height), (IMAGE_SIZE, IMAGE_SIZE), "oracle expects 24x24 images");
    let mask = foreground_mask(img);
    let m = normalised(&mask);

    let content_scores: Vec<f64> = templates()
        .iter()
        .map(|ts| {
            ts.iter()
                .map(|t| t.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let content = argmax(&content_scores);
    let scaled: Vec<f64> = content_scores.iter().map(|s| s * CONTENT_TEMPERATURE).collect();

    let weight: f64 = mask.iter().sum::<f64>().max(1e-9);
    let style_err: Vec<f64> = STYLE_SPECS
        .iter()
        .map(|spec| {
            let mut err = 0.0;
            for (i, &w) in mask.iter().enumerate() {
                if w > 0.0 {
                    let (x, y) = (i % IMAGE_SIZE, i / IMAGE_SIZE);
                    let want = spec.color_at(x, y);
                    let got = img.pixel(x, y);
                    let d: f64 = want.iter().zip(got).map(|(&a, b)| ((a - b) as f64).powi(2)).sum();
                    err += w * d / 3.0;
                }
            }
            err / weight
        })
        .collect();
    let neg: Vec<f64> = style_err.iter().map(|e| -e / STYLE_TEMPERATURE).collect();
    let style = argmax(&neg);

    debug_assert!(style < STYLES && content < CONTENTS);
    OracleLabel {
        style,
        content,
        style_confidence: softmax_confidence(&neg, style),
        content_confidence: softmax_confidence(&scaled, content),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::toy_world::render::{render, Cell, Placement};

    #[test]
    fn nominal_renders_are_classified() {
        for cell in Cell::all() {
            let label = oracle_classify(&render(cell, &Placement::nominal()));
            assert_eq!((label.style, label.content), (cell.style, cell.content), "{cell}");
            assert!(label.style_confidence > 0.9 && label.content_confidence > 0.5);
        }
    }

    #[test]
    fn jittered_renders_are_classified() {
        let mut rng = RngStream::new(11, 1);
        for cell in Cell::all() {
            for _ in 0..16 {
                let label = oracle_classify(&render(cell, &Placement::jittered(&mut rng)));
                assert_eq!((label.style, label.content), (cell.style, cell.content), "{cell}");
            }
        }
    }

    #[test]
    fn uniform_image_has_no_foreground() {
        let img = Image::filled(24, 24, [0.5; 3]);
        assert!(foreground_mask(&img).iter().all(|&v| v == 0.0));
        let label = oracle_classify(&img);
        assert!(label.content_confidence <= 0.25 + 1e-12);
    }
}
