//! Procedural datasets: Gaussian blobs for fast checks and a noisy
//! seven-segment glyph corpus standing in for handwritten digits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Each class is a bright Gaussian bump at its own location on a ring around
/// the image centre, slightly jittered, over faint pixel noise.
pub fn synth_blobs(num_classes: usize, per_class: usize, image_shape: [usize; 3], seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || image_shape.contains(&0) {
        return Err(Error::Data(format!(
            "empty synthetic dataset: {num_classes} classes × {per_class} per class, shape {image_shape:?}"
        )));
    }
    let [c, h, w] = image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.03).unwrap();
    let sigma = (h.min(w) as f32 / 6.0).max(0.8);
    let radius = h.min(w) as f32 / 4.0;
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let angle = std::f32::consts::TAU * class as f32 / num_classes as f32;
        let cy = (h as f32 - 1.0) / 2.0 + radius * angle.sin() + rng.random_range(-0.3..0.3);
        let cx = (w as f32 - 1.0) / 2.0 + radius * angle.cos() + rng.random_range(-0.3..0.3);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let v = 0.9 * (-d2 / (2.0 * sigma * sigma)).exp() + 0.05 + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes)
}

/// Rendering parameters for [`synth_digits`].
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphStyle {
    pub size: usize,
    /// Stroke intensity range.
    pub ink: (f32, f32),
    /// Background level range.
    pub background: (f32, f32),
    /// Stroke width range in pixels.
    pub width: (f32, f32),
    pub max_rotation: f32,
    pub max_shear: f32,
    pub scale: (f32, f32),
    pub max_shift: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Probability of each segment of a glyph being drawn faintly.
    pub dropout: f32,
}

impl Default for GlyphStyle {
    fn default() -> Self {
        Self {
            size: 28,
            ink: (0.45, 0.85),
            background: (0.0, 0.2),
            width: (1.2, 2.6),
            max_rotation: 0.25,
            max_shear: 0.25,
            scale: (0.75, 1.05),
            max_shift: 2.5,
            noise: 0.08,
            dropout: 0.08,
        }
    }
}

// Segment endpoints in a unit box, y pointing down.
const TL: (f32, f32) = (0.25, 0.12);
const TR: (f32, f32) = (0.75, 0.12);
const ML: (f32, f32) = (0.25, 0.5);
const MR: (f32, f32) = (0.75, 0.5);
const BL: (f32, f32) = (0.25, 0.88);
const BR: (f32, f32) = (0.75, 0.88);

type Segment = ((f32, f32), (f32, f32));

fn glyph(digit: usize) -> Vec<Segment> {
    let a = (TL, TR);
    let b = (TR, MR);
    let c = (MR, BR);
    let d = (BL, BR);
    let e = (ML, BL);
    let f = (TL, ML);
    let g = (ML, MR);
    match digit {
        0 => vec![a, b, c, d, e, f, (BL, TR)],
        1 => vec![((0.5, 0.12), (0.5, 0.88)), ((0.35, 0.25), (0.5, 0.12))],
        2 => vec![a, b, g, e, d],
        3 => vec![a, b, g, c, d],
        4 => vec![f, g, b, c],
        5 => vec![a, f, g, c, d],
        6 => vec![a, f, g, e, c, d],
        7 => vec![a, (TR, (0.45, 0.88))],
        8 => vec![a, b, c, d, e, f, g],
        _ => vec![a, b, c, d, f, g],
    }
}

fn dist_to_segment(p: (f32, f32), s: Segment) -> f32 {
    let ((x0, y0), (x1, y1)) = s;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - x0) * dx + (p.1 - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (x0 + t * dx, y0 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Ten-class corpus of jittered seven-segment style glyphs, `(n, 1, s, s)`.
/// Classes cycle `0..10`; the same seed gives the same bytes.
pub fn synth_digits(n: usize, style: &GlyphStyle, seed: u64) -> Result<Dataset> {
    if n == 0 || style.size < 8 {
        return Err(Error::Data(format!("need n > 0 and size ≥ 8, got n={n}, size={}", style.size)));
    }
    let s = style.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, style.noise.max(1e-6)).unwrap();
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    let span = |rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    for i in 0..n {
        let digit = i % 10;
        let rot = rng.random_range(-style.max_rotation..=style.max_rotation);
        let shear = rng.random_range(-style.max_shear..=style.max_shear);
        let scale = span(&mut rng, style.scale) * (s as f32 - 4.0);
        let shift = (
            rng.random_range(-style.max_shift..=style.max_shift),
            rng.random_range(-style.max_shift..=style.max_shift),
        );
        let ink = span(&mut rng, style.ink);
        let background = span(&mut rng, style.background);
        let half_width = span(&mut rng, style.width) / 2.0;
        let (sin, cos) = rot.sin_cos();
        let centre = (s as f32 - 1.0) / 2.0;
        let place = |(u, v): (f32, f32)| {
            let (x, y) = ((u - 0.5) * scale, (v - 0.5) * scale);
            let x = x + shear * y;
            (
                centre + shift.0 + cos * x - sin * y,
                centre + shift.1 + sin * x + cos * y,
            )
        };
        let segments: Vec<(Segment, f32)> = glyph(digit)
            .into_iter()
            .map(|(p, q)| {
                let strength = if rng.random::<f32>() < style.dropout { 0.35 } else { 1.0 };
                ((place(p), place(q)), strength)
            })
            .collect();
        for y in 0..s {
            for x in 0..s {
                let p = (x as f32, y as f32);
                let coverage = segments
                    .iter()
                    .map(|&(seg, k)| k * (half_width + 0.5 - dist_to_segment(p, seg)).clamp(0.0, 1.0))
                    .fold(0.0f32, f32::max);
                let v = background + (ink - background) * coverage + noise.sample(&mut rng);
                // store at byte precision so IDX export is lossless
                data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
        labels.push(digit);
    }
    Dataset::new(Tensor::new(vec![n, 1, s, s], data)?, labels, 10)
}
