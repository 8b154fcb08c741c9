//! Procedural glyph rendering with analytically controlled style factors.
//!
//! Each content class is a fixed polyline skeleton. Rendering rasterizes
//! the skeleton with a distance-field brush of width `thickness`, applies
//! the slant as an image-space horizontal shear about the canvas center,
//! then brightness/contrast, clipping to [0, 1]. The whole path uses only
//! +, -, *, /, sqrt and is bit-reproducible across platforms.
//!
//! Shear convention: `out(x, y) = mask(x + slant * (y - cy), y)` with
//! `cy` the glyph's vertical center `(side - 1) / 2 + offset_y`, i.e. the
//! inverse map is the matrix `[[1, slant], [0, 1]]` acting on coordinates
//! relative to that center. `slant` is the shear coefficient (the tangent
//! of the slant angle, within 8% of the angle in radians over the
//! declared range). Shearing about the glyph's own center keeps extreme
//! slant/offset combinations inside the frame.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StylexError};
use crate::rng::derive_rng;

/// Ground-truth generative style parameters of a synthetic glyph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleFactors {
    /// Shear coefficient, in [-0.45, 0.45].
    pub slant: f64,
    /// Stroke width in pixels, in [1.0, 4.0].
    pub thickness: f64,
    /// Glyph size as a fraction of the canvas, in [0.5, 1.0].
    pub scale: f64,
    /// Horizontal translation in pixels, in [-4, 4].
    pub offset_x: f64,
    /// Vertical translation in pixels, in [-4, 4].
    pub offset_y: f64,
    /// Additive intensity shift, in [-0.2, 0.2].
    pub brightness: f64,
    /// Multiplicative intensity factor, in [0.7, 1.3].
    pub contrast: f64,
}

pub const SLANT_RANGE: (f64, f64) = (-0.45, 0.45);
pub const THICKNESS_RANGE: (f64, f64) = (1.0, 4.0);
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.0);
pub const OFFSET_RANGE: (f64, f64) = (-4.0, 4.0);
pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.2, 0.2);
pub const CONTRAST_RANGE: (f64, f64) = (0.7, 1.3);

/// Highest content id the procedural skeleton generator will serve.
pub const MAX_CONTENT_ID: u16 = 255;

/// Skeleton half-height in pixels at scale 1 on a 32 px canvas. Sized so
/// that no in-range factor combination pushes ink outside the frame:
/// with aspect <= 0.7, brush margin t/2 + 0.5 <= 2.5 and |offset| <= 4,
/// the worst sheared horizontal extent is
/// 0.7 B + 2.5 + 4 + 0.45 (B + 2.5) + 1 < 15.5 for B <= 5.75.
const BASE_HALF_EXTENT: f64 = 5.75;

impl StyleFactors {
    /// All factors at their neutral values: an upright, unshifted glyph.
    pub fn neutral() -> Self {
        StyleFactors {
            slant: 0.0,
            thickness: 2.0,
            scale: 0.75,
            offset_x: 0.0,
            offset_y: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if !v.is_finite() || v < lo || v > hi {
                Err(StylexError::Contract(format!(
                    "style factor {name}={v} outside [{lo}, {hi}]"
                )))
            } else {
                Ok(())
            }
        };
        check("slant", self.slant, SLANT_RANGE)?;
        check("thickness", self.thickness, THICKNESS_RANGE)?;
        check("scale", self.scale, SCALE_RANGE)?;
        check("offset_x", self.offset_x, OFFSET_RANGE)?;
        check("offset_y", self.offset_y, OFFSET_RANGE)?;
        check("brightness", self.brightness, BRIGHTNESS_RANGE)?;
        check("contrast", self.contrast, CONTRAST_RANGE)?;
        Ok(())
    }
}

/// One rendered sample with its generative ground truth.
#[derive(Debug, Clone)]
pub struct GlyphSample {
    pub image: Array3<f64>, // (1, side, side)
    pub content_id: u16,
    pub style: StyleFactors,
    pub sample_id: u32,
}

/// Uniform draw of every factor over its declared range.
pub fn sample_style_factors(rng: &mut ChaCha8Rng) -> StyleFactors {
    let mut draw = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
    StyleFactors {
        slant: draw(SLANT_RANGE),
        thickness: draw(THICKNESS_RANGE),
        scale: draw(SCALE_RANGE),
        offset_x: draw(OFFSET_RANGE),
        offset_y: draw(OFFSET_RANGE),
        brightness: draw(BRIGHTNESS_RANGE),
        contrast: draw(CONTRAST_RANGE),
    }
}

type Polyline = Vec<(f64, f64)>;

/// Hand-drawn digit-like skeletons for ids 0-9 in a y-down frame with
/// x in [-0.7, 0.7] and y in [-1, 1].
fn digit_skeleton(id: u16) -> Vec<Polyline> {
    match id {
        0 => vec![vec![
            (0.0, -1.0),
            (0.55, -0.7),
            (0.7, 0.0),
            (0.55, 0.7),
            (0.0, 1.0),
            (-0.55, 0.7),
            (-0.7, 0.0),
            (-0.55, -0.7),
            (0.0, -1.0),
        ]],
        1 => vec![
            vec![(-0.3, -0.55), (0.1, -1.0), (0.1, 1.0)],
            vec![(-0.35, 1.0), (0.55, 1.0)],
        ],
        2 => vec![vec![
            (-0.6, -0.55),
            (-0.3, -0.95),
            (0.3, -1.0),
            (0.6, -0.6),
            (0.5, -0.15),
            (-0.6, 1.0),
            (0.7, 1.0),
        ]],
        3 => vec![vec![
            (-0.55, -0.85),
            (0.25, -1.0),
            (0.62, -0.5),
            (0.08, 0.0),
            (0.62, 0.5),
            (0.25, 1.0),
            (-0.55, 0.85),
        ]],
        4 => vec![
            vec![(0.25, 1.0), (0.25, -1.0), (-0.65, 0.45), (0.65, 0.45)],
        ],
        5 => vec![vec![
            (0.6, -1.0),
            (-0.5, -1.0),
            (-0.55, -0.1),
            (0.2, -0.25),
            (0.65, 0.3),
            (0.3, 1.0),
            (-0.6, 0.85),
        ]],
        6 => vec![vec![
            (0.45, -1.0),
            (-0.3, -0.4),
            (-0.55, 0.3),
            (-0.2, 1.0),
            (0.35, 0.9),
            (0.55, 0.35),
            (0.1, -0.05),
            (-0.45, 0.25),
        ]],
        7 => vec![vec![(-0.65, -1.0), (0.65, -1.0), (-0.1, 1.0)]],
        8 => vec![
            vec![
                (0.0, -1.0),
                (0.5, -0.55),
                (0.0, -0.1),
                (-0.5, -0.55),
                (0.0, -1.0),
            ],
            vec![
                (0.0, -0.1),
                (0.62, 0.5),
                (0.0, 1.0),
                (-0.62, 0.5),
                (0.0, -0.1),
            ],
        ],
        9 => vec![vec![
            (-0.45, 1.0),
            (0.3, 0.4),
            (0.55, -0.3),
            (0.2, -1.0),
            (-0.35, -0.9),
            (-0.55, -0.35),
            (-0.1, 0.05),
            (0.45, -0.25),
        ]],
        _ => unreachable!("digit_skeleton only serves 0-9"),
    }
}

/// A deterministic pseudo-random polyline for ids beyond the digit set.
fn procedural_skeleton(id: u16) -> Vec<Polyline> {
    let mut rng = derive_rng(id as u64, "glyph-skeleton");
    let points = 5 + (rng.gen_range(0..4u32) as usize);
    let line: Polyline = (0..points)
        .map(|_| (rng.gen_range(-0.7..0.7), rng.gen_range(-1.0..1.0)))
        .collect();
    vec![line]
}

/// Centered skeleton segments for a content id.
fn skeleton(content_id: u16) -> Vec<Polyline> {
    let mut lines = if content_id < 10 {
        digit_skeleton(content_id)
    } else {
        procedural_skeleton(content_id)
    };
    // center the bounding box so a zero-offset render lands mid-canvas
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for line in &lines {
        for &(x, y) in line {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    for line in &mut lines {
        for p in line.iter_mut() {
            p.0 -= cx;
            p.1 -= cy;
        }
    }
    lines
}

fn point_segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let dx = bx - ax;
    let dy = by - ay;
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let ex = px - (ax + t * dx);
    let ey = py - (ay + t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Rasterize the stroke mask: geometry only, no slant, no photometric ops.
fn render_mask(content_id: u16, style: &StyleFactors, side: usize) -> Array3<f64> {
    let lines = skeleton(content_id);
    let center = (side as f64 - 1.0) / 2.0;
    let extent = BASE_HALF_EXTENT * (side as f64 / 32.0) * style.scale;
    let radius = style.thickness / 2.0;

    // segments in pixel coordinates
    let mut segments: Vec<((f64, f64), (f64, f64))> = Vec::new();
    for line in &lines {
        for w in line.windows(2) {
            let to_px = |(x, y): (f64, f64)| {
                (
                    center + x * extent + style.offset_x,
                    center + y * extent + style.offset_y,
                )
            };
            segments.push((to_px(w[0]), to_px(w[1])));
        }
    }

    let mut img = Array3::<f64>::zeros((1, side, side));
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64, y as f64);
            let mut d = f64::INFINITY;
            for &(a, b) in &segments {
                d = d.min(point_segment_distance(px, py, a, b));
            }
            img[[0, y, x]] = (radius + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

/// Horizontal shear about row `cy` with 1-D linear interpolation along
/// rows; out-of-frame samples read as background.
fn shear_image(img: &Array3<f64>, slant: f64, cy: f64) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((1, h, w));
    for y in 0..h {
        let shift = slant * (y as f64 - cy);
        for x in 0..w {
            let src = x as f64 + shift;
            let x0 = src.floor();
            let frac = src - x0;
            let x0i = x0 as isize;
            let sample = |xi: isize| -> f64 {
                if xi < 0 || xi >= w as isize {
                    0.0
                } else {
                    img[[0, y, xi as usize]]
                }
            };
            out[[0, y, x]] = (1.0 - frac) * sample(x0i) + frac * sample(x0i + 1);
        }
    }
    out
}

/// Render one glyph: mask -> shear -> brightness/contrast -> clip.
pub fn render_glyph(content_id: u16, style: &StyleFactors, side: usize) -> Result<Array3<f64>> {
    if side < 16 {
        return Err(StylexError::Contract(format!(
            "canvas side {side} below minimum 16"
        )));
    }
    if content_id > MAX_CONTENT_ID {
        return Err(StylexError::Contract(format!(
            "content_id {content_id} exceeds supported maximum {MAX_CONTENT_ID}"
        )));
    }
    style.validate()?;

    let mask = render_mask(content_id, style, side);
    let glyph_cy = (side as f64 - 1.0) / 2.0 + style.offset_y;
    let mut img = shear_image(&mask, style.slant, glyph_cy);
    img.mapv_inplace(|v| (v * style.contrast + style.brightness).clamp(0.0, 1.0));
    Ok(img)
}
