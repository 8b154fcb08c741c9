//! Stochastic augmentation shared by contrastive pretraining and CVAE
//! training: random perspective, random crop (resized back), random
//! Gaussian blur, then brightness/contrast perturbation, in that order.
//!
//! Every op except crop fires with probability 0.5 when enabled; crop
//! always fires. With all ops disabled the input passes through
//! untouched, bit for bit.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StylexError};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum corner displacement as a fraction of the side, in [0, 0.3].
    pub perspective_strength: f64,
    /// Lower bound of the crop area fraction, in (0, 1].
    pub crop_scale_min: f64,
    /// Upper bound of the blur sigma in pixels, >= 0.
    pub blur_sigma_max: f64,
    /// Maximum additive brightness shift, <= 0.3.
    pub brightness_delta: f64,
    /// Maximum contrast deviation from 1, <= 0.3.
    pub contrast_delta: f64,
    pub enable_perspective: bool,
    pub enable_crop: bool,
    pub enable_blur: bool,
    pub enable_brightness: bool,
    pub enable_contrast: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            perspective_strength: 0.12,
            crop_scale_min: 0.75,
            blur_sigma_max: 1.0,
            brightness_delta: 0.15,
            contrast_delta: 0.15,
            enable_perspective: true,
            enable_crop: true,
            enable_blur: true,
            enable_brightness: true,
            enable_contrast: true,
        }
    }
}

impl AugmentConfig {
    /// Everything off: augment becomes the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            enable_perspective: false,
            enable_crop: false,
            enable_blur: false,
            enable_brightness: false,
            enable_contrast: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.3).contains(&self.perspective_strength) {
            return Err(StylexError::Config(
                "perspective_strength must be in [0, 0.3]".into(),
            ));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(StylexError::Config(
                "crop_scale_min must be in (0, 1]".into(),
            ));
        }
        if self.blur_sigma_max < 0.0 {
            return Err(StylexError::Config("blur_sigma_max must be >= 0".into()));
        }
        if !(0.0..=0.3).contains(&self.brightness_delta) {
            return Err(StylexError::Config(
                "brightness_delta must be in [0, 0.3]".into(),
            ));
        }
        if !(0.0..=0.3).contains(&self.contrast_delta) {
            return Err(StylexError::Config(
                "contrast_delta must be in [0, 0.3]".into(),
            ));
        }
        Ok(())
    }

    fn any_enabled(&self) -> bool {
        self.enable_perspective
            || self.enable_crop
            || self.enable_blur
            || self.enable_brightness
            || self.enable_contrast
    }
}

/// Bilinear sample with zero padding outside the frame.
fn bilinear(img: &Array3<f64>, x: f64, y: f64) -> f64 {
    let (_, h, w) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fetch = |yi: isize, xi: isize| -> f64 {
        if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
            0.0
        } else {
            img[[0, yi as usize, xi as usize]]
        }
    };
    let (xi, yi) = (x0 as isize, y0 as isize);
    fetch(yi, xi) * (1.0 - fx) * (1.0 - fy)
        + fetch(yi, xi + 1) * fx * (1.0 - fy)
        + fetch(yi + 1, xi) * (1.0 - fx) * fy
        + fetch(yi + 1, xi + 1) * fx * fy
}

/// Solve the 8-dof homography mapping src corner quad -> dst corner quad.
/// Returns row-major [a, b, c, d, e, f, g, h] with
/// x' = (a x + b y + c) / (g x + h y + 1), y' = (d x + e y + f) / (...).
fn solve_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> [f64; 8] {
    // assemble the standard 8x8 linear system
    let mut m = [[0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting
    for col in 0..8 {
        let mut pivot = col;
        for row in (col + 1)..8 {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        m.swap(col, pivot);
        let p = m[col][col];
        for row in (col + 1)..8 {
            let factor = m[row][col] / p;
            for k in col..9 {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let mut sol = [0f64; 8];
    for row in (0..8).rev() {
        let mut acc = m[row][8];
        for k in (row + 1)..8 {
            acc -= m[row][k] * sol[k];
        }
        sol[row] = acc / m[row][row];
    }
    sol
}

fn perspective(img: &Array3<f64>, strength: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let dx = strength * (w as f64);
    let dy = strength * (h as f64);
    let corners = [
        (0.0, 0.0),
        (w as f64 - 1.0, 0.0),
        (w as f64 - 1.0, h as f64 - 1.0),
        (0.0, h as f64 - 1.0),
    ];
    let mut moved = corners;
    for c in moved.iter_mut() {
        c.0 += rng.gen_range(-dx..=dx);
        c.1 += rng.gen_range(-dy..=dy);
    }
    // inverse map: from output pixel back to input coordinates
    let hmat = solve_homography(&corners, &moved);
    let mut out = Array3::<f64>::zeros(img.raw_dim());
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let denom = hmat[6] * xf + hmat[7] * yf + 1.0;
            let sx = (hmat[0] * xf + hmat[1] * yf + hmat[2]) / denom;
            let sy = (hmat[3] * xf + hmat[4] * yf + hmat[5]) / denom;
            out[[0, y, x]] = bilinear(img, sx, sy);
        }
    }
    out
}

fn crop_resize(img: &Array3<f64>, scale_min: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let area = rng.gen_range(scale_min..=1.0);
    let aspect = rng.gen_range(0.85..=1.1765);
    let ch = ((h as f64) * (area / aspect).sqrt()).round().clamp(4.0, h as f64) as usize;
    let cw = ((w as f64) * (area * aspect).sqrt()).round().clamp(4.0, w as f64) as usize;
    let oy = rng.gen_range(0..=(h - ch)) as f64;
    let ox = rng.gen_range(0..=(w - cw)) as f64;
    let mut out = Array3::<f64>::zeros(img.raw_dim());
    for y in 0..h {
        for x in 0..w {
            // map output pixel into the crop window
            let sy = oy + (y as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
            let sx = ox + (x as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
            out[[0, y, x]] = bilinear(img, sx, sy);
        }
    }
    out
}

fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (_, h, w) = img.dim();
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = -0.5 / (sigma * sigma);
    for i in -radius..=radius {
        kernel.push(((i * i) as f64 * inv).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    // separable: horizontal then vertical, clamping at the border
    let mut tmp = Array3::<f64>::zeros(img.raw_dim());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xi = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                acc += kv * img[[0, y, xi as usize]];
            }
            tmp[[0, y, x]] = acc;
        }
    }
    let mut out = Array3::<f64>::zeros(img.raw_dim());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yi = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                acc += kv * tmp[[0, yi as usize, x]];
            }
            out[[0, y, x]] = acc;
        }
    }
    out
}

/// Pointwise photometric map clip(v * contrast + brightness, 0, 1); used
/// by the augmentation pipeline and directly testable.
pub fn apply_photometric(img: &Array3<f64>, contrast: f64, brightness: f64) -> Array3<f64> {
    img.mapv(|v| (v * contrast + brightness).clamp(0.0, 1.0))
}

/// One stochastic augmentation of `image`; deterministic given the RNG
/// state, identity when every op is disabled.
pub fn augment(image: &Array3<f64>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array3<f64> {
    if !config.any_enabled() {
        return image.clone();
    }
    let mut img = image.clone();
    if config.enable_perspective && rng.gen_bool(0.5) {
        img = perspective(&img, config.perspective_strength, rng);
    }
    if config.enable_crop {
        img = crop_resize(&img, config.crop_scale_min, rng);
    }
    if config.enable_blur && rng.gen_bool(0.5) {
        let sigma = rng.gen_range(0.0..=config.blur_sigma_max);
        img = gaussian_blur(&img, sigma);
    }
    let contrast = if config.enable_contrast && rng.gen_bool(0.5) {
        rng.gen_range(1.0 - config.contrast_delta..=1.0 + config.contrast_delta)
    } else {
        1.0
    };
    let brightness = if config.enable_brightness && rng.gen_bool(0.5) {
        rng.gen_range(-config.brightness_delta..=config.brightness_delta)
    } else {
        0.0
    };
    img = apply_photometric(&img, contrast, brightness);
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Two independent augmentations of the same source.
pub fn augment_pair(
    image: &Array3<f64>,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Array3<f64>) {
    let a = augment(image, config, rng);
    let b = augment(image, config, rng);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::glyphs::{render_glyph, StyleFactors};
    use crate::rng::derive_rng;
    use proptest::prelude::*;

    fn test_image() -> Array3<f64> {
        render_glyph(5, &StyleFactors::neutral(), 32).unwrap()
    }

    #[test]
    fn disabled_config_is_identity() {
        let img = test_image();
        let mut rng = derive_rng(0, "augment");
        let out = augment(&img, &AugmentConfig::disabled(), &mut rng);
        assert_eq!(out, img);
        let (a, b) = augment_pair(&img, &AugmentConfig::disabled(), &mut rng);
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn zero_sigma_blur_is_identity() {
        let img = test_image();
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn photometric_oracle() {
        let img = Array3::<f64>::from_elem((1, 8, 8), 0.5);
        let out = apply_photometric(&img, 1.0, 0.1);
        for &v in out.iter() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        // clipping floor and ceiling
        let lo = apply_photometric(&Array3::<f64>::zeros((1, 2, 2)), 0.7, -0.2);
        assert!(lo.iter().all(|&v| v == 0.0));
        let hi = apply_photometric(&Array3::<f64>::ones((1, 2, 2)), 1.3, 0.2);
        assert!(hi.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_state_reproduces_output() {
        let img = test_image();
        let config = AugmentConfig::default();
        let out1 = augment(&img, &config, &mut derive_rng(3, "aug"));
        let out2 = augment(&img, &config, &mut derive_rng(3, "aug"));
        assert_eq!(out1, out2);

        let p1 = augment_pair(&img, &config, &mut derive_rng(4, "aug"));
        let p2 = augment_pair(&img, &config, &mut derive_rng(4, "aug"));
        assert_eq!(p1, p2);
    }

    #[test]
    fn blur_only_pairs_differ_in_most_trials() {
        let img = test_image();
        let config = AugmentConfig {
            enable_perspective: false,
            enable_crop: false,
            enable_blur: true,
            enable_brightness: false,
            enable_contrast: false,
            blur_sigma_max: 1.5,
            ..AugmentConfig::default()
        };
        let mut rng = derive_rng(5, "aug-stoch");
        let mut differing = 0;
        for _ in 0..100 {
            let (a, b) = augment_pair(&img, &config, &mut rng);
            if a != b {
                differing += 1;
            }
        }
        // each view blurs with p=0.5 and an independent sigma, so a tie
        // needs both to skip (p=0.25) or near-equal sigmas
        assert!(differing >= 60, "only {differing}/100 pairs differed");
    }

    #[test]
    fn full_pipeline_pairs_differ() {
        let img = test_image();
        let config = AugmentConfig::default();
        let mut rng = derive_rng(6, "aug-stoch2");
        let mut differing = 0;
        for _ in 0..100 {
            let (a, b) = augment_pair(&img, &config, &mut rng);
            if a != b {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing}/100 pairs differed");
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig {
            perspective_strength: 0.5,
            ..AugmentConfig::default()
        }
        .validate()
        .is_err());
        assert!(AugmentConfig {
            crop_scale_min: 0.0,
            ..AugmentConfig::default()
        }
        .validate()
        .is_err());
        assert!(AugmentConfig {
            brightness_delta: 0.4,
            ..AugmentConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_stays_in_range_with_input_shape(seed in 0u64..5000) {
            let img = test_image();
            let config = AugmentConfig::default();
            let mut rng = derive_rng(seed, "aug-prop");
            let out = augment(&img, &config, &mut rng);
            prop_assert_eq!(out.dim(), img.dim());
            for &v in out.iter() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
