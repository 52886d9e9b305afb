//! Stochastic views of a sample. Every function here is a pure function of
//! its input and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [f64; 2],
    /// Range of the crop aspect ratio (width / height).
    pub crop_aspect: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Brightness, contrast, saturation, hue.
    pub jitter_strengths: [f64; 4],
    pub grayscale_p: f64,
    pub blur_p: f64,
    /// Blur kernel size as a fraction of the image side.
    pub blur_kernel_frac: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: [0.08, 1.0],
            crop_aspect: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_strengths: [0.4, 0.4, 0.4, 0.1],
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_kernel_frac: 0.10,
            blur_sigma: [0.1, 2.0],
        }
    }
}

impl AugmentConfig {
    /// Every step disabled and a full-image crop.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_p, self.jitter_p, self.grayscale_p, self.blur_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("augmentation probabilities must lie in [0, 1]"));
        }
        let ordered = |r: [f64; 2], lo: f64| r[0] > lo && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.crop_scale, 0.0) || self.crop_scale[1] > 1.0 {
            return Err(Error::invalid("crop_scale must satisfy 0 < lo <= hi <= 1"));
        }
        if !ordered(self.crop_aspect, 0.0) {
            return Err(Error::invalid("crop_aspect must satisfy 0 < lo <= hi"));
        }
        if !ordered(self.blur_sigma, 0.0) {
            return Err(Error::invalid("blur_sigma must satisfy 0 < lo <= hi"));
        }
        if self.jitter_strengths.iter().any(|s| !(*s >= 0.0)) || self.jitter_strengths[3] > 0.5 {
            return Err(Error::invalid("jitter strengths must be >= 0 (hue <= 0.5)"));
        }
        if !(self.blur_kernel_frac >= 0.0) {
            return Err(Error::invalid("blur_kernel_frac must be >= 0"));
        }
        Ok(())
    }
}

/// Two-view generation for vector data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorAugment {
    /// Standard deviation of the additive view noise. Views need noise on
    /// the scale of the within-class spread to carry class-level invariance.
    pub noise_sigma: f64,
    pub drop_p: f64,
}

impl Default for VectorAugment {
    fn default() -> Self {
        VectorAugment {
            noise_sigma: 1.0,
            drop_p: 0.0,
        }
    }
}

/// Additive Gaussian noise, then each coordinate zeroed with probability
/// `drop_p`.
pub fn augment_vector(v: &Tensor, noise_sigma: f64, drop_p: f64, seed: u64) -> Result<Tensor> {
    if !v.all_finite() {
        return Err(Error::NonFinite("vector to augment".into()));
    }
    if !(0.0..=1.0).contains(&drop_p) {
        return Err(Error::invalid(format!("drop_p must lie in [0, 1], got {drop_p}")));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(format!("noise_sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = v.clone();
    for x in out.data_mut() {
        *x += normal.sample(&mut rng);
        if rng.random::<f64>() < drop_p {
            *x = 0.0;
        }
    }
    Ok(out)
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Random resized crop, horizontal flip, colour jitter, grayscale and
/// Gaussian blur, in that order, on a `[C, H, W]` image with values in
/// `[0, 1]`. Colour steps other than brightness and contrast need three
/// channels and are skipped otherwise.
pub fn augment_image(img: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    if img.rank() != 3 || img.shape()[1] < 4 || img.shape()[2] < 4 {
        return Err(Error::invalid(format!("need a [C, H, W] image of at least 4x4, got {:?}", img.shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);

    let (top, left, ch, cw) = crop_window(h, w, cfg, &mut rng);
    let mut out = resize_bilinear(img, top, left, ch, cw, h, w);

    if rng.random::<f64>() < cfg.flip_p {
        out = flip_horizontal(&out);
    }
    if rng.random::<f64>() < cfg.jitter_p {
        let [sb, sc, ss, sh] = cfg.jitter_strengths;
        let b = rng.random_range(1.0 - sb..=1.0 + sb);
        let k = rng.random_range(1.0 - sc..=1.0 + sc);
        let s = rng.random_range(1.0 - ss..=1.0 + ss);
        let hue = rng.random_range(-sh..=sh);
        for v in out.data_mut() {
            *v = (*v * b.max(0.0)).clamp(0.0, 1.0);
        }
        let m = gray_mean(&out);
        for v in out.data_mut() {
            *v = ((*v - m) * k.max(0.0) + m).clamp(0.0, 1.0);
        }
        if c == 3 {
            saturate(&mut out, s.max(0.0));
            shift_hue(&mut out, hue);
        }
    }
    if rng.random::<f64>() < cfg.grayscale_p && c == 3 {
        to_grayscale(&mut out);
    }
    if rng.random::<f64>() < cfg.blur_p {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        let mut k = (cfg.blur_kernel_frac * h.max(w) as f64).round() as usize;
        if k % 2 == 0 {
            k += 1;
        }
        out = gaussian_blur(&out, k, sigma);
    }
    Ok(out)
}

/// Crop window `(top, left, height, width)`. Invalid draws are retried up to
/// ten times before falling back to a centred crop.
fn crop_window(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (la, lb) = (cfg.crop_aspect[0].ln(), cfg.crop_aspect[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let aspect = rng.random_range(la..=lb).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < cfg.crop_aspect[0] {
        ((w as f64 / cfg.crop_aspect[0]).round() as usize, w)
    } else if ratio > cfg.crop_aspect[1] {
        (h, (h as f64 * cfg.crop_aspect[1]).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resampling of a crop to `oh x ow` with half-pixel centres.
fn resize_bilinear(img: &Tensor, top: usize, left: usize, ch: usize, cw: usize, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let coord = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; c * oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, ch);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, cw);
            for k in 0..c {
                let at = |yy: usize, xx: usize| src[(k * h + top + yy) * w + left + xx];
                let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(k * oh + y) * ow + x] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("shape matches")
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let w = img.shape()[2];
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn gray_mean(img: &Tensor) -> f64 {
    let c = img.shape()[0];
    if c != 3 {
        return img.sum() / img.len() as f64;
    }
    let plane = img.len() / 3;
    let d = img.data();
    (0..plane)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i])
        .sum::<f64>()
        / plane as f64
}

fn saturate(img: &mut Tensor, s: f64) {
    let plane = img.len() / 3;
    let d = img.data_mut();
    for i in 0..plane {
        let g = LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i];
        for k in 0..3 {
            let v = &mut d[k * plane + i];
            *v = ((*v - g) * s + g).clamp(0.0, 1.0);
        }
    }
}

fn to_grayscale(img: &mut Tensor) {
    let plane = img.len() / 3;
    let d = img.data_mut();
    for i in 0..plane {
        let g = LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i];
        for k in 0..3 {
            d[k * plane + i] = g;
        }
    }
}

/// Rotates the hue of every pixel by `shift` turns.
fn shift_hue(img: &mut Tensor, shift: f64) {
    if shift == 0.0 {
        return;
    }
    let plane = img.len() / 3;
    let d = img.data_mut();
    for i in 0..plane {
        let (r, g, b) = (d[i], d[plane + i], d[2 * plane + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta == 0.0 {
            continue;
        }
        let mut hue = if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } / 6.0;
        hue = (hue + shift).rem_euclid(1.0);
        let (s, v) = (delta / max, max);
        let h6 = hue * 6.0;
        let sector = h6.floor();
        let f = h6 - sector;
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (nr, ng, nb) = match sector as i64 % 6 {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        d[i] = nr;
        d[plane + i] = ng;
        d[2 * plane + i] = nb;
    }
}

/// Separable Gaussian blur with an odd kernel of size `k` and reflected
/// borders.
fn gaussian_blur(img: &Tensor, k: usize, sigma: f64) -> Tensor {
    if k <= 1 {
        return img.clone();
    }
    let r = (k / 2) as isize;
    let weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|x| x / total).collect();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, wt) in weights.iter().enumerate() {
                    let xx = reflect(x as isize + j as isize - r, w);
                    acc += wt * src[(ch * h + y) * w + xx];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, wt) in weights.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - r, h);
                    acc += wt * tmp[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn image(c: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![c, side, side], (0..c * side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identity_pipeline() {
        let img = image(3, 8, 0);
        for seed in 0..5 {
            assert_eq!(augment_image(&img, &AugmentConfig::identity(), seed).unwrap(), img);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = image(3, 6, 1);
        let cfg = AugmentConfig {
            flip_p: 1.0,
            ..AugmentConfig::identity()
        };
        let once = augment_image(&img, &cfg, 3).unwrap();
        assert_eq!(once, flip_horizontal(&img));
        assert_ne!(once, img);
        assert_eq!(augment_image(&once, &cfg, 4).unwrap(), img);
        assert_eq!(once.data()[0], img.data()[5]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let img = image(3, 16, 2);
        let cfg = AugmentConfig::default();
        let a = augment_image(&img, &cfg, 10).unwrap();
        assert_eq!(a, augment_image(&img, &cfg, 10).unwrap());
        assert_ne!(a, augment_image(&img, &cfg, 11).unwrap());
        assert_eq!(a.shape(), img.shape());
    }

    #[test]
    fn rejects_small_images() {
        assert!(augment_image(&image(3, 3, 0), &AugmentConfig::default(), 0).is_err());
    }

    #[test]
    fn degenerate_crop_falls_back_to_center() {
        // Aspect range far from what fits: every draw is rejected.
        let cfg = AugmentConfig {
            crop_aspect: [50.0, 60.0],
            crop_scale: [1.0, 1.0],
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (top, left, ch, cw) = crop_window(8, 8, &cfg, &mut rng);
        assert_eq!((top, left, ch, cw), (3, 0, 1, 8));
        let img = image(1, 8, 0);
        let out = augment_image(&img, &cfg, 0).unwrap();
        // Every output row is the stretched middle row.
        for y in 0..8 {
            assert_eq!(out.data()[y * 8..y * 8 + 8], img.data()[24..32]);
        }
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let cfg = AugmentConfig {
            grayscale_p: 1.0,
            ..AugmentConfig::identity()
        };
        let out = augment_image(&image(3, 4, 5), &cfg, 0).unwrap();
        let d = out.data();
        for i in 0..16 {
            assert_eq!(d[i], d[16 + i]);
            assert_eq!(d[i], d[32 + i]);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let cfg = AugmentConfig {
            blur_p: 1.0,
            blur_kernel_frac: 0.5,
            ..AugmentConfig::identity()
        };
        let img = Tensor::full(&[3, 8, 8], 0.3);
        let out = augment_image(&img, &cfg, 1).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-15);
    }

    #[test]
    fn hue_full_turn_is_identity() {
        let mut img = image(3, 4, 6);
        let orig = img.clone();
        shift_hue(&mut img, 1.0);
        assert!(img.max_abs_diff(&orig) < 1e-12);
    }

    #[test]
    fn vector_examples() {
        let v = Tensor::vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(augment_vector(&v, 0.0, 0.0, 1).unwrap(), v);
        assert!(augment_vector(&v, 0.5, 1.0, 1).unwrap().data().iter().all(|&x| x == 0.0));
        let a = augment_vector(&v, 0.1, 0.0, 1).unwrap();
        let b = augment_vector(&v, 0.1, 0.0, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, augment_vector(&v, 0.1, 0.0, 1).unwrap());
        assert!(augment_vector(&Tensor::vector(vec![f64::NAN]), 0.1, 0.0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn outputs_stay_in_unit_range(seed in any::<u64>(), c in prop::sample::select(vec![1usize, 3])) {
            let img = image(c, 8, seed);
            let out = augment_image(&img, &AugmentConfig::default(), seed).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
            prop_assert_eq!(out, augment_image(&img, &AugmentConfig::default(), seed).unwrap());
        }
    }
}
