//! Deterministic augmentation sampling and application.
//!
//! Every transform is a fully materialized [`TransformSpec`]: the crop
//! rectangle, flip flag and all color-op parameters are sampled once and
//! recorded, so applying the same spec twice is bit-identical and the
//! forward/inverse coordinate maps are exact closed-form affines.
//!
//! Coordinate convention: pixel centers sit at integer coordinates.
//! Crop+resize is the affine `x_view = (x_src - x0) * W / cw`; horizontal
//! flip is `x -> (W-1) - x`, applied after the resize.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::rng_from_seed;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    /// Color ops only; full-image crop, never flipped.
    ColorOnly,
    /// Random resized crop + optional flip + color ops.
    SpatialColor,
}

/// One recorded color operation with its sampled parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColorOp {
    /// Multiplicative factors for brightness/contrast/saturation and an
    /// additive hue rotation in turns, applied in this fixed order.
    Jitter {
        brightness: f32,
        contrast: f32,
        saturation: f32,
        hue: f32,
    },
    Grayscale,
    GaussianBlur { sigma: f32 },
    Solarize { threshold: f32 },
}

/// A fully deterministic record of one augmentation pipeline instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Crop rectangle `(x0, y0, cw, ch)` in continuous source pixel coords.
    pub crop: (f64, f64, f64, f64),
    pub flip: bool,
    /// Output size `(height, width)`.
    pub out_size: (usize, usize),
    pub color_ops: Vec<ColorOp>,
    pub seed: u64,
}

/// Augmentation menu configuration (BYOL-style defaults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub src_size: (usize, usize),
    pub out_size: (usize, usize),
    /// Crop area as a fraction of the source area.
    pub scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Max strengths: brightness, contrast, saturation, hue.
    pub jitter_strength: (f32, f32, f32, f32),
    pub grayscale_p: f64,
    /// Blur probability for the (color-only, spatial+color) views.
    pub blur_p: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    /// Solarize probability for the (color-only, spatial+color) views.
    pub solarize_p: (f64, f64),
    pub solarize_threshold: f32,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            src_size: (64, 64),
            out_size: (64, 64),
            scale_range: (0.4, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_strength: (0.4, 0.4, 0.2, 0.1),
            grayscale_p: 0.2,
            blur_p: (1.0, 0.1),
            blur_sigma_range: (0.1, 2.0),
            solarize_p: (0.0, 0.2),
            solarize_threshold: 0.5,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("scale_range", self.scale_range),
            ("aspect_range", self.aspect_range),
            ("blur_sigma_range", self.blur_sigma_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || lo <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must satisfy 0 < min <= max, got ({lo}, {hi})"
                )));
            }
        }
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p.0", self.blur_p.0),
            ("blur_p.1", self.blur_p.1),
            ("solarize_p.0", self.solarize_p.0),
            ("solarize_p.1", self.solarize_p.1),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&self.solarize_threshold) {
            return Err(Error::Config(format!(
                "solarize_threshold must be in [0,1], got {}",
                self.solarize_threshold
            )));
        }
        if self.src_size.0 < 8 || self.src_size.1 < 8 || self.out_size.0 < 8 || self.out_size.1 < 8
        {
            return Err(Error::Config("sizes must be at least 8 pixels".into()));
        }
        Ok(())
    }
}

/// Sample a [`TransformSpec`] reproducibly from `(seed, config, kind)`.
pub fn sample_transform(seed: u64, config: &AugConfig, kind: TransformKind) -> Result<TransformSpec> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let (src_h, src_w) = (config.src_size.0 as f64, config.src_size.1 as f64);

    let (crop, flip) = match kind {
        TransformKind::ColorOnly => ((0.0, 0.0, src_w, src_h), false),
        TransformKind::SpatialColor => {
            let crop = sample_crop(&mut rng, config);
            let flip = rng.gen_range(0.0..1.0f64) < config.flip_p;
            (crop, flip)
        }
    };

    let mut color_ops = Vec::new();
    if rng.gen_range(0.0..1.0f64) < config.jitter_p {
        let (b, c, s, h) = config.jitter_strength;
        color_ops.push(ColorOp::Jitter {
            brightness: rng.gen_range((1.0 - b).max(0.0)..1.0 + b),
            contrast: rng.gen_range((1.0 - c).max(0.0)..1.0 + c),
            saturation: rng.gen_range((1.0 - s).max(0.0)..1.0 + s),
            hue: rng.gen_range(-h..h.max(1e-12)),
        });
    }
    if rng.gen_range(0.0..1.0f64) < config.grayscale_p {
        color_ops.push(ColorOp::Grayscale);
    }
    let view_idx = match kind {
        TransformKind::ColorOnly => 0,
        TransformKind::SpatialColor => 1,
    };
    let blur_p = [config.blur_p.0, config.blur_p.1][view_idx];
    if rng.gen_range(0.0..1.0f64) < blur_p {
        let (lo, hi) = config.blur_sigma_range;
        color_ops.push(ColorOp::GaussianBlur {
            sigma: rng.gen_range(lo..hi.max(lo + 1e-12)) as f32,
        });
    }
    let sol_p = [config.solarize_p.0, config.solarize_p.1][view_idx];
    if rng.gen_range(0.0..1.0f64) < sol_p {
        color_ops.push(ColorOp::Solarize {
            threshold: config.solarize_threshold,
        });
    }

    Ok(TransformSpec {
        kind,
        crop,
        flip,
        out_size: config.out_size,
        color_ops,
        seed,
    })
}

/// RandomResizedCrop-style rejection sampling with center-crop fallback.
fn sample_crop<R: Rng>(rng: &mut R, config: &AugConfig) -> (f64, f64, f64, f64) {
    let (src_h, src_w) = (config.src_size.0 as f64, config.src_size.1 as f64);
    let area = src_h * src_w;
    for _ in 0..10 {
        let target = area * rng.gen_range(config.scale_range.0..=config.scale_range.1);
        let log_lo = config.aspect_range.0.ln();
        let log_hi = config.aspect_range.1.ln();
        let ratio = rng.gen_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= src_w && ch <= src_h {
            let x0 = rng.gen_range(0.0..=(src_w - cw));
            let y0 = rng.gen_range(0.0..=(src_h - ch));
            return (x0, y0, cw, ch);
        }
    }
    // fallback: largest centered crop at mid-scale
    let s = config.scale_range.1.min(1.0).sqrt();
    let cw = src_w * s;
    let ch = src_h * s;
    ((src_w - cw) / 2.0, (src_h - ch) / 2.0, cw, ch)
}

/// Map a continuous view coordinate back to source coordinates.
pub fn map_view_to_source(spec: &TransformSpec, p_view: (f64, f64)) -> (f64, f64) {
    let (h, w) = (spec.out_size.0 as f64, spec.out_size.1 as f64);
    let (x0, y0, cw, ch) = spec.crop;
    let mut x = p_view.0;
    if spec.flip {
        x = (w - 1.0) - x;
    }
    (x0 + x * cw / w, y0 + p_view.1 * ch / h)
}

/// Map a continuous source coordinate into view coordinates.
pub fn map_source_to_view(spec: &TransformSpec, p_src: (f64, f64)) -> (f64, f64) {
    let (h, w) = (spec.out_size.0 as f64, spec.out_size.1 as f64);
    let (x0, y0, cw, ch) = spec.crop;
    let mut x = (p_src.0 - x0) * w / cw;
    if spec.flip {
        x = (w - 1.0) - x;
    }
    (x, (p_src.1 - y0) * h / ch)
}

/// Apply a spec to an image: crop -> bilinear resize -> flip -> color ops.
pub fn apply_transform(img: &Image, spec: &TransformSpec) -> Result<Image> {
    let (x0, y0, cw, ch) = spec.crop;
    let eps = 1e-9;
    if x0 < -eps
        || y0 < -eps
        || x0 + cw > img.width as f64 + eps
        || y0 + ch > img.height as f64 + eps
        || cw <= 0.0
        || ch <= 0.0
    {
        return Err(Error::Geometry(format!(
            "crop ({x0}, {y0}, {cw}, {ch}) outside {}x{} image",
            img.width, img.height
        )));
    }
    let (out_h, out_w) = spec.out_size;
    let mut out = Image::new(out_h, out_w);
    for iy in 0..out_h {
        for ix in 0..out_w {
            let (xs, ys) = map_view_to_source(spec, (ix as f64, iy as f64));
            out.set_pixel(ix, iy, img.sample_bilinear(xs, ys));
        }
    }
    for op in &spec.color_ops {
        apply_color_op(&mut out, op);
    }
    Ok(out)
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(p: [f32; 3]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn apply_color_op(img: &mut Image, op: &ColorOp) {
    match *op {
        ColorOp::Jitter {
            brightness,
            contrast,
            saturation,
            hue,
        } => {
            for v in &mut img.data {
                *v *= brightness;
            }
            img.clamp_unit();
            let n = (img.width * img.height) as f32;
            let mean_gray: f32 = img
                .data
                .chunks_exact(3)
                .map(|p| luma([p[0], p[1], p[2]]))
                .sum::<f32>()
                / n;
            for p in img.data.chunks_exact_mut(3) {
                for v in p.iter_mut() {
                    *v = contrast * *v + (1.0 - contrast) * mean_gray;
                }
            }
            img.clamp_unit();
            for p in img.data.chunks_exact_mut(3) {
                let g = luma([p[0], p[1], p[2]]);
                for v in p.iter_mut() {
                    *v = saturation * *v + (1.0 - saturation) * g;
                }
            }
            img.clamp_unit();
            if hue != 0.0 {
                for p in img.data.chunks_exact_mut(3) {
                    let shifted = shift_hue([p[0], p[1], p[2]], hue);
                    p.copy_from_slice(&shifted);
                }
                img.clamp_unit();
            }
        }
        ColorOp::Grayscale => {
            for p in img.data.chunks_exact_mut(3) {
                let g = luma([p[0], p[1], p[2]]);
                p.copy_from_slice(&[g, g, g]);
            }
        }
        ColorOp::GaussianBlur { sigma } => gaussian_blur(img, sigma),
        ColorOp::Solarize { threshold } => {
            for v in &mut img.data {
                if *v >= threshold {
                    *v = 1.0 - *v;
                }
            }
        }
    }
}

/// Hue rotation via piecewise-linear HSV round trip (no trigonometry).
fn shift_hue(p: [f32; 3], delta_turns: f32) -> [f32; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    if d <= 0.0 {
        return p;
    }
    let mut h = if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0)
    } else if max == p[1] {
        (p[2] - p[0]) / d + 2.0
    } else {
        (p[0] - p[1]) / d + 4.0
    } / 6.0;
    h = (h + delta_turns).rem_euclid(1.0);
    let (s, v) = (d / max, max);
    let hh = h * 6.0;
    let i = hh.floor() as i32 % 6;
    let f = hh - hh.floor();
    let q0 = v * (1.0 - s);
    let q1 = v * (1.0 - s * f);
    let q2 = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, q2, q0],
        1 => [q1, v, q0],
        2 => [q0, v, q2],
        3 => [q0, q1, v],
        4 => [q2, q0, v],
        _ => [v, q0, q1],
    }
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    let sigma = sigma.max(1e-3) as f64;
    let radius = (2.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let x = i as f64;
        let v = (-x * x / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    let kernel: Vec<f32> = kernel.into_iter().map(|v| (v / sum) as f32).collect();

    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = img.data.clone();
    // horizontal pass
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x + ki as i64 - radius).clamp(0, w - 1) as usize;
                let p = img.pixel(sx, y as usize);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            let i = ((y * w + x) * 3) as usize;
            tmp[i..i + 3].copy_from_slice(&acc);
        }
    }
    // vertical pass
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y + ki as i64 - radius).clamp(0, h - 1) as usize;
                let i = (sy * w as usize + x as usize) * 3;
                for c in 0..3 {
                    acc[c] += kv * tmp[i + c];
                }
            }
            img.set_pixel(x as usize, y as usize, acc);
        }
    }
    img.clamp_unit();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(
                    x,
                    y,
                    [
                        x as f32 / w as f32,
                        y as f32 / h as f32,
                        ((x + y) % 7) as f32 / 7.0,
                    ],
                );
            }
        }
        img
    }

    fn identity_spec(h: usize, w: usize) -> TransformSpec {
        TransformSpec {
            kind: TransformKind::ColorOnly,
            crop: (0.0, 0.0, w as f64, h as f64),
            flip: false,
            out_size: (h, w),
            color_ops: vec![],
            seed: 0,
        }
    }

    #[test]
    fn color_only_has_full_crop_and_no_flip() {
        let cfg = AugConfig::default();
        for seed in 0..32 {
            let spec = sample_transform(seed, &cfg, TransformKind::ColorOnly).unwrap();
            assert!(!spec.flip);
            assert_eq!(spec.crop, (0.0, 0.0, 64.0, 64.0));
        }
    }

    #[test]
    fn same_seed_same_spec() {
        let cfg = AugConfig::default();
        for kind in [TransformKind::ColorOnly, TransformKind::SpatialColor] {
            let a = sample_transform(99, &cfg, kind).unwrap();
            let b = sample_transform(99, &cfg, kind).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn degenerate_ranges_give_full_crop() {
        let cfg = AugConfig {
            scale_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            flip_p: 0.0,
            ..AugConfig::default()
        };
        let spec = sample_transform(7, &cfg, TransformKind::SpatialColor).unwrap();
        assert!(!spec.flip);
        let (x0, y0, cw, ch) = spec.crop;
        assert!(x0.abs() < 1e-9 && y0.abs() < 1e-9);
        assert!((cw - 64.0).abs() < 1e-9 && (ch - 64.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AugConfig {
            scale_range: (1.0, 0.4),
            ..AugConfig::default()
        };
        assert!(sample_transform(0, &cfg, TransformKind::SpatialColor).is_err());
    }

    #[test]
    fn identity_spec_is_bit_identical() {
        let img = ramp_image(16, 16);
        let out = apply_transform(&img, &identity_spec(16, 16)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn flip_twice_recovers_exactly() {
        let img = ramp_image(16, 12);
        let mut spec = identity_spec(16, 12);
        spec.kind = TransformKind::SpatialColor;
        spec.flip = true;
        let once = apply_transform(&img, &spec).unwrap();
        let twice = apply_transform(&once, &spec).unwrap();
        assert_eq!(twice, img);
        assert_ne!(once, img);
    }

    #[test]
    fn crop_upsample_matches_hand_bilinear() {
        // 4x4 ramp, crop the 2x2 corner, upsample to 4x4.
        let img = ramp_image(4, 4);
        let spec = TransformSpec {
            kind: TransformKind::SpatialColor,
            crop: (0.0, 0.0, 2.0, 2.0),
            flip: false,
            out_size: (4, 4),
            color_ops: vec![],
            seed: 0,
        };
        let out = apply_transform(&img, &spec).unwrap();
        // view pixel (ix, iy) samples source (ix/2, iy/2)
        for iy in 0..4 {
            for ix in 0..4 {
                let xs = ix as f64 * 0.5;
                let ys = iy as f64 * 0.5;
                let x0 = xs.floor() as usize;
                let y0 = ys.floor() as usize;
                let x1 = (x0 + 1).min(3);
                let y1 = (y0 + 1).min(3);
                let dx = (xs - x0 as f64) as f32;
                let dy = (ys - y0 as f64) as f32;
                for c in 0..3 {
                    let p00 = img.pixel(x0, y0)[c];
                    let p10 = img.pixel(x1, y0)[c];
                    let p01 = img.pixel(x0, y1)[c];
                    let p11 = img.pixel(x1, y1)[c];
                    let expect = (1.0 - dy) * ((1.0 - dx) * p00 + dx * p10)
                        + dy * ((1.0 - dx) * p01 + dx * p11);
                    let got = out.pixel(ix, iy)[c];
                    assert!((got - expect).abs() < 1e-6, "({ix},{iy},{c})");
                }
            }
        }
    }

    #[test]
    fn flip_map_center_convention() {
        let mut spec = identity_spec(64, 64);
        spec.flip = true;
        assert_eq!(map_view_to_source(&spec, (10.0, 3.0)), (53.0, 3.0));
        assert_eq!(map_source_to_view(&spec, (53.0, 3.0)), (10.0, 3.0));
    }

    #[test]
    fn maps_round_trip() {
        let cfg = AugConfig::default();
        for seed in 0..200u64 {
            let spec = sample_transform(seed, &cfg, TransformKind::SpatialColor).unwrap();
            let mut r = crate::rng::rng_from_seed(seed ^ 0xabcd);
            for _ in 0..5 {
                let p = (r.gen_range(-5.0..70.0), r.gen_range(-5.0..70.0));
                let s = map_view_to_source(&spec, p);
                let back = map_source_to_view(&spec, s);
                assert!((back.0 - p.0).abs() < 1e-9 && (back.1 - p.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn color_ops_stay_in_unit_range_and_keep_size() {
        let img = ramp_image(16, 16);
        let cfg = AugConfig {
            src_size: (16, 16),
            out_size: (16, 16),
            ..AugConfig::default()
        };
        for seed in 0..50 {
            let spec = sample_transform(seed, &cfg, TransformKind::SpatialColor).unwrap();
            let out = apply_transform(&img, &spec).unwrap();
            assert_eq!((out.height, out.width), spec.out_size);
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn apply_is_deterministic() {
        let img = ramp_image(32, 32);
        let cfg = AugConfig {
            src_size: (32, 32),
            out_size: (32, 32),
            ..AugConfig::default()
        };
        let spec = sample_transform(3, &cfg, TransformKind::SpatialColor).unwrap();
        let a = apply_transform(&img, &spec).unwrap();
        let b = apply_transform(&img, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_bounds_crop_rejected() {
        let img = ramp_image(16, 16);
        let mut spec = identity_spec(16, 16);
        spec.crop = (10.0, 10.0, 10.0, 10.0);
        assert!(apply_transform(&img, &spec).is_err());
    }
}
