//! Seed-replayable image augmentations and augmented episode construction.
//!
//! Pipelines are strings of op letters applied left to right:
//! `S` scale, `C` random resized crop, `J` brightness/contrast/saturation
//! jitter, `H` horizontal flip with probability 0.5, `R` rotation by a
//! uniform angle in `[0°, 45°]`. Each image of branch `i` gets its own
//! generator seeded from `(base_seed, i, sample_id)`.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, EpisodeItem};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::seed;

pub const DEFAULT_HW: usize = 84;
pub const CROP_AREA: (f64, f64) = (0.08, 1.0);
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const JITTER: f32 = 0.4;
pub const FLIP_PROB: f64 = 0.5;
pub const MAX_ROTATION_DEG: f32 = 45.0;

/// Ten pipelines for natural-image targets.
pub const PIPELINES_COLOR: [&str; 10] = ["S", "SJHR", "SR", "SJ", "SH", "SJHR", "SR", "SJR", "SJH", "SH"];
/// Ten pipelines for grayscale (X-ray style) targets.
pub const PIPELINES_GRAY: [&str; 10] = ["S", "SJH", "C", "CJ", "CH", "CJH", "C", "CJ", "CJH", "CH"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugOp {
    Scale,
    RandomResizedCrop,
    Jitter,
    HFlip,
    Rotation,
}

impl AugOp {
    pub fn letter(self) -> char {
        match self {
            AugOp::Scale => 'S',
            AugOp::RandomResizedCrop => 'C',
            AugOp::Jitter => 'J',
            AugOp::HFlip => 'H',
            AugOp::Rotation => 'R',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Some(match c {
            'S' => AugOp::Scale,
            'C' => AugOp::RandomResizedCrop,
            'J' => AugOp::Jitter,
            'H' => AugOp::HFlip,
            'R' => AugOp::Rotation,
            _ => return None,
        })
    }

    pub fn apply(self, img: &Image, hw: usize, rng: &mut ChaCha8Rng) -> Image {
        match self {
            AugOp::Scale => scale(img, hw),
            AugOp::RandomResizedCrop => random_resized_crop(img, hw, rng),
            AugOp::Jitter => jitter(img, rng),
            AugOp::HFlip => random_hflip(img, rng),
            AugOp::Rotation => random_rotation(img, rng),
        }
    }
}

/// An ordered list of ops; its id is the concatenated op letters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugPipeline {
    ops: Vec<AugOp>,
    hw: usize,
}

impl AugPipeline {
    pub fn parse(id: &str, hw: usize) -> Result<Self> {
        if id.is_empty() {
            return Err(Error::Config("empty augmentation pipeline".into()));
        }
        if hw == 0 {
            return Err(Error::Config("augmentation output size must be positive".into()));
        }
        let ops = id
            .chars()
            .map(|c| AugOp::from_letter(c).ok_or_else(|| Error::Config(format!("unknown augmentation op {c:?} in {id:?}"))))
            .collect::<Result<_>>()?;
        Ok(AugPipeline { ops, hw })
    }

    pub fn id(&self) -> String {
        self.ops.iter().map(|o| o.letter()).collect()
    }

    pub fn ops(&self) -> &[AugOp] {
        &self.ops
    }

    pub fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Image {
        let mut out = img.clone();
        for op in &self.ops {
            out = op.apply(&out, self.hw, rng);
        }
        out
    }

    /// Applies the pipeline with the generator of image `sample_id` in branch `branch`.
    pub fn apply_seeded(&self, img: &Image, base_seed: u64, branch: usize, sample_id: usize) -> Image {
        let mut rng = seed::rng(base_seed, &[branch as u64, sample_id as u64]);
        self.apply(img, &mut rng)
    }
}

impl fmt::Display for AugPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

pub fn parse_pipelines<S: AsRef<str>>(ids: &[S], hw: usize) -> Result<Vec<AugPipeline>> {
    ids.iter().map(|s| AugPipeline::parse(s.as_ref(), hw)).collect()
}

/// Named pipeline sets usable in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineSet {
    Color,
    Gray,
}

impl PipelineSet {
    pub fn ids(self) -> &'static [&'static str; 10] {
        match self {
            PipelineSet::Color => &PIPELINES_COLOR,
            PipelineSet::Gray => &PIPELINES_GRAY,
        }
    }
}

/// Bilinear sample at continuous pixel coordinates, clamped to the border.
fn sample_clamped(img: &Image, y: f32, x: f32, out: &mut [f32]) {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let d = img.data();
    let at = |yy: usize, xx: usize, c: usize| d[(yy * w + xx) * CHANNELS + c];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(y0, x0, c) + (at(y0, x1, c) - at(y0, x0, c)) * fx;
        let bot = at(y1, x0, c) + (at(y1, x1, c) - at(y1, x0, c)) * fx;
        *o = top + (bot - top) * fy;
    }
}

/// Bilinear resize of the window `(top, left, h, w)` to `hw × hw`
/// (half-pixel centers, edge clamping).
fn resize_region(img: &Image, top: usize, left: usize, h: usize, w: usize, hw: usize) -> Image {
    let (sy, sx) = (h as f32 / hw as f32, w as f32 / hw as f32);
    let mut data = vec![0.0; hw * hw * CHANNELS];
    for (oy, row) in data.chunks_mut(hw * CHANNELS).enumerate() {
        let y = (top as f32 + ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32)).min((img.height() - 1) as f32);
        for (ox, px) in row.chunks_mut(CHANNELS).enumerate() {
            let x = (left as f32 + ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32)).min((img.width() - 1) as f32);
            sample_clamped(img, y, x, px);
        }
    }
    Image::new(hw, hw, data).expect("resize output")
}

/// Bilinear resize to `hw × hw`; an input of that size is returned as is.
pub fn scale(img: &Image, hw: usize) -> Image {
    if img.height() == hw && img.width() == hw {
        return img.clone();
    }
    resize_region(img, 0, 0, img.height(), img.width(), hw)
}

/// Crop window `(top, left, h, w)` with random area and aspect ratio;
/// after ten rejected draws, a center crop with clamped aspect ratio.
pub fn crop_window<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (lr0, lr1) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(CROP_AREA.0..=CROP_AREA.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if 0 < w && w <= width && 0 < h && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < CROP_RATIO.0 {
        (((width as f64 / CROP_RATIO.0).round() as usize).min(height), width)
    } else if in_ratio > CROP_RATIO.1 {
        (height, ((height as f64 * CROP_RATIO.1).round() as usize).min(width))
    } else {
        (height, width)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

pub fn random_resized_crop<R: Rng + ?Sized>(img: &Image, hw: usize, rng: &mut R) -> Image {
    let (top, left, h, w) = crop_window(img.height(), img.width(), rng);
    resize_region(img, top, left, h, w, hw)
}

/// The three colour adjustments of [`jitter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterStep {
    Brightness,
    Contrast,
    Saturation,
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Applies brightness, contrast and saturation factors in the given order.
/// Each step is the blend `f·x + (1 − f)·ref` followed by clamping, so a
/// factor of exactly 1 leaves the image unchanged.
pub fn jitter_with(img: &Image, factors: [f32; 3], order: [JitterStep; 3]) -> Image {
    let mut out = img.clone();
    for step in order {
        let d = out.data_mut();
        match step {
            JitterStep::Brightness => {
                let f = factors[0];
                for v in d.iter_mut() {
                    *v = (f * *v).clamp(0.0, 1.0);
                }
            }
            JitterStep::Contrast => {
                let f = factors[1];
                let n = d.len() / CHANNELS;
                let mean = d.chunks(CHANNELS).map(|p| luma(p) as f64).sum::<f64>() as f32 / n as f32;
                let r = (1.0 - f) * mean;
                for v in d.iter_mut() {
                    *v = (f * *v + r).clamp(0.0, 1.0);
                }
            }
            JitterStep::Saturation => {
                let f = factors[2];
                for p in d.chunks_mut(CHANNELS) {
                    let r = (1.0 - f) * luma(p);
                    for v in p.iter_mut() {
                        *v = (f * *v + r).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Draws factors uniform in `[0.6, 1.4]` and a random step order.
pub fn sample_jitter<R: Rng + ?Sized>(rng: &mut R) -> ([f32; 3], [JitterStep; 3]) {
    let lo = 1.0 - JITTER;
    let hi = 1.0 + JITTER;
    let factors = [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
    let mut order = [JitterStep::Brightness, JitterStep::Contrast, JitterStep::Saturation];
    order.shuffle(rng);
    (factors, order)
}

pub fn jitter<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let (factors, order) = sample_jitter(rng);
    jitter_with(img, factors, order)
}

pub fn hflip(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let src = img.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * CHANNELS;
            data.extend_from_slice(&src[i..i + CHANNELS]);
        }
    }
    Image::new(h, w, data).expect("flip output")
}

pub fn random_hflip<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    if rng.random_bool(FLIP_PROB) {
        hflip(img)
    } else {
        img.clone()
    }
}

/// Rotates counter-clockwise by `degrees` about the image center with
/// bilinear sampling; pixels that map outside the source are black.
pub fn rotate(img: &Image, degrees: f32) -> Image {
    let (h, w) = (img.height(), img.width());
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let tol = 1e-3;
    let mut data = vec![0.0; h * w * CHANNELS];
    for y in 0..h {
        let dy = y as f32 - cy;
        for x in 0..w {
            let dx = x as f32 - cx;
            // Inverse map: rotate the output coordinate back by -θ.
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            if sx < -tol || sy < -tol || sx > (w - 1) as f32 + tol || sy > (h - 1) as f32 + tol {
                continue;
            }
            let i = (y * w + x) * CHANNELS;
            sample_clamped(img, sy, sx, &mut data[i..i + CHANNELS]);
        }
    }
    Image::new(h, w, data).expect("rotation output")
}

pub fn random_rotation<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    rotate(img, rng.random_range(0.0..=MAX_ROTATION_DEG))
}

/// Builds one episode per pipeline with every support and query image
/// transformed; labels and sample ids are preserved.
pub fn build_augmented_sets(episode: &Episode, pipelines: &[AugPipeline], base_seed: u64) -> Result<Vec<Episode>> {
    if pipelines.is_empty() {
        return Err(Error::Invalid("augmentation needs at least one pipeline".into()));
    }
    let map = |items: &[EpisodeItem], branch: usize, p: &AugPipeline| {
        items
            .iter()
            .map(|it| EpisodeItem {
                image: Arc::new(p.apply_seeded(&it.image, base_seed, branch, it.sample_id)),
                ..it.clone()
            })
            .collect()
    };
    Ok(pipelines
        .iter()
        .enumerate()
        .map(|(i, p)| Episode {
            support: map(&episode.support, i, p),
            query: map(&episode.query, i, p),
            class_map: episode.class_map.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
    }

    fn max_diff(a: &Image, b: &Image) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    fn is_constant(img: &Image, rgb: [f32; 3], tol: f32) -> bool {
        img.data().chunks(3).all(|p| (0..3).all(|c| (p[c] - rgb[c]).abs() <= tol))
    }

    #[test]
    fn scale_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 84, 84);
        assert!(max_diff(&scale(&img, 84), &img) <= 1e-6);
        // Resampling at the same size through the general path is also exact.
        assert!(max_diff(&resize_region(&img, 0, 0, 84, 84, 84), &img) <= 1e-6);
        let c = [0.2, 0.5, 0.9];
        for (h, w) in [(7, 13), (168, 168), (84, 84), (200, 50)] {
            let out = scale(&Image::filled(h, w, c), 84);
            assert_eq!((out.height(), out.width()), (84, 84));
            assert!(is_constant(&out, c, 1e-6));
        }
    }

    #[test]
    fn crop_examples() {
        let c = [0.1, 0.7, 0.3];
        let flat = Image::filled(40, 60, c);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let out = random_resized_crop(&flat, 84, &mut rng);
            assert_eq!((out.height(), out.width()), (84, 84));
            assert!(is_constant(&out, c, 1e-6));
        }
        let img = random_image(&mut rng, 32, 32);
        let a = random_resized_crop(&img, 84, &mut ChaCha8Rng::seed_from_u64(5));
        let b = random_resized_crop(&img, 84, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn crop_windows_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let (t, l, h, w) = crop_window(50, 70, &mut rng);
            assert!(h >= 1 && w >= 1 && t + h <= 50 && l + w <= 70);
        }
        // Extreme aspect ratios force the center fallback.
        let (t, l, h, w) = crop_window(8, 400, &mut rng);
        assert!(t + h <= 8 && l + w <= 400);
        let (_, _, h, w) = crop_window(200, 8, &mut rng);
        assert!(h <= 200 && w == 8);
    }

    #[test]
    fn jitter_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 9, 9);
        let order = [JitterStep::Contrast, JitterStep::Saturation, JitterStep::Brightness];
        assert_eq!(jitter_with(&img, [1.0; 3], order), img);
        let gray = Image::new(5, 5, (0..25).flat_map(|i| [i as f32 / 25.0; 3]).collect()).unwrap();
        for _ in 0..20 {
            let out = jitter(&gray, &mut rng);
            assert!(out.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        }
        for _ in 0..20 {
            let out = jitter(&img, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(jitter(&img, &mut ChaCha8Rng::seed_from_u64(9)), jitter(&img, &mut ChaCha8Rng::seed_from_u64(9)));
    }

    #[test]
    fn jitter_factors_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut firsts = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let (f, order) = sample_jitter(&mut rng);
            assert!(f.iter().all(|v| (0.6..=1.4).contains(v)), "{f:?}");
            firsts.insert(format!("{:?}", order[0]));
        }
        assert_eq!(firsts.len(), 3);
    }

    #[test]
    fn flip_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 6, 5);
        assert_eq!(hflip(&hflip(&img)), img);
        let sym = hflip(&img);
        let sym = Image::new(6, 5, img.data().iter().zip(sym.data()).map(|(a, b)| a + b).collect()).unwrap();
        assert_eq!(hflip(&sym), sym);
        let flips = (0..10_000u64)
            .filter(|&s| random_hflip(&img, &mut ChaCha8Rng::seed_from_u64(s)) != img)
            .count();
        assert!((flips as f64 / 10_000.0 - 0.5).abs() < 0.02, "{flips}");
    }

    #[test]
    fn rotation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 12, 12);
        assert!(max_diff(&rotate(&img, 0.0), &img) <= 1e-6);
        let flat = Image::filled(21, 21, [0.4, 0.6, 0.8]);
        let out = rotate(&flat, 30.0);
        for y in 5..16 {
            for x in 5..16 {
                let p = out.pixel(y, x);
                assert!((p[0] - 0.4).abs() < 1e-6 && (p[2] - 0.8).abs() < 1e-6);
            }
        }
        // A 45° turn moves the corners outside the source.
        assert_eq!(rotate(&flat, 45.0).pixel(0, 0), [0.0; 3]);
        let a = random_rotation(&img, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, random_rotation(&img, &mut ChaCha8Rng::seed_from_u64(1)));
    }

    #[test]
    fn rotation_by_90_permutes_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = random_image(&mut rng, 7, 7);
        let out = rotate(&img, 90.0);
        for y in 0..7 {
            for x in 0..7 {
                let src = img.pixel(x, 6 - y);
                let got = out.pixel(y, x);
                assert!((0..3).all(|c| (src[c] - got[c]).abs() < 1e-5));
            }
        }
    }

    #[test]
    fn pipeline_parsing() {
        let p = AugPipeline::parse("SJHR", 84).unwrap();
        assert_eq!(p.id(), "SJHR");
        assert_eq!(p.ops(), &[AugOp::Scale, AugOp::Jitter, AugOp::HFlip, AugOp::Rotation]);
        assert!(AugPipeline::parse("", 84).is_err());
        assert!(AugPipeline::parse("SX", 84).is_err());
        assert_eq!(parse_pipelines(PipelineSet::Gray.ids(), 32).unwrap().len(), 10);
    }

    #[test]
    fn all_pipelines_give_valid_replayable_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 40, 30);
        for set in [PipelineSet::Color, PipelineSet::Gray] {
            for (i, p) in parse_pipelines(set.ids(), 84).unwrap().iter().enumerate() {
                let a = p.apply_seeded(&img, 5, i, 3);
                assert_eq!((a.height(), a.width()), (84, 84));
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(a, p.apply_seeded(&img, 5, i, 3));
            }
        }
        // The duplicate "SJHR" entries at positions 1 and 5 differ through their index.
        let p = AugPipeline::parse("SJHR", 84).unwrap();
        assert_ne!(p.apply_seeded(&img, 5, 1, 3), p.apply_seeded(&img, 5, 5, 3));
    }
}
