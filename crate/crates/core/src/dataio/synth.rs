//! Two-class synthetic images: a pink field with a central ellipse whose
//! interior carries smooth reddish blobs (label 0) or fine whitish rings
//! (label 1).

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub per_class: usize,
    pub size: usize,
    /// Ring count across the ellipse radius for label 1.
    pub ring_frequency: f32,
    /// Blob count inside the ellipse for label 0.
    pub blobs: usize,
    /// Ellipse radii as fractions of the image side.
    pub radius_range: (f32, f32),
    /// Standard deviation of per-pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            per_class: 100,
            size: 224,
            ring_frequency: 7.0,
            blobs: 3,
            radius_range: (0.28, 0.4),
            noise: 0.03,
            seed: 0,
        }
    }
}

fn render(cfg: &SyntheticConfig, label: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let s = cfg.size;
    let sf = s as f32;
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid("synthetic noise", e.to_string()))?;
    let base = [
        0.82 + rng.random_range(-0.04..0.04),
        0.58 + rng.random_range(-0.04..0.04),
        0.62 + rng.random_range(-0.04..0.04),
    ];
    // low-frequency background shading
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0) * 2.0 * PI / sf,
                rng.random_range(0.5..2.0) * 2.0 * PI / sf,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let (lo, hi) = cfg.radius_range;
    let (cy, cx) = (
        sf * (0.5 + rng.random_range(-0.06..0.06)),
        sf * (0.5 + rng.random_range(-0.06..0.06)),
    );
    let (ry, rx) = (sf * rng.random_range(lo..hi), sf * rng.random_range(lo..hi));
    let blobs: Vec<(f32, f32, f32)> = (0..cfg.blobs)
        .map(|_| {
            let a = rng.random_range(0.0..2.0 * PI);
            let r = rng.random_range(0.0..0.6);
            (
                cy + ry * r * a.sin(),
                cx + rx * r * a.cos(),
                sf * rng.random_range(0.08..0.14),
            )
        })
        .collect();
    let phase = rng.random_range(0.0..2.0 * PI);
    let plane = s * s;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..s {
        for x in 0..s {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let shade: f32 = waves.iter().map(|&(wy, wx, p)| (wy * fy + wx * fx + p).sin()).sum::<f32>() * 0.015;
            let mut px = [base[0] + shade, base[1] + shade, base[2] + shade];
            let d = (((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2)).sqrt();
            if d < 1.0 {
                // soft edge over the outer tenth of the ellipse
                let edge = ((1.0 - d) / 0.1).min(1.0);
                let tint = if label == 0 {
                    let mass: f32 = blobs
                        .iter()
                        .map(|&(by, bx, r)| (-((fy - by).powi(2) + (fx - bx).powi(2)) / (2.0 * r * r)).exp())
                        .sum::<f32>()
                        .min(1.0);
                    [0.1 * mass, -0.3 * mass - 0.05, -0.25 * mass - 0.05]
                } else {
                    let ring = 0.5 + 0.5 * (2.0 * PI * cfg.ring_frequency * d + phase).cos();
                    let w = 0.15 + 0.35 * ring;
                    [w * (1.0 - px[0]), w * (1.0 - px[1]), w * (1.0 - px[2])]
                };
                for (p, t) in px.iter_mut().zip(tint) {
                    *p += edge * t;
                }
            }
            for (ch, p) in px.iter().enumerate() {
                data[ch * plane + y * s + x] = (p + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, s, s], data)
}

/// Generates `2 * per_class` images with alternating labels `0, 1, 0, ...`.
/// Image `i` depends only on `(seed, i)`.
pub fn synth_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.per_class == 0 || cfg.size < 8 {
        return Err(Error::invalid(
            "synthetic config",
            format!("need per_class >= 1 and size >= 8, got {} and {}", cfg.per_class, cfg.size),
        ));
    }
    let (lo, hi) = cfg.radius_range;
    if !(lo > 0.0 && lo < hi && hi <= 0.5) {
        return Err(Error::invalid("synthetic config", format!("radius range ({lo}, {hi}) must satisfy 0 < lo < hi <= 0.5")));
    }
    let n = 2 * cfg.per_class;
    let mut ds = Dataset::default();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let label = i % 2;
        ds.images.push(render(cfg, label, &mut rng)?);
        ds.labels.push(label);
        ds.sources.push(format!("synthetic:{}:{i}", cfg.seed));
    }
    Ok(ds)
}
