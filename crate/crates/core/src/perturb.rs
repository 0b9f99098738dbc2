//! Gaussian noise and median blur corruptions, and the robustness sweep.

use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::explain::Classifier;
use crate::network::INFER_CHUNK;
use crate::tensor::Tensor;

fn chw(op: &'static str, image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(op, format!("expected C x H x W, got {s:?}"))),
    }
}

/// Adds i.i.d. `N(0, (percent / 100)^2)` to every sample and clips to `[0, 1]`.
pub fn gaussian_noise(image: &Tensor<f32>, percent: f64, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_noise_rng(image, percent, &mut rng)
}

fn gaussian_noise_rng(image: &Tensor<f32>, percent: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    if !(percent >= 0.0 && percent.is_finite()) {
        return Err(Error::invalid("noise level", format!("{percent}% must be a non-negative number")));
    }
    if percent == 0.0 {
        return Ok(image.clone());
    }
    let dist = Normal::new(0.0, percent / 100.0).map_err(|e| Error::invalid("noise level", e.to_string()))?;
    let data = image.data().iter().map(|&v| (v as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Odd kernel nearest to `percent` of `width` pixels, at least 1.
pub fn blur_kernel(percent: f64, width: usize) -> Result<usize> {
    if !(percent >= 0.0 && percent.is_finite()) {
        return Err(Error::invalid("blur level", format!("{percent}% must be a non-negative number")));
    }
    let size = percent / 100.0 * width as f64;
    let k = 2.0 * ((size - 1.0) / 2.0).round() + 1.0;
    Ok(k.max(1.0) as usize)
}

/// Per-channel `k x k` median filter with replicated borders; `k` is odd.
pub fn median_filter(image: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = chw("median_filter", image)?;
    if k.is_multiple_of(2) {
        return Err(Error::invalid("median kernel", format!("size {k} must be odd")));
    }
    if k == 1 {
        return Ok(image.clone());
    }
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(image.len());
    let mut window = Vec::with_capacity(k * k);
    for plane in image.data().chunks(h * w) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                window.clear();
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        window.push(plane[yy * w + xx]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
                out.push(*m);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Median blur whose kernel is `percent` of the image width.
pub fn median_blur(image: &Tensor<f32>, percent: f64) -> Result<Tensor<f32>> {
    let (_, _, w) = chw("median_blur", image)?;
    median_filter(image, blur_kernel(percent, w)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    Clean,
    Gaussian(f64),
    MedianBlur(f64),
}

impl Corruption {
    pub fn kind(&self) -> &'static str {
        match self {
            Corruption::Clean => "clean",
            Corruption::Gaussian(_) => "gaussian",
            Corruption::MedianBlur(_) => "median_blur",
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Corruption::Clean => 0.0,
            Corruption::Gaussian(p) | Corruption::MedianBlur(p) => p,
        }
    }
}

/// Clean baseline, then each noise level, then each blur level.
pub fn sweep_grid(noise: &[f64], blur: &[f64]) -> Vec<Corruption> {
    std::iter::once(Corruption::Clean)
        .chain(noise.iter().map(|&p| Corruption::Gaussian(p)))
        .chain(blur.iter().map(|&p| Corruption::MedianBlur(p)))
        .collect()
}

pub const DEFAULT_NOISE: [f64; 4] = [3.0, 5.0, 10.0, 30.0];
pub const DEFAULT_BLUR: [f64; 4] = [5.0, 10.0, 20.0, 30.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub corruption: Corruption,
    /// Noise sigma, or blur kernel size.
    pub kernel_or_sigma: f64,
    pub n_images: usize,
    pub accuracy: f64,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.corruption.kind(),
            self.corruption.level(),
            self.kernel_or_sigma,
            self.n_images,
            self.accuracy
        )
    }
}

pub const SWEEP_HEADER: &str = "kind,level,kernel_or_sigma,n_images,accuracy";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(out, "{r}").unwrap();
    }
    out
}

/// Accuracy under each corruption. Noise for image `i` comes from stream
/// `i` of a generator seeded with `seed`, so rows do not depend on each
/// other or on batch order.
pub fn robustness_sweep(
    model: &impl Classifier,
    images: &[Tensor<f32>],
    labels: &[usize],
    grid: &[Corruption],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid(
            "robustness sweep",
            format!("need a non-empty image set with one label each, got {} images and {} labels", images.len(), labels.len()),
        ));
    }
    let width = chw("robustness_sweep", &images[0])?.2;
    let mut rows = Vec::with_capacity(grid.len());
    for &corruption in grid {
        let kernel_or_sigma = match corruption {
            Corruption::Clean => 0.0,
            Corruption::Gaussian(p) => p / 100.0,
            Corruption::MedianBlur(p) => blur_kernel(p, width)? as f64,
        };
        let mut correct = 0;
        for (start, chunk) in (0..images.len()).step_by(INFER_CHUNK).zip(images.chunks(INFER_CHUNK)) {
            let corrupted = chunk
                .iter()
                .enumerate()
                .map(|(j, img)| match corruption {
                    Corruption::Clean => Ok(img.clone()),
                    Corruption::Gaussian(p) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream((start + j) as u64);
                        gaussian_noise_rng(img, p, &mut rng)
                    }
                    Corruption::MedianBlur(p) => median_blur(img, p),
                })
                .collect::<Result<Vec<_>>>()?;
            let probs = model.predict_proba(&Tensor::stack(&corrupted)?)?;
            correct += probs
                .argmax_rows()
                .iter()
                .zip(&labels[start..start + chunk.len()])
                .filter(|(p, l)| p == l)
                .count();
        }
        rows.push(SweepRow {
            corruption,
            kernel_or_sigma,
            n_images: images.len(),
            accuracy: correct as f64 / images.len() as f64,
        });
    }
    Ok(rows)
}
