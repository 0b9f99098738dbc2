use super::rde::subband_stats;
use super::{check_image, predicted_class, Classifier};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2, idwt2, Wavelet, WaveletCoeffs};

/// Resolution of [`flip_point`].
pub const FLIP_TOLERANCE: f64 = 1.0 / 1024.0;

/// Bisects `t in [0, 1]` for the first point where the predicted class of
/// `path(t)` differs from that of `path(0)`, assuming a single crossing.
/// Returns 1.0 when `path(1)` keeps the class; otherwise the result is at
/// most `FLIP_TOLERANCE / 2` above the crossing.
pub fn flip_point(model: &impl Classifier, mut path: impl FnMut(f64) -> Result<Tensor<f32>>) -> Result<f64> {
    let class = predicted_class(model, &path(0.0)?)?;
    if predicted_class(model, &path(1.0)?)? == class {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > FLIP_TOLERANCE / 2.0 {
        let mid = 0.5 * (lo + hi);
        if predicted_class(model, &path(mid)?)? == class {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Flip point along `x + t (1 - s)(b - x)` for an `H x W` pixel mask `s`,
/// where `b` holds each channel's mean.
pub fn distortion_to_flip(model: &impl Classifier, image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    check_image(model, image)?;
    let &[c, h, w] = image.shape() else { unreachable!("checked above") };
    if mask.shape() != [h, w] {
        return Err(Error::shape("distortion_to_flip", format!("mask {:?} does not match image {h}x{w}", mask.shape())));
    }
    let plane = h * w;
    let x = image.data();
    let means: Vec<f32> = x.chunks(plane).map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32).collect();
    let dir: Vec<f32> = (0..c * plane)
        .map(|i| (1.0 - mask.data()[i % plane].clamp(0.0, 1.0)) * (means[i / plane] - x[i]))
        .collect();
    flip_point(model, |t| {
        let t = t as f32;
        Tensor::new([c, h, w], x.iter().zip(&dir).map(|(v, d)| v + t * d).collect())
    })
}

/// Flip point along `clip(x + t idwt((1 - s)(b - h)))` for a wavelet mask
/// `s`, where `h = dwt(x)` and `b` holds each channel and subband mean.
pub fn wavelet_distortion_to_flip(
    model: &impl Classifier,
    image: &Tensor<f32>,
    mask: &[f32],
    wavelet: Wavelet,
    levels: usize,
) -> Result<f64> {
    check_image(model, image)?;
    let coeffs = dwt2(image, wavelet, levels)?;
    let n = coeffs.layout.coeff_len();
    if mask.len() != n {
        return Err(Error::shape("wavelet_distortion_to_flip", format!("mask has {} entries, layout needs {n}", mask.len())));
    }
    let stats = subband_stats(&coeffs);
    let bands = coeffs.layout.bands();
    let mut delta = vec![0.0f32; coeffs.data.len()];
    for ch in 0..coeffs.layout.channels {
        for (b, (_, _, r)) in bands.iter().enumerate() {
            let mean = stats[ch * bands.len() + b].0 as f32;
            for i in r.clone() {
                let k = ch * n + i;
                delta[k] = (1.0 - mask[i].clamp(0.0, 1.0)) * (mean - coeffs.data[k]);
            }
        }
    }
    let dir = idwt2(&WaveletCoeffs {
        layout: coeffs.layout.clone(),
        data: delta,
    })?;
    flip_point(model, |t| {
        let t = t as f32;
        Tensor::new(
            image.shape().to_vec(),
            image.data().iter().zip(dir.data()).map(|(v, d)| (v + t * d).clamp(0.0, 1.0)).collect(),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::toy::{Brightness, Masked};

    fn model() -> Brightness {
        Brightness {
            shape: [3, 8, 8],
            scale: 30.0,
            threshold: 0.5,
        }
    }

    fn image() -> Tensor<f32> {
        Tensor::from_fn([3, 8, 8], |i| if i % 8 < 4 { 0.95 } else { 0.2 + 0.01 * (i % 3) as f32 })
    }

    fn grid_oracle(m: &Brightness, path: impl Fn(f64) -> Tensor<f32>) -> f64 {
        let c0 = predicted_class(m, &path(0.0)).unwrap();
        (0..=1024)
            .map(|k| k as f64 / 1024.0)
            .find(|&t| predicted_class(m, &path(t)).unwrap() != c0)
            .unwrap_or(1.0)
    }

    #[test]
    fn full_mask_never_flips() {
        let t = distortion_to_flip(&model(), &image(), &Tensor::ones([8, 8])).unwrap();
        assert_eq!(t, 1.0);
    }

    #[test]
    fn bisection_agrees_with_grid_search() {
        let m = model();
        let img = image();
        for cut in [2usize, 4, 6] {
            let mask = Tensor::from_fn([8, 8], |i| if i % 8 < cut { 0.0 } else { 1.0 });
            let t = distortion_to_flip(&m, &img, &mask).unwrap();
            let means: Vec<f32> = img.data().chunks(64).map(|p| p.iter().sum::<f32>() / 64.0).collect();
            let grid = grid_oracle(&m, |t| {
                Tensor::from_fn([3, 8, 8], |i| {
                    let x = img.data()[i];
                    x + t as f32 * (1.0 - mask.data()[i % 64]) * (means[i / 64] - x)
                })
            });
            assert!(grid < 1.0, "cut {cut} should flip");
            assert!((t - grid).abs() <= FLIP_TOLERANCE, "cut {cut}: {t} vs {grid}");
        }
    }

    #[test]
    fn boundary_model_flips_immediately() {
        let img = Tensor::from_fn([3, 8, 8], |i| if i % 8 < 4 { 1.0 } else { 0.0 });
        let m = Brightness {
            threshold: 0.5 - 1e-5,
            ..model()
        };
        let mask = Tensor::from_fn([8, 8], |i| if i % 8 < 4 { 0.0 } else { 1.0 });
        let t = distortion_to_flip(&m, &img, &mask).unwrap();
        assert!(t <= FLIP_TOLERANCE, "{t}");
    }

    #[test]
    fn wavelet_flip_matches_grid() {
        let m = Masked {
            inner: Brightness {
                threshold: 0.4,
                ..model()
            },
            mask: Tensor::from_fn([8, 8], |i| if i % 8 < 4 { 1.0 } else { 0.0 }),
        };
        let img = image();
        let coeffs = dwt2(&img, Wavelet::Haar, 2).unwrap();
        let n = coeffs.layout.coeff_len();
        assert_eq!(wavelet_distortion_to_flip(&m, &img, &vec![1.0; n], Wavelet::Haar, 2).unwrap(), 1.0);
        let t = wavelet_distortion_to_flip(&m, &img, &vec![0.0; n], Wavelet::Haar, 2).unwrap();
        // with an empty mask every coefficient moves to its subband mean
        let mut target = coeffs.clone();
        let per = target.layout.bands();
        for ch in 0..3 {
            for (_, _, r) in &per {
                let band = &mut target.data[ch * n + r.start..ch * n + r.end];
                let mean = band.iter().map(|&v| v as f64).sum::<f64>() / band.len() as f64;
                band.iter_mut().for_each(|v| *v = mean as f32);
            }
        }
        let end = idwt2(&target).unwrap();
        let c0 = predicted_class(&m, &img).unwrap();
        let grid = (0..=1024)
            .map(|k| k as f64 / 1024.0)
            .find(|&t| {
                let y = Tensor::from_fn([3, 8, 8], |i| {
                    let x = img.data()[i];
                    (x + t as f32 * (end.data()[i] - x)).clamp(0.0, 1.0)
                });
                predicted_class(&m, &y).unwrap() != c0
            })
            .unwrap();
        assert!((t - grid).abs() <= FLIP_TOLERANCE, "{t} vs {grid}");
    }
}
