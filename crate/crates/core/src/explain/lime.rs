use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::quickshift::{quickshift_segment, QuickshiftConfig, Segmentation};
use super::{argmax, check_class, check_image, proba_many, Classifier};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LimeConfig {
    pub num_features: usize,
    pub num_samples: usize,
    /// Width of the exponential proximity kernel over cosine distance.
    pub kernel_width: f64,
    /// Ridge penalty of the surrogate.
    pub alpha: f64,
    pub segmentation: QuickshiftConfig,
    /// Class to explain; the predicted class when `None`.
    pub target: Option<usize>,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            num_features: 20,
            num_samples: 2000,
            kernel_width: 0.25,
            alpha: 1.0,
            segmentation: QuickshiftConfig::default(),
            target: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelExplanation {
    pub segments: Segmentation,
    /// Surrogate coefficient per segment (zero outside the selected set).
    pub coefficients: Vec<f64>,
    /// Selected segments, largest `|coefficient|` first.
    pub selected: Vec<usize>,
    pub intercept: f64,
    /// Weighted R^2 of the final surrogate.
    pub score: f64,
    pub kernel_width: f64,
    pub target: usize,
}

impl SuperpixelExplanation {
    /// `H x W` map: 1 on selected segments with positive coefficient, else 0.
    pub fn positive_mask(&self) -> Result<Tensor<f32>> {
        let keep: Vec<bool> = (0..self.segments.count)
            .map(|s| self.selected.contains(&s) && self.coefficients[s] > 0.0)
            .collect();
        let data = self.segments.labels.iter().map(|&l| if keep[l] { 1.0 } else { 0.0 }).collect();
        Tensor::new([self.segments.height, self.segments.width], data)
    }

    /// `H x W` map of each pixel's segment coefficient.
    pub fn coefficient_map(&self) -> Result<Tensor<f32>> {
        let data = self.segments.labels.iter().map(|&l| self.coefficients[l] as f32).collect();
        Tensor::new([self.segments.height, self.segments.width], data)
    }
}

/// Weighted ridge regression with an unpenalized intercept.
/// Returns `(coefficients, intercept, weighted R^2)`.
pub(crate) fn weighted_ridge(x: &DMatrix<f64>, y: &[f64], w: &[f64], alpha: f64) -> Result<(Vec<f64>, f64, f64)> {
    let (n, p) = x.shape();
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::invalid("lime", "all sample weights are zero"));
    }
    let xm: Vec<f64> = (0..p).map(|j| (0..n).map(|i| w[i] * x[(i, j)]).sum::<f64>() / wsum).collect();
    let ym = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / wsum;
    let mut xc = DMatrix::zeros(n, p);
    let mut yc = DVector::zeros(n);
    for i in 0..n {
        let s = w[i].sqrt();
        for j in 0..p {
            xc[(i, j)] = s * (x[(i, j)] - xm[j]);
        }
        yc[i] = s * (y[i] - ym);
    }
    let mut a = xc.transpose() * &xc;
    for j in 0..p {
        a[(j, j)] += alpha;
    }
    let rhs = xc.transpose() * &yc;
    let beta = a
        .cholesky()
        .ok_or_else(|| Error::invalid("lime", "ridge system is not positive definite"))?
        .solve(&rhs);
    let intercept = ym - (0..p).map(|j| xm[j] * beta[j]).sum::<f64>();
    let resid = &yc - &xc * &beta;
    let ss_tot = yc.norm_squared();
    let score = if ss_tot > 0.0 { 1.0 - resid.norm_squared() / ss_tot } else { 0.0 };
    Ok((beta.iter().copied().collect(), intercept, score))
}

fn top_by_magnitude(coef: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coef.len()).collect();
    order.sort_by(|&a, &b| coef[b].abs().total_cmp(&coef[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// LIME over quickshift superpixels. The first sample is the unperturbed
/// image; every other sample keeps each segment with probability 1/2 and
/// paints dropped segments with their mean colour. Samples are weighted by
/// `exp(-D^2 / width^2)` with `D` the cosine distance to the all-ones
/// vector; the `num_features` largest ridge coefficients are kept and refit.
pub fn lime_explain(model: &impl Classifier, image: &Tensor<f32>, cfg: &LimeConfig) -> Result<SuperpixelExplanation> {
    check_image(model, image)?;
    if cfg.num_features == 0 || cfg.num_samples < 2 {
        return Err(Error::invalid(
            "lime",
            format!("need num_features >= 1 and num_samples >= 2, got {} and {}", cfg.num_features, cfg.num_samples),
        ));
    }
    if !(cfg.kernel_width > 0.0 && cfg.alpha >= 0.0) {
        return Err(Error::invalid("lime", "kernel width must be positive and alpha non-negative"));
    }
    let seg = quickshift_segment(image, &cfg.segmentation)?;
    let s = seg.count;
    if s < 2 {
        return Err(Error::invalid(
            "lime",
            "segmentation produced a single segment; lower max_dist or kernel_size, or raise ratio",
        ));
    }
    let target = match cfg.target {
        Some(t) => {
            check_class(model, t)?;
            t
        }
        None => argmax(&proba_many(model, std::slice::from_ref(image))?[0]),
    };
    let members = seg.members();
    let c = image.shape()[0];
    let plane = seg.height * seg.width;
    let src = image.data();
    let means: Vec<Vec<f32>> = members
        .iter()
        .map(|px| {
            (0..c)
                .map(|ch| (px.iter().map(|&i| src[ch * plane + i] as f64).sum::<f64>() / px.len() as f64) as f32)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks: Vec<Vec<bool>> = vec![vec![true; s]];
    for _ in 1..cfg.num_samples {
        masks.push((0..s).map(|_| rng.random_bool(0.5)).collect());
    }
    let mut y = Vec::with_capacity(cfg.num_samples);
    const BATCH: usize = 64;
    for chunk in masks.chunks(BATCH) {
        let imgs: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|m| {
                let mut img = image.clone();
                let d = img.data_mut();
                for (seg_id, keep) in m.iter().enumerate() {
                    if !keep {
                        for &i in &members[seg_id] {
                            for ch in 0..c {
                                d[ch * plane + i] = means[seg_id][ch];
                            }
                        }
                    }
                }
                img
            })
            .collect();
        y.extend(proba_many(model, &imgs)?.into_iter().map(|p| p[target] as f64));
    }
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let on = m.iter().filter(|&&b| b).count() as f64;
            // cosine similarity with all-ones is sqrt(on / s); an empty mask is distance 1
            let d = if on == 0.0 { 1.0 } else { 1.0 - (on / s as f64).sqrt() };
            (-d * d / (cfg.kernel_width * cfg.kernel_width)).exp()
        })
        .collect();
    let design = |cols: &[usize]| DMatrix::from_fn(masks.len(), cols.len(), |i, j| f64::from(u8::from(masks[i][cols[j]])));
    let all: Vec<usize> = (0..s).collect();
    let (full, _, _) = weighted_ridge(&design(&all), &y, &weights, cfg.alpha)?;
    let chosen = top_by_magnitude(&full, cfg.num_features.min(s));
    let (beta, intercept, score) = weighted_ridge(&design(&chosen), &y, &weights, cfg.alpha)?;
    let mut coefficients = vec![0.0; s];
    for (&seg_id, &b) in chosen.iter().zip(&beta) {
        coefficients[seg_id] = b;
    }
    let selected = top_by_magnitude(&coefficients, chosen.len());
    Ok(SuperpixelExplanation {
        segments: seg,
        coefficients,
        selected,
        intercept,
        score,
        kernel_width: cfg.kernel_width,
        target,
    })
}
