use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{argmax, check_class, check_image, proba_many, Differentiable};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2, grayscale, idwt2, Wavelet, WaveletCoeffs, WaveletLayout};

#[derive(Clone, Debug, PartialEq)]
pub struct RdeConfig {
    pub lambda: f64,
    pub step: f64,
    pub steps: usize,
    /// Noise samples per step.
    pub noise_samples: usize,
    pub target: Option<usize>,
    pub seed: u64,
}

impl Default for RdeConfig {
    fn default() -> Self {
        Self {
            lambda: 4.0,
            step: 0.01,
            steps: 200,
            noise_samples: 16,
            target: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CartoonXConfig {
    pub lambda: f64,
    pub step: f64,
    pub steps: usize,
    /// Noise samples per step.
    pub batch: usize,
    pub wavelet: Wavelet,
    pub levels: usize,
    pub target: Option<usize>,
    pub seed: u64,
}

impl Default for CartoonXConfig {
    fn default() -> Self {
        Self {
            lambda: 285.0,
            step: 0.1,
            steps: 100,
            batch: 16,
            wavelet: Wavelet::Db3,
            levels: 5,
            target: None,
            seed: 0,
        }
    }
}

/// State after one projected gradient step.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo<'a> {
    pub step: usize,
    /// Mask after the update and clipping.
    pub mask: &'a [f32],
    /// Distortion estimate at the mask before the update.
    pub distortion: f64,
    /// `distortion + lambda * mean(mask)` before the update.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskExplanation {
    pub method: &'static str,
    /// `H x W` pixel mask, or one entry per wavelet coefficient.
    pub mask: Tensor<f32>,
    pub lambda: f64,
    pub step: f64,
    pub steps: usize,
    pub noise_samples: usize,
    pub target: usize,
    pub distortion_trace: Vec<f64>,
    pub loss_trace: Vec<f64>,
    /// `(mean, variance)` of the obfuscation noise per channel (pixel RDE)
    /// or per channel and subband, coarsest first (CartoonX).
    pub noise_stats: Vec<(f64, f64)>,
    /// Distortion at the final mask on a fresh noise batch.
    pub final_distortion: f64,
    /// Greyscale wavelet-domain rendering of the mask (CartoonX only).
    pub rendered: Option<Tensor<f32>>,
    pub layout: Option<WaveletLayout>,
}

impl MaskExplanation {
    pub fn l1(&self) -> f64 {
        self.mask.data().iter().map(|&v| v.abs() as f64).sum()
    }
}

fn mean_var(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
    (m, var)
}

/// Fills `out` blocks of `len` values with `N(mean, var)` draws per block.
fn gaussian_blocks(stats: &[(f64, f64)], ranges: &[std::ops::Range<usize>], total: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; total];
    for (&(m, var), r) in stats.iter().zip(ranges) {
        let dist = Normal::new(m, var.sqrt()).map_err(|e| Error::invalid("obfuscation noise", e.to_string()))?;
        for v in &mut out[r.clone()] {
            *v = dist.sample(rng) as f32;
        }
    }
    Ok(out)
}

/// Adds the model's distortion `mean_l (p_target(y_l) - p_target(x))^2`
/// for a batch of obfuscations `y`.
fn distortion_node(model: &impl Differentiable, g: &mut Graph<f32>, y: NodeId, target: usize, p_x: f32) -> Result<NodeId> {
    let n = g.value(y).shape()[0];
    let rec = model.record(g, y)?;
    let p = g.select_column(rec.probs, target)?;
    let reference = g.constant(Tensor::full([n], p_x));
    let d = g.sub(p, reference)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

struct Problem<'a, M, F, N> {
    model: &'a M,
    method: &'static str,
    target: usize,
    p_x: f32,
    mask_len: usize,
    lambda: f64,
    step: f64,
    steps: usize,
    /// Records obfuscations for mask node and noise on the graph.
    obfuscate: F,
    /// Draws one noise batch.
    noise: N,
}

struct Outcome {
    mask: Vec<f32>,
    distortion_trace: Vec<f64>,
    loss_trace: Vec<f64>,
    final_distortion: f64,
}

/// Projected gradient descent on `E_D(s) + lambda * mean(s)` over
/// `s in [0, 1]^n`, starting from all ones. `mask_shape` is how the mask
/// leaf is laid out on the graph.
fn optimize<M, F, N>(
    p: &mut Problem<'_, M, F, N>,
    mask_shape: &[usize],
    mut on_step: impl FnMut(&StepInfo<'_>),
) -> Result<Outcome>
where
    M: Differentiable,
    F: FnMut(&mut Graph<f32>, NodeId, &Tensor<f32>) -> Result<NodeId>,
    N: FnMut() -> Result<Tensor<f32>>,
{
    let mut mask = vec![1.0f32; p.mask_len];
    let l1_grad = p.lambda / p.mask_len as f64;
    let mut distortion_trace = Vec::with_capacity(p.steps);
    let mut loss_trace = Vec::with_capacity(p.steps);
    for step in 0..p.steps {
        let noise = (p.noise)()?;
        let mut g = Graph::new();
        let s = g.variable(Tensor::new(mask_shape.to_vec(), mask.clone())?);
        let y = (p.obfuscate)(&mut g, s, &noise)?;
        let d = distortion_node(p.model, &mut g, y, p.target, p.p_x)?;
        let distortion = g.value(d).data()[0] as f64;
        let mean_mask = mask.iter().map(|&v| v as f64).sum::<f64>() / p.mask_len as f64;
        let loss = distortion + p.lambda * mean_mask;
        distortion_trace.push(distortion);
        loss_trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss at step {step} is {loss}; distortion trace: {distortion_trace:?}",
                p.method
            )));
        }
        let grads = g.backward(d, &[])?;
        let gs = grads.get(s).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.mask_len]);
        for (m, gd) in mask.iter_mut().zip(gs) {
            let next = *m as f64 - p.step * (gd as f64 + l1_grad);
            *m = next.clamp(0.0, 1.0) as f32;
        }
        on_step(&StepInfo {
            step,
            mask: &mask,
            distortion,
            loss,
        });
    }
    let noise = (p.noise)()?;
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(mask_shape.to_vec(), mask.clone())?);
    let y = (p.obfuscate)(&mut g, s, &noise)?;
    let d = distortion_node(p.model, &mut g, y, p.target, p.p_x)?;
    let final_distortion = g.value(d).data()[0] as f64;
    Ok(Outcome {
        mask,
        distortion_trace,
        loss_trace,
        final_distortion,
    })
}

fn resolve_target(model: &impl Differentiable, image: &Tensor<f32>, target: Option<usize>) -> Result<(usize, f32)> {
    let probs = proba_many(model, std::slice::from_ref(image))?.remove(0);
    let t = match target {
        Some(t) => {
            check_class(model, t)?;
            t
        }
        None => argmax(&probs),
    };
    Ok((t, probs[t]))
}

fn check_schedule(lambda: f64, step: f64, steps: usize, samples: usize) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite() && step > 0.0 && step.is_finite()) || steps == 0 || samples == 0 {
        return Err(Error::invalid(
            "mask optimisation",
            format!("need lambda >= 0, step > 0, steps >= 1, samples >= 1; got {lambda}, {step}, {steps}, {samples}"),
        ));
    }
    Ok(())
}

fn batched(image: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    Tensor::stack(&vec![image.clone(); n])
}

pub fn pixel_rde(model: &impl Differentiable, image: &Tensor<f32>, cfg: &RdeConfig) -> Result<MaskExplanation> {
    pixel_rde_with(model, image, cfg, |_| {})
}

/// Pixel RDE: one mask over pixels, shared by all channels. The
/// obfuscation is `x + (1 - s)(k - x)` clipped to `[0, 1]`, with `k` drawn
/// from a Gaussian matching each channel's mean and variance.
pub fn pixel_rde_with(
    model: &impl Differentiable,
    image: &Tensor<f32>,
    cfg: &RdeConfig,
    on_step: impl FnMut(&StepInfo<'_>),
) -> Result<MaskExplanation> {
    check_image(model, image)?;
    check_schedule(cfg.lambda, cfg.step, cfg.steps, cfg.noise_samples)?;
    let (target, p_x) = resolve_target(model, image, cfg.target)?;
    let [c, h, w] = model.input_shape();
    let plane = h * w;
    let big = [cfg.noise_samples, c, h, w];
    let stats: Vec<(f64, f64)> = image.data().chunks(plane).map(mean_var).collect();
    let ranges: Vec<_> = (0..cfg.noise_samples * c).map(|i| i * plane..(i + 1) * plane).collect();
    let block_stats: Vec<(f64, f64)> = (0..ranges.len()).map(|i| stats[i % c]).collect();
    let xb = batched(image, cfg.noise_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut problem = Problem {
        model,
        method: "pixel_rde",
        target,
        p_x,
        mask_len: plane,
        lambda: cfg.lambda,
        step: cfg.step,
        steps: cfg.steps,
        obfuscate: |g: &mut Graph<f32>, s: NodeId, k: &Tensor<f32>| {
            let x = g.constant(xb.clone());
            let delta: Vec<f32> = k.data().iter().zip(xb.data()).map(|(k, x)| k - x).collect();
            let delta = g.constant(Tensor::new(big.to_vec(), delta)?);
            let keep_out = g.affine(s, -1.0, 1.0);
            let keep_out = g.broadcast_to(keep_out, &big)?;
            let e = g.mul(keep_out, delta)?;
            let y = g.add(x, e)?;
            Ok(g.clamp(y, 0.0, 1.0))
        },
        noise: || Tensor::new(big.to_vec(), gaussian_blocks(&block_stats, &ranges, xb.len(), &mut rng)?),
    };
    let out = optimize(&mut problem, &[1, 1, h, w], on_step)?;
    Ok(MaskExplanation {
        method: "pixel_rde",
        mask: Tensor::new([h, w], out.mask)?,
        lambda: cfg.lambda,
        step: cfg.step,
        steps: cfg.steps,
        noise_samples: cfg.noise_samples,
        target,
        distortion_trace: out.distortion_trace,
        loss_trace: out.loss_trace,
        noise_stats: stats,
        final_distortion: out.final_distortion,
        rendered: None,
        layout: None,
    })
}

pub fn cartoonx(model: &impl Differentiable, image: &Tensor<f32>, cfg: &CartoonXConfig) -> Result<MaskExplanation> {
    cartoonx_with(model, image, cfg, |_| {})
}

/// Per channel and subband `(mean, variance)` of wavelet coefficients.
pub(crate) fn subband_stats(coeffs: &WaveletCoeffs<f32>) -> Vec<(f64, f64)> {
    let bands = coeffs.layout.bands();
    (0..coeffs.layout.channels)
        .flat_map(|c| bands.iter().map(move |(_, _, r)| mean_var(&coeffs.channel(c)[r.clone()])))
        .collect()
}

/// CartoonX: RDE over wavelet coefficients with one mask shared by all
/// channels. Obfuscations are `x + idwt((1 - s)(k - h))` clipped to
/// `[0, 1]` (equal to `idwt(s h + (1 - s) k)` by linearity), with `k`
/// Gaussian per channel and subband. The mask is rendered as
/// `clip(idwt(s * dwt(grey(x))))`.
pub fn cartoonx_with(
    model: &impl Differentiable,
    image: &Tensor<f32>,
    cfg: &CartoonXConfig,
    on_step: impl FnMut(&StepInfo<'_>),
) -> Result<MaskExplanation> {
    check_image(model, image)?;
    check_schedule(cfg.lambda, cfg.step, cfg.steps, cfg.batch)?;
    let (target, p_x) = resolve_target(model, image, cfg.target)?;
    let coeffs = dwt2(image, cfg.wavelet, cfg.levels)?;
    let layout = coeffs.layout.clone();
    let n = layout.coeff_len();
    let c = layout.channels;
    let stats = subband_stats(&coeffs);
    let bands = layout.bands();
    let mut ranges = Vec::new();
    let mut block_stats = Vec::new();
    for l in 0..cfg.batch {
        for ch in 0..c {
            for (b, (_, _, r)) in bands.iter().enumerate() {
                let base = (l * c + ch) * n;
                ranges.push(base + r.start..base + r.end);
                block_stats.push(stats[ch * bands.len() + b]);
            }
        }
    }
    let big = [cfg.batch, c, n];
    let hb: Vec<f32> = (0..cfg.batch).flat_map(|_| coeffs.data.iter().copied()).collect();
    let xb = batched(image, cfg.batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut problem = Problem {
        model,
        method: "cartoonx",
        target,
        p_x,
        mask_len: n,
        lambda: cfg.lambda,
        step: cfg.step,
        steps: cfg.steps,
        obfuscate: |g: &mut Graph<f32>, s: NodeId, k: &Tensor<f32>| {
            let x = g.constant(xb.clone());
            let delta: Vec<f32> = k.data().iter().zip(&hb).map(|(k, h)| k - h).collect();
            let delta = g.constant(Tensor::new(big.to_vec(), delta)?);
            let keep_out = g.affine(s, -1.0, 1.0);
            let keep_out = g.broadcast_to(keep_out, &big)?;
            let e = g.mul(keep_out, delta)?;
            let dx = g.idwt2(e, &layout)?;
            let y = g.add(x, dx)?;
            Ok(g.clamp(y, 0.0, 1.0))
        },
        noise: || Tensor::new(big.to_vec(), gaussian_blocks(&block_stats, &ranges, hb.len(), &mut rng)?),
    };
    let out = optimize(&mut problem, &[1, 1, n], on_step)?;
    let mut grey = dwt2(&grayscale(image)?, cfg.wavelet, cfg.levels)?;
    for (v, s) in grey.data.iter_mut().zip(&out.mask) {
        *v *= s;
    }
    let rendered = idwt2(&grey)?.map(|v| v.clamp(0.0, 1.0));
    Ok(MaskExplanation {
        method: "cartoonx",
        mask: Tensor::new([n], out.mask)?,
        lambda: cfg.lambda,
        step: cfg.step,
        steps: cfg.steps,
        noise_samples: cfg.batch,
        target,
        distortion_trace: out.distortion_trace,
        loss_trace: out.loss_trace,
        noise_stats: stats,
        final_distortion: out.final_distortion,
        rendered: Some(rendered),
        layout: Some(coeffs.layout),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::toy::{Brightness, Masked};

    /// Bright left half, dark right half, light texture.
    fn image(size: usize) -> Tensor<f32> {
        Tensor::from_fn([3, size, size], |i| {
            let (y, x) = ((i / size) % size, i % size);
            let base = if x < size / 2 { 0.85 } else { 0.15 };
            base + 0.1 * ((x * 3 + y * 5 + i / (size * size)) % 7) as f32 / 7.0 - 0.05
        })
    }

    fn bright(size: usize) -> Brightness {
        Brightness {
            shape: [3, size, size],
            scale: 40.0,
            threshold: 0.45,
        }
    }

    #[test]
    fn full_mask_has_zero_distortion() {
        let model = bright(16);
        let img = image(16);
        let (target, p_x) = resolve_target(&model, &img, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Tensor::from_fn([4, 3, 16, 16], |_| Normal::new(0.5f32, 0.3).unwrap().sample(&mut rng));
        let mut g = Graph::new();
        let xb = g.constant(batched(&img, 4).unwrap());
        let s = g.variable(Tensor::ones([1, 1, 16, 16]));
        let keep_out = g.affine(s, -1.0, 1.0);
        let keep_out = g.broadcast_to(keep_out, &[4, 3, 16, 16]).unwrap();
        let delta: Vec<f32> = noise.data().iter().zip(batched(&img, 4).unwrap().data()).map(|(k, x)| k - x).collect();
        let delta = g.constant(Tensor::new([4, 3, 16, 16], delta).unwrap());
        let e = g.mul(keep_out, delta).unwrap();
        let y = g.add(xb, e).unwrap();
        let y = g.clamp(y, 0.0, 1.0);
        assert_eq!(g.value(y), &batched(&img, 4).unwrap());
        let d = distortion_node(&model, &mut g, y, target, p_x).unwrap();
        assert_eq!(g.value(d).data()[0], 0.0);
    }

    #[test]
    fn cartoonx_full_mask_reproduces_the_image() {
        let img = image(32);
        let coeffs = dwt2(&img, Wavelet::Db3, 3).unwrap();
        let n = coeffs.layout.coeff_len();
        let mut g = Graph::new();
        let s = g.variable(Tensor::ones([1, 1, n]));
        let keep_out = g.affine(s, -1.0, 1.0);
        let keep_out = g.broadcast_to(keep_out, &[2, 3, n]).unwrap();
        let delta = g.constant(Tensor::from_fn([2, 3, n], |i| (i % 13) as f32 - 6.0));
        let e = g.mul(keep_out, delta).unwrap();
        let dx = g.idwt2(e, &coeffs.layout).unwrap();
        let x = g.constant(batched(&img, 2).unwrap());
        let y = g.add(x, dx).unwrap();
        assert_eq!(g.value(y), &batched(&img, 2).unwrap());
    }

    #[test]
    fn masks_stay_in_range_and_l1_falls_with_lambda() {
        let model = bright(16);
        let img = image(16);
        let mut l1 = Vec::new();
        for lambda in [0.5, 4.0, 40.0] {
            let cfg = RdeConfig {
                lambda,
                steps: 30,
                step: 0.5,
                noise_samples: 4,
                ..RdeConfig::default()
            };
            let e = pixel_rde_with(&model, &img, &cfg, |s| {
                assert!(s.mask.iter().all(|v| (0.0..=1.0).contains(v)), "step {}", s.step);
            })
            .unwrap();
            assert_eq!(e.distortion_trace.len(), 30);
            assert!(e.distortion_trace[0] == 0.0);
            l1.push(e.l1());
        }
        assert!(l1[0] > l1[1] && l1[1] > l1[2], "{l1:?}");
    }

    #[test]
    fn huge_lambda_empties_the_mask() {
        let model = bright(16);
        let cfg = RdeConfig {
            lambda: 1e6,
            steps: 5,
            noise_samples: 2,
            ..RdeConfig::default()
        };
        let e = pixel_rde(&model, &image(16), &cfg).unwrap();
        assert!(e.mask.mean() < 0.01);
    }

    #[test]
    fn mask_prefers_the_half_the_model_reads() {
        let size = 16;
        let model = Masked {
            inner: Brightness {
                threshold: 0.3,
                ..bright(size)
            },
            mask: Tensor::from_fn([size, size], |i| if i % size < size / 2 { 1.0 } else { 0.0 }),
        };
        let cfg = RdeConfig {
            lambda: 1.0,
            step: 2.0,
            steps: 60,
            noise_samples: 8,
            seed: 1,
            ..RdeConfig::default()
        };
        let e = pixel_rde(&model, &image(size), &cfg).unwrap();
        let (mut left, mut right) = (0.0, 0.0);
        for (i, &v) in e.mask.data().iter().enumerate() {
            if i % size < size / 2 {
                left += v;
            } else {
                right += v;
            }
        }
        assert!(right < left, "left {left} right {right}");
    }

    #[test]
    fn cartoonx_renders_and_is_sparser_for_larger_lambda() {
        let model = bright(32);
        let img = image(32);
        let run = |lambda| {
            let cfg = CartoonXConfig {
                lambda,
                steps: 20,
                batch: 4,
                levels: 3,
                ..CartoonXConfig::default()
            };
            cartoonx_with(&model, &img, &cfg, |s| {
                assert!(s.mask.iter().all(|v| (0.0..=1.0).contains(v)));
            })
            .unwrap()
        };
        let lo = run(28.5);
        let hi = run(285.0);
        assert!(hi.l1() < lo.l1());
        let r = hi.rendered.as_ref().unwrap();
        assert_eq!(r.shape(), &[1, 32, 32]);
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(hi.noise_stats.len(), 3 * (1 + 3 * 3));
    }

    #[test]
    fn non_finite_loss_aborts_with_trace() {
        let broken = Brightness {
            scale: f32::NAN,
            ..bright(16)
        };
        match pixel_rde(&broken, &image(16), &RdeConfig::default()) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("step 0") && msg.contains("trace"), "{msg}"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
        let bad = RdeConfig {
            lambda: f64::INFINITY,
            ..RdeConfig::default()
        };
        assert!(pixel_rde(&bright(16), &image(16), &bad).is_err());
    }
}
