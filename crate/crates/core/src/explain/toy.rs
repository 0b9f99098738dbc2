//! Small hand-built classifiers with known behaviour for explainer tests.

use super::{Classifier, Differentiable, Recorded};
use crate::autodiff::{Graph, NodeId, Padding};
use crate::error::Result;
use crate::tensor::Tensor;

fn proba_via_graph(model: &impl Differentiable, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let r = model.record(&mut g, x)?;
    Ok(g.value(r.probs).clone())
}

fn head(g: &mut Graph<f32>, pooled: NodeId, w: Vec<f32>, b: Vec<f32>, features: NodeId) -> Result<Recorded> {
    let k = g.value(pooled).shape()[1];
    let w = g.constant(Tensor::new([k, 2], w)?);
    let b = g.constant(Tensor::new([2], b)?);
    let logits = g.dense(pooled, w, Some(b), false)?;
    let probs = g.softmax(logits)?;
    Ok(Recorded { features, logits, probs })
}

/// 1 x 4 x 4 input, two hand-set 3x3 filters with ReLU, global average
/// pooling and a 2 x 2 head.
pub struct FeatureNet {
    pub filters: [[f32; 9]; 2],
    pub head: [[f32; 2]; 2],
}

impl FeatureNet {
    pub fn demo() -> Self {
        Self {
            filters: [
                [0.5, 0.0, -0.5, 1.0, 0.0, -1.0, 0.5, 0.0, -0.5],
                [0.1, 0.2, 0.1, 0.2, 0.4, 0.2, 0.1, 0.2, 0.1],
            ],
            head: [[0.7, -1.3], [-0.4, 2.1]],
        }
    }

    /// Feature maps computed by direct loops.
    pub fn features(&self, img: &Tensor<f32>) -> [Vec<f32>; 2] {
        let d = img.data();
        let at = |y: isize, x: isize| {
            if (0..4).contains(&y) && (0..4).contains(&x) {
                d[(y * 4 + x) as usize]
            } else {
                0.0
            }
        };
        let map = |f: &[f32; 9]| {
            let mut out = vec![0.0; 16];
            for y in 0..4isize {
                for x in 0..4isize {
                    let mut s = 0.0;
                    for dy in 0..3isize {
                        for dx in 0..3isize {
                            s += f[(dy * 3 + dx) as usize] * at(y + dy - 1, x + dx - 1);
                        }
                    }
                    out[(y * 4 + x) as usize] = s.max(0.0);
                }
            }
            out
        };
        [map(&self.filters[0]), map(&self.filters[1])]
    }
}

impl Classifier for FeatureNet {
    fn input_shape(&self) -> [usize; 3] {
        [1, 4, 4]
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        proba_via_graph(self, images)
    }
}

impl Differentiable for FeatureNet {
    fn record(&self, g: &mut Graph<f32>, x: NodeId) -> Result<Recorded> {
        let w = g.constant(Tensor::new([2, 1, 3, 3], self.filters.concat())?);
        let f = g.conv2d(x, w, None, 1, Padding::Same, true)?;
        let pooled = g.global_avg_pool(f)?;
        head(g, pooled, self.head.concat(), vec![0.05, -0.05], f)
    }
}

/// Class-1 logit `scale * mean(x)`; the feature map is the 1 x 5 x 5 input.
pub struct ScaledMean {
    pub scale: f32,
}

impl Classifier for ScaledMean {
    fn input_shape(&self) -> [usize; 3] {
        [1, 5, 5]
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        proba_via_graph(self, images)
    }
}

impl Differentiable for ScaledMean {
    fn record(&self, g: &mut Graph<f32>, x: NodeId) -> Result<Recorded> {
        let pooled = g.global_avg_pool(x)?;
        head(g, pooled, vec![0.0, self.scale], vec![0.0, 0.0], x)
    }
}

/// Class-1 logit `scale * (mean(x) - threshold)` on `C x S x S` inputs,
/// so brighter images move monotonically towards class 1.
pub struct Brightness {
    pub shape: [usize; 3],
    pub scale: f32,
    pub threshold: f32,
}

impl Classifier for Brightness {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        proba_via_graph(self, images)
    }
}

impl Differentiable for Brightness {
    fn record(&self, g: &mut Graph<f32>, x: NodeId) -> Result<Recorded> {
        let c = self.shape[0];
        let pooled = g.global_avg_pool(x)?;
        let w: Vec<f32> = (0..c).flat_map(|_| [0.0, self.scale / c as f32]).collect();
        head(g, pooled, w, vec![0.0, -self.scale * self.threshold], x)
    }
}

/// Multiplies the input by a fixed `H x W` mask before `inner`, so the
/// wrapped model cannot see pixels where the mask is zero.
pub struct Masked<M> {
    pub inner: M,
    pub mask: Tensor<f32>,
}

impl<M: Differentiable> Classifier for Masked<M> {
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        proba_via_graph(self, images)
    }
}

impl<M: Differentiable> Differentiable for Masked<M> {
    fn record(&self, g: &mut Graph<f32>, x: NodeId) -> Result<Recorded> {
        let shape = g.value(x).shape().to_vec();
        let [h, w] = [shape[2], shape[3]];
        let m = g.constant(self.mask.clone().reshape([1, 1, h, w])?);
        let m = g.broadcast_to(m, &shape)?;
        let xm = g.mul(x, m)?;
        self.inner.record(g, xm)
    }
}

/// Class-1 probability `base + sum_j weight_j * (fraction of region j left
/// untouched)`, comparing against a stored original image.
pub struct RegionProbe {
    pub original: Tensor<f32>,
    pub regions: Vec<(Vec<usize>, f32)>,
    pub base: f32,
}

impl Classifier for RegionProbe {
    fn input_shape(&self) -> [usize; 3] {
        let s = self.original.shape();
        [s[0], s[1], s[2]]
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let per = self.original.len();
        let plane = per / self.original.shape()[0];
        let orig = self.original.data();
        let mut out = Vec::new();
        for img in images.data().chunks(per) {
            let mut p = self.base;
            for (pixels, weight) in &self.regions {
                let intact = pixels
                    .iter()
                    .filter(|&&i| (0..per / plane).all(|c| img[c * plane + i] == orig[c * plane + i]))
                    .count();
                p += weight * intact as f32 / pixels.len() as f32;
            }
            out.extend([1.0 - p, p]);
        }
        Tensor::new([images.shape()[0], 2], out)
    }
}
