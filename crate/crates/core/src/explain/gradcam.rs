use super::{check_class, check_image, Differentiable};
use crate::autodiff::Graph;
use crate::dataio::resize_bilinear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grad-CAM map at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `h x w`, every entry `>= 0`.
    pub values: Tensor<f32>,
    pub target: usize,
    /// Per-feature-map weights (spatial mean of the logit gradient).
    pub weights: Vec<f32>,
}

impl SaliencyMap {
    /// Map divided by its maximum (unchanged when all zero).
    pub fn normalized(&self) -> Tensor<f32> {
        let max = self.values.data().iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            self.values.map(|v| v / max)
        } else {
            self.values.clone()
        }
    }

    /// Normalized map resampled to `height x width`.
    pub fn upsampled(&self, height: usize, width: usize) -> Result<Tensor<f32>> {
        let n = self.normalized();
        let &[h, w] = n.shape() else { unreachable!("maps are 2-D") };
        let up = resize_bilinear(&n.reshape([1, h, w])?, height, width)?;
        up.reshape([height, width])
    }
}

/// `ReLU(sum_k beta_k F^k)` with `beta_k` the spatial mean of
/// `d logit_target / d F^k`, using the pre-softmax logit.
pub fn grad_cam(model: &impl Differentiable, image: &Tensor<f32>, target: usize) -> Result<SaliencyMap> {
    check_image(model, image)?;
    check_class(model, target)?;
    let mut g = Graph::new();
    // a differentiable input puts the feature maps on a gradient path
    let x = g.variable(image.clone().reshape([1].iter().chain(image.shape()).copied().collect::<Vec<_>>())?);
    let rec = model.record(&mut g, x)?;
    let y = g.select_column(rec.logits, target)?;
    let y = g.sum(y);
    let grads = g.backward(y, &[rec.features])?;
    let f = g.value(rec.features);
    let &[1, k, h, w] = f.shape() else {
        return Err(Error::shape("grad_cam", format!("feature maps must be 1 x K x h x w, got {:?}", f.shape())));
    };
    let zero = Tensor::zeros(f.shape().to_vec());
    let df = grads.get(rec.features).unwrap_or(&zero);
    let z = (h * w) as f64;
    let weights: Vec<f32> = df
        .data()
        .chunks(h * w)
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / z) as f32)
        .collect();
    let mut map = vec![0.0f64; h * w];
    for (kk, plane) in f.data().chunks(h * w).enumerate().take(k) {
        let b = weights[kk] as f64;
        for (m, &v) in map.iter_mut().zip(plane) {
            *m += b * v as f64;
        }
    }
    let values = Tensor::new([h, w], map.into_iter().map(|v| v.max(0.0) as f32).collect())?;
    Ok(SaliencyMap { values, target, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::toy::{FeatureNet, ScaledMean};
    use crate::network::{Model, ModelSpec};

    #[test]
    fn two_filter_net_matches_hand_computation() {
        let net = FeatureNet::demo();
        let img = Tensor::from_fn([1, 4, 4], |i| ((i * 7) % 5) as f32 / 4.0);
        let feats = net.features(&img);
        for target in 0..2 {
            let cam = grad_cam(&net, &img, target).unwrap();
            // logits = W^T gap(F) + b, so beta_k = W[k][target] / Z
            let beta: Vec<f32> = (0..2).map(|k| net.head[k][target] / 16.0).collect();
            assert_eq!(cam.weights.len(), 2);
            for (b, want) in cam.weights.iter().zip(&beta) {
                assert!((b - want).abs() < 1e-7, "{b} vs {want}");
            }
            for p in 0..16 {
                let want = (beta[0] * feats[0][p] + beta[1] * feats[1][p]).max(0.0);
                assert!((cam.values.data()[p] - want).abs() < 1e-6, "class {target} pixel {p}");
            }
        }
    }

    #[test]
    fn single_map_is_reproduced_up_to_scale() {
        let net = ScaledMean { scale: 3.0 };
        let img = Tensor::from_fn([1, 5, 5], |i| ((i * 13) % 11) as f32 / 10.0);
        let cam = grad_cam(&net, &img, 1).unwrap();
        for (c, x) in cam.values.data().iter().zip(img.data()) {
            assert!((c - 3.0 / 25.0 * x).abs() < 1e-7, "{c} vs {x}");
        }
        let zero = grad_cam(&ScaledMean { scale: 0.0 }, &img, 1).unwrap();
        assert!(zero.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_maps_are_nonnegative_and_sized() {
        let m = Model::<f32>::new(ModelSpec::small(), 3).unwrap();
        let img = Tensor::from_fn([3, 56, 56], |i| ((i * 31) % 17) as f32 / 16.0);
        for t in 0..2 {
            let cam = grad_cam(&m, &img, t).unwrap();
            assert_eq!(cam.values.shape(), &[7, 7]);
            assert!(cam.values.data().iter().all(|&v| v >= 0.0));
            let up = cam.upsampled(56, 56).unwrap();
            assert!(up.data().iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
        }
        assert!(grad_cam(&m, &img, 2).is_err());
    }
}
