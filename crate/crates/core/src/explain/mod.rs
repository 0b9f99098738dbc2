//! Grad-CAM, LIME over quickshift superpixels, pixel RDE, CartoonX, the
//! distortion-to-flip probe and heatmap rendering.

mod flip;
mod gradcam;
mod lime;
mod quickshift;
mod rde;
mod render;

pub use flip::{distortion_to_flip, flip_point, wavelet_distortion_to_flip, FLIP_TOLERANCE};
pub use gradcam::{grad_cam, SaliencyMap};
pub use lime::{lime_explain, LimeConfig, SuperpixelExplanation};
pub use quickshift::{quickshift_segment, rgb_to_lab, QuickshiftConfig, Segmentation};
pub use rde::{cartoonx, cartoonx_with, pixel_rde, pixel_rde_with, CartoonXConfig, MaskExplanation, RdeConfig, StepInfo};
pub use render::{heat_color, heatmap_colors, overlay_heatmap, render_heatmap, HEAT_WEIGHT};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::network::{Mode, Model, INFER_CHUNK};
use crate::tensor::Tensor;

/// Anything that maps `N x C x H x W` images to class probabilities.
pub trait Classifier {
    /// `[C, H, W]` of one input image.
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    /// `N x K` class probabilities.
    fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Graph handles of one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Recorded {
    /// Feature maps Grad-CAM weighs, `N x K x h x w`.
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// A classifier that can record itself on a graph so gradients reach the input.
pub trait Differentiable: Classifier {
    fn record(&self, g: &mut Graph<f32>, x: NodeId) -> Result<Recorded>;
}

impl Classifier for Model<f32> {
    fn input_shape(&self) -> [usize; 3] {
        [self.spec.in_channels, self.spec.input_size, self.spec.input_size]
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Model::predict_proba(self, images)
    }
}

impl Differentiable for Model<f32> {
    fn record(&self, g: &mut Graph<f32>, x: NodeId) -> Result<Recorded> {
        let f = self.forward(g, x, Mode::Infer, false)?;
        Ok(Recorded {
            features: f.features,
            logits: f.logits,
            probs: f.probs,
        })
    }
}

pub(crate) fn check_image(model: &impl Classifier, image: &Tensor<f32>) -> Result<()> {
    let want = model.input_shape();
    if image.shape() != want {
        return Err(Error::shape(
            "explain",
            format!("image shape {:?} does not match model input {want:?}", image.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn check_class(model: &impl Classifier, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::invalid(
            "target class",
            format!("{class} is outside [0, {})", model.num_classes()),
        ));
    }
    Ok(())
}

/// Probabilities for a list of single images, batched.
pub(crate) fn proba_many(model: &impl Classifier, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
    let k = model.num_classes();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let p = model.predict_proba(&Tensor::stack(chunk)?)?;
        out.extend(p.data().chunks(k).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Argmax class of one image.
pub fn predicted_class(model: &impl Classifier, image: &Tensor<f32>) -> Result<usize> {
    check_image(model, image)?;
    let p = proba_many(model, std::slice::from_ref(image))?;
    Ok(argmax(&p[0]))
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod toy;
