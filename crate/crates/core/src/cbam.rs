//! Convolutional block attention: a channel gate from pooled descriptors fed
//! through a shared bottleneck MLP, followed by a spatial gate from a 7x7
//! convolution over channel-pooled maps.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Kernel size of the spatial-attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

/// Learnable tensors of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CbamParams<T: Element = f32> {
    /// `C x C/r`
    pub mlp0_weight: Tensor<T>,
    pub mlp0_bias: Tensor<T>,
    /// `C/r x C`
    pub mlp1_weight: Tensor<T>,
    pub mlp1_bias: Tensor<T>,
    /// `1 x 2 x 7 x 7`, no bias.
    pub spatial_weight: Tensor<T>,
}

/// Graph handles for [`CbamParams`].
#[derive(Clone, Copy, Debug)]
pub struct CbamNodes {
    pub mlp0_weight: NodeId,
    pub mlp0_bias: NodeId,
    pub mlp1_weight: NodeId,
    pub mlp1_bias: NodeId,
    pub spatial_weight: NodeId,
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::invalid(
            "reduction ratio",
            format!("{reduction} does not divide {channels} channels"),
        ));
    }
    Ok(channels / reduction)
}

/// Number of parameters of one block: `2 C^2 / r + C / r + C + 98`.
pub fn cbam_param_count(channels: usize, reduction: usize) -> Result<usize> {
    let hidden = hidden_width(channels, reduction)?;
    Ok(2 * channels * hidden + hidden + channels + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL)
}

pub(crate) fn kaiming_uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

impl<T: Element> CbamParams<T> {
    /// Kaiming-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        let k = SPATIAL_KERNEL;
        Ok(Self {
            mlp0_weight: kaiming_uniform(&[channels, hidden], channels, rng),
            mlp0_bias: Tensor::zeros([hidden]),
            mlp1_weight: kaiming_uniform(&[hidden, channels], hidden, rng),
            mlp1_bias: Tensor::zeros([channels]),
            spatial_weight: kaiming_uniform(&[1, 2, k, k], 2 * k * k, rng),
        })
    }

    /// All-zero parameters; both gates are then exactly 0.5.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        let k = SPATIAL_KERNEL;
        Ok(Self {
            mlp0_weight: Tensor::zeros([channels, hidden]),
            mlp0_bias: Tensor::zeros([hidden]),
            mlp1_weight: Tensor::zeros([hidden, channels]),
            mlp1_bias: Tensor::zeros([channels]),
            spatial_weight: Tensor::zeros([1, 2, k, k]),
        })
    }

    pub fn channels(&self) -> usize {
        self.mlp0_weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensors in registration order.
    pub fn tensors(&self) -> [&Tensor<T>; 5] {
        [
            &self.mlp0_weight,
            &self.mlp0_bias,
            &self.mlp1_weight,
            &self.mlp1_bias,
            &self.spatial_weight,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 5] {
        [
            &mut self.mlp0_weight,
            &mut self.mlp0_bias,
            &mut self.mlp1_weight,
            &mut self.mlp1_bias,
            &mut self.spatial_weight,
        ]
    }

    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> CbamNodes {
        CbamNodes {
            mlp0_weight: g.leaf(self.mlp0_weight.clone(), requires_grad),
            mlp0_bias: g.leaf(self.mlp0_bias.clone(), requires_grad),
            mlp1_weight: g.leaf(self.mlp1_weight.clone(), requires_grad),
            mlp1_bias: g.leaf(self.mlp1_bias.clone(), requires_grad),
            spatial_weight: g.leaf(self.spatial_weight.clone(), requires_grad),
        }
    }
}

/// `N x C` channel gate `sigmoid(MLP(avgpool(s)) + MLP(maxpool(s)))`.
pub fn channel_attention<T: Element>(g: &mut Graph<T>, s: NodeId, p: &CbamNodes) -> Result<NodeId> {
    let channels = g.value(p.mlp0_weight).shape()[0];
    let c = g.value(s).shape().get(1).copied().unwrap_or(0);
    if c != channels {
        return Err(Error::shape(
            "channel_attention",
            format!("feature map has {c} channels, MLP expects {channels}"),
        ));
    }
    let avg = g.global_avg_pool(s)?;
    let max = g.global_max_pool(s)?;
    let mlp = |g: &mut Graph<T>, d: NodeId| -> Result<NodeId> {
        let h = g.dense(d, p.mlp0_weight, Some(p.mlp0_bias), true)?;
        g.dense(h, p.mlp1_weight, Some(p.mlp1_bias), false)
    };
    let a = mlp(g, avg)?;
    let m = mlp(g, max)?;
    let sum = g.add(a, m)?;
    Ok(g.sigmoid(sum))
}

/// `N x 1 x H x W` spatial gate `sigmoid(conv7([mean_c(s); max_c(s)]))`.
pub fn spatial_attention<T: Element>(g: &mut Graph<T>, s: NodeId, weight: NodeId) -> Result<NodeId> {
    let avg = g.channel_mean(s)?;
    let max = g.channel_max(s)?;
    let both = g.concat_channels(avg, max)?;
    let z = g.conv2d(both, weight, None, 1, Padding::Same, false)?;
    Ok(g.sigmoid(z))
}

/// Channel gating followed by spatial gating of the gated map.
pub fn cbam_apply<T: Element>(g: &mut Graph<T>, s: NodeId, p: &CbamNodes) -> Result<NodeId> {
    let m_ch = channel_attention(g, s, p)?;
    let s1 = g.scale_channels(s, m_ch)?;
    let m_sp = spatial_attention(g, s1, p.spatial_weight)?;
    g.scale_spatial(s1, m_sp)
}
