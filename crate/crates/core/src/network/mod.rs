//! The attention CNN: five `conv -> CBAM -> BN -> maxpool` blocks, a dense
//! head, and softmax over two classes.

mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, decode_records, encode_checkpoint, encode_records, load_checkpoint, read_records,
    save_checkpoint, write_records, CheckpointMeta, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{accuracy, evaluate_loss, train, train_with_callback, EpochLog, TrainConfig, TrainLog};

use crate::autodiff::{dropout_mask, Graph, NodeId, NormMode, Padding};
use crate::cbam::{cbam_apply, cbam_param_count, kaiming_uniform, CbamNodes, CbamParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub reduction: usize,
    pub dense_units: Vec<usize>,
    pub dropout: f64,
    pub num_classes: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_size: 224,
            in_channels: 3,
            conv_channels: vec![32, 64, 128, 384, 256],
            kernel_size: 3,
            reduction: 8,
            dense_units: vec![256, 128],
            dropout: 0.25,
            num_classes: 2,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

/// Kind of a row in [`ModelSpec::layer_rows`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv,
    Cbam,
    BatchNorm,
    MaxPool,
    Flatten,
    Dense,
    Dropout,
}

/// One line of the layer table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub kind: LayerKind,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub trainable: usize,
}

/// Parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl ModelSpec {
    /// Reduced-width configuration on 56x56 inputs for tests and quick runs.
    pub fn small() -> Self {
        Self {
            input_size: 56,
            conv_channels: vec![8, 16, 16],
            dense_units: vec![32, 16],
            // few optimizer steps per run; 0.99 leaves the moving averages near their init
            bn_momentum: 0.9,
            ..Self::default()
        }
    }

    pub fn feature_size(&self) -> usize {
        self.input_size >> self.conv_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.conv_channels.len();
        if blocks == 0 {
            return Err(Error::invalid("model spec", "at least one convolution block is required"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << blocks) {
            return Err(Error::invalid(
                "model spec",
                format!("input size {} is not divisible by 2^{blocks} for {blocks} pooling layers", self.input_size),
            ));
        }
        for (i, &c) in self.conv_channels.iter().enumerate() {
            if c == 0 || self.reduction == 0 || c % self.reduction != 0 {
                return Err(Error::invalid(
                    "model spec",
                    format!("block{i}: {c} channels not divisible by reduction {}", self.reduction),
                ));
            }
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("model spec", format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.dense_units.contains(&0) {
            return Err(Error::invalid("model spec", "channel, unit and class counts must be positive (classes >= 2)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model spec", format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(Error::invalid("model spec", "bn momentum must be in [0, 1] and epsilon positive"));
        }
        Ok(())
    }

    /// Per-layer output shapes and parameter counts, in network order.
    pub fn layer_rows(&self) -> Result<Vec<LayerRow>> {
        self.validate()?;
        let mut rows = Vec::new();
        let row = |kind, output_shape: Vec<usize>, params, trainable| LayerRow {
            kind,
            output_shape,
            params,
            trainable,
        };
        let mut size = self.input_size;
        let mut prev = self.in_channels;
        rows.push(row(LayerKind::Input, vec![prev, size, size], 0, 0));
        let k2 = self.kernel_size * self.kernel_size;
        for &c in &self.conv_channels {
            let conv = prev * k2 * c + c;
            rows.push(row(LayerKind::Conv, vec![c, size, size], conv, conv));
            let cbam = cbam_param_count(c, self.reduction)?;
            rows.push(row(LayerKind::Cbam, vec![c, size, size], cbam, cbam));
            rows.push(row(LayerKind::BatchNorm, vec![c, size, size], 4 * c, 2 * c));
            size /= 2;
            rows.push(row(LayerKind::MaxPool, vec![c, size, size], 0, 0));
            prev = c;
        }
        let mut width = prev * size * size;
        rows.push(row(LayerKind::Flatten, vec![width], 0, 0));
        for &u in &self.dense_units {
            rows.push(row(LayerKind::Dense, vec![u], width * u + u, width * u + u));
            width = u;
        }
        rows.push(row(LayerKind::Dropout, vec![width], 0, 0));
        let head = width * self.num_classes + self.num_classes;
        rows.push(row(LayerKind::Dense, vec![self.num_classes], head, head));
        Ok(rows)
    }

    pub fn param_counts(&self) -> Result<ParamCounts> {
        let rows = self.layer_rows()?;
        let total = rows.iter().map(|r| r.params).sum();
        let trainable = rows.iter().map(|r| r.trainable).sum();
        Ok(ParamCounts {
            total,
            trainable,
            non_trainable: total - trainable,
        })
    }

    /// Ordered `key=value` pairs, used for checkpoints and config echoes.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("input_size".into(), self.input_size.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("conv_channels".into(), list(&self.conv_channels)),
            ("kernel_size".into(), self.kernel_size.to_string()),
            ("reduction".into(), self.reduction.to_string()),
            ("dense_units".into(), list(&self.dense_units)),
            ("dropout".into(), self.dropout.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("bn_momentum".into(), self.bn_momentum.to_string()),
            ("bn_epsilon".into(), self.bn_epsilon.to_string()),
        ]
    }

    /// Inverse of [`ModelSpec::to_pairs`]; unknown keys are rejected and
    /// missing keys keep their defaults.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid("model spec", format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|p| num(key, p)).collect()
        }
        let mut spec = Self::default();
        for (k, v) in pairs {
            match k {
                "input_size" => spec.input_size = num(k, v)?,
                "in_channels" => spec.in_channels = num(k, v)?,
                "conv_channels" => spec.conv_channels = list(k, v)?,
                "kernel_size" => spec.kernel_size = num(k, v)?,
                "reduction" => spec.reduction = num(k, v)?,
                "dense_units" => spec.dense_units = list(k, v)?,
                "dropout" => spec.dropout = num(k, v)?,
                "num_classes" => spec.num_classes = num(k, v)?,
                "bn_momentum" => spec.bn_momentum = num(k, v)?,
                "bn_epsilon" => spec.bn_epsilon = num(k, v)?,
                other => return Err(Error::invalid("model spec", format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parameters of one `conv -> CBAM -> BN -> maxpool` block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Element = f32> {
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    pub cbam: CbamParams<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub bn_moving_mean: Tensor<T>,
    pub bn_moving_var: Tensor<T>,
}

/// Weights `F x U` and bias `U` of a fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Named view of one parameter tensor.
pub struct ParamRef<'a, T: Element> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    pub trainable: bool,
}

/// Mutable named view of one parameter tensor.
pub struct ParamMut<'a, T: Element> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub trainable: bool,
}

/// Forward-pass mode. Training uses batch statistics and draws dropout
/// masks from the given generator.
pub enum Mode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// Trainable parameter leaves in [`Model::params`] order.
    pub params: Vec<NodeId>,
    /// Batch-norm node of each block.
    pub batch_norms: Vec<NodeId>,
    /// Output of the last block (after pooling); the Grad-CAM feature maps.
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Network weights plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element = f32> {
    pub spec: ModelSpec,
    pub blocks: Vec<Block<T>>,
    pub dense: Vec<DenseLayer<T>>,
    pub head: DenseLayer<T>,
}

/// Inference batch size used by [`Model::predict_proba`].
pub const INFER_CHUNK: usize = 16;

impl<T: Element> Model<T> {
    /// Kaiming-uniform weights, zero biases, identity batch norm.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.kernel_size;
        let mut prev = spec.in_channels;
        let mut blocks = Vec::with_capacity(spec.conv_channels.len());
        for &c in &spec.conv_channels {
            blocks.push(Block {
                conv_weight: kaiming_uniform(&[c, prev, k, k], prev * k * k, &mut rng),
                conv_bias: Tensor::zeros([c]),
                cbam: CbamParams::init(c, spec.reduction, &mut rng)?,
                bn_gamma: Tensor::ones([c]),
                bn_beta: Tensor::zeros([c]),
                bn_moving_mean: Tensor::zeros([c]),
                bn_moving_var: Tensor::ones([c]),
            });
            prev = c;
        }
        let side = spec.feature_size();
        let mut width = prev * side * side;
        let mut dense = Vec::new();
        for &u in &spec.dense_units {
            dense.push(DenseLayer {
                weight: kaiming_uniform(&[width, u], width, &mut rng),
                bias: Tensor::zeros([u]),
            });
            width = u;
        }
        let head = DenseLayer {
            weight: kaiming_uniform(&[width, spec.num_classes], width, &mut rng),
            bias: Tensor::zeros([spec.num_classes]),
        };
        Ok(Self {
            spec,
            blocks,
            dense,
            head,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        let mut out = Model {
            spec: self.spec.clone(),
            blocks: Vec::new(),
            dense: Vec::new(),
            head: DenseLayer {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
        };
        for b in &self.blocks {
            out.blocks.push(Block {
                conv_weight: b.conv_weight.cast(),
                conv_bias: b.conv_bias.cast(),
                cbam: CbamParams {
                    mlp0_weight: b.cbam.mlp0_weight.cast(),
                    mlp0_bias: b.cbam.mlp0_bias.cast(),
                    mlp1_weight: b.cbam.mlp1_weight.cast(),
                    mlp1_bias: b.cbam.mlp1_bias.cast(),
                    spatial_weight: b.cbam.spatial_weight.cast(),
                },
                bn_gamma: b.bn_gamma.cast(),
                bn_beta: b.bn_beta.cast(),
                bn_moving_mean: b.bn_moving_mean.cast(),
                bn_moving_var: b.bn_moving_var.cast(),
            });
        }
        for d in &self.dense {
            out.dense.push(DenseLayer {
                weight: d.weight.cast(),
                bias: d.bias.cast(),
            });
        }
        out
    }

    /// Every parameter tensor with its checkpoint name, in network order.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor, trainable| out.push(ParamRef { name, tensor, trainable });
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("block{i}.conv.weight"), &b.conv_weight, true);
            push(format!("block{i}.conv.bias"), &b.conv_bias, true);
            let [w0, b0, w1, b1, sw] = b.cbam.tensors();
            push(format!("block{i}.cbam.mlp0.weight"), w0, true);
            push(format!("block{i}.cbam.mlp0.bias"), b0, true);
            push(format!("block{i}.cbam.mlp1.weight"), w1, true);
            push(format!("block{i}.cbam.mlp1.bias"), b1, true);
            push(format!("block{i}.cbam.spatial.weight"), sw, true);
            push(format!("block{i}.bn.gamma"), &b.bn_gamma, true);
            push(format!("block{i}.bn.beta"), &b.bn_beta, true);
            push(format!("block{i}.bn.moving_mean"), &b.bn_moving_mean, false);
            push(format!("block{i}.bn.moving_var"), &b.bn_moving_var, false);
        }
        for (i, d) in self.dense.iter().enumerate() {
            push(format!("dense{i}.weight"), &d.weight, true);
            push(format!("dense{i}.bias"), &d.bias, true);
        }
        push("head.weight".into(), &self.head.weight, true);
        push("head.bias".into(), &self.head.bias, true);
        out
    }

    /// Mutable counterpart of [`Model::params`], same order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut push = |name: String, tensor, trainable| out.push(ParamMut { name, tensor, trainable });
            push(format!("block{i}.conv.weight"), &mut b.conv_weight, true);
            push(format!("block{i}.conv.bias"), &mut b.conv_bias, true);
            let [w0, b0, w1, b1, sw] = b.cbam.tensors_mut();
            push(format!("block{i}.cbam.mlp0.weight"), w0, true);
            push(format!("block{i}.cbam.mlp0.bias"), b0, true);
            push(format!("block{i}.cbam.mlp1.weight"), w1, true);
            push(format!("block{i}.cbam.mlp1.bias"), b1, true);
            push(format!("block{i}.cbam.spatial.weight"), sw, true);
            push(format!("block{i}.bn.gamma"), &mut b.bn_gamma, true);
            push(format!("block{i}.bn.beta"), &mut b.bn_beta, true);
            push(format!("block{i}.bn.moving_mean"), &mut b.bn_moving_mean, false);
            push(format!("block{i}.bn.moving_var"), &mut b.bn_moving_var, false);
        }
        for (i, d) in self.dense.iter_mut().enumerate() {
            out.push(ParamMut {
                name: format!("dense{i}.weight"),
                tensor: &mut d.weight,
                trainable: true,
            });
            out.push(ParamMut {
                name: format!("dense{i}.bias"),
                tensor: &mut d.bias,
                trainable: true,
            });
        }
        out.push(ParamMut {
            name: "head.weight".into(),
            tensor: &mut self.head.weight,
            trainable: true,
        });
        out.push(ParamMut {
            name: "head.bias".into(),
            tensor: &mut self.head.bias,
            trainable: true,
        });
        out
    }

    /// Counts from the live tensors (as opposed to [`ModelSpec::param_counts`]).
    pub fn param_counts(&self) -> ParamCounts {
        let (mut total, mut trainable) = (0, 0);
        for p in self.params() {
            total += p.tensor.len();
            if p.trainable {
                trainable += p.tensor.len();
            }
        }
        ParamCounts {
            total,
            trainable,
            non_trainable: total - trainable,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        if shape.len() != 4 || shape[1] != s.in_channels || shape[2] != s.input_size || shape[3] != s.input_size {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected N x {} x {} x {}, got {shape:?}",
                    s.in_channels, s.input_size, s.input_size
                ),
            ));
        }
        Ok(())
    }

    /// Records the network on `g` for the `N x C x H x W` input node `x`.
    /// Trainable parameters become variables when `param_grads` is set,
    /// constants otherwise.
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, mode: Mode<'_>, param_grads: bool) -> Result<ForwardNodes> {
        self.check_input(g.value(x).shape())?;
        let eps = T::from_f64_lossy(self.spec.bn_epsilon);
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            let id = g.leaf(t.clone(), param_grads);
            params.push(id);
            id
        };
        let (norm_mode, rng) = match mode {
            Mode::Infer => (NormMode::Infer, None),
            Mode::Train(rng) => (NormMode::Train, Some(rng)),
        };
        let mut h = x;
        let mut batch_norms = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let w = leaf(g, &b.conv_weight);
            let bias = leaf(g, &b.conv_bias);
            let [w0, b0, w1, b1, sw] = b.cbam.tensors();
            let nodes = CbamNodes {
                mlp0_weight: leaf(g, w0),
                mlp0_bias: leaf(g, b0),
                mlp1_weight: leaf(g, w1),
                mlp1_bias: leaf(g, b1),
                spatial_weight: leaf(g, sw),
            };
            let gamma = leaf(g, &b.bn_gamma);
            let beta = leaf(g, &b.bn_beta);
            let layer_err = |e: Error| match e {
                Error::Shape { op, detail } => Error::shape(op, format!("block{i}: {detail}")),
                other => other,
            };
            h = g.conv2d(h, w, Some(bias), 1, Padding::Same, true).map_err(layer_err)?;
            h = cbam_apply(g, h, &nodes).map_err(layer_err)?;
            h = g
                .batch_norm(
                    h,
                    gamma,
                    beta,
                    b.bn_moving_mean.data(),
                    b.bn_moving_var.data(),
                    norm_mode,
                    eps,
                )
                .map_err(layer_err)?;
            batch_norms.push(h);
            h = g.maxpool2d(h).map_err(layer_err)?;
        }
        let features = h;
        h = g.flatten(h)?;
        for d in &self.dense {
            let w = leaf(g, &d.weight);
            let b = leaf(g, &d.bias);
            h = g.dense(h, w, Some(b), true)?;
        }
        if let Some(rng) = rng {
            if self.spec.dropout > 0.0 {
                let mask = dropout_mask(g.value(h).len(), self.spec.dropout, rng)?;
                h = g.dropout_with_mask(h, mask)?;
            }
        }
        let w = leaf(g, &self.head.weight);
        let b = leaf(g, &self.head.bias);
        let logits = g.dense(h, w, Some(b), false)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardNodes {
            params,
            batch_norms,
            features,
            logits,
            probs,
        })
    }

    /// Infer-mode class probabilities for `N x C x H x W` images, evaluated
    /// in chunks of [`INFER_CHUNK`].
    pub fn predict_proba(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let per = images.len() / n;
        let k = self.spec.num_classes;
        let mut out = Vec::with_capacity(n * k);
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let f = self.forward(&mut g, x, Mode::Infer, false)?;
            out.extend_from_slice(g.value(f.probs).data());
        }
        Tensor::new([n, k], out)
    }

    /// Predicted class per image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.predict_proba(images)?.argmax_rows())
    }

    /// Blends batch statistics from a train-mode forward into the moving
    /// statistics: `moving = momentum * moving + (1 - momentum) * batch`.
    pub fn update_moving_stats(&mut self, g: &Graph<T>, nodes: &ForwardNodes) -> Result<()> {
        let m = T::from_f64_lossy(self.spec.bn_momentum);
        let om = T::one() - m;
        for (b, &id) in self.blocks.iter_mut().zip(&nodes.batch_norms) {
            let (mean, var) = g
                .batch_stats(id)
                .ok_or_else(|| Error::invalid("moving statistics", "forward was not run in train mode"))?;
            for (mv, &bm) in b.bn_moving_mean.data_mut().iter_mut().zip(mean) {
                *mv = m * *mv + om * bm;
            }
            for (mv, &bv) in b.bn_moving_var.data_mut().iter_mut().zip(var) {
                *mv = m * *mv + om * bv;
            }
        }
        Ok(())
    }
}
