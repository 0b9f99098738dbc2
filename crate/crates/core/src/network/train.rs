use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, Model};
use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Optimization settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffles and the dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Statistics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    /// Accuracy of the train-mode predictions made while fitting.
    pub batch_accuracy: f64,
    /// Infer-mode accuracy on the full training set after the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// `epoch,loss,batch_accuracy,accuracy` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,batch_accuracy,accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.8},{:.8},{:.8}\n", e.epoch, e.loss, e.batch_accuracy, e.accuracy));
        }
        s
    }
}

fn check_data<T: Element>(images: &[Tensor<T>], labels: &[usize], classes: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("dataset", "no images"));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid(
            "dataset",
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid("label", format!("{bad} is outside [0, {classes})")));
    }
    Ok(())
}

/// Fraction of images whose infer-mode prediction equals the label.
pub fn accuracy<T: Element>(model: &Model<T>, images: &[Tensor<T>], labels: &[usize]) -> Result<f64> {
    check_data(images, labels, model.spec.num_classes)?;
    let mut correct = 0;
    for (chunk, labs) in images.chunks(super::INFER_CHUNK).zip(labels.chunks(super::INFER_CHUNK)) {
        let pred = model.predict(&Tensor::stack(chunk)?)?;
        correct += pred.iter().zip(labs).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Infer-mode mean cross-entropy.
pub fn evaluate_loss<T: Element>(model: &Model<T>, images: &[Tensor<T>], labels: &[usize]) -> Result<f64> {
    check_data(images, labels, model.spec.num_classes)?;
    let mut total = 0.0;
    for (chunk, labs) in images.chunks(super::INFER_CHUNK).zip(labels.chunks(super::INFER_CHUNK)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack(chunk)?);
        let f = model.forward(&mut g, x, Mode::Infer, false)?;
        let loss = g.sparse_cross_entropy(f.probs, labs)?;
        total += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Fits `model` with Adam on sparse cross-entropy.
pub fn train<T: Element>(
    model: &mut Model<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_with_callback(model, images, labels, config, |_| {})
}

/// [`train`] with a hook called after every epoch.
pub fn train_with_callback<T: Element>(
    model: &mut Model<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    check_data(images, labels, model.spec.num_classes)?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::invalid("train config", "epochs and batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::<T>::new(config.adam);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Tensor<T>> = idx.iter().map(|&i| images[i].clone()).collect();
            let labs: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(&batch)?);
            let f = model.forward(&mut g, x, Mode::Train(&mut rng), true)?;
            let loss = g.sparse_cross_entropy(f.probs, &labs)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                let logits = g.value(f.logits);
                let bad_params: Vec<String> = model
                    .params()
                    .into_iter()
                    .filter(|p| !p.tensor.all_finite())
                    .map(|p| p.name)
                    .collect();
                return Err(Error::Training(format!(
                    "loss is {lv} at epoch {epoch}, batch {bi} ({} images); logits finite: {}, \
                     largest |logit| {:.3e}, non-finite parameters: {bad_params:?}",
                    idx.len(),
                    logits.all_finite(),
                    logits.data().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max),
                )));
            }
            loss_sum += lv * idx.len() as f64;
            let pred = g.value(f.probs).argmax_rows();
            correct += pred.iter().zip(&labs).filter(|(p, l)| p == l).count();

            let mut grads = g.backward(loss, &[])?;
            model.update_moving_stats(&g, &f)?;
            let mut names = Vec::new();
            let mut tensors = Vec::new();
            for p in model.params_mut().into_iter().filter(|p| p.trainable) {
                names.push(p.name);
                tensors.push(p.tensor);
            }
            let grad_list: Vec<Tensor<T>> = f
                .params
                .iter()
                .zip(&tensors)
                .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            let grad_refs: Vec<&Tensor<T>> = grad_list.iter().collect();
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            opt.step(&mut tensors, &grad_refs, &name_refs).map_err(|e| match e {
                Error::NonFinite(what) => Error::Training(format!("{what} at epoch {epoch}, batch {bi}")),
                other => other,
            })?;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / images.len() as f64,
            batch_accuracy: correct as f64 / images.len() as f64,
            accuracy: accuracy(model, images, labels)?,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}
