//! Toy-model training: plain cross-entropy minimization and the FGSM
//! adversarial-training variant.
//!
//! Both paths share one loop, so adversarial training with `mix_ratio = 0`
//! (or `epsilon = 0`) reproduces the plain trajectory exactly. Shuffling and
//! adversarial-subset selection use separate RNG substreams for that reason.

use crate::attack::sign;
use crate::core::ImageTensor;
use crate::data::{split, DatasetHandle};
use crate::error::{Error, Result};
use crate::metrics::{miou, ConfusionMatrix};
use crate::model::nn::{softmax_cross_entropy, Adam, LayerGrad};
use crate::model::{SegModel, ToyNet};
use crate::rng;
use crate::Real;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Held-out fraction used for the reported validation mIoU.
    pub val_fraction: f64,
    /// Seed for shuffling and adversarial-subset selection.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 2e-3,
            batch_size: 8,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// FGSM adversarial-training knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdvTrainConfig {
    /// Single-step sign-gradient budget.
    pub epsilon: f64,
    /// Fraction of each batch replaced by adversarial versions.
    pub mix_ratio: f64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            epsilon: crate::core::EPS_8_255,
            mix_ratio: 0.5,
        }
    }
}

/// Trains by standard cross-entropy minimization; returns the validation
/// mIoU in percent.
pub fn train_toy<F: Real>(
    model: &mut ToyNet<F>,
    dataset: &DatasetHandle<F>,
    cfg: &TrainConfig,
) -> Result<f64> {
    run_training(model, dataset, cfg, None)
}

/// FGSM adversarial training: each batch replaces `mix_ratio` of its inputs
/// with single-step sign-gradient adversarial versions before the update.
pub fn adversarial_train<F: Real>(
    model: &mut ToyNet<F>,
    dataset: &DatasetHandle<F>,
    cfg: &TrainConfig,
    adv: &AdvTrainConfig,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&adv.mix_ratio) {
        return Err(Error::InvalidParams(format!(
            "mix_ratio {} outside [0,1]",
            adv.mix_ratio
        )));
    }
    if !(0.0..=1.0).contains(&adv.epsilon) {
        return Err(Error::InvalidParams(format!(
            "epsilon {} outside [0,1]",
            adv.epsilon
        )));
    }
    run_training(model, dataset, cfg, Some(adv))
}

/// Single-step FGSM example at budget epsilon, clipped back to [0,1].
fn fgsm<F: Real>(
    model: &ToyNet<F>,
    x: &ImageTensor<F>,
    y: &crate::core::LabelMap,
    epsilon: f64,
) -> Result<ImageTensor<F>> {
    let (_, grad) = model.input_gradient(x, y, None)?;
    let eps = F::cast(epsilon);
    let mut data = x.data().clone();
    ndarray::Zip::from(&mut data).and(&grad).for_each(|v, &g| {
        *v = (*v + eps * sign(g)).max(F::zero()).min(F::one());
    });
    Ok(ImageTensor::from_raw(data))
}

fn run_training<F: Real>(
    model: &mut ToyNet<F>,
    dataset: &DatasetHandle<F>,
    cfg: &TrainConfig,
    adv: Option<&AdvTrainConfig>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidParams("empty training dataset".into()));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(Error::InvalidParams(format!(
            "val_fraction {} outside (0,1)",
            cfg.val_fraction
        )));
    }
    let (train_set, val_set) = split(dataset, 1.0 - cfg.val_fraction, cfg.seed)?;

    let mut shuffle_rng = rng::substream(cfg.seed, 0);
    let mut adv_rng = rng::substream(cfg.seed, 1);
    let mut adam = Adam::new(model.network(), cfg.learning_rate);

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let adv_count = adv.map_or(0, |a| {
                (a.mix_ratio * batch.len() as f64).round() as usize
            });
            let adv_positions: Vec<usize> = if adv_count > 0 {
                let mut pos: Vec<usize> = (0..batch.len()).collect();
                for i in 0..adv_count.min(batch.len()) {
                    let j = adv_rng.gen_range(i..pos.len());
                    pos.swap(i, j);
                }
                pos.truncate(adv_count.min(batch.len()));
                pos
            } else {
                Vec::new()
            };

            let mut acc: Option<Vec<LayerGrad<F>>> = None;
            let mut batch_loss = 0.0f64;
            for (pos, &idx) in batch.iter().enumerate() {
                let (x, y) = train_set.get(idx);
                let owned;
                let input = if adv_positions.contains(&pos) {
                    owned = fgsm(model, x, y, adv.unwrap().epsilon)?;
                    &owned
                } else {
                    x
                };
                let (logits, cache) = model.network().forward_cached(input.data(), true);
                let (loss, dlogits) = softmax_cross_entropy(&logits, y, None);
                batch_loss += loss;
                let (_, grads) = model.network().backward(&cache, dlogits, true);
                let grads = grads.expect("weight grads requested");
                match &mut acc {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.weight += &g.weight;
                            a.bias += &g.bias;
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::DivergedTraining(format!(
                    "non-finite batch loss {batch_loss}"
                )));
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = F::cast(1.0 / batch.len() as f64);
            for g in &mut grads {
                g.weight.mapv_inplace(|v| v * scale);
                g.bias.mapv_inplace(|v| v * scale);
            }
            adam.step(model.network_mut(), &grads);
        }
    }

    validation_miou(model, &val_set)
}

/// Global-confusion-matrix mIoU of the model on a dataset, in percent.
pub fn validation_miou<F: Real>(model: &ToyNet<F>, dataset: &DatasetHandle<F>) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (x, y) in dataset.iter() {
        cm.accumulate(&model.predict(x)?, y)?;
    }
    Ok(miou(&cm)?.0)
}
