//! Data loading, the mini-batch training loop and batched inference.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{softmax, weighted_ce, ClassWeights};
use super::metrics::{evaluate_predictions, MetricsReport};
use super::model::{argmax, backward, forward, forward_cached, Architecture, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::resize_bilinear;
use crate::raster::{read_raster, ImageRaster};
use crate::synthgen::{resolve_image, splitmix64, DatasetManifest};
use crate::types::{AnomalyClass, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Classifier input as (width, height).
    pub input_size: (usize, usize),
    pub split_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            input_size: (64, 64),
            split_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "split_fraction {} must lie in (0,1)",
                self.split_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::simple_cnn(self.input_size.0, self.input_size.1)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Images already converted to classifier input, one `H×W` plane each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub width: usize,
    pub height: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<AnomalyClass>,
}

impl LabeledSet {
    pub fn new(width: usize, height: usize) -> Self {
        LabeledSet {
            width,
            height,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, image: &ImageRaster, label: AnomalyClass) -> Result<()> {
        self.inputs.extend(prepare_input(image, self.width, self.height)?);
        self.labels.push(label);
        Ok(())
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Gathers the given samples into a `B×1×H×W` tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.width * self.height);
        for &i in idx {
            data.extend_from_slice(self.input(i));
        }
        Tensor::new(vec![idx.len(), 1, self.height, self.width], data)
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for l in &self.labels {
            c[l.index()] += 1;
        }
        c
    }
}

/// Grayscale, resized classifier input for one image.
pub fn prepare_input(image: &ImageRaster, width: usize, height: usize) -> Result<Vec<f64>> {
    let luma = image.to_luma();
    if luma.width() == width && luma.height() == height {
        return Ok(luma.into_pixels());
    }
    Ok(resize_bilinear(&luma, width, height)?.into_pixels())
}

/// Reads every image of a manifest stored at `manifest_path`.
pub fn load_set(manifest: &DatasetManifest, manifest_path: &Path, input_size: (usize, usize)) -> Result<LabeledSet> {
    let mut set = LabeledSet::new(input_size.0, input_size.1);
    for s in &manifest.samples {
        let img = read_raster(resolve_image(manifest_path, s))?;
        set.push(&img, s.label)?;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
    /// Best held-out (or train, without a held-out set) accuracy so far.
    pub best_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best held-out accuracy.
    pub model: ModelParams,
    pub best_epoch: usize,
    /// Loss of the very first mini-batch, before any update.
    pub initial_loss: f64,
    pub history: Vec<EpochStats>,
}

/// Trains a fresh model with seeded initialization and shuffling.
pub fn train(
    train_set: &LabeledSet,
    heldout: Option<&LabeledSet>,
    cfg: &TrainConfig,
    weights: &ClassWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = cfg.architecture();
    let model = ModelParams::init(arch, splitmix64(cfg.seed ^ 0x494E_4954))?;
    train_from(model, train_set, heldout, cfg, weights)
}

/// Continues training an existing model.
pub fn train_from(
    mut model: ModelParams,
    train_set: &LabeledSet,
    heldout: Option<&LabeledSet>,
    cfg: &TrainConfig,
    weights: &ClassWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let a = model.arch;
    for set in std::iter::once(train_set).chain(heldout) {
        if (set.width, set.height) != (a.in_width, a.in_height) || a.in_channels != 1 {
            return Err(Error::invalid(format!(
                "data is {}x{} but the model expects {}x{}x{}",
                set.width, set.height, a.in_channels, a.in_width, a.in_height
            )));
        }
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5348_5546));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut initial_loss = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let x = train_set.batch(idx)?;
            let labels: Vec<AnomalyClass> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let cache = forward_cached(&model, &x)?;
            let (loss, dlogits) = weighted_ce(&cache.logits, &labels, weights)?;
            initial_loss.get_or_insert(loss);
            loss_sum += loss * idx.len() as f64;
            for (r, l) in labels.iter().enumerate() {
                if argmax(cache.logits.row(r)) == l.index() {
                    correct += 1;
                }
            }
            let grads = backward(&model, &cache, &dlogits)?;
            adam_step(&mut model, &grads, &mut state, &adam)?;
        }
        let train_accuracy = correct as f64 / train_set.len() as f64;
        let heldout_accuracy = match heldout {
            Some(h) if !h.is_empty() => Some(evaluate(&model, h)?.accuracy),
            _ => None,
        };
        let score = heldout_accuracy.unwrap_or(train_accuracy);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy,
            heldout_accuracy,
            best_accuracy: best.as_ref().map_or(score, |b| b.0),
        });
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, 0),
    };
    let initial_loss = match initial_loss {
        Some(l) => l,
        None => {
            let idx: Vec<usize> = (0..train_set.len().min(cfg.batch_size)).collect();
            weighted_ce(&forward(&model, &train_set.batch(&idx)?)?, &train_set.labels[..idx.len()], weights)?.0
        }
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        initial_loss,
        history,
    })
}

const EVAL_BATCH: usize = 64;

/// Class probabilities for every sample, in order.
pub fn predict_probs(model: &ModelParams, set: &LabeledSet) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(set.len());
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let p = softmax(&forward(model, &set.batch(idx)?)?);
        for r in 0..idx.len() {
            out.push(p.row(r).try_into().map_err(|_| Error::invalid("model must emit 5 logits"))?);
        }
    }
    Ok(out)
}

/// Probabilities and argmax class for a single prepared input plane.
pub fn predict_one(model: &ModelParams, input: &[f64]) -> Result<(AnomalyClass, [f64; NUM_CLASSES])> {
    let a = model.arch;
    let x = Tensor::new(vec![1, a.in_channels, a.in_height, a.in_width], input.to_vec())?;
    let p = softmax(&forward(model, &x)?);
    let probs: [f64; NUM_CLASSES] = p.row(0).try_into().map_err(|_| Error::invalid("model must emit 5 logits"))?;
    Ok((AnomalyClass::from_index(argmax(&probs))?, probs))
}

pub fn predict(model: &ModelParams, set: &LabeledSet) -> Result<Vec<AnomalyClass>> {
    predict_probs(model, set)?
        .iter()
        .map(|p| AnomalyClass::from_index(argmax(p)))
        .collect()
}

pub fn evaluate(model: &ModelParams, set: &LabeledSet) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    evaluate_predictions(&set.labels, &predict(model, set)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::loss::class_weights;

    /// Bright left half versus bright right half.
    fn toy_set(n: usize) -> LabeledSet {
        let mut s = LabeledSet::new(8, 8);
        for i in 0..n {
            let left = i % 2 == 0;
            let img = ImageRaster::from_fn(8, 8, |x, y| {
                let base = if (x < 4) == left { 0.9 } else { 0.1 };
                base + 0.02 * (((x * 7 + y * 3 + i) % 5) as f64 - 2.0)
            })
            .unwrap();
            s.push(&img, if left { AnomalyClass::NoAnomaly } else { AnomalyClass::NoNose }).unwrap();
        }
        s
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            learning_rate: 3e-3,
            input_size: (8, 8),
            seed: 11,
            ..Default::default()
        }
    }

    fn small_train(set: &LabeledSet, cfg: &TrainConfig) -> TrainOutcome {
        let arch = Architecture {
            conv1_filters: 4,
            conv2_filters: 4,
            hidden: 16,
            ..cfg.architecture()
        };
        let model = ModelParams::init(arch, cfg.seed).unwrap();
        train_from(model, set, None, cfg, &ClassWeights::uniform()).unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let set = toy_set(16);
        let out = small_train(&set, &toy_cfg());
        assert_eq!(evaluate(&out.model, &set).unwrap().accuracy, 1.0);
        let best: Vec<f64> = out.history.iter().map(|h| h.best_accuracy).collect();
        assert!(best.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn initial_loss_near_weighted_ln5() {
        let set = toy_set(12);
        let cfg = TrainConfig { epochs: 1, ..toy_cfg() };
        let w = class_weights(&[6, 6, 6, 6, 6]).unwrap();
        let out = train(&set, None, &cfg, &w).unwrap();
        assert!((out.initial_loss - 5f64.ln()).abs() < 0.2, "{}", out.initial_loss);
    }

    #[test]
    fn deterministic_under_seed() {
        let set = toy_set(8);
        let cfg = TrainConfig { epochs: 3, ..toy_cfg() };
        let a = small_train(&set, &cfg);
        let b = small_train(&set, &cfg);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn probabilities_are_normalized() {
        let set = toy_set(5);
        let m = ModelParams::init(toy_cfg().architecture(), 1).unwrap();
        for p in predict_probs(&m, &set).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (c, p) = predict_one(&m, set.input(0)).unwrap();
        assert_eq!(c.index(), argmax(&p));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { split_fraction: 1.0, ..Default::default() }.validate().is_err());
        let set = toy_set(2);
        assert!(train(&set, None, &TrainConfig::default(), &ClassWeights::uniform()).is_err());
    }
}
