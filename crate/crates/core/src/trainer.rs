//! Minibatch training with Adam, a step learning-rate schedule, spectral
//! normalization after every update and early stopping on validation loss.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{domain, Error, Result};
use crate::nnet::{backward, batch_loss, Ablation, Activation, Gradients, ModelConfig, ModelState};
use crate::numerics::Rng;
use crate::uncertainty::{report, UncertaintyReport};

/// Network shape used by [`train`]; input size and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub extractor_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub extractor_activation: Activation,
    pub head_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            extractor_widths: vec![64],
            head_widths: vec![128],
            extractor_activation: Activation::Tanh,
            head_activation: Activation::Tanh,
        }
    }
}

impl Architecture {
    /// One hidden extractor layer and single-layer heads.
    pub fn tiny(hidden: usize) -> Self {
        Self {
            extractor_widths: vec![hidden],
            head_widths: Vec::new(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    /// Learning-rate decay factor.
    pub gamma: f64,
    pub batch_size: usize,
    /// Label smoothing for the tau regularizer.
    pub eps: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub ablation: Ablation,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            lr: 1e-3,
            step_size: 100,
            gamma: 0.1,
            batch_size: 64,
            eps: 0.1,
            seed: 0,
            early_stop_patience: 20,
            ablation: Ablation::default(),
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.step_size == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return domain("max_epochs, step_size, batch_size and early_stop_patience must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return domain(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return domain(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.eps) {
            return domain(format!("eps must lie in [0, 1], got {}", self.eps));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Gradients,
    pub second: Gradients,
    pub timestep: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(m: &ModelState) -> Self {
        Self {
            first: Gradients::zeros_like(m),
            second: Gradients::zeros_like(m),
            timestep: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(m: &mut ModelState, g: &Gradients, s: &mut AdamState, lr: f64) -> Result<()> {
    s.timestep += 1;
    let t = s.timestep as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    let (b1, b2, eps) = (s.beta1, s.beta2, s.eps);
    let update = |p: &mut f64, g: f64, m1: &mut f64, m2: &mut f64| {
        *m1 = b1 * *m1 + (1.0 - b1) * g;
        *m2 = b2 * *m2 + (1.0 - b2) * g * g;
        *p -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
    };
    for (((layer, grad), first), second) in m
        .layers_mut()
        .zip(g.layers())
        .zip(s.first.layers_mut())
        .zip(s.second.layers_mut())
    {
        if layer.weight.data().len() != grad.weight.data().len() || layer.bias.len() != grad.bias.len() {
            return Err(Error::Dimension("gradient does not match the model".into()));
        }
        let params = layer.weight.data_mut().iter_mut().chain(layer.bias.iter_mut());
        let grads = grad.weight.data().iter().chain(&grad.bias);
        let m1 = first.weight.data_mut().iter_mut().chain(first.bias.iter_mut());
        let m2 = second.weight.data_mut().iter_mut().chain(second.bias.iter_mut());
        for (((p, g), a), b) in params.zip(grads).zip(m1).zip(m2) {
            update(p, *g, a, b);
            if !p.is_finite() {
                return Err(Error::Training("non-finite parameter after Adam update".into()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub train_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Training ended before `max_epochs` because validation loss stalled.
    pub stopped_early: bool,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

impl History {
    /// CSV with columns `epoch,train_loss,val_loss,val_acc,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Fraction of rows whose predicted class matches the label.
pub fn accuracy(m: &ModelState, ds: &LabeledDataset) -> Result<f64> {
    let reports = predict_batch(m, &ds.rows())?;
    let hits = reports
        .iter()
        .zip(&ds.labels)
        .filter(|(r, y)| r.predicted_class == **y)
        .count();
    Ok(hits as f64 / ds.len().max(1) as f64)
}

/// Train from scratch. Returns the weights of the epoch with the lowest
/// validation loss together with the per-epoch history.
pub fn train(cfg: &TrainConfig, train_set: &LabeledDataset, val_set: &LabeledDataset) -> Result<(ModelState, History)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return domain("training and validation sets must be nonempty");
    }
    if train_set.dim() != val_set.dim() || train_set.classes != val_set.classes {
        return Err(Error::Dimension("training and validation sets disagree on D or K".into()));
    }
    let root = Rng::new(cfg.seed);
    let model_cfg = ModelConfig {
        input_dim: train_set.dim(),
        extractor_widths: cfg.arch.extractor_widths.clone(),
        head_widths: cfg.arch.head_widths.clone(),
        classes: train_set.classes,
        extractor_activation: cfg.arch.extractor_activation,
        head_activation: cfg.arch.head_activation,
        ablation: cfg.ablation,
    };
    let mut model = ModelState::init(&model_cfg, &mut root.substream("init"))?;
    model.spectral_normalize();
    let mut adam = AdamState::new(&model);

    let rows = train_set.rows();
    let val_rows = val_set.rows();
    let mut history = History::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let order = root.substream_indexed("shuffle", epoch as u64).permutation(rows.len());
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&[f64]> = chunk.iter().map(|i| rows[*i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|i| train_set.labels[*i]).collect();
            let context = |e: Error| Error::Training(format!("epoch {epoch} step {step}: {e}"));
            let (loss, grads) = backward(&model, &xs, &ys, cfg.eps).map_err(context)?;
            adam_step(&mut model, &grads, &mut adam, lr).map_err(context)?;
            model.spectral_normalize();
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / rows.len() as f64;
        let val_loss = batch_loss(&model, &val_rows, &val_set.labels, cfg.eps)
            .map_err(|e| Error::Training(format!("epoch {epoch} validation: {e}")))?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Training(format!("epoch {epoch}: loss diverged")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc: accuracy(&model, val_set)?,
            train_acc: accuracy(&model, train_set)?,
            lr,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if val_loss < best.0 {
            best = (val_loss, model.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience && epoch + 1 < cfg.max_epochs {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.1, history))
}

/// One report per input: forward pass then closed-form uncertainty.
pub fn predict_batch(m: &ModelState, xs: &[&[f64]]) -> Result<Vec<UncertaintyReport>> {
    xs.iter().map(|x| m.forward(x).map(|cp| report(&cp))).collect()
}
