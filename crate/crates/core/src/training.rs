//! Next-token training: pretraining and post-prune recovery fine-tuning.
//!
//! Each epoch shuffles the training windows with a seeded RNG, walks them in
//! mini-batches, and evaluates pooled perplexity on the held-out set. With a
//! target perplexity, training stops after the first epoch that reaches it.
//! Everything runs sequentially, so a fixed seed reproduces a run bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::prediction_windows;
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::ModelBundle;
use crate::scalar::Scalar;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Stop after the first epoch whose held-out perplexity is at or below this.
    pub target_perplexity: Option<f64>,
    /// Checkpoint cadence in epochs for [`train_with_hook`].
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 8,
            seq_len: 32,
            max_epochs: 200,
            seed: 0,
            optimizer: OptimizerKind::default(),
            target_perplexity: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("max_epochs, batch_size and seq_len must be >= 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if let Some(t) = self.target_perplexity {
            if t.is_nan() {
                return Err(Error::Config("target_perplexity is NaN".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch.
    pub loss: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub target_perplexity: Option<f64>,
    /// First epoch whose perplexity reached the target.
    pub recovery_epochs: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,perplexity\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.loss, e.perplexity);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, json: impl AsRef<Path>, csv: impl AsRef<Path>) -> Result<()> {
        std::fs::write(json, self.to_json())?;
        std::fs::write(csv, self.to_csv())?;
        Ok(())
    }
}

/// Why a checkpoint hook fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointEvent {
    Periodic,
    Recovered,
}

/// Perplexity of the unpruned model on `eval_set`: the recovery target.
pub fn recovery_target<S: Scalar, T: AsRef<str>>(base: &ModelBundle<S>, eval_set: &[T], seq_len: usize) -> Result<f64> {
    Ok(perplexity(base, eval_set, seq_len)?.value)
}

struct Optimizer<S> {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Optimizer<S> {
    fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![S::zero(); n]).collect();
        Optimizer {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn update(&mut self, params: Vec<&mut [S]>, grads: &[Vec<S>]) {
        self.step += 1;
        let lr = S::from_f64c(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &gi) in p.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, e) = (S::from_f64c(beta1), S::from_f64c(beta2), S::from_f64c(eps));
                let c1 = S::from_f64c(1.0 - beta1.powi(self.step));
                let c2 = S::from_f64c(1.0 - beta2.powi(self.step));
                let one = S::one();
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + e);
                    }
                }
            }
        }
    }
}

/// Token-weighted loss and gradient of one mini-batch of `(input, target)` windows.
pub fn batch_gradient<S: Scalar>(model: &ModelBundle<S>, batch: &[(&[u32], &[u32])]) -> Result<(f64, Vec<Vec<S>>)> {
    let total: usize = batch.iter().map(|(_, t)| t.len()).sum();
    let mut grads: Vec<Vec<S>> = model.tensors().iter().map(|t| vec![S::zero(); t.numel()]).collect();
    let mut loss = 0.0;
    for (input, target) in batch {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let logits = model.forward_on_tape(&mut tape, &vars, input, None)?;
        let l = tape.softmax_cross_entropy(logits, target)?;
        let weight = target.len() as f64 / total as f64;
        loss += tape.value(l).data()[0].to_f64c() * weight;
        let mut g = tape.backward(l)?;
        let w = S::from_f64c(weight);
        for (acc, var) in grads.iter_mut().zip(&vars.ordered) {
            let gv = g.take(*var).expect("tracked parameter");
            for (a, &x) in acc.iter_mut().zip(gv.data()) {
                *a += w * x;
            }
        }
    }
    Ok((loss, grads))
}

fn encode_windows<S: Scalar, T: AsRef<str>>(model: &ModelBundle<S>, dataset: &[T]) -> Vec<Vec<u32>> {
    dataset.iter().map(|e| model.tokenizer.encode(e.as_ref())).collect()
}

/// Trains `model` in place. See [`train_with_hook`].
pub fn train<S: Scalar, T: AsRef<str>>(
    model: &mut ModelBundle<S>,
    dataset: &[T],
    cfg: &TrainConfig,
    eval_set: &[T],
) -> Result<TrainHistory> {
    train_with_hook(model, dataset, cfg, eval_set, |_, _, _| Ok(()))
}

/// Trains `model` in place, calling `hook` every `checkpoint_every` epochs
/// and at the recovery epoch.
pub fn train_with_hook<S: Scalar, T: AsRef<str>>(
    model: &mut ModelBundle<S>,
    dataset: &[T],
    cfg: &TrainConfig,
    eval_set: &[T],
    mut hook: impl FnMut(usize, &ModelBundle<S>, CheckpointEvent) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.is_empty() || eval_set.is_empty() {
        return Err(Error::EmptyDataset("training and evaluation sets must be non-empty".into()));
    }
    if cfg.seq_len > model.config.max_seq {
        return Err(Error::Config(format!(
            "seq_len {} exceeds max_seq {}",
            cfg.seq_len, model.config.max_seq
        )));
    }
    let encoded = encode_windows(model, dataset);
    let mut windows: Vec<(&[u32], &[u32])> = encoded.iter().flat_map(|ids| prediction_windows(ids, cfg.seq_len)).collect();
    if windows.is_empty() {
        return Err(Error::Training("no training entry encodes to 2 or more tokens".into()));
    }
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory {
        target_perplexity: cfg.target_perplexity,
        ..Default::default()
    };

    for epoch in 1..=cfg.max_epochs {
        windows.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        let n_batches = windows.len().div_ceil(cfg.batch_size);
        for (b, batch) in windows.chunks(cfg.batch_size).enumerate() {
            let nonfinite = || Error::NonFiniteLoss { epoch, batch: b };
            let (loss, grads) = batch_gradient(model, batch).map_err(|e| match e {
                Error::NonFinite { .. } => nonfinite(),
                other => other,
            })?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(nonfinite());
            }
            let n: usize = batch.iter().map(|(_, t)| t.len()).sum();
            loss_sum += loss * n as f64;
            tokens += n;
            if cfg.learning_rate > 0.0 {
                let params = model.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
                opt.update(params, &grads);
                if model.tensors().iter().any(|t| t.data().iter().any(|w| !w.is_finite())) {
                    return Err(nonfinite());
                }
            }
        }
        // A failure here comes from the last update of the epoch.
        let ppl = match perplexity(model, eval_set, cfg.seq_len) {
            Ok(r) => r.value,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: n_batches - 1,
                })
            }
            Err(e) => return Err(e),
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / tokens as f64,
            perplexity: ppl,
        });
        if cfg.checkpoint_every.is_some_and(|n| epoch % n == 0) {
            hook(epoch, model, CheckpointEvent::Periodic)?;
        }
        if cfg.target_perplexity.is_some_and(|t| ppl <= t) {
            history.recovery_epochs = Some(epoch);
            hook(epoch, model, CheckpointEvent::Recovered)?;
            break;
        }
    }
    Ok(history)
}
