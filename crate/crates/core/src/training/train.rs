use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::loss::aggregate_loss_with_grad;
use super::{evaluate, LossWeightMatrix};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nested::{NestedModel, Tape};
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    /// `(step, factor)`: from `step` on, the learning rate is multiplied by
    /// `factor` (cumulative over milestones).
    pub decay: Vec<(usize, f64)>,
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Evaluate every this many steps (and after the last step). `0` logs
    /// only after the last step.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_steps(2000)
    }
}

impl TrainConfig {
    /// Batch 128, momentum 0.9, learning rate 0.1 decayed ×0.1 at 60 % and
    /// 80 % of `steps`.
    pub fn with_steps(steps: usize) -> Self {
        TrainConfig {
            batch_size: 128,
            momentum: 0.9,
            learning_rate: 0.1,
            decay: vec![(steps * 6 / 10, 0.1), (steps * 8 / 10, 0.1)],
            steps,
            seed: 0,
            weight_decay: 0.0,
            eval_every: 0,
            precision: Precision::F32,
        }
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.decay
            .iter()
            .filter(|(at, _)| step >= *at)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.decay.iter().any(|(_, f)| !(*f > 0.0)) {
            return bad("decay factors must be positive");
        }
        Ok(())
    }
}

/// Evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsEntry {
    pub step: usize,
    /// Top-1 accuracy per head (row `l-1`, column `c-1`).
    pub accuracy: Grid<f64>,
    pub loss: Grid<f64>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub entries: Vec<MetricsEntry>,
    /// Aggregate training loss of every step's mini-batch.
    pub train_loss: Vec<f64>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&MetricsEntry> {
        self.entries.last()
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g + wd·p`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    momentum: S,
    weight_decay: S,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new<T: Scalar>(model: &NestedModel<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: S::from_f64(momentum),
            weight_decay: S::from_f64(weight_decay),
            velocity: model.params().iter().map(|(_, p)| vec![S::zero(); p.values.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [S]>, grads: &[Vec<S>], lr: f64) {
        let lr = S::from_f64(lr);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let mut d = gv;
                if self.weight_decay != S::zero() {
                    d = d + self.weight_decay * *pv;
                }
                *vv = self.momentum * *vv + d;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

/// Trains all heads jointly on the λ-weighted aggregate loss.
///
/// Mini-batches come from [`batches`] with `(config.seed, epoch)`. Snapshots
/// are evaluated on `eval` (or on `train` when absent). The returned model
/// is frozen.
pub fn train<S: Scalar>(
    mut model: NestedModel<S>,
    train_set: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
    weights: &LossWeightMatrix,
) -> Result<(NestedModel<S>, MetricsLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidDataset("training set is empty".into()));
    }
    if weights.values().rows() != model.layers() || weights.values().cols() != model.groups() {
        return Err(Error::InvalidWeights(format!(
            "weights are {}x{}, model grid is {}x{}",
            weights.values().rows(),
            weights.values().cols(),
            model.layers(),
            model.groups()
        )));
    }
    let batch_size = config.batch_size.min(train_set.len());
    model.unfreeze();
    let mut opt = Sgd::<S>::new(&model, config.momentum, config.weight_decay);
    let mut log = MetricsLog::default();
    let eval_set = eval.unwrap_or(train_set);
    let mut tape = Tape::new();
    let mut epoch = 0u64;
    let mut queue = batches(train_set.len(), batch_size, config.seed, epoch)?.into_iter();

    for step in 0..config.steps {
        let idx = match queue.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                queue = batches(train_set.len(), batch_size, config.seed, epoch)?.into_iter();
                queue.next().expect("at least one batch per epoch")
            }
        };
        let (x, labels) = train_set.gather::<S>(&idx)?;
        let logits = model.forward_train(&x, &mut tape)?;
        let agg = aggregate_loss_with_grad(&logits, &labels, weights)?;
        if !agg.value.is_finite() {
            return Err(Error::Diverged { step, loss: agg.value });
        }
        log.train_loss.push(agg.value);
        model.update_running_stats(&tape)?;
        let grads = model.backward(&mut tape, &agg.grad)?;
        opt.step(model.params_mut(), &grads.tensors, config.learning_rate_at(step));

        let done = step + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done != config.steps {
            log.entries.push(snapshot(&model, eval_set, weights, done)?);
        }
    }
    log.entries.push(snapshot(&model, eval_set, weights, config.steps)?);
    model.freeze();
    Ok((model, log))
}

fn snapshot<S: Scalar>(model: &NestedModel<S>, data: &Dataset, weights: &LossWeightMatrix, step: usize) -> Result<MetricsEntry> {
    let m = evaluate(model, data)?;
    let aggregate = super::aggregate_loss(&m.loss, weights)?;
    Ok(MetricsEntry {
        step,
        accuracy: m.accuracy,
        loss: m.loss,
        aggregate,
    })
}
