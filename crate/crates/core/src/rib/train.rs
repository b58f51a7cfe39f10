use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::ProbKind;
use crate::model::{self, GradTargets, ModelParams, Pooling, Sgd, NUM_CLASSES};
use crate::toydata::{Split, ToyDataset};

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Initialization and shuffling seed.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            lr: 1e-3,
            momentum: 0.9,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

fn shuffled(indices: &[usize], seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    order
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
}

/// Fraction of the listed samples whose largest logit is the labeled class.
pub fn evaluate_accuracy(params: &ModelParams, ds: &ToyDataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Size("accuracy over zero samples".into()));
    }
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let trace = model::forward(params, &ds.images(chunk), &Pooling::Gap, GradTargets::NONE)?;
        for (row, &i) in trace.logits().data().chunks_exact(NUM_CLASSES).zip(chunk) {
            correct += (argmax(row) == ds.samples[i].class) as usize;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Multi-label sigmoid BCE training of a fresh model on the train split.
pub fn pretrain(ds: &ToyDataset, cfg: &PretrainConfig) -> Result<(ModelParams, Vec<EpochLog>)> {
    let train = ds.indices(Split::Train);
    let eval = ds.indices(Split::Eval);
    for (name, idx) in [("train", &train), ("eval", &eval)] {
        let mut seen = [false; NUM_CLASSES];
        idx.iter().for_each(|&i| seen[ds.samples[i].class] = true);
        if !seen.iter().all(|&s| s) {
            return Err(Error::Size(format!("{name} split does not contain both classes")));
        }
    }
    if cfg.batch == 0 {
        return Err(Error::Validation("pretrain.batch must be at least 1".into()));
    }
    let mut params = ModelParams::init(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(&train, cfg.seed, epoch as u64 + 1);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch) {
            let mut trace = model::forward(&params, &ds.images(batch), &Pooling::Gap, GradTargets::PARAMS)
                .map_err(|e| diverged(e, epoch))?;
            for (row, &i) in trace.logits().data().chunks_exact(NUM_CLASSES).zip(batch) {
                correct += (argmax(row) == ds.samples[i].class) as usize;
            }
            let root = trace
                .graph
                .bce_loss(trace.logits, &ds.targets(batch), ProbKind::Sigmoid)?;
            let loss = trace.graph.value(root).item();
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            trace.graph.backward(root).map_err(|e| diverged(e, epoch))?;
            opt.step(&mut params, &trace.param_grads())?;
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_accuracy: evaluate_accuracy(&params, ds, &eval)?,
        });
    }
    Ok((params, log))
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Training {
            epoch,
            loss: f64::NAN,
        },
        e => e,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScratchConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// `None` trains with no margin at all.
    pub margin: Option<f64>,
    pub seed: u64,
    /// Train-split samples used; `None` takes all of them.
    pub max_samples: Option<usize>,
}

impl Default for ScratchConfig {
    fn default() -> Self {
        ScratchConfig {
            epochs: 5,
            lr: 1e-3,
            momentum: 0.9,
            batch: 32,
            margin: None,
            seed: 0,
            max_samples: Some(640),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScratchLog {
    /// Batch loss after every step, in order.
    pub losses: Vec<f64>,
    /// Mean loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Set when the run stopped early on a non-finite value.
    pub terminated_at_step: Option<usize>,
}

impl ScratchLog {
    /// First step whose loss is at or below `level`.
    pub fn first_step_below(&self, level: f64) -> Option<usize> {
        self.losses.iter().position(|&l| l <= level)
    }
}

/// Trains a fresh model with the margin loss alone. Divergence is the
/// expected outcome and is recorded rather than raised.
pub fn train_from_scratch_rib(ds: &ToyDataset, cfg: &ScratchConfig) -> Result<ScratchLog> {
    if cfg.batch == 0 {
        return Err(Error::Validation("scratch.batch must be at least 1".into()));
    }
    let margin = cfg.margin.unwrap_or(f64::INFINITY);
    let mut train = ds.indices(Split::Train);
    if let Some(n) = cfg.max_samples {
        train.truncate(n);
    }
    if train.is_empty() {
        return Err(Error::Size("scratch run needs a non-empty train split".into()));
    }
    let mut params = ModelParams::init(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = ScratchLog {
        losses: Vec::new(),
        epoch_losses: Vec::new(),
        terminated_at_step: None,
    };
    for epoch in 0..cfg.epochs {
        let order = shuffled(&train, cfg.seed, epoch as u64 + 1);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut step = || -> Result<f64> {
                let mut trace =
                    model::forward(&params, &ds.images(batch), &Pooling::Gap, GradTargets::PARAMS)?;
                let root = trace.graph.rib_loss(trace.logits, &ds.targets(batch), margin)?;
                let loss = trace.graph.value(root).item();
                trace.graph.backward(root)?;
                let mut next = params.clone();
                opt.step(&mut next, &trace.param_grads())?;
                if next.tensors().iter().any(|t| !t.is_finite()) {
                    return Err(Error::NonFinite {
                        index: 0,
                        context: "parameters after update".into(),
                    });
                }
                params = next;
                Ok(loss)
            };
            match step() {
                Ok(loss) => {
                    log.losses.push(loss);
                    sum += loss * batch.len() as f64;
                }
                Err(Error::NonFinite { .. }) => {
                    log.terminated_at_step = Some(log.losses.len());
                    return Ok(log);
                }
                Err(e) => return Err(e),
            }
        }
        log.epoch_losses.push(sum / train.len() as f64);
    }
    Ok(log)
}
