//! Pretraining, per-image RIB adaptation and localization-map aggregation.
//!
//! Adaptation starts from a private copy of `θ_0`, takes `K` plain gradient
//! steps on a batch of the image plus `B − 1` random padding samples, and
//! sums the max-normalized CAMs of `θ_0..θ_K` into the map `M`.

mod export;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::ProbKind;
use crate::model::{
    self, normalize_cam, raw_cam_from_features, GradTargets, ModelParams, Pooling, PoolingMode, Sgd,
    IMAGE_SIDE, NUM_LAYERS,
};
use crate::toydata::ToyDataset;

pub use export::{
    decode_map, encode_map, encode_sidecar, parse_map, read_map, sidecar_path, write_map, MapSidecar,
};
pub use train::{
    evaluate_accuracy, pretrain, train_from_scratch_rib, EpochLog, PretrainConfig, ScratchConfig, ScratchLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

/// Everything governing one adaptation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RibConfig {
    /// Number of adaptation steps `K`.
    pub k: usize,
    pub lr: f64,
    pub margin: f64,
    /// Batch size `B`, including the adapted image.
    pub batch: usize,
    pub tau: f64,
    pub pooling: PoolingMode,
    pub seed: u64,
}

impl Default for RibConfig {
    fn default() -> Self {
        RibConfig::preset(Preset::Toy)
    }
}

impl RibConfig {
    pub fn preset(preset: Preset) -> Self {
        let (lr, margin) = match preset {
            Preset::Toy => (1e-3, 50.0),
            Preset::Paper => (8e-6, 600.0),
        };
        RibConfig {
            k: 10,
            lr,
            margin,
            batch: 20,
            tau: 0.4,
            pooling: PoolingMode::Gndrp,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.batch < 1 {
            return bad("rib.batch must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("rib.tau {} outside (0, 1]", self.tau));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("rib.lr {} must be finite and non-negative", self.lr));
        }
        if !(self.margin > 0.0) {
            return bad(format!("rib.margin {} must be positive", self.margin));
        }
        Ok(())
    }
}

/// Objective used for the adaptation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptLoss {
    Rib,
    Bce(ProbKind),
}

impl AdaptLoss {
    pub fn name(self) -> String {
        match self {
            AdaptLoss::Rib => "rib".into(),
            AdaptLoss::Bce(kind) => format!("bce_{}", kind.name()),
        }
    }
}

/// Aggregated map `M` with the per-iteration CAM stack it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    /// `M`: negatives clamped, max-normalized.
    pub map: Vec<f64>,
    /// Normalized `CAM(x; θ_k)` for `k = 0..=K`.
    pub stack: Vec<Vec<f64>>,
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// GNDRP selections that fell back (empty `U_tau` or degenerate CAM),
    /// summed over every batch sample and step.
    pub fallback_count: usize,
}

impl LocalizationMap {
    pub fn k(&self) -> usize {
        self.stack.len() - 1
    }

    /// Map built from the first `k + 1` CAMs of the stack.
    pub fn partial(&self, k: usize) -> Result<Vec<f64>> {
        aggregate(&self.stack[..=k])
    }
}

/// `Σ_k CAM_k`, negatives clamped to zero, divided by the maximum.
pub fn aggregate(stack: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = stack.first() else {
        return Err(Error::Validation("cannot aggregate an empty CAM stack".into()));
    };
    let mut sum = vec![0.0; first.len()];
    for cam in stack {
        sum.iter_mut().zip(cam).for_each(|(s, c)| *s += c);
    }
    sum.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = sum.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateMap("aggregated map is identically zero".into()));
    }
    Ok(sum.iter().map(|v| v / max).collect())
}

/// Result of one adaptation run.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub map: LocalizationMap,
    /// Labeled-class logit of `x` under the configured pooling at `θ_0..θ_K`.
    pub logits: Vec<f64>,
    /// Labeled-class logit of `x` under GAP at `θ_0..θ_K`.
    pub gap_logits: Vec<f64>,
}

/// Per-image random stream seed, independent of processing order.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `[x, p_1, .., p_{B-1}]`: padding drawn without replacement from the
/// dataset minus `x`, from a stream keyed by `(seed, k)`.
pub fn batch_sampler(ds: &ToyDataset, x: usize, b: usize, seed: u64, k: usize) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    if ds.len() < b || x >= ds.len() {
        return Err(Error::Size(format!(
            "batch of {b} around sample {x} needs a dataset of at least {b} samples, have {}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut out = Vec::with_capacity(b);
    out.push(x);
    if b > 1 {
        let picks = rand::seq::index::sample(&mut rng, ds.len() - 1, b - 1);
        out.extend(picks.into_iter().map(|j| if j >= x { j + 1 } else { j }));
    }
    Ok(out)
}

fn pooling_for(cfg: &RibConfig, ds: &ToyDataset, batch: &[usize]) -> Pooling {
    match cfg.pooling {
        PoolingMode::Gap => Pooling::Gap,
        PoolingMode::Gndrp => Pooling::Gndrp {
            tau: cfg.tau,
            classes: batch.iter().map(|&i| ds.samples[i].class).collect(),
        },
    }
}

/// State of `x` under one parameter set, read off a forward trace.
struct Probe {
    cam: Vec<f64>,
    logit: f64,
    gap_logit: f64,
}

fn probe(trace: &model::ForwardTrace, params: &ModelParams, class: usize, k: usize) -> Result<Probe> {
    let raw = raw_cam_from_features(trace.feature(NUM_LAYERS - 1), 0, params.class_weights(class));
    let gap_logit = raw.iter().sum::<f64>() / raw.len() as f64 + params.head_bias.data()[class];
    let cam = normalize_cam(&raw).map_err(|e| match e {
        Error::DegenerateMap(msg) => Error::DegenerateMap(format!("iteration k={k}: {msg}")),
        e => e,
    })?;
    Ok(Probe {
        cam,
        logit: trace.logit(0, class),
        gap_logit,
    })
}

/// Runs the adaptation loop for sample `x`. `observe` sees every `θ_k`,
/// `k = 0..=K`, in order. `theta0` is never modified.
pub fn adapt_with(
    x: usize,
    theta0: &ModelParams,
    ds: &ToyDataset,
    cfg: &RibConfig,
    loss: AdaptLoss,
    mut observe: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<Adaptation> {
    cfg.validate()?;
    if x >= ds.len() {
        return Err(Error::Validation(format!("sample {x} out of range")));
    }
    let class = ds.samples[x].class;
    let seed = image_seed(cfg.seed, x);
    let mut theta = theta0.clone();
    let mut opt = Sgd::new(cfg.lr, 0.0);
    let mut stack = Vec::with_capacity(cfg.k + 1);
    let mut logits = Vec::with_capacity(cfg.k + 1);
    let mut gap_logits = Vec::with_capacity(cfg.k + 1);
    let mut fallback_count = 0;

    for k in 1..=cfg.k {
        observe(k - 1, &theta)?;
        let batch = batch_sampler(ds, x, cfg.batch, seed, k)?;
        let pooling = pooling_for(cfg, ds, &batch);
        let mut trace = model::forward(&theta, &ds.images(&batch), &pooling, GradTargets::PARAMS)?;
        fallback_count += trace.fallback_count();
        let p = probe(&trace, &theta, class, k - 1)?;
        stack.push(p.cam);
        logits.push(p.logit);
        gap_logits.push(p.gap_logit);

        let targets = ds.targets(&batch);
        let root = match loss {
            AdaptLoss::Rib => trace.graph.rib_loss(trace.logits, &targets, cfg.margin)?,
            AdaptLoss::Bce(kind) => trace.graph.bce_loss(trace.logits, &targets, kind)?,
        };
        trace.graph.backward(root)?;
        opt.step(&mut theta, &trace.param_grads())?;
    }

    observe(cfg.k, &theta)?;
    let pooling = pooling_for(cfg, ds, &[x]);
    let trace = model::forward(&theta, &ds.images(&[x]), &pooling, GradTargets::NONE)?;
    fallback_count += trace.fallback_count();
    let p = probe(&trace, &theta, class, cfg.k)?;
    stack.push(p.cam);
    logits.push(p.logit);
    gap_logits.push(p.gap_logit);

    let map = aggregate(&stack)?;
    Ok(Adaptation {
        map: LocalizationMap {
            map,
            stack,
            class,
            height: IMAGE_SIDE,
            width: IMAGE_SIDE,
            fallback_count,
        },
        logits,
        gap_logits,
    })
}

/// RIB adaptation of one sample with the margin loss.
pub fn rib_adapt(x: usize, theta0: &ModelParams, ds: &ToyDataset, cfg: &RibConfig) -> Result<Adaptation> {
    adapt_with(x, theta0, ds, cfg, AdaptLoss::Rib, |_, _| Ok(()))
}

/// As [`rib_adapt`], also returning copies of `θ_1..θ_K`.
pub fn rib_adapt_keep(
    x: usize,
    theta0: &ModelParams,
    ds: &ToyDataset,
    cfg: &RibConfig,
) -> Result<(Adaptation, Vec<ModelParams>)> {
    let mut thetas = Vec::with_capacity(cfg.k);
    let a = adapt_with(x, theta0, ds, cfg, AdaptLoss::Rib, |k, t| {
        if k > 0 {
            thetas.push(t.clone());
        }
        Ok(())
    })?;
    Ok((a, thetas))
}

/// The same loop driven by BCE under the given output nonlinearity.
pub fn finetune_bce_variant(
    x: usize,
    theta0: &ModelParams,
    ds: &ToyDataset,
    cfg: &RibConfig,
    kind: ProbKind,
) -> Result<Adaptation> {
    adapt_with(x, theta0, ds, cfg, AdaptLoss::Bce(kind), |_, _| Ok(()))
}

/// Runs `f` over `items` on a pool of `jobs` threads, keeping input order.
/// `jobs == 0` uses rayon's default pool size.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Adapts every listed sample; output order follows `indices`.
pub fn adapt_many(
    indices: &[usize],
    theta0: &ModelParams,
    ds: &ToyDataset,
    cfg: &RibConfig,
    loss: AdaptLoss,
    jobs: usize,
) -> Result<Vec<Adaptation>> {
    par_map(indices, jobs, |&x| adapt_with(x, theta0, ds, cfg, loss, |_, _| Ok(())))
}

/// As [`adapt_many`], but an image whose CAM degenerates mid-run yields
/// `None` instead of failing the whole batch.
pub fn adapt_many_lenient(
    indices: &[usize],
    theta0: &ModelParams,
    ds: &ToyDataset,
    cfg: &RibConfig,
    loss: AdaptLoss,
    jobs: usize,
) -> Result<Vec<Option<Adaptation>>> {
    par_map(indices, jobs, |&x| match adapt_with(x, theta0, ds, cfg, loss, |_, _| Ok(())) {
        Ok(a) => Ok(Some(a)),
        Err(Error::DegenerateMap(_)) => Ok(None),
        Err(e) => Err(e),
    })
}

#[cfg(test)]
mod tests;
