//! Seeds from localization maps and their scores against the toy ground
//! truth (foreground = digit ∪ marker).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rib::{self, AdaptLoss, Adaptation, LocalizationMap, PretrainConfig, RibConfig};
use crate::toydata::{self, DatasetConfig, ToyDataset, ToySample};

/// `0.05, 0.10, .., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Foreground wherever `map >= threshold`.
pub fn seed_from_map(map: &[f64], threshold: f64) -> Vec<bool> {
    map.iter().map(|&v| v >= threshold).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn score(&self) -> SeedScore {
        let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
        let iou_fg = ratio(self.tp, self.tp + self.fp + self.fn_);
        let iou_bg = ratio(self.tn, self.tn + self.fp + self.fn_);
        let precision = ratio(self.tp, self.tp + self.fp).unwrap_or(0.0);
        let recall = ratio(self.tp, self.tp + self.fn_).unwrap_or(0.0);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let (iou_fg_v, iou_bg_v) = (iou_fg.unwrap_or(1.0), iou_bg.unwrap_or(1.0));
        SeedScore {
            iou_fg: iou_fg_v,
            iou_bg: iou_bg_v,
            miou: (iou_fg_v + iou_bg_v) / 2.0,
            precision,
            recall,
            f1,
            empty_union: iou_fg.is_none() || iou_bg.is_none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A class had an empty union and was scored 1 by convention.
    pub empty_union: bool,
}

pub fn score_seed(mask: &[bool], sample: &ToySample) -> Result<SeedScore> {
    if mask.len() != sample.region.len() {
        return Err(Error::dim("score_seed", "pixels", sample.region.len(), mask.len()));
    }
    Ok(Confusion::from_masks(mask, &sample.foreground()).score())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    #[serde(flatten)]
    pub score: SeedScore,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub rows: Vec<SweepRow>,
    pub best: SweepRow,
    pub n_images: usize,
}

impl SeedMetrics {
    pub fn best_miou(&self) -> f64 {
        self.best.score.miou
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,iou_fg,iou_bg,miou,precision,recall,f1,tp,fp,fn,tn\n");
        for r in &self.rows {
            let (m, c) = (&r.score, &r.confusion);
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.threshold, m.iou_fg, m.iou_bg, m.miou, m.precision, m.recall, m.f1, c.tp, c.fp, c.fn_, c.tn
            ));
        }
        s
    }
}

/// Scores every threshold with confusion counts summed over all images,
/// then picks the best mIoU (lowest threshold on ties).
pub fn sweep(maps: &[(&[f64], &ToySample)], thresholds: &[f64]) -> Result<SeedMetrics> {
    if maps.is_empty() || thresholds.is_empty() {
        return Err(Error::Size("sweep needs at least one map and one threshold".into()));
    }
    let truths: Vec<Vec<bool>> = maps.iter().map(|(_, s)| s.foreground()).collect();
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut total = Confusion::default();
        for ((map, _), truth) in maps.iter().zip(&truths) {
            if map.len() != truth.len() {
                return Err(Error::dim("sweep", "pixels", truth.len(), map.len()));
            }
            total.add(&Confusion::from_masks(&seed_from_map(map, t), truth));
        }
        rows.push(SweepRow {
            threshold: t,
            score: total.score(),
            confusion: total,
        });
    }
    let mut best = rows[0].clone();
    for r in &rows[1..] {
        let (a, b) = (r.score.miou, best.score.miou);
        if a > b || (a == b && r.threshold < best.threshold) {
            best = r.clone();
        }
    }
    Ok(SeedMetrics {
        rows,
        best,
        n_images: maps.len(),
    })
}

/// Sweep over localization maps of the given samples. `k` restricts each map
/// to its first `k + 1` CAMs; `None` uses the full `M`.
pub fn sweep_maps(
    ds: &ToyDataset,
    maps: &[(usize, &LocalizationMap)],
    k: Option<usize>,
    thresholds: &[f64],
) -> Result<SeedMetrics> {
    let built: Vec<Vec<f64>> = maps
        .iter()
        .map(|(_, lm)| match k {
            Some(k) if k > lm.k() => Err(Error::Validation(format!("map has K = {}, asked for {k}", lm.k()))),
            Some(k) => lm.partial(k),
            None => Ok(lm.map.clone()),
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(maps.len());
    for ((i, _), m) in maps.iter().zip(&built) {
        let s = ds
            .samples
            .get(*i)
            .ok_or_else(|| Error::Consistency(format!("map refers to sample {i}, dataset has {}", ds.len())))?;
        pairs.push((m.as_slice(), s));
    }
    sweep(&pairs, thresholds)
}

/// Sweep over the full maps of `adapted[j]` for sample `images[j]`. A `None`
/// entry (a run whose CAM degenerated) counts as an all-background seed.
pub fn sweep_adaptations(
    ds: &ToyDataset,
    images: &[usize],
    adapted: &[Option<Adaptation>],
    thresholds: &[f64],
) -> Result<SeedMetrics> {
    if images.len() != adapted.len() {
        return Err(Error::dim("sweep_adaptations", "images", images.len(), adapted.len()));
    }
    let empty = vec![0.0; toydata::PIXELS];
    let mut pairs = Vec::with_capacity(images.len());
    for (&i, a) in images.iter().zip(adapted) {
        let s = ds
            .samples
            .get(i)
            .ok_or_else(|| Error::Consistency(format!("sample {i} outside a dataset of {}", ds.len())))?;
        let map = a.as_ref().map_or(empty.as_slice(), |a| a.map.map.as_slice());
        pairs.push((map, s));
    }
    sweep(&pairs, thresholds)
}

/// Mean labeled-logit change per step, `logits[k] − logits[k − 1]` for
/// `k = 1..=K`, averaged over adaptations.
pub fn mean_logit_increments(adaptations: &[Adaptation]) -> Vec<f64> {
    let Some(first) = adaptations.first() else {
        return Vec::new();
    };
    let n = adaptations.len() as f64;
    (1..first.logits.len())
        .map(|k| adaptations.iter().map(|a| a.logits[k] - a.logits[k - 1]).sum::<f64>() / n)
        .collect()
}

/// Everything one pretrain → adapt → sweep run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub rib: RibConfig,
    /// Marked eval samples adapted and scored.
    pub n_images: usize,
    pub thresholds: Vec<f64>,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetConfig::default(),
            pretrain: PretrainConfig::default(),
            rib: RibConfig::default(),
            n_images: 100,
            thresholds: default_thresholds(),
            jobs: 1,
        }
    }
}

/// Best-sweep metrics of one pipeline run on an already generated dataset.
pub fn run_pipeline(ds: &ToyDataset, cfg: &PipelineConfig) -> Result<SeedMetrics> {
    let (theta0, _) = rib::pretrain(ds, &cfg.pretrain)?;
    let images = crate::analysis::select_marked(ds, &ds.indices(toydata::Split::Eval), cfg.n_images)?;
    let adapted = rib::adapt_many(&images, &theta0, ds, &cfg.rib, AdaptLoss::Rib, cfg.jobs)?;
    let pairs: Vec<(&[f64], &ToySample)> = adapted
        .iter()
        .zip(&images)
        .map(|(a, &i)| (a.map.map.as_slice(), &ds.samples[i]))
        .collect();
    sweep(&pairs, &cfg.thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub seeds: Vec<u64>,
    pub best_miou: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator).
    pub std: f64,
}

/// Runs the pipeline once per seed (used for both pretraining and
/// adaptation) and summarizes the best mIoU.
pub fn repeat_eval(cfg: &PipelineConfig, seeds: &[u64]) -> Result<RepeatReport> {
    if seeds.len() < 2 {
        return Err(Error::Validation("repeat_eval needs at least two seeds".into()));
    }
    let ds = toydata::generate(&cfg.dataset)?;
    let mut best_miou = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut run = cfg.clone();
        run.pretrain.seed = seed;
        run.rib.seed = seed;
        let m = run_pipeline(&ds, &run).map_err(|e| Error::Seeded {
            seed,
            source: Box::new(e),
        })?;
        best_miou.push(m.best_miou());
    }
    let n = best_miou.len() as f64;
    let mean = best_miou.iter().sum::<f64>() / n;
    let var = best_miou.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RepeatReport {
        seeds: seeds.to_vec(),
        best_miou,
        mean,
        std: var.sqrt(),
    })
}
