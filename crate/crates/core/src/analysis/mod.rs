//! Input-gradient maps `G_1..G_6` and the high-gradient ratio (HGR) per
//! region, across layers and across RIB iterations.

mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::{self, GradTargets, ModelParams, Pooling, NUM_CLASSES, NUM_LAYERS};
use crate::rib::{self, par_map, AdaptLoss, Adaptation, RibConfig};
use crate::toydata::{Region, ToyDataset};

pub use render::{decode_pgm, encode_mask_pgm, encode_pgm};

/// Number of gradient maps: one per conv layer plus the logit.
pub const NUM_MAPS: usize = NUM_LAYERS + 1;
pub const DEFAULT_HGR_THRESHOLD: f64 = 0.3;

/// How absolute input gradients are scaled before thresholding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNorm {
    /// Each map divided by its own maximum.
    #[default]
    PerMap,
    /// Every map of an image divided by `max |G_1|` of that image.
    SharedG1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Marked images averaged over.
    pub n_images: usize,
    pub threshold: f64,
    pub norm: GradNorm,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_images: 100,
            threshold: DEFAULT_HGR_THRESHOLD,
            norm: GradNorm::PerMap,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Validation("analysis.n_images must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Validation(format!("analysis.threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Absolute input gradients of every layer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMaps {
    /// `maps[l - 1]` is `G_l`; `G_6` is the labeled-class logit.
    pub maps: Vec<Vec<f64>>,
    /// Divisor applied to each map (0 for an all-zero map under `PerMap`).
    pub norms: Vec<f64>,
}

impl GradientMaps {
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.maps[l - 1]
    }
}

/// Input gradient of `Σ T_l` for the requested layers (`1..=5`) and of the
/// GAP-mode logit `y^c` for layer 6, unnormalized and signed.
pub fn raw_input_gradients(params: &ModelParams, x: &Tensor, class: usize, layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    if class >= NUM_CLASSES {
        return Err(Error::Validation(format!("class {class} out of range")));
    }
    if x.shape().first() != Some(&1) {
        return Err(Error::dim("gradient_map", "batch", 1, x.shape().first().copied().unwrap_or(0)));
    }
    let mut trace = model::forward(params, x, &Pooling::Gap, GradTargets::INPUT)?;
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let root = match l {
            1..=NUM_LAYERS => trace.graph.sum(trace.features[l - 1])?,
            NUM_MAPS => {
                let mut pick = [0.0; NUM_CLASSES];
                pick[class] = 1.0;
                trace.graph.dot(trace.logits, &pick)?
            }
            _ => return Err(Error::Validation(format!("layer {l} outside 1..={NUM_MAPS}"))),
        };
        trace.graph.zero_grad();
        trace.graph.backward(root)?;
        let g = trace.graph.grad(trace.input).map(<[f64]>::to_vec);
        out.push(g.unwrap_or_else(|| vec![0.0; x.numel()]));
    }
    Ok(out)
}

fn max_abs(g: &[f64]) -> f64 {
    g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `raw[0]` must be `G_1`; it is the reference under either mode.
fn normalized(raw: Vec<Vec<f64>>, mode: GradNorm) -> Result<GradientMaps> {
    let reference = max_abs(&raw[0]);
    if !(reference > 0.0) {
        return Err(Error::DegenerateMap(
            "max |G_1| is zero; gradient maps cannot be normalized".into(),
        ));
    }
    let norms: Vec<f64> = match mode {
        GradNorm::SharedG1 => vec![reference; raw.len()],
        GradNorm::PerMap => raw.iter().map(|g| max_abs(g)).collect(),
    };
    let maps = raw
        .into_iter()
        .zip(&norms)
        .map(|(g, &n)| {
            if n > 0.0 {
                g.into_iter().map(|v| v.abs() / n).collect()
            } else {
                vec![0.0; g.len()]
            }
        })
        .collect();
    Ok(GradientMaps { maps, norms })
}

/// All six normalized maps of one image.
pub fn gradient_maps(params: &ModelParams, x: &Tensor, class: usize, mode: GradNorm) -> Result<GradientMaps> {
    let layers: Vec<usize> = (1..=NUM_MAPS).collect();
    normalized(raw_input_gradients(params, x, class, &layers)?, mode)
}

/// The single normalized map `G_l`.
pub fn gradient_map(params: &ModelParams, x: &Tensor, class: usize, l: usize, mode: GradNorm) -> Result<Vec<f64>> {
    if !(1..=NUM_MAPS).contains(&l) {
        return Err(Error::Validation(format!("layer {l} outside 1..={NUM_MAPS}")));
    }
    let layers: Vec<usize> = if l == 1 { vec![1] } else { vec![1, l] };
    let maps = normalized(raw_input_gradients(params, x, class, &layers)?, mode)?;
    Ok(maps.maps.into_iter().last().unwrap())
}

/// Fraction of region pixels whose value exceeds `threshold`.
pub fn hgr(map: &[f64], region: &[bool], threshold: f64) -> Result<f64> {
    let size = region.iter().filter(|&&r| r).count();
    if size == 0 {
        return Err(Error::UndefinedRegion("HGR over an empty region".into()));
    }
    let high = map.iter().zip(region).filter(|&(&g, &r)| r && g > threshold).count();
    Ok(high as f64 / size as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisKind {
    Layer,
    Iteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgrRow {
    pub axis_value: usize,
    pub region: String,
    pub hgr: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgrReport {
    pub axis_kind: AxisKind,
    pub threshold: f64,
    pub norm: GradNorm,
    /// Dataset indices of the images averaged over, in order.
    pub images: Vec<usize>,
    pub rows: Vec<HgrRow>,
}

impl HgrReport {
    pub fn get(&self, axis_value: usize, region: Region) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.axis_value == axis_value && r.region == region.name())
            .map(|r| r.hgr)
    }

    pub fn to_csv(&self) -> String {
        let kind = match self.axis_kind {
            AxisKind::Layer => "layer",
            AxisKind::Iteration => "iteration",
        };
        let mut s = String::from("axis_kind,axis_value,region,hgr,n_images,threshold\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{kind},{},{},{},{},{}\n",
                r.axis_value, r.region, r.hgr, r.n_images, self.threshold
            ));
        }
        s
    }
}

/// Per-image HGR values indexed `[axis][region]`; `None` where the region is
/// empty.
type ImageHgr = Vec<[Option<f64>; 3]>;

fn image_hgr(maps: &[Vec<f64>], sample: &crate::toydata::ToySample, threshold: f64) -> ImageHgr {
    let masks: Vec<Vec<bool>> = Region::ALL.iter().map(|&r| sample.mask(r)).collect();
    maps.iter()
        .map(|m| {
            let mut row = [None; 3];
            for (slot, mask) in row.iter_mut().zip(&masks) {
                *slot = hgr(m, mask, threshold).ok();
            }
            row
        })
        .collect()
}

/// Averages per-image values in image order, skipping undefined entries.
fn reduce(kind: AxisKind, axis_values: &[usize], per_image: &[ImageHgr], images: Vec<usize>, cfg: &AnalysisConfig) -> HgrReport {
    let mut rows = Vec::with_capacity(axis_values.len() * 3);
    for (a, &axis_value) in axis_values.iter().enumerate() {
        for (ri, region) in Region::ALL.iter().enumerate() {
            let mut sum = 0.0;
            let mut n = 0;
            for img in per_image {
                if let Some(v) = img[a][ri] {
                    sum += v;
                    n += 1;
                }
            }
            rows.push(HgrRow {
                axis_value,
                region: region.name().to_string(),
                hgr: if n == 0 { f64::NAN } else { sum / n as f64 },
                n_images: n,
            });
        }
    }
    HgrReport {
        axis_kind: kind,
        threshold: cfg.threshold,
        norm: cfg.norm,
        images,
        rows,
    }
}

/// The first `n_images` marked samples among `candidates`.
pub fn select_marked(ds: &ToyDataset, candidates: &[usize], n_images: usize) -> Result<Vec<usize>> {
    if n_images == 0 {
        return Err(Error::Validation("n_images must be at least 1".into()));
    }
    let picked: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| ds.samples[i].is_marked())
        .take(n_images)
        .collect();
    if picked.len() < n_images {
        return Err(Error::Size(format!(
            "need {n_images} marked samples, found {} (short by {})",
            picked.len(),
            n_images - picked.len()
        )));
    }
    Ok(picked)
}

/// Mean HGR per layer `1..=6` and region over the first `cfg.n_images`
/// marked candidates.
pub fn hgr_by_layer(
    params: &ModelParams,
    ds: &ToyDataset,
    candidates: &[usize],
    cfg: &AnalysisConfig,
    jobs: usize,
) -> Result<HgrReport> {
    cfg.validate()?;
    let images = select_marked(ds, candidates, cfg.n_images)?;
    let per_image = par_map(&images, jobs, |&i| {
        let s = &ds.samples[i];
        let g = gradient_maps(params, &s.tensor(), s.class, cfg.norm)?;
        Ok(image_hgr(&g.maps, s, cfg.threshold))
    })?;
    let axis: Vec<usize> = (1..=NUM_MAPS).collect();
    Ok(reduce(AxisKind::Layer, &axis, &per_image, images, cfg))
}

/// Runs RIB on each image and tracks HGR of `G_6` at every `θ_k`. The
/// adaptations are returned alongside so their maps can be scored.
pub fn hgr_by_rib_iteration(
    theta0: &ModelParams,
    ds: &ToyDataset,
    images: &[usize],
    cfg: &RibConfig,
    loss: AdaptLoss,
    analysis: &AnalysisConfig,
    jobs: usize,
) -> Result<(HgrReport, Vec<Adaptation>)> {
    analysis.validate()?;
    if images.is_empty() {
        return Err(Error::Size("no images to adapt".into()));
    }
    let results = par_map(images, jobs, |&i| {
        let s = &ds.samples[i];
        let x = s.tensor();
        let mut g6 = Vec::with_capacity(cfg.k + 1);
        let adaptation = rib::adapt_with(i, theta0, ds, cfg, loss, |_, theta| {
            let raw = raw_input_gradients(theta, &x, s.class, &[1, NUM_MAPS])?;
            g6.push(normalized(raw, analysis.norm)?.maps.pop().unwrap());
            Ok(())
        })?;
        Ok((image_hgr(&g6, s, analysis.threshold), adaptation))
    })?;
    let (per_image, adaptations): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let axis: Vec<usize> = (0..=cfg.k).collect();
    Ok((
        reduce(AxisKind::Iteration, &axis, &per_image, images.to_vec(), analysis),
        adaptations,
    ))
}
