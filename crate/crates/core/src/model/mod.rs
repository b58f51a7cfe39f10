//! The toy classifier: five 3×3 ReLU conv layers at full resolution, a pooling
//! stage (GAP or GNDRP) and a linear head, plus class activation maps.

mod checkpoint;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use optim::Sgd;

pub const CONV_WIDTHS: [usize; 5] = [16, 16, 32, 32, 64];
pub const NUM_CLASSES: usize = 2;
pub const IMAGE_SIDE: usize = 28;
pub const NUM_LAYERS: usize = CONV_WIDTHS.len();
pub const FEATURE_DIM: usize = CONV_WIDTHS[NUM_LAYERS - 1];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Classifier parameters: conv stack plus linear head `w` / `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub convs: Vec<ConvLayer>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub seed: u64,
}

impl ModelParams {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: [usize; 4]| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            Tensor::from_fn(shape, |_| normal.sample(&mut rng))
        };
        let mut in_ch = 1;
        let mut convs = Vec::with_capacity(NUM_LAYERS);
        for &out_ch in &CONV_WIDTHS {
            convs.push(ConvLayer {
                kernel: he([out_ch, in_ch, 3, 3]),
                bias: Tensor::zeros([out_ch]),
            });
            in_ch = out_ch;
        }
        let head = he([NUM_CLASSES, FEATURE_DIM, 1, 1]);
        ModelParams {
            convs,
            head_weight: Tensor::new([NUM_CLASSES, FEATURE_DIM], head.into_data()).unwrap(),
            head_bias: Tensor::zeros([NUM_CLASSES]),
            seed,
        }
    }

    /// Every parameter tensor in checkpoint order: `k1, b1, ..., k5, b5, w, bias`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(2 * NUM_LAYERS + 2);
        for l in &self.convs {
            out.push(&l.kernel);
            out.push(&l.bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * NUM_LAYERS + 2);
        for l in &mut self.convs {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Checks the channel chain and head shapes.
    pub fn validate(&self) -> Result<()> {
        if self.convs.len() != NUM_LAYERS {
            return Err(Error::dim("model", "conv layers", NUM_LAYERS, self.convs.len()));
        }
        let mut in_ch = 1;
        for (i, (l, &width)) in self.convs.iter().zip(&CONV_WIDTHS).enumerate() {
            let expected = [width, in_ch, 3, 3];
            for (axis, (&got, want)) in l.kernel.shape().iter().zip(expected).enumerate() {
                if got != want || l.kernel.rank() != 4 {
                    return Err(Error::dim("model", format!("layer {} kernel axis {axis}", i + 1), want, got));
                }
            }
            if l.bias.shape() != [width] {
                return Err(Error::dim("model", format!("layer {} bias", i + 1), width, l.bias.numel()));
            }
            in_ch = width;
        }
        if self.head_weight.shape() != [NUM_CLASSES, FEATURE_DIM] {
            return Err(Error::dim("model", "head weight", NUM_CLASSES * FEATURE_DIM, self.head_weight.numel()));
        }
        if self.head_bias.shape() != [NUM_CLASSES] {
            return Err(Error::dim("model", "head bias", NUM_CLASSES, self.head_bias.numel()));
        }
        Ok(())
    }

    pub fn class_weights(&self, class: usize) -> &[f64] {
        &self.head_weight.data()[class * FEATURE_DIM..(class + 1) * FEATURE_DIM]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Gap,
    Gndrp,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 2] = [PoolingMode::Gndrp, PoolingMode::Gap];

    pub fn name(self) -> &'static str {
        match self {
            PoolingMode::Gap => "gap",
            PoolingMode::Gndrp => "gndrp",
        }
    }
}

/// Pooling stage for a forward pass. GNDRP needs the threshold and, per
/// sample, the class whose CAM selects the pooled locations.
#[derive(Debug, Clone, PartialEq)]
pub enum Pooling {
    Gap,
    Gndrp { tau: f64, classes: Vec<usize> },
}

impl Pooling {
    pub fn mode(&self) -> PoolingMode {
        match self {
            Pooling::Gap => PoolingMode::Gap,
            Pooling::Gndrp { .. } => PoolingMode::Gndrp,
        }
    }
}

/// Which leaves of the forward tape should receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub params: bool,
    pub input: bool,
}

impl GradTargets {
    pub const PARAMS: GradTargets = GradTargets { params: true, input: false };
    pub const INPUT: GradTargets = GradTargets { params: false, input: true };
    pub const NONE: GradTargets = GradTargets { params: false, input: false };
}

/// Tape and handles for one forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub graph: Graph,
    pub input: Var,
    /// Parameter leaves in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
    /// Post-ReLU features `T_1..T_5`.
    pub features: [Var; NUM_LAYERS],
    pub pooled: Var,
    pub logits: Var,
    pub pooling: PoolingMode,
    /// Per sample: GNDRP selection did not use `U_tau` (empty set or degenerate CAM).
    pub fallback: Vec<bool>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    pub fn logit(&self, sample: usize, class: usize) -> f64 {
        self.logits().data()[sample * NUM_CLASSES + class]
    }

    pub fn feature(&self, layer: usize) -> &Tensor {
        self.graph.value(self.features[layer])
    }

    /// Parameter gradients after a backward pass, in [`ModelParams::tensors`] order.
    pub fn param_grads(&self) -> Vec<Option<&[f64]>> {
        self.params.iter().map(|&v| self.graph.grad(v)).collect()
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

/// Raw and max-normalized class activation map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// `w_c · f(x)` at every location of one sample's final feature map.
pub fn raw_cam_from_features(features: &Tensor, sample: usize, class_weights: &[f64]) -> Vec<f64> {
    let &[_, f, h, w] = features.shape() else {
        panic!("final features must be rank 4")
    };
    let hw = h * w;
    let mut raw = vec![0.0; hw];
    let base = &features.data()[sample * f * hw..(sample + 1) * f * hw];
    for (fi, &wf) in class_weights.iter().enumerate() {
        raw.iter_mut()
            .zip(&base[fi * hw..(fi + 1) * hw])
            .for_each(|(r, &v)| *r += wf * v);
    }
    raw
}

/// Divides by the spatial maximum. Fails when the maximum is not positive,
/// since the normalized map would then not peak at 1.
pub fn normalize_cam(raw: &[f64]) -> Result<Vec<f64>> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::DegenerateMap(format!(
            "CAM maximum is {max}; a positive maximum is required"
        )));
    }
    Ok(raw.iter().map(|&v| v / max).collect())
}

fn check_input(x: &Tensor) -> Result<()> {
    x.expect_rank("forward", 4)?;
    let s = x.shape();
    if s[1] != 1 {
        return Err(Error::dim("forward", "input channels", 1, s[1]));
    }
    if s[2] != IMAGE_SIDE {
        return Err(Error::dim("forward", "input height", IMAGE_SIDE, s[2]));
    }
    if s[3] != IMAGE_SIDE {
        return Err(Error::dim("forward", "input width", IMAGE_SIDE, s[3]));
    }
    Ok(())
}

/// Records a forward pass on a fresh tape; logits are raw (no output activation).
pub fn forward(params: &ModelParams, x: &Tensor, pooling: &Pooling, grads: GradTargets) -> Result<ForwardTrace> {
    check_input(x)?;
    let n = x.shape()[0];
    let mut g = Graph::new();
    let input = g.leaf(x.detached().with_requires_grad(grads.input));
    let param_vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| g.leaf(t.detached().with_requires_grad(grads.params)))
        .collect();

    let mut h = input;
    let mut features = [input; NUM_LAYERS];
    for l in 0..NUM_LAYERS {
        let z = g.conv2d(h, param_vars[2 * l], param_vars[2 * l + 1])?;
        h = g.relu(z)?;
        features[l] = h;
    }
    let last = features[NUM_LAYERS - 1];

    let (pooled, fallback) = match pooling {
        Pooling::Gap => (g.gap(last)?, vec![false; n]),
        Pooling::Gndrp { tau, classes } => {
            if classes.len() != n {
                return Err(Error::dim("forward", "gndrp classes", n, classes.len()));
            }
            let feats = g.value(last);
            let hw = feats.shape()[2] * feats.shape()[3];
            let mut selected = Vec::with_capacity(n);
            let mut fallback = Vec::with_capacity(n);
            for (s, &c) in classes.iter().enumerate() {
                if c >= NUM_CLASSES {
                    return Err(Error::Validation(format!("class {c} out of range")));
                }
                let raw = raw_cam_from_features(feats, s, params.class_weights(c));
                match normalize_cam(&raw) {
                    Ok(cam) => {
                        let (sel, fb) = crate::gradcore::gndrp_selection(&cam, *tau);
                        selected.push(sel);
                        fallback.push(fb);
                    }
                    Err(_) => {
                        selected.push((0..hw).collect());
                        fallback.push(true);
                    }
                }
            }
            (g.masked_mean(last, selected)?, fallback)
        }
    };
    let logits = g.linear(pooled, param_vars[2 * NUM_LAYERS], param_vars[2 * NUM_LAYERS + 1])?;
    Ok(ForwardTrace {
        graph: g,
        input,
        params: param_vars,
        features,
        pooled,
        logits,
        pooling: pooling.mode(),
        fallback,
    })
}

/// Class activation map of a single image `[1, 1, H, W]` for `class`.
/// The head bias is not part of the map.
pub fn cam(params: &ModelParams, x: &Tensor, class: usize) -> Result<Cam> {
    if x.shape().first() != Some(&1) {
        return Err(Error::dim("cam", "batch", 1, x.shape().first().copied().unwrap_or(0)));
    }
    if class >= NUM_CLASSES {
        return Err(Error::Validation(format!("class {class} out of range")));
    }
    let trace = forward(params, x, &Pooling::Gap, GradTargets::NONE)?;
    let feats = trace.feature(NUM_LAYERS - 1);
    let raw = raw_cam_from_features(feats, 0, params.class_weights(class));
    let normalized = normalize_cam(&raw)?;
    Ok(Cam {
        raw,
        normalized,
        height: feats.shape()[2],
        width: feats.shape()[3],
    })
}

#[cfg(test)]
mod tests;
