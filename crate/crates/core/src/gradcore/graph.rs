//! Tape of recorded operations and the reverse sweep over it.

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh01,
    Softsign01,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh01 => 0.5 * (z.tanh() + 1.0),
            Activation::Softsign01 => 0.5 * (z / (1.0 + z.abs()) + 1.0),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
            Activation::Tanh01 => {
                let t = z.tanh();
                0.5 * (1.0 - t * t)
            }
            Activation::Softsign01 => {
                let d = 1.0 + z.abs();
                0.5 / (d * d)
            }
        }
    }
}

/// Output nonlinearity used to turn logits into probabilities for BCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbKind {
    Sigmoid,
    Tanh01,
    Softsign01,
}

impl ProbKind {
    pub const ALL: [ProbKind; 3] = [ProbKind::Sigmoid, ProbKind::Tanh01, ProbKind::Softsign01];

    pub fn activation(self) -> Activation {
        match self {
            ProbKind::Sigmoid => Activation::Sigmoid,
            ProbKind::Tanh01 => Activation::Tanh01,
            ProbKind::Softsign01 => Activation::Softsign01,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbKind::Sigmoid => "sigmoid",
            ProbKind::Tanh01 => "tanh01",
            ProbKind::Softsign01 => "softsign01",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Act {
        kind: Activation,
        input: Var,
    },
    Gap {
        input: Var,
    },
    /// Per-sample mean over a subset of spatial locations (shared by all channels).
    MaskedMean {
        input: Var,
        selected: Vec<Vec<usize>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Bce {
        logits: Var,
        labels: Vec<f64>,
        kind: ProbKind,
    },
    Rib {
        logits: Var,
        labels: Vec<f64>,
        margin: f64,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Act { .. } => "activation",
            Op::Gap { .. } => "gap",
            Op::MaskedMean { .. } => "gndrp",
            Op::Linear { .. } => "linear",
            Op::Bce { .. } => "bce_loss",
            Op::Rib { .. } => "rib_loss",
            Op::Sum { .. } => "sum",
            Op::SumSquares { .. } => "sum_squares",
            Op::Dot { .. } => "dot",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Act { input, .. }
            | Op::Gap { input }
            | Op::MaskedMean { input, .. }
            | Op::Sum { input }
            | Op::SumSquares { input }
            | Op::Dot { input, .. } => vec![*input],
            Op::Bce { logits, .. } | Op::Rib { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Result of a GNDRP pooling call.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub var: Var,
    /// Per sample: true when `U_tau` was empty and the argmin fallback was used.
    pub fallback: Vec<bool>,
}

/// Locations whose CAM score is at most `tau`.
///
/// When no location qualifies, the locations attaining the minimum score are
/// returned instead and the flag is set.
pub fn gndrp_selection(cam: &[f64], tau: f64) -> (Vec<usize>, bool) {
    let selected: Vec<usize> = (0..cam.len()).filter(|&u| cam[u] <= tau).collect();
    if !selected.is_empty() {
        return (selected, false);
    }
    let min = cam.iter().copied().fold(f64::INFINITY, f64::min);
    ((0..cam.len()).filter(|&u| cam[u] == min).collect(), true)
}

fn check_labels(op: &'static str, logits: &Tensor, labels: &Tensor) -> Result<()> {
    logits.expect_rank(op, 2)?;
    if labels.shape() != logits.shape() {
        return Err(Error::dim(op, "labels", logits.numel(), labels.numel()));
    }
    if let Some(bad) = labels.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Validation(format!(
            "{op}: labels must be 0 or 1, found {bad}"
        )));
    }
    Ok(())
}

/// Append-only tape. Nodes are stored in creation order, so every node's
/// inputs precede it and the reverse sweep is a single backward scan.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_tensor(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                index,
                context: format!("forward {}", op.name()),
            });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        x.expect_rank("conv2d", 4)?;
        k.expect_rank("conv2d", 4)?;
        b.expect_rank("conv2d", 1)?;
        let &[n, c, h, w] = x.shape() else {
            unreachable!()
        };
        let f = k.shape()[0];
        if k.shape()[1] != c {
            return Err(Error::dim("conv2d", "kernel in-channels", c, k.shape()[1]));
        }
        if k.shape()[2] != 3 {
            return Err(Error::dim("conv2d", "kernel height", 3, k.shape()[2]));
        }
        if k.shape()[3] != 3 {
            return Err(Error::dim("conv2d", "kernel width", 3, k.shape()[3]));
        }
        if b.shape()[0] != f {
            return Err(Error::dim("conv2d", "bias", f, b.shape()[0]));
        }
        let dims = ConvDims { n, c, f, h, w };
        let out = conv::forward(&dims, x.data(), k.data(), b.data());
        let value = Tensor::new([n, f, h, w], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
        )
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<f64> = x.data().iter().map(|&z| kind.apply(z)).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(value, Op::Act { kind, input })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(Activation::Relu, input)
    }

    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("gap", 4)?;
        let &[n, f, h, w] = x.shape() else {
            unreachable!()
        };
        let hw = (h * w) as f64;
        let out: Vec<f64> = x
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        self.push(Tensor::new([n, f], out)?, Op::Gap { input })
    }

    /// Global non-discriminative region pooling: per sample, average each
    /// channel over the locations where `cam[n]` is at most `tau`.
    ///
    /// `cam` is `[N, H, W]` and is treated as a constant.
    pub fn gndrp(&mut self, input: Var, cam: &Tensor, tau: f64) -> Result<Pooled> {
        let x = self.value(input);
        x.expect_rank("gndrp", 4)?;
        cam.expect_rank("gndrp", 3)?;
        let &[n, _, h, w] = x.shape() else {
            unreachable!()
        };
        for (axis, (want, got)) in ["N", "H", "W"]
            .iter()
            .zip([n, h, w].into_iter().zip(cam.shape().iter().copied()))
        {
            if want != got {
                return Err(Error::dim("gndrp", format!("cam {axis}"), want, got));
            }
        }
        let mut selected = Vec::with_capacity(n);
        let mut fallback = Vec::with_capacity(n);
        for plane in cam.data().chunks_exact(h * w) {
            let (sel, fb) = gndrp_selection(plane, tau);
            selected.push(sel);
            fallback.push(fb);
        }
        let var = self.masked_mean(input, selected)?;
        Ok(Pooled { var, fallback })
    }

    /// Per-sample spatial mean over explicit location sets (one set per sample).
    pub fn masked_mean(&mut self, input: Var, selected: Vec<Vec<usize>>) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("gndrp", 4)?;
        let &[n, f, h, w] = x.shape() else {
            unreachable!()
        };
        if selected.len() != n {
            return Err(Error::dim("gndrp", "selection sets", n, selected.len()));
        }
        let hw = h * w;
        let mut out = vec![0.0; n * f];
        for (s, sel) in selected.iter().enumerate() {
            if sel.is_empty() || sel.iter().any(|&u| u >= hw) {
                return Err(Error::Validation(format!(
                    "gndrp: selection set for sample {s} is empty or out of range"
                )));
            }
            let count = sel.len() as f64;
            for fi in 0..f {
                let plane = &x.data()[(s * f + fi) * hw..][..hw];
                out[s * f + fi] = sel.iter().map(|&u| plane[u]).sum::<f64>() / count;
            }
        }
        self.push(
            Tensor::new([n, f], out)?,
            Op::MaskedMean { input, selected },
        )
    }

    /// `input [N, F] · weightᵀ [F, C] + bias [C]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        x.expect_rank("linear", 2)?;
        wt.expect_rank("linear", 2)?;
        b.expect_rank("linear", 1)?;
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let c = wt.shape()[0];
        if wt.shape()[1] != f {
            return Err(Error::dim("linear", "weight in-features", f, wt.shape()[1]));
        }
        if b.shape()[0] != c {
            return Err(Error::dim("linear", "bias", c, b.shape()[0]));
        }
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let row = &x.data()[s * f..(s + 1) * f];
            for ci in 0..c {
                let wrow = &wt.data()[ci * f..(ci + 1) * f];
                out[s * c + ci] =
                    row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>() + b.data()[ci];
            }
        }
        self.push(
            Tensor::new([n, c], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// Mean over the batch of the per-sample binary cross-entropy summed over classes.
    pub fn bce_loss(&mut self, logits: Var, labels: &Tensor, kind: ProbKind) -> Result<Var> {
        let y = self.value(logits);
        check_labels("bce_loss", y, labels)?;
        let n = y.shape()[0] as f64;
        let act = kind.activation();
        let total: f64 = y
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&z, &t)| {
                let p = act.apply(z).clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                logits,
                labels: labels.data().to_vec(),
                kind,
            },
        )
    }

    /// Mean over the batch of `-Σ_c t_c · min(margin, y_c)`.
    pub fn rib_loss(&mut self, logits: Var, labels: &Tensor, margin: f64) -> Result<Var> {
        if margin.is_nan() || margin <= 0.0 {
            return Err(Error::Validation(format!(
                "rib_loss: margin must be positive, got {margin}"
            )));
        }
        let y = self.value(logits);
        check_labels("rib_loss", y, labels)?;
        let n = y.shape()[0] as f64;
        let total: f64 = y
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&z, &t)| if t == 0.0 { 0.0 } else { -t * z.min(margin) })
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::Rib {
                logits,
                labels: labels.data().to_vec(),
                margin,
            },
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { input })
    }

    /// Inner product with a constant weight vector of matching length.
    pub fn dot(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.numel() {
            return Err(Error::dim("dot", "weights", x.numel(), weights.len()));
        }
        let s = x.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(
            Tensor::scalar(s),
            Op::Dot {
                input,
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar node. Gradients of `requires_grad` leaves
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let Some(node) = self.nodes.get(root.0) else {
            return Err(Error::Usage(format!(
                "variable {} is not on this tape",
                root.0
            )));
        };
        if matches!(node.op, Op::Leaf) {
            return Err(Error::Usage(
                "backward called on a detached tensor (no recorded operations)".into(),
            ));
        }
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        index,
                        context: format!("gradient of leaf {i}"),
                    });
                }
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.nodes[v.0].value.numel();
        adj[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let &[n, c, h, w] = x.shape() else {
                    unreachable!()
                };
                let dims = ConvDims {
                    n,
                    c,
                    f: k.shape()[0],
                    h,
                    w,
                };
                let mut di = self
                    .wants(*input)
                    .then(|| std::mem::take(self.slot(adj, *input)));
                let mut dk = self
                    .wants(*kernel)
                    .then(|| std::mem::take(self.slot(adj, *kernel)));
                let mut db = self
                    .wants(*bias)
                    .then(|| std::mem::take(self.slot(adj, *bias)));
                conv::backward(
                    &dims,
                    x.data(),
                    k.data(),
                    g,
                    di.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [(input, di), (kernel, dk), (bias, db)] {
                    if let Some(buf) = buf {
                        adj[v.0] = Some(buf);
                    }
                }
            }
            Op::Act { kind, input } => {
                if !self.wants(*input) {
                    return;
                }
                let x = &self.nodes[input.0].value;
                let d = self.slot(adj, *input);
                for ((d, &z), &gi) in d.iter_mut().zip(x.data()).zip(g) {
                    *d += gi * kind.derivative(z);
                }
            }
            Op::Gap { input } => {
                if !self.wants(*input) {
                    return;
                }
                let x = &self.nodes[input.0].value;
                let hw = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / hw as f64;
                let d = self.slot(adj, *input);
                for (plane, &gi) in d.chunks_exact_mut(hw).zip(g) {
                    plane.iter_mut().for_each(|v| *v += gi * inv);
                }
            }
            Op::MaskedMean { input, selected } => {
                if !self.wants(*input) {
                    return;
                }
                let x = &self.nodes[input.0].value;
                let f = x.shape()[1];
                let hw = x.shape()[2] * x.shape()[3];
                let d = self.slot(adj, *input);
                for (s, sel) in selected.iter().enumerate() {
                    let inv = 1.0 / sel.len() as f64;
                    for fi in 0..f {
                        let gi = g[s * f + fi] * inv;
                        let plane = &mut d[(s * f + fi) * hw..][..hw];
                        for &u in sel {
                            plane[u] += gi;
                        }
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let wt = &self.nodes[weight.0].value;
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let c = wt.shape()[0];
                if self.wants(*input) {
                    let d = self.slot(adj, *input);
                    for s in 0..n {
                        for ci in 0..c {
                            let gi = g[s * c + ci];
                            let wrow = &wt.data()[ci * f..(ci + 1) * f];
                            d[s * f..(s + 1) * f]
                                .iter_mut()
                                .zip(wrow)
                                .for_each(|(a, b)| *a += gi * b);
                        }
                    }
                }
                if self.wants(*weight) {
                    let d = self.slot(adj, *weight);
                    for s in 0..n {
                        let row = &x.data()[s * f..(s + 1) * f];
                        for ci in 0..c {
                            let gi = g[s * c + ci];
                            d[ci * f..(ci + 1) * f]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(a, b)| *a += gi * b);
                        }
                    }
                }
                if self.wants(*bias) {
                    let d = self.slot(adj, *bias);
                    for s in 0..n {
                        for ci in 0..c {
                            d[ci] += g[s * c + ci];
                        }
                    }
                }
            }
            Op::Bce {
                logits,
                labels,
                kind,
            } => {
                if !self.wants(*logits) {
                    return;
                }
                let y = &self.nodes[logits.0].value;
                let n = y.shape()[0] as f64;
                let act = kind.activation();
                let d = self.slot(adj, *logits);
                for ((d, &z), &t) in d.iter_mut().zip(y.data()).zip(labels) {
                    let p = act.apply(z);
                    // Clamped probabilities carry no gradient.
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                        continue;
                    }
                    let dl_dp = -(t / p - (1.0 - t) / (1.0 - p));
                    *d += g[0] * dl_dp * act.derivative(z) / n;
                }
            }
            Op::Rib {
                logits,
                labels,
                margin,
            } => {
                if !self.wants(*logits) {
                    return;
                }
                let y = &self.nodes[logits.0].value;
                let n = y.shape()[0] as f64;
                let d = self.slot(adj, *logits);
                for ((d, &z), &t) in d.iter_mut().zip(y.data()).zip(labels) {
                    // Tie z == margin takes the saturated branch.
                    if t != 0.0 && z < *margin {
                        *d += -g[0] * t / n;
                    }
                }
            }
            Op::Sum { input } => {
                if self.wants(*input) {
                    self.slot(adj, *input).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::SumSquares { input } => {
                if !self.wants(*input) {
                    return;
                }
                let x = &self.nodes[input.0].value;
                let d = self.slot(adj, *input);
                for (d, &v) in d.iter_mut().zip(x.data()) {
                    *d += g[0] * 2.0 * v;
                }
            }
            Op::Dot { input, weights } => {
                if !self.wants(*input) {
                    return;
                }
                let d = self.slot(adj, *input);
                for (d, &wv) in d.iter_mut().zip(weights) {
                    *d += g[0] * wv;
                }
            }
        }
    }
}
