use super::ModelParams;
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v = momentum * v + g`, `theta -= lr * v`.
///
/// With `momentum == 0` the update is exactly `theta - lr * g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: None,
        }
    }

    /// Applies one update in place. `grads` follows [`ModelParams::tensors`] order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<&[f64]>]) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::Usage(format!(
                "sgd_step: expected {} gradient slots, got {}",
                tensors.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(Option::is_none) {
            return Err(Error::Usage(format!("sgd_step: gradient {i} is missing")));
        }
        for (t, g) in tensors.iter().zip(grads) {
            if t.numel() != g.unwrap().len() {
                return Err(Error::dim("sgd_step", "gradient length", t.numel(), g.unwrap().len()));
            }
        }
        if self.momentum == 0.0 {
            for (t, g) in tensors.iter_mut().zip(grads) {
                for (p, &gi) in t.data_mut().iter_mut().zip(g.unwrap()) {
                    *p -= self.lr * gi;
                }
            }
            return Ok(());
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| tensors.iter().map(|t| vec![0.0; t.numel()]).collect());
        for ((t, g), v) in tensors.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            for ((p, &gi), vi) in t.data_mut().iter_mut().zip(g.unwrap()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
