//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is (numerically) zero are judged on absolute agreement.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Upper bound on checked coordinates; every coordinate is checked when
    /// the inputs hold fewer.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.detached())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage("grad_check needs a scalar function".into()));
    }
    Ok((g, vars, out))
}

/// Compares the tape gradient of a scalar function `f` against
/// `(f(x+h) - f(x-h)) / 2h` on sampled input coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::Validation(format!(
            "grad_check: step and tol must be positive (step={}, tol={})",
            opts.step, opts.tol
        )));
    }
    let (mut g, vars, out) = evaluate(&f, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    drop(g);

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut flat: Vec<usize> = if total <= opts.max_samples {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        index::sample(&mut rng, total, opts.max_samples).into_vec()
    };
    flat.sort_unstable();

    let mut work: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    let mut checks = Vec::with_capacity(flat.len());
    for global in flat {
        let input = offsets.partition_point(|&o| o <= global) - 1;
        let index = global - offsets[input];
        let orig = work[input].data()[index];
        let mut probe = |delta: f64| -> Result<f64> {
            work[input].data_mut()[index] = orig + delta;
            let r = evaluate(&f, &work).map(|(g, _, out)| g.value(out).item());
            work[input].data_mut()[index] = orig;
            match r {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(Error::NonFinite {
                    index: global,
                    context: "grad_check perturbed evaluation".into(),
                }),
                Err(Error::NonFinite { .. }) => Err(Error::NonFinite {
                    index: global,
                    context: "grad_check perturbed evaluation".into(),
                }),
                Err(e) => Err(e),
            }
        };
        let plus = probe(opts.step)?;
        let minus = probe(-opts.step)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[input][index];
        checks.push(CoordinateCheck {
            input,
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checks,
        max_rel_error,
        tol: opts.tol,
        passed: max_rel_error <= opts.tol,
    })
}
