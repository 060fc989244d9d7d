//! Central finite-difference gradient checking (64-bit).
//!
//! Numeric gradients here only ever evaluate forward values, so they stay
//! independent of the backward rules they verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂), or the absolute difference norm when both
/// vectors are below `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` along the listed coordinates.
pub fn numeric_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Checks an op (or composite) built on explicit inputs.
///
/// The scalar objective is Σ out ⊙ R for a fixed random R, so every output
/// element contributes. Returns the worst relative error over inputs.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
    seed: u64,
) -> Result<f64> {
    let objective = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::<f64>::detached();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(out).to_vec();
        let weights: Vec<f64> = (0..tape.value(out).numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let r = tape.constant(Tensor::new(shape, weights)?);
        let prod = tape.mul(out, r)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = objective(inputs, true)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = (0..input.numel()).collect();
        let numeric = numeric_grad(
            |x| {
                let mut probe = inputs.to_vec();
                probe[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).expect("shape");
                objective(&probe, false).expect("forward").0
            },
            input.data(),
            &coords,
            DEFAULT_STEP,
        );
        worst = worst.max(relative_error(analytic[k].data(), &numeric));
    }
    Ok(worst)
}

/// Analytic and numeric gradients of a sampled parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl ParamGrads {
    pub fn relative_error(&self) -> f64 {
        relative_error(&self.analytic, &self.numeric)
    }
}

/// Relative error over the concatenation of every sampled coordinate.
///
/// Tensors whose true gradient vanishes (e.g. a shift removed by a later
/// normalization) are still compared against the scale of the whole gradient.
pub fn joint_relative_error(grads: &[ParamGrads]) -> f64 {
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.analytic.iter().copied())
        .collect();
    let numeric: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.numeric.iter().copied())
        .collect();
    relative_error(&analytic, &numeric)
}

/// Analytic vs numeric gradients of `loss` for a sample of up to
/// `per_param` coordinates of every parameter tensor.
///
/// `loss_fn` must be deterministic in the store (fix any noise).
pub fn sample_param_grads(
    store: &ParamStore<f64>,
    loss_fn: impl Fn(&ParamStore<f64>, bool) -> Result<(f64, Option<ParamStore<f64>>)>,
    per_param: usize,
    seed: u64,
) -> Result<Vec<ParamGrads>> {
    let (_, with_grads) = loss_fn(store, true)?;
    let with_grads = with_grads.expect("loss_fn must return gradients when asked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();
    for id in store.ids() {
        let p = store.get(id);
        let n = p.value.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&i| with_grads.get(id).grad.data()[i])
            .collect();
        let mut probe_store = store.clone();
        let numeric = numeric_grad(
            |x| {
                probe_store.get_mut(id).value.data_mut().copy_from_slice(x);
                loss_fn(&probe_store, false).expect("forward").0
            },
            p.value.data(),
            &coords,
            DEFAULT_STEP,
        );
        report.push(ParamGrads {
            name: p.name.clone(),
            analytic,
            numeric,
        });
    }
    Ok(report)
}

/// Per-parameter relative errors; see [`sample_param_grads`].
pub fn check_params(
    store: &ParamStore<f64>,
    loss_fn: impl Fn(&ParamStore<f64>, bool) -> Result<(f64, Option<ParamStore<f64>>)>,
    per_param: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    Ok(sample_param_grads(store, loss_fn, per_param, seed)?
        .into_iter()
        .map(|g| {
            let e = g.relative_error();
            (g.name, e)
        })
        .collect())
}
