//! Sinusoidal λ embedding followed by a two-layer MLP.

use rand::Rng;

use crate::error::{QarvError, Result};
use crate::nn::layers::Linear;
use crate::nn::{ParamStore, Real, Tape, Tensor, Var};

const OMEGA_MAX: f64 = 1e4;

/// sin(t/ω_k) for k < K followed by cos(t/ω_k), with t = ln λ and ω_k
/// geometric from 1 to 10⁴.
pub fn sinusoidal_features(lambda: f64, pairs: usize) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(QarvError::InvalidArgument(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    let t = lambda.ln();
    let omegas: Vec<f64> = (0..pairs)
        .map(|k| OMEGA_MAX.powf(k as f64 / (pairs - 1).max(1) as f64))
        .collect();
    let mut out: Vec<f64> = omegas.iter().map(|w| (t / w).sin()).collect();
    out.extend(omegas.iter().map(|w| (t / w).cos()));
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LambdaEmbedding {
    pairs: usize,
    hidden: Linear,
    out: Linear,
}

impl LambdaEmbedding {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        pairs: usize,
        hidden: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LambdaEmbedding {
            pairs,
            hidden: Linear::new(store, "embed.fc1", 2 * pairs, hidden, rng),
            out: Linear::new(store, "embed.fc2", hidden, dim, rng),
        }
    }

    /// e_λ for each item, shape [N, dim].
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, lambdas: &[f64]) -> Result<Var> {
        let mut feats = Vec::with_capacity(lambdas.len() * 2 * self.pairs);
        for &l in lambdas {
            feats.extend(sinusoidal_features(l, self.pairs)?);
        }
        let x = tape.constant(Tensor::from_f64(&[lambdas.len(), 2 * self.pairs], &feats)?);
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, h)
    }
}
