//! Rate-distortion objectives.

use rand::Rng;

use super::lambda::LambdaSchedule;
use crate::error::{QarvError, Result};
use crate::model::Network;
use crate::nn::{Real, Tape, Tensor, Var};

/// Loss together with its per-item parts.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    /// Total rate in nats over all latents, shape [N].
    pub rate_nats: Var,
    /// Pre-clamp mean squared error, shape [N].
    pub mse: Var,
    /// Pixels per image (H·W).
    pub pixels: usize,
}

/// mean_b( Σ_i rate_{b,i} / pixels + λ_b · MSE_b ).
pub fn rd_objective<T: Real>(
    tape: &mut Tape<'_, T>,
    rates: &[Var],
    x_hat: Var,
    x: Var,
    lambdas: &[f64],
) -> Result<LossParts> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if lambdas.len() != n || rates.is_empty() {
        return Err(QarvError::InvalidArgument(format!(
            "{} lambdas and {} rate terms for a batch of {n}",
            lambdas.len(),
            rates.len()
        )));
    }
    let pixels = h * w;
    let mut rate = rates[0];
    for &r in &rates[1..] {
        rate = tape.add(rate, r)?;
    }
    let rate_pp = tape.scale(rate, 1.0 / pixels as f64);
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff);
    let sse = tape.sum_per_item(sq)?;
    let mse = tape.scale(sse, 1.0 / (c * pixels) as f64);
    let lam = tape.constant(Tensor::from_f64(&[n], lambdas)?);
    let distortion = tape.mul(mse, lam)?;
    let per_item = tape.add(rate_pp, distortion)?;
    let loss = tape.mean(per_item);
    tape.check_finite(loss, "loss")?;
    Ok(LossParts {
        loss,
        rate_nats: rate,
        mse,
        pixels,
    })
}

/// Objective at one fixed λ for the whole batch.
pub fn loss_fixed<T: Real>(
    net: &Network,
    tape: &mut Tape<'_, T>,
    x: Var,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<LossParts> {
    let n = tape.value(x).dims4()?.0;
    let lambdas = vec![lambda; n];
    let out = net.forward_train(tape, x, &lambdas, rng)?;
    rd_objective(tape, &out.rates, out.x_hat(), x, &lambdas)
}

/// Objective with one λ drawn from `schedule` per batch item; the sampled
/// values are returned alongside.
pub fn loss_variable<T: Real>(
    net: &Network,
    tape: &mut Tape<'_, T>,
    x: Var,
    schedule: &LambdaSchedule,
    rng: &mut impl Rng,
) -> Result<(LossParts, Vec<f64>)> {
    let n = tape.value(x).dims4()?.0;
    let lambdas: Vec<f64> = (0..n).map(|_| schedule.sample(rng)).collect();
    let out = net.forward_train(tape, x, &lambdas, rng)?;
    Ok((
        rd_objective(tape, &out.rates, out.x_hat(), x, &lambdas)?,
        lambdas,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Qarv};
    use crate::prob::density::SIGMA_MIN;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap()
        };
        (t(&[2, 3, 4, 4]), t(&[2, 3, 4, 4]), t(&[2, 5]))
    }

    fn evaluate(lambdas: &[f64]) -> (f64, f64, Tensor<f64>) {
        let (x, x_hat, z) = batch();
        let mut tape = Tape::<f64>::detached();
        let xv = tape.constant(x);
        let xh = tape.input(x_hat);
        let zv = tape.constant(z.clone());
        let mean = tape.constant(Tensor::zeros(z.shape()));
        let sigma = tape.constant(Tensor::full(z.shape(), 1.0));
        let r = tape.rate_nats(zv, mean, sigma).unwrap();
        let r = tape.sum_per_item(r).unwrap();
        let parts = rd_objective(&mut tape, &[r, r], xh, xv, lambdas).unwrap();
        let rate_term = tape.value(parts.rate_nats).data().iter().sum::<f64>() / 2.0 / 16.0;
        let grads = tape.backward(parts.loss).unwrap();
        (
            tape.value(parts.loss).item(),
            rate_term,
            grads.wrt(xh).unwrap().clone(),
        )
    }

    #[test]
    fn zero_lambda_leaves_only_rate() {
        let (loss, rate, g) = evaluate(&[0.0, 0.0]);
        assert!((loss - rate).abs() < 1e-12);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distortion_term_is_linear_in_lambda() {
        let (l1, rate, _) = evaluate(&[100.0, 40.0]);
        let (l2, _, _) = evaluate(&[200.0, 80.0]);
        assert!(((l2 - rate) - 2.0 * (l1 - rate)).abs() < 1e-10);
    }

    #[test]
    fn perfect_reconstruction_and_tight_prior_cost_nothing() {
        let (x, _, z) = batch();
        let mut tape = Tape::<f64>::detached();
        let xv = tape.constant(x.clone());
        let xh = tape.constant(x);
        let zv = tape.constant(z.clone());
        let sigma = tape.constant(Tensor::full(z.shape(), SIGMA_MIN));
        let r = tape.rate_nats(zv, zv, sigma).unwrap();
        let r = tape.sum_per_item(r).unwrap();
        let parts = rd_objective(&mut tape, &[r], xh, xv, &[2048.0, 16.0]).unwrap();
        assert!(tape.value(parts.loss).item() < 1e-12);
    }

    #[test]
    fn variable_loss_samples_one_lambda_per_item() {
        let model = Qarv::<f64>::new(&ModelConfig::tiny(), 0).unwrap();
        let schedule = LambdaSchedule::new(16.0, 2048.0, Default::default()).unwrap();
        let mut tape = Tape::inference(&model.store);
        let x = tape.constant(Tensor::full(&[3, 3, 16, 16], 0.5));
        let (parts, lambdas) = loss_variable(
            &model.net,
            &mut tape,
            x,
            &schedule,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(lambdas.len(), 3);
        assert!(lambdas.windows(2).all(|w| w[0] != w[1]));
        assert!(tape.value(parts.loss).item().is_finite());
    }
}
