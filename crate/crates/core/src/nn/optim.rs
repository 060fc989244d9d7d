use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{QarvError, Result};

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(QarvError::NonFinite(format!("gradient of {}", p.name)));
        }
        assert_eq!(
            self.first_moment.len(),
            store.len(),
            "optimizer/model mismatch"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, m), v) in store
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.f64();
                let mn = b1 * m.f64() + (1.0 - b1) * g;
                let vn = b2 * v.f64() + (1.0 - b2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let update = self.lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *x = T::of(x.f64() - update);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients jointly when their global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm > max_norm {
        let factor = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.scale_assign(factor);
        }
    }
    norm
}

/// Exponential moving average of parameter values.
#[derive(Clone, Debug)]
pub struct EmaState<T> {
    pub decay: f64,
    pub shadow: Vec<Tensor<T>>,
}

impl<T: Real> EmaState<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "EMA decay must be in (0, 1)");
        EmaState {
            decay,
            shadow: store.iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(store.iter()) {
            for (sv, &v) in s.data_mut().iter_mut().zip(p.value.data()) {
                *sv = T::of(d * sv.f64() + (1.0 - d) * v.f64());
            }
        }
    }

    /// Copy of `store` with values replaced by the shadows.
    pub fn apply_to(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        for (p, s) in out.iter_mut().zip(&self.shadow) {
            p.value = s.clone();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.register("p", Tensor::scalar(value));
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = single(1.5, 0.0);
        let mut adam = AdamState::new(&s, 2e-4);
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 1.5);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_three_step_trajectory() {
        // Hand-rolled recurrence with lr = 0.1, gradients 1.0, -2.0, 0.5.
        let lr = 0.1;
        let grads = [1.0, -2.0, 0.5];
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0f64);
        let mut expected = Vec::new();
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
            expected.push(x);
        }
        // First step of Adam moves by exactly lr (up to eps).
        assert!((expected[0] - 0.9).abs() < 1e-7);

        let mut s = single(1.0, 0.0);
        let mut adam = AdamState::new(&s, lr);
        for (&g, &want) in grads.iter().zip(&expected) {
            s.iter_mut().next().unwrap().grad = Tensor::scalar(g);
            adam.step(&mut s).unwrap();
            assert!((s.iter().next().unwrap().value.item() - want).abs() < 1e-15);
        }
        assert_eq!(adam.step_count, 3);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut s = single(1.0, f64::NAN);
        let mut adam = AdamState::new(&s, 0.1);
        assert!(matches!(adam.step(&mut s), Err(QarvError::NonFinite(_))));
        assert_eq!(adam.step_count, 0);
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
    }

    #[test]
    fn clipping_halves_gradients_at_twice_the_limit() {
        let mut s = ParamStore::<f64>::new();
        let a = s.register("a", Tensor::zeros(&[2]));
        let b = s.register("b", Tensor::zeros(&[1]));
        // norm = sqrt(2² + 2² + (2√2)²) = 4
        s.get_mut(a).grad = Tensor::from_f64(&[2], &[2.0, 2.0]).unwrap();
        s.get_mut(b).grad = Tensor::from_f64(&[1], &[2.0 * 2f64.sqrt()]).unwrap();
        let norm = clip_global_norm(&mut s, 2.0);
        assert!((norm - 4.0).abs() < 1e-12);
        assert_eq!(s.get(a).grad.data(), &[1.0, 1.0]);
        assert!((s.get(b).grad.item() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn clipping_below_limit_is_noop() {
        let mut s = single(0.0, 1.0);
        clip_global_norm(&mut s, 2.0);
        assert_eq!(s.iter().next().unwrap().grad.item(), 1.0);
    }

    #[test]
    fn ema_update_rule() {
        let mut s = single(0.0, 0.0);
        let mut ema = EmaState::new(&s, 0.9);
        s.iter_mut().next().unwrap().value = Tensor::scalar(1.0);
        ema.update(&s);
        assert!((ema.shadow[0].item() - 0.1).abs() < 1e-15);
        ema.update(&s);
        assert!((ema.shadow[0].item() - 0.19).abs() < 1e-15);
    }
}
