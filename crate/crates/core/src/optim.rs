//! Adam with bias correction and the polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{sc, Scalar};

/// Adam state for one parameter group. Moment buffers are laid out in the
/// same order as the parameter list handed to [`Adam::step`], which must
/// stay stable across steps.
pub struct Adam<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[(String, Tensor<S>)]) -> Self {
        Adam::with_betas(params, 0.9, 0.99)
    }

    pub fn with_betas(params: &[(String, Tensor<S>)], beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update over the group. Parameters without a
    /// gradient this step are skipped; a non-finite gradient aborts with the
    /// parameter's name.
    pub fn step(&mut self, params: &[(String, Tensor<S>)], lr: f64) -> Result<()> {
        assert!(
            params.len() == self.m.len(),
            "optimizer built for {} parameters, got {}",
            self.m.len(),
            params.len()
        );
        self.t += 1;
        let b1 = sc::<S>(self.beta1);
        let b2 = sc::<S>(self.beta2);
        let one = S::one();
        let corr1 = sc::<S>(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = sc::<S>(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = sc::<S>(lr);
        let eps = sc::<S>(self.eps);

        for (i, (name, p)) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient {bad} in parameter {name}"
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for ((x, g), (mi, vi)) in data.iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * *g;
                *vi = b2 * *vi + (one - b2) * *g * *g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *x = *x - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Polynomial decay: `lr(t) = lr0 · (1 − t/T)^power`, reaching exactly zero
/// at `T` and staying there.
#[derive(Debug, Clone, Copy)]
pub struct PolySchedule {
    pub lr0: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(lr0: f64, total_steps: u64) -> Self {
        PolySchedule {
            lr0,
            total_steps,
            power: 0.9,
        }
    }

    pub fn lr(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return 0.0;
        }
        let frac = 1.0 - t as f64 / self.total_steps as f64;
        self.lr0 * frac.powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn adam_first_step_hand_example() {
        // g = 1, lr = 1e-3: bias correction gives m̂ = v̂ = 1, so the
        // parameter moves by ≈ lr.
        let p = Tensor::<f64>::from_vec(&[1], vec![0.5]).requiring_grad();
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = Adam::new(&params);
        p.accumulate_grad(&[1.0]);
        opt.step(&params, 1e-3).unwrap();
        let moved = 0.5 - p.to_vec()[0];
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter() {
        let p = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).requiring_grad();
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = Adam::new(&params);
        p.accumulate_grad(&[0.0, 0.0]);
        opt.step(&params, 1e-2).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn adam_matches_reference_formula() {
        // Independent reference implementation of the update, 5 random
        // parameter/gradient pairs, three consecutive steps.
        let mut r = rng::stream(9, "adamref");
        for _ in 0..5 {
            let theta0: f64 = r.random_range(-1.0..1.0);
            let p = Tensor::<f64>::from_vec(&[1], vec![theta0]).requiring_grad();
            let params = vec![("p".to_string(), p.clone())];
            let mut opt = Adam::new(&params);

            let (mut m, mut v) = (0.0f64, 0.0f64);
            let (b1, b2, eps, lr) = (0.9f64, 0.99f64, 1e-8f64, 3e-3f64);
            let mut theta = theta0;
            for t in 1..=3u32 {
                let g: f64 = r.random_range(-2.0..2.0);
                p.zero_grad();
                p.accumulate_grad(&[g]);
                opt.step(&params, lr).unwrap();

                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let m_hat = m / (1.0 - b1.powi(t as i32));
                let v_hat = v / (1.0 - b2.powi(t as i32));
                theta -= lr * m_hat / (v_hat.sqrt() + eps);
                assert!(
                    (p.to_vec()[0] - theta).abs() < 1e-7,
                    "step {t}: {} vs {theta}",
                    p.to_vec()[0]
                );
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let p = Tensor::<f32>::from_vec(&[3], vec![0.1, -0.2, 0.3]).requiring_grad();
            let params = vec![("p".to_string(), p.clone())];
            let mut opt = Adam::new(&params);
            for step in 0..10 {
                p.zero_grad();
                let g: Vec<f32> = (0..3).map(|i| (step * 3 + i) as f32 * 0.01 - 0.1).collect();
                p.accumulate_grad(&g);
                opt.step(&params, 1e-3).unwrap();
            }
            p.to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn adam_rejects_nan_gradient_with_name() {
        let p = Tensor::<f32>::from_vec(&[1], vec![0.0]).requiring_grad();
        let params = vec![("m.head.weight".to_string(), p.clone())];
        let mut opt = Adam::new(&params);
        p.accumulate_grad(&[f32::NAN]);
        let err = opt.step(&params, 1e-3).unwrap_err();
        assert!(err.to_string().contains("m.head.weight"), "{err}");
    }

    #[test]
    fn poly_schedule_examples() {
        let s = PolySchedule::new(1e-4, 1_000_000);
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(1_000_000), 0.0);
        assert_eq!(s.lr(2_000_000), 0.0);
        let expect = 1e-4 * 0.5f64.powf(0.9);
        assert!((s.lr(500_000) - expect).abs() < 1e-12);
        assert!((expect - 5.3589e-5).abs() < 1e-9);
    }

    #[test]
    fn poly_schedule_non_increasing_and_exact_zero() {
        let s = PolySchedule::new(2e-4, 1000);
        let mut last = f64::INFINITY;
        for t in 0..=1000 {
            let lr = s.lr(t);
            assert!(lr <= last, "lr must not increase at t={t}");
            last = lr;
        }
        assert_eq!(s.lr(1000), 0.0);
    }
}
