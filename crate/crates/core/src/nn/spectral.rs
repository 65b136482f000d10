//! Spectral normalization via power iteration.
//!
//! The weight is viewed as a `(out, rest)` matrix. While gradients are
//! enabled each call advances the persistent left vector `u` by `iterations`
//! power steps and divides the weight by the estimated largest singular
//! value `σ̂ = uᵀ W v`; σ̂ enters the graph through `sum(W ⊙ u vᵀ)` so the
//! scaling itself is differentiated.

use crate::tensor::{grad_enabled, Tensor};
use crate::{rng, sc, Scalar};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

const SIGMA_FLOOR: f64 = 1e-12;

pub struct SpectralState<S: Scalar> {
    u: RefCell<Vec<S>>,
    pub iterations: usize,
}

fn normalize_into<S: Scalar>(v: &mut [S]) {
    let norm = super::matmul::dot(v, v).sqrt().max(sc::<S>(1e-20));
    for x in v.iter_mut() {
        *x /= norm;
    }
}

impl<S: Scalar> SpectralState<S> {
    /// Random unit start vector of length `out_features`.
    pub fn new(out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u: Vec<S> = (0..out_features).map(|_| rng::normal(rng, 0.0, 1.0)).collect();
        normalize_into(&mut u);
        SpectralState {
            u: RefCell::new(u),
            iterations: 1,
        }
    }

    pub fn u_vec(&self) -> Vec<S> {
        self.u.borrow().clone()
    }

    pub fn set_u(&self, values: &[S]) {
        let mut u = self.u.borrow_mut();
        assert_eq!(u.len(), values.len(), "spectral state length mismatch");
        u.copy_from_slice(values);
    }

    /// Divide `w` by its estimated spectral norm. In gradient mode the
    /// persistent `u` advances first (warm start); in inference mode the
    /// stored `u` is used as-is so outputs do not depend on call history.
    pub fn normalize(&self, w: &Tensor<S>) -> Tensor<S> {
        let shape = w.shape();
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        assert_eq!(self.u.borrow().len(), rows, "spectral u/rows mismatch");

        let (u, v) = {
            let wd = w.data();
            let mat = |i: usize| &wd[i * cols..(i + 1) * cols];
            let mut u = self.u.borrow().clone();
            let mut v = vec![S::zero(); cols];
            let steps = if grad_enabled() { self.iterations } else { 1 };
            for _ in 0..steps {
                v.fill(S::zero());
                for (i, &ui) in u.iter().enumerate() {
                    for (vj, &wij) in v.iter_mut().zip(mat(i)) {
                        *vj += ui * wij;
                    }
                }
                normalize_into(&mut v);
                if grad_enabled() {
                    for (i, ui) in u.iter_mut().enumerate() {
                        *ui = super::matmul::dot(mat(i), &v);
                    }
                    normalize_into(&mut u);
                }
            }
            if grad_enabled() {
                self.u.borrow_mut().copy_from_slice(&u);
            }
            (u, v)
        };

        // σ̂ = uᵀ W v = sum(W ⊙ u vᵀ), expressed in-graph so the division is
        // differentiated through both W occurrences.
        let mut outer = vec![S::zero(); rows * cols];
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                outer[i * cols + j] = ui * vj;
            }
        }
        let outer_t = Tensor::from_vec(&shape, outer);
        let sigma = w.mul(&outer_t).sum_all().clamp_min(SIGMA_FLOOR);
        let ones_rank: Vec<usize> = vec![1; shape.len()];
        w.div(&sigma.reshape(&ones_rank).broadcast_to(&shape))
    }
}
