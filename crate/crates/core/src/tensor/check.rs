//! Central finite-difference verification of analytic gradients.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::{sc, Scalar};

/// Worst observed disagreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry<S: Scalar> {
    pub name: String,
    pub max_rel_err: S,
    pub worst_index: usize,
    pub analytic: S,
    pub numeric: S,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<S: Scalar> {
    pub entries: Vec<GradCheckEntry<S>>,
    pub tol: S,
}

impl<S: Scalar> GradCheckReport<S> {
    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn max_rel_err(&self) -> S {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(S::zero(), |a, b| a.max(b))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry<S>> {
        self.entries.iter().filter(|e| !e.ok)
    }
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences `(f(θ+ε) − f(θ−ε)) / 2ε`, one perturbed entry at a
/// time.
///
/// `f` must be deterministic and rebuild its graph on every call; `params`
/// are the leaves it reads. Relative error uses a denominator floored at
/// `1e-3` so near-zero gradients are judged on an absolute scale. Entries
/// whose error exceeds `tol` are flagged in the report.
pub fn finite_diff_check<S: Scalar>(
    f: &mut dyn FnMut() -> Tensor<S>,
    params: &[(String, Tensor<S>)],
    epsilon: S,
    tol: S,
) -> Result<GradCheckReport<S>> {
    let denom_floor = sc::<S>(1e-3);

    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f();
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(Error::Train(format!(
            "finite_diff_check: non-finite loss {loss_value}"
        )));
    }
    loss.backward();
    let analytic: Vec<Vec<S>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![S::zero(); p.numel()]))
        .collect();

    let two_eps = epsilon + epsilon;
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, p)) in params.iter().enumerate() {
        let original = p.to_vec();
        let mut max_rel = S::zero();
        let mut worst = (0usize, S::zero(), S::zero());
        for i in 0..original.len() {
            let mut bumped = original.clone();
            bumped[i] = original[i] + epsilon;
            p.set_data(&bumped);
            let up = no_grad(|| f().item());
            bumped[i] = original[i] - epsilon;
            p.set_data(&bumped);
            let down = no_grad(|| f().item());
            p.set_data(&original);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Train(format!(
                    "finite_diff_check: non-finite loss while perturbing {name}[{i}]"
                )));
            }
            let numeric = (up - down) / two_eps;
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(denom_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = (i, a, numeric);
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            worst_index: worst.0,
            analytic: worst.1,
            numeric: worst.2,
            ok: max_rel < tol,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
