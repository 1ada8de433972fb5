//! Central finite-difference checks of hand-derived gradients.
//!
//! The numeric derivative is the central difference at step `eps`, refined
//! once by Richardson extrapolation with step `eps / 2`:
//! `(4 D(eps/2) - D(eps)) / 3`. This cancels the `O(eps^2)` truncation term
//! that otherwise dominates on sharply curved losses such as InfoNCE at a
//! low temperature.

use crate::model::{Gradients, SelectorModel};

/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn richardson(d_full: f64, d_half: f64) -> f64 {
    (4.0 * d_half - d_full) / 3.0
}

/// Compares `analytic` with the numeric derivative for every parameter
/// scalar. `objective` returns the loss and the activation pattern;
/// coordinates whose perturbation changes the pattern are skipped.
pub fn check_model<F>(model: &SelectorModel, analytic: &Gradients, eps: f64, mut objective: F) -> GradCheck
where
    F: FnMut(&SelectorModel) -> (f64, Vec<bool>),
{
    let (_, base_pattern) = objective(model);
    let mut probe = model.clone();
    let mut out = GradCheck::default();
    for t in 0..model.params.tensors.len() {
        for k in 0..model.params.tensors[t].data.len() {
            let orig = model.params.tensors[t].data[k];
            let mut at = |h: f64| {
                probe.params.tensors[t].data[k] = orig + h;
                objective(&probe)
            };
            let evals = [at(eps), at(-eps), at(eps / 2.0), at(-eps / 2.0)];
            probe.params.tensors[t].data[k] = orig;
            if evals.iter().any(|(_, p)| *p != base_pattern) {
                out.skipped += 1;
                continue;
            }
            let numeric = richardson(
                (evals[0].0 - evals[1].0) / (2.0 * eps),
                (evals[2].0 - evals[3].0) / eps,
            );
            let err = relative_error(analytic.tensors[t].data[k], numeric);
            out.max_rel_error = out.max_rel_error.max(err);
            out.checked += 1;
        }
    }
    out
}

/// Same check for a function of a plain vector.
pub fn check_vector<F>(x: &[f64], analytic: &[f64], eps: f64, mut f: F) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut out = GradCheck::default();
    for k in 0..x.len() {
        let mut at = |h: f64| {
            probe[k] = x[k] + h;
            f(&probe)
        };
        let d_full = (at(eps) - at(-eps)) / (2.0 * eps);
        let d_half = (at(eps / 2.0) - at(-eps / 2.0)) / eps;
        probe[k] = x[k];
        let numeric = richardson(d_full, d_half);
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic[k], numeric));
        out.checked += 1;
    }
    out
}
