//! Central finite-difference check of the ridge backward pass.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::template::{dot, ridge_backward, solve_ridge, RegressionProblem};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Seeded problem with standard-normal entries: `1 + negatives` rows, `dim`
/// columns, plus an upstream gradient.
pub fn random_problem(dim: usize, negatives: usize, lambda: f64, seed: u64) -> Result<(RegressionProblem, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(1 + negatives, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok((RegressionProblem::from_matrix(a, lambda)?, g))
}

/// Compares [`ridge_backward`] against `(L(A + hE) − L(A − hE)) / 2h` for
/// every entry of `A`, with `L = gᵀ t(A)`. The relative error of an entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn check(problem: &RegressionProblem, upstream: &[f64], step: f64) -> Result<GradcheckReport> {
    let analytic = ridge_backward(problem, upstream)?;
    let loss = |a: DMatrix<f64>| -> Result<f64> {
        let p = RegressionProblem::from_matrix(a, problem.lambda())?;
        Ok(dot(solve_ridge(&p)?.values(), upstream))
    };
    let base = problem.data();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for r in 0..base.nrows() {
        for c in 0..base.ncols() {
            let mut plus = base.clone();
            plus[(r, c)] += step;
            let mut minus = base.clone();
            minus[(r, c)] -= step;
            let numeric = (loss(plus)? - loss(minus)?) / (2.0 * step);
            let a = analytic[(r, c)];
            let err = (a - numeric).abs();
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(GradcheckReport {
        max_relative_error: max_rel,
        max_abs_error: max_abs,
        entries: base.len(),
    })
}
