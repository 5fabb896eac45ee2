//! Ground state of `-u'' + V u + β u³ = E u` on the periodic unit interval
//! with `∫u² = 1` and `∫u > 0`, by the normalized gradient flow.

use super::spectral::d2_matrix;
use super::{Problem, ProblemSpec, Solution};
use crate::error::{Error, Result};
use crate::Tensor;
use nalgebra::{DMatrix, DVector};

/// Normalized gradient flow, backward Euler in time.
///
/// Each step solves `(I + τ(-D2 + V + β u²)) w = u` with the cubic
/// coefficient `β u²` frozen at the current iterate, rescales `w` to unit
/// grid norm and flips its sign so that `Σ w > 0`. A fixed point satisfies
/// the discrete eigenproblem exactly. Iteration stops once the max-norm
/// change between steps falls below the configured tolerance.
#[derive(Clone, Debug)]
pub struct NlseSolver {
    spec: ProblemSpec,
    d2: DMatrix<f64>,
    /// `I - τ D2`, to which the diagonal `τ(V + β u²)` is added each step.
    implicit: DMatrix<f64>,
}

impl NlseSolver {
    pub fn new(spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        if spec.problem != Problem::Nlse {
            return Err(Error::config(format!(
                "NLSE solver given a {} spec",
                spec.problem
            )));
        }
        let d2 = d2_matrix(spec.n, spec.length());
        let implicit = DMatrix::identity(spec.n, spec.n) - &d2 * spec.time_step;
        Ok(NlseSolver {
            spec: spec.clone(),
            d2,
            implicit,
        })
    }

    pub fn solve(&self, v: &Tensor<f64>) -> Result<Solution> {
        let spec = &self.spec;
        let n = spec.n;
        if v.len() != n {
            return Err(Error::shape(format!(
                "potential has {} points, grid has {n}",
                v.len()
            )));
        }
        let v = DVector::from_column_slice(v.data());
        let h = spec.spacing();
        let tau = spec.time_step;
        let mut u = DVector::from_element(n, 1.0 / spec.length().sqrt());
        let mut change = f64::INFINITY;
        for _ in 0..spec.max_steps {
            let mut step = self.implicit.clone();
            for i in 0..n {
                step[(i, i)] += tau * (v[i] + spec.beta * u[i] * u[i]);
            }
            let mut w = step
                .cholesky()
                .ok_or_else(|| {
                    Error::numerical(
                        "gradient flow step matrix is not positive definite; reduce the time step",
                    )
                })?
                .solve(&u);
            let norm = (h * w.norm_squared()).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::numerical(
                    "gradient flow produced a zero or non-finite iterate",
                ));
            }
            w /= norm;
            if w.sum() < 0.0 {
                w.neg_mut();
            }
            change = (&w - &u).amax();
            u = w;
            if change < spec.tol {
                let residual = self.residual_vec(&v, &u);
                return Ok(Solution {
                    u: Tensor::from_vec(u.as_slice().to_vec()),
                    residual,
                });
            }
        }
        let residual = self.residual_vec(&v, &u);
        Err(Error::numerical(format!(
            "gradient flow did not converge in {} steps (last change {change:e}, residual {residual:e})",
            spec.max_steps
        )))
    }

    /// Grid `L²` norm of `-D2 u + V u + β u³ - E u`, with `E` the discrete
    /// Rayleigh quotient.
    pub fn residual(&self, v: &Tensor<f64>, u: &Tensor<f64>) -> f64 {
        self.residual_vec(
            &DVector::from_column_slice(v.data()),
            &DVector::from_column_slice(u.data()),
        )
    }

    /// Discrete Rayleigh quotient `E = ⟨u, Hu⟩ / ⟨u, u⟩`.
    pub fn energy(&self, v: &Tensor<f64>, u: &Tensor<f64>) -> f64 {
        let v = DVector::from_column_slice(v.data());
        let u = DVector::from_column_slice(u.data());
        let hu = self.apply(&v, &u);
        u.dot(&hu) / u.dot(&u)
    }

    fn apply(&self, v: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut hu = -(&self.d2 * u);
        for i in 0..u.len() {
            hu[i] += (v[i] + self.spec.beta * u[i] * u[i]) * u[i];
        }
        hu
    }

    fn residual_vec(&self, v: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let hu = self.apply(v, u);
        let e = u.dot(&hu) / u.dot(u);
        let r = hu - u * e;
        (self.spec.spacing() * r.norm_squared()).sqrt()
    }
}

/// Solves one NLSE ground state, building the solver on the fly.
pub fn solve_nlse(v: &Tensor<f64>, spec: &ProblemSpec) -> Result<Tensor<f64>> {
    Ok(NlseSolver::new(spec)?.solve(v)?.u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{roll_grid, sample_potential};

    #[test]
    fn constant_potential_gives_constant_state() {
        let spec = ProblemSpec::nlse(40);
        let solver = NlseSolver::new(&spec).unwrap();
        let v = Tensor::from_vec(vec![-3.0; 40]);
        let sol = solver.solve(&v).unwrap();
        for &x in sol.u.data() {
            assert!((x - 1.0).abs() < 1e-12);
        }
        assert!(sol.residual < 1e-10);
        assert!((solver.energy(&v, &sol.u) - (-3.0 + spec.beta)).abs() < 1e-10);
    }

    #[test]
    fn random_potentials_meet_the_residual_bound() {
        let spec = ProblemSpec::nlse(80);
        let solver = NlseSolver::new(&spec).unwrap();
        for seed in 0..6 {
            let v = sample_potential(&spec, seed).unwrap();
            let sol = solver.solve(&v).unwrap();
            let independent = solver.residual(&v, &sol.u);
            assert!(independent <= 1e-6, "seed {seed}: residual {independent:e}");
            let h = spec.spacing();
            let norm: f64 = sol.u.data().iter().map(|x| x * x).sum::<f64>() * h;
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(sol.u.data().iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn ground_state_concentrates_in_the_wells() {
        let spec = ProblemSpec::nlse(80);
        let v = sample_potential(&spec, 3).unwrap();
        let u = solve_nlse(&v, &spec).unwrap();
        let deepest = (0..80)
            .min_by(|&a, &b| v.data()[a].total_cmp(&v.data()[b]))
            .unwrap();
        let shallowest = (0..80)
            .max_by(|&a, &b| v.data()[a].total_cmp(&v.data()[b]))
            .unwrap();
        assert!(u.data()[deepest] > u.data()[shallowest]);
    }

    #[test]
    fn shifted_potential_gives_shifted_state() {
        let spec = ProblemSpec::nlse(80);
        let solver = NlseSolver::new(&spec).unwrap();
        for (seed, shift) in [(11u64, 7isize), (12, 33), (13, -20)] {
            let v = sample_potential(&spec, seed).unwrap();
            let u = solver.solve(&v).unwrap().u;
            let shifted = solver.solve(&roll_grid(&v, shift)).unwrap().u;
            let expected = roll_grid(&u, shift);
            let diff = shifted
                .data()
                .iter()
                .zip(expected.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-8, "shift {shift}: {diff:e}");
        }
    }

    #[test]
    fn non_convergence_reports_the_residual() {
        let mut spec = ProblemSpec::nlse(40);
        spec.max_steps = 3;
        let v = sample_potential(&spec, 0).unwrap();
        let err = solve_nlse(&v, &spec).unwrap_err().to_string();
        assert!(err.contains("residual"), "{err}");
    }

    #[test]
    fn rejects_wrong_problem_and_size() {
        assert!(NlseSolver::new(&ProblemSpec::ks(40)).is_err());
        let solver = NlseSolver::new(&ProblemSpec::nlse(40)).unwrap();
        assert!(solver.solve(&Tensor::from_vec(vec![0.0; 39])).is_err());
    }
}
