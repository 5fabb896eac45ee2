//! One-dimensional data generators: the NLSE ground-state map, the slab
//! radiative-transfer map and the Kohn-Sham density map.
//!
//! Each problem draws a random input field from a Gaussian mixture, solves
//! for the output field on the same grid and checks the solution against a
//! residual oracle before it is accepted into a dataset.

mod expint;
mod ks;
mod nlse;
mod rte;
mod spectral;

pub use expint::{exp_integral_e1, exp_integral_ei, EULER_GAMMA};
pub use ks::{solve_ks, KsSolver};
pub use nlse::{solve_nlse, NlseSolver};
pub use rte::{rte_matrix, solve_rte_1d};
pub use spectral::d2_matrix;

use crate::error::{Error, Result};
use crate::train::Dataset;
use crate::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// Number of periodic images summed on each side of a periodized bump.
pub const PERIODIC_IMAGES: i64 = 3;

/// Attempts allowed when rejection-sampling separated Kohn-Sham wells.
pub const MAX_CENTER_ATTEMPTS: usize = 10_000;

/// Redraws allowed for a Kohn-Sham sample whose occupied and first empty
/// eigenvalues coincide.
pub const MAX_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Problem {
    Nlse,
    Rte,
    Ks,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Nlse => "nlse",
            Problem::Rte => "rte",
            Problem::Ks => "ks",
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nlse" => Ok(Problem::Nlse),
            "rte" => Ok(Problem::Rte),
            "ks" => Ok(Problem::Ks),
            other => Err(Error::config(format!(
                "unknown problem '{other}' (expected nlse, rte or ks)"
            ))),
        }
    }
}

/// Problem selection, grid size and physical constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub problem: Problem,
    /// Grid points.
    pub n: usize,
    /// Number of Gaussian bumps. For the Kohn-Sham map this is also the
    /// number of electrons.
    pub n_g: usize,
    /// NLSE cubic coefficient.
    pub beta: f64,
    /// RTE absorption `μ_t - μ_s`.
    pub mu_a: f64,
    /// RTE source term (constant).
    pub source: f64,
    /// Kohn-Sham well width.
    pub sigma: f64,
    /// NLSE gradient-flow time step.
    pub time_step: f64,
    /// NLSE stopping tolerance on successive iterates (max norm).
    pub tol: f64,
    /// NLSE iteration cap.
    pub max_steps: usize,
}

impl ProblemSpec {
    pub fn nlse(n: usize) -> Self {
        ProblemSpec::with_defaults(Problem::Nlse, n)
    }

    pub fn rte(n: usize) -> Self {
        ProblemSpec::with_defaults(Problem::Rte, n)
    }

    pub fn ks(n: usize) -> Self {
        ProblemSpec::with_defaults(Problem::Ks, n)
    }

    pub fn with_defaults(problem: Problem, n: usize) -> Self {
        ProblemSpec {
            problem,
            n,
            n_g: 2,
            beta: 10.0,
            mu_a: 0.2,
            source: 1.0,
            sigma: 0.05,
            time_step: 0.01,
            tol: 1e-10,
            max_steps: 200_000,
        }
    }

    /// Interval `[a, b)` the grid lives on.
    pub fn domain(&self) -> (f64, f64) {
        match self.problem {
            Problem::Ks => (-1.0, 1.0),
            Problem::Nlse | Problem::Rte => (0.0, 1.0),
        }
    }

    pub fn length(&self) -> f64 {
        let (a, b) = self.domain();
        b - a
    }

    pub fn spacing(&self) -> f64 {
        self.length() / self.n as f64
    }

    /// Grid coordinates. The periodic problems use left endpoints `a + ih`;
    /// the slab problem uses cell midpoints `(i + 1/2)h`.
    pub fn grid(&self) -> Vec<f64> {
        let (a, _) = self.domain();
        let h = self.spacing();
        let offset = if self.problem == Problem::Rte {
            0.5
        } else {
            0.0
        };
        (0..self.n).map(|i| a + (i as f64 + offset) * h).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config(format!(
                "grid needs at least 2 points, got {}",
                self.n
            )));
        }
        if self.n_g == 0 {
            return Err(Error::config("need at least one Gaussian bump"));
        }
        if self.problem == Problem::Ks && self.n_g >= self.n {
            return Err(Error::config("more electrons than grid points"));
        }
        let positive = [
            ("mu_a", self.mu_a),
            ("sigma", self.sigma),
            ("time_step", self.time_step),
            ("tol", self.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !self.beta.is_finite() || !self.source.is_finite() {
            return Err(Error::config("beta and source must be finite"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        Ok(())
    }

    /// Residual bound a solution must meet before it is written to a dataset.
    pub fn residual_tolerance(&self) -> f64 {
        match self.problem {
            Problem::Nlse => 1e-6,
            Problem::Ks => 1e-10,
            Problem::Rte => 1e-10,
        }
    }
}

/// Sum of Gaussian bumps `Σ a_i exp(-(x - c_i)² / (2 s_i))`, optionally
/// periodized with the given period.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    /// Prefactors, including sign and normalization.
    pub amplitudes: Vec<f64>,
    pub centers: Vec<f64>,
    /// Variances `s_i` (the `T` parameter, or `σ²`).
    pub variances: Vec<f64>,
    pub period: Option<f64>,
}

impl GaussianMixture {
    pub fn eval(&self, x: f64) -> f64 {
        let images = if self.period.is_some() {
            PERIODIC_IMAGES
        } else {
            0
        };
        let period = self.period.unwrap_or(0.0);
        let mut s = 0.0;
        for ((&a, &c), &var) in self
            .amplitudes
            .iter()
            .zip(&self.centers)
            .zip(&self.variances)
        {
            for j in -images..=images {
                let d = x - c - j as f64 * period;
                s += a * (-d * d / (2.0 * var)).exp();
            }
        }
        s
    }

    pub fn on_grid(&self, grid: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(grid.iter().map(|&x| self.eval(x)).collect())
    }
}

/// Draws the random input field for one sample.
///
/// * NLSE: `-Σ ρ/√(2πT) exp(-(x-c)²/2T)`, periodized on `[0,1)`, with
///   `ρ ~ U(1,4)`, `c ~ U(0,1)` and one `T ~ U(2,4)·10⁻³` per sample.
/// * RTE: `μ_s = Σ ρ/√(2πT) exp(-(x-c)²/2T)` with `ρ ~ U(0.1,0.3)`,
///   `c ~ U(0.2,0.8)`, `T ~ U(2,4)·10⁻³`.
/// * KS: `-Σ ρ exp(-(x-c)²/2σ²)`, periodized on `[-1,1)`, with
///   `ρ ~ U(0.8,1.2)` and centers pairwise further apart than `2σ`.
pub fn sample_mixture<R: Rng + ?Sized>(spec: &ProblemSpec, rng: &mut R) -> Result<GaussianMixture> {
    spec.validate()?;
    let n_g = spec.n_g;
    match spec.problem {
        Problem::Nlse | Problem::Rte => {
            let (rho, (c_lo, c_hi), sign, period) = match spec.problem {
                Problem::Nlse => ((1.0, 4.0), (0.0, 1.0), -1.0, Some(1.0)),
                _ => ((0.1, 0.3), (0.2, 0.8), 1.0, None),
            };
            let t = rng.random_range(2e-3..4e-3);
            let mut amplitudes = Vec::with_capacity(n_g);
            let mut centers = Vec::with_capacity(n_g);
            for _ in 0..n_g {
                let r = rng.random_range(rho.0..rho.1);
                amplitudes.push(sign * r / (2.0 * PI * t).sqrt());
                centers.push(rng.random_range(c_lo..c_hi));
            }
            Ok(GaussianMixture {
                amplitudes,
                centers,
                variances: vec![t; n_g],
                period,
            })
        }
        Problem::Ks => {
            let centers = separated_centers(n_g, spec.sigma, rng)?;
            let amplitudes = (0..n_g).map(|_| -rng.random_range(0.8..1.2)).collect();
            Ok(GaussianMixture {
                amplitudes,
                centers,
                variances: vec![spec.sigma * spec.sigma; n_g],
                period: Some(2.0),
            })
        }
    }
}

/// Distance between two points on the circle of circumference `period`.
pub fn periodic_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

fn separated_centers<R: Rng + ?Sized>(count: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    for _ in 0..MAX_CENTER_ATTEMPTS {
        let centers: Vec<f64> = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
        let separated = centers.iter().enumerate().all(|(i, &a)| {
            centers[..i]
                .iter()
                .all(|&b| periodic_distance(a, b, 2.0) > 2.0 * sigma)
        });
        if separated {
            return Ok(centers);
        }
    }
    Err(Error::numerical(format!(
        "could not place {count} wells with separation > {} in {MAX_CENTER_ATTEMPTS} attempts",
        2.0 * sigma
    )))
}

/// Samples the input field on the problem grid from a fresh generator.
pub fn sample_potential(spec: &ProblemSpec, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_mixture(spec, &mut rng)?.on_grid(&spec.grid()))
}

/// A solved sample and its residual.
#[derive(Clone, Debug)]
pub struct Solution {
    pub u: Tensor<f64>,
    pub residual: f64,
}

/// Per-problem solver with its grid-dependent matrices precomputed.
#[derive(Clone, Debug)]
pub enum Solver {
    Nlse(NlseSolver),
    Rte(ProblemSpec),
    Ks(KsSolver),
}

impl Solver {
    pub fn new(spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.problem {
            Problem::Nlse => Solver::Nlse(NlseSolver::new(spec)?),
            Problem::Rte => Solver::Rte(spec.clone()),
            Problem::Ks => Solver::Ks(KsSolver::new(spec)?),
        })
    }

    pub fn solve(&self, v: &Tensor<f64>) -> Result<Solution> {
        match self {
            Solver::Nlse(s) => s.solve(v),
            Solver::Rte(spec) => rte::solve(v, spec),
            Solver::Ks(s) => s.solve(v),
        }
    }
}

/// Summary of a generation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationReport {
    pub max_residual: f64,
    pub mean_residual: f64,
    /// Kohn-Sham samples redrawn because of a degenerate gap.
    pub redraws: usize,
}

/// Generates `count` independent samples. Sample `i` draws from a ChaCha8
/// stream `i` under `seed`, so the output does not depend on scheduling.
pub fn generate_dataset(spec: &ProblemSpec, count: usize, seed: u64) -> Result<Dataset<f64>> {
    generate_dataset_with_report(spec, count, seed).map(|(data, _)| data)
}

pub fn generate_dataset_with_report(
    spec: &ProblemSpec,
    count: usize,
    seed: u64,
) -> Result<(Dataset<f64>, GenerationReport)> {
    if count == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let solver = Solver::new(spec)?;
    let samples: Vec<(Tensor<f64>, Solution, usize)> = (0..count)
        .into_par_iter()
        .map(|index| {
            generate_one(spec, &solver, seed, index).map_err(|e| Error::Sample {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut report = GenerationReport::default();
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for (v, sol, redraws) in samples {
        report.max_residual = report.max_residual.max(sol.residual);
        report.mean_residual += sol.residual / count as f64;
        report.redraws += redraws;
        inputs.push(v);
        targets.push(sol.u);
    }
    Ok((Dataset::new(1, spec.n, inputs, targets)?, report))
}

fn generate_one(
    spec: &ProblemSpec,
    solver: &Solver,
    seed: u64,
    index: usize,
) -> Result<(Tensor<f64>, Solution, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let grid = spec.grid();
    let mut redraws = 0;
    loop {
        let v = sample_mixture(spec, &mut rng)?.on_grid(&grid);
        match solver.solve(&v) {
            Ok(sol) => {
                check_solution(spec, &sol)?;
                return Ok((v, sol, redraws));
            }
            Err(Error::Numerical(msg))
                if spec.problem == Problem::Ks && msg.contains(ks::DEGENERATE) =>
            {
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    return Err(Error::numerical(format!(
                        "{msg} after {MAX_REDRAWS} redraws"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

fn check_solution(spec: &ProblemSpec, sol: &Solution) -> Result<()> {
    let tol = spec.residual_tolerance();
    if sol.residual.is_nan() || sol.residual > tol {
        return Err(Error::numerical(format!(
            "{} residual {:e} exceeds {tol:e}",
            spec.problem, sol.residual
        )));
    }
    if sol.u.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("solution has non-finite entries"));
    }
    if spec.problem == Problem::Rte && sol.u.data().iter().any(|&x| x <= 0.0) {
        return Err(Error::numerical(
            "transport solution is not strictly positive",
        ));
    }
    Ok(())
}

/// Cyclic shift of a one-axis grid function: entry `i` moves to `i + shift`.
#[cfg(test)]
pub(crate) fn roll_grid(t: &Tensor<f64>, shift: isize) -> Tensor<f64> {
    let n = t.len() as isize;
    Tensor::from_vec(
        (0..n)
            .map(|i| t.data()[(i - shift).rem_euclid(n) as usize])
            .collect(),
    )
}
