//! Density of the `n_e` lowest states of `-½ψ'' + Vψ = εψ` on the periodic
//! interval `[-1, 1)`.

use super::spectral::d2_matrix;
use super::{Problem, ProblemSpec, Solution};
use crate::error::{Error, Result};
use crate::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Marker carried by the error for a vanishing occupied/empty gap.
pub(crate) const DEGENERATE: &str = "degenerate gap";

/// Gap below which the density is considered ill-defined.
pub const GAP_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct KsSolver {
    spec: ProblemSpec,
    kinetic: DMatrix<f64>,
}

/// Occupied eigenpairs, with vectors normalized to `h Σ ψ² = 1`.
#[derive(Clone, Debug)]
pub struct KsStates {
    pub energies: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `ε_{n_e+1} - ε_{n_e}`.
    pub gap: f64,
    /// Largest `‖Hq - εq‖₂` over occupied unit eigenvectors `q`.
    pub residual: f64,
}

impl KsSolver {
    pub fn new(spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        if spec.problem != Problem::Ks {
            return Err(Error::config(format!(
                "Kohn-Sham solver given a {} spec",
                spec.problem
            )));
        }
        Ok(KsSolver {
            spec: spec.clone(),
            kinetic: d2_matrix(spec.n, spec.length()) * -0.5,
        })
    }

    pub fn hamiltonian(&self, v: &Tensor<f64>) -> Result<DMatrix<f64>> {
        let n = self.spec.n;
        if v.len() != n {
            return Err(Error::shape(format!(
                "potential has {} points, grid has {n}",
                v.len()
            )));
        }
        let mut h = self.kinetic.clone();
        for (i, &vi) in v.data().iter().enumerate() {
            h[(i, i)] += vi;
        }
        Ok(h)
    }

    pub fn states(&self, v: &Tensor<f64>) -> Result<KsStates> {
        let h = self.hamiltonian(v)?;
        let ne = self.spec.n_g;
        let eig = SymmetricEigen::new(h.clone());
        let mut order: Vec<usize> = (0..self.spec.n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let gap = eig.eigenvalues[order[ne]] - eig.eigenvalues[order[ne - 1]];
        let scale = 1.0 / self.spec.spacing().sqrt();
        let mut energies = Vec::with_capacity(ne);
        let mut states = Vec::with_capacity(ne);
        let mut residual: f64 = 0.0;
        for &k in &order[..ne] {
            let q: DVector<f64> = eig.eigenvectors.column(k).into_owned();
            let e = eig.eigenvalues[k];
            residual = residual.max((&h * &q - &q * e).norm());
            energies.push(e);
            states.push(q.iter().map(|x| x * scale).collect());
        }
        Ok(KsStates {
            energies,
            states,
            gap,
            residual,
        })
    }

    pub fn solve(&self, v: &Tensor<f64>) -> Result<Solution> {
        let st = self.states(v)?;
        if st.gap.abs() < GAP_TOLERANCE {
            return Err(Error::numerical(format!(
                "{DEGENERATE}: occupied and first empty eigenvalues differ by {:e}",
                st.gap
            )));
        }
        let mut rho = vec![0.0; self.spec.n];
        for psi in &st.states {
            for (r, p) in rho.iter_mut().zip(psi) {
                *r += p * p;
            }
        }
        Ok(Solution {
            u: Tensor::from_vec(rho),
            residual: st.residual,
        })
    }
}

/// Solves one Kohn-Sham density, building the solver on the fly.
pub fn solve_ks(v: &Tensor<f64>, spec: &ProblemSpec) -> Result<Tensor<f64>> {
    Ok(KsSolver::new(spec)?.solve(v)?.u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{roll_grid, sample_potential};

    #[test]
    fn free_particle_has_uniform_density() {
        let mut spec = ProblemSpec::ks(40);
        spec.n_g = 1;
        let rho = solve_ks(&Tensor::from_vec(vec![0.0; 40]), &spec).unwrap();
        for &r in rho.data() {
            assert!((r - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn free_particle_second_level_is_degenerate() {
        let mut spec = ProblemSpec::ks(40);
        spec.n_g = 2;
        let err = solve_ks(&Tensor::from_vec(vec![0.0; 40]), &spec).unwrap_err();
        assert!(err.to_string().contains(DEGENERATE));
    }

    #[test]
    fn density_integrates_to_electron_count() {
        for ne in 1..=3 {
            let mut spec = ProblemSpec::ks(80);
            spec.n_g = ne;
            let solver = KsSolver::new(&spec).unwrap();
            for seed in 0..5 {
                let v = sample_potential(&spec, seed).unwrap();
                let sol = solver.solve(&v).unwrap();
                let total: f64 = sol.u.data().iter().sum::<f64>() * spec.spacing();
                assert!((total - ne as f64).abs() < 1e-12, "ne={ne}: {total}");
                assert!(sol.u.data().iter().all(|&r| r >= 0.0));
                assert!(sol.residual <= 1e-10, "residual {:e}", sol.residual);
            }
        }
    }

    #[test]
    fn states_are_orthonormal_under_grid_quadrature() {
        let spec = ProblemSpec::ks(80);
        let solver = KsSolver::new(&spec).unwrap();
        let v = sample_potential(&spec, 4).unwrap();
        let st = solver.states(&v).unwrap();
        let h = spec.spacing();
        for i in 0..2 {
            for j in 0..2 {
                let ip: f64 = st.states[i]
                    .iter()
                    .zip(&st.states[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * h;
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expected).abs() < 1e-12);
            }
        }
        assert!(st.energies[0] <= st.energies[1]);
        assert!(st.gap > 0.0);
    }

    #[test]
    fn shifted_potential_gives_shifted_density() {
        let spec = ProblemSpec::ks(80);
        let solver = KsSolver::new(&spec).unwrap();
        let v = sample_potential(&spec, 8).unwrap();
        let rho = solver.solve(&v).unwrap().u;
        let shifted = solver.solve(&roll_grid(&v, 13)).unwrap().u;
        let expected = roll_grid(&rho, 13);
        for (a, b) in shifted.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
