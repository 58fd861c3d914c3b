//! Riccati oracle for the linear-quadratic problem with additive control
//!
//! ```text
//! dX = (AX + u) dt + (BX + u) dW + Σ_i (Γ_i X + u) dÑ_i,   l = ‖x‖² + ‖u‖²,   Φ = ‖x‖².
//! ```
//!
//! Substituting `p = P X` into the adjoint equation identifies
//! `q = P(BX + u)` and `r_i = P(Γ_i X + u)`; stationarity of the Hamiltonian,
//! `p + q + Σ_i ν_i r_i + 2u = 0`, then gives `u = ΛX` with
//!
//! ```text
//! M(P) = 2I + (1 + ν(E)) P,   N(P) = P (I + B + Σ_i ν_i Γ_i),   Λ = −M⁻¹N,
//! ```
//!
//! and matching the drift terms yields
//!
//! ```text
//! −Ṗ = PA + AᵀP + BᵀPB + Σ_i ν_i Γ_iᵀ P Γ_i + 2I − Nᵀ M⁻¹ N,   P(T) = 2I.
//! ```
//!
//! The optimal cost is `½ x0ᵀ P(0) x0`.

use nalgebra::{DMatrix, DVector};

use super::AdjointEnsemble;
use crate::control::ControlLaw;
use crate::forward::StateEnsemble;
use crate::noise::{MarkSpace, TimeGrid};
use crate::triple::{GalerkinSpace, OperatorProcess};
use crate::{Error, PathTensor, Result};

const SUBSTEPS: usize = 4;

/// `P(t_k)` and the optimal feedback gain `Λ(t_k)` on every grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    grid: TimeGrid,
    p: Vec<DMatrix<f64>>,
    gains: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn p(&self, k: usize) -> &DMatrix<f64> {
        &self.p[k]
    }

    pub fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    /// Optimal cost `½ x0ᵀ P(0) x0`.
    pub fn value(&self, x0: &DVector<f64>) -> f64 {
        0.5 * x0.dot(&(&self.p[0] * x0))
    }

    /// Offset of the value function; always zero for this cost.
    pub fn value_offset(&self) -> f64 {
        0.0
    }

    /// `u_k = Λ(t_k) x` as a linear-feedback control law.
    pub fn feedback_law(&self) -> ControlLaw {
        let n = self.grid.steps();
        let dim = self.p[0].nrows();
        ControlLaw::linear_feedback(self.grid, self.gains[..n].to_vec(), vec![DVector::zeros(dim); n])
            .expect("gains match the grid")
    }
}

struct LqData<'a> {
    a: &'a OperatorProcess,
    b: &'a OperatorProcess,
    gammas: &'a [DMatrix<f64>],
    weights: &'a [f64],
    grid: &'a TimeGrid,
}

impl LqData<'_> {
    fn lerp(op: &OperatorProcess, k: usize, theta: f64) -> DMatrix<f64> {
        if op.is_time_invariant() || theta == 0.0 {
            op.at(k).clone()
        } else {
            op.at(k) * (1.0 - theta) + op.at(k + 1) * theta
        }
    }

    fn m_and_n(&self, p: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let dim = p.nrows();
        let total: f64 = self.weights.iter().sum();
        let m = DMatrix::identity(dim, dim) * 2.0 + p * (1.0 + total);
        let mut s = DMatrix::identity(dim, dim) + b;
        for (g, w) in self.gammas.iter().zip(self.weights) {
            s += g * *w;
        }
        (m, p * s)
    }

    fn gain(&self, p: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (m, n) = self.m_and_n(p, b);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Assumption("M(P) = 2I + (1 + ν(E))P is not positive definite".into()))?;
        Ok(-chol.solve(&n))
    }

    /// `dP/dt` at node `k` plus fraction `theta` of the step.
    fn rhs(&self, p: &DMatrix<f64>, k: usize, theta: f64) -> Result<DMatrix<f64>> {
        let dim = p.nrows();
        let a = Self::lerp(self.a, k, theta);
        let b = Self::lerp(self.b, k, theta);
        let mut bracket = p * &a + a.transpose() * p + b.transpose() * p * &b + DMatrix::identity(dim, dim) * 2.0;
        for (g, w) in self.gammas.iter().zip(self.weights) {
            bracket += g.transpose() * p * g * *w;
        }
        let (_, n) = self.m_and_n(p, &b);
        let lambda = self.gain(p, &b)?;
        // NᵀM⁻¹N = −NᵀΛ.
        Ok(-bracket - n.transpose() * lambda)
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// Integrates the Riccati equation backward from `P(T) = 2I` with classical
/// RK4 and `4` substeps per grid step; time-varying operators are linearly
/// interpolated between grid nodes.
pub fn solve_riccati_lq(
    space: &GalerkinSpace,
    a: &OperatorProcess,
    b: &OperatorProcess,
    gammas: &[DMatrix<f64>],
    marks: &MarkSpace,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    let dim = space.dim();
    if a.dim() != dim || b.dim() != dim {
        return Err(Error::Dimension {
            what: "Riccati operator",
            expected: dim,
            got: if a.dim() != dim { a.dim() } else { b.dim() },
        });
    }
    if gammas.len() != marks.len() {
        return Err(Error::Dimension {
            what: "jump gain count",
            expected: marks.len(),
            got: gammas.len(),
        });
    }
    if let Some(g) = gammas.iter().find(|g| g.shape() != (dim, dim)) {
        return Err(Error::Dimension {
            what: "jump gain size",
            expected: dim,
            got: g.nrows(),
        });
    }
    a.check_grid(grid)?;
    b.check_grid(grid)?;
    let data = LqData {
        a,
        b,
        gammas,
        weights: marks.weights(),
        grid,
    };
    let n = grid.steps();
    let h = data.grid.dt() / SUBSTEPS as f64;
    let mut ps = vec![DMatrix::zeros(dim, dim); n + 1];
    ps[n] = DMatrix::identity(dim, dim) * 2.0;
    for k in (0..n).rev() {
        let mut p = ps[k + 1].clone();
        for s in (0..SUBSTEPS).rev() {
            // Step from θ_hi = (s+1)/S down to θ_lo = s/S within [t_k, t_{k+1}].
            let hi = (s + 1) as f64 / SUBSTEPS as f64;
            let mid = (s as f64 + 0.5) / SUBSTEPS as f64;
            let lo = s as f64 / SUBSTEPS as f64;
            let k1 = data.rhs(&p, k, hi)?;
            let k2 = data.rhs(&(&p - &k1 * (0.5 * h)), k, mid)?;
            let k3 = data.rhs(&(&p - &k2 * (0.5 * h)), k, mid)?;
            let k4 = data.rhs(&(&p - &k3 * h), k, lo)?;
            p -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            symmetrize(&mut p);
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Riccati solution at step {k}")));
        }
        ps[k] = p;
    }
    let gains = ps
        .iter()
        .enumerate()
        .map(|(k, p)| data.gain(p, b.at(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RiccatiSolution {
        grid: *grid,
        p: ps,
        gains,
    })
}

/// Adjoint processes implied by the Riccati solution along simulated paths:
/// `p = P X`, `q = P(BX + u)`, `r_i = P(Γ_i X + u)` with `u` the realised control.
pub fn lq_adjoint_from_riccati(
    ric: &RiccatiSolution,
    states: &StateEnsemble,
    b: &OperatorProcess,
    gammas: &[DMatrix<f64>],
    marks: &MarkSpace,
) -> Result<AdjointEnsemble> {
    let dim = states.state_dim();
    if ric.grid() != states.grid() {
        return Err(Error::InvalidInput("Riccati solution and states use different grids".into()));
    }
    if states.control_dim() != dim || ric.p[0].nrows() != dim || b.dim() != dim {
        return Err(Error::Dimension {
            what: "LQ state/control dimension",
            expected: dim,
            got: states.control_dim(),
        });
    }
    if gammas.len() != marks.len() {
        return Err(Error::Dimension {
            what: "jump gain count",
            expected: marks.len(),
            got: gammas.len(),
        });
    }
    let n = states.grid().steps();
    let m = marks.len();
    let paths = states.paths();
    let mut p = PathTensor::zeros(paths, n + 1, dim);
    let mut q = PathTensor::zeros(paths, n, dim);
    let mut r = PathTensor::zeros(paths, n, m * dim);
    for path in 0..paths {
        for k in 0..=n {
            let x = states.state(path, k);
            let pk = &ric.p[k];
            p.row_mut(path, k).copy_from_slice((pk * &x).as_slice());
            if k == n {
                continue;
            }
            let u = states.control(path, k);
            q.row_mut(path, k).copy_from_slice((pk * (b.at(k) * &x + &u)).as_slice());
            let row = r.row_mut(path, k);
            for (i, g) in gammas.iter().enumerate() {
                row[i * dim..(i + 1) * dim].copy_from_slice((pk * (g * &x + &u)).as_slice());
            }
        }
    }
    let mut p_hat = PathTensor::zeros(paths, n, dim);
    for path in 0..paths {
        for k in 0..n {
            p_hat.row_mut(path, k).copy_from_slice(p.row(path, k));
        }
    }
    Ok(AdjointEnsemble::from_parts(*states.grid(), m, p, p_hat, q, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triple::OperatorRole;
    use approx::assert_relative_eq;

    fn scalar_ops(a: f64, b: f64) -> (GalerkinSpace, OperatorProcess, OperatorProcess) {
        let space = GalerkinSpace::flat(1).unwrap();
        let a = OperatorProcess::constant(&space, OperatorRole::VToVStar, DMatrix::from_element(1, 1, a)).unwrap();
        let b = OperatorProcess::constant(&space, OperatorRole::VToH, DMatrix::from_element(1, 1, b)).unwrap();
        (space, a, b)
    }

    #[test]
    fn terminal_gain_closed_form() {
        let (space, a, b) = scalar_ops(-1.0, 0.5);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let marks = MarkSpace::new(vec![1.0]).unwrap();
        let ric = solve_riccati_lq(&space, &a, &b, &[DMatrix::from_element(1, 1, 0.1)], &marks, &grid).unwrap();
        assert_relative_eq!(ric.p(16)[(0, 0)], 2.0);
        assert_relative_eq!(ric.gain(16)[(0, 0)], -3.2 / 6.0, epsilon = 1e-14);
    }

    /// Independent scalar integrator for `Ṗ = 2P − 2 + P²/(2 + P)`.
    fn scalar_reference(steps: usize) -> f64 {
        let f = |p: f64| 2.0 * p - 2.0 + p * p / (2.0 + p);
        let h = 1.0 / steps as f64;
        let mut p = 2.0;
        for _ in 0..steps {
            let k1 = f(p);
            let k2 = f(p - 0.5 * h * k1);
            let k3 = f(p - 0.5 * h * k2);
            let k4 = f(p - h * k3);
            p -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        p
    }

    #[test]
    fn classical_scalar_riccati() {
        let (space, a, b) = scalar_ops(-1.0, 0.0);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let ric = solve_riccati_lq(&space, &a, &b, &[], &MarkSpace::empty(), &grid).unwrap();
        let reference = scalar_reference(32 * 4 * 16);
        assert!((ric.p(0)[(0, 0)] - reference).abs() < 1e-9);
    }

    #[test]
    fn fourth_order_in_step() {
        let (space, a, b) = scalar_ops(-1.0, 0.5);
        let marks = MarkSpace::new(vec![1.0]).unwrap();
        let g = [DMatrix::from_element(1, 1, 0.1)];
        let p0 = |n: usize| {
            let grid = TimeGrid::new(1.0, n).unwrap();
            solve_riccati_lq(&space, &a, &b, &g, &marks, &grid).unwrap().p(0)[(0, 0)]
        };
        let fine = p0(256);
        let e1 = (p0(4) - fine).abs();
        let e2 = (p0(8) - fine).abs();
        assert!(e2 < e1 / 8.0, "{e1} {e2}");
    }

    #[test]
    fn matrix_case_is_symmetric_and_identity_holds() {
        let space = GalerkinSpace::flat(3).unwrap();
        let am = DMatrix::from_row_slice(3, 3, &[-2.0, 0.3, 0.0, -0.3, -1.0, 0.2, 0.1, 0.0, -3.0]);
        let bm = DMatrix::from_row_slice(3, 3, &[0.2, 0.0, 0.1, 0.0, 0.3, 0.0, -0.1, 0.0, 0.1]);
        let a = OperatorProcess::constant(&space, OperatorRole::VToVStar, am).unwrap();
        let b = OperatorProcess::constant(&space, OperatorRole::VToH, bm.clone()).unwrap();
        let g = vec![DMatrix::identity(3, 3) * 0.1, DMatrix::from_diagonal_element(3, 3, -0.2)];
        let marks = MarkSpace::new(vec![1.0, 0.5]).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let ric = solve_riccati_lq(&space, &a, &b, &g, &marks, &grid).unwrap();
        for k in 0..=20 {
            let p = ric.p(k);
            assert!((p - p.transpose()).abs().max() < 1e-12);
            assert!(p.clone().symmetric_eigenvalues().min() > 0.0);
            let m = DMatrix::identity(3, 3) * 2.0 + p * 2.5;
            let n = p * (DMatrix::identity(3, 3) + &bm + &g[0] * 1.0 + &g[1] * 0.5);
            assert!((m * ric.gain(k) + n).abs().max() < 1e-10);
        }
    }
}
