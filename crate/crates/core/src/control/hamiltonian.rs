use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{AdmissibleSet, CostFunctional};
use crate::forward::Coefficients;
use crate::noise::MarkSpace;
use crate::{Error, Result};

/// `𝓗 = (b, p) + (g, q) + Σ_i (σ_i, r_i) ν_i + l` and its partial gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad_u: Vec<f64>,
    pub grad_x: Vec<f64>,
}

/// Adjoint values at one grid point.
#[derive(Clone, Copy, Debug)]
pub struct AdjointPoint<'a> {
    pub p: &'a DVector<f64>,
    pub q: &'a DVector<f64>,
    pub r: &'a [DVector<f64>],
}

#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    adj: AdjointPoint<'_>,
    coeffs: &dyn Coefficients,
    cost: &dyn CostFunctional,
    marks: &MarkSpace,
) -> HamiltonianEval {
    HamiltonianEval {
        value: hamiltonian_value(t, x, u, adj, coeffs, cost, marks),
        grad_u: hamiltonian_grad_u(t, x, u, adj, coeffs, cost, marks).as_slice().to_vec(),
        grad_x: hamiltonian_grad_x(t, x, u, adj, coeffs, cost, marks).as_slice().to_vec(),
    }
}

pub(crate) fn hamiltonian_value(
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    adj: AdjointPoint<'_>,
    coeffs: &dyn Coefficients,
    cost: &dyn CostFunctional,
    marks: &MarkSpace,
) -> f64 {
    let mut v = coeffs.drift(t, x, u).dot(adj.p) + coeffs.diffusion(t, x, u).dot(adj.q) + cost.running(t, x, u);
    for (i, r) in adj.r.iter().enumerate() {
        v += coeffs.jump(t, i, x, u).dot(r) * marks.weight(i);
    }
    v
}

/// The part of `𝓗_u` that comes from the dynamics, `b_u*p + g_u*q + Σ σ_u*r ν`.
pub(crate) fn coupling_grad_u(
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    adj: AdjointPoint<'_>,
    coeffs: &dyn Coefficients,
    marks: &MarkSpace,
) -> DVector<f64> {
    let mut g = coeffs.drift_u(t, x, u).transpose() * adj.p + coeffs.diffusion_u(t, x, u).transpose() * adj.q;
    for (i, r) in adj.r.iter().enumerate() {
        g += coeffs.jump_u(t, i, x, u).transpose() * r * marks.weight(i);
    }
    g
}

pub(crate) fn hamiltonian_grad_u(
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    adj: AdjointPoint<'_>,
    coeffs: &dyn Coefficients,
    cost: &dyn CostFunctional,
    marks: &MarkSpace,
) -> DVector<f64> {
    coupling_grad_u(t, x, u, adj, coeffs, marks) + cost.running_u(t, x, u)
}

pub(crate) fn hamiltonian_grad_x(
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    adj: AdjointPoint<'_>,
    coeffs: &dyn Coefficients,
    cost: &dyn CostFunctional,
    marks: &MarkSpace,
) -> DVector<f64> {
    let mut g = coeffs.drift_x(t, x, u).transpose() * adj.p
        + coeffs.diffusion_x(t, x, u).transpose() * adj.q
        + cost.running_x(t, x, u);
    for (i, r) in adj.r.iter().enumerate() {
        g += coeffs.jump_x(t, i, x, u).transpose() * r * marks.weight(i);
    }
    g
}

/// Minimiser of `u ↦ 𝓗(t, x, u, p, q, r)` by one Newton step from `u` with a
/// central-difference Hessian, projected onto the admissible set. The step is
/// exact whenever `𝓗` is quadratic in `u`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_minimizer(
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    adj: AdjointPoint<'_>,
    coeffs: &dyn Coefficients,
    cost: &dyn CostFunctional,
    marks: &MarkSpace,
    admissible: &AdmissibleSet,
) -> Result<DVector<f64>> {
    let du = u.len();
    let grad = hamiltonian_grad_u(t, x, u, adj, coeffs, cost, marks);
    let h = 1e-4 * (1.0 + u.amax());
    let mut hess = DMatrix::zeros(du, du);
    for j in 0..du {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[j] += h;
        dn[j] -= h;
        let col = (hamiltonian_grad_u(t, x, &up, adj, coeffs, cost, marks)
            - hamiltonian_grad_u(t, x, &dn, adj, coeffs, cost, marks))
            / (2.0 * h);
        hess.set_column(j, &col);
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::Assumption(format!("Hamiltonian is not strictly convex in u at t = {t}")))?;
    Ok(admissible.project(u - chol.solve(&grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::QuadraticCost;
    use crate::forward::AffineCoefficients;

    fn lq_point() -> (AffineCoefficients, QuadraticCost, MarkSpace) {
        let gamma = DMatrix::from_element(1, 1, 0.1);
        (
            AffineCoefficients::additive_control_with_jump_gain(1, &[gamma]),
            QuadraticCost::unit(1, 1),
            MarkSpace::new(vec![1.0]).unwrap(),
        )
    }

    fn s(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn additive_control_example_values() {
        let (c, cost, marks) = lq_point();
        let (p, q, r) = (s(3.0), s(4.0), [s(5.0)]);
        let adj = AdjointPoint { p: &p, q: &q, r: &r };
        let h = hamiltonian(0.0, &s(1.0), &s(2.0), adj, &c, &cost, &marks);
        assert!((h.value - 29.5).abs() < 1e-12);
        assert!((h.grad_u[0] - 16.0).abs() < 1e-12);
        // b_x = g_x = 0, σ_x = 0.1, l_x = 2x.
        assert!((h.grad_x[0] - (0.1 * 5.0 + 2.0)).abs() < 1e-12);
        let at_min = hamiltonian(0.0, &s(1.0), &s(-6.0), adj, &c, &cost, &marks);
        assert!(at_min.grad_u[0].abs() < 1e-12);
    }

    #[test]
    fn zero_everything_is_zero() {
        let c = AffineCoefficients::zero(2, 1, 1);
        let cost = QuadraticCost::new(DMatrix::zeros(2, 2), DMatrix::zeros(1, 1), DMatrix::zeros(2, 2));
        let marks = MarkSpace::new(vec![1.0]).unwrap();
        let p = DVector::from_element(2, 1.0);
        let r = [p.clone()];
        let adj = AdjointPoint { p: &p, q: &p, r: &r };
        let h = hamiltonian(0.0, &p, &s(1.0), adj, &c, &cost, &marks);
        assert_eq!(h.value, 0.0);
        assert!(h.grad_u.iter().chain(&h.grad_x).all(|v| *v == 0.0));
    }

    #[test]
    fn newton_step_gives_closed_form_minimiser() {
        let (c, cost, marks) = lq_point();
        let (p, q, r) = (s(3.0), s(4.0), [s(5.0)]);
        let adj = AdjointPoint { p: &p, q: &q, r: &r };
        let u = hamiltonian_minimizer(0.3, &s(1.0), &s(2.0), adj, &c, &cost, &marks, &AdmissibleSet::Unconstrained)
            .unwrap();
        assert!((u[0] + 6.0).abs() < 1e-8);
        let boxed = AdmissibleSet::boxed(s(-1.0), s(1.0)).unwrap();
        let u = hamiltonian_minimizer(0.3, &s(1.0), &s(2.0), adj, &c, &cost, &marks, &boxed).unwrap();
        assert_eq!(u[0], -1.0);
    }

    #[test]
    fn non_convex_hamiltonian_is_rejected() {
        let (c, _, marks) = lq_point();
        let cost = QuadraticCost::new(DMatrix::identity(1, 1), -DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        let (p, r) = (s(0.0), [s(0.0)]);
        let adj = AdjointPoint { p: &p, q: &p, r: &r };
        assert!(hamiltonian_minimizer(0.0, &s(0.0), &s(0.0), adj, &c, &cost, &marks, &AdmissibleSet::Unconstrained).is_err());
    }
}
