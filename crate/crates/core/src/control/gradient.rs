//! Cost estimates, the variational equation and the three Gateaux-derivative
//! estimators (variational, adjoint, finite difference).
//!
//! A direction `v` is turned into the frozen perturbation process
//! `δu_k = v(X̄_k) − ū_k` along the base paths, so all three estimators
//! differentiate the same map `ε ↦ J(ū + ε δu)`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::hamiltonian::{coupling_grad_u, hamiltonian_grad_u, AdjointPoint};
use super::{AdmissibleSet, ControlLaw, CostFunctional};
use crate::adjoint::AdjointEnsemble;
use crate::forward::{euler_step, first_error, solve_forward, Dynamics, Resolvents, StateEnsemble, BLOW_UP_NORM};
use crate::noise::NoiseEnsemble;
use crate::stats::{self, Estimate};
use crate::{Error, PathTensor, Result};

/// Monte Carlo cost estimate with the per-path realisations kept for paired
/// comparisons on common noise.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub estimate: Estimate,
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

impl CostEstimate {
    pub fn mean(&self) -> f64 {
        self.estimate.mean
    }

    pub fn stderr(&self) -> f64 {
        self.estimate.stderr
    }

    /// Mean and standard error of `other − self` path by path.
    pub fn paired_difference(&self, other: &CostEstimate) -> Estimate {
        let d: Vec<f64> = other.per_path.iter().zip(&self.per_path).map(|(a, b)| a - b).collect();
        Estimate::from_samples(&d)
    }
}

/// `E[Σ_k l(t_k, X_k, u_k) Δt + Φ(X_n)]`.
pub fn cost(states: &StateEnsemble, cost: &dyn CostFunctional) -> CostEstimate {
    let grid = states.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let per_path: Vec<f64> = (0..states.paths())
        .into_par_iter()
        .map(|p| match cost.as_quadratic() {
            Some(qc) => {
                let running: f64 = (0..n)
                    .map(|k| qc.running_slices(states.states().row(p, k), states.controls().row(p, k)) * dt)
                    .sum();
                running + qc.terminal_slices(states.states().row(p, n))
            }
            None => {
                let running: f64 = (0..n)
                    .map(|k| cost.running(grid.time(k), &states.state(p, k), &states.control(p, k)) * dt)
                    .sum();
                running + cost.terminal(&states.state(p, n))
            }
        })
        .collect();
    CostEstimate {
        estimate: Estimate::from_samples(&per_path),
        per_path,
    }
}

/// Frozen control perturbation `δu`, one value per path and step.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    delta: PathTensor,
}

impl Direction {
    /// `δu_k = v(X̄_k) − ū_k` along the base ensemble.
    pub fn toward(states: &StateEnsemble, v: &ControlLaw) -> Result<Self> {
        if v.control_dim() != states.control_dim() || v.grid() != states.grid() {
            return Err(Error::InvalidInput("direction control does not match the ensemble".into()));
        }
        if let Some(p) = v.table_paths() {
            if p != states.paths() {
                return Err(Error::Dimension {
                    what: "direction table paths",
                    expected: states.paths(),
                    got: p,
                });
            }
        }
        let n = states.grid().steps();
        let du = states.control_dim();
        let mut delta = PathTensor::zeros(states.paths(), n, du);
        for p in 0..states.paths() {
            for k in 0..n {
                let d = v.eval(p, k, &states.state(p, k)) - states.control(p, k);
                delta.row_mut(p, k).copy_from_slice(d.as_slice());
            }
        }
        Ok(Self { delta })
    }

    pub fn from_table(delta: PathTensor) -> Self {
        Self { delta }
    }

    pub fn table(&self) -> &PathTensor {
        &self.delta
    }

    pub fn at(&self, path: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.delta.row(path, k))
    }

    fn check(&self, states: &StateEnsemble) -> Result<()> {
        if self.delta.paths() != states.paths()
            || self.delta.len() != states.grid().steps()
            || self.delta.width() != states.control_dim()
        {
            return Err(Error::InvalidInput("direction shape does not match the ensemble".into()));
        }
        Ok(())
    }
}

/// First-order variation `Y` with `Y_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationEnsemble {
    /// `paths × (n + 1) × N`.
    pub y: PathTensor,
}

impl VariationEnsemble {
    pub fn at(&self, path: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.y.row(path, k))
    }
}

/// Solves the variational equation along the base ensemble with the same
/// drift-implicit scheme as the state equation.
pub fn solve_variational(
    dynamics: &Dynamics,
    states: &StateEnsemble,
    direction: &Direction,
    noise: &NoiseEnsemble,
) -> Result<VariationEnsemble> {
    dynamics.check(noise)?;
    direction.check(states)?;
    if states.paths() != noise.paths() || states.grid() != noise.grid() {
        return Err(Error::InvalidInput("state ensemble does not match the noise".into()));
    }
    let grid = *noise.grid();
    let res = Resolvents::new(&dynamics.a, &grid)?;
    let (n, dim) = (grid.steps(), dynamics.state_dim());
    let m = noise.marks().len();
    let coeffs = dynamics.coeffs.as_ref();
    let mut y = PathTensor::zeros(states.paths(), n + 1, dim);
    let results: Vec<Result<()>> = y
        .as_mut_slice()
        .par_chunks_mut((n + 1) * dim)
        .enumerate()
        .map(|(path, ys)| {
            let mut yk = DVector::zeros(dim);
            for k in 0..n {
                let t = grid.time(k);
                let x = states.state(path, k);
                let u = states.control(path, k);
                let du = direction.at(path, k);
                let drift = coeffs.drift_x(t, &x, &u) * &yk + coeffs.drift_u(t, &x, &u) * &du;
                let diffusion = dynamics.b.at(k) * &yk
                    + coeffs.diffusion_x(t, &x, &u) * &yk
                    + coeffs.diffusion_u(t, &x, &u) * &du;
                let jumps: Vec<DVector<f64>> = (0..m)
                    .map(|i| coeffs.jump_x(t, i, &x, &u) * &yk + coeffs.jump_u(t, i, &x, &u) * &du)
                    .collect();
                let next = euler_step(res.at(k), &yk, &drift, &diffusion, &jumps, noise, path, k);
                let norm = next.norm();
                if !norm.is_finite() || norm > BLOW_UP_NORM {
                    return Err(Error::BlowUp {
                        path,
                        step: k + 1,
                        norm,
                    });
                }
                ys[(k + 1) * dim..(k + 2) * dim].copy_from_slice(next.as_slice());
                yk = next;
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(VariationEnsemble { y })
}

fn per_path_estimate<F>(paths: usize, f: F) -> Estimate
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let v: Vec<f64> = (0..paths).into_par_iter().map(f).collect();
    Estimate::from_samples(&v)
}

/// `E[(Φ_x(X_n), Y_n)] + E Σ_k [(l_x, Y_k) + (l_u, δu_k)] Δt`.
pub fn gateaux_via_variation(
    states: &StateEnsemble,
    variation: &VariationEnsemble,
    direction: &Direction,
    cost: &dyn CostFunctional,
) -> Result<Estimate> {
    direction.check(states)?;
    let grid = states.grid();
    let (n, dt) = (grid.steps(), grid.dt());
    Ok(per_path_estimate(states.paths(), |p| {
        let mut v = cost.terminal_x(&states.state(p, n)).dot(&variation.at(p, n));
        for k in 0..n {
            let (t, x, u) = (grid.time(k), states.state(p, k), states.control(p, k));
            v += (cost.running_x(t, &x, &u).dot(&variation.at(p, k)) + cost.running_u(t, &x, &u).dot(&direction.at(p, k))) * dt;
        }
        v
    }))
}

fn check_adjoint(adjoints: &AdjointEnsemble, states: &StateEnsemble) -> Result<()> {
    if adjoints.paths() != states.paths() || adjoints.grid() != states.grid() || adjoints.state_dim() != states.state_dim() {
        return Err(Error::InvalidInput("adjoint ensemble does not match the states".into()));
    }
    Ok(())
}

/// `E Σ_k (𝓗_u(t_k, X_k, u_k, p̂_k, q_k, r_k), δu_k) Δt`.
pub fn gateaux_via_adjoint(
    dynamics: &Dynamics,
    cost: &dyn CostFunctional,
    states: &StateEnsemble,
    adjoints: &AdjointEnsemble,
    direction: &Direction,
    noise: &NoiseEnsemble,
) -> Result<Estimate> {
    direction.check(states)?;
    check_adjoint(adjoints, states)?;
    let grid = states.grid();
    let (n, dt) = (grid.steps(), grid.dt());
    let coeffs = dynamics.coeffs.as_ref();
    let marks = noise.marks();
    Ok(per_path_estimate(states.paths(), |p| {
        (0..n)
            .map(|k| {
                let (t, x, u) = (grid.time(k), states.state(p, k), states.control(p, k));
                let (ph, q, r) = (adjoints.p_hat(p, k), adjoints.q(p, k), adjoints.r_all(p, k));
                let adj = AdjointPoint { p: &ph, q: &q, r: &r };
                hamiltonian_grad_u(t, &x, &u, adj, coeffs, cost, marks).dot(&direction.at(p, k)) * dt
            })
            .sum()
    }))
}

/// Central finite difference `[J(ū + εδu) − J(ū − εδu)] / 2ε` on common noise.
pub fn finite_difference_gateaux(
    dynamics: &Dynamics,
    cost_fn: &dyn CostFunctional,
    states: &StateEnsemble,
    direction: &Direction,
    noise: &NoiseEnsemble,
    eps: f64,
) -> Result<Estimate> {
    direction.check(states)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step {eps} must be positive")));
    }
    let shifted = |sign: f64| -> Result<CostEstimate> {
        let data: Vec<f64> = states
            .controls()
            .as_slice()
            .iter()
            .zip(direction.delta.as_slice())
            .map(|(u, d)| u + sign * eps * d)
            .collect();
        let c = states.controls();
        let table = PathTensor::from_vec(c.paths(), c.len(), c.width(), data).expect("same shape");
        let law = ControlLaw::from_table(*states.grid(), states.state_dim(), table);
        Ok(cost(&solve_forward(dynamics, &law, noise)?, cost_fn))
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    let d: Vec<f64> = plus
        .per_path
        .iter()
        .zip(&minus.per_path)
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect();
    Ok(Estimate::from_samples(&d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    /// `E[(Φ_x(X_n), Y_n)] + E Σ (l_x, Y_k) Δt`.
    pub lhs: Estimate,
    /// `E Σ (δu_k, b_u*p̂ + g_u*q + Σ σ_u*r ν) Δt`.
    pub rhs: Estimate,
    pub gap: f64,
    /// Standard error of the pathwise difference `lhs − rhs`.
    pub gap_stderr: f64,
}

/// Both sides of the duality relation between the variation and the adjoint.
pub fn duality_check(
    dynamics: &Dynamics,
    cost: &dyn CostFunctional,
    states: &StateEnsemble,
    variation: &VariationEnsemble,
    adjoints: &AdjointEnsemble,
    direction: &Direction,
    noise: &NoiseEnsemble,
) -> Result<DualityReport> {
    direction.check(states)?;
    check_adjoint(adjoints, states)?;
    let grid = states.grid();
    let (n, dt) = (grid.steps(), grid.dt());
    let coeffs = dynamics.coeffs.as_ref();
    let marks = noise.marks();
    let sides: Vec<(f64, f64)> = (0..states.paths())
        .into_par_iter()
        .map(|p| {
            let mut lhs = cost.terminal_x(&states.state(p, n)).dot(&variation.at(p, n));
            let mut rhs = 0.0;
            for k in 0..n {
                let (t, x, u) = (grid.time(k), states.state(p, k), states.control(p, k));
                lhs += cost.running_x(t, &x, &u).dot(&variation.at(p, k)) * dt;
                let (ph, q, r) = (adjoints.p_hat(p, k), adjoints.q(p, k), adjoints.r_all(p, k));
                let adj = AdjointPoint { p: &ph, q: &q, r: &r };
                rhs += coupling_grad_u(t, &x, &u, adj, coeffs, marks).dot(&direction.at(p, k)) * dt;
            }
            (lhs, rhs)
        })
        .collect();
    let lhs: Vec<f64> = sides.iter().map(|s| s.0).collect();
    let rhs: Vec<f64> = sides.iter().map(|s| s.1).collect();
    let diff: Vec<f64> = sides.iter().map(|s| s.0 - s.1).collect();
    let lhs = Estimate::from_samples(&lhs);
    let rhs = Estimate::from_samples(&rhs);
    Ok(DualityReport {
        lhs,
        rhs,
        gap: (lhs.mean - rhs.mean).abs(),
        gap_stderr: Estimate::from_samples(&diff).stderr,
    })
}

/// Stationarity residual of the minimum condition.
///
/// Unconstrained: `E Σ ‖𝓗_u‖² Δt`. Box constraints:
/// `E Σ ‖u − Proj(u − 𝓗_u)‖² Δt`.
pub fn smp_residual(
    dynamics: &Dynamics,
    cost: &dyn CostFunctional,
    states: &StateEnsemble,
    adjoints: &AdjointEnsemble,
    admissible: &AdmissibleSet,
    noise: &NoiseEnsemble,
) -> Result<f64> {
    check_adjoint(adjoints, states)?;
    let n = states.grid().steps();
    let dt = states.grid().dt();
    let grads = hamiltonian_gradients(dynamics, cost, states, adjoints, noise);
    let per_path: Vec<f64> = (0..states.paths())
        .into_par_iter()
        .map(|p| {
            (0..n)
                .map(|k| {
                    let g = grads.row(p, k);
                    let r: f64 = if admissible.is_unconstrained() {
                        g.iter().map(|v| v * v).sum()
                    } else {
                        let u = states.control(p, k);
                        let step = admissible.project(&u - DVector::from_column_slice(g));
                        (&u - step).norm_squared()
                    };
                    r * dt
                })
                .sum()
        })
        .collect();
    Ok(stats::mean(&per_path))
}

/// Pathwise `𝓗_u(t_k)` as a `paths × n × U` table.
pub(crate) fn hamiltonian_gradients(
    dynamics: &Dynamics,
    cost: &dyn CostFunctional,
    states: &StateEnsemble,
    adjoints: &AdjointEnsemble,
    noise: &NoiseEnsemble,
) -> PathTensor {
    let grid = states.grid();
    let (n, paths, du) = (grid.steps(), states.paths(), states.control_dim());
    let coeffs = dynamics.coeffs.as_ref();
    let marks = noise.marks();
    let mut out = PathTensor::zeros(paths, n, du);
    if let (Some(c), Some(qc)) = (coeffs.as_affine(), cost.as_quadratic()) {
        let dim = states.state_dim();
        let w = &qc.control_weight + qc.control_weight.transpose();
        for k in 0..n {
            let mut g = adjoints.p_hat_tensor().slice_at(k) * &c.drift.u
                + adjoints.q_tensor().slice_at(k) * &c.diffusion.u
                + states.controls().slice_at(k) * &w;
            let r = adjoints.r_tensor().slice_at(k);
            for (i, jump) in c.jumps.iter().enumerate() {
                g += r.columns(i * dim, dim) * &jump.u * marks.weight(i);
            }
            out.set_slice_at(k, &g);
        }
        return out;
    }
    out.as_mut_slice().par_chunks_mut((n * du).max(1)).enumerate().for_each(|(p, rows)| {
        for k in 0..n {
            let (t, x, u) = (grid.time(k), states.state(p, k), states.control(p, k));
            let (ph, q, r) = (adjoints.p_hat(p, k), adjoints.q(p, k), adjoints.r_all(p, k));
            let adj = AdjointPoint { p: &ph, q: &q, r: &r };
            rows[k * du..(k + 1) * du].copy_from_slice(hamiltonian_grad_u(t, &x, &u, adj, coeffs, cost, marks).as_slice());
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cauchy::{build_cauchy_problem, CauchyConfig, CauchyProblem};

    fn lq(steps: usize, paths: usize) -> CauchyProblem {
        build_cauchy_problem(&CauchyConfig {
            steps,
            paths,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn unit_direction(cp: &CauchyProblem, states: &StateEnsemble) -> Direction {
        let mut t = PathTensor::zeros(states.paths(), cp.grid.steps(), 1);
        t.as_mut_slice().fill(1.0);
        Direction::from_table(t)
    }

    fn agree(a: Estimate, b: Estimate) -> bool {
        let combined = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
        (a.mean - b.mean).abs() <= (3.0 * combined).max(0.02 * a.mean.abs().max(b.mean.abs()))
    }

    #[test]
    fn cost_of_uncontrolled_deterministic_decay() {
        let cp = build_cauchy_problem(&CauchyConfig {
            steps: 64,
            paths: 3,
            rho: crate::cauchy::CoefficientSpec::constant(0.0),
            gammas: vec![0.0],
            ..Default::default()
        })
        .unwrap();
        let noise = cp.noise().unwrap();
        let c = cp.problem.cost_of(&ControlLaw::zero_feedback(cp.grid, 1, 1), &noise).unwrap();
        // X_k = (1 + Δt)^{-k}: left Riemann sum of X² plus X_n².
        let r = 1.0 / (1.0 + cp.grid.dt());
        let expected: f64 = (0..64).map(|k| r.powi(2 * k) * cp.grid.dt()).sum::<f64>() + r.powi(128);
        assert!((c.mean() - expected).abs() < 1e-12);
        assert_eq!(c.stderr(), 0.0);
    }

    #[test]
    fn gradient_triad_agrees_at_three_controls() {
        let cp = lq(64, 2000);
        let noise = cp.noise().unwrap();
        let d = cp.dynamics();
        let cost_fn = cp.problem.cost.as_ref();
        let ric = cp.riccati().unwrap();
        let zero = ControlLaw::zero_feedback(cp.grid, 1, 1);
        let half = zero.blend(&ric.feedback_law(), 0.5).unwrap();
        for law in [zero, half, ric.feedback_law()] {
            let ev = cp.problem.evaluate(&law, &noise).unwrap();
            let dir = unit_direction(&cp, &ev.states);
            let y = solve_variational(d, &ev.states, &dir, &noise).unwrap();
            let via_y = gateaux_via_variation(&ev.states, &y, &dir, cost_fn).unwrap();
            let via_p = gateaux_via_adjoint(d, cost_fn, &ev.states, &ev.adjoints, &dir, &noise).unwrap();
            let fd = finite_difference_gateaux(d, cost_fn, &ev.states, &dir, &noise, 1e-3).unwrap();
            assert!(agree(via_y, fd), "{via_y:?} {fd:?}");
            assert!(agree(via_p, fd), "{via_p:?} {fd:?}");
            assert!(agree(via_y, via_p), "{via_y:?} {via_p:?}");
        }
    }

    #[test]
    fn derivative_vanishes_at_riccati_optimum() {
        let cp = lq(64, 2000);
        let noise = cp.noise().unwrap();
        let ric = cp.riccati().unwrap();
        let ev = cp.problem.evaluate(&ric.feedback_law(), &noise).unwrap();
        let dir = unit_direction(&cp, &ev.states);
        let g = gateaux_via_adjoint(cp.dynamics(), cp.problem.cost.as_ref(), &ev.states, &ev.adjoints, &dir, &noise)
            .unwrap();
        assert!(g.mean.abs() <= 3.0 * g.stderr + 1e-2, "{g:?}");
    }

    #[test]
    fn duality_gap_is_small() {
        let cp = lq(64, 2000);
        let noise = cp.noise().unwrap();
        let ev = cp.problem.evaluate(&ControlLaw::zero_feedback(cp.grid, 1, 1), &noise).unwrap();
        let dir = unit_direction(&cp, &ev.states);
        let y = solve_variational(cp.dynamics(), &ev.states, &dir, &noise).unwrap();
        let rep = duality_check(cp.dynamics(), cp.problem.cost.as_ref(), &ev.states, &y, &ev.adjoints, &dir, &noise)
            .unwrap();
        assert!(rep.gap <= (3.0 * rep.gap_stderr).max(0.02 * rep.lhs.mean.abs()), "{rep:?}");
    }

    #[test]
    fn residual_separates_optimum_from_zero_control() {
        let cp = lq(64, 2000);
        let noise = cp.noise().unwrap();
        let ric = cp.riccati().unwrap();
        let opt = cp.problem.evaluate(&ric.feedback_law(), &noise).unwrap();
        let zero = cp.problem.evaluate(&ControlLaw::zero_feedback(cp.grid, 1, 1), &noise).unwrap();
        assert!(opt.residual <= 1e-2);
        assert!(zero.residual > 10.0 * opt.residual, "{} vs {}", zero.residual, opt.residual);
        // The box form reduces to the unconstrained one when the box is wide.
        let wide = AdmissibleSet::boxed(DVector::from_element(1, -1e6), DVector::from_element(1, 1e6)).unwrap();
        let boxed = smp_residual(cp.dynamics(), cp.problem.cost.as_ref(), &zero.states, &zero.adjoints, &wide, &noise)
            .unwrap();
        assert!((boxed - zero.residual).abs() <= 1e-9 * zero.residual);
    }

    #[test]
    fn mismatched_direction_is_rejected() {
        let cp = lq(8, 10);
        let noise = cp.noise().unwrap();
        let states = cp.problem.simulate(&ControlLaw::zero_feedback(cp.grid, 1, 1), &noise).unwrap();
        let dir = Direction::from_table(PathTensor::zeros(3, 8, 1));
        assert!(finite_difference_gateaux(cp.dynamics(), cp.problem.cost.as_ref(), &states, &dir, &noise, 1e-3).is_err());
    }
}
