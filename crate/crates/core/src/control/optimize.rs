//! Optimisers built on the minimum condition.
//!
//! Both methods work inside the class of their starting control. Pathwise
//! quantities (Hamiltonian minimisers or gradients) are projected onto the
//! class: per-step means for open-loop controls, per-step regressions on
//! `(1, X_k)` for linear feedback, and the raw table for tabulated controls.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::gradient::hamiltonian_gradients;
use super::hamiltonian::{hamiltonian_minimizer, AdjointPoint};
use super::{cost, AdmissibleSet, ControlClass, ControlLaw, ControlProblem, ControlVariant, Evaluation, OptimizationTrace, TraceRow};
use crate::forward::StateEnsemble;
use crate::noise::NoiseEnsemble;
use crate::regression::{least_squares, FeatureMap};
use crate::{stats, Error, PathTensor, Result};

/// Projects per-path, per-step control values onto the class of `template`.
///
/// For linear feedback, coordinates of `X_k` that are deterministic at step
/// `k` (for instance the initial datum) carry no information about the gain;
/// their gain columns are copied from step `k + 1` and only the remaining
/// coefficients and the offset are fitted.
pub fn fit_to_class(template: &ControlLaw, states: &StateEnsemble, table: &PathTensor) -> Result<ControlLaw> {
    let n = states.grid().steps();
    let paths = states.paths();
    let du = template.control_dim();
    let dim = states.state_dim();
    if table.paths() != paths || table.len() != n || table.width() != du {
        return Err(Error::InvalidInput("value table does not match the ensemble".into()));
    }
    let column_mean = |k: usize| -> DVector<f64> {
        DVector::from_fn(du, |j, _| {
            let col: Vec<f64> = (0..paths).map(|p| table.row(p, k)[j]).collect();
            stats::mean(&col)
        })
    };
    let variant = match template.class() {
        ControlClass::OpenLoop => ControlVariant::OpenLoop((0..n).map(column_mean).collect()),
        ControlClass::Tabulated => ControlLaw::tabulated_variant(table.clone()),
        ControlClass::LinearFeedback => {
            let mut gains = vec![DMatrix::zeros(du, dim); n];
            let mut offsets = vec![DVector::zeros(du); n];
            let mut carry = DMatrix::<f64>::zeros(du, dim);
            for k in (0..n).rev() {
                let features = FeatureMap::fit(states.states(), k, false);
                let kept = features.kept();
                let dropped: Vec<usize> = (0..dim).filter(|i| !kept.contains(i)).collect();
                let f = features.len();
                let mut design = DMatrix::zeros(paths, f);
                let mut target = DMatrix::zeros(paths, du);
                let mut phi = vec![0.0; f];
                for p in 0..paths {
                    let x = states.states().row(p, k);
                    features.eval(x, &mut phi);
                    design.row_mut(p).copy_from_slice(&phi);
                    for j in 0..du {
                        let fixed: f64 = dropped.iter().map(|&i| carry[(j, i)] * x[i]).sum();
                        target[(p, j)] = table.row(p, k)[j] - fixed;
                    }
                }
                let beta = least_squares(&design, &target, k)?;
                let mut gain = DMatrix::zeros(du, dim);
                let mut offset = beta.row(0).transpose();
                for &i in &dropped {
                    gain.set_column(i, &carry.column(i));
                }
                for (j, &i) in kept.iter().enumerate() {
                    let (c, s) = features.standardization(j);
                    let coef = beta.row(1 + j).transpose() / s;
                    offset -= &coef * c;
                    gain.set_column(i, &coef);
                }
                carry = gain.clone();
                gains[k] = gain;
                offsets[k] = offset;
            }
            ControlVariant::LinearFeedback { gains, offsets }
        }
    };
    Ok(template.with_variant(variant))
}

fn relative_change(prev: Option<f64>, j: f64) -> f64 {
    match prev {
        None => f64::INFINITY,
        Some(p) if p == j => 0.0,
        Some(p) => (j - p).abs() / j.abs().max(p.abs()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HamiltonianIterationOptions {
    /// Damping `β ∈ (0, 1]`.
    pub beta: f64,
    pub max_outer: usize,
    pub tol: f64,
}

impl Default for HamiltonianIterationOptions {
    fn default() -> Self {
        Self {
            beta: 0.5,
            max_outer: 50,
            tol: 1e-8,
        }
    }
}

/// Consecutive cost increases tolerated before the iteration is abandoned.
const MAX_INCREASES: usize = 3;

/// Fixed-point iteration on the minimum condition: solve forward and adjoint
/// under `u_k`, minimise the Hamiltonian pathwise, fit the minimiser in the
/// class of `u0` and blend, `u_{k+1} = (1 − β) u_k + β fit`.
///
/// Stops once the relative change of `J` and the stationarity residual are
/// both below `tol`.
pub fn optimize_hamiltonian_iteration(
    problem: &ControlProblem,
    u0: &ControlLaw,
    options: &HamiltonianIterationOptions,
    noise: &NoiseEnsemble,
) -> Result<(ControlLaw, OptimizationTrace)> {
    if !(options.beta > 0.0 && options.beta <= 1.0) {
        return Err(Error::InvalidInput(format!("damping {} must lie in (0, 1]", options.beta)));
    }
    let mut trace = OptimizationTrace::new("hamiltonian_iteration");
    let mut u = u0.clone();
    let mut prev: Option<f64> = None;
    let mut increases = 0;
    for it in 0..=options.max_outer {
        let ev = problem.evaluate(&u, noise)?;
        let j = ev.cost.mean();
        if !j.is_finite() {
            return Err(Error::NonFinite(format!("cost at iteration {it}")));
        }
        if let Some(p) = prev {
            increases = if j > p + 1e-12 * p.abs() { increases + 1 } else { 0 };
        }
        let converged = ev.residual < options.tol && relative_change(prev, j) < options.tol;
        let mut row = TraceRow {
            iteration: it,
            cost: j,
            stderr: ev.cost.stderr(),
            residual: ev.residual,
            step: 0.0,
        };
        if converged || it == options.max_outer {
            trace.rows.push(row);
            trace.converged = converged;
            return Ok((u, trace));
        }
        if increases >= MAX_INCREASES {
            trace.rows.push(row);
            return Err(Error::Optimizer {
                reason: format!("cost increased on {MAX_INCREASES} consecutive iterations"),
                trace: Box::new(trace),
            });
        }
        row.step = options.beta;
        trace.rows.push(row);
        let table = pathwise_minimizers(problem, &u, &ev, noise)?;
        let target = fit_to_class(&u, &ev.states, &table)?;
        u = u.blend(&target, options.beta)?;
        prev = Some(j);
    }
    unreachable!("loop returns on its last iteration")
}

fn pathwise_minimizers(problem: &ControlProblem, u: &ControlLaw, ev: &Evaluation, noise: &NoiseEnsemble) -> Result<PathTensor> {
    let states = &ev.states;
    let grid = states.grid();
    let n = grid.steps();
    let du = states.control_dim();
    let coeffs = problem.dynamics.coeffs.as_ref();
    let cost_fn = problem.cost.as_ref();
    let marks = noise.marks();
    let admissible = u.admissible();
    if let (Some(_), Some(qc)) = (coeffs.as_affine(), cost_fn.as_quadratic()) {
        // 𝓗 is quadratic in u with constant Hessian R + Rᵀ.
        let hess = &qc.control_weight + qc.control_weight.transpose();
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::Assumption("Hamiltonian is not strictly convex in u".into()))?;
        let mut table = hamiltonian_gradients(&problem.dynamics, cost_fn, states, &ev.adjoints, noise);
        for p in 0..states.paths() {
            for k in 0..n {
                let step = chol.solve(&DVector::from_column_slice(table.row(p, k)));
                let star = admissible.project(DVector::from_column_slice(states.controls().row(p, k)) - step);
                table.row_mut(p, k).copy_from_slice(star.as_slice());
            }
        }
        return Ok(table);
    }
    let mut table = PathTensor::zeros(states.paths(), n, du);
    let results: Vec<Result<()>> = table
        .as_mut_slice()
        .par_chunks_mut(n * du)
        .enumerate()
        .map(|(p, rows)| {
            for k in 0..n {
                let (t, x, uk) = (grid.time(k), states.state(p, k), states.control(p, k));
                let (ph, q, r) = (ev.adjoints.p_hat(p, k), ev.adjoints.q(p, k), ev.adjoints.r_all(p, k));
                let adj = AdjointPoint { p: &ph, q: &q, r: &r };
                let star = hamiltonian_minimizer(t, &x, &uk, adj, coeffs, cost_fn, marks, admissible)?;
                rows[k * du..(k + 1) * du].copy_from_slice(star.as_slice());
            }
            Ok(())
        })
        .collect();
    crate::forward::first_error(results)?;
    Ok(table)
}

/// Backtracking rule for the projected-gradient method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRule {
    pub initial: f64,
    pub shrink: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            initial: 0.5,
            shrink: 0.5,
            armijo: 1e-4,
            min_step: 1e-12,
        }
    }
}

/// Projected gradient descent `u ← Proj(u − γ Ĝ)` with `Ĝ` the class
/// projection of the pathwise `𝓗_u`, backtracking on `J` with common noise.
pub fn optimize_projected_gradient(
    problem: &ControlProblem,
    u0: &ControlLaw,
    rule: &StepRule,
    max_iter: usize,
    tol: f64,
    noise: &NoiseEnsemble,
) -> Result<(ControlLaw, OptimizationTrace)> {
    if u0.class() == ControlClass::Tabulated {
        return Err(Error::InvalidInput(
            "projected gradient needs an open-loop or linear-feedback control".into(),
        ));
    }
    if !(rule.initial > 0.0 && rule.shrink > 0.0 && rule.shrink < 1.0 && rule.min_step > 0.0) {
        return Err(Error::InvalidInput(format!("invalid step rule {rule:?}")));
    }
    let mut trace = OptimizationTrace::new("projected_gradient");
    let mut u = u0.clone();
    let mut ev = problem.evaluate(&u, noise)?;
    let mut prev: Option<f64> = None;
    for it in 0..=max_iter {
        let j = ev.cost.mean();
        let mut row = TraceRow {
            iteration: it,
            cost: j,
            stderr: ev.cost.stderr(),
            residual: ev.residual,
            step: 0.0,
        };
        let converged = ev.residual < tol && relative_change(prev, j) < tol;
        if converged || it == max_iter {
            trace.rows.push(row);
            trace.converged = converged;
            return Ok((u, trace));
        }

        let grads = hamiltonian_gradients(&problem.dynamics, problem.cost.as_ref(), &ev.states, &ev.adjoints, noise);
        let direction = fit_to_class(&u, &ev.states, &grads)?.with_admissible(AdmissibleSet::Unconstrained)?;
        let slope = descent_slope(&direction, &ev.states, &grads);

        let mut gamma = rule.initial;
        let accepted = loop {
            let candidate = u.add_scaled(&direction, -gamma)?;
            let states = problem.simulate(&candidate, noise)?;
            let jc = cost(&states, problem.cost.as_ref()).mean();
            if jc.is_finite() && jc < j - rule.armijo * gamma * slope {
                break (candidate, states);
            }
            gamma *= rule.shrink;
            if gamma < rule.min_step {
                row.step = gamma;
                trace.rows.push(row);
                return Err(Error::Optimizer {
                    reason: format!("step size underflow (γ < {:e}) at iteration {it}", rule.min_step),
                    trace: Box::new(trace),
                });
            }
        };
        row.step = gamma;
        trace.rows.push(row);
        let (candidate, states) = accepted;
        let adjoints = problem.adjoint(&states, noise)?;
        let residual = super::smp_residual(
            &problem.dynamics,
            problem.cost.as_ref(),
            &states,
            &adjoints,
            candidate.admissible(),
            noise,
        )?;
        ev = Evaluation {
            cost: cost(&states, problem.cost.as_ref()),
            states,
            adjoints,
            residual,
        };
        u = candidate;
        prev = Some(j);
    }
    unreachable!("loop returns on its last iteration")
}

/// `E Σ_k (Ĝ(X_k), 𝓗_u(t_k)) Δt`, the first-order decrease per unit step.
fn descent_slope(direction: &ControlLaw, states: &StateEnsemble, grads: &PathTensor) -> f64 {
    let n = states.grid().steps();
    let dt = states.grid().dt();
    let per_path: Vec<f64> = (0..states.paths())
        .into_par_iter()
        .map(|p| {
            let mut x = DVector::zeros(states.state_dim());
            let mut g = DVector::zeros(direction.control_dim());
            (0..n)
                .map(|k| {
                    x.copy_from_slice(states.states().row(p, k));
                    direction.eval_into(p, k, &x, &mut g);
                    g.iter().zip(grads.row(p, k)).map(|(a, b)| a * b).sum::<f64>() * dt
                })
                .sum()
        })
        .collect();
    stats::mean(&per_path)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::control::QuadraticCost;
    use crate::forward::{AffineCoefficients, AffineMap, Dynamics};
    use crate::noise::{sample_noise, MarkSpace, TimeGrid};
    use crate::triple::{GalerkinSpace, OperatorProcess, OperatorRole};

    /// `x' = u`, `x(0) = 0`, `l = u²`, `Φ = (x − 1)²`; optimum `u ≡ 1/2`.
    fn toy(n: usize) -> (ControlProblem, NoiseEnsemble) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let noise = sample_noise(grid, MarkSpace::empty(), 1, 0).unwrap();
        let space = GalerkinSpace::flat(1).unwrap();
        let mut c = AffineCoefficients::zero(1, 1, 0);
        c.drift = AffineMap::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DVector::zeros(1));
        let dynamics = Dynamics {
            a: OperatorProcess::zero(&space, OperatorRole::VToVStar),
            b: OperatorProcess::zero(&space, OperatorRole::VToH),
            space,
            coeffs: Arc::new(c),
            x0: DVector::zeros(1),
        };
        let cost = QuadraticCost::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1))
            .with_terminal_target(DVector::from_element(1, 1.0));
        (ControlProblem::new(dynamics, Arc::new(cost)), noise)
    }

    #[test]
    fn projected_gradient_solves_quadratic_toy() {
        let (problem, noise) = toy(20);
        let u0 = ControlLaw::constant_open_loop(*noise.grid(), 1, DVector::zeros(1));
        let (u, trace) = optimize_projected_gradient(&problem, &u0, &StepRule::default(), 100, 1e-14, &noise).unwrap();
        let ControlVariant::OpenLoop(values) = u.variant() else { panic!() };
        assert!(values.iter().all(|v| (v[0] - 0.5).abs() < 1e-6), "{values:?}");
        assert!((trace.last().unwrap().cost - 0.5).abs() < 1e-10);
    }

    #[test]
    fn hamiltonian_iteration_solves_quadratic_toy() {
        let (problem, noise) = toy(20);
        let u0 = ControlLaw::constant_open_loop(*noise.grid(), 1, DVector::zeros(1));
        let opts = HamiltonianIterationOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let (u, trace) = optimize_hamiltonian_iteration(&problem, &u0, &opts, &noise).unwrap();
        assert!(trace.converged);
        let ControlVariant::OpenLoop(values) = u.variant() else { panic!() };
        assert!(values.iter().all(|v| (v[0] - 0.5).abs() < 1e-9));
    }

    fn zero_coupling(paths: usize) -> (ControlProblem, NoiseEnsemble) {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![1.0]).unwrap(), paths, 4).unwrap();
        let space = GalerkinSpace::flat(1).unwrap();
        let mut c = AffineCoefficients::zero(1, 1, 1);
        c.diffusion.c[0] = 0.3;
        c.jumps[0].c[0] = 0.2;
        let dynamics = Dynamics {
            a: OperatorProcess::constant(&space, OperatorRole::VToVStar, DMatrix::from_element(1, 1, -1.0)).unwrap(),
            b: OperatorProcess::zero(&space, OperatorRole::VToH),
            space,
            coeffs: Arc::new(c),
            x0: DVector::from_element(1, 1.0),
        };
        (ControlProblem::new(dynamics, Arc::new(QuadraticCost::unit(1, 1))), noise)
    }

    #[test]
    fn zero_coupling_converges_in_one_step() {
        let (problem, noise) = zero_coupling(200);
        let u0 = ControlLaw::constant_feedback(*noise.grid(), DMatrix::from_element(1, 1, 0.4), DVector::from_element(1, -0.2)).unwrap();
        let opts = HamiltonianIterationOptions {
            beta: 1.0,
            ..Default::default()
        };
        let (u, trace) = optimize_hamiltonian_iteration(&problem, &u0, &opts, &noise).unwrap();
        assert!(trace.converged);
        // The first update lands on u = 0; the second evaluation confirms it.
        assert!(trace.rows[1].residual < 1e-24);
        assert_eq!(trace.updates(), 2);
        let ControlVariant::LinearFeedback { gains, offsets } = u.variant() else { panic!() };
        assert!(gains.iter().all(|g| g[(0, 0)].abs() < 1e-12));
        assert!(offsets.iter().all(|o| o[0].abs() < 1e-12));
    }

    #[test]
    fn zero_coupling_gradient_underflows_at_zero_tolerance() {
        let (problem, noise) = zero_coupling(50);
        let u0 = ControlLaw::zero_feedback(*noise.grid(), 1, 1);
        match optimize_projected_gradient(&problem, &u0, &StepRule::default(), 10, 0.0, &noise) {
            Err(Error::Optimizer { trace, reason }) => {
                assert!(reason.contains("underflow"));
                assert_eq!(trace.rows.len(), 1);
            }
            other => panic!("expected underflow, got {other:?}"),
        }
    }

    #[test]
    fn linear_fit_recovers_affine_table() {
        let (problem, noise) = zero_coupling(300);
        let law = ControlLaw::zero_feedback(*noise.grid(), 1, 1);
        let states = problem.simulate(&law, &noise).unwrap();
        let n = 16;
        let mut table = PathTensor::zeros(300, n, 1);
        for p in 0..300 {
            for k in 0..n {
                table.row_mut(p, k)[0] = -0.7 * states.state(p, k)[0] + 0.1 * k as f64;
            }
        }
        let fit = fit_to_class(&law, &states, &table).unwrap();
        let ControlVariant::LinearFeedback { gains, offsets } = fit.variant() else { panic!() };
        for k in 0..n {
            assert!((gains[k][(0, 0)] + 0.7).abs() < 1e-10, "k={k}");
            assert!((offsets[k][0] - 0.1 * k as f64).abs() < 1e-10);
        }
        let open = fit_to_class(&ControlLaw::constant_open_loop(*noise.grid(), 1, DVector::zeros(1)), &states, &table).unwrap();
        assert_eq!(open.class(), ControlClass::OpenLoop);
    }
}
