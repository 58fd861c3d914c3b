//! Numerical audits of the energy identity and the stability estimates.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::{solve_forward, Coefficients, Dynamics, PerturbedCoefficients, StateEnsemble};
use crate::control::ControlLaw;
use crate::noise::NoiseEnsemble;
use crate::{stats, Error, Result};

/// Discrete Itô energy balance on one path.
///
/// Returns `|‖X_n‖² − RHS|` where the right-hand side accumulates
/// `‖x0‖²`, `2⟨AX + b, X⟩Δt`, `2(BX + g, X)ΔW`, `‖BX + g‖²Δt` and the jump
/// contributions `Σ_i (‖σ_i‖² + 2(X, σ_i))ΔÑ_i + ‖σ_i‖²ν_iΔt`.
pub fn ito_energy_audit(dynamics: &Dynamics, states: &StateEnsemble, noise: &NoiseEnsemble, path: usize) -> Result<f64> {
    if path >= states.paths() || path >= noise.paths() {
        return Err(Error::OutOfRange {
            what: "path",
            index: path,
            len: states.paths().min(noise.paths()),
        });
    }
    if states.grid() != noise.grid() {
        return Err(Error::InvalidInput("state ensemble and noise use different grids".into()));
    }
    Ok(energy_residual(dynamics, states, noise, path))
}

fn energy_residual(dynamics: &Dynamics, states: &StateEnsemble, noise: &NoiseEnsemble, path: usize) -> f64 {
    let grid = noise.grid();
    let dt = grid.dt();
    let coeffs = dynamics.coeffs.as_ref();
    let marks = noise.marks();
    let mut rhs = dynamics.x0.norm_squared();
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let x = states.state(path, k);
        let u = states.control(path, k);
        let drift = dynamics.a.at(k) * &x + coeffs.drift(t, &x, &u);
        let diffusion = dynamics.b.at(k) * &x + coeffs.diffusion(t, &x, &u);
        rhs += 2.0 * drift.dot(&x) * dt;
        rhs += 2.0 * diffusion.dot(&x) * noise.dw(path, k);
        rhs += diffusion.norm_squared() * dt;
        for i in 0..marks.len() {
            let s = coeffs.jump(t, i, &x, &u);
            let sq = s.norm_squared();
            rhs += (sq + 2.0 * x.dot(&s)) * noise.compensated(path, k, i);
            rhs += sq * marks.weight(i) * dt;
        }
    }
    (states.state(path, grid.steps()).norm_squared() - rhs).abs()
}

/// Root-mean-square of the energy residual over all paths.
pub fn ito_energy_rms(dynamics: &Dynamics, states: &StateEnsemble, noise: &NoiseEnsemble) -> Result<f64> {
    if states.paths() != noise.paths() || states.grid() != noise.grid() {
        return Err(Error::InvalidInput("state ensemble does not match the noise".into()));
    }
    let sq: Vec<f64> = (0..states.paths())
        .into_par_iter()
        .map(|p| energy_residual(dynamics, states, noise, p).powi(2))
        .collect();
    Ok(stats::mean(&sq).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimateReport {
    /// `E sup_k ‖X_k‖_H²`.
    pub sup_h_sq: f64,
    /// `E Σ_k ‖X_k‖_V² Δt`.
    pub int_v_sq: f64,
    /// `‖x0‖² + E∫ ‖b(t,0)‖² + ‖g(t,0)‖² + Σ_i ‖σ(t,e_i,0)‖²ν_i dt`.
    pub driver_mass: f64,
    pub ratio: f64,
}

const RATIO_FLOOR: f64 = 1e-300;

/// Monte Carlo estimate of both sides of the a priori bound.
///
/// The coefficients at the zero state are evaluated with the realised control
/// process, which is what the state equation sees as its input.
pub fn estimate_apriori(dynamics: &Dynamics, states: &StateEnsemble, noise: &NoiseEnsemble) -> Result<EstimateReport> {
    if states.paths() != noise.paths() || states.grid() != noise.grid() {
        return Err(Error::InvalidInput("state ensemble does not match the noise".into()));
    }
    let grid = noise.grid();
    let dt = grid.dt();
    let n = grid.steps();
    let coeffs = dynamics.coeffs.as_ref();
    let space = &dynamics.space;
    let marks = noise.marks();
    let zero = DVector::zeros(dynamics.state_dim());

    let per_path: Vec<(f64, f64, f64)> = (0..states.paths())
        .into_par_iter()
        .map(|p| {
            let rows = states.states();
            let sup = (0..=n).map(|k| space.norm_h_sq(rows.row(p, k))).fold(0.0, f64::max);
            let int: f64 = (0..n).map(|k| space.norm_v_sq(rows.row(p, k)) * dt).sum();
            let driver: f64 = (0..n)
                .map(|k| {
                    let t = grid.time(k);
                    let u = states.control(p, k);
                    let mut v = coeffs.drift(t, &zero, &u).norm_squared() + coeffs.diffusion(t, &zero, &u).norm_squared();
                    for i in 0..marks.len() {
                        v += coeffs.jump(t, i, &zero, &u).norm_squared() * marks.weight(i);
                    }
                    v * dt
                })
                .sum();
            (sup, int, driver)
        })
        .collect();
    let column = |f: fn(&(f64, f64, f64)) -> f64| stats::mean(&per_path.iter().map(f).collect::<Vec<_>>());
    let sup_h_sq = column(|r| r.0);
    let int_v_sq = column(|r| r.1);
    let driver_mass = dynamics.x0.norm_squared() + column(|r| r.2);
    Ok(EstimateReport {
        sup_h_sq,
        int_v_sq,
        driver_mass,
        ratio: (sup_h_sq + int_v_sq) / driver_mass.max(RATIO_FLOOR),
    })
}

/// A perturbation direction for the continuous-dependence study: the
/// coefficients become `base + δ·coeffs` and the initial datum `x0 + δ·x0`.
#[derive(Clone)]
pub struct Perturbation {
    pub coeffs: Option<Arc<dyn Coefficients>>,
    pub x0: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DependenceRow {
    pub delta: f64,
    /// `E sup_k ‖X_k − X̄_k‖_H²`.
    pub sup_h_sq: f64,
    /// `E Σ_k ‖X_k − X̄_k‖_V² Δt`.
    pub int_v_sq: f64,
    /// Data term of the stability bound, evaluated along the unperturbed solution.
    pub data_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DependenceTable {
    pub rows: Vec<DependenceRow>,
    /// Log-log slope of `sup_h_sq` against `δ` over the rows with `δ > 0`.
    pub slope_sup: f64,
    /// Log-log slope of `data_term` against `δ`.
    pub slope_data: f64,
}

/// Solves the base and the perturbed problems on common noise for every scale.
pub fn continuous_dependence_experiment(
    dynamics: &Dynamics,
    control: &ControlLaw,
    perturbation: &Perturbation,
    scales: &[f64],
    noise: &NoiseEnsemble,
) -> Result<DependenceTable> {
    if perturbation.x0.len() != dynamics.state_dim() {
        return Err(Error::Dimension {
            what: "initial perturbation",
            expected: dynamics.state_dim(),
            got: perturbation.x0.len(),
        });
    }
    if let Some(c) = &perturbation.coeffs {
        if c.state_dim() != dynamics.state_dim() || c.control_dim() != dynamics.control_dim() || c.mark_count() != dynamics.coeffs.mark_count() {
            return Err(Error::InvalidInput("perturbation coefficients have the wrong shape".into()));
        }
    }
    let base = solve_forward(dynamics, control, noise)?;
    let grid = noise.grid();
    let dt = grid.dt();
    let n = grid.steps();
    let marks = noise.marks();
    let space = &dynamics.space;

    // Data-term density of the unit perturbation along the base paths.
    let unit_data: f64 = match &perturbation.coeffs {
        None => 0.0,
        Some(delta) => {
            let per_path: Vec<f64> = (0..base.paths())
                .into_par_iter()
                .map(|p| {
                    (0..n)
                        .map(|k| {
                            let t = grid.time(k);
                            let x = base.state(p, k);
                            let u = base.control(p, k);
                            let mut v = delta.drift(t, &x, &u).norm_squared() + delta.diffusion(t, &x, &u).norm_squared();
                            for i in 0..marks.len() {
                                v += delta.jump(t, i, &x, &u).norm_squared() * marks.weight(i);
                            }
                            v * dt
                        })
                        .sum()
                })
                .collect();
            stats::mean(&per_path)
        }
    };

    let mut rows = Vec::with_capacity(scales.len());
    for &delta in scales {
        if !delta.is_finite() {
            return Err(Error::InvalidInput(format!("perturbation scale {delta} is not finite")));
        }
        let coeffs: Arc<dyn Coefficients> = match &perturbation.coeffs {
            Some(d) if delta != 0.0 => Arc::new(PerturbedCoefficients {
                base: dynamics.coeffs.clone(),
                delta: d.clone(),
                scale: delta,
            }),
            _ => dynamics.coeffs.clone(),
        };
        let perturbed = Dynamics {
            coeffs,
            x0: &dynamics.x0 + delta * &perturbation.x0,
            ..dynamics.clone()
        };
        let other = solve_forward(&perturbed, control, noise)?;
        let diffs: Vec<(f64, f64)> = (0..base.paths())
            .into_par_iter()
            .map(|p| {
                let diff = |k: usize| -> Vec<f64> {
                    base.states()
                        .row(p, k)
                        .iter()
                        .zip(other.states().row(p, k))
                        .map(|(a, b)| a - b)
                        .collect()
                };
                let sup = (0..=n).map(|k| space.norm_h_sq(&diff(k))).fold(0.0, f64::max);
                let int: f64 = (0..n).map(|k| space.norm_v_sq(&diff(k)) * dt).sum();
                (sup, int)
            })
            .collect();
        let sups: Vec<f64> = diffs.iter().map(|d| d.0).collect();
        let ints: Vec<f64> = diffs.iter().map(|d| d.1).collect();
        rows.push(DependenceRow {
            delta,
            sup_h_sq: stats::mean(&sups),
            int_v_sq: stats::mean(&ints),
            data_term: delta * delta * (perturbation.x0.norm_squared() + unit_data),
        });
    }

    let fit = |f: fn(&DependenceRow) -> f64| {
        let used: Vec<&DependenceRow> = rows.iter().filter(|r| r.delta > 0.0 && f(r) > 0.0).collect();
        if used.len() < 2 {
            return f64::NAN;
        }
        let x: Vec<f64> = used.iter().map(|r| r.delta).collect();
        let y: Vec<f64> = used.iter().map(|r| f(r)).collect();
        stats::log_log_slope(&x, &y)
    };
    let slope_sup = fit(|r| r.sup_h_sq);
    let slope_data = fit(|r| r.data_term);
    Ok(DependenceTable {
        rows,
        slope_sup,
        slope_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::tests::scalar_dynamics;
    use crate::forward::{AffineCoefficients, AffineMap};
    use crate::noise::{sample_noise, MarkSpace, TimeGrid};
    use nalgebra::DMatrix;

    fn lq_like(n: usize, paths: usize, seed: u64) -> (Dynamics, ControlLaw, NoiseEnsemble) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![1.0]).unwrap(), paths, seed).unwrap();
        let gamma = DMatrix::from_element(1, 1, 0.1);
        let d = scalar_dynamics(-1.0, 0.5, AffineCoefficients::additive_control_with_jump_gain(1, &[gamma]), 1.0);
        let law = ControlLaw::constant_feedback(grid, DMatrix::from_element(1, 1, -0.5), DVector::zeros(1)).unwrap();
        (d, law, noise)
    }

    #[test]
    fn zero_coefficients_give_zero_residual() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![2.0]).unwrap(), 5, 1).unwrap();
        let d = scalar_dynamics(0.0, 0.0, AffineCoefficients::zero(1, 1, 1), 0.7);
        let s = solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise).unwrap();
        for p in 0..5 {
            assert_eq!(ito_energy_audit(&d, &s, &noise, p).unwrap(), 0.0);
        }
        assert!(ito_energy_audit(&d, &s, &noise, 5).is_err());
    }

    #[test]
    fn deterministic_residual_is_first_order() {
        let mut res = Vec::new();
        let ns = [32usize, 64, 128, 256];
        for &n in &ns {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let noise = sample_noise(grid, MarkSpace::empty(), 1, 0).unwrap();
            let d = scalar_dynamics(-1.0, 0.0, AffineCoefficients::zero(1, 1, 0), 1.0);
            let s = solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise).unwrap();
            res.push(ito_energy_audit(&d, &s, &noise, 0).unwrap());
        }
        let x: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
        assert!(stats::log_log_slope(&x, &res) > 0.9);
    }

    #[test]
    fn stochastic_residual_decays() {
        let ns = [32usize, 64, 128, 256];
        let mut res = Vec::new();
        for &n in &ns {
            let (d, law, noise) = lq_like(n, 400, 5);
            let s = solve_forward(&d, &law, &noise).unwrap();
            res.push(ito_energy_rms(&d, &s, &noise).unwrap());
        }
        let x: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
        assert!(stats::log_log_slope(&x, &res) >= 0.4, "{res:?}");
    }

    #[test]
    fn zero_data_gives_zero_estimate() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![1.0]).unwrap(), 10, 2).unwrap();
        let d = scalar_dynamics(-1.0, 0.5, AffineCoefficients::zero(1, 1, 1), 0.0);
        let s = solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise).unwrap();
        let r = estimate_apriori(&d, &s, &noise).unwrap();
        assert_eq!((r.sup_h_sq, r.int_v_sq, r.driver_mass), (0.0, 0.0, 0.0));
    }

    #[test]
    fn estimate_scales_quadratically_with_initial_datum() {
        let (d, law, noise) = lq_like(32, 100, 3);
        let s1 = solve_forward(&d, &law, &noise).unwrap();
        let d3 = Dynamics {
            x0: DVector::from_element(1, 3.0),
            ..d.clone()
        };
        let s3 = solve_forward(&d3, &law, &noise).unwrap();
        let r1 = estimate_apriori(&d, &s1, &noise).unwrap();
        let r3 = estimate_apriori(&d3, &s3, &noise).unwrap();
        assert!((r3.sup_h_sq / r1.sup_h_sq - 9.0).abs() < 1e-9);
        assert!(r1.ratio.is_finite() && r1.ratio > 0.0);
    }

    #[test]
    fn constant_drift_shift_has_quadratic_dependence() {
        let (d, law, noise) = lq_like(64, 500, 8);
        let mut shift = AffineCoefficients::zero(1, 1, 1);
        shift.drift = AffineMap::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DVector::from_element(1, 1.0));
        let pert = Perturbation {
            coeffs: Some(Arc::new(shift)),
            x0: DVector::zeros(1),
        };
        let table = continuous_dependence_experiment(&d, &law, &pert, &[0.0, 0.1, 0.05, 0.025], &noise).unwrap();
        assert_eq!(table.rows[0].sup_h_sq, 0.0);
        assert!((table.slope_sup - 2.0).abs() < 0.1, "slope {}", table.slope_sup);
        assert!((table.slope_data - 2.0).abs() < 1e-9);
    }

    #[test]
    fn initial_shift_is_exactly_linear() {
        let (d, law, noise) = lq_like(32, 200, 4);
        let pert = Perturbation {
            coeffs: None,
            x0: DVector::from_element(1, 1.0),
        };
        let table = continuous_dependence_experiment(&d, &law, &pert, &[0.1, 0.05, 0.025], &noise).unwrap();
        let normalized: Vec<f64> = table.rows.iter().map(|r| r.sup_h_sq / (r.delta * r.delta)).collect();
        for v in &normalized {
            assert!((v / normalized[0] - 1.0).abs() < 0.05);
        }
    }
}
