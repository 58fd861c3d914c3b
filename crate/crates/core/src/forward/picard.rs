//! Parameter-extension solver.
//!
//! The nonlinear part `N(x) = (b, g, σ)(x, u(x))` is switched on in
//! `rho_steps` increments. At stage `ρ_s = s/S` the map
//!
//! ```text
//! Γ(x) = solution of the linear equation driven by ρ_{s−1}·N(X) + (ρ_s − ρ_{s−1})·N(x)
//! ```
//!
//! is iterated from the previous stage's fixed point until successive
//! iterates are closer than `tol` in the ensemble M² norm.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::{euler_step, first_error, m2_distance, Dynamics, Resolvents, StateEnsemble, BLOW_UP_NORM};
use crate::control::ControlLaw;
use crate::noise::NoiseEnsemble;
use crate::{Error, PathTensor, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardOptions {
    pub rho_steps: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            rho_steps: 4,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

impl PicardOptions {
    /// Increments no larger than `1 / (2√K)` for an empirical stability constant `K`.
    pub fn from_stability_constant(k_hat: f64, tol: f64, max_iter: usize) -> Self {
        let steps = if k_hat.is_finite() && k_hat > 0.0 {
            (2.0 * k_hat.sqrt()).ceil() as usize
        } else {
            0
        };
        Self {
            rho_steps: steps.max(4),
            tol,
            max_iter,
        }
    }
}

/// Iterate distances recorded at one value of `ρ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PicardStage {
    pub rho: f64,
    pub distances: Vec<f64>,
}

impl PicardStage {
    /// Geometric-mean ratio of successive distances, ignoring the tail at
    /// the floating-point floor.
    pub fn contraction_factor(&self) -> f64 {
        let floor = 1e-14 * self.distances.first().copied().unwrap_or(0.0).max(1e-300);
        let used: Vec<f64> = self.distances.iter().copied().take_while(|d| *d > floor).collect();
        match used.len() {
            0 | 1 => {
                if self.distances.len() > 1 {
                    0.0
                } else {
                    f64::NAN
                }
            }
            len => (used[len - 1] / used[0]).powf(1.0 / (len - 1) as f64),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PicardTrace {
    pub stages: Vec<PicardStage>,
}

impl PicardTrace {
    pub fn iterations(&self) -> usize {
        self.stages.iter().map(|s| s.distances.len()).sum()
    }

    /// Worst measured contraction factor over all stages that took more than
    /// one iteration; zero when every stage converged immediately.
    pub fn contraction_factor(&self) -> f64 {
        self.stages
            .iter()
            .map(PicardStage::contraction_factor)
            .filter(|f| f.is_finite())
            .fold(0.0, f64::max)
    }
}

/// Solves the state equation through the parameter-extension homotopy.
pub fn solve_forward_picard(
    dynamics: &Dynamics,
    control: &ControlLaw,
    noise: &NoiseEnsemble,
    options: &PicardOptions,
) -> Result<(StateEnsemble, PicardTrace)> {
    if options.rho_steps == 0 || options.max_iter == 0 || options.tol.is_nan() || options.tol < 0.0 {
        return Err(Error::InvalidInput(format!("invalid Picard options {options:?}")));
    }
    dynamics.check(noise)?;
    control.check_compatible(noise, dynamics.state_dim(), dynamics.control_dim())?;
    let grid = *noise.grid();
    let res = Resolvents::new(&dynamics.a, &grid)?;

    // ρ = 0: the purely linear equation, which does not depend on the iterate.
    let zero = PathTensor::zeros(noise.paths(), grid.steps() + 1, dynamics.state_dim());
    let (mut current, mut controls) = gamma(dynamics, control, noise, &res, &zero, 0.0, 0.0)?;

    let mut trace = PicardTrace::default();
    let steps = options.rho_steps;
    for s in 1..=steps {
        let rho0 = (s - 1) as f64 / steps as f64;
        let rho = s as f64 / steps as f64;
        let mut stage = PicardStage {
            rho,
            distances: Vec::new(),
        };
        loop {
            let (next, next_controls) = gamma(dynamics, control, noise, &res, &current, rho0, rho - rho0)?;
            let d = m2_distance(&next, &current, &grid);
            stage.distances.push(d);
            current = next;
            controls = next_controls;
            if d < options.tol {
                break;
            }
            if stage.distances.len() >= options.max_iter || !d.is_finite() {
                return Err(Error::PicardDiverged {
                    rho,
                    max_iter: options.max_iter,
                    distance: d,
                    factor: stage.contraction_factor(),
                });
            }
        }
        trace.stages.push(stage);
    }
    Ok((StateEnsemble::from_parts(grid, current, controls), trace))
}

/// One application of the frozen-argument map.
fn gamma(
    dynamics: &Dynamics,
    control: &ControlLaw,
    noise: &NoiseEnsemble,
    res: &Resolvents,
    frozen: &PathTensor,
    rho0: f64,
    drho: f64,
) -> Result<(PathTensor, PathTensor)> {
    let grid = noise.grid();
    let (n, dim, du) = (grid.steps(), dynamics.state_dim(), dynamics.control_dim());
    let m = noise.marks().len();
    let coeffs = dynamics.coeffs.as_ref();
    let mut states = PathTensor::zeros(noise.paths(), n + 1, dim);
    let mut controls = PathTensor::zeros(noise.paths(), n, du);

    let results: Vec<Result<()>> = states
        .as_mut_slice()
        .par_chunks_mut((n + 1) * dim)
        .zip(controls.as_mut_slice().par_chunks_mut(n * du))
        .enumerate()
        .map(|(path, (xs, us))| {
            let mut x = dynamics.x0.clone();
            xs[..dim].copy_from_slice(x.as_slice());
            for k in 0..n {
                let t = grid.time(k);
                let u = control.eval(path, k, &x);
                let mut drift = DVector::zeros(dim);
                let mut diffusion = dynamics.b.at(k) * &x;
                let mut jumps = vec![DVector::zeros(dim); m];
                if rho0 != 0.0 {
                    drift += rho0 * coeffs.drift(t, &x, &u);
                    diffusion += rho0 * coeffs.diffusion(t, &x, &u);
                    for (i, s) in jumps.iter_mut().enumerate() {
                        *s += rho0 * coeffs.jump(t, i, &x, &u);
                    }
                }
                if drho != 0.0 {
                    let y = DVector::from_column_slice(frozen.row(path, k));
                    let v = control.eval(path, k, &y);
                    drift += drho * coeffs.drift(t, &y, &v);
                    diffusion += drho * coeffs.diffusion(t, &y, &v);
                    for (i, s) in jumps.iter_mut().enumerate() {
                        *s += drho * coeffs.jump(t, i, &y, &v);
                    }
                }
                let next = euler_step(res.at(k), &x, &drift, &diffusion, &jumps, noise, path, k);
                let norm = next.norm();
                if !norm.is_finite() || norm > BLOW_UP_NORM {
                    return Err(Error::BlowUp {
                        path,
                        step: k + 1,
                        norm,
                    });
                }
                us[k * du..(k + 1) * du].copy_from_slice(u.as_slice());
                xs[(k + 1) * dim..(k + 2) * dim].copy_from_slice(next.as_slice());
                x = next;
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok((states, controls))
}
