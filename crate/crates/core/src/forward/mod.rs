//! Forward state equation
//!
//! ```text
//! dX = [A X + b(t, X, u)] dt + [B X + g(t, X, u)] dW + Σ_i σ(t, e_i, X, u) (dN_i − ν_i dt)
//! ```
//!
//! discretised by Euler steps that are implicit in `A` only:
//! `(I − Δt A(t_{k+1})) X_{k+1} = X_k + b Δt + (B X_k + g) ΔW_k + Σ_i σ_i (ΔN_{k,i} − ν_i Δt)`.

mod audit;
mod coefficients;
pub(crate) mod io;
mod picard;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

pub use audit::{
    continuous_dependence_experiment, estimate_apriori, ito_energy_audit, ito_energy_rms, DependenceRow,
    DependenceTable, EstimateReport, Perturbation,
};
pub use coefficients::{derivative_mismatch, AffineCoefficients, AffineMap, Coefficients, PerturbedCoefficients};
pub use io::{read_states_cache, write_states_cache, write_states_csv};
pub use picard::{solve_forward_picard, PicardOptions, PicardStage, PicardTrace};

use crate::control::ControlLaw;
use crate::noise::{NoiseEnsemble, TimeGrid};
use crate::stats;
use crate::triple::{GalerkinSpace, OperatorProcess};
use crate::{Error, PathTensor, Result};

/// Paths are abandoned once `‖X_k‖_H` exceeds this.
pub const BLOW_UP_NORM: f64 = 1e8;

/// Everything that defines the controlled state equation except the noise.
#[derive(Clone)]
pub struct Dynamics {
    pub space: GalerkinSpace,
    pub a: OperatorProcess,
    pub b: OperatorProcess,
    pub coeffs: Arc<dyn Coefficients>,
    pub x0: DVector<f64>,
}

impl Dynamics {
    pub fn state_dim(&self) -> usize {
        self.space.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.coeffs.control_dim()
    }

    pub fn check(&self, noise: &NoiseEnsemble) -> Result<()> {
        let n = self.space.dim();
        for (what, got) in [
            ("A dimension", self.a.dim()),
            ("B dimension", self.b.dim()),
            ("coefficient state dimension", self.coeffs.state_dim()),
            ("initial datum", self.x0.len()),
        ] {
            if got != n {
                return Err(Error::Dimension { what, expected: n, got });
            }
        }
        if self.coeffs.mark_count() != noise.marks().len() {
            return Err(Error::Dimension {
                what: "coefficient mark count",
                expected: noise.marks().len(),
                got: self.coeffs.mark_count(),
            });
        }
        if self.coeffs.control_dim() == 0 {
            return Err(Error::InvalidInput("control dimension must be positive".into()));
        }
        self.a.check_grid(noise.grid())?;
        self.b.check_grid(noise.grid())?;
        Ok(())
    }

    pub fn with_coefficients(&self, coeffs: Arc<dyn Coefficients>) -> Self {
        Self {
            coeffs,
            ..self.clone()
        }
    }
}

/// Resolvents `R_k = (I − Δt A(t_{k+1}))⁻¹`, cached once when `A` is constant.
pub(crate) struct Resolvents {
    mats: Vec<DMatrix<f64>>,
}

impl Resolvents {
    pub(crate) fn new(a: &OperatorProcess, grid: &TimeGrid) -> Result<Self> {
        let n = a.dim();
        let dt = grid.dt();
        let count = if a.is_time_invariant() { 1 } else { grid.steps() };
        let mats = (0..count)
            .map(|k| {
                let m = DMatrix::identity(n, n) - dt * a.at(k + 1);
                m.try_inverse().ok_or(Error::SingularStep { step: k })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mats })
    }

    #[inline]
    pub(crate) fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.mats[k.min(self.mats.len() - 1)]
    }
}

/// Monte Carlo ensemble of state paths together with the realised controls.
#[derive(Clone, Debug, PartialEq)]
pub struct StateEnsemble {
    grid: TimeGrid,
    /// `paths × (n + 1) × N`.
    states: PathTensor,
    /// `paths × n × U`, the control applied on `[t_k, t_{k+1})`.
    controls: PathTensor,
}

impl StateEnsemble {
    pub(crate) fn from_parts(grid: TimeGrid, states: PathTensor, controls: PathTensor) -> Self {
        Self { grid, states, controls }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.states.paths()
    }

    pub fn state_dim(&self) -> usize {
        self.states.width()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.width()
    }

    pub fn states(&self) -> &PathTensor {
        &self.states
    }

    pub fn controls(&self) -> &PathTensor {
        &self.controls
    }

    pub fn state(&self, path: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.states.row(path, k))
    }

    pub fn control(&self, path: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.controls.row(path, k))
    }

    /// The realised control process as a tabulated (adapted) control law.
    pub fn realized_control(&self) -> ControlLaw {
        ControlLaw::from_table(self.grid, self.state_dim(), self.controls.clone())
    }
}

/// `sqrt(E Σ_{k=1..n} Δt ‖a_k − b_k‖_H²)` over the ensemble.
pub fn m2_distance(a: &PathTensor, b: &PathTensor, grid: &TimeGrid) -> f64 {
    let dt = grid.dt();
    let per_path: Vec<f64> = (0..a.paths())
        .into_par_iter()
        .map(|p| {
            (1..a.len())
                .map(|k| {
                    a.row(p, k)
                        .iter()
                        .zip(b.row(p, k))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        * dt
                })
                .sum()
        })
        .collect();
    stats::mean(&per_path).sqrt()
}

pub(crate) fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect::<Result<Vec<()>>>().map(|_| ())
}

/// One drift-implicit Euler step.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn euler_step(
    resolvent: &DMatrix<f64>,
    x: &DVector<f64>,
    drift: &DVector<f64>,
    diffusion: &DVector<f64>,
    jumps: &[DVector<f64>],
    noise: &NoiseEnsemble,
    path: usize,
    k: usize,
) -> DVector<f64> {
    let dt = noise.grid().dt();
    let mut rhs = x + drift * dt + diffusion * noise.dw(path, k);
    for (i, s) in jumps.iter().enumerate() {
        rhs += s * noise.compensated(path, k, i);
    }
    resolvent * rhs
}

/// Solves the state equation on every path of `noise` under `control`.
pub fn solve_forward(dynamics: &Dynamics, control: &ControlLaw, noise: &NoiseEnsemble) -> Result<StateEnsemble> {
    dynamics.check(noise)?;
    control.check_compatible(noise, dynamics.state_dim(), dynamics.control_dim())?;
    let grid = *noise.grid();
    let res = Resolvents::new(&dynamics.a, &grid)?;
    let (n, dim, du) = (grid.steps(), dynamics.state_dim(), dynamics.control_dim());
    let mut states = PathTensor::zeros(noise.paths(), n + 1, dim);
    let mut controls = PathTensor::zeros(noise.paths(), n, du);
    let coeffs = dynamics.coeffs.as_ref();
    let m = noise.marks().len();

    let results: Vec<Result<()>> = states
        .as_mut_slice()
        .par_chunks_mut((n + 1) * dim)
        .zip(controls.as_mut_slice().par_chunks_mut(n * du))
        .enumerate()
        .map(|(path, (xs, us))| {
            if let Some(affine) = coeffs.as_affine() {
                return affine_path(dynamics, affine, &res, control, noise, path, xs, us);
            }
            let mut x = dynamics.x0.clone();
            xs[..dim].copy_from_slice(x.as_slice());
            for k in 0..n {
                let t = grid.time(k);
                let u = control.eval(path, k, &x);
                let drift = coeffs.drift(t, &x, &u);
                let diffusion = dynamics.b.at(k) * &x + coeffs.diffusion(t, &x, &u);
                let jumps: Vec<DVector<f64>> = (0..m).map(|i| coeffs.jump(t, i, &x, &u)).collect();
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
    Ok(StateEnsemble { grid, states, controls })
}

/// The Euler recursion for affine coefficients with reused buffers.
#[allow(clippy::too_many_arguments)]
fn affine_path(
    dynamics: &Dynamics,
    c: &AffineCoefficients,
    res: &Resolvents,
    control: &ControlLaw,
    noise: &NoiseEnsemble,
    path: usize,
    xs: &mut [f64],
    us: &mut [f64],
) -> Result<()> {
    let grid = noise.grid();
    let (n, dt) = (grid.steps(), grid.dt());
    let (dim, du) = (dynamics.state_dim(), dynamics.control_dim());
    let mut x = dynamics.x0.clone();
    let mut u = DVector::zeros(du);
    let mut rhs = DVector::zeros(dim);
    xs[..dim].copy_from_slice(x.as_slice());
    let add = |rhs: &mut DVector<f64>, map: &AffineMap, w: f64, x: &DVector<f64>, u: &DVector<f64>| {
        rhs.gemv(w, &map.x, x, 1.0);
        rhs.gemv(w, &map.u, u, 1.0);
        rhs.axpy(w, &map.c, 1.0);
    };
    for k in 0..n {
        control.eval_into(path, k, &x, &mut u);
        rhs.copy_from(&x);
        add(&mut rhs, &c.drift, dt, &x, &u);
        let dw = noise.dw(path, k);
        rhs.gemv(dw, dynamics.b.at(k), &x, 1.0);
        add(&mut rhs, &c.diffusion, dw, &x, &u);
        for (i, jump) in c.jumps.iter().enumerate() {
            add(&mut rhs, jump, noise.compensated(path, k, i), &x, &u);
        }
        x.gemv(1.0, res.at(k), &rhs, 0.0);
        let norm = x.norm();
        if !norm.is_finite() || norm > BLOW_UP_NORM {
            return Err(Error::BlowUp {
                path,
                step: k + 1,
                norm,
            });
        }
        us[k * du..(k + 1) * du].copy_from_slice(u.as_slice());
        xs[(k + 1) * dim..(k + 2) * dim].copy_from_slice(x.as_slice());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample_noise, MarkSpace};
    use crate::triple::OperatorRole;

    pub(crate) fn scalar_dynamics(a: f64, b: f64, coeffs: AffineCoefficients, x0: f64) -> Dynamics {
        let space = GalerkinSpace::flat(1).unwrap();
        Dynamics {
            a: OperatorProcess::constant(&space, OperatorRole::VToVStar, DMatrix::from_element(1, 1, a)).unwrap(),
            b: OperatorProcess::constant(&space, OperatorRole::VToH, DMatrix::from_element(1, 1, b)).unwrap(),
            space,
            coeffs: Arc::new(coeffs),
            x0: DVector::from_element(1, x0),
        }
    }

    #[test]
    fn zero_dynamics_keep_initial_datum() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![1.0]).unwrap(), 20, 1).unwrap();
        let space = GalerkinSpace::flat(3).unwrap();
        let dynamics = Dynamics {
            a: OperatorProcess::zero(&space, OperatorRole::VToVStar),
            b: OperatorProcess::zero(&space, OperatorRole::VToH),
            space,
            coeffs: Arc::new(AffineCoefficients::zero(3, 1, 1)),
            x0: DVector::from_vec(vec![0.3, -1.0, 2.0]),
        };
        let states = solve_forward(&dynamics, &ControlLaw::zero_feedback(grid, 3, 1), &noise).unwrap();
        for p in 0..20 {
            for k in 0..=16 {
                assert_eq!(states.state(p, k), dynamics.x0);
            }
        }
    }

    #[test]
    fn deterministic_decay_is_first_order() {
        let mut errs = Vec::new();
        for n in [64, 128, 256] {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let noise = sample_noise(grid, MarkSpace::empty(), 1, 0).unwrap();
            let d = scalar_dynamics(-1.0, 0.0, AffineCoefficients::zero(1, 1, 0), 1.0);
            let s = solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise).unwrap();
            let err = (s.state(0, n)[0] - (-1.0f64).exp()).abs();
            assert!(err <= 2.0 * grid.dt());
            errs.push(err);
        }
        let slope = stats::log_log_slope(&[64.0, 128.0, 256.0], &errs);
        assert!((slope + 1.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn compensated_poisson_is_reproduced_exactly() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![1.0]).unwrap(), 30, 4).unwrap();
        let mut c = AffineCoefficients::zero(1, 1, 1);
        c.jumps[0].c[0] = 1.0;
        let d = scalar_dynamics(0.0, 0.0, c, 0.0);
        let s = solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise).unwrap();
        for p in 0..30 {
            let mut count = 0u32;
            for k in 0..=50 {
                let exact = count as f64 - grid.time(k);
                assert!((s.state(p, k)[0] - exact).abs() < 1e-12);
                if k < 50 {
                    count += noise.jump_count(p, k, 0);
                }
            }
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let grid = TimeGrid::new(10.0, 10).unwrap();
        let noise = sample_noise(grid, MarkSpace::empty(), 2, 0).unwrap();
        let mut c = AffineCoefficients::zero(1, 1, 0);
        c.drift.x[(0, 0)] = 20.0;
        let d = scalar_dynamics(0.0, 0.0, c, 1.0);
        match solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise) {
            Err(Error::BlowUp { path, .. }) => assert_eq!(path, 0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn singular_implicit_matrix_is_reported() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = sample_noise(grid, MarkSpace::empty(), 1, 0).unwrap();
        // I − Δt·A = 0 for A = 1/Δt.
        let d = scalar_dynamics(4.0, 0.0, AffineCoefficients::zero(1, 1, 0), 1.0);
        assert!(matches!(
            solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise),
            Err(Error::SingularStep { step: 0 })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![1.0]).unwrap(), 1, 0).unwrap();
        let d = scalar_dynamics(0.0, 0.0, AffineCoefficients::zero(1, 1, 0), 1.0);
        assert!(solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise).is_err());
    }
}
