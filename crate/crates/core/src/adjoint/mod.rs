//! Adjoint backward equation
//!
//! ```text
//! dp = −[A*p + b_x*p + B*q + g_x*q + Σ_i σ_x*(e_i) r_i ν_i + l_x] dt + q dW + Σ_i r_i dÑ_i,
//! p(T) = Φ_x(X(T)),
//! ```
//!
//! solved backward on a simulated forward ensemble. The discrete recursion is
//! the exact dual of the drift-implicit forward step: with
//! `R_k = (I − Δt A(t_{k+1}))⁻¹` and `p̃ = R_kᵀ p_{k+1}`,
//!
//! - `p̂_k` is the regression of `p̃` on features of `X_k`,
//! - `(q_k, r_k)` come from regressing the residual `p̃ − p̂_k` jointly on the
//!   features multiplied by `ΔW_k` and by each `ΔÑ_{k,i}`,
//! - `p_k = p̂_k + Δt [b_x*p̂_k + B*q_k + g_x*q_k + Σ_i σ_x*r_i ν_i + l_x]`.
//!
//! `A` enters through `R_kᵀ` rather than an explicit `A*p̂` term.

mod riccati;

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

pub use riccati::{lq_adjoint_from_riccati, solve_riccati_lq, RiccatiSolution};

use crate::control::CostFunctional;
use crate::forward::{Dynamics, Resolvents, StateEnsemble};
use crate::noise::{MarkSpace, NoiseEnsemble, TimeGrid};
use crate::regression::{least_squares, FeatureMap};
use crate::triple::GalerkinSpace;
use crate::{stats, Error, PathTensor, Result};

/// Features used for conditional expectations given `X_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionBasis {
    /// `(1, x_1, …, x_N)`.
    Affine,
    /// Affine features plus all monomials `x_i x_j`, `i ≤ j`.
    Quadratic,
}

impl RegressionBasis {
    pub fn degree(self) -> usize {
        match self {
            RegressionBasis::Affine => 1,
            RegressionBasis::Quadratic => 2,
        }
    }
}

/// Adjoint triple `(p, q, r)` on every path of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointEnsemble {
    grid: TimeGrid,
    marks: usize,
    /// `paths × (n + 1) × N`.
    p: PathTensor,
    /// `paths × n × N`, the conditional expectation `E[R_kᵀ p_{k+1} | X_k]`.
    p_hat: PathTensor,
    /// `paths × n × N`.
    q: PathTensor,
    /// `paths × n × (m·N)`, mark `i` in columns `i·N .. (i+1)·N`.
    r: PathTensor,
}

impl AdjointEnsemble {
    pub(crate) fn from_parts(grid: TimeGrid, marks: usize, p: PathTensor, p_hat: PathTensor, q: PathTensor, r: PathTensor) -> Self {
        Self {
            grid,
            marks,
            p,
            p_hat,
            q,
            r,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.p.paths()
    }

    pub fn state_dim(&self) -> usize {
        self.p.width()
    }

    pub fn mark_count(&self) -> usize {
        self.marks
    }

    pub fn p_hat_tensor(&self) -> &PathTensor {
        &self.p_hat
    }

    pub fn p_tensor(&self) -> &PathTensor {
        &self.p
    }

    pub fn q_tensor(&self) -> &PathTensor {
        &self.q
    }

    pub fn r_tensor(&self) -> &PathTensor {
        &self.r
    }

    pub fn p(&self, path: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.p.row(path, k))
    }

    /// The adjoint value paired with the control on `[t_k, t_{k+1})` in the
    /// Hamiltonian; equals `p_k` up to `O(Δt)`.
    pub fn p_hat(&self, path: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.p_hat.row(path, k))
    }

    pub fn q(&self, path: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.q.row(path, k))
    }

    pub fn r(&self, path: usize, k: usize, mark: usize) -> DVector<f64> {
        let n = self.state_dim();
        DVector::from_column_slice(&self.r.row(path, k)[mark * n..(mark + 1) * n])
    }

    pub fn r_all(&self, path: usize, k: usize) -> Vec<DVector<f64>> {
        (0..self.marks).map(|i| self.r(path, k, i)).collect()
    }
}

/// Backward regression solver for the adjoint equation.
pub fn solve_bsee_regression(
    dynamics: &Dynamics,
    cost: &dyn CostFunctional,
    states: &StateEnsemble,
    noise: &NoiseEnsemble,
    basis: RegressionBasis,
) -> Result<AdjointEnsemble> {
    if states.paths() != noise.paths() || states.grid() != noise.grid() {
        return Err(Error::InvalidInput("state ensemble does not match the noise".into()));
    }
    if states.state_dim() != dynamics.state_dim() || states.control_dim() != dynamics.control_dim() {
        return Err(Error::Dimension {
            what: "state ensemble dimension",
            expected: dynamics.state_dim(),
            got: states.state_dim(),
        });
    }
    dynamics.check(noise)?;
    let grid = *noise.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let dim = dynamics.state_dim();
    let m = noise.marks().len();
    let paths = states.paths();
    let marks = noise.marks();
    let coeffs = dynamics.coeffs.as_ref();
    let res = Resolvents::new(&dynamics.a, &grid)?;

    let mut p = PathTensor::zeros(paths, n + 1, dim);
    let mut p_hat = PathTensor::zeros(paths, n, dim);
    let mut q = PathTensor::zeros(paths, n, dim);
    let mut r = PathTensor::zeros(paths, n, m * dim);

    for path in 0..paths {
        let terminal = cost.terminal_x(&states.state(path, n));
        p.row_mut(path, n).copy_from_slice(terminal.as_slice());
    }
    check_finite(&p, n, "terminal adjoint")?;

    for k in (0..n).rev() {
        let t = grid.time(k);
        let features = FeatureMap::fit(states.states(), k, basis == RegressionBasis::Quadratic);
        let f = features.len();

        // Row form: p̃ᵀ = p_{k+1}ᵀ R_k, one row per path.
        let target = p.slice_at(k + 1) * res.at(k);
        let mut design = DMatrix::zeros(paths, f);
        let mut phi = vec![0.0; f];
        for path in 0..paths {
            features.eval(states.states().row(path, k), &mut phi);
            design.row_mut(path).copy_from_slice(&phi);
        }

        let beta = least_squares(&design, &target, k)?;
        let ph = &design * &beta;
        let resid = &target - &ph;

        let wide = DMatrix::from_fn(paths, f * (1 + m), |i, j| {
            let (block, col) = (j / f, j % f);
            let w = if block == 0 {
                noise.dw(i, k)
            } else {
                noise.compensated(i, k, block - 1)
            };
            design[(i, col)] * w
        });
        let gamma = least_squares(&wide, &resid, k)?;
        let qk = &design * gamma.rows(0, f);
        let rk: Vec<DMatrix<f64>> = (1..=m).map(|b| &design * gamma.rows(b * f, f)).collect();

        let xk = states.states().slice_at(k);
        let uk = states.controls().slice_at(k);
        let mut driver = match coeffs.as_affine() {
            Some(c) => {
                let mut d = &ph * &c.drift.x + &qk * (dynamics.b.at(k) + &c.diffusion.x);
                for (i, (ri, jump)) in rk.iter().zip(&c.jumps).enumerate() {
                    d += ri * &jump.x * marks.weight(i);
                }
                d
            }
            None => {
                let mut d = DMatrix::zeros(paths, dim);
                for path in 0..paths {
                    let x = xk.row(path).transpose();
                    let u = uk.row(path).transpose();
                    let mut g = coeffs.drift_x(t, &x, &u).transpose() * ph.row(path).transpose()
                        + (dynamics.b.at(k) + coeffs.diffusion_x(t, &x, &u)).transpose() * qk.row(path).transpose();
                    for (i, ri) in rk.iter().enumerate() {
                        g += coeffs.jump_x(t, i, &x, &u).transpose() * ri.row(path).transpose() * marks.weight(i);
                    }
                    d.set_row(path, &g.transpose());
                }
                d
            }
        };
        match cost.as_quadratic() {
            Some(qc) => {
                let w = &qc.state_weight + qc.state_weight.transpose();
                let mut dx = xk;
                for mut row in dx.row_iter_mut() {
                    row -= qc.state_target.transpose();
                }
                driver += dx * w;
            }
            None => {
                for path in 0..paths {
                    let (x, u) = (states.state(path, k), states.control(path, k));
                    let lx = cost.running_x(t, &x, &u);
                    for j in 0..dim {
                        driver[(path, j)] += lx[j];
                    }
                }
            }
        }
        p.set_slice_at(k, &(&ph + driver * dt));
        p_hat.set_slice_at(k, &ph);
        q.set_slice_at(k, &qk);
        for path in 0..paths {
            let row = r.row_mut(path, k);
            for (i, ri) in rk.iter().enumerate() {
                for j in 0..dim {
                    row[i * dim + j] = ri[(path, j)];
                }
            }
        }
        check_finite(&p, k, "adjoint")?;
    }
    Ok(AdjointEnsemble::from_parts(grid, m, p, p_hat, q, r))
}

fn check_finite(p: &PathTensor, k: usize, what: &str) -> Result<()> {
    for path in 0..p.paths() {
        if p.row(path, k).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} at step {k}, path {path}")));
        }
    }
    Ok(())
}

/// Both sides of the adjoint a priori bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdjointEstimateReport {
    /// `E sup‖p‖_H² + E∫‖p‖_V² + E∫‖q‖² + E∫Σ_i ‖r_i‖²ν_i`.
    pub lhs: f64,
    /// `E∫‖l_x‖² + E‖Φ_x(X(T))‖²`.
    pub rhs: f64,
    pub ratio: f64,
}

/// Monte Carlo estimate of the adjoint stability bound. The V-norm of `p` is
/// taken through the Galerkin weights.
pub fn adjoint_estimate_check(
    adjoints: &AdjointEnsemble,
    states: &StateEnsemble,
    space: &GalerkinSpace,
    cost: &dyn CostFunctional,
    marks: &MarkSpace,
) -> Result<AdjointEstimateReport> {
    if adjoints.paths() != states.paths() || adjoints.grid() != states.grid() || adjoints.mark_count() != marks.len() {
        return Err(Error::InvalidInput("adjoint ensemble does not match the states".into()));
    }
    let grid = states.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let per_path: Vec<(f64, f64)> = (0..states.paths())
        .into_par_iter()
        .map(|path| {
            let sup = (0..=n).map(|k| space.norm_h_sq(adjoints.p.row(path, k))).fold(0.0, f64::max);
            let mut lhs = sup;
            let mut rhs = cost.terminal_x(&states.state(path, n)).norm_squared();
            for k in 0..n {
                lhs += space.norm_v_sq(adjoints.p.row(path, k)) * dt;
                lhs += adjoints.q(path, k).norm_squared() * dt;
                for i in 0..marks.len() {
                    lhs += adjoints.r(path, k, i).norm_squared() * marks.weight(i) * dt;
                }
                let x = states.state(path, k);
                let u = states.control(path, k);
                rhs += cost.running_x(grid.time(k), &x, &u).norm_squared() * dt;
            }
            (lhs, rhs)
        })
        .collect();
    let lhs = stats::mean(&per_path.iter().map(|v| v.0).collect::<Vec<_>>());
    let rhs = stats::mean(&per_path.iter().map(|v| v.1).collect::<Vec<_>>());
    let ratio = if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(AdjointEstimateReport { lhs, rhs, ratio })
}

/// `sqrt(Σ‖a − b‖²) / sqrt(Σ‖b‖²)` over all paths and steps `k < n` of the
/// `p`, `q` and `r` fields respectively.
pub fn relative_rms_error(candidate: &AdjointEnsemble, reference: &AdjointEnsemble) -> Result<[f64; 3]> {
    if candidate.p.paths() != reference.p.paths()
        || candidate.p.len() != reference.p.len()
        || candidate.r.width() != reference.r.width()
    {
        return Err(Error::InvalidInput("adjoint ensembles have different shapes".into()));
    }
    let n = candidate.grid.steps();
    let rel = |a: &PathTensor, b: &PathTensor| {
        let (num, den): (Vec<f64>, Vec<f64>) = (0..a.paths())
            .map(|path| {
                let mut num = 0.0;
                let mut den = 0.0;
                for k in 0..n {
                    for (x, y) in a.row(path, k).iter().zip(b.row(path, k)) {
                        num += (x - y) * (x - y);
                        den += y * y;
                    }
                }
                (num, den)
            })
            .unzip();
        let den = stats::pairwise_sum(&den);
        if den == 0.0 {
            if stats::pairwise_sum(&num) == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (stats::pairwise_sum(&num) / den).sqrt()
        }
    };
    Ok([
        rel(&candidate.p, &reference.p),
        rel(&candidate.q, &reference.q),
        rel(&candidate.r, &reference.r),
    ])
}

const ADJOINT_MAGIC: &[u8; 8] = b"GSMPADJT";

/// Long format `field,path,step,coordinate,value` with `field` one of `p`,
/// `q`, `r`; for `r` the coordinate runs over marks first, `i·N + j`.
pub fn write_adjoint_csv<W: Write>(adjoints: &AdjointEnsemble, mut w: W) -> Result<()> {
    writeln!(w, "field,path,step,coordinate,value")?;
    for (name, tensor) in [("p", &adjoints.p), ("q", &adjoints.q), ("r", &adjoints.r)] {
        for path in 0..tensor.paths() {
            for k in 0..tensor.len() {
                for (i, v) in tensor.row(path, k).iter().enumerate() {
                    writeln!(w, "{name},{path},{k},{i},{v:e}")?;
                }
            }
        }
    }
    Ok(())
}

/// Layout as the state cache with magic `GSMPADJT`, followed by a `u64` mark
/// count and the `p`, `p̂`, `q`, `r` tensors.
pub fn write_adjoint_cache<W: Write>(adjoints: &AdjointEnsemble, mut w: W) -> Result<()> {
    use crate::forward::io::{write_header, write_tensor};
    write_header(ADJOINT_MAGIC, &adjoints.grid, &mut w)?;
    w.write_all(&(adjoints.marks as u64).to_le_bytes())?;
    for t in [&adjoints.p, &adjoints.p_hat, &adjoints.q, &adjoints.r] {
        write_tensor(t, &mut w)?;
    }
    Ok(())
}

pub fn read_adjoint_cache<R: Read>(mut r: R) -> Result<AdjointEnsemble> {
    use crate::forward::io::{read_header, read_tensor};
    let grid = read_header(ADJOINT_MAGIC, "adjoint", &mut r)?;
    let marks = crate::noise::read_u64(&mut r)? as usize;
    let p = read_tensor(&mut r)?;
    let p_hat = read_tensor(&mut r)?;
    let q = read_tensor(&mut r)?;
    let rr = read_tensor(&mut r)?;
    let n = grid.steps();
    let ok = p.len() == n + 1
        && [&p_hat, &q, &rr].iter().all(|t| t.len() == n && t.paths() == p.paths())
        && p_hat.width() == p.width()
        && q.width() == p.width()
        && rr.width() == marks * p.width();
    if !ok {
        return Err(Error::Format("adjoint cache extents are inconsistent".into()));
    }
    Ok(AdjointEnsemble::from_parts(grid, marks, p, p_hat, q, rr))
}
