//! Galerkin truncation of the Gelfand triple `V ⊂ H ⊂ V*`.
//!
//! Coordinates are H-orthonormal: `(x, y)_H` is the Euclidean dot product and
//! the H-adjoint of an operator is its matrix transpose. The V-structure is a
//! diagonal weight `w_i ≥ 1` with `‖x‖_V² = Σ w_i x_i²` and
//! `‖x‖_{V*}² = Σ x_i² / w_i`.
//!
//! The Fourier space models `H = L²`, `V = H¹` on the one-dimensional torus of
//! length `L` with the real basis `{1, sin κ₁z, cos κ₁z, sin κ₂z, …}`,
//! `κ_j = 2πj/L`, normalised in `L²`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::forward::Coefficients;
use crate::noise::{MarkSpace, TimeGrid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Fourier,
    Abstract,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalerkinSpace {
    v_weights: Vec<f64>,
    wavenumbers: Vec<f64>,
    domain_length: f64,
    basis: BasisKind,
}

/// Real Fourier basis on the torus of length `domain_length` with `modes`
/// retained functions. Only `spatial_dim = 1` is supported.
pub fn build_fourier_space(spatial_dim: usize, modes: usize, domain_length: f64) -> Result<GalerkinSpace> {
    if spatial_dim != 1 {
        return Err(Error::InvalidInput(format!(
            "only one spatial dimension is supported, got {spatial_dim}"
        )));
    }
    if modes == 0 {
        return Err(Error::InvalidInput("need at least one Fourier mode".into()));
    }
    if !(domain_length.is_finite() && domain_length > 0.0) {
        return Err(Error::InvalidInput(format!(
            "domain length must be positive, got {domain_length}"
        )));
    }
    let wavenumbers: Vec<f64> = (0..modes)
        .map(|i| 2.0 * PI * ((i + 1) / 2) as f64 / domain_length)
        .collect();
    let v_weights = wavenumbers.iter().map(|k| 1.0 + k * k).collect();
    Ok(GalerkinSpace {
        v_weights,
        wavenumbers,
        domain_length,
        basis: BasisKind::Fourier,
    })
}

impl GalerkinSpace {
    /// Abstract space given only its V-weights.
    pub fn with_weights(v_weights: Vec<f64>) -> Result<Self> {
        if v_weights.is_empty() {
            return Err(Error::InvalidInput("space needs at least one coordinate".into()));
        }
        if let Some(w) = v_weights.iter().find(|w| !(w.is_finite() && **w >= 1.0)) {
            return Err(Error::InvalidInput(format!("V-weights must be >= 1, got {w}")));
        }
        let n = v_weights.len();
        Ok(Self {
            v_weights,
            wavenumbers: vec![0.0; n],
            domain_length: 1.0,
            basis: BasisKind::Abstract,
        })
    }

    /// Abstract space with all weights 1 (V = H).
    pub fn flat(dim: usize) -> Result<Self> {
        Self::with_weights(vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.v_weights.len()
    }

    pub fn v_weights(&self) -> &[f64] {
        &self.v_weights
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    pub fn basis_kind(&self) -> BasisKind {
        self.basis
    }

    pub fn norm_h_sq(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    pub fn norm_v_sq(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.v_weights).map(|(v, w)| w * v * v).sum()
    }

    pub fn norm_vstar_sq(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.v_weights).map(|(v, w)| v * v / w).sum()
    }

    pub fn norm_h(&self, x: &[f64]) -> f64 {
        self.norm_h_sq(x).sqrt()
    }

    pub fn norm_v(&self, x: &[f64]) -> f64 {
        self.norm_v_sq(x).sqrt()
    }

    pub fn norm_vstar(&self, x: &[f64]) -> f64 {
        self.norm_vstar_sq(x).sqrt()
    }

    fn basis_value(&self, i: usize, z: f64) -> f64 {
        let l = self.domain_length;
        let k = self.wavenumbers[i];
        match i {
            0 => 1.0 / l.sqrt(),
            _ if i % 2 == 1 => (2.0 / l).sqrt() * (k * z).sin(),
            _ => (2.0 / l).sqrt() * (k * z).cos(),
        }
    }

    fn basis_derivative(&self, i: usize, z: f64) -> f64 {
        let l = self.domain_length;
        let k = self.wavenumbers[i];
        match i {
            0 => 0.0,
            _ if i % 2 == 1 => (2.0 / l).sqrt() * k * (k * z).cos(),
            _ => -(2.0 / l).sqrt() * k * (k * z).sin(),
        }
    }

    /// Trapezoidal nodes on the torus; exact for trigonometric polynomials of
    /// degree below the node count.
    fn quadrature_nodes(&self) -> Vec<f64> {
        let q = 4 * (self.dim() + 1) + 64;
        let h = self.domain_length / q as f64;
        (0..q).map(|j| j as f64 * h).collect()
    }

    fn require_fourier(&self) -> Result<()> {
        match self.basis {
            BasisKind::Fourier => Ok(()),
            BasisKind::Abstract => Err(Error::InvalidInput(
                "operator assembly from coefficient fields needs a Fourier space".into(),
            )),
        }
    }
}

/// Which norms bound an operator: `A(t): V → V*` or `B(t): V → H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorRole {
    VToVStar,
    VToH,
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Constant(DMatrix<f64>),
    PerNode(Vec<DMatrix<f64>>),
}

/// Operator-valued function of time, sampled at the grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorProcess {
    role: OperatorRole,
    storage: Storage,
    bound: f64,
}

impl OperatorProcess {
    pub fn constant(space: &GalerkinSpace, role: OperatorRole, matrix: DMatrix<f64>) -> Result<Self> {
        check_square(space, &matrix)?;
        let bound = operator_norm(space, role, &matrix);
        Ok(Self {
            role,
            storage: Storage::Constant(matrix),
            bound,
        })
    }

    pub fn zero(space: &GalerkinSpace, role: OperatorRole) -> Self {
        let n = space.dim();
        Self {
            role,
            storage: Storage::Constant(DMatrix::zeros(n, n)),
            bound: 0.0,
        }
    }

    /// One matrix per grid node `t_0 … t_n`; collapses to a constant process
    /// when all nodes agree.
    pub fn from_nodes(space: &GalerkinSpace, role: OperatorRole, nodes: Vec<DMatrix<f64>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("operator process needs at least one node".into()));
        }
        for m in &nodes {
            check_square(space, m)?;
        }
        if nodes.iter().all(|m| m == &nodes[0]) {
            return Self::constant(space, role, nodes.into_iter().next().unwrap());
        }
        let bound = nodes
            .iter()
            .map(|m| operator_norm(space, role, m))
            .fold(0.0, f64::max);
        Ok(Self {
            role,
            storage: Storage::PerNode(nodes),
            bound,
        })
    }

    pub fn from_fn<F>(space: &GalerkinSpace, role: OperatorRole, grid: &TimeGrid, f: F) -> Result<Self>
    where
        F: Fn(f64) -> DMatrix<f64>,
    {
        Self::from_nodes(space, role, grid.times().into_iter().map(f).collect())
    }

    pub fn role(&self) -> OperatorRole {
        self.role
    }

    /// Uniform operator-norm bound over the nodes.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.at(0).nrows()
    }

    /// Number of nodes for time-varying processes, `None` when constant.
    pub fn nodes(&self) -> Option<usize> {
        match &self.storage {
            Storage::Constant(_) => None,
            Storage::PerNode(v) => Some(v.len()),
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        matches!(self.storage, Storage::Constant(_))
    }

    /// Matrix at grid node `k` (the constant matrix for time-invariant processes).
    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        match &self.storage {
            Storage::Constant(m) => m,
            Storage::PerNode(v) => &v[k.min(v.len() - 1)],
        }
    }

    /// Checks the process can be evaluated on `grid`.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        match self.nodes() {
            Some(n) if n != grid.steps() + 1 => Err(Error::Dimension {
                what: "operator nodes",
                expected: grid.steps() + 1,
                got: n,
            }),
            _ => Ok(()),
        }
    }

    fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        let storage = match &self.storage {
            Storage::Constant(m) => Storage::Constant(f(m)),
            Storage::PerNode(v) => Storage::PerNode(v.iter().map(f).collect()),
        };
        Self {
            role: self.role,
            storage,
            bound: self.bound,
        }
    }
}

fn check_square(space: &GalerkinSpace, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != space.dim() || m.ncols() != space.dim() {
        return Err(Error::Dimension {
            what: "operator matrix",
            expected: space.dim(),
            got: m.nrows().max(m.ncols()),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("operator matrix".into()));
    }
    Ok(())
}

fn operator_norm(space: &GalerkinSpace, role: OperatorRole, m: &DMatrix<f64>) -> f64 {
    let n = space.dim();
    let inv_sqrt_w = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 / space.v_weights()[i].sqrt()
        } else {
            0.0
        }
    });
    let scaled = match role {
        OperatorRole::VToVStar => &inv_sqrt_w * m * &inv_sqrt_w,
        OperatorRole::VToH => m * &inv_sqrt_w,
    };
    scaled.singular_values().max()
}

/// Coordinate matrix of `φ ↦ ∂_z[a ∂_z φ] + b_drift ∂_z φ + c φ`.
///
/// Entries are `(φ_i, Aφ_j)_H = −∫ a φ_i' φ_j' + ∫ b φ_i φ_j' + ∫ c φ_i φ_j`
/// after integrating by parts on the torus.
pub fn assemble_divergence_operator<Fa, Fb, Fc>(
    a: Fa,
    b_drift: Fb,
    c: Fc,
    space: &GalerkinSpace,
    grid: &TimeGrid,
) -> Result<OperatorProcess>
where
    Fa: Fn(f64, f64) -> f64,
    Fb: Fn(f64, f64) -> f64,
    Fc: Fn(f64, f64) -> f64,
{
    space.require_fourier()?;
    let nodes = space.quadrature_nodes();
    let h = space.domain_length() / nodes.len() as f64;
    let n = space.dim();
    let mut mats = Vec::with_capacity(grid.steps() + 1);
    for t in grid.times() {
        let mut m = DMatrix::zeros(n, n);
        for &z in &nodes {
            let (av, bv, cv) = (a(t, z), b_drift(t, z), c(t, z));
            if !(av.is_finite() && bv.is_finite() && cv.is_finite()) {
                return Err(Error::NonFinite(format!("coefficient at t={t}, z={z}")));
            }
            for i in 0..n {
                let (pi, dpi) = (space.basis_value(i, z), space.basis_derivative(i, z));
                for j in 0..n {
                    let (pj, dpj) = (space.basis_value(j, z), space.basis_derivative(j, z));
                    m[(i, j)] += h * (-av * dpi * dpj + bv * pi * dpj + cv * pi * pj);
                }
            }
        }
        mats.push(clean(m));
    }
    OperatorProcess::from_nodes(space, OperatorRole::VToVStar, mats)
}

/// Coordinate matrix of `φ ↦ ∂_z[η φ] + ρ φ`, i.e.
/// `(φ_i, Bφ_j)_H = −∫ η φ_i' φ_j + ∫ ρ φ_i φ_j`.
pub fn assemble_noise_operator<Fe, Fr>(
    eta: Fe,
    rho: Fr,
    space: &GalerkinSpace,
    grid: &TimeGrid,
) -> Result<OperatorProcess>
where
    Fe: Fn(f64, f64) -> f64,
    Fr: Fn(f64, f64) -> f64,
{
    space.require_fourier()?;
    let nodes = space.quadrature_nodes();
    let h = space.domain_length() / nodes.len() as f64;
    let n = space.dim();
    let mut mats = Vec::with_capacity(grid.steps() + 1);
    for t in grid.times() {
        let mut m = DMatrix::zeros(n, n);
        for &z in &nodes {
            let (ev, rv) = (eta(t, z), rho(t, z));
            if !(ev.is_finite() && rv.is_finite()) {
                return Err(Error::NonFinite(format!("coefficient at t={t}, z={z}")));
            }
            for i in 0..n {
                let (pi, dpi) = (space.basis_value(i, z), space.basis_derivative(i, z));
                for j in 0..n {
                    let pj = space.basis_value(j, z);
                    m[(i, j)] += h * (-ev * dpi * pj + rv * pi * pj);
                }
            }
        }
        mats.push(clean(m));
    }
    OperatorProcess::from_nodes(space, OperatorRole::VToH, mats)
}

/// Flushes quadrature round-off to exact zeros so that structurally
/// symmetric / skew matrices come out exactly so.
fn clean(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let scale = m.amax().max(1.0);
    m.iter_mut().for_each(|v| {
        if v.abs() < 1e-13 * scale {
            *v = 0.0;
        }
    });
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() < 1e-13 * scale {
                let s = 0.5 * (a + b);
                m[(i, j)] = s;
                m[(j, i)] = s;
            } else if (a + b).abs() < 1e-13 * scale {
                let s = 0.5 * (a - b);
                m[(i, j)] = s;
                m[(j, i)] = -s;
            }
        }
    }
    m
}

/// H-adjoint: the transpose at every node.
pub fn adjoint_of(op: &OperatorProcess) -> OperatorProcess {
    op.map(|m| m.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub alpha: f64,
    pub lambda_shift: f64,
    pub min_margin: f64,
    pub satisfied: bool,
}

/// Largest admissible shift in the α search.
pub const COERCIVITY_LAMBDA_CAP: f64 = 100.0;
const COERCIVITY_BISECTIONS: usize = 60;
const COERCIVITY_MARGIN_TOL: f64 = 1e-10;

/// Searches the squared coercivity inequality
/// `−2⟨A(t)x, x⟩ + λ‖x‖_H² ≥ α‖x‖_V² + ‖B(t)x‖_H²`
/// over all grid nodes, the basis vectors and `probe_count` random V-unit
/// probes. α is maximised by bisection on `(0, 2·bound(A)]` subject to
/// `λ ≤ COERCIVITY_LAMBDA_CAP`; λ is the smallest shift that works for that α.
pub fn check_coercivity(
    a: &OperatorProcess,
    b: &OperatorProcess,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    probe_count: usize,
    seed: u64,
) -> Result<CoercivityReport> {
    if probe_count == 0 {
        return Err(Error::InvalidInput("coercivity check needs at least one probe".into()));
    }
    a.check_grid(grid)?;
    b.check_grid(grid)?;
    let n = space.dim();
    let mut probes: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0 / space.v_weights()[i].sqrt();
            e
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probe_count {
        let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = space.norm_v(x.as_slice());
        if norm > 0.0 {
            probes.push(x / norm);
        }
    }
    let nodes = if a.is_time_invariant() && b.is_time_invariant() {
        1
    } else {
        grid.steps() + 1
    };
    // (−2⟨Ax,x⟩, ‖x‖_H², ‖x‖_V², ‖Bx‖_H²) per probe and node.
    let mut terms = Vec::with_capacity(probes.len() * nodes);
    for k in 0..nodes {
        let (am, bm) = (a.at(k), b.at(k));
        for x in &probes {
            let dissipation = -2.0 * x.dot(&(am * x));
            let bx = bm * x;
            terms.push((
                dissipation,
                x.norm_squared(),
                space.norm_v_sq(x.as_slice()),
                bx.norm_squared(),
            ));
        }
    }
    let lambda_needed = |alpha: f64| {
        terms
            .iter()
            .map(|(d, h, v, bb)| (alpha * v + bb - d) / h)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let margin = |alpha: f64, lambda: f64| {
        terms
            .iter()
            .map(|(d, h, v, bb)| d + lambda * h - alpha * v - bb)
            .fold(f64::INFINITY, f64::min)
    };
    let feasible = |alpha: f64| lambda_needed(alpha) <= COERCIVITY_LAMBDA_CAP;

    let upper = 2.0 * a.bound();
    let alpha = if upper <= 0.0 {
        0.0
    } else if feasible(upper) {
        upper
    } else {
        let (mut lo, mut hi) = (0.0, upper);
        for _ in 0..COERCIVITY_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let lambda_shift = lambda_needed(alpha).max(0.0);
    let min_margin = margin(alpha, lambda_shift);
    Ok(CoercivityReport {
        alpha,
        lambda_shift,
        min_margin,
        satisfied: alpha > 0.0 && min_margin >= -COERCIVITY_MARGIN_TOL,
    })
}

/// Scalar form of `κI + ηη* ≤ 2a ≤ K·I` on `z_samples` equispaced points of
/// `[0, domain_length)` at every grid node.
pub fn check_superparabolic<Fa, Fe>(
    a: Fa,
    eta: Fe,
    kappa: f64,
    bound: f64,
    grid: &TimeGrid,
    domain_length: f64,
    z_samples: usize,
) -> Result<bool>
where
    Fa: Fn(f64, f64) -> f64,
    Fe: Fn(f64, f64) -> f64,
{
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidInput(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    if z_samples == 0 {
        return Err(Error::InvalidInput("need at least one z sample".into()));
    }
    const TOL: f64 = 1e-12;
    for t in grid.times() {
        for j in 0..z_samples {
            let z = domain_length * j as f64 / z_samples as f64;
            let (av, ev) = (a(t, z), eta(t, z));
            let lower_ok = kappa + ev * ev <= 2.0 * av + TOL;
            let upper_ok = 2.0 * av <= bound + TOL;
            if !(lower_ok && upper_ok) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Empirical Lipschitz constant in the state of `(b, g, σ)`:
/// max over random pairs of
/// `(‖b − b̄‖_H + ‖g − ḡ‖_H + ‖σ − σ̄‖_{M^{ν,2}}) / ‖x − x̄‖_H`.
pub fn check_lipschitz(
    coeffs: &dyn Coefficients,
    space: &GalerkinSpace,
    marks: &MarkSpace,
    grid: &TimeGrid,
    probe_count: usize,
    seed: u64,
) -> Result<f64> {
    if coeffs.state_dim() != space.dim() {
        return Err(Error::Dimension {
            what: "coefficient state dimension",
            expected: space.dim(),
            got: coeffs.state_dim(),
        });
    }
    if coeffs.mark_count() != marks.len() {
        return Err(Error::Dimension {
            what: "coefficient mark count",
            expected: marks.len(),
            got: coeffs.mark_count(),
        });
    }
    let n = space.dim();
    let du = coeffs.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |len: usize| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut best: f64 = 0.0;
    let mut times = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for _ in 0..probe_count {
        let x = gauss(n);
        let xb = gauss(n);
        let u = gauss(du);
        let t = grid.time(times.random_range(0..=grid.steps()));
        let dist = (&x - &xb).norm();
        if dist < 1e-12 {
            continue;
        }
        let db = (coeffs.drift(t, &x, &u) - coeffs.drift(t, &xb, &u)).norm();
        let dg = (coeffs.diffusion(t, &x, &u) - coeffs.diffusion(t, &xb, &u)).norm();
        let ds: f64 = (0..marks.len())
            .map(|i| marks.weight(i) * (coeffs.jump(t, i, &x, &u) - coeffs.jump(t, i, &xb, &u)).norm_squared())
            .sum();
        best = best.max((db + dg + ds.sqrt()) / dist);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{AffineCoefficients, AffineMap};
    use approx::assert_abs_diff_eq;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 4).unwrap()
    }

    #[test]
    fn fourier_weights() {
        assert_eq!(build_fourier_space(1, 1, 2.0 * PI).unwrap().v_weights(), &[1.0]);
        let s = build_fourier_space(1, 3, 2.0 * PI).unwrap();
        for (w, e) in s.v_weights().iter().zip([1.0, 2.0, 2.0]) {
            assert_abs_diff_eq!(*w, e, epsilon = 1e-12);
        }
        let s = build_fourier_space(1, 5, PI).unwrap();
        for (w, e) in s.v_weights().iter().zip([1.0, 5.0, 5.0, 17.0, 17.0]) {
            assert_abs_diff_eq!(*w, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn fourier_rejects_bad_input() {
        assert!(build_fourier_space(1, 0, 1.0).is_err());
        assert!(build_fourier_space(1, 3, 0.0).is_err());
        assert!(build_fourier_space(1, 3, -2.0).is_err());
        assert!(build_fourier_space(2, 3, 1.0).is_err());
    }

    #[test]
    fn laplacian_is_diagonal() {
        let s = build_fourier_space(1, 3, 2.0 * PI).unwrap();
        let a = assemble_divergence_operator(|_, _| 1.0, |_, _| 0.0, |_, _| 0.0, &s, &grid()).unwrap();
        assert!(a.is_time_invariant());
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -1.0, -1.0]));
        assert_abs_diff_eq!(a.at(0), &expected, epsilon = 1e-12);

        let shifted = assemble_divergence_operator(|_, _| 1.0, |_, _| 0.0, |_, _| 1.0, &s, &grid()).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0]));
        assert_abs_diff_eq!(shifted.at(0), &expected, epsilon = 1e-12);
    }

    #[test]
    fn multiplication_operators() {
        let s = build_fourier_space(1, 5, 3.0).unwrap();
        let a = assemble_divergence_operator(|_, _| 0.0, |_, _| 0.0, |_, _| -1.0, &s, &grid()).unwrap();
        assert_abs_diff_eq!(a.at(0), &(-DMatrix::identity(5, 5)), epsilon = 1e-12);
        let b0 = assemble_noise_operator(|_, _| 0.0, |_, _| 0.0, &s, &grid()).unwrap();
        assert_eq!(b0.at(0), &DMatrix::zeros(5, 5));
        let b = assemble_noise_operator(|_, _| 0.0, |_, _| 0.5, &s, &grid()).unwrap();
        assert_abs_diff_eq!(b.at(0), &(0.5 * DMatrix::identity(5, 5)), epsilon = 1e-12);
    }

    #[test]
    fn derivative_matrix_exchanges_sin_and_cos() {
        let s = build_fourier_space(1, 3, 2.0 * PI).unwrap();
        let d = assemble_noise_operator(|_, _| 1.0, |_, _| 0.0, &s, &grid()).unwrap();
        // d/dz sin = cos, d/dz cos = −sin.
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(d.at(0), &expected, epsilon = 1e-12);
        let adj = adjoint_of(&d);
        assert_eq!(adj.at(0), &(-d.at(0)));
    }

    #[test]
    fn structural_symmetry_is_exact() {
        let s = build_fourier_space(1, 9, 2.5).unwrap();
        let d = assemble_noise_operator(|_, _| 1.0, |_, _| 0.0, &s, &grid()).unwrap();
        assert_eq!(d.at(0).transpose(), -d.at(0));
        let lap = assemble_divergence_operator(|_, _| 1.0, |_, _| 0.0, |_, _| 0.0, &s, &grid()).unwrap();
        assert_eq!(lap.at(0).transpose(), *lap.at(0));
        assert!(lap.at(0).symmetric_eigenvalues().iter().all(|v| *v <= 1e-12));
    }

    #[test]
    fn variable_coefficients_give_time_varying_process() {
        let s = build_fourier_space(1, 5, 2.0 * PI).unwrap();
        let a = assemble_divergence_operator(
            |t, z| 1.0 + 0.5 * t * z.cos(),
            |_, _| 0.0,
            |_, _| 0.0,
            &s,
            &grid(),
        )
        .unwrap();
        assert_eq!(a.nodes(), Some(5));
        // Divergence-form diffusion stays symmetric for any a(t, z).
        for k in 0..5 {
            assert_abs_diff_eq!(a.at(k), &a.at(k).transpose(), epsilon = 1e-13);
        }
        assert!(assemble_divergence_operator(|_, _| f64::NAN, |_, _| 0.0, |_, _| 0.0, &s, &grid()).is_err());
    }

    #[test]
    fn coercivity_diagonal_fixture() {
        let s = GalerkinSpace::flat(3).unwrap();
        for c in [0.5, 1.0, 2.0] {
            let a = OperatorProcess::constant(&s, OperatorRole::VToVStar, -c * DMatrix::identity(3, 3)).unwrap();
            let b = OperatorProcess::zero(&s, OperatorRole::VToH);
            let r = check_coercivity(&a, &b, &s, &grid(), 16, 1).unwrap();
            assert!(r.satisfied);
            assert!((r.alpha - 2.0 * c).abs() < 1e-9);
            assert_eq!(r.lambda_shift, 0.0);
        }
    }

    #[test]
    fn coercivity_fails_without_dissipation() {
        let s = GalerkinSpace::flat(2).unwrap();
        let a = OperatorProcess::zero(&s, OperatorRole::VToVStar);
        let b = OperatorProcess::constant(&s, OperatorRole::VToH, DMatrix::identity(2, 2)).unwrap();
        let r = check_coercivity(&a, &b, &s, &grid(), 16, 1).unwrap();
        assert!(!r.satisfied);
        assert!(check_coercivity(&a, &b, &s, &grid(), 0, 1).is_err());
    }

    #[test]
    fn coercivity_of_stochastic_heat_operator() {
        let s = build_fourier_space(1, 3, 2.0 * PI).unwrap();
        let a = assemble_divergence_operator(|_, _| 1.0, |_, _| 0.0, |_, _| 0.0, &s, &grid()).unwrap();
        let b = assemble_noise_operator(|_, _| 0.5, |_, _| 0.0, &s, &grid()).unwrap();
        let r = check_coercivity(&a, &b, &s, &grid(), 64, 3).unwrap();
        assert!(r.satisfied);
        assert!(r.alpha > 0.0 && r.alpha <= 2.0 - 0.25);
        assert!(r.min_margin >= -1e-10);
    }

    #[test]
    fn superparabolic_examples() {
        let g = grid();
        assert!(check_superparabolic(|_, _| 1.0, |_, _| 0.5, 0.5, 4.0, &g, 1.0, 8).unwrap());
        assert!(!check_superparabolic(|_, _| 0.1, |_, _| 1.0, 0.5, 4.0, &g, 1.0, 8).unwrap());
        assert!(check_superparabolic(|_, _| 0.25, |_, _| 0.0, 0.5, 4.0, &g, 1.0, 8).unwrap());
        assert!(!check_superparabolic(|_, _| 3.0, |_, _| 0.0, 0.5, 4.0, &g, 1.0, 8).unwrap());
        assert!(check_superparabolic(|_, _| 1.0, |_, _| 0.0, 1.5, 4.0, &g, 1.0, 8).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        let s = GalerkinSpace::flat(1).unwrap();
        let g = grid();
        let marks = MarkSpace::new(vec![1.0]).unwrap();
        let zero = AffineCoefficients::zero(1, 1, 1);
        assert_eq!(check_lipschitz(&zero, &s, &marks, &g, 50, 1).unwrap(), 0.0);

        let mut ident = AffineCoefficients::zero(1, 1, 1);
        ident.drift = AffineMap::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DVector::zeros(1));
        assert_abs_diff_eq!(check_lipschitz(&ident, &s, &marks, &g, 50, 1).unwrap(), 1.0, epsilon = 1e-12);

        let lq = AffineCoefficients::additive_control_with_jump_gain(1, &[DMatrix::identity(1, 1) * 0.1]);
        assert_abs_diff_eq!(check_lipschitz(&lq, &s, &marks, &g, 50, 1).unwrap(), 0.1, epsilon = 1e-12);
    }
}
