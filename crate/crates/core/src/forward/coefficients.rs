use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Nonlinear coefficients `b(t, x, u)`, `g(t, x, u)`, `σ(t, e_i, x, u)` of the
/// state equation together with their Fréchet derivatives.
///
/// Shapes: values are `N`-vectors, `*_x` are `N×N` and `*_u` are `N×U`.
pub trait Coefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn mark_count(&self) -> usize;

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn jump(&self, t: f64, mark: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn drift_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn drift_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn diffusion_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn diffusion_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn jump_x(&self, t: f64, mark: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn jump_u(&self, t: f64, mark: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    /// Declared Lipschitz constant in `x`.
    fn lipschitz(&self) -> f64;

    /// The affine representation, when the coefficients have one. Solvers
    /// use it to switch to whole-ensemble matrix arithmetic.
    fn as_affine(&self) -> Option<&AffineCoefficients> {
        None
    }
}

/// `x ↦ X·x + U·u + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl AffineMap {
    pub fn new(x: DMatrix<f64>, u: DMatrix<f64>, c: DVector<f64>) -> Self {
        Self { x, u, c }
    }

    pub fn zero(n: usize, du: usize) -> Self {
        Self::new(DMatrix::zeros(n, n), DMatrix::zeros(n, du), DVector::zeros(n))
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.x * x + &self.u * u + &self.c
    }
}

/// Coefficients affine in `(x, u)` and constant in time.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoefficients {
    pub drift: AffineMap,
    pub diffusion: AffineMap,
    pub jumps: Vec<AffineMap>,
}

impl AffineCoefficients {
    pub fn zero(n: usize, du: usize, marks: usize) -> Self {
        Self {
            drift: AffineMap::zero(n, du),
            diffusion: AffineMap::zero(n, du),
            jumps: vec![AffineMap::zero(n, du); marks],
        }
    }

    /// `b = u`, `g = u`, `σ(e_i) = Γ_i x + u` with `U = H`.
    pub fn additive_control_with_jump_gain(n: usize, gammas: &[DMatrix<f64>]) -> Self {
        let id = DMatrix::identity(n, n);
        Self {
            drift: AffineMap::new(DMatrix::zeros(n, n), id.clone(), DVector::zeros(n)),
            diffusion: AffineMap::new(DMatrix::zeros(n, n), id.clone(), DVector::zeros(n)),
            jumps: gammas
                .iter()
                .map(|g| AffineMap::new(g.clone(), id.clone(), DVector::zeros(n)))
                .collect(),
        }
    }
}

impl Coefficients for AffineCoefficients {
    fn state_dim(&self) -> usize {
        self.drift.c.len()
    }

    fn control_dim(&self) -> usize {
        self.drift.u.ncols()
    }

    fn mark_count(&self) -> usize {
        self.jumps.len()
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift.eval(x, u)
    }

    fn diffusion(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.diffusion.eval(x, u)
    }

    fn jump(&self, _t: f64, mark: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.jumps[mark].eval(x, u)
    }

    fn drift_x(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.drift.x.clone()
    }

    fn drift_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.drift.u.clone()
    }

    fn diffusion_x(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.diffusion.x.clone()
    }

    fn diffusion_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.diffusion.u.clone()
    }

    fn jump_x(&self, _t: f64, mark: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.jumps[mark].x.clone()
    }

    fn jump_u(&self, _t: f64, mark: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.jumps[mark].u.clone()
    }

    fn lipschitz(&self) -> f64 {
        let spectral = |m: &DMatrix<f64>| if m.is_empty() { 0.0 } else { m.singular_values().max() };
        spectral(&self.drift.x)
            + spectral(&self.diffusion.x)
            + self.jumps.iter().map(|j| spectral(&j.x)).sum::<f64>()
    }

    fn as_affine(&self) -> Option<&AffineCoefficients> {
        Some(self)
    }
}

/// `base + scale · delta`, used for perturbation sweeps.
pub struct PerturbedCoefficients {
    pub base: Arc<dyn Coefficients>,
    pub delta: Arc<dyn Coefficients>,
    pub scale: f64,
}

impl Coefficients for PerturbedCoefficients {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.base.control_dim()
    }

    fn mark_count(&self) -> usize {
        self.base.mark_count()
    }

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.base.drift(t, x, u) + self.scale * self.delta.drift(t, x, u)
    }

    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.base.diffusion(t, x, u) + self.scale * self.delta.diffusion(t, x, u)
    }

    fn jump(&self, t: f64, mark: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.base.jump(t, mark, x, u) + self.scale * self.delta.jump(t, mark, x, u)
    }

    fn drift_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.drift_x(t, x, u) + self.scale * self.delta.drift_x(t, x, u)
    }

    fn drift_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.drift_u(t, x, u) + self.scale * self.delta.drift_u(t, x, u)
    }

    fn diffusion_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.diffusion_x(t, x, u) + self.scale * self.delta.diffusion_x(t, x, u)
    }

    fn diffusion_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.diffusion_u(t, x, u) + self.scale * self.delta.diffusion_u(t, x, u)
    }

    fn jump_x(&self, t: f64, mark: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.jump_x(t, mark, x, u) + self.scale * self.delta.jump_x(t, mark, x, u)
    }

    fn jump_u(&self, t: f64, mark: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.jump_u(t, mark, x, u) + self.scale * self.delta.jump_u(t, mark, x, u)
    }

    fn lipschitz(&self) -> f64 {
        self.base.lipschitz() + self.scale.abs() * self.delta.lipschitz()
    }
}

/// Largest relative mismatch between declared derivatives and central finite
/// differences of `b`, `g`, `σ` over `probes` random points.
pub fn derivative_mismatch(coeffs: &dyn Coefficients, probes: usize, seed: u64) -> f64 {
    let n = coeffs.state_dim();
    let du = coeffs.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |len: usize| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: DVector<f64>, fd: DVector<f64>| {
        let scale = analytic.norm().max(fd.norm()).max(1.0);
        worst = worst.max((analytic - fd).norm() / scale);
    };
    for probe in 0..probes {
        let t = probe as f64 / probes.max(1) as f64;
        let x = gauss(n);
        let u = gauss(du);
        let dx = gauss(n);
        let dv = gauss(du);
        let xp = &x + h * &dx;
        let xm = &x - h * &dx;
        let up = &u + h * &dv;
        let um = &u - h * &dv;
        let fd = |f: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>, a: (&DVector<f64>, &DVector<f64>), b: (&DVector<f64>, &DVector<f64>)| {
            (f(a.0, a.1) - f(b.0, b.1)) / (2.0 * h)
        };
        let b = |x: &DVector<f64>, u: &DVector<f64>| coeffs.drift(t, x, u);
        let g = |x: &DVector<f64>, u: &DVector<f64>| coeffs.diffusion(t, x, u);
        compare(coeffs.drift_x(t, &x, &u) * &dx, fd(&b, (&xp, &u), (&xm, &u)));
        compare(coeffs.drift_u(t, &x, &u) * &dv, fd(&b, (&x, &up), (&x, &um)));
        compare(coeffs.diffusion_x(t, &x, &u) * &dx, fd(&g, (&xp, &u), (&xm, &u)));
        compare(coeffs.diffusion_u(t, &x, &u) * &dv, fd(&g, (&x, &up), (&x, &um)));
        for i in 0..coeffs.mark_count() {
            let s = |x: &DVector<f64>, u: &DVector<f64>| coeffs.jump(t, i, x, u);
            compare(coeffs.jump_x(t, i, &x, &u) * &dx, fd(&s, (&xp, &u), (&xm, &u)));
            compare(coeffs.jump_u(t, i, &x, &u) * &dv, fd(&s, (&x, &up), (&x, &um)));
        }
    }
    worst
}
