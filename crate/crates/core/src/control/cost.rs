use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Running cost `l(t, x, u)` and terminal cost `Φ(x)` with derivatives.
pub trait CostFunctional: Send + Sync {
    fn running(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn running_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn terminal(&self, x: &DVector<f64>) -> f64;
    fn terminal_x(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Constant `C` of the growth bound `|l| ≤ C(1 + ‖x‖² + ‖u‖²)`.
    fn growth_bound(&self) -> f64;

    fn as_quadratic(&self) -> Option<&QuadraticCost> {
        None
    }
}

/// `l = (x − x_ref)ᵀQ(x − x_ref) + uᵀRu`, `Φ = (x − x_T)ᵀG(x − x_T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    pub state_weight: DMatrix<f64>,
    pub control_weight: DMatrix<f64>,
    pub terminal_weight: DMatrix<f64>,
    pub state_target: DVector<f64>,
    pub terminal_target: DVector<f64>,
}

impl QuadraticCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, g: DMatrix<f64>) -> Self {
        let n = q.nrows();
        Self {
            state_weight: q,
            control_weight: r,
            terminal_weight: g,
            state_target: DVector::zeros(n),
            terminal_target: DVector::zeros(n),
        }
    }

    /// `l = ‖x‖² + ‖u‖²`, `Φ = ‖x‖²`.
    pub fn unit(n: usize, du: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(du, du), DMatrix::identity(n, n))
    }

    pub fn with_terminal_target(mut self, target: DVector<f64>) -> Self {
        self.terminal_target = target;
        self
    }
}

impl CostFunctional for QuadraticCost {
    fn running(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.state_target;
        dx.dot(&(&self.state_weight * &dx)) + u.dot(&(&self.control_weight * u))
    }

    fn running_x(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let dx = x - &self.state_target;
        (&self.state_weight + self.state_weight.transpose()) * dx
    }

    fn running_u(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (&self.control_weight + self.control_weight.transpose()) * u
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.terminal_target;
        dx.dot(&(&self.terminal_weight * &dx))
    }

    fn terminal_x(&self, x: &DVector<f64>) -> DVector<f64> {
        let dx = x - &self.terminal_target;
        (&self.terminal_weight + self.terminal_weight.transpose()) * dx
    }

    fn growth_bound(&self) -> f64 {
        let norm = |m: &DMatrix<f64>| if m.is_empty() { 0.0 } else { m.singular_values().max() };
        let target = self.state_target.norm_squared();
        2.0 * norm(&self.state_weight) * (1.0 + target) + norm(&self.control_weight)
    }

    fn as_quadratic(&self) -> Option<&QuadraticCost> {
        Some(self)
    }
}

impl QuadraticCost {
    /// `l` on raw coordinate slices, without allocating.
    pub(crate) fn running_slices(&self, x: &[f64], u: &[f64]) -> f64 {
        quadratic_form(&self.state_weight, x, Some(self.state_target.as_slice()))
            + quadratic_form(&self.control_weight, u, None)
    }

    pub(crate) fn terminal_slices(&self, x: &[f64]) -> f64 {
        quadratic_form(&self.terminal_weight, x, Some(self.terminal_target.as_slice()))
    }
}

/// `(v − c)ᵀ M (v − c)`.
fn quadratic_form(m: &DMatrix<f64>, v: &[f64], center: Option<&[f64]>) -> f64 {
    let d = |i: usize| v[i] - center.map_or(0.0, |c| c[i]);
    let mut s = 0.0;
    for j in 0..v.len() {
        let dj = d(j);
        let mut col = 0.0;
        for i in 0..v.len() {
            col += m[(i, j)] * d(i);
        }
        s += col * dj;
    }
    s
}

/// Probes derivative consistency and the growth bound of a cost.
/// Returns `(worst relative derivative mismatch, worst |l| / (1 + ‖x‖² + ‖u‖²))`.
pub fn audit_cost(cost: &dyn CostFunctional, n: usize, du: usize, probes: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |len: usize| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = 1e-6;
    let mut mismatch: f64 = 0.0;
    let mut growth: f64 = 0.0;
    for p in 0..probes {
        let t = p as f64 / probes.max(1) as f64;
        let x = gauss(n);
        let u = gauss(du);
        let dx = gauss(n);
        let dv = gauss(du);
        let fd_x = (cost.running(t, &(&x + h * &dx), &u) - cost.running(t, &(&x - h * &dx), &u)) / (2.0 * h);
        let fd_u = (cost.running(t, &x, &(&u + h * &dv)) - cost.running(t, &x, &(&u - h * &dv))) / (2.0 * h);
        let fd_t = (cost.terminal(&(&x + h * &dx)) - cost.terminal(&(&x - h * &dx))) / (2.0 * h);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        mismatch = mismatch
            .max(rel(cost.running_x(t, &x, &u).dot(&dx), fd_x))
            .max(rel(cost.running_u(t, &x, &u).dot(&dv), fd_u))
            .max(rel(cost.terminal_x(&x).dot(&dx), fd_t));
        growth = growth.max(cost.running(t, &x, &u).abs() / (1.0 + x.norm_squared() + u.norm_squared()));
    }
    (mismatch, growth)
}
