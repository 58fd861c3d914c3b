//! Empirical check of the sufficient optimality conditions for a candidate
//! control: convexity of the Hamiltonian and terminal cost, stationarity,
//! and no improvement under random admissible perturbations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::hamiltonian::{hamiltonian_value, AdjointPoint};
use super::{cost, ControlLaw, ControlProblem, ControlVariant};
use crate::noise::NoiseEnsemble;
use crate::{Error, PathTensor, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VerificationOptions {
    /// Number of random directions; each is tried with both signs.
    pub perturbation_count: usize,
    /// Standard deviation of the perturbation entries.
    pub perturbation_scale: f64,
    pub residual_threshold: f64,
    pub convexity_samples: usize,
    pub seed: u64,
}

impl Default for VerificationOptions {
    fn default() -> Self {
        Self {
            perturbation_count: 20,
            perturbation_scale: 0.25,
            residual_threshold: 1e-2,
            convexity_samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClauseReport {
    pub passed: bool,
    /// Worst observed value of the clause's test statistic.
    pub statistic: f64,
    pub threshold: f64,
    pub samples: usize,
}

/// Paired difference `J(perturbed) − J(candidate)` on common noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PerturbationOutcome {
    pub index: usize,
    pub sign: f64,
    pub mean_diff: f64,
    pub stderr: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub convexity: ClauseReport,
    pub stationarity: ClauseReport,
    pub optimality: ClauseReport,
    pub perturbations: Vec<PerturbationOutcome>,
    pub passed: bool,
}

/// Relative slack allowed in the midpoint inequalities for rounding.
const CONVEXITY_TOL: f64 = 1e-9;

/// Runs the three clauses for `candidate`.
///
/// Convexity is probed at midpoints of sampled state/control pairs with the
/// candidate's adjoint values frozen. Stationarity compares the maximum
/// principle residual with `residual_threshold`. Optimality requires every
/// perturbed control to satisfy `J(candidate) ≤ J(perturbed) + 3·stderr`,
/// where the standard error is that of the paired difference.
pub fn verification_check(
    problem: &ControlProblem,
    candidate: &ControlLaw,
    noise: &NoiseEnsemble,
    options: &VerificationOptions,
) -> Result<VerificationReport> {
    if options.perturbation_scale <= 0.0 || !options.perturbation_scale.is_finite() {
        return Err(Error::InvalidInput("perturbation scale must be positive".into()));
    }
    let ev = problem.evaluate(candidate, noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let convexity = convexity_clause(problem, candidate, &ev, noise, options, &mut rng);
    let stationarity = ClauseReport {
        passed: ev.residual <= options.residual_threshold,
        statistic: ev.residual,
        threshold: options.residual_threshold,
        samples: ev.states.paths(),
    };

    let directions: Vec<ControlLaw> = (0..options.perturbation_count)
        .map(|_| random_direction(candidate, options.perturbation_scale, &mut rng))
        .collect();
    let jobs: Vec<(usize, f64)> = (0..directions.len()).flat_map(|i| [(i, 1.0), (i, -1.0)]).collect();
    let outcomes: Vec<Result<PerturbationOutcome>> = jobs
        .par_iter()
        .map(|&(index, sign)| {
            let perturbed = candidate.add_scaled(&directions[index], sign)?;
            let states = problem.simulate(&perturbed, noise)?;
            let diff = ev.cost.paired_difference(&cost(&states, problem.cost.as_ref()));
            let slack = 1e-12 * (1.0 + ev.cost.mean().abs());
            Ok(PerturbationOutcome {
                index,
                sign,
                mean_diff: diff.mean,
                stderr: diff.stderr,
                passed: diff.mean + 3.0 * diff.stderr >= -slack,
            })
        })
        .collect();
    let perturbations = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let worst = perturbations
        .iter()
        .map(|o| o.mean_diff + 3.0 * o.stderr)
        .fold(f64::INFINITY, f64::min);
    let optimality = ClauseReport {
        passed: perturbations.iter().all(|o| o.passed),
        statistic: worst,
        threshold: 0.0,
        samples: perturbations.len(),
    };
    let passed = convexity.passed && stationarity.passed && optimality.passed;
    Ok(VerificationReport {
        convexity,
        stationarity,
        optimality,
        perturbations,
        passed,
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// A random element of the candidate's class, constant across steps.
fn random_direction(candidate: &ControlLaw, scale: f64, rng: &mut ChaCha8Rng) -> ControlLaw {
    let n = candidate.grid().steps();
    let (nx, nu) = (candidate.state_dim(), candidate.control_dim());
    let variant = match candidate.variant() {
        ControlVariant::OpenLoop(_) => ControlVariant::OpenLoop(vec![normal_vec(rng, nu, scale); n]),
        ControlVariant::LinearFeedback { .. } => {
            let gain = DMatrix::from_fn(nu, nx, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            let offset = normal_vec(rng, nu, scale);
            ControlVariant::LinearFeedback {
                gains: vec![gain; n],
                offsets: vec![offset; n],
            }
        }
        ControlVariant::Tabulated(t) => {
            let shift = normal_vec(rng, nu, scale);
            let mut table = PathTensor::zeros(t.table().paths(), n, nu);
            for chunk in table.as_mut_slice().chunks_mut(nu) {
                chunk.copy_from_slice(shift.as_slice());
            }
            ControlLaw::tabulated_variant(table)
        }
    };
    candidate.with_variant(variant)
}

fn convexity_clause(
    problem: &ControlProblem,
    candidate: &ControlLaw,
    ev: &super::Evaluation,
    noise: &NoiseEnsemble,
    options: &VerificationOptions,
    rng: &mut ChaCha8Rng,
) -> ClauseReport {
    let states = &ev.states;
    let grid = states.grid();
    let (n, paths) = (grid.steps(), states.paths());
    let (nx, nu) = (states.state_dim(), states.control_dim());
    let coeffs = problem.dynamics.coeffs.as_ref();
    let cost_fn = problem.cost.as_ref();
    let admissible = candidate.admissible();
    let scale = options.perturbation_scale;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..options.convexity_samples {
        let a = rng.random_range(0..paths);
        let b = rng.random_range(0..paths);
        let k = rng.random_range(0..n);
        let t = grid.time(k);
        let x = states.state(a, k);
        let u = states.control(a, k);
        let xb = states.state(b, k) + normal_vec(rng, nx, scale);
        let ub = admissible.project(states.control(b, k) + normal_vec(rng, nu, scale));
        let (p, q, r) = (ev.adjoints.p_hat(a, k), ev.adjoints.q(a, k), ev.adjoints.r_all(a, k));
        let adj = AdjointPoint { p: &p, q: &q, r: &r };
        let h = |x: &DVector<f64>, u: &DVector<f64>| hamiltonian_value(t, x, u, adj, coeffs, cost_fn, noise.marks());
        let (xm, um) = ((&x + &xb) * 0.5, (&u + &ub) * 0.5);
        let (h0, h1, hm) = (h(&x, &u), h(&xb, &ub), h(&xm, &um));
        worst = worst.max((hm - 0.5 * (h0 + h1)) / (1.0 + h0.abs() + h1.abs()));

        let xn = states.state(a, n);
        let xnb = states.state(b, n) + normal_vec(rng, nx, scale);
        let (f0, f1, fm) = (
            cost_fn.terminal(&xn),
            cost_fn.terminal(&xnb),
            cost_fn.terminal(&((&xn + &xnb) * 0.5)),
        );
        worst = worst.max((fm - 0.5 * (f0 + f1)) / (1.0 + f0.abs() + f1.abs()));
    }
    ClauseReport {
        passed: worst <= CONVEXITY_TOL,
        statistic: worst,
        threshold: CONVEXITY_TOL,
        samples: options.convexity_samples,
    }
}
