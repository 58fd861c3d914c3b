//! Optimal control on top of the forward and adjoint solvers.

mod cost;
mod format;
mod gradient;
mod hamiltonian;
mod law;
mod optimize;
mod verification;

use std::sync::Arc;

use serde::Serialize;

pub use cost::{audit_cost, CostFunctional, QuadraticCost};
pub use format::{parse_control, write_control, write_trace_csv};
pub use gradient::{
    cost, duality_check, finite_difference_gateaux, gateaux_via_adjoint, gateaux_via_variation, smp_residual,
    solve_variational, CostEstimate, Direction, DualityReport, VariationEnsemble,
};
pub use hamiltonian::{hamiltonian, hamiltonian_minimizer, AdjointPoint, HamiltonianEval};
pub use law::{AdmissibleSet, ControlClass, ControlLaw, ControlVariant, NoisePrefix, TabulatedControl};
pub use optimize::{
    fit_to_class, optimize_hamiltonian_iteration, optimize_projected_gradient, HamiltonianIterationOptions,
    StepRule,
};
pub use verification::{
    verification_check, ClauseReport, PerturbationOutcome, VerificationOptions, VerificationReport,
};

use crate::adjoint::{solve_bsee_regression, AdjointEnsemble, RegressionBasis};
use crate::forward::{solve_forward, Dynamics, StateEnsemble};
use crate::noise::NoiseEnsemble;
use crate::Result;

/// State dynamics, cost and the regression basis used for the adjoint.
#[derive(Clone)]
pub struct ControlProblem {
    pub dynamics: Dynamics,
    pub cost: Arc<dyn CostFunctional>,
    pub basis: RegressionBasis,
}

/// One outer solve: forward ensemble, cost, adjoint and stationarity residual.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub states: StateEnsemble,
    pub cost: CostEstimate,
    pub adjoints: AdjointEnsemble,
    pub residual: f64,
}

impl ControlProblem {
    pub fn new(dynamics: Dynamics, cost: Arc<dyn CostFunctional>) -> Self {
        Self {
            dynamics,
            cost,
            basis: RegressionBasis::Affine,
        }
    }

    pub fn with_basis(mut self, basis: RegressionBasis) -> Self {
        self.basis = basis;
        self
    }

    pub fn simulate(&self, control: &ControlLaw, noise: &NoiseEnsemble) -> Result<StateEnsemble> {
        solve_forward(&self.dynamics, control, noise)
    }

    pub fn cost_of(&self, control: &ControlLaw, noise: &NoiseEnsemble) -> Result<CostEstimate> {
        Ok(cost(&self.simulate(control, noise)?, self.cost.as_ref()))
    }

    pub fn adjoint(&self, states: &StateEnsemble, noise: &NoiseEnsemble) -> Result<AdjointEnsemble> {
        solve_bsee_regression(&self.dynamics, self.cost.as_ref(), states, noise, self.basis)
    }

    pub fn evaluate(&self, control: &ControlLaw, noise: &NoiseEnsemble) -> Result<Evaluation> {
        let states = self.simulate(control, noise)?;
        let cost = cost(&states, self.cost.as_ref());
        let adjoints = self.adjoint(&states, noise)?;
        let residual = smp_residual(
            &self.dynamics,
            self.cost.as_ref(),
            &states,
            &adjoints,
            control.admissible(),
            noise,
        )?;
        Ok(Evaluation {
            states,
            cost,
            adjoints,
            residual,
        })
    }
}

/// One row of an optimisation trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    #[serde(rename = "J")]
    pub cost: f64,
    pub stderr: f64,
    pub residual: f64,
    /// Damping `β` or accepted step `γ`; zero on the final row.
    pub step: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OptimizationTrace {
    pub method: String,
    pub rows: Vec<TraceRow>,
    pub converged: bool,
}

impl OptimizationTrace {
    pub(crate) fn new(method: &str) -> Self {
        Self {
            method: method.to_string(),
            ..Self::default()
        }
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Number of control updates performed.
    pub fn updates(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }
}
