//! The experiment configuration file.
//!
//! A TOML document with a mandatory `schema_version = 1`, optional global
//! overrides, the `[problem]` table describing the controlled SPDE and one
//! optional table per subcommand. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use gelfand_smp::cauchy::{CauchyConfig, CoefficientSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Overrides `problem.seed`.
    pub seed: Option<u64>,
    /// Overrides `problem.paths`.
    pub paths: Option<usize>,
    /// Overrides `problem.steps`.
    pub steps: Option<usize>,
    /// Output directory, relative to the working directory.
    pub output: Option<PathBuf>,
    /// Multiplies every control term of the drift, diffusion and jump
    /// coefficients. The Riccati oracle is only available at 1.
    #[serde(default = "one")]
    pub control_coupling: f64,
    #[serde(default)]
    pub problem: CauchyConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
}

fn one() -> f64 {
    1.0
}

/// Which control law to apply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    #[default]
    Zero,
    /// Feedback from the Riccati oracle.
    Riccati,
    /// `u = K x + offset`, the same at every step.
    ConstantFeedback { gain: Vec<Vec<f64>>, offset: Vec<f64> },
    /// A constant deterministic control.
    OpenLoop { value: Vec<f64> },
    /// A control file written by `optimize`.
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Euler,
    Picard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub control: ControlSpec,
    pub solver: Solver,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Number of leading paths written to the state CSV; all when absent.
    pub csv_paths: Option<usize>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            control: ControlSpec::Zero,
            solver: Solver::Euler,
            picard_tol: 1e-10,
            picard_max_iter: 200,
            csv_paths: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Coercivity,
    Superparabolic,
    Lipschitz,
    Transpose,
    Ito,
    Apriori,
    Dependence,
}

impl AuditKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Coercivity => "coercivity",
            Self::Superparabolic => "superparabolic",
            Self::Lipschitz => "lipschitz",
            Self::Transpose => "transpose",
            Self::Ito => "ito",
            Self::Apriori => "apriori",
            Self::Dependence => "dependence",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub audits: Vec<AuditKind>,
    /// Control applied in the simulation-based audits.
    pub control: ControlSpec,
    pub lipschitz_probes: usize,
    /// Step counts of the Itô refinement study.
    pub ito_steps: Vec<usize>,
    pub ito_min_slope: f64,
    /// Constant added to every drift coordinate, scaled by `δ`.
    pub dependence_shift: f64,
    pub dependence_scales: Vec<f64>,
    pub dependence_slope: f64,
    pub dependence_slope_tol: f64,
    /// Largest acceptable empirical a priori constant.
    pub apriori_max_ratio: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            audits: vec![
                AuditKind::Coercivity,
                AuditKind::Superparabolic,
                AuditKind::Lipschitz,
                AuditKind::Transpose,
                AuditKind::Ito,
                AuditKind::Apriori,
                AuditKind::Dependence,
            ],
            control: ControlSpec::Zero,
            lipschitz_probes: 256,
            ito_steps: vec![32, 64, 128, 256],
            ito_min_slope: 0.4,
            dependence_shift: 1.0,
            dependence_scales: vec![0.1, 0.05, 0.025],
            dependence_slope: 2.0,
            dependence_slope_tol: 0.1,
            apriori_max_ratio: 1e3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    HamiltonianIteration,
    ProjectedGradient,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSpec {
    OpenLoop,
    #[default]
    LinearFeedback,
    Tabulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSpec {
    pub initial: f64,
    pub shrink: f64,
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for StepSpec {
    fn default() -> Self {
        Self {
            initial: 0.5,
            shrink: 0.5,
            armijo: 1e-4,
            min_step: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationSpec {
    pub enabled: bool,
    pub perturbation_count: usize,
    pub perturbation_scale: f64,
    pub residual_threshold: f64,
    pub convexity_samples: usize,
}

impl Default for VerificationSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            perturbation_count: 20,
            perturbation_scale: 0.25,
            residual_threshold: 1e-2,
            convexity_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub method: Method,
    pub class: ClassSpec,
    pub admissible: Option<BoxSpec>,
    /// Damping of the Hamiltonian iteration.
    pub beta: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub step: StepSpec,
    /// Relative tolerance on the final cost against the Riccati value.
    pub oracle_tol: f64,
    pub verification: VerificationSpec,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            method: Method::HamiltonianIteration,
            class: ClassSpec::LinearFeedback,
            admissible: None,
            beta: 0.5,
            max_iter: 50,
            tol: 1e-6,
            step: StepSpec::default(),
            oracle_tol: 0.01,
            verification: VerificationSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config("config is not valid UTF-8".into()))?;
        let config = Self::parse(text)?;
        Ok((config, bytes))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// The problem with the global overrides applied.
    pub fn effective_problem(&self) -> CauchyConfig {
        let mut p = self.problem.clone();
        if let Some(seed) = self.seed {
            p.seed = seed;
        }
        if let Some(paths) = self.paths {
            p.paths = paths;
        }
        if let Some(steps) = self.steps {
            p.steps = steps;
        }
        p
    }

    /// Structural checks that need no numerics. Modelling assumptions such
    /// as coercivity are left to the subcommands.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let p = self.effective_problem();
        if p.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if p.paths == 0 {
            return fail("paths must be at least 1".into());
        }
        if p.modes == 0 {
            return fail("problem.modes must be at least 1".into());
        }
        if !(p.horizon.is_finite() && p.horizon > 0.0) {
            return fail(format!("problem.horizon must be positive, got {}", p.horizon));
        }
        if !(p.domain_length.is_finite() && p.domain_length > 0.0) {
            return fail("problem.domain_length must be positive".into());
        }
        if p.x0.len() != p.modes {
            return fail(format!("problem.x0 has {} entries, expected {}", p.x0.len(), p.modes));
        }
        if p.gammas.len() != p.marks.len() {
            return fail(format!(
                "problem.gammas has {} entries but problem.marks has {}",
                p.gammas.len(),
                p.marks.len()
            ));
        }
        if p.marks.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return fail("problem.marks must be finite and nonnegative".into());
        }
        if p.x0.iter().chain(&p.gammas).any(|v| !v.is_finite()) {
            return fail("problem.x0 and problem.gammas must be finite".into());
        }
        if !(p.kappa > 0.0 && p.kappa < 1.0) {
            return fail(format!("problem.kappa must lie in (0, 1), got {}", p.kappa));
        }
        if !(p.bound.is_finite() && p.bound > 0.0) {
            return fail("problem.bound must be positive".into());
        }
        for (name, spec) in [("a", &p.a), ("b_drift", &p.b_drift), ("c", &p.c), ("eta", &p.eta), ("rho", &p.rho)] {
            check_coefficient(name, spec)?;
        }
        if !self.control_coupling.is_finite() {
            return fail("control_coupling must be finite".into());
        }
        self.validate_sections(p.modes)
    }

    fn validate_sections(&self, modes: usize) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Config(msg));
        for (section, spec) in [("simulate", &self.simulate.control), ("audit", &self.audit.control)] {
            check_control_spec(section, spec, modes)?;
        }
        let s = &self.simulate;
        if !(s.picard_tol.is_finite() && s.picard_tol >= 0.0) || s.picard_max_iter == 0 {
            return fail("simulate.picard_tol must be nonnegative and picard_max_iter positive".into());
        }
        let a = &self.audit;
        if a.ito_steps.len() < 2 || a.ito_steps.contains(&0) {
            return fail("audit.ito_steps needs at least two positive step counts".into());
        }
        if a.dependence_scales.len() < 2 || a.dependence_scales.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return fail("audit.dependence_scales needs at least two positive scales".into());
        }
        if a.lipschitz_probes == 0 {
            return fail("audit.lipschitz_probes must be positive".into());
        }
        let o = &self.optimize;
        if !(o.beta > 0.0 && o.beta <= 1.0) {
            return fail(format!("optimize.beta must lie in (0, 1], got {}", o.beta));
        }
        if o.max_iter == 0 {
            return fail("optimize.max_iter must be positive".into());
        }
        if !(o.tol.is_finite() && o.tol >= 0.0) {
            return fail("optimize.tol must be nonnegative".into());
        }
        let st = &o.step;
        if !(st.initial > 0.0 && st.shrink > 0.0 && st.shrink < 1.0 && st.armijo >= 0.0 && st.min_step > 0.0) {
            return fail("optimize.step needs initial > 0, shrink in (0, 1), armijo >= 0, min_step > 0".into());
        }
        if let Some(b) = &o.admissible {
            if b.lower.len() != modes || b.upper.len() != modes {
                return fail(format!("optimize.admissible bounds need {modes} entries"));
            }
        }
        let v = &o.verification;
        if !(v.perturbation_scale.is_finite() && v.perturbation_scale > 0.0) {
            return fail("optimize.verification.perturbation_scale must be positive".into());
        }
        Ok(())
    }
}

fn check_coefficient(name: &str, spec: &CoefficientSpec) -> Result<(), CliError> {
    let ok = match spec {
        CoefficientSpec::Constant { value } => value.is_finite(),
        CoefficientSpec::Cosine { mean, amplitude, .. } => mean.is_finite() && amplitude.is_finite(),
        CoefficientSpec::PiecewiseInT { breaks, values } => {
            values.len() == breaks.len() + 1
                && breaks.iter().chain(values).all(|v| v.is_finite())
                && breaks.windows(2).all(|w| w[0] < w[1])
        }
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "problem.{name} is malformed (piecewise_in_t needs one more value than breaks, increasing breaks)"
        )))
    }
}

fn check_control_spec(section: &str, spec: &ControlSpec, modes: usize) -> Result<(), CliError> {
    let ok = match spec {
        ControlSpec::ConstantFeedback { gain, offset } => {
            gain.len() == modes && gain.iter().all(|row| row.len() == modes) && offset.len() == modes
        }
        ControlSpec::OpenLoop { value } => value.len() == modes,
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{section}.control has the wrong shape for {modes} modes"
        )))
    }
}
