use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::noise::{NoiseEnsemble, TimeGrid};
use crate::{Error, PathTensor, Result};

/// Convex control domain `𝒰`.
#[derive(Clone, Debug, PartialEq)]
pub enum AdmissibleSet {
    Unconstrained,
    /// Coordinate-wise box `lower ≤ u ≤ upper`.
    Box { lower: DVector<f64>, upper: DVector<f64> },
}

impl AdmissibleSet {
    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                what: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidInput("box needs lower <= upper".into()));
        }
        Ok(Self::Box { lower, upper })
    }

    /// Euclidean projection.
    pub fn project(&self, mut u: DVector<f64>) -> DVector<f64> {
        if let Self::Box { lower, upper } = self {
            for i in 0..u.len() {
                u[i] = u[i].clamp(lower[i], upper[i]);
            }
        }
        u
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            Self::Unconstrained => true,
            Self::Box { lower, upper } => (0..u.len()).all(|i| lower[i] <= u[i] && u[i] <= upper[i]),
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, Self::Unconstrained)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlClass {
    OpenLoop,
    LinearFeedback,
    Tabulated,
}

/// Per-path, per-step control values. Only constructible from causal rules,
/// so every entry `(path, k)` depends on that path's noise before `t_k` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedControl {
    table: PathTensor,
}

impl TabulatedControl {
    pub fn table(&self) -> &PathTensor {
        &self.table
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ControlVariant {
    /// One value per step `k = 0..n`.
    OpenLoop(Vec<DVector<f64>>),
    /// `u_k = K_k x + k_k`.
    LinearFeedback {
        gains: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
    },
    Tabulated(TabulatedControl),
}

/// Brownian and jump history of one path strictly before a step.
pub struct NoisePrefix<'a> {
    noise: &'a NoiseEnsemble,
    path: usize,
    step: usize,
}

impl NoisePrefix<'_> {
    pub fn step(&self) -> usize {
        self.step
    }

    /// `ΔW_j` for `j < step`.
    pub fn dw(&self) -> &[f64] {
        &self.noise.dw_path(self.path)[..self.step]
    }

    /// `ΔN_{j,i}` for `j < step`.
    pub fn jump_count(&self, j: usize, mark: usize) -> Option<u32> {
        (j < self.step && mark < self.noise.marks().len())
            .then(|| self.noise.jump_count(self.path, j, mark))
    }
}

/// An admissible control represented in one of three classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlLaw {
    grid: TimeGrid,
    state_dim: usize,
    control_dim: usize,
    variant: ControlVariant,
    admissible: AdmissibleSet,
}

impl ControlLaw {
    pub fn open_loop(grid: TimeGrid, state_dim: usize, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.steps() {
            return Err(Error::Dimension {
                what: "open-loop values",
                expected: grid.steps(),
                got: values.len(),
            });
        }
        let control_dim = values[0].len();
        if values.iter().any(|v| v.len() != control_dim) {
            return Err(Error::InvalidInput("open-loop values have mixed lengths".into()));
        }
        Ok(Self {
            grid,
            state_dim,
            control_dim,
            variant: ControlVariant::OpenLoop(values),
            admissible: AdmissibleSet::Unconstrained,
        })
    }

    pub fn constant_open_loop(grid: TimeGrid, state_dim: usize, value: DVector<f64>) -> Self {
        Self::open_loop(grid, state_dim, vec![value; grid.steps()]).expect("consistent by construction")
    }

    pub fn linear_feedback(grid: TimeGrid, gains: Vec<DMatrix<f64>>, offsets: Vec<DVector<f64>>) -> Result<Self> {
        if gains.len() != grid.steps() || offsets.len() != grid.steps() {
            return Err(Error::Dimension {
                what: "feedback gains/offsets",
                expected: grid.steps(),
                got: gains.len().min(offsets.len()),
            });
        }
        let (control_dim, state_dim) = gains[0].shape();
        if gains.iter().any(|g| g.shape() != (control_dim, state_dim))
            || offsets.iter().any(|o| o.len() != control_dim)
        {
            return Err(Error::InvalidInput("feedback gains/offsets have mixed shapes".into()));
        }
        Ok(Self {
            grid,
            state_dim,
            control_dim,
            variant: ControlVariant::LinearFeedback { gains, offsets },
            admissible: AdmissibleSet::Unconstrained,
        })
    }

    pub fn constant_feedback(grid: TimeGrid, gain: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        Self::linear_feedback(grid, vec![gain; grid.steps()], vec![offset; grid.steps()])
    }

    /// `u ≡ 0` in the linear-feedback class.
    pub fn zero_feedback(grid: TimeGrid, state_dim: usize, control_dim: usize) -> Self {
        Self::constant_feedback(grid, DMatrix::zeros(control_dim, state_dim), DVector::zeros(control_dim))
            .expect("consistent by construction")
    }

    /// Tabulated control built by a causal rule: `rule(path, k, prefix)` only
    /// sees the path's noise strictly before `t_k`.
    pub fn tabulated_from_rule<F>(noise: &NoiseEnsemble, state_dim: usize, control_dim: usize, rule: F) -> Result<Self>
    where
        F: Fn(usize, usize, &NoisePrefix<'_>) -> DVector<f64>,
    {
        let n = noise.steps();
        let mut table = PathTensor::zeros(noise.paths(), n, control_dim);
        for path in 0..noise.paths() {
            for step in 0..n {
                let prefix = NoisePrefix { noise, path, step };
                let v = rule(path, step, &prefix);
                if v.len() != control_dim {
                    return Err(Error::Dimension {
                        what: "tabulated control value",
                        expected: control_dim,
                        got: v.len(),
                    });
                }
                table.row_mut(path, step).copy_from_slice(v.as_slice());
            }
        }
        Ok(Self::from_table(*noise.grid(), state_dim, table))
    }

    pub fn tabulated_zeros(noise: &NoiseEnsemble, state_dim: usize, control_dim: usize) -> Self {
        Self::from_table(
            *noise.grid(),
            state_dim,
            PathTensor::zeros(noise.paths(), noise.steps(), control_dim),
        )
    }

    /// Table of adapted values produced inside the crate (realised controls,
    /// pathwise Hamiltonian minimisers).
    pub(crate) fn from_table(grid: TimeGrid, state_dim: usize, table: PathTensor) -> Self {
        Self {
            grid,
            state_dim,
            control_dim: table.width(),
            variant: ControlVariant::Tabulated(TabulatedControl { table }),
            admissible: AdmissibleSet::Unconstrained,
        }
    }

    pub fn with_admissible(mut self, admissible: AdmissibleSet) -> Result<Self> {
        if let AdmissibleSet::Box { lower, .. } = &admissible {
            if lower.len() != self.control_dim {
                return Err(Error::Dimension {
                    what: "box bounds",
                    expected: self.control_dim,
                    got: lower.len(),
                });
            }
        }
        self.admissible = admissible;
        Ok(self)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn variant(&self) -> &ControlVariant {
        &self.variant
    }

    pub fn admissible(&self) -> &AdmissibleSet {
        &self.admissible
    }

    pub fn class(&self) -> ControlClass {
        match self.variant {
            ControlVariant::OpenLoop(_) => ControlClass::OpenLoop,
            ControlVariant::LinearFeedback { .. } => ControlClass::LinearFeedback,
            ControlVariant::Tabulated(_) => ControlClass::Tabulated,
        }
    }

    /// Tabulated controls are tied to an ensemble's path count.
    pub fn table_paths(&self) -> Option<usize> {
        match &self.variant {
            ControlVariant::Tabulated(t) => Some(t.table.paths()),
            _ => None,
        }
    }

    /// `u(t_k)` on `path` at state `x`, projected onto the admissible set.
    pub fn eval(&self, path: usize, step: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.control_dim);
        self.eval_into(path, step, x, &mut out);
        out
    }

    /// [`ControlLaw::eval`] into a caller-owned buffer.
    pub fn eval_into(&self, path: usize, step: usize, x: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.variant {
            ControlVariant::OpenLoop(v) => out.copy_from(&v[step]),
            ControlVariant::LinearFeedback { gains, offsets } => {
                out.copy_from(&offsets[step]);
                out.gemv(1.0, &gains[step], x, 1.0);
            }
            ControlVariant::Tabulated(t) => out.copy_from_slice(t.table.row(path, step)),
        }
        if let AdmissibleSet::Box { lower, upper } = &self.admissible {
            for i in 0..out.len() {
                out[i] = out[i].clamp(lower[i], upper[i]);
            }
        }
    }

    /// `(1 − β)·self + β·other` in the shared representation.
    pub fn blend(&self, other: &ControlLaw, beta: f64) -> Result<ControlLaw> {
        let mix_v = |a: &DVector<f64>, b: &DVector<f64>| (1.0 - beta) * a + beta * b;
        let variant = match (&self.variant, &other.variant) {
            (ControlVariant::OpenLoop(a), ControlVariant::OpenLoop(b)) if a.len() == b.len() => {
                ControlVariant::OpenLoop(a.iter().zip(b).map(|(x, y)| mix_v(x, y)).collect())
            }
            (
                ControlVariant::LinearFeedback { gains: ga, offsets: oa },
                ControlVariant::LinearFeedback { gains: gb, offsets: ob },
            ) if ga.len() == gb.len() => ControlVariant::LinearFeedback {
                gains: ga.iter().zip(gb).map(|(x, y)| (1.0 - beta) * x + beta * y).collect(),
                offsets: oa.iter().zip(ob).map(|(x, y)| mix_v(x, y)).collect(),
            },
            (ControlVariant::Tabulated(a), ControlVariant::Tabulated(b))
                if a.table.as_slice().len() == b.table.as_slice().len() =>
            {
                let data = a
                    .table
                    .as_slice()
                    .iter()
                    .zip(b.table.as_slice())
                    .map(|(x, y)| (1.0 - beta) * x + beta * y)
                    .collect();
                ControlVariant::Tabulated(TabulatedControl {
                    table: PathTensor::from_vec(a.table.paths(), a.table.len(), a.table.width(), data)
                        .expect("same shape"),
                })
            }
            _ => return Err(Error::InvalidInput("cannot blend controls of different classes or shapes".into())),
        };
        Ok(Self {
            variant,
            ..self.clone()
        })
    }

    /// `self + s·other` in the shared representation.
    pub fn add_scaled(&self, other: &ControlLaw, s: f64) -> Result<ControlLaw> {
        let variant = match (&self.variant, &other.variant) {
            (ControlVariant::OpenLoop(a), ControlVariant::OpenLoop(b)) if a.len() == b.len() => {
                ControlVariant::OpenLoop(a.iter().zip(b).map(|(x, y)| x + y * s).collect())
            }
            (
                ControlVariant::LinearFeedback { gains: ga, offsets: oa },
                ControlVariant::LinearFeedback { gains: gb, offsets: ob },
            ) if ga.len() == gb.len() => ControlVariant::LinearFeedback {
                gains: ga.iter().zip(gb).map(|(x, y)| x + y * s).collect(),
                offsets: oa.iter().zip(ob).map(|(x, y)| x + y * s).collect(),
            },
            (ControlVariant::Tabulated(a), ControlVariant::Tabulated(b))
                if a.table.as_slice().len() == b.table.as_slice().len() =>
            {
                let data = a.table.as_slice().iter().zip(b.table.as_slice()).map(|(x, y)| x + y * s).collect();
                ControlVariant::Tabulated(TabulatedControl {
                    table: PathTensor::from_vec(a.table.paths(), a.table.len(), a.table.width(), data)
                        .expect("same shape"),
                })
            }
            _ => return Err(Error::InvalidInput("cannot combine controls of different classes or shapes".into())),
        };
        Ok(Self {
            variant,
            ..self.clone()
        })
    }

    pub(crate) fn with_variant(&self, variant: ControlVariant) -> Self {
        let control_dim = match &variant {
            ControlVariant::OpenLoop(v) => v[0].len(),
            ControlVariant::LinearFeedback { offsets, .. } => offsets[0].len(),
            ControlVariant::Tabulated(t) => t.table.width(),
        };
        Self {
            variant,
            control_dim,
            ..self.clone()
        }
    }

    pub(crate) fn tabulated_variant(table: PathTensor) -> ControlVariant {
        ControlVariant::Tabulated(TabulatedControl { table })
    }

    /// Checks the law can drive an ensemble with these dimensions.
    pub fn check_compatible(&self, noise: &NoiseEnsemble, state_dim: usize, control_dim: usize) -> Result<()> {
        if self.grid.steps() != noise.steps() {
            return Err(Error::Dimension {
                what: "control steps",
                expected: noise.steps(),
                got: self.grid.steps(),
            });
        }
        if self.state_dim != state_dim {
            return Err(Error::Dimension {
                what: "control state dimension",
                expected: state_dim,
                got: self.state_dim,
            });
        }
        if self.control_dim != control_dim {
            return Err(Error::Dimension {
                what: "control dimension",
                expected: control_dim,
                got: self.control_dim,
            });
        }
        if let Some(p) = self.table_paths() {
            if p != noise.paths() {
                return Err(Error::Dimension {
                    what: "tabulated control paths",
                    expected: noise.paths(),
                    got: p,
                });
            }
        }
        Ok(())
    }
}
