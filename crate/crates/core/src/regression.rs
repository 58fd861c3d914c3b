//! Least-squares regression on state features.
//!
//! Normal equations are assembled from fixed row chunks whose partial Gram
//! matrices are added in chunk order, so the result does not depend on the
//! worker count.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::{stats, Error, PathTensor, Result};

const CHUNK: usize = 256;

/// Scaled Gram matrices with condition number above this are rejected.
pub(crate) const MAX_CONDITION: f64 = 1e12;

/// Affine or affine-plus-quadratic features of standardised state coordinates.
///
/// Coordinates with no spread across the ensemble are deterministic at that
/// step and are already spanned by the intercept, so they are left out.
#[derive(Clone, Debug)]
pub(crate) struct FeatureMap {
    keep: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
    quadratic: bool,
}

impl FeatureMap {
    pub(crate) fn fit(states: &PathTensor, k: usize, quadratic: bool) -> Self {
        let paths = states.paths();
        let mut keep = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        let mut column = vec![0.0; paths];
        for i in 0..states.width() {
            for (p, v) in column.iter_mut().enumerate() {
                *v = states.row(p, k)[i];
            }
            let mean = stats::mean(&column);
            let sq: Vec<f64> = column.iter().map(|v| (v - mean) * (v - mean)).collect();
            let sd = stats::mean(&sq).sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                keep.push(i);
                center.push(mean);
                scale.push(sd);
            }
        }
        Self {
            keep,
            center,
            scale,
            quadratic,
        }
    }

    /// Indices of the state coordinates that enter the features.
    pub(crate) fn kept(&self) -> &[usize] {
        &self.keep
    }

    /// `(center, scale)` of the `j`-th kept coordinate.
    pub(crate) fn standardization(&self, j: usize) -> (f64, f64) {
        (self.center[j], self.scale[j])
    }

    pub(crate) fn len(&self) -> usize {
        let d = self.keep.len();
        1 + d + if self.quadratic { d * (d + 1) / 2 } else { 0 }
    }

    pub(crate) fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        let d = self.keep.len();
        for (j, &i) in self.keep.iter().enumerate() {
            out[1 + j] = (x[i] - self.center[j]) / self.scale[j];
        }
        if self.quadratic {
            let mut idx = 1 + d;
            for a in 0..d {
                for b in a..d {
                    out[idx] = out[1 + a] * out[1 + b];
                    idx += 1;
                }
            }
        }
    }
}

/// Least-squares coefficients `β` minimising `‖Xβ − Y‖` column by column.
///
/// Columns are scaled to unit norm, the scaled Gram matrix is checked for
/// conditioning through its eigenvalues and then factorised by Cholesky.
pub(crate) fn least_squares(design: &DMatrix<f64>, targets: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let rows = design.nrows();
    let cols = design.ncols();
    let outs = targets.ncols();
    debug_assert_eq!(targets.nrows(), rows);
    let starts: Vec<usize> = (0..rows).step_by(CHUNK).collect();
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>)> = starts
        .par_iter()
        .map(|&s| {
            let len = CHUNK.min(rows - s);
            let x = design.rows(s, len);
            let y = targets.rows(s, len);
            (x.transpose() * x, x.transpose() * y)
        })
        .collect();
    let mut gram = DMatrix::zeros(cols, cols);
    let mut rhs = DMatrix::zeros(cols, outs);
    for (g, r) in &partials {
        gram += g;
        rhs += r;
    }
    if gram.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("regression data at step {step}")));
    }

    let scale: Vec<f64> = (0..cols).map(|j| gram[(j, j)].sqrt()).collect();
    if scale.iter().any(|s| *s == 0.0) {
        return Err(Error::RankDeficient {
            step,
            condition: f64::INFINITY,
        });
    }
    let scaled = DMatrix::from_fn(cols, cols, |i, j| gram[(i, j)] / (scale[i] * scale[j]));
    let eig = SymmetricEigen::new(scaled.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::RankDeficient { step, condition });
    }
    let rhs_scaled = DMatrix::from_fn(cols, outs, |i, j| rhs[(i, j)] / scale[i]);
    let chol = scaled.cholesky().ok_or(Error::RankDeficient { step, condition })?;
    let beta = chol.solve(&rhs_scaled);
    Ok(DMatrix::from_fn(cols, outs, |i, j| beta[(i, j)] / scale[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_linear_relation() {
        let m = 1000;
        let design = DMatrix::from_fn(m, 3, |i, j| match j {
            0 => 1.0,
            1 => (i as f64 * 0.37).sin(),
            _ => (i as f64 * 0.11).cos() * 5.0,
        });
        let truth = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.5]);
        let y = &design * &truth;
        let beta = least_squares(&design, &y, 0).unwrap();
        assert!((beta - truth).abs().max() < 1e-10);
    }

    #[test]
    fn residual_is_orthogonal_to_features() {
        let m = 777;
        let design = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sqrt() });
        let y = DMatrix::from_fn(m, 1, |i, _| (i as f64 * 0.3).sin());
        let beta = least_squares(&design, &y, 0).unwrap();
        let resid = &y - &design * beta;
        let cov = design.transpose() * resid;
        assert!(cov.abs().max() < 1e-9);
    }

    #[test]
    fn collinear_design_is_rejected() {
        let design = DMatrix::from_fn(100, 2, |i, j| (i as f64) * (j + 1) as f64 + 1.0);
        let design = DMatrix::from_fn(100, 3, |i, j| if j < 2 { design[(i, j)] } else { design[(i, 0)] * 2.0 });
        let y = DMatrix::zeros(100, 1);
        assert!(matches!(least_squares(&design, &y, 7), Err(Error::RankDeficient { step: 7, .. })));
    }

    #[test]
    fn features_drop_deterministic_coordinates() {
        let mut states = PathTensor::zeros(4, 1, 2);
        for p in 0..4 {
            states.row_mut(p, 0).copy_from_slice(&[p as f64, 3.0]);
        }
        let map = FeatureMap::fit(&states, 0, true);
        assert_eq!(map.len(), 3);
        let mut out = vec![0.0; 3];
        map.eval(states.row(0, 0), &mut out);
        assert_eq!(out[0], 1.0);
        assert!((out[2] - out[1] * out[1]).abs() < 1e-15);
    }
}
