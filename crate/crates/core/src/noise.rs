//! Time grids, finite mark spaces and reproducible noise ensembles.
//!
//! Every random quantity used by the solvers comes from a [`NoiseEnsemble`].
//! Brownian increments and Poisson counts are drawn from ChaCha8 streams keyed
//! by `(seed, channel)` with the path index as stream id, so a path's noise
//! never depends on which worker generated it or how many paths were drawn.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Uniform grid `0 = t_0 < … < t_n = T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_k`; the last node is exactly the horizon.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Same horizon with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor.max(1),
        }
    }
}

/// Finite mark space `E = {e_1, …, e_m}` with intensities `ν_i > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkSpace {
    labels: Vec<String>,
    weights: Vec<f64>,
}

impl MarkSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let labels = (1..=weights.len()).map(|i| format!("e{i}")).collect();
        Self::with_labels(labels, weights)
    }

    pub fn with_labels(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if labels.len() != weights.len() {
            return Err(Error::Dimension {
                what: "mark labels",
                expected: weights.len(),
                got: labels.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "mark intensities must be positive and finite, got {w}"
            )));
        }
        let mut seen = labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != labels.len() {
            return Err(Error::InvalidInput("mark labels must be distinct".into()));
        }
        Ok(Self { labels, weights })
    }

    /// No jumps at all.
    pub fn empty() -> Self {
        Self {
            labels: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// `ν(E)`.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Brownian increments and per-step jump counts for `paths` Monte Carlo paths.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseEnsemble {
    grid: TimeGrid,
    marks: MarkSpace,
    paths: usize,
    seed: u64,
    /// `paths × steps`, row-major.
    dw: Vec<f64>,
    /// `paths × steps × marks`, row-major.
    jumps: Vec<u32>,
}

const BROWNIAN_CHANNEL: u64 = 0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, channel, stream)`.
pub(crate) fn channel_rng(seed: u64, channel: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed) ^ splitmix64(channel.wrapping_add(0x5851_f42d_4c95_7f2d));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Draws `ΔW_k ~ N(0, Δt)` and `ΔN_{k,i} ~ Poisson(ν_i Δt)` for every path.
pub fn sample_noise(
    grid: TimeGrid,
    marks: MarkSpace,
    paths: usize,
    seed: u64,
) -> Result<NoiseEnsemble> {
    if paths == 0 {
        return Err(Error::InvalidInput("noise ensemble needs at least one path".into()));
    }
    let n = grid.steps();
    let m = marks.len();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let poissons = marks
        .weights()
        .iter()
        .map(|w| Poisson::new(w * dt).map_err(|e| Error::InvalidInput(e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let mut dw = vec![0.0; paths * n];
    let mut jumps = vec![0u32; paths * n * m];
    dw.par_chunks_mut(n)
        .enumerate()
        .for_each(|(path, row)| {
            let mut rng = channel_rng(seed, BROWNIAN_CHANNEL, path as u64);
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * sqrt_dt;
            }
        });
    if m > 0 {
        jumps
            .par_chunks_mut(n * m)
            .enumerate()
            .for_each(|(path, row)| {
                for (i, law) in poissons.iter().enumerate() {
                    let mut rng = channel_rng(seed, 1 + i as u64, path as u64);
                    for k in 0..n {
                        row[k * m + i] = law.sample(&mut rng) as u32;
                    }
                }
            });
    }
    Ok(NoiseEnsemble {
        grid,
        marks,
        paths,
        seed,
        dw,
        jumps,
    })
}

impl NoiseEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> f64 {
        self.dw[path * self.grid.steps() + step]
    }

    /// Brownian increments of one path.
    pub fn dw_path(&self, path: usize) -> &[f64] {
        let n = self.grid.steps();
        &self.dw[path * n..(path + 1) * n]
    }

    #[inline]
    pub fn jump_count(&self, path: usize, step: usize, mark: usize) -> u32 {
        let m = self.marks.len();
        self.jumps[(path * self.grid.steps() + step) * m + mark]
    }

    /// `ΔN_{k,i} − ν_i Δt` without bounds checks beyond slice indexing.
    #[inline]
    pub fn compensated(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.jump_count(path, step, mark) as f64 - self.marks.weight(mark) * self.grid.dt()
    }

    /// Compensated increments `(ΔN_{k,i} − ν_i Δt)_i` of one step.
    pub fn compensated_increment(&self, path: usize, step: usize) -> Result<Vec<f64>> {
        if path >= self.paths {
            return Err(Error::OutOfRange {
                what: "path",
                index: path,
                len: self.paths,
            });
        }
        if step >= self.grid.steps() {
            return Err(Error::OutOfRange {
                what: "step",
                index: step,
                len: self.grid.steps(),
            });
        }
        Ok((0..self.marks.len())
            .map(|i| self.compensated(path, step, i))
            .collect())
    }

    /// Same jumps with every Brownian increment negated.
    pub fn antithetic_pair(&self) -> Self {
        let mut out = self.clone();
        out.dw.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// First `paths` paths of this ensemble; identical to sampling with fewer
    /// paths under the same seed.
    pub fn truncated(&self, paths: usize) -> Result<Self> {
        if paths == 0 || paths > self.paths {
            return Err(Error::InvalidInput(format!(
                "cannot truncate {} paths to {paths}",
                self.paths
            )));
        }
        let n = self.grid.steps();
        let m = self.marks.len();
        Ok(Self {
            grid: self.grid,
            marks: self.marks.clone(),
            paths,
            seed: self.seed,
            dw: self.dw[..paths * n].to_vec(),
            jumps: self.jumps[..paths * n * m].to_vec(),
        })
    }

    /// Writes the binary cache.
    ///
    /// Layout (little endian): magic `GSMPNOIS`, `u32` version (1), `f64`
    /// horizon, `u64` steps, `u64` paths, `u64` seed, `u64` mark count, then per
    /// mark a `u32` label length, the UTF-8 label and the `f64` intensity;
    /// followed by `paths × steps` `f64` increments and
    /// `paths × steps × marks` `u32` counts, both row-major.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NOISE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&self.grid.horizon().to_le_bytes())?;
        w.write_all(&(self.grid.steps() as u64).to_le_bytes())?;
        w.write_all(&(self.paths as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.marks.len() as u64).to_le_bytes())?;
        for (label, weight) in self.marks.labels().iter().zip(self.marks.weights()) {
            w.write_all(&(label.len() as u32).to_le_bytes())?;
            w.write_all(label.as_bytes())?;
            w.write_all(&weight.to_le_bytes())?;
        }
        for v in &self.dw {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.jumps {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != NOISE_MAGIC {
            return Err(Error::Format("not a noise cache file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let horizon = read_f64(&mut r)?;
        let steps = read_u64(&mut r)? as usize;
        let paths = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let m = read_u64(&mut r)? as usize;
        let mut labels = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for _ in 0..m {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            labels.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
            weights.push(read_f64(&mut r)?);
        }
        let grid = TimeGrid::new(horizon, steps)?;
        let marks = MarkSpace::with_labels(labels, weights)?;
        let mut dw = vec![0.0; paths * steps];
        for v in dw.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut jumps = vec![0u32; paths * steps * m];
        for v in jumps.iter_mut() {
            *v = read_u32(&mut r)?;
        }
        Ok(Self {
            grid,
            marks,
            paths,
            seed,
            dw,
            jumps,
        })
    }
}

const NOISE_MAGIC: &[u8; 8] = b"GSMPNOIS";
pub(crate) const CACHE_VERSION: u32 = 1;

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;

    fn one_mark(nu: f64) -> MarkSpace {
        MarkSpace::new(vec![nu]).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_inputs() {
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.time(3), 1.0);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn marks_validate_weights() {
        assert!(MarkSpace::new(vec![1.0, 0.0]).is_err());
        assert!(MarkSpace::with_labels(vec!["a".into(), "a".into()], vec![1.0, 1.0]).is_err());
        assert_eq!(MarkSpace::new(vec![0.5, 1.5]).unwrap().total_mass(), 2.0);
    }

    #[test]
    fn zero_paths_rejected() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert!(sample_noise(g, one_mark(1.0), 0, 1).is_err());
    }

    #[test]
    fn same_seed_same_ensemble() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let a = sample_noise(g, one_mark(2.0), 50, 42).unwrap();
        let b = sample_noise(g, one_mark(2.0), 50, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(g, one_mark(2.0), 50, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn paths_do_not_depend_on_ensemble_size() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let small = sample_noise(g, one_mark(1.0), 5, 9).unwrap();
        let big = sample_noise(g, one_mark(1.0), 40, 9).unwrap();
        assert_eq!(small, big.truncated(5).unwrap());
    }

    #[test]
    fn poisson_mean_within_clt_bound() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        let e = sample_noise(g, one_mark(1.0), 100_000, 7).unwrap();
        let counts: Vec<f64> = (0..e.paths()).map(|p| e.jump_count(p, 0, 0) as f64).collect();
        let est = Estimate::from_samples(&counts);
        assert!((est.mean - 1.0).abs() < 0.0095, "mean {}", est.mean);
    }

    #[test]
    fn brownian_variance_within_five_percent() {
        let g = TimeGrid::new(0.25, 1).unwrap();
        let e = sample_noise(g, MarkSpace::empty(), 100_000, 11).unwrap();
        let sq: Vec<f64> = (0..e.paths()).map(|p| e.dw(p, 0).powi(2)).collect();
        let var = crate::stats::mean(&sq);
        assert!((var - 0.25).abs() < 0.05 * 0.25, "variance {var}");
    }

    #[test]
    fn compensated_increment_values() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let mut e = sample_noise(g, one_mark(1.0), 1, 3).unwrap();
        e.jumps[0] = 0;
        e.jumps[1] = 2;
        let c0 = e.compensated_increment(0, 0).unwrap();
        let c1 = e.compensated_increment(0, 1).unwrap();
        assert!((c0[0] + 0.1).abs() < 1e-15);
        assert!((c1[0] - 1.9).abs() < 1e-15);
        assert!(e.compensated_increment(1, 0).is_err());
        assert!(e.compensated_increment(0, 10).is_err());
    }

    #[test]
    fn compensated_sum_is_mean_zero() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let marks = MarkSpace::new(vec![1.0, 3.0]).unwrap();
        let e = sample_noise(g, marks, 20_000, 5).unwrap();
        for i in 0..2 {
            let totals: Vec<f64> = (0..e.paths())
                .map(|p| (0..20).map(|k| e.compensated(p, k, i)).sum())
                .collect();
            let est = Estimate::from_samples(&totals);
            let nu = e.marks().weight(i);
            assert!(est.mean.abs() < 3.0 * (nu / e.paths() as f64).sqrt());
        }
    }

    #[test]
    fn quadratic_variation_mean_is_horizon() {
        let g = TimeGrid::new(2.0, 32).unwrap();
        let e = sample_noise(g, MarkSpace::empty(), 20_000, 17).unwrap();
        let qv: Vec<f64> = (0..e.paths())
            .map(|p| e.dw_path(p).iter().map(|d| d * d).sum())
            .collect();
        let est = Estimate::from_samples(&qv);
        assert!((est.mean - 2.0).abs() < 3.0 * est.stderr);
    }

    #[test]
    fn antithetic_is_involution_and_cancels_odd_functionals() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let e = sample_noise(g, one_mark(1.0), 100, 1).unwrap();
        let a = e.antithetic_pair();
        assert_eq!(a.antithetic_pair(), e);
        assert_eq!(a.jumps, e.jumps);
        // W(T) is linear in the increments, so the paired estimator is exactly zero.
        for p in 0..e.paths() {
            let w: f64 = e.dw_path(p).iter().sum();
            let wa: f64 = a.dw_path(p).iter().sum();
            assert_eq!(w + wa, 0.0);
        }
    }

    #[test]
    fn bit_exact_across_thread_counts() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let sample = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_noise(g, MarkSpace::new(vec![1.0, 0.5]).unwrap(), 300, 99).unwrap())
        };
        let one = sample(1);
        assert_eq!(one, sample(2));
        assert_eq!(one, sample(8));
    }

    #[test]
    fn cache_roundtrip() {
        let g = TimeGrid::new(0.5, 6).unwrap();
        let e = sample_noise(g, MarkSpace::new(vec![1.0, 2.0]).unwrap(), 7, 21).unwrap();
        let mut buf = Vec::new();
        e.write_cache(&mut buf).unwrap();
        assert_eq!(NoiseEnsemble::read_cache(buf.as_slice()).unwrap(), e);
        assert!(NoiseEnsemble::read_cache(&b"garbage!"[..]).is_err());
    }
}
