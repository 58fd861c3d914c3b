//! CSV and binary export of state ensembles.

use std::io::{Read, Write};

use super::StateEnsemble;
use crate::noise::{read_f64, read_u32, read_u64, TimeGrid, CACHE_VERSION};
use crate::{Error, PathTensor, Result};

const STATE_MAGIC: &[u8; 8] = b"GSMPSTAT";

/// Long format `path,step,coordinate,value`, one row per state coordinate.
pub fn write_states_csv<W: Write>(states: &StateEnsemble, w: W) -> Result<()> {
    write_tensor_csv(states.states(), w)
}

pub(crate) fn write_tensor_csv<W: Write>(tensor: &PathTensor, mut w: W) -> Result<()> {
    writeln!(w, "path,step,coordinate,value")?;
    for p in 0..tensor.paths() {
        for k in 0..tensor.len() {
            for (i, v) in tensor.row(p, k).iter().enumerate() {
                writeln!(w, "{p},{k},{i},{v:e}")?;
            }
        }
    }
    Ok(())
}

pub(crate) fn write_tensor<W: Write>(tensor: &PathTensor, w: &mut W) -> Result<()> {
    for dim in [tensor.paths(), tensor.len(), tensor.width()] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for v in tensor.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_tensor<R: Read>(r: &mut R) -> Result<PathTensor> {
    let paths = read_u64(r)? as usize;
    let len = read_u64(r)? as usize;
    let width = read_u64(r)? as usize;
    let count = paths
        .checked_mul(len)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(read_f64(r)?);
    }
    PathTensor::from_vec(paths, len, width, data).ok_or_else(|| Error::Format("inconsistent tensor shape".into()))
}

pub(crate) fn write_header<W: Write>(magic: &[u8; 8], grid: &TimeGrid, w: &mut W) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&grid.horizon().to_le_bytes())?;
    w.write_all(&(grid.steps() as u64).to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(magic: &[u8; 8], what: &str, r: &mut R) -> Result<TimeGrid> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(Error::Format(format!("not a {what} cache file")));
    }
    let version = read_u32(r)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let horizon = read_f64(r)?;
    let steps = read_u64(r)? as usize;
    TimeGrid::new(horizon, steps)
}

/// Layout (little endian): magic `GSMPSTAT`, `u32` version, `f64` horizon,
/// `u64` steps, then the state tensor and the control tensor, each as three
/// `u64` extents (paths, length, width) followed by row-major `f64` data.
pub fn write_states_cache<W: Write>(states: &StateEnsemble, mut w: W) -> Result<()> {
    write_header(STATE_MAGIC, states.grid(), &mut w)?;
    write_tensor(states.states(), &mut w)?;
    write_tensor(states.controls(), &mut w)?;
    Ok(())
}

pub fn read_states_cache<R: Read>(mut r: R) -> Result<StateEnsemble> {
    let grid = read_header(STATE_MAGIC, "state", &mut r)?;
    let states = read_tensor(&mut r)?;
    let controls = read_tensor(&mut r)?;
    if states.len() != grid.steps() + 1 || controls.len() != grid.steps() || states.paths() != controls.paths() {
        return Err(Error::Format("state cache extents disagree with its grid".into()));
    }
    Ok(StateEnsemble::from_parts(grid, states, controls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlLaw;
    use crate::forward::solve_forward;
    use crate::forward::tests::scalar_dynamics;
    use crate::forward::AffineCoefficients;
    use crate::noise::{sample_noise, MarkSpace};

    #[test]
    fn cache_roundtrip_and_csv_shape() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let noise = sample_noise(grid, MarkSpace::new(vec![1.0]).unwrap(), 3, 1).unwrap();
        let mut c = AffineCoefficients::zero(1, 1, 1);
        c.jumps[0].c[0] = 1.0;
        let d = scalar_dynamics(-1.0, 0.3, c, 1.0);
        let s = solve_forward(&d, &ControlLaw::zero_feedback(grid, 1, 1), &noise).unwrap();
        let mut buf = Vec::new();
        write_states_cache(&s, &mut buf).unwrap();
        assert_eq!(read_states_cache(buf.as_slice()).unwrap(), s);
        assert!(read_states_cache(&buf[..buf.len() - 1]).is_err());

        let mut csv = Vec::new();
        write_states_csv(&s, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 9);
        assert!(text.starts_with("path,step,coordinate,value\n0,0,0,1e0\n"));
    }
}
