//! Plain-text serialisation of control laws and optimisation traces.
//!
//! A control file starts with a version line followed by `key = value`
//! header lines and one data line per step (or per path and step for
//! tabulated controls):
//!
//! ```text
//! # gelfand-smp control v1
//! variant = linear_feedback
//! horizon = 1e0
//! steps = 2
//! state_dim = 1
//! control_dim = 1
//! admissible = unconstrained
//! gain 0 -5e-1
//! offset 0 0e0
//! gain 1 -4e-1
//! offset 1 0e0
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/parse cycle reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use super::{AdmissibleSet, ControlClass, ControlLaw, ControlVariant, OptimizationTrace};
use crate::noise::TimeGrid;
use crate::{Error, PathTensor, Result};

const HEADER: &str = "# gelfand-smp control v1";

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for v in values {
        let _ = write!(s, " {v:e}");
    }
    s
}

pub fn write_control<W: Write>(law: &ControlLaw, mut w: W) -> Result<()> {
    let grid = law.grid();
    let variant = match law.class() {
        ControlClass::OpenLoop => "open_loop",
        ControlClass::LinearFeedback => "linear_feedback",
        ControlClass::Tabulated => "tabulated",
    };
    writeln!(w, "{HEADER}")?;
    writeln!(w, "variant = {variant}")?;
    writeln!(w, "horizon = {:e}", grid.horizon())?;
    writeln!(w, "steps = {}", grid.steps())?;
    writeln!(w, "state_dim = {}", law.state_dim())?;
    writeln!(w, "control_dim = {}", law.control_dim())?;
    match law.admissible() {
        AdmissibleSet::Unconstrained => writeln!(w, "admissible = unconstrained")?,
        AdmissibleSet::Box { lower, upper } => {
            writeln!(w, "admissible = box")?;
            writeln!(w, "lower ={}", join(lower.iter().copied()))?;
            writeln!(w, "upper ={}", join(upper.iter().copied()))?;
        }
    }
    match law.variant() {
        ControlVariant::OpenLoop(values) => {
            for (k, v) in values.iter().enumerate() {
                writeln!(w, "value {k}{}", join(v.iter().copied()))?;
            }
        }
        ControlVariant::LinearFeedback { gains, offsets } => {
            for (k, (g, o)) in gains.iter().zip(offsets).enumerate() {
                let row_major = (0..g.nrows()).flat_map(|i| (0..g.ncols()).map(move |j| g[(i, j)]));
                writeln!(w, "gain {k}{}", join(row_major))?;
                writeln!(w, "offset {k}{}", join(o.iter().copied()))?;
            }
        }
        ControlVariant::Tabulated(t) => {
            let table = t.table();
            writeln!(w, "paths = {}", table.paths())?;
            for p in 0..table.paths() {
                for k in 0..table.len() {
                    writeln!(w, "row {p} {k}{}", join(table.row(p, k).iter().copied()))?;
                }
            }
        }
    }
    Ok(())
}

fn parse_floats(tokens: &[&str], expected: usize, line: usize) -> Result<Vec<f64>> {
    if tokens.len() != expected {
        return Err(Error::Format(format!(
            "line {line}: expected {expected} values, found {}",
            tokens.len()
        )));
    }
    tokens
        .iter()
        .map(|t| {
            let v: f64 = t
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: cannot parse '{t}' as a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Format(format!("line {line}: non-finite value '{t}'")))
            }
        })
        .collect()
}

fn parse_index(token: Option<&&str>, bound: usize, what: &str, line: usize) -> Result<usize> {
    let t = token.ok_or_else(|| Error::Format(format!("line {line}: missing {what} index")))?;
    let i: usize = t
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: bad {what} index '{t}'")))?;
    if i >= bound {
        return Err(Error::Format(format!("line {line}: {what} index {i} out of range (< {bound})")));
    }
    Ok(i)
}

/// Parses the format produced by [`write_control`].
pub fn parse_control(text: &str) -> Result<ControlLaw> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => return Err(Error::Format(format!("missing header '{HEADER}'"))),
    }
    let mut keys: BTreeMap<String, String> = BTreeMap::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim_start().starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            if keys.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("line {line_no}: duplicate key '{}'", k.trim())));
            }
        } else {
            data.push((line_no, line.split_whitespace().collect::<Vec<_>>()));
        }
    }
    let get = |k: &str| keys.get(k).ok_or_else(|| Error::Format(format!("missing key '{k}'")));
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("key '{k}' is not a non-negative integer")))
    };
    let horizon: f64 = get("horizon")?
        .parse()
        .map_err(|_| Error::Format("key 'horizon' is not a number".into()))?;
    let steps = int("steps")?;
    let grid = TimeGrid::new(horizon, steps).map_err(|e| Error::Format(e.to_string()))?;
    let nx = int("state_dim")?;
    let nu = int("control_dim")?;
    if nu == 0 {
        return Err(Error::Format("control_dim must be positive".into()));
    }
    let admissible = match get("admissible")?.as_str() {
        "unconstrained" => AdmissibleSet::Unconstrained,
        "box" => {
            let bound = |k: &str| -> Result<DVector<f64>> {
                let tokens: Vec<&str> = get(k)?.split_whitespace().collect();
                Ok(DVector::from_vec(parse_floats(&tokens, nu, 0)?))
            };
            AdmissibleSet::boxed(bound("lower")?, bound("upper")?).map_err(|e| Error::Format(e.to_string()))?
        }
        other => return Err(Error::Format(format!("unknown admissible set '{other}'"))),
    };

    let law = match get("variant")?.as_str() {
        "open_loop" => {
            let mut values: Vec<Option<DVector<f64>>> = vec![None; steps];
            for (line, tokens) in &data {
                if tokens[0] != "value" {
                    return Err(Error::Format(format!("line {line}: unexpected record '{}'", tokens[0])));
                }
                let k = parse_index(tokens.get(1), steps, "step", *line)?;
                let v = parse_floats(&tokens[2.min(tokens.len())..], nu, *line)?;
                if values[k].replace(DVector::from_vec(v)).is_some() {
                    return Err(Error::Format(format!("line {line}: duplicate value for step {k}")));
                }
            }
            let values = collect_all(values, "value")?;
            ControlLaw::open_loop(grid, nx, values)?
        }
        "linear_feedback" => {
            let mut gains: Vec<Option<DMatrix<f64>>> = vec![None; steps];
            let mut offsets: Vec<Option<DVector<f64>>> = vec![None; steps];
            for (line, tokens) in &data {
                let k = parse_index(tokens.get(1), steps, "step", *line)?;
                let rest = &tokens[2.min(tokens.len())..];
                let dup = match tokens[0] {
                    "gain" => gains[k]
                        .replace(DMatrix::from_row_slice(nu, nx, &parse_floats(rest, nu * nx, *line)?))
                        .is_some(),
                    "offset" => offsets[k]
                        .replace(DVector::from_vec(parse_floats(rest, nu, *line)?))
                        .is_some(),
                    other => return Err(Error::Format(format!("line {line}: unexpected record '{other}'"))),
                };
                if dup {
                    return Err(Error::Format(format!("line {line}: duplicate {} for step {k}", tokens[0])));
                }
            }
            ControlLaw::linear_feedback(grid, collect_all(gains, "gain")?, collect_all(offsets, "offset")?)?
        }
        "tabulated" => {
            let paths = int("paths")?;
            let mut table = PathTensor::zeros(paths, steps, nu);
            let mut seen = vec![false; paths * steps];
            for (line, tokens) in &data {
                if tokens[0] != "row" {
                    return Err(Error::Format(format!("line {line}: unexpected record '{}'", tokens[0])));
                }
                let p = parse_index(tokens.get(1), paths, "path", *line)?;
                let k = parse_index(tokens.get(2), steps, "step", *line)?;
                let v = parse_floats(&tokens[3.min(tokens.len())..], nu, *line)?;
                if std::mem::replace(&mut seen[p * steps + k], true) {
                    return Err(Error::Format(format!("line {line}: duplicate row ({p}, {k})")));
                }
                table.row_mut(p, k).copy_from_slice(&v);
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(Error::Format(format!("missing row ({}, {})", i / steps, i % steps)));
            }
            ControlLaw::from_table(grid, nx, table)
        }
        other => return Err(Error::Format(format!("unknown variant '{other}'"))),
    };
    law.with_admissible(admissible)
}

fn collect_all<T>(items: Vec<Option<T>>, what: &str) -> Result<Vec<T>> {
    items
        .into_iter()
        .enumerate()
        .map(|(k, v)| v.ok_or_else(|| Error::Format(format!("missing {what} for step {k}"))))
        .collect()
}

/// CSV with header `iteration,J,stderr,residual,step`.
pub fn write_trace_csv<W: Write>(trace: &OptimizationTrace, mut w: W) -> Result<()> {
    writeln!(w, "iteration,J,stderr,residual,step")?;
    for r in &trace.rows {
        writeln!(w, "{},{:e},{:e},{:e},{:e}", r.iteration, r.cost, r.stderr, r.residual, r.step)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(law: &ControlLaw) -> ControlLaw {
        let mut buf = Vec::new();
        write_control(law, &mut buf).unwrap();
        parse_control(std::str::from_utf8(&buf).unwrap()).unwrap()
    }

    #[test]
    fn feedback_with_box_roundtrips() {
        let grid = TimeGrid::new(0.5, 3).unwrap();
        let gains = (0..3).map(|k| DMatrix::from_fn(2, 3, |i, j| (i * 3 + j + k) as f64 * 0.1)).collect();
        let offsets = (0..3).map(|k| DVector::from_element(2, -(k as f64) / 3.0)).collect();
        let law = ControlLaw::linear_feedback(grid, gains, offsets)
            .unwrap()
            .with_admissible(AdmissibleSet::boxed(DVector::from_element(2, -1.0), DVector::from_element(2, 2.0)).unwrap())
            .unwrap();
        assert_eq!(roundtrip(&law), law);
    }

    #[test]
    fn tabulated_roundtrips() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let table = PathTensor::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, f64::MIN_POSITIVE]).unwrap();
        let law = ControlLaw::from_table(grid, 4, table);
        assert_eq!(roundtrip(&law), law);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(parse_control("variant = open_loop"), Err(Error::Format(_))));
        let missing = format!(
            "{HEADER}\nvariant = open_loop\nhorizon = 1\nsteps = 2\nstate_dim = 1\ncontrol_dim = 1\nadmissible = unconstrained\nvalue 0 1\n"
        );
        assert!(matches!(parse_control(&missing), Err(Error::Format(m)) if m.contains("step 1")));
        let bad = missing.replace("value 0 1", "value 0 x\nvalue 1 1");
        assert!(matches!(parse_control(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn trace_csv_has_header() {
        let mut trace = OptimizationTrace::new("test");
        trace.rows.push(super::super::TraceRow {
            iteration: 0,
            cost: 1.5,
            stderr: 0.1,
            residual: 0.2,
            step: 0.5,
        });
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("iteration,J,stderr,residual,step"));
        assert_eq!(text.lines().nth(1), Some("0,1.5e0,1e-1,2e-1,5e-1"));
    }

    proptest! {
        #[test]
        fn open_loop_roundtrip_is_exact(values in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 2), 1..8)) {
            let grid = TimeGrid::new(1.0, values.len()).unwrap();
            let law = ControlLaw::open_loop(grid, 3, values.into_iter().map(DVector::from_vec).collect()).unwrap();
            prop_assert_eq!(roundtrip(&law), law);
        }
    }
}
