//! CSV and JSON writers. Floats are written with 17 significant digits so
//! every value reads back to the same `f64`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::counterexample::OscillationReport;
use crate::error::Result;
use crate::lyapunov::ExponentRecord;
use crate::particle::{MomentSummary, Trajectories};
use crate::variational::{JacobianState, Part};

pub const TRAJECTORY_HEADER: &str = "t,replica,particle,comp,value";
pub const MOMENTS_HEADER: &str = "t,comp,mean,var";
pub const JACOBIAN_HEADER: &str = "t,replica,part,row,col,value";
pub const EXPONENT_HEADER: &str = "t,replica,mode,value";
pub const OSCILLATION_HEADER: &str = "n,T_n,replica,value,parity";

/// `{:.16e}` with `inf`, `-inf` and `nan` spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_trajectories<W: Write>(w: &mut W, replica: usize, tr: &Trajectories) -> Result<()> {
    for (c, t) in tr.times.iter().enumerate() {
        for p in 0..tr.n_particles {
            for (comp, v) in tr.particle(c, p).iter().enumerate() {
                writeln!(w, "{},{replica},{p},{comp},{}", fmt_f64(*t), fmt_f64(*v))?;
            }
        }
    }
    Ok(())
}

pub fn write_moments<W: Write>(w: &mut W, moments: &[MomentSummary]) -> Result<()> {
    writeln!(w, "{MOMENTS_HEADER}")?;
    for m in moments {
        let d = m.mean.len();
        for comp in 0..d {
            writeln!(
                w,
                "{},{comp},{},{}",
                fmt_f64(m.t),
                fmt_f64(m.mean[comp]),
                fmt_f64(m.cov[comp * d + comp])
            )?;
        }
    }
    Ok(())
}

/// Unscaled tagged Jacobians, one row per entry and part.
pub fn write_jacobians<W: Write>(w: &mut W, replica: usize, states: &[JacobianState]) -> Result<()> {
    for s in states {
        let f = (s.log2_scale as f64).exp2();
        let d = (s.full.len() as f64).sqrt().round() as usize;
        for part in Part::ALL {
            for (idx, v) in s.part(part).iter().enumerate() {
                writeln!(
                    w,
                    "{},{replica},{},{},{},{}",
                    fmt_f64(s.t),
                    part.as_str(),
                    idx / d,
                    idx % d,
                    fmt_f64(v * f)
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_exponents<W: Write>(w: &mut W, replica: usize, rec: &ExponentRecord) -> Result<()> {
    for (c, t) in rec.times.iter().enumerate() {
        for (mode, values) in rec.values.iter().enumerate() {
            writeln!(w, "{},{replica},{mode},{}", fmt_f64(*t), fmt_f64(values[c]))?;
        }
    }
    Ok(())
}

pub fn write_oscillation<W: Write>(w: &mut W, report: &OscillationReport) -> Result<()> {
    writeln!(w, "{OSCILLATION_HEADER}")?;
    for row in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.n,
            fmt_f64(row.t_n),
            row.replica,
            fmt_f64(row.value),
            row.parity.as_str()
        )?;
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 5e-324] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn moments_rows() {
        let m = MomentSummary {
            t: 1.0,
            mean: vec![1.0, 2.0],
            cov: vec![0.5, 0.1, 0.1, 0.25],
            second_moment: 0.0,
        };
        let mut out = Vec::new();
        write_moments(&mut out, &[m]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], MOMENTS_HEADER);
        assert_eq!(lines[2], "1.0000000000000000e0,1,2.0000000000000000e0,2.5000000000000000e-1");
    }
}
