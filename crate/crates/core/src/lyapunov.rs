//! Finite-time Lyapunov exponents with limsup-style tail statistics.
//!
//! The limsup of `(1/t) ln |J_t v|` is estimated by the maximum over the tail
//! window `t ≥ ρ·T_max` of the checkpoint values, the liminf by the minimum,
//! and their difference is reported as the oscillation index. Nothing is
//! averaged: an exponent that does not converge shows up as a wide window.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{theoretical_c, Model};
use crate::noise::{NoiseCursor, TimeGrid};
use crate::variational::{propagate_full_jacobian, JacobianOptions, JacobianRun, JacobianSample, Part, Reorth};

pub const DEFAULT_TAIL_FRACTION: f64 = 0.25;

/// Per-mode finite-time exponents at the checkpoints plus tail statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentRecord {
    pub times: Vec<f64>,
    /// `values[mode][checkpoint]`.
    pub values: Vec<Vec<f64>>,
    /// Checkpoints whose value is `-inf` (zero stretch).
    pub flagged: Vec<Vec<bool>>,
    pub tail_fraction: f64,
    pub tail_sup: Vec<f64>,
    pub tail_inf: Vec<f64>,
    pub oscillation_index: Vec<f64>,
}

fn check_tail_fraction(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("tail_fraction", format!("need 0 < rho <= 1, got {rho}")))
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Domain("no checkpoints".into()));
    }
    if times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Domain("checkpoint times must be > 0".into()));
    }
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("checkpoint times must be strictly increasing".into()));
    }
    Ok(())
}

impl ExponentRecord {
    pub fn from_values(times: Vec<f64>, values: Vec<Vec<f64>>, tail_fraction: f64) -> Result<Self> {
        check_times(&times)?;
        check_tail_fraction(tail_fraction)?;
        if values.iter().any(|v| v.len() != times.len()) {
            return Err(Error::Domain("one value per checkpoint and mode required".into()));
        }
        let t_cut = tail_fraction * times[times.len() - 1];
        let first = times.partition_point(|&t| t < t_cut);
        let flagged = values
            .iter()
            .map(|v| v.iter().map(|x| *x == f64::NEG_INFINITY).collect())
            .collect();
        let tail_sup: Vec<f64> = values
            .iter()
            .map(|v| v[first..].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let tail_inf: Vec<f64> = values
            .iter()
            .map(|v| v[first..].iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let oscillation_index = tail_sup
            .iter()
            .zip(&tail_inf)
            .map(|(s, i)| if s == i { 0.0 } else { s - i })
            .collect();
        Ok(Self {
            times,
            values,
            flagged,
            tail_fraction,
            tail_sup,
            tail_inf,
            oscillation_index,
        })
    }

    pub fn modes(&self) -> usize {
        self.values.len()
    }

    pub fn with_tail_fraction(&self, rho: f64) -> Result<Self> {
        Self::from_values(self.times.clone(), self.values.clone(), rho)
    }

    /// `(tail_sup + tail_inf) / 2`.
    pub fn tail_midpoint(&self, mode: usize) -> f64 {
        0.5 * (self.tail_sup[mode] + self.tail_inf[mode])
    }

    /// Values over the checkpoints selected by `keep(t)`.
    pub fn values_where(&self, mode: usize, keep: impl Fn(f64) -> bool) -> Vec<f64> {
        self.times
            .iter()
            .zip(&self.values[mode])
            .filter(|(t, _)| keep(**t))
            .map(|(_, v)| *v)
            .collect()
    }
}

/// `(1/t) ln |J_t v|` per direction `v` (normalised before use).
pub fn finite_time_exponents(
    series: &[JacobianSample],
    directions: &[Vec<f64>],
    tail_fraction: f64,
) -> Result<ExponentRecord> {
    let d = series.first().map(|s| s.dim()).ok_or_else(|| Error::Domain("empty series".into()))?;
    let mut units = Vec::with_capacity(directions.len());
    for v in directions {
        let n = linalg::norm2(v);
        if v.len() != d || !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain(format!("direction must be a non-zero {d}-vector")));
        }
        units.push(if n == 1.0 { v.clone() } else { v.iter().map(|x| x / n).collect() });
    }
    let times: Vec<f64> = series.iter().map(|s| s.t).collect();
    check_times(&times)?;
    let values = units
        .iter()
        .map(|v| series.iter().map(|s| s.log_norm_applied(v) / s.t).collect())
        .collect();
    ExponentRecord::from_values(times, values, tail_fraction)
}

/// Per-mode exponents of the tagged full Jacobian of a run. For d = 1 this
/// is [`finite_time_exponents`] with `v = 1`; for d > 1 it reads the run's
/// QR accumulators.
pub fn spectrum_from_run(run: &JacobianRun, tail_fraction: f64) -> Result<ExponentRecord> {
    if run.dim() == 1 {
        return finite_time_exponents(&run.series(Part::Full), &[vec![1.0]], tail_fraction);
    }
    if run.qr.is_empty() {
        return Err(Error::config(
            "reorth_every",
            "run was propagated without re-orthonormalisation",
        ));
    }
    let times: Vec<f64> = run.qr.iter().map(|c| c.t).collect();
    let values = (0..run.dim())
        .map(|i| run.qr.iter().map(|c| c.log_stretch[i] / c.t).collect())
        .collect();
    ExponentRecord::from_values(times, values, tail_fraction)
}

/// Benettin QR spectrum of the full Jacobian started at `δ_x`.
pub fn qr_spectrum(
    model: &dyn Model,
    init: &[f64],
    grid: &TimeGrid,
    noise: Vec<NoiseCursor<'_>>,
    reorth: Reorth,
    tail_fraction: f64,
) -> Result<ExponentRecord> {
    let opts = JacobianOptions {
        reorth: Some(reorth),
        ..Default::default()
    };
    let run = propagate_full_jacobian(model, init, grid, noise, &opts)?;
    spectrum_from_run(&run, tail_fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: usize,
    pub tail_sup: f64,
    pub tail_inf: f64,
    pub oscillation_index: f64,
    pub kappa_ceiling: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaReport {
    pub k: f64,
    pub kappa_ceiling: f64,
    pub modes: Vec<ModeSummary>,
    pub pass: bool,
}

/// Checks `tail_sup ≤ C(2, K)` for every mode and reports the margins.
pub fn check_kappa_bound(record: &ExponentRecord, k: f64) -> Result<KappaReport> {
    let ceiling = theoretical_c(2.0, k)?;
    if record.tail_sup.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Domain("exponent record is not finite".into()));
    }
    let modes: Vec<ModeSummary> = (0..record.modes())
        .map(|i| {
            let sup = record.tail_sup[i];
            ModeSummary {
                mode: i,
                tail_sup: sup,
                tail_inf: record.tail_inf[i],
                oscillation_index: record.oscillation_index[i],
                kappa_ceiling: ceiling,
                margin: ceiling - sup,
                pass: sup <= ceiling,
            }
        })
        .collect();
    Ok(KappaReport {
        k,
        kappa_ceiling: ceiling,
        pass: modes.iter().all(|m| m.pass),
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expo(lambda: f64, times: &[f64], d: usize) -> Vec<JacobianSample> {
        times
            .iter()
            .map(|&t| {
                let mut m = linalg::identity(d);
                m.iter_mut().for_each(|v| *v *= (lambda * t).exp());
                JacobianSample {
                    t,
                    log2_scale: 0,
                    matrix: m,
                }
            })
            .collect()
    }

    #[test]
    fn exact_exponential() {
        let times = [1.0, 2.0, 4.0, 8.0];
        let rec = finite_time_exponents(&expo(0.3, &times, 2), &[vec![1.0, 0.0], vec![0.6, 0.8]], 0.25).unwrap();
        for mode in &rec.values {
            for v in mode {
                assert!((v - 0.3).abs() < 1e-15);
            }
        }
        assert!(rec.oscillation_index.iter().all(|&o| o < 1e-15));
    }

    #[test]
    fn single_checkpoint() {
        let rec = finite_time_exponents(&expo(-0.2, &[3.0], 1), &[vec![1.0]], 1.0).unwrap();
        assert_eq!(rec.tail_sup, rec.tail_inf);
        assert_eq!(rec.oscillation_index, vec![0.0]);
    }

    #[test]
    fn zero_stretch_is_flagged() {
        let s = vec![JacobianSample {
            t: 1.0,
            log2_scale: 0,
            matrix: vec![0.0],
        }];
        let rec = finite_time_exponents(&s, &[vec![1.0]], 1.0).unwrap();
        assert_eq!(rec.values[0][0], f64::NEG_INFINITY);
        assert!(rec.flagged[0][0]);
    }

    #[test]
    fn tail_window() {
        let rec = ExponentRecord::from_values(vec![1.0, 2.0, 4.0, 8.0], vec![vec![5.0, 1.0, 0.5, 0.7]], 0.25).unwrap();
        assert_eq!(rec.tail_sup, vec![1.0]);
        assert_eq!(rec.tail_inf, vec![0.5]);
        let wide = rec.with_tail_fraction(0.1).unwrap();
        assert_eq!(wide.tail_sup, vec![5.0]);
        assert!(ExponentRecord::from_values(vec![1.0, 1.0], vec![vec![0.0, 0.0]], 0.5).is_err());
        assert!(ExponentRecord::from_values(vec![0.0], vec![vec![0.0]], 0.5).is_err());
        assert!(ExponentRecord::from_values(vec![1.0], vec![vec![0.0]], 0.0).is_err());
    }

    #[test]
    fn kappa_ceilings() {
        let rec = ExponentRecord::from_values(vec![1.0], vec![vec![0.02]], 1.0).unwrap();
        let rep = check_kappa_bound(&rec, 0.4).unwrap();
        assert!((rep.kappa_ceiling - 9.6).abs() < 1e-12);
        assert!(rep.pass);
        let zero = ExponentRecord::from_values(vec![1.0], vec![vec![0.0]], 1.0).unwrap();
        let rep = check_kappa_bound(&zero, 0.0).unwrap();
        assert_eq!(rep.kappa_ceiling, 0.0);
        assert!(rep.pass);
        let big = ExponentRecord::from_values(vec![1.0], vec![vec![50.0]], 1.0).unwrap();
        assert!(!check_kappa_bound(&big, 1.0).unwrap().pass);
    }
}
