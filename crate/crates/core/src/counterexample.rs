//! The staircase counterexample: a scalar McKean-Vlasov SDE whose
//! finite-time Lyapunov exponent oscillates forever.
//!
//! The drift is `x − g(E X)` with `g` piecewise linear. `g` has slope 1/4 on
//! `[a_{2k}, a_{2k+1})` and slope 0 on `[a_{2k+1}, a_{2k+2})`, where the
//! levels `a_n` are chosen so that the mean ODE `Ẏ = Y − g(Y)`, `Y_0 = 1`,
//! reaches `a_n` exactly at `S_n = 2^n`. The slope seen along the mean,
//! `f(t) = g'(Y_t)`, is therefore 1/4 on `[4^k, 2·4^k)` and 0 elsewhere.
//!
//! `g` is used unsmoothed. Mollifying it over widths `e^{-S_n²}` is below
//! double precision from `n = 3` on, so the transition times coincide with
//! `S_n` and every smoothing offset is zero.
//!
//! Exponentially large quantities (`a_n`, the Jacobian) are carried as
//! logarithms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{BrownianStream, IncrementSource, NoiseCursor, TimeGrid};
use crate::particle::{DistributionFlow, MomentSummary};

/// Largest supported breakpoint index; `S_n = 2^n` stays exact well past it.
pub const MAX_BREAKPOINT_INDEX: usize = 60;

/// `|I − 1|` threshold below which a checkpoint is flagged indeterminate.
const INDETERMINATE_LOG_TOL: f64 = 1e-9;

fn slope_of_piece(p: usize) -> f64 {
    if p % 2 == 1 {
        0.25
    } else {
        0.0
    }
}

/// `floor(log2(t))` for finite `t ≥ 1`, exact.
fn floor_log2(t: f64) -> i64 {
    debug_assert!(t >= 1.0 && t.is_finite());
    ((t.to_bits() >> 52) & 0x7ff) as i64 - 1023
}

/// `ln(e^z − 1)` for `z > 0` without overflow.
fn ln_expm1(z: f64) -> f64 {
    if z > 30.0 {
        z + (-(-z).exp()).ln_1p()
    } else {
        z.exp_m1().ln()
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln ∫_0^len exp(p + (q − p)s/len) ds`.
fn ln_integral_exp_linear(p: f64, q: f64, len: f64) -> f64 {
    let hi = p.max(q);
    let delta = (q - p).abs();
    let shape = if delta < 1e-12 {
        -0.5 * delta
    } else {
        (-(-delta).exp_m1() / delta).ln()
    };
    hi + len.ln() + shape
}

/// Levels, breakpoints and slope profile of the mean ODE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanFlow {
    n_max: usize,
    /// `S_n = 2^n`, `n = 0..=n_max`.
    breakpoints: Vec<f64>,
    /// `a_n = Y_{S_n}`; `+inf` once not representable.
    levels: Vec<f64>,
    log_levels: Vec<f64>,
    /// `g(a_n)`.
    g_levels: Vec<f64>,
    /// `ln Ẏ(S_n) = ln(a_n − g(a_n))`.
    log_rates: Vec<f64>,
    /// Initial value of the mean ODE.
    start: f64,
    /// Canonical time at which the canonical flow passes through `start`.
    shift: f64,
}

pub fn build_mean_flow(n_max: usize) -> Result<MeanFlow> {
    if !(1..=MAX_BREAKPOINT_INDEX).contains(&n_max) {
        return Err(Error::Domain(format!(
            "n_max must lie in 1..={MAX_BREAKPOINT_INDEX}, got {n_max}"
        )));
    }
    let mut flow = MeanFlow {
        n_max,
        breakpoints: Vec::with_capacity(n_max + 1),
        levels: Vec::with_capacity(n_max + 1),
        log_levels: Vec::with_capacity(n_max + 1),
        g_levels: Vec::with_capacity(n_max + 1),
        log_rates: Vec::with_capacity(n_max + 1),
        start: 1.0,
        shift: 0.0,
    };
    // state at the start of piece p: value, log value, g(value), ln Ẏ, time
    let (mut a, mut log_a, mut g_a, mut log_h, mut t) = (1.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for p in 0..=n_max {
        let s_p = (p as f64).exp2();
        let slope = slope_of_piece(p);
        let rate = 1.0 - slope;
        let len = s_p - t;
        // Y(τ) = a + (h/α)(e^{α τ} − 1) on the piece, h = Ẏ at its start
        let log_rise = log_h - rate.ln() + ln_expm1(rate * len);
        let next_a = a + log_h.exp() / rate * (rate * len).exp_m1();
        let next_log_a = log_add_exp(log_a, log_rise);
        g_a += slope * (next_a - a);
        log_h += rate * len;
        a = next_a;
        log_a = next_log_a;
        t = s_p;
        flow.breakpoints.push(s_p);
        flow.levels.push(a);
        flow.log_levels.push(log_a);
        flow.g_levels.push(g_a);
        flow.log_rates.push(log_h);
    }
    Ok(flow)
}

/// Mean flow started from `x > 1/2`: the canonical flow shifted in time so
/// that it passes through `x` at `t = 0`.
pub fn shifted_mean_flow(x: f64, n_max: usize) -> Result<MeanFlow> {
    if !(x > 0.5) || !x.is_finite() {
        return Err(Error::Domain(format!("start value must be finite and > 1/2, got {x}")));
    }
    let mut flow = build_mean_flow(n_max)?;
    let p = flow.piece_of_level(x);
    if p > n_max {
        return Err(Error::Domain(format!("x = {x} lies beyond level a_{n_max}")));
    }
    let (base_a, base_log_h, base_t) = flow.piece_start(p);
    let rate = 1.0 - slope_of_piece(p);
    flow.shift = base_t + (rate * (x - base_a) / base_log_h.exp()).ln_1p() / rate;
    flow.start = x;
    Ok(flow)
}

impl MeanFlow {
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn log_levels(&self) -> &[f64] {
        &self.log_levels
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    /// Time offset relative to the canonical flow started at 1.
    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Mollifier widths `ε_n = e^{-S_n²}` of the smooth construction; the
    /// unsmoothed `g` used here corresponds to all of them being zero.
    pub fn mollifier_widths(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|s| (-s * s).exp()).collect()
    }

    /// Transition times `T_n = S_n + c_n`; `c_n = 0` without smoothing.
    pub fn transition_times(&self) -> Vec<f64> {
        self.breakpoints.clone()
    }

    /// Index of the largest representable level.
    pub fn finite_levels(&self) -> usize {
        self.levels.iter().take_while(|a| a.is_finite()).count()
    }

    /// Times `Γ_n` at which this flow crosses the levels `a_n > start`.
    pub fn crossing_times(&self) -> Vec<(usize, f64)> {
        (0..=self.n_max)
            .filter(|&n| self.levels[n] > self.start)
            .map(|n| (n, self.breakpoints[n] - self.shift))
            .collect()
    }

    /// Whether `[0, t]` stays within the computed breakpoints.
    pub fn covers(&self, t: f64) -> bool {
        t + self.shift <= self.breakpoints[self.n_max]
    }

    /// Level/time data at the start of piece `p`: (value, ln Ẏ, time).
    fn piece_start(&self, p: usize) -> (f64, f64, f64) {
        if p == 0 {
            (1.0, 0.0, 0.0)
        } else {
            (self.levels[p - 1], self.log_rates[p - 1], self.breakpoints[p - 1])
        }
    }

    /// Piece of the level axis containing `x ≥ 1/2`: 0 for `[1/2, a_0)`,
    /// `p` for `[a_{p−1}, a_p)`.
    fn piece_of_level(&self, x: f64) -> usize {
        self.levels.partition_point(|&a| a <= x)
    }

    /// Staircase function `g`.
    pub fn g(&self, x: f64) -> f64 {
        if x < 0.5 {
            return x - 0.5;
        }
        let p = self.piece_of_level(x);
        if p == 0 {
            0.0
        } else {
            self.g_levels[p - 1] + slope_of_piece(p) * (x - self.levels[p - 1])
        }
    }

    pub fn g_prime(&self, x: f64) -> f64 {
        if x < 0.5 {
            1.0
        } else {
            slope_of_piece(self.piece_of_level(x))
        }
    }

    /// Slope profile on the canonical clock.
    fn canonical_slope(tau: f64) -> f64 {
        if tau < 1.0 {
            0.0
        } else if floor_log2(tau) % 2 == 0 {
            0.25
        } else {
            0.0
        }
    }

    /// Measure of `{u ∈ [0, τ] : f(u) = 1/4}` on the canonical clock.
    fn canonical_slope_time(tau: f64) -> f64 {
        if tau < 1.0 {
            return 0.0;
        }
        let n = floor_log2(tau);
        let complete = ((n + 1) / 2) as i32;
        let full = (4f64.powi(complete) - 1.0) / 3.0;
        if n % 2 == 0 {
            full + (tau - (n as f64).exp2())
        } else {
            full
        }
    }

    /// `f(t) = g'(Ȳ_t) ∈ {0, 1/4}`.
    pub fn slope(&self, t: f64) -> f64 {
        Self::canonical_slope(t + self.shift)
    }

    /// Time spent on slope pieces during `[0, t]`.
    pub fn slope_time(&self, t: f64) -> f64 {
        Self::canonical_slope_time(t + self.shift) - Self::canonical_slope_time(self.shift)
    }

    /// `∫_0^t (1 − f(u)) du`.
    pub fn integrated_growth(&self, t: f64) -> f64 {
        t - 0.25 * self.slope_time(t)
    }

    /// `E[∂ₓΦ_{0,t}] = exp(∫_0^t (1 − f))`.
    pub fn mean_jacobian(&self, t: f64) -> f64 {
        self.integrated_growth(t).exp()
    }

    /// Canonical piece containing clock time `τ` (piece `p` spans
    /// `[S_{p−1}, S_p)`, piece 0 spans `(−∞, 1)`).
    fn piece_of_time(tau: f64) -> usize {
        if tau < 1.0 {
            0
        } else {
            floor_log2(tau) as usize + 1
        }
    }

    /// `Ȳ_t`, the solution of the mean ODE.
    pub fn mean(&self, t: f64) -> f64 {
        let tau = t + self.shift;
        let p = Self::piece_of_time(tau).min(self.n_max + 1);
        let (a, log_h, t0) = self.piece_start(p);
        let rate = 1.0 - slope_of_piece(p);
        a + log_h.exp() / rate * (rate * (tau - t0)).exp_m1()
    }

    /// The mean ODE as a replayable flow: `δ_{Ȳ_t}` at every grid index.
    /// The staircase drift reads only the mean, so this is the exact law as
    /// far as the model can tell.
    pub fn distribution_flow(&self, grid: &TimeGrid) -> Result<DistributionFlow> {
        let snapshots = (0..=grid.n_steps)
            .map(|m| {
                let y = self.mean(grid.time(m));
                if !y.is_finite() {
                    return Err(Error::Overflow { time: grid.time(m) });
                }
                Ok((
                    m,
                    MomentSummary {
                        t: grid.time(m),
                        mean: vec![y],
                        cov: vec![0.0],
                        second_moment: y * y,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        DistributionFlow::from_moments(grid.clone(), snapshots)
    }

    /// `ln Ȳ_t`, finite even where `Ȳ_t` overflows.
    pub fn log_mean(&self, t: f64) -> f64 {
        let tau = t + self.shift;
        let p = Self::piece_of_time(tau).min(self.n_max + 1);
        let (_, log_h, t0) = self.piece_start(p);
        let log_a = if p == 0 { 0.0 } else { self.log_levels[p - 1] };
        let rate = 1.0 - slope_of_piece(p);
        let z = rate * (tau - t0);
        if z > 0.0 {
            log_add_exp(log_a, log_h - rate.ln() + ln_expm1(z))
        } else if p > 0 {
            log_a
        } else {
            self.mean(t).ln()
        }
    }
}

/// One checkpoint of the closed-form Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplicitCheckpoint {
    pub t: f64,
    /// `(1/t) ln|∂ₓΦ_{0,t}|`.
    pub value: f64,
    pub log_abs_jacobian: f64,
    /// Sign of `∂ₓΦ_{0,t}`.
    pub sign: f64,
    /// `W_t`.
    pub brownian: f64,
    /// `|I(t) − 1|` too close to zero for a meaningful logarithm.
    pub indeterminate: bool,
}

/// `(1/t) ln|∂ₓΦ_{0,t}(x)|` at the grid checkpoints from the closed form
/// `e^{t/2 + W_t}(1 − I(t))`, `I(t) = ∫_0^t f(r) e^{∫_0^r (1/2 − f) − W_r} dr`.
///
/// `I` is accumulated in log space, integrating the exponential of the
/// piecewise-linear interpolant of the exponent exactly on every grid
/// step, split at the jumps of `f`.
pub fn explicit_jacobian_log(
    flow: &MeanFlow,
    noise: &mut dyn IncrementSource,
    grid: &TimeGrid,
) -> Result<Vec<ExplicitCheckpoint>> {
    if noise.noise_dim() != 1 {
        return Err(Error::config("noise", "the closed form needs a scalar Brownian motion"));
    }
    if grid.t0 != 0.0 {
        return Err(Error::config("grid", "the closed form starts at t = 0"));
    }
    let Some(&last) = grid.checkpoints.last() else {
        return Ok(Vec::new());
    };
    if !flow.covers(grid.time(last)) {
        return Err(Error::Domain(format!(
            "mean flow covers t <= {}, requested {}",
            flow.breakpoints[flow.n_max] - flow.shift,
            grid.time(last)
        )));
    }
    if grid.checkpoints.first() == Some(&0) {
        return Err(Error::Domain("finite-time exponents need t > 0".into()));
    }

    let exponent = |r: f64, w: f64| 0.5 * r - 0.25 * flow.slope_time(r) - w;
    let mut out = Vec::with_capacity(grid.checkpoints.len());
    let mut next_cp = 0;
    let mut log_i = f64::NEG_INFINITY;
    let mut w = 0.0;
    let mut dw = [0.0];
    for m in 0..last {
        let r0 = grid.time(m);
        let r1 = grid.time(m + 1);
        noise.next_increment(&mut dw);
        let w1 = w + dw[0];
        let mut u0 = r0;
        while u0 < r1 {
            let tau = u0 + flow.shift;
            let next_break = if tau < 1.0 {
                1.0
            } else {
                ((floor_log2(tau) + 1) as f64).exp2()
            };
            let u1 = (next_break - flow.shift).min(r1);
            let f = flow.slope(0.5 * (u0 + u1));
            if f > 0.0 && u1 > u0 {
                let wa = w + (u0 - r0) / (r1 - r0) * dw[0];
                let wb = w + (u1 - r0) / (r1 - r0) * dw[0];
                let piece = f.ln() + ln_integral_exp_linear(exponent(u0, wa), exponent(u1, wb), u1 - u0);
                log_i = log_add_exp(log_i, piece);
            }
            u0 = u1;
        }
        w = w1;
        if grid.checkpoints[next_cp] == m + 1 {
            let t = r1;
            let (log_gap, sign) = if log_i == f64::NEG_INFINITY {
                (0.0, 1.0)
            } else if log_i < 0.0 {
                ((-log_i.exp_m1()).ln(), 1.0)
            } else {
                (log_i + (-(-log_i).exp_m1()).ln(), -1.0)
            };
            let log_abs = 0.5 * t + w + log_gap;
            out.push(ExplicitCheckpoint {
                t,
                value: log_abs / t,
                log_abs_jacobian: log_abs,
                sign,
                brownian: w,
                indeterminate: log_i.abs() < INDETERMINATE_LOG_TOL,
            });
            next_cp += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of(n: usize) -> Self {
        if n % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationRow {
    pub n: usize,
    pub t_n: f64,
    pub replica: usize,
    pub value: f64,
    pub parity: Parity,
    pub indeterminate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationOptions {
    pub dt: f64,
    pub zero_noise: bool,
    pub first_stream: u64,
}

impl Default for OscillationOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            zero_noise: false,
            first_stream: 0,
        }
    }
}

/// Separation threshold for `|W_t|/t`: the even/odd bounds `1/2 + ε/2 + 1/6`
/// and `1/2 + 1/3 − ε` separate iff `ε < 1/9`.
pub const ADMISSIBLE_EPS: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationReport {
    pub even_mean: f64,
    pub odd_mean: f64,
    pub gap: f64,
    pub positive_gap_fraction: f64,
    /// Per replica, `max |W_T|/T` over the checkpoints used.
    pub max_abs_w_over_t: Vec<f64>,
    /// Fraction of replicas whose `max |W_T|/T` is below 1/9.
    pub admissible_eps_fraction: f64,
    pub n_range: (usize, usize),
    pub seed: u64,
    pub replicas: usize,
    pub dt: f64,
    pub zero_noise: bool,
    pub construction: String,
    pub rows: Vec<OscillationRow>,
}

pub fn oscillation_experiment(
    flow: &MeanFlow,
    n_lo: usize,
    n_hi: usize,
    replicas: usize,
    seed: u64,
    opts: &OscillationOptions,
) -> Result<OscillationReport> {
    if n_lo < 2 || n_lo >= n_hi {
        return Err(Error::Domain(format!("need 2 <= n_lo < n_hi, got [{n_lo}, {n_hi}]")));
    }
    if n_hi > flow.n_max {
        return Err(Error::Domain(format!("n_hi = {n_hi} exceeds the flow's n_max = {}", flow.n_max)));
    }
    if replicas == 0 {
        return Err(Error::config("replicas", "replicas must be >= 1"));
    }
    let times: Vec<f64> = (n_lo..=n_hi).map(|n| (n as f64).exp2()).collect();
    let grid = TimeGrid::with_horizon(opts.dt, times[times.len() - 1], &times)?;

    let per_replica: Vec<Vec<ExplicitCheckpoint>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut noise = if opts.zero_noise {
                NoiseCursor::Zero(1)
            } else {
                NoiseCursor::Live(BrownianStream::new(seed, opts.first_stream + r as u64, opts.dt, 1))
            };
            explicit_jacobian_log(flow, &mut noise, &grid)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(replicas * times.len());
    let (mut even_sum, mut even_count, mut odd_sum, mut odd_count) = (0.0, 0usize, 0.0, 0usize);
    let mut positive = 0usize;
    let mut max_abs_w_over_t = Vec::with_capacity(replicas);
    for (r, series) in per_replica.iter().enumerate() {
        let (mut e, mut ec, mut o, mut oc) = (0.0, 0usize, 0.0, 0usize);
        let mut worst = 0.0f64;
        for (cp, n) in series.iter().zip(n_lo..=n_hi) {
            let parity = Parity::of(n);
            match parity {
                Parity::Even => {
                    e += cp.value;
                    ec += 1;
                }
                Parity::Odd => {
                    o += cp.value;
                    oc += 1;
                }
            }
            worst = worst.max(cp.brownian.abs() / cp.t);
            rows.push(OscillationRow {
                n,
                t_n: cp.t,
                replica: r,
                value: cp.value,
                parity,
                indeterminate: cp.indeterminate,
            });
        }
        if o / oc as f64 - e / ec as f64 > 0.0 {
            positive += 1;
        }
        even_sum += e;
        even_count += ec;
        odd_sum += o;
        odd_count += oc;
        max_abs_w_over_t.push(worst);
    }
    let even_mean = even_sum / even_count as f64;
    let odd_mean = odd_sum / odd_count as f64;
    let admissible = max_abs_w_over_t.iter().filter(|&&v| v < ADMISSIBLE_EPS).count();
    Ok(OscillationReport {
        even_mean,
        odd_mean,
        gap: odd_mean - even_mean,
        positive_gap_fraction: positive as f64 / replicas as f64,
        admissible_eps_fraction: admissible as f64 / replicas as f64,
        max_abs_w_over_t,
        n_range: (n_lo, n_hi),
        seed,
        replicas,
        dt: opts.dt,
        zero_noise: opts.zero_noise,
        construction: "unsmoothed staircase g (T_n = S_n, mollifier offsets zero)".into(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample_path, zero_path};

    #[test]
    fn first_levels_closed_form() {
        let flow = build_mean_flow(6).unwrap();
        let e = std::f64::consts::E;
        assert!((flow.levels()[0] - e).abs() < 1e-15);
        let a1 = e * (4.0 / 3.0 * 0.75f64.exp() - 1.0 / 3.0);
        assert!((flow.levels()[1] - a1).abs() < 1e-13 * a1);
        assert!((a1 - 6.7667).abs() < 1e-4);
        assert!(flow.levels().windows(2).all(|w| w[0] < w[1]));
        assert!(flow.levels()[0] > 1.0);
    }

    #[test]
    fn slope_profile() {
        let flow = build_mean_flow(6).unwrap();
        assert_eq!(flow.slope(0.5), 0.0);
        assert_eq!(flow.slope(1.5), 0.25);
        assert_eq!(flow.slope(3.0), 0.0);
        assert_eq!(flow.slope(4.0), 0.25);
        assert_eq!(flow.slope(8.0), 0.0);
        for n in 1..=12 {
            let t = 4f64.powi(n);
            assert_eq!(flow.slope_time(t), (4f64.powi(n) - 1.0) / 3.0);
        }
        assert_eq!(flow.slope_time(1.5), 0.5);
        assert_eq!(flow.slope_time(0.5), 0.0);
    }

    #[test]
    fn mean_is_continuous_and_increasing() {
        let flow = build_mean_flow(9).unwrap();
        for n in 0..9 {
            let s = flow.breakpoints()[n];
            let left = flow.mean(s * (1.0 - 1e-15));
            let at = flow.mean(s);
            assert!((at - flow.levels()[n]).abs() <= 1e-12 * at, "n = {n}");
            assert!((left - at).abs() <= 1e-12 * at, "n = {n}");
        }
        let mut prev = 0.0;
        for i in 0..5000 {
            let y = flow.mean(i as f64 * 0.1);
            assert!(y > prev);
            prev = y;
        }
        assert!((flow.mean(1.0) - std::f64::consts::E).abs() < 1e-14);
    }

    #[test]
    fn log_levels_beyond_overflow() {
        let flow = build_mean_flow(12).unwrap();
        assert!(flow.finite_levels() < 13);
        assert!(flow.levels()[12].is_infinite());
        let l = flow.log_levels();
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(l.windows(2).all(|w| w[0] < w[1]));
        for n in 0..flow.finite_levels() {
            assert!((l[n] - flow.levels()[n].ln()).abs() < 1e-12 * l[n].max(1.0));
        }
        // ln Ȳ grows like ∫(1 − f) for large t
        let t = 4096.0;
        let approx = flow.integrated_growth(t);
        assert!((flow.log_mean(t) - approx).abs() < 5.0);
    }

    #[test]
    fn staircase_g() {
        let flow = build_mean_flow(6).unwrap();
        let a = flow.levels();
        assert_eq!(flow.g(0.0), -0.5);
        assert_eq!(flow.g_prime(0.0), 1.0);
        assert_eq!(flow.g(1.5), 0.0);
        assert_eq!(flow.g_prime(1.5), 0.0);
        assert_eq!(flow.g_prime(4.0), 0.25);
        assert!((flow.g(4.0) - (4.0 - a[0]) / 4.0).abs() < 1e-15);
        let mid = 0.5 * (a[1] + a[2]);
        assert_eq!(flow.g_prime(mid), 0.0);
        assert!((flow.g(mid) - (a[1] - a[0]) / 4.0).abs() < 1e-14);
        // continuity at every finite level
        for &level in a.iter() {
            let left = flow.g(level * (1.0 - 1e-15));
            assert!((flow.g(level) - left).abs() < 1e-12 * level);
        }
        for i in 0..1000 {
            let x = 0.5 + i as f64 * 0.37;
            let s = flow.g_prime(x);
            assert!((0.0..=0.25).contains(&s));
        }
    }

    #[test]
    fn shifted_flows() {
        let canonical = shifted_mean_flow(1.0, 8).unwrap();
        assert_eq!(canonical.shift(), 0.0);
        for (n, gamma) in canonical.crossing_times() {
            assert_eq!(gamma, (n as f64).exp2());
        }
        let e = std::f64::consts::E;
        let at_a0 = shifted_mean_flow(e, 8).unwrap();
        assert_eq!(at_a0.slope(0.0), 0.25);
        let two = shifted_mean_flow(2.0, 8).unwrap();
        let (n0, gamma0) = two.crossing_times()[0];
        assert_eq!(n0, 0);
        assert!((gamma0 - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((gamma0 - 0.3069).abs() < 1e-4);
        assert!((two.mean(0.0) - 2.0).abs() < 1e-14);
        assert!(shifted_mean_flow(0.5, 8).is_err());
        assert!(shifted_mean_flow(-1.0, 8).is_err());
    }

    #[test]
    fn n_max_bounds() {
        assert!(build_mean_flow(0).is_err());
        assert!(build_mean_flow(MAX_BREAKPOINT_INDEX + 1).is_err());
    }

    fn oracle_slope(u: f64) -> f64 {
        let mut k = 1.0;
        while k <= u {
            if u < 2.0 * k {
                return 0.25;
            }
            k *= 4.0;
        }
        0.0
    }

    fn oracle_slope_time(u: f64) -> f64 {
        let mut k = 1.0;
        let mut total = 0.0;
        while k <= u {
            total += (u.min(2.0 * k) - k).max(0.0);
            k *= 4.0;
        }
        total
    }

    /// Direct (non-log) evaluation of the same quadrature rule.
    fn direct_log_jacobian(w: &[f64], dt: f64, steps: usize) -> f64 {
        let mut integral = 0.0;
        for m in 0..steps {
            let r0 = m as f64 * dt;
            let r1 = (m + 1) as f64 * dt;
            let mut cuts = vec![r0];
            for n in 0..10 {
                let s = (n as f64).exp2();
                if s > r0 && s < r1 {
                    cuts.push(s);
                }
            }
            cuts.push(r1);
            for pair in cuts.windows(2) {
                let (u0, u1) = (pair[0], pair[1]);
                let f = oracle_slope(0.5 * (u0 + u1));
                if f == 0.0 {
                    continue;
                }
                let lerp = |u: f64| w[m] + (u - r0) / dt * (w[m + 1] - w[m]);
                let phi = |u: f64| 0.5 * u - 0.25 * oracle_slope_time(u) - lerp(u);
                let (p, q) = (phi(u0), phi(u1));
                let piece = if (q - p).abs() < 1e-14 {
                    (u1 - u0) * p.exp()
                } else {
                    (u1 - u0) * (q.exp() - p.exp()) / (q - p)
                };
                integral += f * piece;
            }
        }
        let t = steps as f64 * dt;
        ((0.5 * t + w[steps]).exp() * (1.0 - integral)).abs().ln()
    }

    #[test]
    fn log_domain_agrees_with_direct_quadrature() {
        let flow = build_mean_flow(6).unwrap();
        let dt = 1e-3;
        let times = [0.5, 1.0, 1.5, 2.5, 4.0, 6.0, 10.0];
        let grid = TimeGrid::with_horizon(dt, 10.0, &times).unwrap();
        for seed in 0..4 {
            let path = sample_path(seed, 0, &grid, 1);
            let w = path.values();
            let series = explicit_jacobian_log(&flow, &mut path.cursor(0), &grid).unwrap();
            for cp in &series {
                if cp.indeterminate {
                    continue;
                }
                let steps = grid.index_of(cp.t).unwrap();
                let direct = direct_log_jacobian(&w, dt, steps);
                let rel = (direct - cp.log_abs_jacobian).abs() / direct.abs().max(1e-300);
                assert!(
                    (direct - cp.log_abs_jacobian).abs() <= 1e-9 * direct.abs().max(1.0) || rel <= 1e-9,
                    "seed {seed} t {}: {direct} vs {}",
                    cp.t,
                    cp.log_abs_jacobian
                );
            }
        }
    }

    #[test]
    fn zero_noise_before_first_burst_is_pure_growth() {
        let flow = build_mean_flow(6).unwrap();
        let grid = TimeGrid::with_horizon(1e-3, 1.0, &[0.5, 1.0]).unwrap();
        let path = zero_path(&grid, 1);
        let series = explicit_jacobian_log(&flow, &mut path.cursor(0), &grid).unwrap();
        assert_eq!(series[0].value, 0.5);
        assert_eq!(series[1].value, 0.5);
    }

    #[test]
    fn deterministic_skeleton_oscillates() {
        let flow = build_mean_flow(12).unwrap();
        let report = oscillation_experiment(
            &flow,
            8,
            11,
            1,
            0,
            &OscillationOptions {
                zero_noise: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((report.even_mean - 2.0 / 3.0).abs() < 0.03, "{}", report.even_mean);
        assert!((report.odd_mean - 5.0 / 6.0).abs() < 0.03, "{}", report.odd_mean);
        assert!((report.gap - 1.0 / 6.0).abs() < 0.05);
        assert_eq!(report.positive_gap_fraction, 1.0);
        assert_eq!(report.admissible_eps_fraction, 1.0);
    }

    #[test]
    fn experiment_range_validation() {
        let flow = build_mean_flow(10).unwrap();
        let opts = OscillationOptions::default();
        assert!(oscillation_experiment(&flow, 1, 5, 1, 0, &opts).is_err());
        assert!(oscillation_experiment(&flow, 5, 5, 1, 0, &opts).is_err());
        assert!(oscillation_experiment(&flow, 5, 11, 1, 0, &opts).is_err());
    }
}
