//! Decoupled replay and the Jacobian flows of the particle map.
//!
//! All Jacobians are exact linearisations of the discrete Euler map, split
//! by dependency channel: the spatial part follows the particle's own state
//! with the measure frozen, the measure part collects everything routed
//! through the empirical measure. Their sum is the full Jacobian up to one
//! rounding per step.
//!
//! Tracked matrices are stored together with an integer `log2_scale`; the
//! represented Jacobian is `2^log2_scale · matrix`.

use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::engine::{euler_state_step, spatial_jacobian_step, Engine};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::Model;
use crate::noise::{BrownianPath, IncrementSource, NoiseCursor, TimeGrid};
use crate::particle::{check_noise, DistributionFlow, StoragePolicy, Trajectories};

/// Largest ensemble for which the O(N²) general Lions coupling is allowed.
pub const DEFAULT_N2_CAP: usize = 2048;

/// Bounds on the tagged Jacobian norm outside which the adaptive policy
/// re-orthonormalises.
pub const REORTH_NORM_RANGE: (f64, f64) = (1e-6, 1e6);

/// A d×d matrix scaled by `2^log2_scale`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianSample {
    pub t: f64,
    pub log2_scale: i64,
    pub matrix: Vec<f64>,
}

impl JacobianSample {
    pub fn dim(&self) -> usize {
        (self.matrix.len() as f64).sqrt().round() as usize
    }

    /// `ln |J v|`.
    pub fn log_norm_applied(&self, v: &[f64]) -> f64 {
        let jv = linalg::matvec(self.dim(), &self.matrix, v);
        linalg::norm2(&jv).ln() + self.log2_scale as f64 * LN_2
    }

    /// Unscaled entries; overflows to ±inf for huge scales.
    pub fn value(&self) -> Vec<f64> {
        let f = (self.log2_scale as f64).exp2();
        self.matrix.iter().map(|v| v * f).collect()
    }
}

/// Which channel of the tagged Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Spatial,
    Measure,
    Full,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Spatial, Part::Measure, Part::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Spatial => "spatial",
            Part::Measure => "measure",
            Part::Full => "full",
        }
    }
}

/// The tagged particle's Jacobians at one checkpoint, sharing one scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianState {
    pub t: f64,
    pub log2_scale: i64,
    pub spatial: Vec<f64>,
    pub measure: Vec<f64>,
    pub full: Vec<f64>,
}

impl JacobianState {
    pub fn part(&self, part: Part) -> &[f64] {
        match part {
            Part::Spatial => &self.spatial,
            Part::Measure => &self.measure,
            Part::Full => &self.full,
        }
    }

    pub fn sample(&self, part: Part) -> JacobianSample {
        JacobianSample {
            t: self.t,
            log2_scale: self.log2_scale,
            matrix: self.part(part).to_vec(),
        }
    }

    /// `max |J_full − (J_spatial + J_measure)| / max |J_full|`.
    pub fn decomposition_residual(&self) -> f64 {
        let diff = self
            .full
            .iter()
            .zip(self.spatial.iter().zip(&self.measure))
            .map(|(f, (s, m))| (f - (s + m)).abs())
            .fold(0.0, f64::max);
        let scale = linalg::max_abs(&self.full);
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Every particle's full Jacobian at one checkpoint (N × d × d).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleJacobians {
    pub t: f64,
    pub log2_scale: i64,
    pub values: Vec<f64>,
}

/// Benettin re-orthonormalisation schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reorth {
    /// Whenever the tagged Jacobian norm leaves [`REORTH_NORM_RANGE`].
    Adaptive,
    /// Every given number of steps.
    Every(usize),
}

/// Per-mode accumulated `ln |r_ii|` at one checkpoint: the tagged full
/// Jacobian's stretching along its QR modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QrCheckpoint {
    pub t: f64,
    pub log_stretch: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct JacobianOptions {
    /// Particle whose Jacobian is split into spatial and measure parts.
    pub tagged: usize,
    /// Keep every particle's Jacobian at each checkpoint.
    pub record_all: bool,
    pub n2_cap: usize,
    /// Benettin QR along the tagged full Jacobian. The recorded tagged
    /// states are then expressed in the re-orthonormalised frame.
    pub reorth: Option<Reorth>,
    pub storage: Option<StoragePolicy>,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        Self {
            tagged: 0,
            record_all: false,
            n2_cap: DEFAULT_N2_CAP,
            reorth: None,
            storage: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JacobianRun {
    pub trajectories: Trajectories,
    pub flow: Option<DistributionFlow>,
    pub tagged: Vec<JacobianState>,
    pub ensemble: Vec<EnsembleJacobians>,
    pub qr: Vec<QrCheckpoint>,
    pub reorth_count: usize,
    /// Entry `n − 1` is `ln sup_{t ∈ [n−1, n]} ‖J_measure(t)‖²_F` over grid
    /// times, for every complete unit window.
    pub measure_window_log_sup: Vec<f64>,
}

impl JacobianRun {
    pub fn dim(&self) -> usize {
        self.trajectories.dim
    }

    pub fn series(&self, part: Part) -> Vec<JacobianSample> {
        self.tagged.iter().map(|s| s.sample(part)).collect()
    }
}

struct QrState {
    policy: Reorth,
    acc: Vec<f64>,
    since: usize,
    count: usize,
}

impl QrState {
    fn due(&self, engine: &Engine<'_>, tag: usize) -> bool {
        match self.policy {
            Reorth::Every(k) => self.since >= k,
            Reorth::Adaptive => {
                let norm = linalg::frobenius(engine.particle_jacobian(tag));
                let log_norm = norm.ln() + engine.log2_scale as f64 * LN_2;
                log_norm > REORTH_NORM_RANGE.1.ln() || log_norm < REORTH_NORM_RANGE.0.ln()
            }
        }
    }

    /// Factor the tagged `J = QR`, fold `ln |r_ii|` and the scale into the
    /// accumulators and right-multiply every tracked matrix by `R⁻¹`.
    fn reorthonormalise(&mut self, engine: &mut Engine<'_>, tag: usize, t: f64) -> Result<()> {
        let d = engine.d;
        let (_, r) = qr_factor(d, engine.particle_jacobian(tag));
        let shift = engine.log2_scale as f64 * LN_2;
        let mut r_inv_input = r.clone();
        for i in 0..d {
            let rii = r[(i, i)];
            if rii == 0.0 {
                self.acc[i] = f64::NEG_INFINITY;
                r_inv_input[(i, i)] = 1.0;
            } else {
                self.acc[i] += rii.abs().ln() + shift;
            }
        }
        let r_inv = r_inv_input
            .try_inverse()
            .ok_or(Error::Overflow { time: t })?;
        engine.right_multiply_tracked(&linalg::from_dmatrix(&r_inv));
        engine.log2_scale = 0;
        if engine.jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { time: t });
        }
        self.since = 0;
        self.count += 1;
        Ok(())
    }

    fn checkpoint(&self, engine: &Engine<'_>, tag: usize, t: f64) -> QrCheckpoint {
        let d = engine.d;
        let (_, r) = qr_factor(d, engine.particle_jacobian(tag));
        let shift = engine.log2_scale as f64 * LN_2;
        QrCheckpoint {
            t,
            log_stretch: (0..d)
                .map(|i| self.acc[i] + r[(i, i)].abs().ln() + shift)
                .collect(),
        }
    }
}

fn qr_factor(d: usize, m: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = linalg::to_dmatrix(d, m).qr();
    (qr.q(), qr.r())
}

fn is_integer_time(t: f64) -> bool {
    (t - t.round()).abs() <= 1e-9 * t.abs().max(1.0)
}

/// Propagate all particles with their full Jacobians from the common start
/// `init` (each particle starting at `J = I`, the `δ_x` start), plus the
/// spatial / measure split of the tagged particle.
pub fn propagate_full_jacobian(
    model: &dyn Model,
    init: &[f64],
    grid: &TimeGrid,
    mut noise: Vec<NoiseCursor<'_>>,
    opts: &JacobianOptions,
) -> Result<JacobianRun> {
    let mut engine = Engine::new(model, init, grid.dt, grid.t0)?;
    check_noise(model, engine.n, &noise)?;
    engine.track_jacobians(Some(opts.tagged), opts.n2_cap)?;
    let d = engine.d;
    let tag = opts.tagged;
    let mut qr = match opts.reorth {
        Some(Reorth::Every(0)) => {
            return Err(Error::config("reorth_every", "must be >= 1"));
        }
        Some(policy) if d > 1 => Some(QrState {
            policy,
            acc: vec![0.0; d],
            since: 0,
            count: 0,
        }),
        _ => None,
    };

    let n_windows = (grid.horizon() - grid.t0).floor().max(0.0) as usize;
    let mut run = JacobianRun {
        trajectories: Trajectories::new(d, engine.n),
        flow: opts
            .storage
            .map(|p| DistributionFlow::new(grid.clone(), d, engine.n, p)),
        tagged: Vec::new(),
        ensemble: Vec::new(),
        qr: Vec::new(),
        reorth_count: 0,
        measure_window_log_sup: vec![f64::NEG_INFINITY; n_windows],
    };
    let mut cps = grid.checkpoints.iter().peekable();
    loop {
        let m = engine.step_index;
        let t = grid.time(m);
        if let Some(q) = qr.as_mut() {
            if m > 0 && q.due(&engine, tag) {
                q.reorthonormalise(&mut engine, tag, t)?;
            }
        }
        let tagged = engine.tagged.as_ref().expect("tagged particle tracked");
        let log_ms = 2.0 * (linalg::frobenius(&tagged.measure).ln() + engine.log2_scale as f64 * LN_2);
        let rel = t - grid.t0;
        let w_hi = rel.floor() as usize;
        for w in [w_hi, w_hi.wrapping_sub(1)] {
            if w < n_windows && (w == w_hi || is_integer_time(rel)) {
                let slot = &mut run.measure_window_log_sup[w];
                *slot = slot.max(log_ms);
            }
        }
        if let Some(f) = run.flow.as_mut() {
            f.record(m, &engine.states);
        }
        if cps.next_if_eq(&&m).is_some() {
            run.trajectories.push(m, t, &engine.states);
            let full = engine.particle_jacobian(tag).to_vec();
            run.tagged.push(JacobianState {
                t,
                log2_scale: engine.log2_scale,
                spatial: tagged.spatial.clone(),
                measure: tagged.measure.clone(),
                full,
            });
            if opts.record_all {
                run.ensemble.push(EnsembleJacobians {
                    t,
                    log2_scale: engine.log2_scale,
                    values: engine.jac.clone(),
                });
            }
            if let Some(q) = qr.as_ref() {
                run.qr.push(q.checkpoint(&engine, tag, t));
            }
        }
        if m == grid.n_steps {
            break;
        }
        engine.step(&mut noise)?;
        if let Some(q) = qr.as_mut() {
            q.since += 1;
        }
    }
    run.reorth_count = qr.map_or(0, |q| q.count);
    Ok(run)
}

/// The measure part of the tagged particle's Jacobian at the checkpoints.
///
/// The measure channel needs the ensemble's Jacobians at every step, so this
/// runs the full propagation and extracts the tagged measure series.
pub fn propagate_measure_jacobian(
    model: &dyn Model,
    init: &[f64],
    grid: &TimeGrid,
    noise: Vec<NoiseCursor<'_>>,
    opts: &JacobianOptions,
) -> Result<Vec<JacobianSample>> {
    if opts.reorth.is_some() {
        return Err(Error::config(
            "reorth_every",
            "re-orthonormalisation changes the frame of the measure part",
        ));
    }
    Ok(propagate_full_jacobian(model, init, grid, noise, opts)?.series(Part::Measure))
}

/// Decoupled replay of one state against a recorded flow, steps
/// `from..to`, calling `visit(index, state, jacobian)` at each flow
/// checkpoint in `[from, to]`.
fn replay_range(
    model: &dyn Model,
    x: &[f64],
    flow: &DistributionFlow,
    noise: &mut dyn IncrementSource,
    from: usize,
    to: usize,
    with_jacobian: bool,
    mut visit: impl FnMut(usize, &[f64], Option<(i64, &[f64])>),
) -> Result<Vec<f64>> {
    let d = model.dim();
    if x.len() != d || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("x0", format!("need a finite state of dimension {d}")));
    }
    if noise.noise_dim() != model.noise_dim() {
        return Err(Error::config("noise", "noise dimension does not match the model"));
    }
    flow.check_replayable(model, from, to)?;
    let grid = flow.grid();
    let dt = grid.dt;
    let mut state = x.to_vec();
    let mut next = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut inc = vec![0.0; model.noise_dim()];
    let mut jac = if with_jacobian { linalg::identity(d) } else { Vec::new() };
    let mut next_jac = jac.clone();
    let mut dxv = vec![0.0; d * d];
    let mut scale = 0i64;
    let cps = &grid.checkpoints;
    let mut cp = cps.partition_point(|&c| c < from);
    for m in from..=to {
        if cp < cps.len() && cps[cp] == m {
            visit(m, &state, with_jacobian.then_some((scale, jac.as_slice())));
            cp += 1;
        }
        if m == to {
            break;
        }
        let mu = flow.measure_at(m)?;
        noise.next_increment(&mut inc);
        euler_state_step(model, &state, &mu, dt, &inc, &mut v, &mut next);
        if with_jacobian {
            spatial_jacobian_step(model, &state, &mu, dt, &inc, &jac, &mut dxv, &mut next_jac);
            std::mem::swap(&mut jac, &mut next_jac);
            let mx = linalg::max_abs(&jac);
            if !mx.is_finite() {
                return Err(Error::BlowUp { particle: 0, time: grid.time(m + 1) });
            }
            if mx > 2f64.powi(200) || (mx > 0.0 && mx < 2f64.powi(-200)) {
                let e = mx.log2().floor() as i64;
                let f = (-e as f64).exp2();
                jac.iter_mut().for_each(|v| *v *= f);
                scale += e;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { particle: 0, time: grid.time(m + 1) });
        }
        std::mem::swap(&mut state, &mut next);
    }
    Ok(state)
}

/// `Φ^{μ}_{0,t}(x0)` at the flow's checkpoints, replaying the recorded
/// measure at every step.
pub fn replay_decoupled(
    model: &dyn Model,
    x0: &[f64],
    flow: &DistributionFlow,
    noise: &mut dyn IncrementSource,
) -> Result<Trajectories> {
    let mut out = Trajectories::new(model.dim(), 1);
    let grid = flow.grid().clone();
    replay_range(model, x0, flow, noise, 0, grid.n_steps, false, |m, x, _| {
        out.push(m, grid.time(m), x)
    })?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SpatialRun {
    pub trajectory: Trajectories,
    pub jacobians: Vec<JacobianSample>,
}

/// Decoupled replay from `x0` together with the spatial Jacobian
/// `J ← J + Σ_k ∂ₓV_k(X_m, μ_m) J w_k`, `J(0) = I`.
pub fn propagate_spatial_jacobian(
    model: &dyn Model,
    x0: &[f64],
    flow: &DistributionFlow,
    noise: &mut dyn IncrementSource,
) -> Result<SpatialRun> {
    let grid = flow.grid().clone();
    let mut trajectory = Trajectories::new(model.dim(), 1);
    let mut jacobians = Vec::new();
    replay_range(model, x0, flow, noise, 0, grid.n_steps, true, |m, x, j| {
        let t = grid.time(m);
        trajectory.push(m, t, x);
        let (log2_scale, matrix) = j.expect("jacobian tracked");
        jacobians.push(JacobianSample {
            t,
            log2_scale,
            matrix: matrix.to_vec(),
        });
    })?;
    Ok(SpatialRun {
        trajectory,
        jacobians,
    })
}

/// `|Φ_{r,t}(Φ_{0,r}(x)) − Φ_{0,t}(x)|` for the decoupled flow, with the
/// noise of `path` restricted to each interval.
pub fn check_flow_property(
    model: &dyn Model,
    flow: &DistributionFlow,
    x: &[f64],
    r: f64,
    t: f64,
    path: &BrownianPath,
) -> Result<f64> {
    let grid = flow.grid();
    let ir = grid
        .index_of(r)
        .ok_or_else(|| Error::config("r", format!("r = {r} is not a grid point")))?;
    let it = grid
        .index_of(t)
        .ok_or_else(|| Error::config("t", format!("t = {t} is not a grid point")))?;
    if ir > it {
        return Err(Error::config("r", "need r <= t"));
    }
    if path.grid.n_steps < it || path.grid.dt != grid.dt {
        return Err(Error::config("noise", "noise path does not cover the grid"));
    }
    let direct = replay_range(model, x, flow, &mut path.cursor(0), 0, it, false, |_, _, _| {})?;
    let mid = replay_range(model, x, flow, &mut path.cursor(0), 0, ir, false, |_, _, _| {})?;
    let composed = replay_range(model, &mid, flow, &mut path.cursor(ir), ir, it, false, |_, _, _| {})?;
    let diff: Vec<f64> = direct.iter().zip(&composed).map(|(a, b)| a - b).collect();
    Ok(linalg::norm2(&diff))
}
