//! Seeded Brownian increments shared by coupled, decoupled and closed-form
//! computations.
//!
//! Each `(seed, stream_id)` pair selects an independent ChaCha8 stream; the
//! increments of one path are drawn sequentially from its stream, so a path
//! can be regenerated bit-for-bit either in full ([`sample_path`]) or on the
//! fly ([`BrownianStream`]) without storing it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time discretisation of `[t0, t0 + n_steps·dt]` with the grid
/// indices at which outputs are recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub checkpoints: Vec<usize>,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize, checkpoints: Vec<usize>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config("dt", "dt must be > 0"));
        }
        if n_steps == 0 {
            return Err(Error::config("t_max", "grid needs at least one step"));
        }
        if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("checkpoints", "checkpoints must be strictly increasing"));
        }
        if checkpoints.last().is_some_and(|&c| c > n_steps) {
            return Err(Error::config("checkpoints", "checkpoint beyond the horizon"));
        }
        Ok(Self {
            t0,
            dt,
            n_steps,
            checkpoints,
        })
    }

    /// Grid on `[0, horizon]`; `horizon` and every checkpoint time must be
    /// integer multiples of `dt`.
    pub fn with_horizon(dt: f64, horizon: f64, checkpoint_times: &[f64]) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config("dt", "dt must be > 0"));
        }
        if !(horizon >= dt) {
            return Err(Error::config("t_max", "t_max must be >= dt"));
        }
        let n_steps = grid_index(dt, horizon).ok_or_else(|| {
            Error::config("t_max", format!("t_max = {horizon} is not a multiple of dt = {dt}"))
        })?;
        let checkpoints = checkpoint_times
            .iter()
            .map(|&t| {
                grid_index(dt, t).ok_or_else(|| {
                    Error::config("checkpoints", format!("t = {t} is not a grid point"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(0.0, dt, n_steps, checkpoints)
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn checkpoint_times(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|&i| self.time(i)).collect()
    }

    /// Grid index of time `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        grid_index(self.dt, t - self.t0).filter(|&i| i <= self.n_steps)
    }
}

fn grid_index(dt: f64, t: f64) -> Option<usize> {
    if !(t >= 0.0) || !t.is_finite() {
        return None;
    }
    let idx = (t / dt).round();
    ((idx * dt - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(idx as usize)
}

/// Powers of two in `[1, t_max]`.
pub fn dyadic_times(t_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = 1.0;
    while t <= t_max {
        out.push(t);
        t *= 2.0;
    }
    out
}

/// A source of Brownian increments, one `d_w`-vector per grid step.
pub trait IncrementSource: Send {
    fn noise_dim(&self) -> usize;

    fn next_increment(&mut self, out: &mut [f64]);

    fn skip(&mut self, steps: usize) {
        let mut buf = vec![0.0; self.noise_dim()];
        for _ in 0..steps {
            self.next_increment(&mut buf);
        }
    }
}

/// On-the-fly generator of the increments of `sample_path(seed, stream_id, ..)`.
#[derive(Debug, Clone)]
pub struct BrownianStream {
    rng: ChaCha8Rng,
    sqrt_dt: f64,
    d_w: usize,
}

impl BrownianStream {
    pub fn new(seed: u64, stream_id: u64, dt: f64, d_w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            rng,
            sqrt_dt: dt.sqrt(),
            d_w,
        }
    }
}

impl IncrementSource for BrownianStream {
    fn noise_dim(&self) -> usize {
        self.d_w
    }

    fn next_increment(&mut self, out: &mut [f64]) {
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *o = self.sqrt_dt * z;
        }
    }
}

/// A fully materialised Brownian path on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub grid: TimeGrid,
    pub d_w: usize,
    /// `n_steps × d_w`, row-major by step.
    pub increments: Vec<f64>,
    pub seed: u64,
    pub stream_id: u64,
}

pub fn sample_path(seed: u64, stream_id: u64, grid: &TimeGrid, d_w: usize) -> BrownianPath {
    let mut stream = BrownianStream::new(seed, stream_id, grid.dt, d_w);
    let mut increments = vec![0.0; grid.n_steps * d_w];
    if d_w > 0 {
        for chunk in increments.chunks_mut(d_w) {
            stream.next_increment(chunk);
        }
    }
    BrownianPath {
        grid: grid.clone(),
        d_w,
        increments,
        seed,
        stream_id,
    }
}

pub fn zero_path(grid: &TimeGrid, d_w: usize) -> BrownianPath {
    BrownianPath {
        grid: grid.clone(),
        d_w,
        increments: vec![0.0; grid.n_steps * d_w],
        seed: 0,
        stream_id: 0,
    }
}

impl BrownianPath {
    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.d_w..(step + 1) * self.d_w]
    }

    /// `W` at every grid point, `(n_steps + 1) × d_w`, with `W(t0) = 0`.
    pub fn values(&self) -> Vec<f64> {
        let mut out = vec![0.0; (self.grid.n_steps + 1) * self.d_w];
        for m in 0..self.grid.n_steps {
            for c in 0..self.d_w {
                out[(m + 1) * self.d_w + c] = out[m * self.d_w + c] + self.increments[m * self.d_w + c];
            }
        }
        out
    }

    /// Cursor positioned at grid step `start`.
    pub fn cursor(&self, start: usize) -> PathCursor<'_> {
        PathCursor { path: self, pos: start }
    }

    /// The same path observed on a grid `factor` times coarser; increments
    /// are sums of consecutive fine increments.
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath> {
        if factor == 0 || self.grid.n_steps % factor != 0 {
            return Err(Error::config("factor", "coarsening factor must divide n_steps"));
        }
        let n = self.grid.n_steps / factor;
        let mut increments = vec![0.0; n * self.d_w];
        for m in 0..n {
            for c in 0..self.d_w {
                increments[m * self.d_w + c] =
                    (0..factor).map(|j| self.increments[(m * factor + j) * self.d_w + c]).sum();
            }
        }
        let checkpoints = self
            .grid
            .checkpoints
            .iter()
            .filter(|&&i| i % factor == 0)
            .map(|&i| i / factor)
            .collect();
        Ok(BrownianPath {
            grid: TimeGrid::new(self.grid.t0, self.grid.dt * factor as f64, n, checkpoints)?,
            d_w: self.d_w,
            increments,
            seed: self.seed,
            stream_id: self.stream_id,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PathCursor<'a> {
    path: &'a BrownianPath,
    pos: usize,
}

impl IncrementSource for PathCursor<'_> {
    fn noise_dim(&self) -> usize {
        self.path.d_w
    }

    fn next_increment(&mut self, out: &mut [f64]) {
        out.copy_from_slice(self.path.increment(self.pos));
        self.pos += 1;
    }

    fn skip(&mut self, steps: usize) {
        self.pos += steps;
    }
}

/// Per-particle noise used by the simulators.
#[derive(Debug, Clone)]
pub enum NoiseCursor<'a> {
    Live(BrownianStream),
    Path(PathCursor<'a>),
    Zero(usize),
}

impl<'a> NoiseCursor<'a> {
    pub fn from_path(path: &'a BrownianPath) -> Self {
        NoiseCursor::Path(path.cursor(0))
    }

    /// Live streams `first_stream, first_stream + 1, ...` for `n` particles.
    pub fn streams(seed: u64, first_stream: u64, n: usize, dt: f64, d_w: usize) -> Vec<Self> {
        (0..n as u64)
            .map(|i| NoiseCursor::Live(BrownianStream::new(seed, first_stream + i, dt, d_w)))
            .collect()
    }

    pub fn zeros(n: usize, d_w: usize) -> Vec<Self> {
        vec![NoiseCursor::Zero(d_w); n]
    }
}

impl IncrementSource for NoiseCursor<'_> {
    fn noise_dim(&self) -> usize {
        match self {
            NoiseCursor::Live(s) => s.noise_dim(),
            NoiseCursor::Path(p) => p.noise_dim(),
            NoiseCursor::Zero(d) => *d,
        }
    }

    fn next_increment(&mut self, out: &mut [f64]) {
        match self {
            NoiseCursor::Live(s) => s.next_increment(out),
            NoiseCursor::Path(p) => p.next_increment(out),
            NoiseCursor::Zero(_) => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    fn skip(&mut self, steps: usize) {
        match self {
            NoiseCursor::Live(s) => s.skip(steps),
            NoiseCursor::Path(p) => p.skip(steps),
            NoiseCursor::Zero(_) => {}
        }
    }
}

/// Stream id of particle `particle` in replica `replica`.
pub fn particle_stream(replica: u64, particle: u64) -> u64 {
    (replica << 32) | particle
}
