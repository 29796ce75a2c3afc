//! Coupled interacting particle system and its recorded distribution flow.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::model::{MeasureView, Model};
use crate::noise::{IncrementSource, NoiseCursor, TimeGrid};
use crate::reduce::exact_record_sums;

/// What a [`DistributionFlow`] keeps per grid step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoragePolicy {
    /// Every particle state (N·d per step).
    Full,
    /// Mean, population covariance and second moment.
    #[default]
    Moments,
}

impl std::str::FromStr for StoragePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StoragePolicy::Full),
            "moments" => Ok(StoragePolicy::Moments),
            other => Err(Error::config(
                "storage_policy",
                format!("expected `full` or `moments`, got `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for StoragePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StoragePolicy::Full => "full",
            StoragePolicy::Moments => "moments",
        })
    }
}

/// N particle states at one grid index.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub time_index: usize,
    pub states: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn measure(&self) -> MeasureView<'_> {
        MeasureView::empirical(self.dim, &self.states)
    }
}

/// All particle states at the grid checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub dim: usize,
    pub n_particles: usize,
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    /// One `n_particles × dim` block per checkpoint.
    pub states: Vec<Vec<f64>>,
}

impl Trajectories {
    pub(crate) fn new(dim: usize, n_particles: usize) -> Self {
        Self {
            dim,
            n_particles,
            indices: Vec::new(),
            times: Vec::new(),
            states: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, index: usize, t: f64, states: &[f64]) {
        self.indices.push(index);
        self.times.push(t);
        self.states.push(states.to_vec());
    }

    pub fn particle(&self, checkpoint: usize, i: usize) -> &[f64] {
        &self.states[checkpoint][i * self.dim..(i + 1) * self.dim]
    }

    /// The path of one particle as `(t, state)` pairs.
    pub fn path(&self, i: usize) -> Vec<(f64, Vec<f64>)> {
        (0..self.times.len())
            .map(|c| (self.times[c], self.particle(c, i).to_vec()))
            .collect()
    }
}

/// Moments of one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSummary {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Population covariance, d × d row-major.
    pub cov: Vec<f64>,
    /// `E|X|²`.
    pub second_moment: f64,
}

/// Empirical measures of a coupled run, one snapshot per saved grid index.
#[derive(Debug, Clone)]
pub struct DistributionFlow {
    grid: TimeGrid,
    dim: usize,
    n_particles: usize,
    policy: StoragePolicy,
    indices: Vec<usize>,
    states: Vec<f64>,
    means: Vec<f64>,
    covs: Vec<f64>,
    second_moments: Vec<f64>,
}

impl DistributionFlow {
    pub(crate) fn new(grid: TimeGrid, dim: usize, n_particles: usize, policy: StoragePolicy) -> Self {
        Self {
            grid,
            dim,
            n_particles,
            policy,
            indices: Vec::new(),
            states: Vec::new(),
            means: Vec::new(),
            covs: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    /// A moment-stored flow from externally supplied snapshots, e.g. a
    /// deterministic reference law. Snapshot times are read from the grid
    /// indices; the `t` fields are ignored.
    pub fn from_moments(grid: TimeGrid, snapshots: Vec<(usize, MomentSummary)>) -> Result<Self> {
        let dim = snapshots
            .first()
            .map(|(_, m)| m.mean.len())
            .ok_or_else(|| Error::Replay("no snapshots".into()))?;
        let mut flow = Self::new(grid, dim, 0, StoragePolicy::Moments);
        for (index, m) in snapshots {
            if flow.indices.last().is_some_and(|&l| l >= index) || index > flow.grid.n_steps {
                return Err(Error::Replay(format!("snapshot index {index} out of order or beyond the grid")));
            }
            if m.mean.len() != dim || m.cov.len() != dim * dim {
                return Err(Error::Replay(format!("snapshot {index} does not have dimension {dim}")));
            }
            flow.indices.push(index);
            flow.means.extend_from_slice(&m.mean);
            flow.covs.extend_from_slice(&m.cov);
            flow.second_moments.push(m.second_moment);
        }
        Ok(flow)
    }

    pub(crate) fn record(&mut self, index: usize, states: &[f64]) {
        debug_assert!(self.indices.last().is_none_or(|&l| l < index));
        self.indices.push(index);
        match self.policy {
            StoragePolicy::Full => self.states.extend_from_slice(states),
            StoragePolicy::Moments => {
                let m = moments_of(self.dim, states);
                self.means.extend_from_slice(&m.mean);
                self.covs.extend_from_slice(&m.cov);
                self.second_moments.push(m.second_moment);
            }
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn storage_policy(&self) -> StoragePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn times(&self) -> Vec<f64> {
        self.indices.iter().map(|&i| self.grid.time(i)).collect()
    }

    fn slot(&self, index: usize) -> Result<usize> {
        self.indices.binary_search(&index).map_err(|_| {
            Error::Replay(format!(
                "no snapshot at grid index {index} (t = {})",
                self.grid.time(index)
            ))
        })
    }

    /// The recorded measure at a grid index.
    pub fn measure_at(&self, index: usize) -> Result<MeasureView<'_>> {
        let s = self.slot(index)?;
        let d = self.dim;
        Ok(match self.policy {
            StoragePolicy::Full => {
                let w = self.n_particles * d;
                MeasureView::empirical(d, &self.states[s * w..(s + 1) * w])
            }
            StoragePolicy::Moments => MeasureView::from_moments(
                self.means[s * d..(s + 1) * d].to_vec(),
                self.second_moments[s],
            ),
        })
    }

    /// Checks that steps `from..to` can be replayed by `model`.
    pub fn check_replayable(&self, model: &dyn Model, from: usize, to: usize) -> Result<()> {
        if model.dim() != self.dim {
            return Err(Error::Replay(format!(
                "flow has dimension {}, model `{}` has {}",
                self.dim,
                model.name(),
                model.dim()
            )));
        }
        if self.policy == StoragePolicy::Moments && model.reads_samples() {
            return Err(Error::Replay(format!(
                "model `{}` reads individual samples; record the flow with storage_policy = full",
                model.name()
            )));
        }
        if to > self.grid.n_steps {
            return Err(Error::Replay(format!("index {to} beyond the flow horizon")));
        }
        for m in from..to {
            self.slot(m)?;
        }
        Ok(())
    }

    pub fn moments(&self, slot: usize) -> MomentSummary {
        let d = self.dim;
        let t = self.grid.time(self.indices[slot]);
        match self.policy {
            StoragePolicy::Full => {
                let w = self.n_particles * d;
                MomentSummary {
                    t,
                    ..moments_of(d, &self.states[slot * w..(slot + 1) * w])
                }
            }
            StoragePolicy::Moments => MomentSummary {
                t,
                mean: self.means[slot * d..(slot + 1) * d].to_vec(),
                cov: self.covs[slot * d * d..(slot + 1) * d * d].to_vec(),
                second_moment: self.second_moments[slot],
            },
        }
    }
}

/// Mean, population covariance and second moment of `states` (n × d).
pub fn moments_of(d: usize, states: &[f64]) -> MomentSummary {
    let view = MeasureView::empirical(d, states);
    let mean = view.mean().to_vec();
    let n = states.len() / d;
    let sums = exact_record_sums(n, d * d, |i, out| {
        let x = &states[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] = (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    });
    MomentSummary {
        t: 0.0,
        cov: sums.iter().map(|s| s / n as f64).collect(),
        second_moment: view.second_moment(),
        mean,
    }
}

/// Per-snapshot moments in time order; moment-stored flows return the
/// stored values verbatim.
pub fn summarize_moments(flow: &DistributionFlow) -> Result<Vec<MomentSummary>> {
    if flow.is_empty() {
        return Err(Error::Replay("empty distribution flow".into()));
    }
    Ok((0..flow.len()).map(|s| flow.moments(s)).collect())
}

/// Output of [`simulate_coupled`].
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub trajectories: Trajectories,
    pub flow: Option<DistributionFlow>,
    pub ensemble: ParticleEnsemble,
}

/// `n` copies of the state `x`, the particle representation of `δ_x`.
pub fn replicate_state(x: &[f64], n: usize) -> Vec<f64> {
    x.iter().copied().cycle().take(x.len() * n).collect()
}

pub(crate) fn check_noise(model: &dyn Model, n: usize, noise: &[NoiseCursor<'_>]) -> Result<()> {
    if noise.len() != n {
        return Err(Error::config(
            "noise",
            format!("{} noise sources for {n} particles", noise.len()),
        ));
    }
    if let Some(bad) = noise.iter().position(|c| c.noise_dim() != model.noise_dim()) {
        return Err(Error::config(
            "noise",
            format!(
                "noise source {bad} has dimension {}, model needs {}",
                noise[bad].noise_dim(),
                model.noise_dim()
            ),
        ));
    }
    Ok(())
}

/// Euler–Maruyama integration of the interacting particle system.
///
/// `init` holds the N initial states row-major; `noise[i]` drives particle
/// `i`. The measure used in step `m` is the empirical measure at index `m`.
/// With `storage = Some(policy)` the measure at every grid index is recorded
/// for decoupled replay.
pub fn simulate_coupled(
    model: &dyn Model,
    init: &[f64],
    grid: &TimeGrid,
    mut noise: Vec<NoiseCursor<'_>>,
    storage: Option<StoragePolicy>,
) -> Result<CoupledRun> {
    let mut engine = Engine::new(model, init, grid.dt, grid.t0)?;
    let n = engine.n;
    check_noise(model, n, &noise)?;
    let mut trajectories = Trajectories::new(model.dim(), n);
    let mut flow = storage.map(|p| DistributionFlow::new(grid.clone(), model.dim(), n, p));
    let mut cps = grid.checkpoints.iter().peekable();
    loop {
        let m = engine.step_index;
        if let Some(f) = flow.as_mut() {
            f.record(m, &engine.states);
        }
        if cps.next_if_eq(&&m).is_some() {
            trajectories.push(m, grid.time(m), &engine.states);
        }
        if m == grid.n_steps {
            break;
        }
        engine.step(&mut noise)?;
    }
    Ok(CoupledRun {
        trajectories,
        flow,
        ensemble: ParticleEnsemble {
            dim: model.dim(),
            time_index: engine.step_index,
            states: engine.states,
        },
    })
}
