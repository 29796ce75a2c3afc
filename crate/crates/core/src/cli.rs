//! Command-line driver: subcommands, run manifests and failure records.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_override, parse_pairs, RunConfig};
use crate::counterexample::{oscillation_experiment, OscillationOptions};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::lyapunov::{check_kappa_bound, spectrum_from_run, ExponentRecord, ModeSummary};
use crate::model::Model;
use crate::noise::{particle_stream, sample_path, NoiseCursor, TimeGrid};
use crate::particle::{moments_of, replicate_state, simulate_coupled, StoragePolicy, Trajectories};
use crate::variational::{check_flow_property, propagate_full_jacobian, replay_decoupled, JacobianOptions, JacobianRun};

#[derive(Debug, Parser)]
#[command(name = "mvlab", version, about = "McKean-Vlasov particle and Lyapunov exponent laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coupled particle simulation with Jacobian tracking.
    Simulate(RunArgs),
    /// Finite-time Lyapunov exponents and the kappa ceiling check.
    Lyapunov(RunArgs),
    /// Even/odd oscillation experiment of the staircase model.
    Counterexample(RunArgs),
    /// Invariant suites on the configured model.
    Verify(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Rerun from a manifest written by an earlier run.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Replace every Brownian increment by zero.
    #[arg(long)]
    pub zero_noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubcommandName {
    Simulate,
    Lyapunov,
    Counterexample,
    Verify,
}

impl SubcommandName {
    pub fn as_str(self) -> &'static str {
        match self {
            SubcommandName::Simulate => "simulate",
            SubcommandName::Lyapunov => "lyapunov",
            SubcommandName::Counterexample => "counterexample",
            SubcommandName::Verify => "verify",
        }
    }
}

impl Command {
    fn split(&self) -> (SubcommandName, &RunArgs) {
        match self {
            Command::Simulate(a) => (SubcommandName::Simulate, a),
            Command::Lyapunov(a) => (SubcommandName::Lyapunov, a),
            Command::Counterexample(a) => (SubcommandName::Counterexample, a),
            Command::Verify(a) => (SubcommandName::Verify, a),
        }
    }
}

/// One checked invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl InvariantResult {
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamInfo {
    pub replica: usize,
    pub first_stream: u64,
    pub count: u64,
}

/// Everything needed to reproduce a run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: SubcommandName,
    pub version: String,
    /// Resolved configuration in `key = value` form.
    pub config_text: String,
    pub config: RunConfig,
    pub streams: Vec<StreamInfo>,
    pub steps_per_replica: usize,
    pub particle_steps: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

/// Machine-readable record written as `failure.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub subcommand: Option<SubcommandName>,
    pub kind: String,
    pub message: String,
    pub replica: Option<usize>,
    pub failed_invariants: Vec<InvariantResult>,
}

impl FailureRecord {
    fn from_error(sub: Option<SubcommandName>, e: &Error) -> Self {
        Self {
            subcommand: sub,
            kind: e.kind().into(),
            message: e.to_string(),
            replica: match e {
                Error::InReplica { replica, .. } => Some(*replica),
                _ => None,
            },
            failed_invariants: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub outputs: Vec<String>,
    pub invariants: Vec<InvariantResult>,
    pub streams: Vec<StreamInfo>,
    pub steps_per_replica: usize,
    pub particle_steps: u64,
}

impl RunOutcome {
    pub fn failures(&self) -> Vec<InvariantResult> {
        self.invariants.iter().filter(|i| !i.pass).cloned().collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_FILE: &str = "failure.json";

fn noise_for(cfg: &RunConfig, model: &dyn Model, replica: usize, n: usize) -> Vec<NoiseCursor<'static>> {
    if cfg.zero_noise {
        NoiseCursor::zeros(n, model.noise_dim())
    } else {
        NoiseCursor::streams(cfg.seed, particle_stream(replica as u64, 0), n, cfg.dt, model.noise_dim())
    }
}

fn particle_streams(cfg: &RunConfig) -> Vec<StreamInfo> {
    (0..cfg.replicas)
        .map(|r| StreamInfo {
            replica: r,
            first_stream: particle_stream(r as u64, 0),
            count: cfg.n_particles as u64,
        })
        .collect()
}

fn jacobian_run(cfg: &RunConfig, model: &dyn Model, grid: &TimeGrid, replica: usize, reorth: bool) -> Result<JacobianRun> {
    let opts = JacobianOptions {
        n2_cap: cfg.n2_cap,
        reorth: (reorth && model.dim() > 1).then(|| cfg.reorth()),
        ..Default::default()
    };
    let init = replicate_state(&cfg.x0, cfg.n_particles);
    propagate_full_jacobian(model, &init, grid, noise_for(cfg, model, replica, cfg.n_particles), &opts)
        .map_err(|e| e.in_replica(replica))
}

#[derive(Serialize)]
struct SimulateSummary {
    model: String,
    replicas: usize,
    n_particles: usize,
    checkpoints: Vec<f64>,
    /// `mean[replica][checkpoint][comp]`.
    ensemble_mean: Vec<Vec<Vec<f64>>>,
    /// Reference `Ȳ_t` at the checkpoints (staircase model only).
    mean_reference: Option<Vec<f64>>,
    /// Reference `E[J_t]` at the checkpoints (staircase model only).
    mean_jacobian_reference: Option<Vec<f64>>,
    max_decomposition_residual: Option<f64>,
}

fn simulate(cfg: &RunConfig, model: &dyn Model, out: &Path) -> Result<RunOutcome> {
    let grid = cfg.grid()?;
    let n = cfg.n_particles;
    let runs: Vec<(Trajectories, Option<JacobianRun>)> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            if cfg.jacobians {
                let run = jacobian_run(cfg, model, &grid, r, false)?;
                Ok((run.trajectories.clone(), Some(run)))
            } else {
                let init = replicate_state(&cfg.x0, n);
                let run = simulate_coupled(model, &init, &grid, noise_for(cfg, model, r, n), None)
                    .map_err(|e| e.in_replica(r))?;
                Ok((run.trajectories, None))
            }
        })
        .collect::<Result<_>>()?;

    let mut outputs = vec!["trajectories.csv".to_string()];
    let mut w = io::create(&out.join("trajectories.csv"))?;
    use std::io::Write;
    writeln!(w, "{}", io::TRAJECTORY_HEADER)?;
    for (r, (tr, _)) in runs.iter().enumerate() {
        io::write_trajectories(&mut w, r, tr)?;
    }
    w.flush()?;

    let mut ensemble_mean = Vec::new();
    for (r, (tr, _)) in runs.iter().enumerate() {
        let moments: Vec<_> = tr
            .times
            .iter()
            .zip(&tr.states)
            .map(|(t, s)| io_moments(*t, tr.dim, s))
            .collect();
        ensemble_mean.push(moments.iter().map(|m| m.mean.clone()).collect());
        let name = format!("moments_r{r}.csv");
        let mut w = io::create(&out.join(&name))?;
        io::write_moments(&mut w, &moments)?;
        w.flush()?;
        outputs.push(name);
    }

    let mut invariants = Vec::new();
    let mut max_residual = None;
    if cfg.jacobians {
        let mut w = io::create(&out.join("jacobians.csv"))?;
        writeln!(w, "{}", io::JACOBIAN_HEADER)?;
        let mut worst = 0.0f64;
        for (r, (_, run)) in runs.iter().enumerate() {
            let run = run.as_ref().expect("jacobians tracked");
            io::write_jacobians(&mut w, r, &run.tagged)?;
            for s in &run.tagged {
                worst = worst.max(s.decomposition_residual());
            }
        }
        w.flush()?;
        outputs.push("jacobians.csv".into());
        max_residual = Some(worst);
        invariants.push(InvariantResult::at_most(
            "decomposition",
            worst,
            1e-12,
            "max relative |J_full - (J_spatial + J_measure)| over checkpoints and replicas",
        ));
    }

    let flow = cfg.mean_flow()?;
    let times = grid.checkpoint_times();
    let covered = flow.as_ref().filter(|f| times.iter().all(|&t| f.covers(t)));
    let summary = SimulateSummary {
        model: cfg.model.name().into(),
        replicas: cfg.replicas,
        n_particles: n,
        mean_reference: covered.map(|f| times.iter().map(|&t| f.mean(t)).collect()),
        mean_jacobian_reference: covered.map(|f| times.iter().map(|&t| f.mean_jacobian(t)).collect()),
        checkpoints: times,
        ensemble_mean,
        max_decomposition_residual: max_residual,
    };
    io::write_json(&out.join("simulate_summary.json"), &summary)?;
    outputs.push("simulate_summary.json".into());

    Ok(RunOutcome {
        outputs,
        invariants,
        streams: particle_streams(cfg),
        steps_per_replica: grid.n_steps,
        particle_steps: (grid.n_steps * n * cfg.replicas) as u64,
    })
}

fn io_moments(t: f64, d: usize, states: &[f64]) -> crate::particle::MomentSummary {
    crate::particle::MomentSummary { t, ..moments_of(d, states) }
}

#[derive(Serialize)]
struct ReplicaExponents {
    replica: usize,
    modes: Vec<ModeSummary>,
}

#[derive(Serialize)]
struct LyapunovSummary {
    model: String,
    k: f64,
    kappa_ceiling: f64,
    tail_fraction: f64,
    replicas: Vec<ReplicaExponents>,
    mean_tail_midpoint: Vec<f64>,
    mean_tail_sup: Vec<f64>,
    mean_oscillation_index: Vec<f64>,
    pass: bool,
}

fn lyapunov(cfg: &RunConfig, model: &dyn Model, out: &Path) -> Result<RunOutcome> {
    let grid = cfg.grid()?;
    if grid.checkpoints.first() == Some(&0) {
        return Err(Error::config("checkpoints", "exponents need checkpoints with t > 0"));
    }
    let records: Vec<ExponentRecord> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let run = jacobian_run(cfg, model, &grid, r, true)?;
            spectrum_from_run(&run, cfg.tail_fraction).map_err(|e| e.in_replica(r))
        })
        .collect::<Result<_>>()?;

    let mut w = io::create(&out.join("exponents.csv"))?;
    use std::io::Write;
    writeln!(w, "{}", io::EXPONENT_HEADER)?;
    for (r, rec) in records.iter().enumerate() {
        io::write_exponents(&mut w, r, rec)?;
    }
    w.flush()?;

    let k = model.deriv_bound();
    let mut replicas = Vec::new();
    let mut invariants = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        let report = check_kappa_bound(rec, k)?;
        for m in &report.modes {
            invariants.push(InvariantResult::at_most(
                "kappa_ceiling",
                m.tail_sup,
                m.kappa_ceiling,
                format!("replica {r}, mode {}", m.mode),
            ));
        }
        replicas.push(ReplicaExponents {
            replica: r,
            modes: report.modes,
        });
    }
    let modes = records[0].modes();
    let mean_of = |f: &dyn Fn(&ExponentRecord, usize) -> f64| -> Vec<f64> {
        (0..modes)
            .map(|i| records.iter().map(|rec| f(rec, i)).sum::<f64>() / records.len() as f64)
            .collect()
    };
    let summary = LyapunovSummary {
        model: cfg.model.name().into(),
        k,
        kappa_ceiling: crate::model::theoretical_c(2.0, k)?,
        tail_fraction: cfg.tail_fraction,
        mean_tail_midpoint: mean_of(&|rec, i| rec.tail_midpoint(i)),
        mean_tail_sup: mean_of(&|rec, i| rec.tail_sup[i]),
        mean_oscillation_index: mean_of(&|rec, i| rec.oscillation_index[i]),
        pass: invariants.iter().all(|i| i.pass),
        replicas,
    };
    io::write_json(&out.join("lyapunov_summary.json"), &summary)?;
    Ok(RunOutcome {
        outputs: vec!["exponents.csv".into(), "lyapunov_summary.json".into()],
        invariants,
        streams: particle_streams(cfg),
        steps_per_replica: grid.n_steps,
        particle_steps: (grid.n_steps * cfg.n_particles * cfg.replicas) as u64,
    })
}

#[derive(Serialize)]
struct OscillationSummary {
    even_mean: f64,
    odd_mean: f64,
    gap: f64,
    positive_gap_fraction: f64,
    n_range: (usize, usize),
    seed: u64,
    replicas: usize,
    dt: f64,
    zero_noise: bool,
    admissible_eps_fraction: f64,
    max_abs_w_over_t: Vec<f64>,
    construction: String,
    x0: f64,
    crossing_times: Vec<(usize, f64)>,
    levels: Vec<f64>,
}

fn counterexample(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let flow = cfg
        .mean_flow()?
        .ok_or_else(|| Error::config("model", "the counterexample subcommand needs model = counterexample"))?;
    let opts = OscillationOptions {
        dt: cfg.dt,
        zero_noise: cfg.zero_noise,
        first_stream: 0,
    };
    let report = oscillation_experiment(&flow, cfg.n_lo, cfg.n_hi, cfg.replicas, cfg.seed, &opts)?;
    let mut w = io::create(&out.join("oscillation.csv"))?;
    io::write_oscillation(&mut w, &report)?;
    std::io::Write::flush(&mut w)?;
    let summary = OscillationSummary {
        even_mean: report.even_mean,
        odd_mean: report.odd_mean,
        gap: report.gap,
        positive_gap_fraction: report.positive_gap_fraction,
        n_range: report.n_range,
        seed: report.seed,
        replicas: report.replicas,
        dt: report.dt,
        zero_noise: report.zero_noise,
        admissible_eps_fraction: report.admissible_eps_fraction,
        max_abs_w_over_t: report.max_abs_w_over_t.clone(),
        construction: report.construction.clone(),
        x0: cfg.x0[0],
        crossing_times: flow.crossing_times(),
        levels: flow.levels()[..flow.finite_levels()].to_vec(),
    };
    io::write_json(&out.join("oscillation_report.json"), &summary)?;
    let horizon = (cfg.n_hi as f64).exp2();
    let steps = (horizon / cfg.dt).round() as usize;
    Ok(RunOutcome {
        outputs: vec!["oscillation.csv".into(), "oscillation_report.json".into()],
        invariants: Vec::new(),
        streams: (0..cfg.replicas)
            .map(|r| StreamInfo {
                replica: r,
                first_stream: r as u64,
                count: 1,
            })
            .collect(),
        steps_per_replica: steps,
        particle_steps: (steps * cfg.replicas) as u64,
    })
}

/// Relative max-abs difference of two matrices.
fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = linalg::max_abs(b);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Invariant suites on the configured model, sized from the config.
pub fn verify_invariants(cfg: &RunConfig, model: &dyn Model) -> Result<Vec<InvariantResult>> {
    let grid = cfg.grid()?;
    let d = model.dim();
    let dw = model.noise_dim();
    let n = cfg.n_particles.max(2);
    let mut out = Vec::new();

    // Decomposition of the tagged Jacobian at every checkpoint.
    let init = replicate_state(&cfg.x0, n);
    let streams = |first: u64, count: usize| -> Vec<NoiseCursor<'static>> {
        if cfg.zero_noise {
            NoiseCursor::zeros(count, dw)
        } else {
            NoiseCursor::streams(cfg.seed, first, count, cfg.dt, dw)
        }
    };
    let opts = JacobianOptions {
        n2_cap: cfg.n2_cap,
        ..Default::default()
    };
    let tagged_run = propagate_full_jacobian(model, &init, &grid, streams(0, n), &opts)?;
    let worst = tagged_run.tagged.iter().map(|s| s.decomposition_residual()).fold(0.0, f64::max);
    out.push(InvariantResult::at_most(
        "decomposition",
        worst,
        1e-12,
        "max relative |J_full - (J_spatial + J_measure)| over checkpoints",
    ));

    // Flow property and single-particle replay on a recorded flow.
    let policy = if model.reads_samples() { StoragePolicy::Full } else { cfg.storage_policy };
    let coupled = simulate_coupled(model, &init, &grid, streams(0, n), Some(policy))?;
    let flow = coupled.flow.expect("flow recorded");
    let path = if cfg.zero_noise {
        crate::noise::zero_path(&grid, dw)
    } else {
        sample_path(cfg.seed, u64::MAX, &grid, dw)
    };
    let r = grid.time(grid.n_steps / 3);
    let t = grid.horizon();
    let direct = replay_decoupled(model, &cfg.x0, &flow, &mut path.cursor(0))?;
    let scale = direct
        .states
        .last()
        .map_or(1.0, |s| linalg::norm2(s).max(f64::MIN_POSITIVE));
    let residual = check_flow_property(model, &flow, &cfg.x0, r, t, &path)? / scale;
    out.push(InvariantResult::at_most(
        "flow_property",
        residual,
        1e-12,
        format!("relative residual of the composition at r = {r}, t = {t}"),
    ));

    let single = simulate_coupled(model, &cfg.x0, &grid, vec![NoiseCursor::from_path(&path)], Some(policy))?;
    let replay = replay_decoupled(model, &cfg.x0, single.flow.as_ref().expect("flow recorded"), &mut path.cursor(0))?;
    out.push(InvariantResult::at_most(
        "single_particle_replay",
        if replay == single.trajectories { 0.0 } else { 1.0 },
        0.0,
        "coupled N = 1 run equals the decoupled replay of its own flow bit for bit",
    ));

    // Central finite difference of the particle map, common noise.
    let fd_horizon = grid.horizon().min(1.0);
    let fd_grid = TimeGrid::with_horizon(cfg.dt, fd_horizon, &[fd_horizon])?;
    let h = 1e-4;
    let base = propagate_full_jacobian(model, &init, &fd_grid, streams(0, n), &opts)?;
    let mut fd = vec![0.0; d * d];
    for j in 0..d {
        let endpoint = |sign: f64| -> Result<Vec<f64>> {
            let mut x = cfg.x0.clone();
            x[j] += sign * h;
            let run = simulate_coupled(model, &replicate_state(&x, n), &fd_grid, streams(0, n), None)?;
            Ok(run.trajectories.particle(0, 0).to_vec())
        };
        let (plus, minus) = (endpoint(1.0)?, endpoint(-1.0)?);
        for i in 0..d {
            fd[i * d + j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    let scaled: Vec<f64> = base.tagged[0].sample(crate::variational::Part::Full).value();
    out.push(InvariantResult::at_most(
        "finite_difference",
        rel_diff(&scaled, &fd),
        1e-3,
        format!("J_full vs central difference, h = {h}, t = {fd_horizon}"),
    ));

    // Kappa ceiling on the tagged exponent.
    if grid.checkpoints.iter().any(|&c| c > 0) {
        let mut positive = grid.clone();
        positive.checkpoints.retain(|&c| c > 0);
        let reorth = (d > 1).then(|| cfg.reorth());
        let opts_qr = JacobianOptions { reorth, ..opts.clone() };
        let run = propagate_full_jacobian(model, &init, &positive, streams(0, n), &opts_qr)?;
        let rec = spectrum_from_run(&run, cfg.tail_fraction)?;
        let report = check_kappa_bound(&rec, model.deriv_bound())?;
        for m in &report.modes {
            out.push(InvariantResult::at_most(
                "kappa_ceiling",
                m.tail_sup,
                m.kappa_ceiling,
                format!("mode {} tail_sup vs C(2, K)", m.mode),
            ));
        }
    }

    // Thread-count invariance.
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    let serial = one.install(|| propagate_full_jacobian(model, &init, &grid, streams(0, n), &opts))?;
    let same = serial.trajectories == tagged_run.trajectories && serial.tagged == tagged_run.tagged;
    out.push(InvariantResult::at_most(
        "thread_determinism",
        if same { 0.0 } else { 1.0 },
        0.0,
        "one worker thread reproduces the default pool bit for bit",
    ));

    // Permutation equivariance on a spread-out start.
    let spread: Vec<f64> = (0..n)
        .flat_map(|i| cfg.x0.iter().map(move |x| x + 0.01 * i as f64))
        .collect();
    let forward = simulate_coupled(model, &spread, &grid, streams(0, n), None)?;
    let perm: Vec<usize> = (0..n).rev().collect();
    let permuted_init: Vec<f64> = perm.iter().flat_map(|&i| spread[i * d..(i + 1) * d].to_vec()).collect();
    let mut permuted_noise = streams(0, n);
    permuted_noise.reverse();
    let backward = simulate_coupled(model, &permuted_init, &grid, permuted_noise, None)?;
    let equivariant = (0..forward.trajectories.times.len()).all(|c| {
        perm.iter()
            .enumerate()
            .all(|(k, &i)| forward.trajectories.particle(c, i) == backward.trajectories.particle(c, k))
    });
    out.push(InvariantResult::at_most(
        "permutation_equivariance",
        if equivariant { 0.0 } else { 1.0 },
        0.0,
        "reversing particles and noise reverses trajectories bit for bit",
    ));
    Ok(out)
}

fn verify(cfg: &RunConfig, model: &dyn Model, out: &Path) -> Result<RunOutcome> {
    let invariants = verify_invariants(cfg, model)?;
    io::write_json(&out.join("verify_summary.json"), &invariants)?;
    let grid = cfg.grid()?;
    Ok(RunOutcome {
        outputs: vec!["verify_summary.json".into()],
        invariants,
        streams: vec![StreamInfo {
            replica: 0,
            first_stream: 0,
            count: cfg.n_particles.max(2) as u64,
        }],
        steps_per_replica: grid.n_steps,
        particle_steps: 0,
    })
}

/// Runs one subcommand, writing its files into `cfg.output_dir` (created if
/// missing). Invariant violations are returned in the outcome, not as errors.
pub fn execute(sub: SubcommandName, cfg: &RunConfig) -> Result<RunOutcome> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    let work = || -> Result<RunOutcome> {
        let model = cfg.build_model()?;
        match sub {
            SubcommandName::Simulate => simulate(cfg, model.as_ref(), &out),
            SubcommandName::Lyapunov => lyapunov(cfg, model.as_ref(), &out),
            SubcommandName::Counterexample => counterexample(cfg, &out),
            SubcommandName::Verify => verify(cfg, model.as_ref(), &out),
        }
    };
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?
            .install(work)
    } else {
        work()
    }
}

fn resolve_config(sub: SubcommandName, args: &RunArgs) -> Result<RunConfig> {
    let mut pairs = if let Some(m) = &args.manifest {
        let manifest: RunManifest = serde_json::from_reader(std::fs::File::open(m)?)?;
        if manifest.subcommand != sub {
            return Err(Error::config(
                "manifest",
                format!("manifest was written by `{}`", manifest.subcommand.as_str()),
            ));
        }
        parse_pairs(&manifest.config_text)?
    } else if let Some(c) = &args.config {
        parse_pairs(&std::fs::read_to_string(c)?)?
    } else {
        Vec::new()
    };
    for s in &args.set {
        pairs.push(parse_override(s)?);
    }
    if let Some(o) = &args.output_dir {
        pairs.push(("output_dir".into(), o.display().to_string()));
    }
    if let Some(s) = args.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = args.threads {
        pairs.push(("threads".into(), t.to_string()));
    }
    if args.zero_noise {
        pairs.push(("zero_noise".into(), "true".into()));
    }
    RunConfig::from_pairs(&pairs)
}

/// Runs the subcommand and writes the manifest; returns the exit status.
pub fn run(cli: Cli) -> i32 {
    let (sub, args) = cli.command.split();
    let cfg = match resolve_config(sub, args) {
        Ok(c) => c,
        Err(e) => {
            let record = FailureRecord::from_error(Some(sub), &e);
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            return 1;
        }
    };
    let start = Instant::now();
    let result = execute(sub, &cfg);
    let write_failure = |record: &FailureRecord| {
        let path = cfg.output_dir.join(FAILURE_FILE);
        if let Err(e) = io::write_json(&path, record) {
            eprintln!("could not write {}: {e}", path.display());
        }
        eprintln!("{}", serde_json::to_string(record).unwrap_or_default());
    };
    match result {
        Ok(outcome) => {
            let manifest = RunManifest {
                subcommand: sub,
                version: env!("CARGO_PKG_VERSION").into(),
                config_text: cfg.emit(),
                config: cfg.clone(),
                streams: outcome.streams.clone(),
                steps_per_replica: outcome.steps_per_replica,
                particle_steps: outcome.particle_steps,
                wall_clock_seconds: start.elapsed().as_secs_f64(),
                outputs: outcome.outputs.clone(),
            };
            if let Err(e) = io::write_json(&cfg.output_dir.join(MANIFEST_FILE), &manifest) {
                write_failure(&FailureRecord::from_error(Some(sub), &e));
                return 1;
            }
            for inv in &outcome.invariants {
                println!(
                    "{} {}: value {:e} threshold {:e} ({})",
                    if inv.pass { "PASS" } else { "FAIL" },
                    inv.name,
                    inv.value,
                    inv.threshold,
                    inv.detail
                );
            }
            let failed = outcome.failures();
            if failed.is_empty() {
                println!("wrote {} to {}", outcome.outputs.join(", "), cfg.output_dir.display());
                0
            } else {
                write_failure(&FailureRecord {
                    subcommand: Some(sub),
                    kind: "invariant".into(),
                    message: format!("{} invariant(s) violated", failed.len()),
                    replica: None,
                    failed_invariants: failed,
                });
                1
            }
        }
        Err(e) => {
            write_failure(&FailureRecord::from_error(Some(sub), &e));
            1
        }
    }
}
