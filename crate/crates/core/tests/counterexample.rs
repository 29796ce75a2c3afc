use std::sync::Arc;

use mvlab::counterexample::{
    build_mean_flow, explicit_jacobian_log, oscillation_experiment, shifted_mean_flow, OscillationOptions, Parity,
    ADMISSIBLE_EPS,
};
use mvlab::model::make_counterexample_model;
use mvlab::noise::{zero_path, BrownianStream, NoiseCursor, TimeGrid};
use mvlab::particle::replicate_state;
use mvlab::variational::{propagate_full_jacobian, JacobianOptions, Part};

fn skeleton(n_lo: usize, n_hi: usize) -> Vec<(usize, f64)> {
    let flow = build_mean_flow(n_hi + 1).unwrap();
    let times: Vec<f64> = (n_lo..=n_hi).map(|n| (n as f64).exp2()).collect();
    let grid = TimeGrid::with_horizon(1e-3, times[times.len() - 1], &times).unwrap();
    let cps = explicit_jacobian_log(&flow, &mut zero_path(&grid, 1).cursor(0), &grid).unwrap();
    assert!(cps.iter().all(|c| !c.indeterminate && c.brownian == 0.0));
    (n_lo..=n_hi).zip(cps.iter().map(|c| c.value)).collect()
}

#[test]
fn skeleton_values_sit_near_two_thirds_and_five_sixths() {
    for (n, v) in skeleton(8, 11) {
        let target = match Parity::of(n) {
            Parity::Even => 2.0 / 3.0,
            Parity::Odd => 5.0 / 6.0,
        };
        assert!((v - target).abs() <= 0.03, "T_{n}: {v} vs {target}");
    }
}

#[test]
fn skeleton_even_and_odd_windows_separate() {
    let values = skeleton(6, 11);
    let even_sup = values.iter().filter(|(n, _)| n % 2 == 0).map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let odd_inf = values.iter().filter(|(n, _)| n % 2 == 1).map(|p| p.1).fold(f64::INFINITY, f64::min);
    assert!(odd_inf - even_sup >= 0.1, "even sup {even_sup}, odd inf {odd_inf}");
}

#[test]
fn slope_time_at_even_breakpoints() {
    let flow = build_mean_flow(20).unwrap();
    for n in 1..=10 {
        let t = (2.0 * n as f64).exp2();
        assert_eq!(flow.slope_time(t), (4f64.powi(n) - 1.0) / 3.0, "n = {n}");
    }
}

#[test]
fn first_levels() {
    let flow = build_mean_flow(4).unwrap();
    let e = std::f64::consts::E;
    assert_eq!(flow.levels()[0], e);
    assert!((flow.levels()[1] - 6.7667).abs() < 5e-5);
    assert_eq!(flow.slope(0.5), 0.0);
    assert_eq!(flow.slope(1.5), 0.25);
    assert_eq!(flow.slope(3.0), 0.0);
}

#[test]
fn shifted_flow_examples() {
    let canonical = shifted_mean_flow(1.0, 8).unwrap();
    assert_eq!(canonical.crossing_times()[3], (3, 8.0));
    let at_a0 = shifted_mean_flow(std::f64::consts::E, 8).unwrap();
    assert_eq!(at_a0.slope(0.0), 0.25);
    let two = shifted_mean_flow(2.0, 8).unwrap();
    let (_, gamma0) = two.crossing_times()[0];
    assert!((gamma0 - (1.0 - 2f64.ln())).abs() < 1e-12);
    assert!(shifted_mean_flow(0.5, 8).is_err());
}

#[test]
fn stochastic_rows_follow_the_replica_layout() {
    let flow = build_mean_flow(8).unwrap();
    let opts = OscillationOptions { dt: 1e-2, ..Default::default() };
    let report = oscillation_experiment(&flow, 4, 7, 5, 11, &opts).unwrap();
    assert_eq!(report.rows.len(), 5 * 4);
    for (i, row) in report.rows.iter().enumerate() {
        assert_eq!((row.replica, row.n), (i / 4, 4 + i % 4));
        assert_eq!(row.t_n, (row.n as f64).exp2());
    }
    let again = oscillation_experiment(&flow, 4, 7, 5, 11, &opts).unwrap();
    assert_eq!(report, again);
}

#[test]
fn admissible_eps_holds_for_ninety_percent_of_replicas() {
    let flow = build_mean_flow(10).unwrap();
    let opts = OscillationOptions { dt: 1e-2, ..Default::default() };
    let report = oscillation_experiment(&flow, 8, 10, 1024, 0, &opts).unwrap();
    assert_eq!(report.max_abs_w_over_t.len(), 1024);
    let below = report.max_abs_w_over_t.iter().filter(|v| **v < ADMISSIBLE_EPS).count();
    assert_eq!(below as f64 / 1024.0, report.admissible_eps_fraction);
    assert!(report.admissible_eps_fraction >= 0.9, "{}", report.admissible_eps_fraction);
}

#[test]
#[ignore = "fails: particle J_full differs from the explicit exponent by up to about 0.3 at N = 4096, dt = 1e-3"]
fn explicit_exponent_matches_the_particle_jacobian() {
    let flow = Arc::new(build_mean_flow(8).unwrap());
    let model = make_counterexample_model(flow.clone());
    let (n, dt) = (4096, 1e-3);
    let times = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];
    let grid = TimeGrid::with_horizon(dt, 64.0, &times).unwrap();
    for seed in 0..2 {
        let run = propagate_full_jacobian(&model, &replicate_state(&[1.0], n), &grid, NoiseCursor::streams(seed, 0, n, dt, 1), &JacobianOptions::default()).unwrap();
        // The tagged particle is particle 0, which draws stream 0.
        let explicit = explicit_jacobian_log(&flow, &mut BrownianStream::new(seed, 0, dt, 1), &grid).unwrap();
        for (s, e) in run.tagged.iter().zip(&explicit) {
            let v = s.sample(Part::Full).log_norm_applied(&[1.0]) / s.t;
            assert!((v - e.value).abs() <= 0.02, "seed {seed}, t = {}: {v} vs {}", s.t, e.value);
        }
    }
}
