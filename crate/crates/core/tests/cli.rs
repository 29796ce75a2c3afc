use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use mvlab::cli::{execute, SubcommandName, MANIFEST_FILE};
use mvlab::config::{parse_config, parse_pairs, RunConfig};
use proptest::prelude::*;

fn mvlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mvlab")).args(args).output().unwrap()
}

fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
    list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != MANIFEST_FILE)
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "# staircase\nmodel = counterexample\nt_max = 1024\ncheckpoints = dyadic\n\nreplicas = 3\n").unwrap();
    let cfg = parse_config(Some(&path), &pairs(&[("replicas", "5")])).unwrap();
    assert_eq!(cfg.replicas, 5);
    let expected: Vec<f64> = (0..=10).map(|n| f64::from(n).exp2()).collect();
    assert_eq!(cfg.checkpoint_times(), expected);
}

#[test]
fn negative_dt_is_rejected_by_name() {
    let err = RunConfig::from_pairs(&pairs(&[("model", "gbm"), ("dt", "-0.1")])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("dt") && msg.contains("> 0"), "{msg}");
}

#[test]
fn unknown_keys_list_the_valid_ones() {
    let err = RunConfig::from_pairs(&pairs(&[("model", "gbm"), ("sigmaa", "1")])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("sigmaa") && msg.contains("n_particles"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emitted_configs_parse_back_exactly(
        a in -2.0f64..2.0,
        sigma in 0.0f64..2.0,
        dt in 1e-5f64..0.5,
        steps in 1usize..4000,
        seed in any::<u64>(),
        n in 1usize..5000,
        rho in 0.01f64..1.0,
        x0 in -10.0f64..10.0,
        every in proptest::option::of(1usize..100),
        list in proptest::collection::vec(0.0f64..1.0, 0..4),
    ) {
        let t_max = dt * steps as f64;
        let mut base = pairs(&[("model", "gbm")]);
        base.extend([
            ("a".to_string(), a.to_string()),
            ("sigma".to_string(), sigma.to_string()),
            ("dt".to_string(), dt.to_string()),
            ("t_max".to_string(), t_max.to_string()),
            ("seed".to_string(), seed.to_string()),
            ("n_particles".to_string(), n.to_string()),
            ("tail_fraction".to_string(), rho.to_string()),
            ("x0".to_string(), x0.to_string()),
        ]);
        if let Some(k) = every {
            base.push(("reorth_every".into(), k.to_string()));
        }
        if !list.is_empty() {
            let times: Vec<String> = list.iter().map(|f| ((f * steps as f64).floor().max(1.0) * dt).to_string()).collect();
            base.push(("checkpoints".into(), times.join(",")));
        }
        let Ok(cfg) = RunConfig::from_pairs(&base) else { return Ok(()); };
        let again = RunConfig::from_pairs(&parse_pairs(&cfg.emit()).unwrap()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}

#[test]
fn linear_config_round_trips() {
    let cfg = RunConfig::from_pairs(&pairs(&[
        ("model", "linear"),
        ("A", "0.1,0;0,0"),
        ("B", "-0.5,0;0,0.5"),
        ("C", "0.4,0;0,1"),
        ("x0", "1,-0.5"),
        ("dt", "0.02"),
        ("t_max", "4"),
    ]))
    .unwrap();
    assert_eq!(cfg.model.dim(), 2);
    assert_eq!(RunConfig::from_pairs(&parse_pairs(&cfg.emit()).unwrap()).unwrap(), cfg);
}

#[test]
fn manifest_rerun_is_byte_identical_across_thread_counts() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let out = mvlab(&[
        "lyapunov", "-s", "model=counterexample", "-s", "n_particles=64", "-s", "dt=0.01", "-s", "t_max=8",
        "-s", "checkpoints=dyadic", "-s", "replicas=3", "--seed", "17", "--threads", "1",
        "-o", first.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = first.path().join(MANIFEST_FILE);
    let out = mvlab(&[
        "lyapunov", "--manifest", manifest.to_str().unwrap(), "--threads", "4", "-o", second.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = read_dir(first.path());
    assert!(a.contains_key("exponents.csv"));
    assert_eq!(a, read_dir(second.path()));
}

#[test]
fn manifest_of_another_subcommand_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvlab(&["verify", "-s", "model=gbm", "-o", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let manifest = dir.path().join(MANIFEST_FILE);
    let out = mvlab(&["simulate", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["kind"], "config");
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let out = mvlab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn verify_on_gbm_defaults_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvlab(&["verify", "-s", "model=gbm", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["decomposition", "flow_property", "kappa_ceiling", "thread_determinism"] {
        assert!(stdout.contains(&format!("PASS {name}")), "{stdout}");
    }
    assert!(!dir.path().join("failure.json").exists());
}

#[test]
fn zero_noise_counterexample_csv_hits_the_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvlab(&[
        "counterexample", "-s", "model=counterexample", "-s", "n_lo=8", "-s", "n_hi=11", "--zero-noise",
        "-o", dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("oscillation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,T_n,replica,value,parity"));
    let (mut even, mut odd) = (Vec::new(), Vec::new());
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let v: f64 = f[3].parse().unwrap();
        match f[4] {
            "even" => even.push(v),
            "odd" => odd.push(v),
            p => panic!("parity {p}"),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!((even.len(), odd.len()), (2, 2));
    assert!((mean(&even) - 2.0 / 3.0).abs() <= 0.03);
    assert!((mean(&odd) - 5.0 / 6.0).abs() <= 0.03);
}

#[test]
fn simulate_writes_one_moment_file_per_replica() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_pairs(&pairs(&[
        ("model", "gbm"),
        ("n_particles", "16"),
        ("replicas", "2"),
        ("t_max", "1"),
        ("checkpoints", "0.5,1"),
        ("output_dir", dir.path().to_str().unwrap()),
    ]))
    .unwrap();
    let outcome = execute(SubcommandName::Simulate, &cfg).unwrap();
    assert!(outcome.outputs.contains(&"moments_r1.csv".to_string()));
    let traj = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    // header plus replicas × checkpoints × particles × components
    assert_eq!(traj.lines().count(), 1 + 2 * 2 * 16);
    assert_eq!(outcome.streams[1].first_stream, 1 << 32);
}
