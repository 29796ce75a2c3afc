//! Run configuration: line-oriented `key = value` files with `#` comments,
//! overridden by command-line pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::counterexample::{build_mean_flow, shifted_mean_flow, MeanFlow};
use crate::error::{Error, Result};
use crate::model::{make_counterexample_model, make_gbm_model, make_linear_meanfield_model, Model};
use crate::noise::{dyadic_times, TimeGrid};
use crate::particle::StoragePolicy;
use crate::variational::{Reorth, DEFAULT_N2_CAP};

/// Environment variable supplying the default output directory.
pub const OUTPUT_DIR_ENV: &str = "MVLAB_OUTPUT_DIR";

pub const VALID_KEYS: &[&str] = &[
    "model",
    "a",
    "sigma",
    "A",
    "B",
    "C",
    "n_max",
    "x0",
    "n_particles",
    "dt",
    "t_max",
    "checkpoints",
    "replicas",
    "seed",
    "tail_fraction",
    "output_dir",
    "storage_policy",
    "reorth_every",
    "zero_noise",
    "n_lo",
    "n_hi",
    "threads",
    "n2_cap",
    "jacobians",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum ModelConfig {
    Gbm { a: f64, sigma: f64 },
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<Vec<f64>>> },
    Counterexample { n_max: usize },
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Gbm { .. } => "gbm",
            ModelConfig::Linear { .. } => "linear",
            ModelConfig::Counterexample { .. } => "counterexample",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::Linear { a, .. } => a.len(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoints {
    Dyadic,
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub x0: Vec<f64>,
    pub n_particles: usize,
    pub dt: f64,
    pub t_max: f64,
    pub checkpoints: Checkpoints,
    pub replicas: usize,
    pub seed: u64,
    pub tail_fraction: f64,
    pub output_dir: PathBuf,
    pub storage_policy: StoragePolicy,
    /// `None` for the adaptive schedule.
    pub reorth_every: Option<usize>,
    pub zero_noise: bool,
    pub n_lo: usize,
    pub n_hi: usize,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub n2_cap: usize,
    pub jacobians: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("malformed number `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse_num(key, s)).collect()
}

/// Rows separated by `;`, entries by `,`.
fn parse_matrix(key: &str, v: &str) -> Result<Vec<Vec<f64>>> {
    v.split(';').map(|row| parse_list(key, row)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("expected true or false, got `{other}`"))),
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_matrix(m: &[Vec<f64>]) -> String {
    m.iter().map(|r| fmt_list(r)).collect::<Vec<_>>().join(";")
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config("<file>", format!("line {}: expected `key = value`", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` flag.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::config(s, "expected KEY=VALUE"))
}

/// Builds a validated config from an optional file and overriding pairs.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = match path {
        Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    pairs.extend(overrides.iter().cloned());
    RunConfig::from_pairs(&pairs)
}

impl RunConfig {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !VALID_KEYS.contains(&k.as_str()) {
                return Err(Error::config(
                    k,
                    format!("unknown key; valid keys: {}", VALID_KEYS.join(", ")),
                ));
            }
            map.insert(k, v);
        }
        let get = |k: &str| map.get(k).copied();
        let model_name = get("model").ok_or_else(|| Error::config("model", "missing required key"))?;
        let foreign: &[&str] = match model_name {
            "gbm" => &["A", "B", "C", "n_max"],
            "linear" => &["a", "sigma", "n_max"],
            "counterexample" => &["a", "sigma", "A", "B", "C"],
            other => {
                return Err(Error::config(
                    "model",
                    format!("unknown model `{other}`; expected gbm, linear or counterexample"),
                ))
            }
        };
        if let Some(k) = foreign.iter().find(|k| map.contains_key(*k)) {
            return Err(Error::config(*k, format!("not a parameter of model `{model_name}`")));
        }
        let model = match model_name {
            "gbm" => ModelConfig::Gbm {
                a: get("a").map_or(Ok(0.1), |v| parse_num("a", v))?,
                sigma: get("sigma").map_or(Ok(0.4), |v| parse_num("sigma", v))?,
            },
            "linear" => {
                let a = parse_matrix("A", get("A").ok_or_else(|| Error::config("A", "missing required key"))?)?;
                let d = a.len();
                let zeros = vec![vec![0.0; d]; d];
                let b = get("B").map_or(Ok(zeros), |v| parse_matrix("B", v))?;
                let c = match get("C") {
                    Some(v) if !v.trim().is_empty() => {
                        v.split('|').map(|m| parse_matrix("C", m)).collect::<Result<_>>()?
                    }
                    _ => Vec::new(),
                };
                ModelConfig::Linear { a, b, c }
            }
            _ => ModelConfig::Counterexample {
                n_max: get("n_max").map_or(Ok(12), |v| parse_num("n_max", v))?,
            },
        };
        let counterexample = matches!(model, ModelConfig::Counterexample { .. });
        let d = model.dim();
        let cfg = RunConfig {
            x0: get("x0").map_or(Ok(vec![1.0; d]), |v| parse_list("x0", v))?,
            n_particles: get("n_particles").map_or(Ok(1), |v| parse_num("n_particles", v))?,
            dt: get("dt").map_or(Ok(if counterexample { 1e-3 } else { 0.01 }), |v| parse_num("dt", v))?,
            t_max: get("t_max").map_or(Ok(64.0), |v| parse_num("t_max", v))?,
            checkpoints: match get("checkpoints") {
                None | Some("dyadic") => Checkpoints::Dyadic,
                Some(v) => Checkpoints::List(parse_list("checkpoints", v)?),
            },
            replicas: get("replicas").map_or(Ok(1), |v| parse_num("replicas", v))?,
            seed: get("seed").map_or(Ok(0), |v| parse_num("seed", v))?,
            tail_fraction: get("tail_fraction").map_or(Ok(0.25), |v| parse_num("tail_fraction", v))?,
            output_dir: get("output_dir").map(PathBuf::from).unwrap_or_else(|| {
                std::env::var_os(OUTPUT_DIR_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("mvlab-out"))
            }),
            storage_policy: get("storage_policy").map_or(Ok(StoragePolicy::Moments), str::parse)?,
            reorth_every: match get("reorth_every") {
                None | Some("adaptive") => None,
                Some(v) => Some(parse_num("reorth_every", v)?),
            },
            zero_noise: get("zero_noise").map_or(Ok(false), |v| parse_bool("zero_noise", v))?,
            n_lo: get("n_lo").map_or(Ok(8), |v| parse_num("n_lo", v))?,
            n_hi: get("n_hi").map_or(Ok(11), |v| parse_num("n_hi", v))?,
            threads: get("threads").map_or(Ok(0), |v| parse_num("threads", v))?,
            n2_cap: get("n2_cap").map_or(Ok(DEFAULT_N2_CAP), |v| parse_num("n2_cap", v))?,
            jacobians: get("jacobians").map_or(Ok(true), |v| parse_bool("jacobians", v))?,
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt", format!("dt = {} violates dt > 0", self.dt)));
        }
        if !(self.t_max >= self.dt) || !self.t_max.is_finite() {
            return Err(Error::config("t_max", "t_max must be >= dt"));
        }
        if self.replicas == 0 {
            return Err(Error::config("replicas", "replicas must be >= 1"));
        }
        if self.n_particles == 0 {
            return Err(Error::config("n_particles", "n_particles must be >= 1"));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::config("tail_fraction", "need 0 < tail_fraction <= 1"));
        }
        if self.reorth_every == Some(0) {
            return Err(Error::config("reorth_every", "must be >= 1 or `adaptive`"));
        }
        if self.x0.len() != self.model.dim() {
            return Err(Error::config(
                "x0",
                format!("x0 has {} entries, model dimension is {}", self.x0.len(), self.model.dim()),
            ));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("x0", "x0 must be finite"));
        }
        if let ModelConfig::Counterexample { n_max } = self.model {
            if self.x0[0] <= 0.5 {
                return Err(Error::config("x0", "the staircase construction needs x0 > 1/2"));
            }
            if !(2..=crate::counterexample::MAX_BREAKPOINT_INDEX).contains(&n_max) {
                return Err(Error::config("n_max", "need 2 <= n_max <= 60"));
            }
            if self.n_lo < 2 || self.n_lo >= self.n_hi || self.n_hi > n_max {
                return Err(Error::config("n_hi", format!("need 2 <= n_lo < n_hi <= n_max = {n_max}")));
            }
        }
        self.grid()?;
        self.build_model()?;
        Ok(())
    }

    pub fn checkpoint_times(&self) -> Vec<f64> {
        match &self.checkpoints {
            Checkpoints::Dyadic => dyadic_times(self.t_max),
            Checkpoints::List(v) => v.clone(),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_horizon(self.dt, self.t_max, &self.checkpoint_times())
    }

    pub fn reorth(&self) -> Reorth {
        self.reorth_every.map_or(Reorth::Adaptive, Reorth::Every)
    }

    /// The staircase mean flow started at `x0` (counterexample model only).
    pub fn mean_flow(&self) -> Result<Option<MeanFlow>> {
        match self.model {
            ModelConfig::Counterexample { n_max } => Ok(Some(if self.x0[0] == 1.0 {
                build_mean_flow(n_max)?
            } else {
                shifted_mean_flow(self.x0[0], n_max)?
            })),
            _ => Ok(None),
        }
    }

    pub fn build_model(&self) -> Result<Box<dyn Model>> {
        Ok(match &self.model {
            ModelConfig::Gbm { a, sigma } => Box::new(make_gbm_model(*a, *sigma)?),
            ModelConfig::Linear { a, b, c } => Box::new(make_linear_meanfield_model(a, b, c)?),
            ModelConfig::Counterexample { n_max } => {
                Box::new(make_counterexample_model(Arc::new(build_mean_flow(*n_max)?)))
            }
        })
    }

    /// Every key with its resolved value; parsing the result gives back
    /// this config.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model", self.model.name().into());
        match &self.model {
            ModelConfig::Gbm { a, sigma } => {
                put("a", a.to_string());
                put("sigma", sigma.to_string());
            }
            ModelConfig::Linear { a, b, c } => {
                put("A", fmt_matrix(a));
                put("B", fmt_matrix(b));
                put("C", c.iter().map(|m| fmt_matrix(m)).collect::<Vec<_>>().join(" | "));
            }
            ModelConfig::Counterexample { n_max } => put("n_max", n_max.to_string()),
        }
        put("x0", fmt_list(&self.x0));
        put("n_particles", self.n_particles.to_string());
        put("dt", self.dt.to_string());
        put("t_max", self.t_max.to_string());
        put(
            "checkpoints",
            match &self.checkpoints {
                Checkpoints::Dyadic => "dyadic".into(),
                Checkpoints::List(v) => fmt_list(v),
            },
        );
        put("replicas", self.replicas.to_string());
        put("seed", self.seed.to_string());
        put("tail_fraction", self.tail_fraction.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("storage_policy", self.storage_policy.to_string());
        put(
            "reorth_every",
            self.reorth_every.map_or("adaptive".into(), |k| k.to_string()),
        );
        put("zero_noise", self.zero_noise.to_string());
        put("n_lo", self.n_lo.to_string());
        put("n_hi", self.n_hi.to_string());
        put("threads", self.threads.to_string());
        put("n2_cap", self.n2_cap.to_string());
        put("jacobians", self.jacobians.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_only() {
        let cfg = RunConfig::from_pairs(&pairs(&[("model", "gbm"), ("dt", "0.5"), ("t_max", "4"), ("output_dir", "x")])).unwrap();
        assert_eq!(cfg.dt, 0.5);
        assert_eq!(cfg.grid().unwrap().n_steps, 8);
        assert_eq!(cfg.model, ModelConfig::Gbm { a: 0.1, sigma: 0.4 });
    }

    #[test]
    fn negative_dt_names_key() {
        let err = RunConfig::from_pairs(&pairs(&[("model", "gbm"), ("dt", "-0.1")])).unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "dt");
                assert!(message.contains("dt > 0"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dyadic_counterexample_checkpoints() {
        let cfg = RunConfig::from_pairs(&pairs(&[
            ("model", "counterexample"),
            ("t_max", "1024"),
            ("checkpoints", "dyadic"),
        ]))
        .unwrap();
        let expect: Vec<f64> = (0..=10).map(|n| (n as f64).exp2()).collect();
        assert_eq!(cfg.checkpoint_times(), expect);
    }

    #[test]
    fn unknown_and_missing_keys() {
        let err = RunConfig::from_pairs(&pairs(&[("model", "gbm"), ("bogus", "1")])).unwrap_err();
        assert!(err.to_string().contains("n_particles"));
        assert!(matches!(RunConfig::from_pairs(&[]), Err(Error::Config { key, .. }) if key == "model"));
        assert!(RunConfig::from_pairs(&pairs(&[("model", "gbm"), ("seed", "x1")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("model", "gbm"), ("A", "1")])).is_err());
    }

    #[test]
    fn file_parsing_and_overrides() {
        let text = "# comment\nmodel = linear\nA = 0.1,0;0,0  # drift\nB = -0.5,0;0,0.5\nC = 0.4,0;0,1\n\nseed = 3\n";
        let mut p = parse_pairs(text).unwrap();
        p.push(("seed".into(), "9".into()));
        let cfg = RunConfig::from_pairs(&p).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.x0, vec![1.0, 1.0]);
        assert!(parse_pairs("no equals sign").is_err());
    }

    #[test]
    fn emit_round_trip() {
        for list in [
            pairs(&[("model", "gbm"), ("a", "0.30000000000000004"), ("checkpoints", "0.5,1,2.25"), ("t_max", "3")]),
            pairs(&[("model", "linear"), ("A", "0.1,0;0,0"), ("B", "-0.5,0;0,0.5"), ("C", "0.4,0;0,1 | 0,0;0,0.1"), ("reorth_every", "7")]),
            pairs(&[("model", "counterexample"), ("zero_noise", "true"), ("x0", "2"), ("output_dir", "out dir")]),
        ] {
            let cfg = RunConfig::from_pairs(&list).unwrap();
            let again = RunConfig::from_pairs(&parse_pairs(&cfg.emit()).unwrap()).unwrap();
            assert_eq!(cfg, again);
        }
    }
}
