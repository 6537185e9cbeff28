//! Flat `key = value` run configuration.

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::models::{default_fixed_dim, DuffingParams, DEFAULT_MOVING_DIM};
use crate::trajectory::StepScheme;

/// Default drive-period resolution: `dt = 2π/6283 ≈ 1.00003e-3`.
pub const DEFAULT_STEPS_PER_PERIOD: u64 = 6283;

/// Documentation of every key, shown by `qsdlab run --help`.
pub const CONFIG_HELP: &str = "\
Configuration file: one `key = value` per line; `#` starts a comment.

  backend           classical | qsd | mqsd | linearized | master   [mqsd]
  gamma             damping rate Γ                                  [0.125]
  g                 drive amplitude                                 [0.3]
  beta              quantum scale β (β → 0 is the classical limit)  [1.0]
  ansatz_coeff      coefficient λ of the (QP+PQ) term               [sqrt(gamma)]
  dim               fixed basis size for qsd and master             [max(96, ceil(10/beta^2)), at most 4096]
  start_dim         initial moving-basis size                       [32]
  min_dim           smallest moving-basis size                      [10]
  max_dim           largest moving-basis size                       [256]
  master_max_dim    basis-size guard of the master backend          [512]
  steps_per_period  time steps per drive period 2π                  [6283]
  dt                time step; must divide 2π (alternative to steps_per_period)
  periods           number of drive periods                         [100]
  n_trajectories    independent trajectories                        [1]
  seed              base seed; trajectory i uses seed XOR i         [0]
  trunc_tol         moving-basis truncation tolerance               [1e-6]
  recenter_tol      moving-basis centering tolerance                [1e-8]
  scheme            exponential | euler                             [exponential]
  noise             linearized backend noise on/off (true | false)  [true]
  x0, p0            initial point in scaled coordinates             [1.0, 0.0]
  output_dir        directory for sections and manifest             [qsdlab-out]

Quantum runs start from the coherent state at (x0/beta, p0/beta).";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Classical,
    Qsd,
    Mqsd,
    Linearized,
    Master,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Classical => "classical",
            Backend::Qsd => "qsd",
            Backend::Mqsd => "mqsd",
            Backend::Linearized => "linearized",
            Backend::Master => "master",
        }
    }

    /// Whether runs draw from noise streams (and so carry a seed).
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Backend::Qsd | Backend::Mqsd | Backend::Linearized)
    }
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "classical" => Backend::Classical,
            "qsd" => Backend::Qsd,
            "mqsd" => Backend::Mqsd,
            "linearized" => Backend::Linearized,
            "master" => Backend::Master,
            _ => return Err("expected classical, qsd, mqsd, linearized or master".into()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: Backend,
    pub params: DuffingParams,
    pub dim: usize,
    pub start_dim: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub master_max_dim: usize,
    pub steps_per_period: u64,
    pub periods: u64,
    pub n_trajectories: usize,
    pub seed: u64,
    pub trunc_tol: f64,
    pub recenter_tol: f64,
    pub scheme: StepScheme,
    pub noise: bool,
    pub x0: f64,
    pub p0: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let params = DuffingParams::default();
        RunConfig {
            backend: Backend::Mqsd,
            params,
            dim: default_fixed_dim(params.beta),
            start_dim: DEFAULT_MOVING_DIM,
            min_dim: 10,
            max_dim: 256,
            master_max_dim: crate::master::ORACLE_MAX_DIM,
            steps_per_period: DEFAULT_STEPS_PER_PERIOD,
            periods: 100,
            n_trajectories: 1,
            seed: 0,
            trunc_tol: 1e-6,
            recenter_tol: 1e-8,
            scheme: StepScheme::default(),
            noise: true,
            x0: 1.0,
            p0: 0.0,
            output_dir: PathBuf::from("qsdlab-out"),
        }
    }
}

impl RunConfig {
    pub fn dt(&self) -> f64 {
        TAU / self.steps_per_period as f64
    }

    pub fn t_end(&self) -> f64 {
        self.periods as f64 * TAU
    }
}

fn line_err(line: usize, msg: impl std::fmt::Display) -> QsdError {
    QsdError::Config(format!("line {line}: {msg}"))
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| line_err(line, format!("`{key}`: cannot parse `{value}` ({e})")))
}

/// Parses a configuration file. Unknown keys, repeated keys, malformed
/// values and invariant violations are reported with their line number.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: std::collections::BTreeMap<String, usize> = Default::default();
    let (mut dim, mut ansatz, mut dt, mut spp) = (None, None, None, None);

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| line_err(line, format!("expected `key = value`, found `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = seen.insert(key.to_string(), line) {
            return Err(line_err(line, format!("`{key}` already set on line {prev}")));
        }
        match key {
            "backend" => cfg.backend = parse_value(line, key, value)?,
            "gamma" => cfg.params.gamma = parse_value(line, key, value)?,
            "g" => cfg.params.g = parse_value(line, key, value)?,
            "beta" => cfg.params.beta = parse_value(line, key, value)?,
            "ansatz_coeff" => ansatz = Some((line, parse_value::<f64>(line, key, value)?)),
            "dim" => dim = Some((line, parse_value::<usize>(line, key, value)?)),
            "start_dim" => cfg.start_dim = parse_value(line, key, value)?,
            "min_dim" => cfg.min_dim = parse_value(line, key, value)?,
            "max_dim" => cfg.max_dim = parse_value(line, key, value)?,
            "master_max_dim" => cfg.master_max_dim = parse_value(line, key, value)?,
            "steps_per_period" => spp = Some((line, parse_value::<u64>(line, key, value)?)),
            "dt" => dt = Some((line, parse_value::<f64>(line, key, value)?)),
            "periods" => cfg.periods = parse_value(line, key, value)?,
            "n_trajectories" => cfg.n_trajectories = parse_value(line, key, value)?,
            "seed" => cfg.seed = parse_value(line, key, value)?,
            "trunc_tol" => cfg.trunc_tol = parse_value(line, key, value)?,
            "recenter_tol" => cfg.recenter_tol = parse_value(line, key, value)?,
            "scheme" => {
                cfg.scheme = value
                    .parse::<StepScheme>()
                    .map_err(|_| line_err(line, format!("`scheme`: expected exponential or euler, found `{value}`")))?
            }
            "noise" => cfg.noise = parse_value(line, key, value)?,
            "x0" => cfg.x0 = parse_value(line, key, value)?,
            "p0" => cfg.p0 = parse_value(line, key, value)?,
            "output_dir" => {
                if value.is_empty() {
                    return Err(line_err(line, "`output_dir` must not be empty"));
                }
                cfg.output_dir = PathBuf::from(value)
            }
            _ => return Err(line_err(line, format!("unknown key `{key}`"))),
        }
    }

    let at = |key: &str| seen.get(key).copied().unwrap_or(0);
    let check = |ok: bool, key: &str, msg: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(line_err(at(key), format!("`{key}` {msg}")))
        }
    };

    check(cfg.params.gamma.is_finite() && cfg.params.gamma >= 0.0, "gamma", "must be finite and ≥ 0")?;
    check(cfg.params.g.is_finite(), "g", "must be finite")?;
    check(cfg.params.beta.is_finite() && cfg.params.beta > 0.0, "beta", "must be finite and > 0")?;
    cfg.params.ansatz_coeff = match ansatz {
        Some((line, v)) => {
            if !v.is_finite() {
                return Err(line_err(line, "`ansatz_coeff` must be finite"));
            }
            v
        }
        None => cfg.params.gamma.sqrt(),
    };
    cfg.params.validate().map_err(|e| line_err(0, e))?;

    cfg.dim = match dim {
        Some((line, d)) if d < 2 => return Err(line_err(line, "`dim` must be at least 2")),
        Some((_, d)) => d,
        None => default_fixed_dim(cfg.params.beta),
    };

    cfg.steps_per_period = match (dt, spp) {
        (Some((line, _)), Some(_)) => {
            return Err(line_err(line, "set either `dt` or `steps_per_period`, not both"))
        }
        (Some((line, dt)), None) => {
            if !(dt > 0.0 && dt < 1.0) {
                return Err(line_err(line, "`dt` must lie in (0, 1)"));
            }
            let r = TAU / dt;
            let n = r.round();
            if (r - n).abs() > 1e-6 * r {
                return Err(line_err(
                    line,
                    format!("`dt` = {dt} does not divide the drive period 2π; try dt = 2π/{n}"),
                ));
            }
            n as u64
        }
        (None, Some((line, n))) => {
            if n < 7 {
                return Err(line_err(line, "`steps_per_period` must be at least 7 (dt < 1)"));
            }
            n
        }
        (None, None) => DEFAULT_STEPS_PER_PERIOD,
    };

    check(cfg.periods >= 1, "periods", "must be ≥ 1")?;
    check(cfg.n_trajectories >= 1, "n_trajectories", "must be ≥ 1")?;
    check(
        cfg.trunc_tol > 0.0 && cfg.trunc_tol <= 1e-2,
        "trunc_tol",
        "must lie in (0, 1e-2]",
    )?;
    check(
        cfg.recenter_tol > 0.0 && cfg.recenter_tol < 1.0,
        "recenter_tol",
        "must lie in (0, 1)",
    )?;
    let floor = crate::movingbasis::GUARD_BAND + 2;
    check(cfg.min_dim >= floor, "min_dim", &format!("must be ≥ {floor}"))?;
    check(cfg.max_dim >= cfg.min_dim, "max_dim", "must be ≥ min_dim")?;
    check(cfg.start_dim >= 2, "start_dim", "must be ≥ 2")?;
    check(cfg.x0.is_finite(), "x0", "must be finite")?;
    check(cfg.p0.is_finite(), "p0", "must be finite")?;
    if cfg.backend == Backend::Master && cfg.dim > cfg.master_max_dim {
        return Err(line_err(
            at("dim"),
            format!(
                "`dim` = {} exceeds `master_max_dim` = {}; raise the guard to run the master backend at this size",
                cfg.dim, cfg.master_max_dim
            ),
        ));
    }
    Ok(cfg)
}
