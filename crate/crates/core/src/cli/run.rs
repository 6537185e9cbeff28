//! `qsdlab run`: simulate, write sections and a manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Backend, RunConfig};
use crate::error::{QsdError, Result};
use crate::fockspace::{build_quadratures, FockBasis, MomentSet, StateVector};
use crate::linearized::{LinearizedModel, LinearizedPropagator, LinearizedState, ValiditySummary};
use crate::master::{master_evolve_capped, DensityMatrix};
use crate::models::{build_duffing_quantum, ClassicalState};
use crate::movingbasis::{MqsdConfig, MqsdModel, MqsdPropagator};
use crate::sections::{emit_section, sample_point, SectionHeader, SectionPoint, SectionSampler, SectionSource};
use crate::trajectory::{run_ensemble, run_propagator, NoiseStream, Propagator, QsdPropagator, Sampler};

pub const MANIFEST_FORMAT: &str = "qsd-lab manifest v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLOT_SCRIPT: &str = "plot_sections.py";

/// Per-trajectory statistics stored in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub index: usize,
    pub file: String,
    pub seed: Option<u64>,
    pub steps: u64,
    pub mean_basis_dim: f64,
    pub max_basis_dim: usize,
    pub max_abs_norm_drift: f64,
    pub validity: Option<ValiditySummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryOutput {
    pub points: Vec<SectionPoint>,
    pub stats: TrajectoryStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub code_version: String,
    pub config: RunConfig,
    pub dt: f64,
    pub trajectories: Vec<TrajectoryStats>,
    /// `Some(true)` when any linearized trajectory left the regime where the
    /// closure is trustworthy; `None` for other backends.
    pub validity_breakdown: Option<bool>,
    /// Not covered by the determinism guarantee.
    pub wall_clock_seconds: f64,
}

pub fn section_file_name(backend: Backend, index: usize) -> String {
    format!("section_{}_{index:04}.csv", backend.name())
}

/// The seed written to the section header, `None` for noise-free runs.
pub fn trajectory_seed(cfg: &RunConfig, index: usize) -> Option<u64> {
    let noisy = match cfg.backend {
        Backend::Linearized => cfg.noise,
        b => b.is_stochastic(),
    };
    noisy.then(|| NoiseStream::for_trajectory(cfg.seed, index as u64).seed())
}

/// Runs one trajectory of `cfg` in memory. Failures are wrapped with the
/// trajectory index and the time reached.
pub fn simulate_trajectory(cfg: &RunConfig, index: usize) -> Result<TrajectoryOutput> {
    let params = cfg.params;
    let beta = params.beta;
    let (q0, p0) = (cfg.x0 / beta, cfg.p0 / beta);
    let dt = cfg.dt();
    let t_end = cfg.t_end();
    let mut ns = NoiseStream::for_trajectory(cfg.seed, index as u64);
    let wrap = |t: f64| move |e: QsdError| QsdError::Trajectory { index, t, source: Box::new(e) };

    fn drive<P: Propagator>(
        prop: &mut P,
        t_end: f64,
        dt: f64,
        ns: &mut NoiseStream,
        scale: f64,
    ) -> std::result::Result<(Vec<SectionPoint>, crate::trajectory::TrajectoryRecord), (f64, QsdError)> {
        let mut sampler = SectionSampler::new(scale);
        let rec = {
            let mut samplers: [&mut dyn Sampler; 1] = [&mut sampler];
            run_propagator(prop, t_end, dt, ns, &mut samplers, u64::MAX)
        };
        match rec {
            Ok(rec) => Ok((sampler.into_points(), rec)),
            Err(e) => Err((prop.time(), e)),
        }
    }

    let mut validity = None;
    let result = match cfg.backend {
        Backend::Classical => {
            let mut prop = crate::sections::ClassicalPropagator::new(params, ClassicalState::new(cfg.x0, cfg.p0, 0.0));
            drive(&mut prop, t_end, dt, &mut ns, 1.0)
        }
        Backend::Qsd => {
            let basis = FockBasis::new(cfg.dim).map_err(wrap(0.0))?;
            let model = build_duffing_quantum(&params, basis).map_err(wrap(0.0))?;
            let psi0 = StateVector::coherent_qp(basis, q0, p0);
            let mut prop = QsdPropagator::new(model, psi0, 0.0).map_err(wrap(0.0))?.with_scheme(cfg.scheme);
            drive(&mut prop, t_end, dt, &mut ns, beta)
        }
        Backend::Mqsd => {
            let mcfg = MqsdConfig {
                trunc_tol: cfg.trunc_tol,
                recenter_tol: cfg.recenter_tol,
                min_dim: cfg.min_dim,
                max_dim: cfg.max_dim,
                scheme: cfg.scheme,
            };
            let model = MqsdModel::new(params, mcfg).map_err(wrap(0.0))?;
            let mut prop = MqsdPropagator::coherent(model, q0, p0, cfg.start_dim, 0.0).map_err(wrap(0.0))?;
            drive(&mut prop, t_end, dt, &mut ns, beta)
        }
        Backend::Linearized => {
            let model = LinearizedModel::duffing(params).map_err(wrap(0.0))?;
            let state = LinearizedState::coherent(q0, p0, 0.0);
            let mut prop = LinearizedPropagator::new(model, state, cfg.noise).map_err(wrap(0.0))?;
            let r = drive(&mut prop, t_end, dt, &mut ns, beta);
            validity = Some(prop.validity_summary());
            r
        }
        Backend::Master => return simulate_master(cfg, index),
    };
    let (points, rec) = result.map_err(|(t, e)| wrap(t)(e))?;
    Ok(TrajectoryOutput {
        points,
        stats: TrajectoryStats {
            index,
            file: section_file_name(cfg.backend, index),
            seed: trajectory_seed(cfg, index),
            steps: rec.steps,
            mean_basis_dim: rec.mean_basis_dim,
            max_basis_dim: rec.max_basis_dim,
            max_abs_norm_drift: rec.max_abs_norm_drift,
            validity,
        },
    })
}

/// Ensemble-mean section from the Lindblad equation, one period at a time.
fn simulate_master(cfg: &RunConfig, index: usize) -> Result<TrajectoryOutput> {
    let params = cfg.params;
    let beta = params.beta;
    let wrap = |t: f64| move |e: QsdError| QsdError::Trajectory { index, t, source: Box::new(e) };
    let basis = FockBasis::new(cfg.dim).map_err(wrap(0.0))?;
    let model = build_duffing_quantum(&params, basis).map_err(wrap(0.0))?;
    let (q, p) = build_quadratures(basis).map_err(wrap(0.0))?;
    let mut rho = DensityMatrix::from_pure(&StateVector::coherent_qp(basis, cfg.x0 / beta, cfg.p0 / beta));
    let dt = cfg.dt();
    let moments = |rho: &DensityMatrix, t: f64| -> Result<SectionPoint> {
        let m = MomentSet {
            q_mean: rho.expectation(&q)?.re,
            p_mean: rho.expectation(&p)?.re,
            var_q: 0.0,
            var_p: 0.0,
            sym_cov: 0.0,
        };
        sample_point(SectionSource::Quantum { moments: &m, t }, beta)
    };
    let mut points = vec![moments(&rho, 0.0).map_err(wrap(0.0))?];
    for n in 1..=cfg.periods {
        let t0 = (n - 1) as f64 * std::f64::consts::TAU;
        let t1 = n as f64 * std::f64::consts::TAU;
        rho = master_evolve_capped(&rho, &model, t0, t1, dt, cfg.master_max_dim).map_err(wrap(t0))?;
        points.push(moments(&rho, t1).map_err(wrap(t1))?);
    }
    Ok(TrajectoryOutput {
        points,
        stats: TrajectoryStats {
            index,
            file: section_file_name(cfg.backend, index),
            seed: None,
            steps: cfg.periods * cfg.steps_per_period,
            mean_basis_dim: cfg.dim as f64,
            max_basis_dim: cfg.dim,
            max_abs_norm_drift: 0.0,
            validity: None,
        },
    })
}

/// Worker count from `QSDLAB_THREADS` (unset means rayon's default).
pub fn thread_count_from_env() -> Result<Option<usize>> {
    match std::env::var("QSDLAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(QsdError::Config(format!(
                "QSDLAB_THREADS must be a positive integer, found `{v}`"
            ))),
        },
    }
}

/// Runs every trajectory of `cfg` on at most `threads` workers.
pub fn simulate(cfg: &RunConfig, threads: Option<usize>) -> Result<Vec<TrajectoryOutput>> {
    let deterministic = matches!(cfg.backend, Backend::Classical | Backend::Master)
        || (cfg.backend == Backend::Linearized && !cfg.noise);
    if deterministic && cfg.n_trajectories > 1 {
        return Err(QsdError::Config(format!(
            "backend `{}` is deterministic here; set n_trajectories = 1",
            cfg.backend.name()
        )));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| QsdError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_ensemble(cfg.n_trajectories, cfg.seed, |i, _| simulate_trajectory(cfg, i)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

const PLOT_SOURCE: &str = r#"#!/usr/bin/env python3
"""Scatter every section CSV in this directory."""
import glob
import os

import matplotlib.pyplot as plt
import numpy as np

here = os.path.dirname(os.path.abspath(__file__))
fig, ax = plt.subplots(figsize=(6, 5))
for path in sorted(glob.glob(os.path.join(here, "section_*.csv"))):
    data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    ax.scatter(data[:, 1], data[:, 2], s=2, label=os.path.basename(path))
ax.set_xlabel("x")
ax.set_ylabel("p")
if len(ax.collections) <= 8:
    ax.legend(fontsize="small", markerscale=4)
fig.tight_layout()
fig.savefig(os.path.join(here, "sections.png"), dpi=150)
"#;

/// Runs `cfg`, writes one CSV per trajectory, a plot script and the manifest.
pub fn run(cfg: &RunConfig, threads: Option<usize>) -> Result<Manifest> {
    let start = Instant::now();
    let outputs = simulate(cfg, threads)?;
    fs::create_dir_all(&cfg.output_dir)?;
    for out in &outputs {
        let header = SectionHeader::new(cfg.backend.name(), &cfg.params, out.stats.seed);
        let mut buf = Vec::new();
        emit_section(&out.points, &header, &mut buf)?;
        write_atomic(&cfg.output_dir.join(&out.stats.file), &buf)?;
    }
    write_atomic(&cfg.output_dir.join(PLOT_SCRIPT), PLOT_SOURCE.as_bytes())?;

    let trajectories: Vec<TrajectoryStats> = outputs.into_iter().map(|o| o.stats).collect();
    let validity_breakdown = (cfg.backend == Backend::Linearized)
        .then(|| trajectories.iter().any(|s| s.validity.is_some_and(|v| v.breakdown)));
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        dt: cfg.dt(),
        trajectories,
        validity_breakdown,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| QsdError::Config(format!("cannot serialize manifest: {e}")))?;
    write_atomic(&cfg.output_dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    Ok(manifest)
}
