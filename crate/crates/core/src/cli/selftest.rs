//! `qsdlab selftest`: quick consistency checks of the installed build.

use std::f64::consts::TAU;

use crate::error::Result;
use crate::fockspace::{build_quadratures, FockBasis, StateVector};
use crate::master::{master_evolve, DensityMatrix};
use crate::models::{build_duffing_quantum, DuffingParams};
use crate::movingbasis::{MqsdConfig, MqsdModel, MqsdPropagator};
use crate::trajectory::{run_ensemble, run_propagator, wiener_increment, NoiseStream, Propagator, QsdPropagator};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Sample moments of complex Wiener increments against `E|dξ|² = dt`,
/// `E dξ = 0` and `E dξ² = 0`.
pub fn check_noise_statistics() -> Result<Check> {
    let (n, dt) = (40_000usize, 0.01);
    let mut ns = NoiseStream::new(0x5eed);
    let (mut mean, mut abs2, mut sq) = (crate::fockspace::C64::new(0.0, 0.0), 0.0, crate::fockspace::C64::new(0.0, 0.0));
    for _ in 0..n {
        let d = wiener_increment(&mut ns, dt)?;
        mean += d;
        abs2 += d.norm_sqr();
        sq += d * d;
    }
    let nf = n as f64;
    // Standard errors: dξ has E|dξ|² = dt, Var|dξ|² = dt², E|dξ²|² = dt².
    let z_mean = (mean / nf).norm() / (dt / nf).sqrt();
    let z_abs2 = (abs2 / nf - dt).abs() / (dt / nf.sqrt());
    let z_sq = (sq / nf).norm() / (dt / nf.sqrt());
    let passed = z_mean < 5.0 && z_abs2 < 5.0 && z_sq < 5.0;
    Ok(Check {
        name: "noise statistics",
        passed,
        detail: format!("z-scores: mean {z_mean:.2}, |dξ|² {z_abs2:.2}, dξ² {z_sq:.2} (limit 5)"),
    })
}

/// Ensemble means of `Q̂`, `P̂` over quantum trajectories against the
/// Lindblad solution, quarter of a drive period at β = 1.
pub fn check_ensemble_against_master() -> Result<Check> {
    let params = DuffingParams::default();
    let basis = FockBasis::new(24)?;
    let model = build_duffing_quantum(&params, basis)?;
    let (q, p) = build_quadratures(basis)?;
    let psi0 = StateVector::coherent_qp(basis, 1.0, 0.0);
    let dt = TAU / 8000.0;
    let t_end = TAU / 4.0;
    let n_traj = 256;
    let finals = run_ensemble(n_traj, 7, |_, mut ns| {
        let mut prop = QsdPropagator::new(&model, psi0.clone(), 0.0)?;
        run_propagator(&mut prop, t_end, dt, &mut ns, &mut [], u64::MAX)?;
        let m = prop.moments();
        Ok([m.q_mean, m.p_mean])
    })?;
    let rho = master_evolve(&DensityMatrix::from_pure(&psi0), &model, 0.0, t_end, dt)?;
    let exact = [rho.expectation(&q)?.re, rho.expectation(&p)?.re];
    let nf = n_traj as f64;
    let mut z = [0.0; 2];
    for k in 0..2 {
        let mean = finals.iter().map(|f| f[k]).sum::<f64>() / nf;
        let var = finals.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        z[k] = (mean - exact[k]).abs() / (var / nf).sqrt().max(1e-12);
    }
    Ok(Check {
        name: "ensemble vs master equation",
        passed: z[0] < 5.0 && z[1] < 5.0,
        detail: format!("z-scores: <Q> {:.2}, <P> {:.2} over {n_traj} trajectories (limit 5)", z[0], z[1]),
    })
}

/// Moving-basis and fixed-basis trajectories with the same noise, β = 0.5.
pub fn check_moving_basis_pathwise() -> Result<Check> {
    let params = DuffingParams::new(0.125, 0.3, 0.5)?;
    let (q0, p0) = (1.0 / params.beta, 0.0);
    let dt = TAU / 2000.0;
    let t_end = TAU / 4.0;
    let basis = FockBasis::new(120)?;
    let model = build_duffing_quantum(&params, basis)?;
    let mut fixed = QsdPropagator::new(model, StateVector::coherent_qp(basis, q0, p0), 0.0)?;
    run_propagator(&mut fixed, t_end, dt, &mut NoiseStream::new(11), &mut [], u64::MAX)?;
    let config = MqsdConfig { trunc_tol: 1e-8, ..MqsdConfig::default() };
    let mut moving = MqsdPropagator::coherent(MqsdModel::new(params, config)?, q0, p0, 20, 0.0)?;
    let rec = run_propagator(&mut moving, t_end, dt, &mut NoiseStream::new(11), &mut [], u64::MAX)?;
    let (a, b) = (fixed.moments(), moving.moments());
    let diff = (a.q_mean - b.q_mean).abs().max((a.p_mean - b.p_mean).abs());
    Ok(Check {
        name: "moving basis vs fixed basis",
        passed: diff < 1e-4,
        detail: format!(
            "max |Δ<Q>|, |Δ<P>| = {diff:.2e} (limit 1e-4), moving basis max dim {}",
            rec.max_basis_dim
        ),
    })
}

pub fn run_selftest() -> Result<Vec<Check>> {
    Ok(vec![
        check_noise_statistics()?,
        check_ensemble_against_master()?,
        check_moving_basis_pathwise()?,
    ])
}
