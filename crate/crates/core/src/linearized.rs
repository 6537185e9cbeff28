//! Gaussian moment closure of the QSD equation: five coupled stochastic ODEs
//! for `⟨Q̂⟩, ⟨P̂⟩, ⟨ΔQ̂²⟩, ⟨ΔP̂²⟩, ⟨ΔQ̂ΔP̂+ΔP̂ΔQ̂⟩`.
//!
//! With `C = sym_cov/2`, `κ = √(2Γ)` and `L̂ = κ(Q̂ + iP̂)`:
//!
//! ```text
//! dq   = [p + 2(λ−Γ)q] dt + 2 Re[κ(V_q − ½ + iC) dξ]
//! dp   = [−V′(q) − 2(λ+Γ)p] dt + 2 Re[κ(C + i(V_p − ½)) dξ]
//! dV_q = [2C + 4(λ−Γ)V_q + 2Γ − 4Γ((V_q − ½)² + C²)] dt
//! dV_p = [−2C V″(q) − 4(λ+Γ)V_p + 2Γ − 4Γ(C² + (V_p − ½)²)] dt
//! dC   = [V_p − V_q V″(q) − 4ΓC − 4ΓC(V_q + V_p − 1)] dt
//! ```
//!
//! The derivation is worked through in the guide's chapter on the
//! linearized equations; the variances carry no noise at this order.

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::fockspace::MomentSet;
use crate::models::DuffingParams;
use crate::trajectory::{wiener_increment, NoiseStream, Propagator, StepInfo};

/// Closure-error ratios above this value mark the linearization as
/// untrustworthy.
pub const VALIDITY_THRESHOLD: f64 = 0.05;

const VALIDITY_EPS: f64 = 1e-12;

/// A potential `V(q, t)` with the derivatives the closure needs.
pub trait Potential {
    fn d1(&self, q: f64, t: f64) -> f64;
    fn d2(&self, q: f64) -> f64;
    fn d3(&self, q: f64) -> f64;
    fn d4(&self, q: f64) -> f64;
}

impl Potential for DuffingParams {
    fn d1(&self, q: f64, t: f64) -> f64 {
        self.potential_d1(q, t)
    }
    fn d2(&self, q: f64) -> f64 {
        self.potential_d2(q)
    }
    fn d3(&self, q: f64) -> f64 {
        self.potential_d3(q)
    }
    fn d4(&self, _q: f64) -> f64 {
        self.potential_d4()
    }
}

/// `V(q) = ω²q²/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarmonicPotential {
    pub omega2: f64,
}

impl Potential for HarmonicPotential {
    fn d1(&self, q: f64, _t: f64) -> f64 {
        self.omega2 * q
    }
    fn d2(&self, _q: f64) -> f64 {
        self.omega2
    }
    fn d3(&self, _q: f64) -> f64 {
        0.0
    }
    fn d4(&self, _q: f64) -> f64 {
        0.0
    }
}

/// Potential plus the damping rate `Γ` and ansatz coefficient `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearizedModel<V> {
    pub potential: V,
    pub gamma: f64,
    pub ansatz_coeff: f64,
}

impl LinearizedModel<DuffingParams> {
    pub fn duffing(params: DuffingParams) -> Result<Self> {
        params.validate()?;
        Ok(LinearizedModel {
            potential: params,
            gamma: params.gamma,
            ansatz_coeff: params.ansatz_coeff,
        })
    }
}

impl LinearizedModel<HarmonicPotential> {
    /// Damped harmonic oscillator `V = Q²/2` with the given `Γ` and `λ`.
    pub fn harmonic(gamma: f64, ansatz_coeff: f64) -> Self {
        LinearizedModel {
            potential: HarmonicPotential { omega2: 1.0 },
            gamma,
            ansatz_coeff,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizedState {
    pub m: MomentSet,
    pub t: f64,
}

impl LinearizedState {
    pub fn new(m: MomentSet, t: f64) -> Result<Self> {
        let s = LinearizedState { m, t };
        s.check()?;
        Ok(s)
    }

    /// Coherent-state moments at `(q, p)`.
    pub fn coherent(q: f64, p: f64, t: f64) -> Self {
        LinearizedState {
            m: MomentSet::coherent(q, p),
            t,
        }
    }

    fn check(&self) -> Result<()> {
        let m = &self.m;
        let finite = [m.q_mean, m.p_mean, m.var_q, m.var_p, m.sym_cov, self.t]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(QsdError::ClosureBreakdown {
                t: self.t,
                what: "non-finite moments".into(),
            });
        }
        if m.var_q <= 0.0 || m.var_p <= 0.0 {
            return Err(QsdError::ClosureBreakdown {
                t: self.t,
                what: format!("non-positive variance (var_q = {}, var_p = {})", m.var_q, m.var_p),
            });
        }
        Ok(())
    }
}

/// Deterministic drift of the five moments.
pub fn moment_drift<V: Potential>(s: &LinearizedState, model: &LinearizedModel<V>) -> MomentSet {
    let MomentSet {
        q_mean: q,
        p_mean: p,
        var_q: vq,
        var_p: vp,
        sym_cov,
    } = s.m;
    let c = 0.5 * sym_cov;
    let (g, lam) = (model.gamma, model.ansatz_coeff);
    let v1 = model.potential.d1(q, s.t);
    let v2 = model.potential.d2(q);
    let dvq = 2.0 * c + 4.0 * (lam - g) * vq + 2.0 * g - 4.0 * g * ((vq - 0.5).powi(2) + c * c);
    let dvp = -2.0 * c * v2 - 4.0 * (lam + g) * vp + 2.0 * g - 4.0 * g * (c * c + (vp - 0.5).powi(2));
    let dc = vp - vq * v2 - 4.0 * g * c - 4.0 * g * c * (vq + vp - 1.0);
    MomentSet {
        q_mean: p + 2.0 * (lam - g) * q,
        p_mean: -v1 - 2.0 * (lam + g) * p,
        var_q: dvq,
        var_p: dvp,
        sym_cov: 2.0 * dc,
    }
}

/// One Euler–Maruyama step. `dxi` is the step's complex Wiener increment;
/// pass zero to switch the noise off.
pub fn linearized_step_with<V: Potential>(
    s: &LinearizedState,
    model: &LinearizedModel<V>,
    dt: f64,
    dxi: num_complex::Complex64,
) -> Result<LinearizedState> {
    if !(dt > 0.0) {
        return Err(QsdError::param("dt", "must be > 0"));
    }
    let d = moment_drift(s, model);
    let m = s.m;
    let kappa = (2.0 * model.gamma).sqrt();
    let c = 0.5 * m.sym_cov;
    let noise_q = 2.0 * (kappa * num_complex::Complex64::new(m.var_q - 0.5, c) * dxi).re;
    let noise_p = 2.0 * (kappa * num_complex::Complex64::new(c, m.var_p - 0.5) * dxi).re;
    let out = LinearizedState {
        m: MomentSet {
            q_mean: m.q_mean + d.q_mean * dt + noise_q,
            p_mean: m.p_mean + d.p_mean * dt + noise_p,
            var_q: m.var_q + d.var_q * dt,
            var_p: m.var_p + d.var_p * dt,
            sym_cov: m.sym_cov + d.sym_cov * dt,
        },
        t: s.t + dt,
    };
    out.check()?;
    Ok(out)
}

/// One step drawing its increment from `ns`. The stream is advanced exactly
/// as a fixed-basis QSD step with one Lindblad operator would advance it,
/// also when `noise` is false, so runs with a common seed stay aligned.
pub fn linearized_step<V: Potential>(
    s: &LinearizedState,
    model: &LinearizedModel<V>,
    dt: f64,
    ns: &mut NoiseStream,
    noise: bool,
) -> Result<LinearizedState> {
    let dxi = wiener_increment(ns, dt)?;
    let dxi = if noise { dxi } else { num_complex::Complex64::new(0.0, 0.0) };
    linearized_step_with(s, model, dt, dxi)
}

/// Relative closure errors under the Gaussian assumption:
///
/// ```text
/// r₁ = |½ V_q V‴(q)|  / (|V′(q)| + ε)       ⟨V′(Q̂)⟩ ≈ V′(q)
/// r₂ = |½ V_q² V⁗|    / (|V_q V″(q)| + ε)   ⟨Q̂V′⟩ − q⟨V′⟩ ≈ V_q V″(q)
/// r₃ = |½ V⁗ V_q|     / (|V″(q)| + ε)       ⟨P̂V′ + V′P̂⟩ closure
/// ```
///
/// each the first neglected term of the Gaussian expansion over the kept one.
pub fn validity_monitor<V: Potential>(s: &LinearizedState, potential: &V) -> [f64; 3] {
    let q = s.m.q_mean;
    let vq = s.m.var_q;
    let (v1, v2, v3, v4) = (
        potential.d1(q, s.t),
        potential.d2(q),
        potential.d3(q),
        potential.d4(q),
    );
    [
        (0.5 * vq * v3).abs() / (v1.abs() + VALIDITY_EPS),
        (0.5 * vq * vq * v4).abs() / ((vq * v2).abs() + VALIDITY_EPS),
        (0.5 * v4 * vq).abs() / (v2.abs() + VALIDITY_EPS),
    ]
}

/// Median of each closure-error ratio over a run, and whether the run is
/// flagged as having left the linearized regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValiditySummary {
    pub median: [f64; 3],
    pub max: [f64; 3],
    pub samples: usize,
    pub breakdown: bool,
}

impl ValiditySummary {
    /// A run is flagged when the median of any ratio exceeds
    /// [`VALIDITY_THRESHOLD`]. The median ignores the isolated spikes that
    /// occur whenever `V′(q)` or `V″(q)` passes through zero.
    pub fn from_samples(samples: &[[f64; 3]]) -> Self {
        let mut median = [0.0; 3];
        let mut max = [0.0; 3];
        for k in 0..3 {
            let mut v: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            max[k] = v.iter().cloned().fold(0.0, f64::max);
            if !v.is_empty() {
                v.sort_by(f64::total_cmp);
                let n = v.len();
                median[k] = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            }
        }
        ValiditySummary {
            median,
            max,
            samples: samples.len(),
            breakdown: median.iter().any(|&r| r > VALIDITY_THRESHOLD),
        }
    }
}

/// [`Propagator`] for the closure equations. Moments are reported in
/// unscaled units, like the quantum propagators.
pub struct LinearizedPropagator<V> {
    model: LinearizedModel<V>,
    state: LinearizedState,
    noise: bool,
    validity: Vec<[f64; 3]>,
}

impl<V: Potential> LinearizedPropagator<V> {
    pub fn new(model: LinearizedModel<V>, state: LinearizedState, noise: bool) -> Result<Self> {
        state.check()?;
        let v0 = validity_monitor(&state, &model.potential);
        Ok(LinearizedPropagator {
            model,
            state,
            noise,
            validity: vec![v0],
        })
    }

    pub fn state(&self) -> &LinearizedState {
        &self.state
    }

    /// Closure-error ratios after every step so far (and at the start).
    pub fn validity_samples(&self) -> &[[f64; 3]] {
        &self.validity
    }

    pub fn validity_summary(&self) -> ValiditySummary {
        ValiditySummary::from_samples(&self.validity)
    }
}

impl<V: Potential> Propagator for LinearizedPropagator<V> {
    fn time(&self) -> f64 {
        self.state.t
    }

    fn step(&mut self, dt: f64, ns: &mut NoiseStream) -> Result<StepInfo> {
        self.state = linearized_step(&self.state, &self.model, dt, ns, self.noise)?;
        self.validity.push(validity_monitor(&self.state, &self.model.potential));
        Ok(StepInfo::default())
    }

    fn moments(&self) -> MomentSet {
        self.state.m
    }

    fn basis_dim(&self) -> usize {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::run_propagator;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    #[test]
    fn closed_harmonic_moments_rotate_and_conserve_spread() {
        let model = LinearizedModel::harmonic(0.0, 0.0);
        let mut s = LinearizedState::new(
            MomentSet {
                q_mean: 1.0,
                p_mean: 0.0,
                var_q: 0.8,
                var_p: 0.4,
                sym_cov: 0.2,
            },
            0.0,
        )
        .unwrap();
        let dt = 1e-4;
        let n = (TAU / dt).round() as usize;
        let spread0 = s.m.var_q + s.m.var_p;
        let mut ns = NoiseStream::new(0);
        for k in 1..=n {
            s = linearized_step(&s, &model, dt, &mut ns, false).unwrap();
            if k == n / 4 {
                assert_abs_diff_eq!(s.m.q_mean, 0.0, epsilon = 2e-3);
                assert_abs_diff_eq!(s.m.p_mean, -1.0, epsilon = 2e-3);
            }
        }
        assert_abs_diff_eq!(s.m.var_q + s.m.var_p, spread0, epsilon = 1e-6);
    }

    #[test]
    fn uncertainty_floor_holds_in_the_damped_oscillator() {
        let g: f64 = 0.125;
        let model = LinearizedModel::harmonic(g, g.sqrt());
        let mut s = LinearizedState::coherent(2.0, -1.0, 0.0);
        let mut ns = NoiseStream::new(4);
        // The pure-state manifold is invariant under the exact flow; the
        // Euler scheme leaves it at O(dt), about 0.2·dt at the worst point.
        for _ in 0..2_000_000 {
            s = linearized_step(&s, &model, 1e-6, &mut ns, true).unwrap();
            assert!(s.m.uncertainty_product() >= 0.25 - 1e-6, "{:?}", s.m);
        }
    }

    #[test]
    fn harmonic_potential_is_always_valid() {
        let s = LinearizedState::coherent(1.3, 0.2, 0.0);
        assert_eq!(validity_monitor(&s, &HarmonicPotential { omega2: 1.0 }), [0.0; 3]);
    }

    #[test]
    fn validity_separates_quantum_and_classical_scales() {
        let quantum = DuffingParams::new(0.125, 0.3, 1.0).unwrap();
        let r = validity_monitor(&LinearizedState::coherent(1.0, 0.0, 0.0), &quantum);
        assert!(r.iter().cloned().fold(0.0, f64::max) > VALIDITY_THRESHOLD, "{r:?}");
        // V‴(1) = 6, V′(1, 0) = 0.3: r₁ = ½·½·6/0.3 = 5
        assert_abs_diff_eq!(r[0], 5.0, epsilon = 1e-9);

        let beta = 0.01;
        let classical = DuffingParams::new(0.125, 0.3, beta).unwrap();
        let r = validity_monitor(&LinearizedState::coherent(1.0 / beta, 0.0, 0.0), &classical);
        assert!(r.iter().all(|&x| x < 1e-2), "{r:?}");
    }

    #[test]
    fn negative_variance_is_a_closure_breakdown() {
        let model = LinearizedModel::harmonic(0.125, 0.0);
        let s = LinearizedState::new(
            MomentSet {
                q_mean: 0.0,
                p_mean: 0.0,
                var_q: 1e-6,
                var_p: 100.0,
                sym_cov: -20.0,
            },
            0.0,
        )
        .unwrap();
        assert!(matches!(
            linearized_step_with(&s, &model, 0.1, Default::default()),
            Err(QsdError::ClosureBreakdown { .. })
        ));
    }

    #[test]
    fn noise_off_still_advances_the_stream() {
        let model = LinearizedModel::harmonic(0.125, 0.0);
        let s = LinearizedState::coherent(0.0, 0.0, 0.0);
        let mut a = NoiseStream::new(3);
        let mut b = NoiseStream::new(3);
        linearized_step(&s, &model, 0.01, &mut a, false).unwrap();
        wiener_increment(&mut b, 0.01).unwrap();
        assert_eq!(a.word_position(), b.word_position());
    }

    #[test]
    fn propagator_reports_the_state_moments() {
        let model = LinearizedModel::duffing(DuffingParams::new(0.125, 0.3, 0.01).unwrap()).unwrap();
        let mut prop = LinearizedPropagator::new(model, LinearizedState::coherent(100.0, 0.0, 0.0), false).unwrap();
        let rec = run_propagator(&mut prop, 1.0, 0.01, &mut NoiseStream::new(0), &mut [], 10).unwrap();
        assert_eq!(rec.moment_history.last().unwrap(), &prop.state().m);
        assert_eq!(prop.validity_samples().len(), 101);
        assert!(!prop.validity_summary().breakdown);
    }
}
