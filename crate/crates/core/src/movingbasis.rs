//! Moving-basis QSD: the state is stored as amplitudes over the displaced
//! number states `D̂(q,p)|n⟩`, the frame `(q,p)` follows the wave packet, and
//! the truncation adapts to the packet's size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::fockspace::{
    build_quadratures, dot, moments_unchecked, FockBasis, MomentSet, OperatorMatrix, StateVector, C64,
    ZERO,
};
use crate::models::{DisplacedDuffing, DuffingOperators, DuffingParams, DEFAULT_MOVING_DIM};
use crate::trajectory::{
    draw_increments, qsd_step_in_place, NoiseStream, Propagator, QsdWorkspace, StepInfo, StepScheme,
};

/// Largest `|dq|` or `|dp|` a single displacement may apply.
pub const SHIFT_CAP: f64 = 1.0;

/// Number of top levels whose mass decides when the basis must grow. Equal
/// to the half-bandwidth of the Duffing Hamiltonian in a number basis
/// (`Q̂⁴` couples `n` to `n ± 4`), so these are exactly the levels whose
/// couplings the truncation cuts.
pub const GUARD_BAND: usize = 4;

const MAX_RECENTER_ITERS: usize = 32;

/// Origin of the moving frame in phase space (unscaled units).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseFrame {
    pub q: f64,
    pub p: f64,
}

/// A state in the mixed representation `Σ_n c_n D̂(q,p)|n⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingState {
    pub frame: PhaseFrame,
    pub local: StateVector,
}

impl MovingState {
    /// Coherent state at `(q, p)`: local vacuum in a frame centred there.
    pub fn coherent(q: f64, p: f64, basis: FockBasis) -> Self {
        MovingState {
            frame: PhaseFrame { q, p },
            local: StateVector::vacuum(basis),
        }
    }

    pub fn dim(&self) -> usize {
        self.local.dim()
    }

    /// Moments of the local amplitudes, relative to the frame.
    pub fn local_moments(&self) -> Result<MomentSet> {
        let (q, p) = build_quadratures(self.local.basis())?;
        Ok(moments_unchecked(self.local.amplitudes(), &q, &p))
    }

    /// Frame-independent moments: local moments shifted by the frame origin.
    pub fn physical_moments(&self) -> Result<MomentSet> {
        Ok(shift_moments(self.local_moments()?, self.frame))
    }

    /// The state written out in an ordinary Fock basis of dimension `dim`.
    /// Intended for tests and comparisons; the basis must be large enough to
    /// hold the displaced packet.
    pub fn to_fixed_basis(&self, dim: usize) -> Result<StateVector> {
        let b = FockBasis::new(dim.max(self.dim()))?;
        let (q, p) = build_quadratures(b)?;
        let mut amps = self.local.resized(b).into_amplitudes();
        let (fq, fp) = (self.frame.q, self.frame.p);
        let pieces = pieces_for(fq, fp);
        for _ in 0..pieces {
            amps = displace_raw(&q, &p, &amps, fq / pieces as f64, fp / pieces as f64);
        }
        let mut out = StateVector::new(b, amps)?;
        out.fix_global_phase();
        Ok(out)
    }
}

fn shift_moments(mut m: MomentSet, frame: PhaseFrame) -> MomentSet {
    m.q_mean += frame.q;
    m.p_mean += frame.p;
    m
}

fn pieces_for(dq: f64, dp: f64) -> usize {
    (dq.abs().max(dp.abs()) / SHIFT_CAP).ceil().max(1.0) as usize
}

fn displace_raw(q: &OperatorMatrix, p: &OperatorMatrix, amps: &[C64], dq: f64, dp: f64) -> Vec<C64> {
    if dq == 0.0 && dp == 0.0 {
        return amps.to_vec();
    }
    // D̂(dq,dp) = exp(i(dp·Q̂ − dq·P̂))
    let gen = q
        .scale(C64::new(0.0, dp))
        .add_scaled(C64::new(0.0, -dq), p)
        .expect("quadratures share a basis");
    gen.expm_apply(amps)
}

/// `D̂(dq,dp)ψ` for a shift within [`SHIFT_CAP`] in each coordinate. Larger
/// shifts are refused; apply them as a sequence of smaller ones.
pub fn displacement_apply(psi: &StateVector, dq: f64, dp: f64) -> Result<StateVector> {
    psi.check_normalized()?;
    if !dq.is_finite() || !dp.is_finite() {
        return Err(QsdError::param("shift", "must be finite"));
    }
    if dq.abs() > SHIFT_CAP || dp.abs() > SHIFT_CAP {
        return Err(QsdError::ShiftTooLarge { dq, dp, cap: SHIFT_CAP });
    }
    let (q, p) = build_quadratures(psi.basis())?;
    StateVector::new(psi.basis(), displace_raw(&q, &p, psi.amplitudes(), dq, dp))
}

/// Moves the frame onto the packet centre: `frame += ⟨Q̂,P̂⟩_local` and
/// `local ← D̂(−⟨Q̂⟩,−⟨P̂⟩)·local`, repeated until both local means are
/// within `tol`, then fixes the global phase.
pub fn recenter(ms: &MovingState, tol: f64) -> Result<MovingState> {
    let (q, p) = build_quadratures(ms.local.basis())?;
    let mut out = ms.clone();
    recenter_with(&mut out, &q, &p, tol)?;
    Ok(out)
}

fn local_means(amps: &[C64], q: &OperatorMatrix, p: &OperatorMatrix, tmp: &mut [C64]) -> (f64, f64) {
    q.apply_into(amps, tmp);
    let mq = dot(amps, tmp).re;
    p.apply_into(amps, tmp);
    let mp = dot(amps, tmp).re;
    (mq, mp)
}

fn recenter_with(ms: &mut MovingState, q: &OperatorMatrix, p: &OperatorMatrix, tol: f64) -> Result<()> {
    let mut tmp = vec![ZERO; ms.dim()];
    let mut moved = false;
    for _ in 0..MAX_RECENTER_ITERS {
        let (mq, mp) = local_means(ms.local.amplitudes(), q, p, &mut tmp);
        if !mq.is_finite() || !mp.is_finite() {
            return Err(QsdError::DegenerateState);
        }
        if mq.abs() <= tol && mp.abs() <= tol {
            break;
        }
        let pieces = pieces_for(mq, mp);
        let mut amps = ms.local.amplitudes().to_vec();
        for _ in 0..pieces {
            amps = displace_raw(q, p, &amps, -mq / pieces as f64, -mp / pieces as f64);
        }
        ms.local.amplitudes_mut().copy_from_slice(&amps);
        ms.local.normalize_in_place()?;
        ms.frame.q += mq;
        ms.frame.p += mp;
        moved = true;
    }
    if moved {
        ms.local.fix_global_phase();
    }
    Ok(())
}

/// Tolerances and bounds of the moving-basis integrator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MqsdConfig {
    pub trunc_tol: f64,
    pub recenter_tol: f64,
    pub min_dim: usize,
    pub max_dim: usize,
    pub scheme: StepScheme,
}

impl Default for MqsdConfig {
    fn default() -> Self {
        MqsdConfig {
            trunc_tol: 1e-6,
            recenter_tol: 1e-8,
            min_dim: 10,
            max_dim: 256,
            scheme: StepScheme::default(),
        }
    }
}

impl MqsdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trunc_tol > 0.0 && self.trunc_tol <= 1e-2) {
            return Err(QsdError::param("trunc_tol", "must lie in (0, 1e-2]"));
        }
        if !(self.recenter_tol > 0.0 && self.recenter_tol < 1.0) {
            return Err(QsdError::param("recenter_tol", "must lie in (0, 1)"));
        }
        if self.min_dim < GUARD_BAND + 2 {
            return Err(QsdError::param("min_dim", format!("must be at least {}", GUARD_BAND + 2)));
        }
        if self.max_dim < self.min_dim {
            return Err(QsdError::param("max_dim", "must be at least min_dim"));
        }
        Ok(())
    }
}

/// Grows the local basis by zero padding when the top [`GUARD_BAND`] levels
/// hold more than `trunc_tol`, and drops top levels while the dropped block
/// and the guard band that would remain each hold less than `trunc_tol/10`.
/// The dimension stays within `[min_dim, max_dim]`.
pub fn adapt_truncation(ms: &MovingState, trunc_tol: f64, min_dim: usize, max_dim: usize) -> Result<MovingState> {
    if !(trunc_tol > 0.0 && trunc_tol <= 1e-2) {
        return Err(QsdError::param("trunc_tol", "must lie in (0, 1e-2]"));
    }
    let mut out = ms.clone();
    adapt_in_place(&mut out, trunc_tol, min_dim, max_dim)?;
    Ok(out)
}

fn adapt_in_place(ms: &mut MovingState, trunc_tol: f64, min_dim: usize, max_dim: usize) -> Result<bool> {
    let d = ms.dim();
    if d < min_dim {
        ms.local = ms.local.resized(FockBasis::new(min_dim)?);
        return Ok(true);
    }
    if ms.local.tail_mass(GUARD_BAND) > trunc_tol {
        if d >= max_dim {
            return Err(QsdError::TruncationLimit { max: max_dim });
        }
        let new_dim = (d + GUARD_BAND.max(d / 4)).min(max_dim);
        ms.local = ms.local.resized(FockBasis::new(new_dim)?);
        return Ok(true);
    }
    let amps = ms.local.amplitudes();
    let total: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    let mut new_dim = d;
    let mut dropped = 0.0;
    while new_dim > min_dim {
        let top = amps[new_dim - 1].norm_sqr() / total;
        let lo = (new_dim - 1).saturating_sub(GUARD_BAND);
        let guard: f64 = amps[lo..new_dim - 1].iter().map(|a| a.norm_sqr()).sum::<f64>() / total;
        if dropped + top < 0.1 * trunc_tol && guard < 0.1 * trunc_tol {
            dropped += top;
            new_dim -= 1;
        } else {
            break;
        }
    }
    if new_dim == d {
        return Ok(false);
    }
    ms.local = ms.local.resized(FockBasis::new(new_dim)?);
    ms.local.normalize_in_place()?;
    Ok(true)
}

/// The Duffing model as seen by the moving-basis integrator, with operator
/// tables cached per basis size.
#[derive(Clone, Debug)]
pub struct MqsdModel {
    pub params: DuffingParams,
    pub config: MqsdConfig,
    ops: BTreeMap<usize, DuffingOperators>,
}

impl MqsdModel {
    pub fn new(params: DuffingParams, config: MqsdConfig) -> Result<Self> {
        params.validate()?;
        config.validate()?;
        Ok(MqsdModel {
            params,
            config,
            ops: BTreeMap::new(),
        })
    }

    fn ensure_ops(&mut self, dim: usize) -> Result<()> {
        if let std::collections::btree_map::Entry::Vacant(e) = self.ops.entry(dim) {
            e.insert(DuffingOperators::new(FockBasis::new(dim)?)?);
        }
        Ok(())
    }

    pub fn operators(&mut self, dim: usize) -> Result<&DuffingOperators> {
        self.ensure_ops(dim)?;
        Ok(&self.ops[&dim])
    }
}

/// One moving-basis step: a QSD step with the Duffing operators conjugated
/// by the frame shift (`Q̂ → Q̂ + q`, `P̂ → P̂ + p`), then [`recenter`] and
/// [`adapt_truncation`]. Consumes exactly one increment per Lindblad
/// operator, like the fixed-basis step. Returns the pre-renormalization
/// norm drift.
pub fn mqsd_step(
    ms: &mut MovingState,
    model: &mut MqsdModel,
    t: f64,
    dt: f64,
    ns: &mut NoiseStream,
    incs: &mut Vec<C64>,
    ws: &mut QsdWorkspace,
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(QsdError::param("dt", "must be > 0"));
    }
    let cfg = model.config;
    model.ensure_ops(ms.dim())?;
    let ops = &model.ops[&ms.dim()];
    let displaced = DisplacedDuffing::new(ops, model.params, ms.frame.q, ms.frame.p);
    draw_increments(ns, 1, dt, incs)?;
    let drift = qsd_step_in_place(ms.local.amplitudes_mut(), &displaced, t, dt, incs, cfg.scheme, ws)?;
    recenter_with(ms, &ops.q, &ops.p, cfg.recenter_tol)?;
    if adapt_in_place(ms, cfg.trunc_tol, cfg.min_dim, cfg.max_dim)? {
        // Re-centre in the new basis so the invariant holds on exit.
        model.ensure_ops(ms.dim())?;
        let ops = &model.ops[&ms.dim()];
        recenter_with(ms, &ops.q, &ops.p, cfg.recenter_tol)?;
    }
    Ok(drift)
}

/// [`Propagator`] running [`mqsd_step`].
pub struct MqsdPropagator {
    model: MqsdModel,
    state: MovingState,
    t: f64,
    incs: Vec<C64>,
    ws: QsdWorkspace,
}

impl MqsdPropagator {
    /// Starts from the coherent state at physical `(q0, p0)` with a local
    /// basis of `start_dim` levels (clamped into the configured bounds).
    pub fn coherent(model: MqsdModel, q0: f64, p0: f64, start_dim: usize, t0: f64) -> Result<Self> {
        let dim = start_dim.clamp(model.config.min_dim, model.config.max_dim);
        let state = MovingState::coherent(q0, p0, FockBasis::new(dim)?);
        Self::new(model, state, t0)
    }

    pub fn new(model: MqsdModel, state: MovingState, t0: f64) -> Result<Self> {
        state.local.check_normalized()?;
        Ok(MqsdPropagator {
            model,
            state,
            t: t0,
            incs: Vec::new(),
            ws: QsdWorkspace::default(),
        })
    }

    pub fn default_start_dim() -> usize {
        DEFAULT_MOVING_DIM
    }

    pub fn state(&self) -> &MovingState {
        &self.state
    }
}

impl Propagator for MqsdPropagator {
    fn time(&self) -> f64 {
        self.t
    }

    fn step(&mut self, dt: f64, ns: &mut NoiseStream) -> Result<StepInfo> {
        let drift = mqsd_step(
            &mut self.state,
            &mut self.model,
            self.t,
            dt,
            ns,
            &mut self.incs,
            &mut self.ws,
        )?;
        self.t += dt;
        Ok(StepInfo { norm_drift: drift })
    }

    fn moments(&self) -> MomentSet {
        let m = match self.model.ops.get(&self.state.dim()) {
            Some(ops) => moments_unchecked(self.state.local.amplitudes(), &ops.q, &ops.p),
            None => self.state.local_moments().expect("local basis has at least two levels"),
        };
        shift_moments(m, self.state.frame)
    }

    fn basis_dim(&self) -> usize {
        self.state.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fockspace::quadrature_polynomial;
    use crate::models::{build_duffing_quantum, OpenSystem};
    use crate::trajectory::{run_propagator, QsdPropagator};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    fn b(d: usize) -> FockBasis {
        FockBasis::new(d).unwrap()
    }

    #[test]
    fn zero_shift_is_identity() {
        let psi = StateVector::coherent(b(20), C64::new(0.3, -0.7));
        let out = displacement_apply(&psi, 0.0, 0.0).unwrap();
        for (x, y) in psi.amplitudes().iter().zip(out.amplitudes()) {
            assert!((x - y).norm() <= 1e-14);
        }
    }

    #[test]
    fn displaced_vacuum_has_coherent_moments() {
        let out = displacement_apply(&StateVector::vacuum(b(60)), 0.5, -0.2).unwrap();
        let (q, p) = build_quadratures(b(60)).unwrap();
        let m = moments_unchecked(out.amplitudes(), &q, &p);
        assert_abs_diff_eq!(m.q_mean, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(m.p_mean, -0.2, epsilon = 1e-8);
        assert_abs_diff_eq!(m.var_q, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(m.var_p, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(m.sym_cov, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out.norm(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn inverse_shifts_compose_to_identity() {
        let psi = StateVector::coherent(b(40), C64::new(0.4, 0.2));
        let there = displacement_apply(&psi, 0.7, -0.4).unwrap();
        let mut back = displacement_apply(&there, -0.7, 0.4).unwrap();
        let mut orig = psi.clone();
        back.fix_global_phase();
        orig.fix_global_phase();
        for (x, y) in orig.amplitudes().iter().zip(back.amplitudes()) {
            assert!((x - y).norm() <= 1e-8);
        }
    }

    #[test]
    fn shifts_beyond_the_cap_are_refused() {
        let psi = StateVector::vacuum(b(20));
        assert!(matches!(
            displacement_apply(&psi, 1.5, 0.0),
            Err(QsdError::ShiftTooLarge { .. })
        ));
    }

    #[test]
    fn recentering_a_coherent_state_moves_the_frame() {
        let ms = MovingState {
            frame: PhaseFrame::default(),
            local: StateVector::coherent_qp(b(40), 0.3, 0.1),
        };
        let before = ms.physical_moments().unwrap();
        let out = recenter(&ms, 1e-8).unwrap();
        assert_abs_diff_eq!(out.frame.q, 0.3, epsilon = 1e-8);
        assert_abs_diff_eq!(out.frame.p, 0.1, epsilon = 1e-8);
        let f = out.local.fidelity(&StateVector::vacuum(b(40))).unwrap();
        assert!(f >= 1.0 - 1e-8, "{f}");
        let after = out.physical_moments().unwrap();
        assert_abs_diff_eq!(before.q_mean, after.q_mean, epsilon = 1e-9);
        assert_abs_diff_eq!(before.p_mean, after.p_mean, epsilon = 1e-9);
        let m = out.local_moments().unwrap();
        assert!(m.q_mean.abs() <= 1e-8 && m.p_mean.abs() <= 1e-8);
    }

    #[test]
    fn centred_state_keeps_its_frame() {
        let ms = MovingState::coherent(2.0, -1.0, b(16));
        let out = recenter(&ms, 1e-8).unwrap();
        assert_eq!(out.frame, ms.frame);
    }

    #[test]
    fn vacuum_shrinks_and_top_heavy_state_grows() {
        let ms = MovingState::coherent(0.0, 0.0, b(32));
        let out = adapt_truncation(&ms, 1e-6, 10, 64).unwrap();
        assert_eq!(out.dim(), 10);
        let top = MovingState {
            frame: PhaseFrame::default(),
            local: StateVector::number_state(b(20), 19).unwrap(),
        };
        let grown = adapt_truncation(&top, 1e-6, 10, 64).unwrap();
        assert!(grown.dim() > 20);
        assert!(matches!(
            adapt_truncation(&top, 1e-6, 10, 20),
            Err(QsdError::TruncationLimit { max: 20 })
        ));
    }

    #[test]
    fn displaced_operators_match_shifted_polynomial() {
        let params = DuffingParams::new(0.125, 0.3, 0.7).unwrap();
        let basis = b(24);
        let ops = DuffingOperators::new(basis).unwrap();
        for &(q, p, t) in &[(0.8, -0.3, 0.4), (-1.7, 2.2, 3.0), (0.05, 0.0, 5.5)] {
            let displaced = DisplacedDuffing::new(&ops, params, q, p).hamiltonian_at(t);
            let lam = params.ansatz_coeff;
            let f = params.g / params.beta * t.cos();
            let b2 = params.beta * params.beta;
            let direct = quadrature_polynomial(basis, 4, |qo, po| {
                let qs = qo.shift_diagonal(C64::new(q, 0.0));
                let ps = po.shift_diagonal(C64::new(p, 0.0));
                let q2 = qs.mul(&qs)?;
                q2.mul(&q2)?
                    .scale_real(0.25 * b2)
                    .add(&ps.mul(&ps)?.scale_real(0.5))?
                    .add(&q2.scale_real(-0.5))?
                    .add(&qs.scale_real(f))?
                    .add(&qs.mul(&ps)?.add(&ps.mul(&qs)?)?.scale_real(lam))
            })
            .unwrap();
            let c0 = 0.5 * p * p + 0.25 * b2 * q.powi(4) - 0.5 * q * q + f * q + 2.0 * lam * q * p;
            let diff = direct.shift_diagonal(C64::new(-c0, 0.0)).sub(&displaced).unwrap();
            assert!(diff.max_abs() <= 1e-10, "{}", diff.max_abs());
        }
    }

    #[test]
    fn frame_follows_the_inverted_oscillator() {
        // Γ = g = 0 and a tiny β leave V ≈ −Q²/2.
        let params = DuffingParams::new(0.0, 0.0, 1e-3).unwrap();
        let mut model = MqsdModel::new(params, MqsdConfig::default()).unwrap();
        let mut ms = MovingState::coherent(0.0, 1.0, b(16));
        let mut ns = NoiseStream::new(1);
        let (mut incs, mut ws) = (Vec::new(), QsdWorkspace::default());
        let dt = 1e-3;
        for k in 0..1000 {
            mqsd_step(&mut ms, &mut model, k as f64 * dt, dt, &mut ns, &mut incs, &mut ws).unwrap();
        }
        // Inverted oscillator V = −Q²/2 from (0, 1): q = sinh t, p = cosh t.
        assert_abs_diff_eq!(ms.frame.q, 1f64.sinh(), epsilon = 2e-3);
        assert_abs_diff_eq!(ms.frame.p, 1f64.cosh(), epsilon = 2e-3);
    }

    #[test]
    fn moving_and_fixed_bases_agree_pathwise() {
        let params = DuffingParams::new(0.125, 0.3, 0.5).unwrap();
        let dt = TAU / 4000.0;
        let t_end = TAU * 0.5;
        let (q0, p0) = (1.0, 0.5);

        let fixed = build_duffing_quantum(&params, b(160)).unwrap();
        let psi0 = StateVector::coherent_qp(b(160), q0, p0);
        let mut fp = QsdPropagator::new(&fixed, psi0, 0.0).unwrap();
        let rf = run_propagator(&mut fp, t_end, dt, &mut NoiseStream::new(8), &mut [], 50).unwrap();

        let cfg = MqsdConfig {
            trunc_tol: 1e-8,
            ..MqsdConfig::default()
        };
        let model = MqsdModel::new(params, cfg).unwrap();
        let mut mp = MqsdPropagator::coherent(model, q0, p0, 32, 0.0).unwrap();
        let rm = run_propagator(&mut mp, t_end, dt, &mut NoiseStream::new(8), &mut [], 50).unwrap();

        assert_eq!(rf.times, rm.times);
        for (a, b) in rf.moment_history.iter().zip(&rm.moment_history) {
            assert!((a.q_mean - b.q_mean).abs() < 1e-5, "{} vs {}", a.q_mean, b.q_mean);
            assert!((a.p_mean - b.p_mean).abs() < 1e-5);
        }
    }
}
