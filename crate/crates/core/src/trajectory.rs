//! Quantum state diffusion: single-trajectory Euler–Maruyama integration of
//! the QSD Itô equation with complex Wiener noise, a generic fixed-step
//! driver with scheduled samplers, and ensemble aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::fockspace::{
    build_quadratures, dot, moments_unchecked, norm_sqr, MomentSet, OperatorMatrix, StateVector,
    C64, ZERO,
};
use crate::master::{DensityAccumulator, DensityMatrix};
use crate::models::OpenSystem;

/// Deterministic source of complex Wiener increments. Identical seeds give
/// bit-identical increment sequences.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The stream of trajectory `index` in an ensemble seeded with `seed_base`.
    pub fn for_trajectory(seed_base: u64, index: u64) -> Self {
        Self::new(seed_base ^ index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn word_position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// `dξ = (u + iv)·√(dt/2)` with independent standard normal `u, v`, so that
/// `M(dξ) = M(dξ²) = 0` and `M(|dξ|²) = dt`.
pub fn wiener_increment(ns: &mut NoiseStream, dt: f64) -> Result<C64> {
    if !(dt > 0.0) {
        return Err(QsdError::param("dt", format!("must be > 0, got {dt}")));
    }
    let s = (0.5 * dt).sqrt();
    let u = ns.standard_normal();
    let v = ns.standard_normal();
    Ok(C64::new(u * s, v * s))
}

/// Time-stepping scheme for the QSD equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepScheme {
    /// Plain explicit Euler–Maruyama on the whole right-hand side.
    Euler,
    /// Euler–Maruyama for the dissipative and noise terms; the skew-Hermitian
    /// part of the drift is propagated exactly by a matrix exponential.
    /// Same order as [`StepScheme::Euler`], but free of the `dt ≲ 1/‖Ĥ‖²`
    /// restriction that large bases impose on plain Euler.
    #[default]
    Exponential,
}

impl std::str::FromStr for StepScheme {
    type Err = QsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(StepScheme::Euler),
            "exponential" => Ok(StepScheme::Exponential),
            other => Err(QsdError::Config(format!(
                "unknown scheme `{other}` (expected euler or exponential)"
            ))),
        }
    }
}

/// Scratch buffers for repeated QSD steps on one basis size.
#[derive(Clone, Debug, Default)]
pub struct QsdWorkspace {
    dpsi: Vec<C64>,
    hpsi: Vec<C64>,
    tmp: Vec<C64>,
    lpsi: Vec<Vec<C64>>,
    l_means: Vec<C64>,
}

impl QsdWorkspace {
    fn resize(&mut self, d: usize, n_l: usize) {
        for b in [&mut self.dpsi, &mut self.hpsi, &mut self.tmp] {
            b.resize(d, ZERO);
        }
        self.lpsi.resize(n_l, Vec::new());
        for b in &mut self.lpsi {
            b.resize(d, ZERO);
        }
        self.l_means.resize(n_l, ZERO);
    }
}

/// One step of
///
/// ```text
/// |dψ⟩ = −i(Ĥ − ⟨Ĥ⟩)|ψ⟩dt + Σ_j (⟨L̂_j†⟩L̂_j − ½⟨L̂_j†⟩⟨L̂_j⟩ − ½L̂_j†L̂_j)|ψ⟩dt
///        + Σ_j (L̂_j − ⟨L̂_j⟩)|ψ⟩dξ_j
/// ```
///
/// applied in place, with the drift evaluated at the start-of-step state.
/// Subtracting `⟨Ĥ⟩` only changes the global phase of the exact solution; it
/// makes the discrete step independent of c-number offsets in `Ĥ`, which is
/// what lets a displaced-frame step reproduce the fixed-basis one.
///
/// For [`StepScheme::Exponential`] the Lindblad drift is split as
/// `−½(L̂−⟨L̂⟩)†(L̂−⟨L̂⟩) − iĤ_L` with `Ĥ_L = (i/2)(⟨L̂⟩*L̂ − ⟨L̂⟩L̂†)`;
/// the Hermitian part and the noise take an Euler step and
/// `exp(−i(Ĥ + ΣĤ_L − ⟨Ĥ⟩)dt)` is applied to the result.
///
/// `increments` holds one `dξ_j` per Lindblad operator. Returns the
/// pre-renormalization `‖ψ‖ − 1`; the state is renormalized on exit.
pub fn qsd_step_in_place<M: OpenSystem + ?Sized>(
    psi: &mut [C64],
    model: &M,
    t: f64,
    dt: f64,
    increments: &[C64],
    scheme: StepScheme,
    ws: &mut QsdWorkspace,
) -> Result<f64> {
    let d = psi.len();
    let lindblads = model.lindblads();
    debug_assert_eq!(d, model.basis().dim());
    debug_assert_eq!(increments.len(), lindblads.len());
    ws.resize(d, lindblads.len());

    let terms = model.hamiltonian_terms(t);
    ws.hpsi.iter_mut().for_each(|x| *x = ZERO);
    for &(c, op) in &terms {
        if c == 0.0 {
            continue;
        }
        op.apply_into(psi, &mut ws.tmp);
        for (h, x) in ws.hpsi.iter_mut().zip(&ws.tmp) {
            *h += c * x;
        }
    }
    let e_h = dot(psi, &ws.hpsi).re;
    for (j, l) in lindblads.iter().enumerate() {
        l.apply_into(psi, &mut ws.lpsi[j]);
        ws.l_means[j] = dot(psi, &ws.lpsi[j]);
    }

    match scheme {
        StepScheme::Euler => {
            let minus_i_dt = C64::new(0.0, -dt);
            for ((dp, h), x) in ws.dpsi.iter_mut().zip(&ws.hpsi).zip(psi.iter()) {
                *dp = minus_i_dt * (h - e_h * x);
            }
            for (j, (l, dxi)) in lindblads.iter().zip(increments).enumerate() {
                let m = ws.l_means[j];
                l.apply_adjoint_into(&ws.lpsi[j], &mut ws.tmp);
                let drift_l = m.conj() * dt;
                let drift_psi = -0.5 * m.norm_sqr() * dt;
                for i in 0..d {
                    ws.dpsi[i] += drift_l * ws.lpsi[j][i] + drift_psi * psi[i] - 0.5 * dt * ws.tmp[i]
                        + dxi * (ws.lpsi[j][i] - m * psi[i]);
                }
            }
        }
        StepScheme::Exponential => {
            ws.dpsi.iter_mut().for_each(|x| *x = ZERO);
            for (j, (l, dxi)) in lindblads.iter().zip(increments).enumerate() {
                let m = ws.l_means[j];
                // r = (L − ⟨L⟩)ψ, stored in place of Lψ
                for (r, x) in ws.lpsi[j].iter_mut().zip(psi.iter()) {
                    *r -= m * x;
                }
                l.apply_adjoint_into(&ws.lpsi[j], &mut ws.tmp);
                let mc = m.conj();
                for i in 0..d {
                    let r = ws.lpsi[j][i];
                    ws.dpsi[i] += -0.5 * dt * (ws.tmp[i] - mc * r) + dxi * r;
                }
            }
        }
    }

    for (x, dp) in psi.iter_mut().zip(&ws.dpsi) {
        *x += dp;
    }
    let norm = norm_sqr(psi).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(QsdError::Instability { t, dt });
    }
    let inv = 1.0 / norm;
    psi.iter_mut().for_each(|x| *x *= inv);

    if scheme == StepScheme::Exponential {
        let mut g = OperatorMatrix::zeros(model.basis(), 0).shift_diagonal(C64::new(-e_h, 0.0));
        for &(c, op) in &terms {
            if c != 0.0 {
                g = g.add_scaled(C64::new(c, 0.0), op)?;
            }
        }
        for (j, l) in lindblads.iter().enumerate() {
            let m = ws.l_means[j];
            if m == ZERO {
                continue;
            }
            let half_i = C64::new(0.0, 0.5);
            g = g
                .add_scaled(half_i * m.conj(), l)?
                .add_scaled(-half_i * m, &l.adjoint())?;
        }
        let out = g.scale(C64::new(0.0, -dt)).expm_apply(psi);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(QsdError::Instability { t, dt });
        }
        psi.copy_from_slice(&out);
    }
    Ok(norm - 1.0)
}

/// Draws the increments of one step: one per Lindblad operator, in order.
pub fn draw_increments(ns: &mut NoiseStream, count: usize, dt: f64, out: &mut Vec<C64>) -> Result<()> {
    out.clear();
    for _ in 0..count {
        out.push(wiener_increment(ns, dt)?);
    }
    Ok(())
}

/// Returns the stepped, renormalized state and the pre-renormalization norm
/// drift `‖ψ'‖ − 1`.
pub fn qsd_step<M: OpenSystem + ?Sized>(
    psi: &StateVector,
    model: &M,
    t: f64,
    dt: f64,
    ns: &mut NoiseStream,
) -> Result<(StateVector, f64)> {
    psi.basis().check_same(&model.basis())?;
    if !(dt > 0.0) {
        return Err(QsdError::param("dt", "must be > 0"));
    }
    let mut incs = Vec::new();
    draw_increments(ns, model.lindblads().len(), dt, &mut incs)?;
    let mut amps = psi.amplitudes().to_vec();
    let drift = qsd_step_in_place(
        &mut amps,
        model,
        t,
        dt,
        &incs,
        StepScheme::default(),
        &mut QsdWorkspace::default(),
    )?;
    Ok((StateVector::new(psi.basis(), amps)?, drift))
}

// ---------------------------------------------------------------------------
// Fixed-step driver

/// What one step reports back to the driver.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepInfo {
    pub norm_drift: f64,
}

/// A single-trajectory integrator advanced on a fixed time grid.
pub trait Propagator {
    fn time(&self) -> f64;

    /// Advances by `dt`, drawing this step's noise from `ns`.
    fn step(&mut self, dt: f64, ns: &mut NoiseStream) -> Result<StepInfo>;

    /// Physical (unscaled) moments of the current state.
    fn moments(&self) -> MomentSet;

    /// Size of the current representation, e.g. the basis dimension.
    fn basis_dim(&self) -> usize;
}

/// Something invoked on a regular schedule during a run.
pub trait Sampler {
    /// Sampling interval; samples are taken at every multiple of it.
    fn interval(&self) -> f64;

    fn sample(&mut self, index: u64, t: f64, moments: &MomentSet) -> Result<()>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub moment_history: Vec<MomentSet>,
    /// Pre-renormalization `‖ψ‖ − 1` of the step ending at each time (0 for the
    /// initial entry).
    pub norm_drift: Vec<f64>,
    pub basis_dims: Vec<usize>,
    /// Steps taken.
    pub steps: u64,
    /// Representation size averaged over every step (not just recorded ones).
    pub mean_basis_dim: f64,
    pub max_basis_dim: usize,
    pub max_abs_norm_drift: f64,
}

impl TrajectoryRecord {
    fn push(&mut self, t: f64, m: MomentSet, drift: f64, dim: usize) {
        self.times.push(t);
        self.moment_history.push(m);
        self.norm_drift.push(drift);
        self.basis_dims.push(dim);
    }
}

/// Converts `interval / dt` to an integer step count, or reports that the
/// schedule is not on the time grid.
pub fn steps_per_interval(interval: f64, dt: f64) -> Result<u64> {
    let r = interval / dt;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * r.max(1.0) {
        return Err(QsdError::Config(format!(
            "sampling interval {interval} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(n as u64)
}

/// Runs `prop` from its current time to `t_end` with fixed `dt`, recording
/// moments every `record_stride` steps and invoking samplers on schedule.
pub fn run_propagator<P: Propagator + ?Sized>(
    prop: &mut P,
    t_end: f64,
    dt: f64,
    ns: &mut NoiseStream,
    samplers: &mut [&mut dyn Sampler],
    record_stride: u64,
) -> Result<TrajectoryRecord> {
    if !(dt > 0.0) {
        return Err(QsdError::param("dt", "must be > 0"));
    }
    let t0 = prop.time();
    let span = t_end - t0;
    if span < -1e-12 {
        return Err(QsdError::param("t_end", "must not precede the start time"));
    }
    let n_steps = (span / dt).round().max(0.0) as u64;
    if ((n_steps as f64) * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(QsdError::Config(format!(
            "run length {span} is not an integer multiple of dt = {dt}"
        )));
    }
    let k0 = {
        let r = t0 / dt;
        if (r - r.round()).abs() > 1e-9 * r.abs().max(1.0) {
            return Err(QsdError::Config(format!("start time {t0} is not on the dt grid")));
        }
        r.round() as i64
    };
    let schedule: Vec<u64> = samplers
        .iter()
        .map(|s| steps_per_interval(s.interval(), dt))
        .collect::<Result<_>>()?;
    let stride = record_stride.max(1);

    let mut rec = TrajectoryRecord::default();
    let m0 = prop.moments();
    let d0 = prop.basis_dim();
    rec.push(t0, m0, 0.0, d0);
    rec.max_basis_dim = d0;
    let sample_all = |samplers: &mut [&mut dyn Sampler], k: i64, t: f64, m: &MomentSet| -> Result<()> {
        for (s, &every) in samplers.iter_mut().zip(&schedule) {
            if k.rem_euclid(every as i64) == 0 {
                s.sample((k / every as i64) as u64, t, m)?;
            }
        }
        Ok(())
    };
    sample_all(samplers, k0, t0, &m0)?;

    let mut dim_sum = 0.0;
    for step in 1..=n_steps {
        let info = prop.step(dt, ns)?;
        let k = k0 + step as i64;
        let t = k as f64 * dt;
        let dim = prop.basis_dim();
        dim_sum += dim as f64;
        rec.max_basis_dim = rec.max_basis_dim.max(dim);
        rec.max_abs_norm_drift = rec.max_abs_norm_drift.max(info.norm_drift.abs());
        let due = schedule.iter().any(|&e| k.rem_euclid(e as i64) == 0);
        if step % stride == 0 || step == n_steps || due {
            let m = prop.moments();
            if step % stride == 0 || step == n_steps {
                rec.push(t, m, info.norm_drift, dim);
            }
            if due {
                sample_all(samplers, k, t, &m)?;
            }
        }
    }
    rec.steps = n_steps;
    rec.mean_basis_dim = if n_steps > 0 { dim_sum / n_steps as f64 } else { d0 as f64 };
    Ok(rec)
}

/// QSD in a fixed Fock basis.
pub struct QsdPropagator<M: OpenSystem> {
    model: M,
    psi: StateVector,
    t: f64,
    q: OperatorMatrix,
    p: OperatorMatrix,
    scheme: StepScheme,
    incs: Vec<C64>,
    ws: QsdWorkspace,
}

impl<M: OpenSystem> QsdPropagator<M> {
    pub fn new(model: M, psi0: StateVector, t0: f64) -> Result<Self> {
        psi0.basis().check_same(&model.basis())?;
        psi0.check_normalized()?;
        let (q, p) = build_quadratures(psi0.basis())?;
        Ok(QsdPropagator {
            model,
            psi: psi0,
            t: t0,
            q,
            p,
            scheme: StepScheme::default(),
            incs: Vec::new(),
            ws: QsdWorkspace::default(),
        })
    }

    pub fn with_scheme(mut self, scheme: StepScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn state(&self) -> &StateVector {
        &self.psi
    }

    pub fn into_state(self) -> StateVector {
        self.psi
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

impl<M: OpenSystem> Propagator for QsdPropagator<M> {
    fn time(&self) -> f64 {
        self.t
    }

    fn step(&mut self, dt: f64, ns: &mut NoiseStream) -> Result<StepInfo> {
        draw_increments(ns, self.model.lindblads().len(), dt, &mut self.incs)?;
        let drift = qsd_step_in_place(
            self.psi.amplitudes_mut(),
            &self.model,
            self.t,
            dt,
            &self.incs,
            self.scheme,
            &mut self.ws,
        )?;
        self.t += dt;
        Ok(StepInfo { norm_drift: drift })
    }

    fn moments(&self) -> MomentSet {
        moments_unchecked(self.psi.amplitudes(), &self.q, &self.p)
    }

    fn basis_dim(&self) -> usize {
        self.psi.dim()
    }
}

/// Integrates one QSD trajectory from `t0` to `t_end` with fixed `dt`,
/// recording moments at every step. Returns the record and the final state.
pub fn evolve_trajectory<M: OpenSystem>(
    psi0: StateVector,
    model: M,
    t0: f64,
    t_end: f64,
    dt: f64,
    ns: &mut NoiseStream,
    samplers: &mut [&mut dyn Sampler],
) -> Result<(TrajectoryRecord, StateVector)> {
    let mut prop = QsdPropagator::new(model, psi0, t0)?;
    let rec = run_propagator(&mut prop, t_end, dt, ns, samplers, 1)?;
    Ok((rec, prop.into_state()))
}

// ---------------------------------------------------------------------------
// Ensembles

/// `M(|ψ⟩⟨ψ|)` over a set of states sharing one basis.
pub fn ensemble_mean_density(states: &[StateVector]) -> Result<DensityMatrix> {
    let first = states
        .first()
        .ok_or_else(|| QsdError::param("states", "ensemble is empty"))?;
    let mut acc = DensityAccumulator::new(first.basis());
    for s in states {
        acc.add(s)?;
    }
    acc.finish()
}

/// Runs `n` independent trajectories in parallel. Trajectory `i` receives the
/// noise stream seeded with `seed_base ^ i`, so results do not depend on
/// worker scheduling. Results are returned in index order.
pub fn run_ensemble<T, F>(n: usize, seed_base: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, NoiseStream) -> Result<T> + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(|i| f(i, NoiseStream::for_trajectory(seed_base, i as u64)))
        .collect()
}

/// Fidelity-free helper: `|⟨a|b⟩|²` for raw amplitude slices.
pub fn overlap_sqr(a: &[C64], b: &[C64]) -> f64 {
    dot(a, b).norm_sqr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fockspace::{build_ladder, number_operator, FockBasis};
    use crate::models::{Drive, OpenSystemModel};

    #[test]
    fn nonpositive_dt_is_rejected() {
        let mut ns = NoiseStream::new(1);
        assert!(wiener_increment(&mut ns, 0.0).is_err());
        assert!(wiener_increment(&mut ns, -1.0).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_increments() {
        let mut a = NoiseStream::new(42);
        let mut b = NoiseStream::new(42);
        for _ in 0..100 {
            let x = wiener_increment(&mut a, 0.01).unwrap();
            let y = wiener_increment(&mut b, 0.01).unwrap();
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
        assert_eq!(NoiseStream::for_trajectory(7, 3).seed(), 7 ^ 3);
    }

    #[test]
    fn dark_state_does_not_move() {
        let b = FockBasis::new(8).unwrap();
        let (a, _) = build_ladder(b).unwrap();
        let model = OpenSystemModel::new(b).with_lindblad(a).unwrap();
        let vac = StateVector::vacuum(b);
        let mut ns = NoiseStream::new(3);
        for _ in 0..10 {
            let (next, drift) = qsd_step(&vac, &model, 0.0, 0.01, &mut ns).unwrap();
            assert_eq!(next, vac);
            assert_eq!(drift, 0.0);
        }
    }

    #[test]
    fn zero_duration_returns_initial_moments() {
        let b = FockBasis::new(10).unwrap();
        let model = OpenSystemModel::new(b)
            .with_term(1.0, Drive::Constant, number_operator(b))
            .unwrap();
        let psi = StateVector::coherent(b, C64::new(0.5, 0.0));
        let mut ns = NoiseStream::new(0);
        let (rec, out) = evolve_trajectory(psi.clone(), &model, 0.0, 0.0, 0.01, &mut ns, &mut []).unwrap();
        assert_eq!(rec.times, vec![0.0]);
        assert_eq!(rec.moment_history.len(), 1);
        assert!((rec.moment_history[0].q_mean - 0.5 * 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(out, psi);
    }

    #[test]
    fn off_grid_sampler_is_a_configuration_error() {
        struct Every(f64);
        impl Sampler for Every {
            fn interval(&self) -> f64 {
                self.0
            }
            fn sample(&mut self, _: u64, _: f64, _: &MomentSet) -> Result<()> {
                Ok(())
            }
        }
        let b = FockBasis::new(4).unwrap();
        let model = OpenSystemModel::new(b);
        let mut s = Every(0.015);
        let mut ns = NoiseStream::new(0);
        let res = evolve_trajectory(StateVector::vacuum(b), &model, 0.0, 0.1, 0.01, &mut ns, &mut [&mut s]);
        assert!(matches!(res, Err(QsdError::Config(_))));
    }

    #[test]
    fn ensemble_density_of_orthogonal_pair() {
        let b = FockBasis::new(3).unwrap();
        let states = [
            StateVector::number_state(b, 0).unwrap(),
            StateVector::number_state(b, 2).unwrap(),
        ];
        let rho = ensemble_mean_density(&states).unwrap();
        assert!((rho.get(0, 0).re - 0.5).abs() < 1e-15);
        assert!((rho.get(2, 2).re - 0.5).abs() < 1e-15);
        assert!(rho.get(0, 2).norm() < 1e-15);
        let single = ensemble_mean_density(&states[..1]).unwrap();
        assert!((single.purity() - 1.0).abs() < 1e-10);
        assert!(ensemble_mean_density(&[]).is_err());
    }

    fn harmonic(b: FockBasis) -> OpenSystemModel {
        let (q, p) = build_quadratures(b).unwrap();
        let h = crate::fockspace::quadrature_polynomial(b, 2, |q, p| {
            q.mul(q)?.add(&p.mul(p)?)
        })
        .unwrap()
        .scale_real(0.5);
        let _ = (q, p);
        OpenSystemModel::new(b).with_term(1.0, Drive::Constant, h).unwrap()
    }

    #[test]
    fn closed_harmonic_period_returns_to_start() {
        let b = FockBasis::new(30).unwrap();
        let model = harmonic(b);
        let psi0 = StateVector::coherent(b, C64::new(1.0, 0.5));
        let dt = std::f64::consts::TAU / 62832.0;
        for scheme in [StepScheme::Euler, StepScheme::Exponential] {
            let mut prop = QsdPropagator::new(&model, psi0.clone(), 0.0).unwrap().with_scheme(scheme);
            let mut ns = NoiseStream::new(0);
            run_propagator(&mut prop, std::f64::consts::TAU, dt, &mut ns, &mut [], 1000).unwrap();
            let f = prop.state().fidelity(&psi0).unwrap();
            assert!(f >= 1.0 - 1e-5, "{scheme:?}: fidelity {f}");
        }
    }

    #[test]
    fn schemes_agree_to_first_order() {
        let b = FockBasis::new(20).unwrap();
        let (a, _) = build_ladder(b).unwrap();
        let model = harmonic(b).with_lindblad(a.scale_real(0.7)).unwrap();
        let psi0 = StateVector::coherent(b, C64::new(0.8, -0.3));
        let mut finals = Vec::new();
        for scheme in [StepScheme::Euler, StepScheme::Exponential] {
            let mut prop = QsdPropagator::new(&model, psi0.clone(), 0.0).unwrap().with_scheme(scheme);
            let mut ns = NoiseStream::new(11);
            let rec = run_propagator(&mut prop, 1.0, 1e-4, &mut ns, &mut [], 10_000).unwrap();
            finals.push(*rec.moment_history.last().unwrap());
        }
        assert!((finals[0].q_mean - finals[1].q_mean).abs() < 1e-2);
        assert!((finals[0].p_mean - finals[1].p_mean).abs() < 1e-2);
    }

    #[test]
    fn same_seed_gives_bit_identical_records() {
        let b = FockBasis::new(12).unwrap();
        let (a, _) = build_ladder(b).unwrap();
        let model = harmonic(b).with_lindblad(a).unwrap();
        let run = || {
            let mut ns = NoiseStream::new(99);
            evolve_trajectory(StateVector::coherent(b, C64::new(1.0, 0.0)), &model, 0.0, 0.5, 0.01, &mut ns, &mut [])
                .unwrap()
                .0
        };
        let (r1, r2) = (run(), run());
        assert_eq!(r1, r2);
        assert_eq!(r1.times.len(), 51);
        assert!(r1.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn single_step_norm_drift_averages_to_zero() {
        let b = FockBasis::new(16).unwrap();
        let (a, _) = build_ladder(b).unwrap();
        let model = harmonic(b).with_lindblad(a.scale_real(0.6)).unwrap();
        let psi = StateVector::new(
            b,
            (0..16)
                .map(|k| match k {
                    0 => C64::new(0.6, 0.0),
                    2 => C64::new(0.0, 0.8),
                    _ => ZERO,
                })
                .collect(),
        )
        .unwrap();
        let n = 20_000;
        let drifts: Vec<f64> = run_ensemble(n, 5, |_, mut ns| {
            let mut amps = psi.amplitudes().to_vec();
            let mut incs = Vec::new();
            draw_increments(&mut ns, 1, 1e-3, &mut incs)?;
            let d = qsd_step_in_place(&mut amps, &model, 0.0, 1e-3, &incs, StepScheme::Euler, &mut QsdWorkspace::default())?;
            // signed change of the squared norm
            Ok((1.0 + d) * (1.0 + d) - 1.0)
        })
        .unwrap();
        let mean = drifts.iter().sum::<f64>() / n as f64;
        let var = drifts.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se + 1e-6, "mean {mean}, se {se}");
    }
}
