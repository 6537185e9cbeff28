//! The forced, damped Duffing oscillator, classically and as an open quantum
//! system, plus the generic `H(t)`, `{L_j}` model interface the integrators
//! consume.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::fockspace::{
    build_ladder, build_quadratures, quadrature_polynomial, FockBasis, OperatorMatrix, C64, ZERO,
};

/// Parameters of the Duffing oscillator
/// `ẍ + 2Γẋ + x³ − x = g cos t` and its β-scaled quantization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    /// Damping Γ.
    pub gamma: f64,
    /// Drive amplitude g.
    pub g: f64,
    /// Classical-limit scaling β; `β → 0` is the classical limit.
    pub beta: f64,
    /// Coefficient λ of the `Q̂P̂ + P̂Q̂` ansatz term.
    pub ansatz_coeff: f64,
}

impl Default for DuffingParams {
    fn default() -> Self {
        DuffingParams::new(0.125, 0.3, 1.0).expect("defaults are valid")
    }
}

impl DuffingParams {
    /// Builds parameters with the default ansatz coefficient `λ = √Γ`.
    pub fn new(gamma: f64, g: f64, beta: f64) -> Result<Self> {
        let p = DuffingParams {
            gamma,
            g,
            beta,
            ansatz_coeff: gamma.max(0.0).sqrt(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_ansatz_coeff(mut self, lambda: f64) -> Result<Self> {
        self.ansatz_coeff = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(QsdError::param("beta", format!("must be > 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(QsdError::param("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        if !self.g.is_finite() {
            return Err(QsdError::param("g", "must be finite"));
        }
        if !self.ansatz_coeff.is_finite() {
            return Err(QsdError::param("ansatz_coeff", "must be finite"));
        }
        Ok(())
    }

    /// `V′(x)` of the β-scaled potential `β²x⁴/4 − x²/2 + (g/β) cos(t) x`.
    pub fn potential_d1(&self, x: f64, t: f64) -> f64 {
        let b2 = self.beta * self.beta;
        b2 * x * x * x - x + self.g / self.beta * t.cos()
    }

    pub fn potential_d2(&self, x: f64) -> f64 {
        3.0 * self.beta * self.beta * x * x - 1.0
    }

    pub fn potential_d3(&self, x: f64) -> f64 {
        6.0 * self.beta * self.beta * x
    }

    pub fn potential_d4(&self) -> f64 {
        6.0 * self.beta * self.beta
    }
}

/// Fixed-basis dimension heuristic: `⌈10/β²⌉`, at least 96 and at most 4096.
/// The attractor spans `|x| ≲ 1.4` in scaled units, i.e. `n ≈ (x/β)²/2`
/// levels, and the packet needs a margin on top of that.
pub fn default_fixed_dim(beta: f64) -> usize {
    ((10.0 / (beta * beta)).ceil() as usize).clamp(96, 4096)
}

/// Initial moving-basis dimension.
pub const DEFAULT_MOVING_DIM: usize = 32;

// ---------------------------------------------------------------------------
// Classical layer

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalState {
    pub x: f64,
    pub p: f64,
    pub t: f64,
}

impl ClassicalState {
    pub fn new(x: f64, p: f64, t: f64) -> Self {
        ClassicalState { x, p, t }
    }

    /// `p²/2 + x⁴/4 − x²/2`, non-increasing when undriven.
    pub fn energy(&self) -> f64 {
        0.5 * self.p * self.p + 0.25 * self.x.powi(4) - 0.5 * self.x * self.x
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.p.is_finite() && self.t.is_finite()
    }
}

/// Right-hand side of the classical equation of motion. β is not read: the
/// classical flow is β-invariant.
pub fn classical_rhs(s: &ClassicalState, params: &DuffingParams) -> (f64, f64) {
    let dx = s.p;
    let dp = -2.0 * params.gamma * s.p - s.x * s.x * s.x + s.x + params.g * s.t.cos();
    (dx, dp)
}

/// One classical RK4 step.
pub fn classical_step(s: &ClassicalState, params: &DuffingParams, dt: f64) -> ClassicalState {
    let at = |x: f64, p: f64, t: f64| classical_rhs(&ClassicalState { x, p, t }, params);
    let h = 0.5 * dt;
    let (k1x, k1p) = at(s.x, s.p, s.t);
    let (k2x, k2p) = at(s.x + h * k1x, s.p + h * k1p, s.t + h);
    let (k3x, k3p) = at(s.x + h * k2x, s.p + h * k2p, s.t + h);
    let (k4x, k4p) = at(s.x + dt * k3x, s.p + dt * k3p, s.t + dt);
    ClassicalState {
        x: s.x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        p: s.p + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
        t: s.t + dt,
    }
}

/// Fixed-step RK4 from `s0.t` to `t_end`. Returns every state including the
/// initial one; a final short step lands exactly on `t_end`.
pub fn classical_integrate(
    s0: ClassicalState,
    params: &DuffingParams,
    t_end: f64,
    dt: f64,
) -> Result<Vec<ClassicalState>> {
    if !(dt > 0.0) {
        return Err(QsdError::param("dt", "must be > 0"));
    }
    let span = t_end - s0.t;
    if span < 0.0 {
        return Err(QsdError::param("t_end", "must not precede the initial time"));
    }
    let n_full = (span / dt + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(n_full + 2);
    out.push(s0);
    let mut s = s0;
    for k in 1..=n_full {
        s = classical_step(&s, params, dt);
        // Keep times on the grid instead of accumulating rounding.
        s.t = s0.t + k as f64 * dt;
        if !s.is_finite() {
            return Err(QsdError::Divergence { t: s.t });
        }
        out.push(s);
    }
    let rest = t_end - s.t;
    if rest > 1e-12 * dt.max(1.0) {
        s = classical_step(&s, params, rest);
        s.t = t_end;
        if !s.is_finite() {
            return Err(QsdError::Divergence { t: s.t });
        }
        out.push(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Open quantum systems

/// Time profile multiplying a Hamiltonian term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Drive {
    Constant,
    /// `cos(ω t)`, with `t = 0` at the drive maximum.
    Cosine { omega: f64 },
}

impl Drive {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Drive::Constant => 1.0,
            Drive::Cosine { omega } => (omega * t).rem_euclid(TAU).cos(),
        }
    }
}

/// Generic open-system dynamics: `H(t) = Σ_k c_k(t) H_k` with hermitian
/// `H_k` and real `c_k(t)`, plus time-independent Lindblad operators.
pub trait OpenSystem {
    fn basis(&self) -> FockBasis;

    /// The terms `(c_k(t), H_k)` of the Hamiltonian at time `t`.
    fn hamiltonian_terms(&self, t: f64) -> Vec<(f64, &OperatorMatrix)>;

    fn lindblads(&self) -> &[OperatorMatrix];

    fn hamiltonian_at(&self, t: f64) -> OperatorMatrix {
        let mut h = OperatorMatrix::zeros(self.basis(), 0);
        for (c, op) in self.hamiltonian_terms(t) {
            h = h.add_scaled(C64::new(c, 0.0), op).expect("terms share the model basis");
        }
        h.into_hermitian().expect("hamiltonian terms are hermitian")
    }
}

#[derive(Clone, Debug)]
pub struct HamiltonianTerm {
    pub coeff: f64,
    pub drive: Drive,
    pub op: OperatorMatrix,
}

/// An explicit list of Hamiltonian terms and Lindblad operators.
#[derive(Clone, Debug)]
pub struct OpenSystemModel {
    basis: FockBasis,
    terms: Vec<HamiltonianTerm>,
    lindblads: Vec<OperatorMatrix>,
}

impl OpenSystemModel {
    pub fn new(basis: FockBasis) -> Self {
        OpenSystemModel {
            basis,
            terms: Vec::new(),
            lindblads: Vec::new(),
        }
    }

    pub fn with_term(mut self, coeff: f64, drive: Drive, op: OperatorMatrix) -> Result<Self> {
        self.basis.check_same(&op.basis())?;
        let op = if op.is_hermitian() { op } else { op.into_hermitian()? };
        self.terms.push(HamiltonianTerm { coeff, drive, op });
        Ok(self)
    }

    pub fn with_lindblad(mut self, op: OperatorMatrix) -> Result<Self> {
        self.basis.check_same(&op.basis())?;
        self.lindblads.push(op);
        Ok(self)
    }

    pub fn terms(&self) -> &[HamiltonianTerm] {
        &self.terms
    }
}

impl OpenSystem for OpenSystemModel {
    fn basis(&self) -> FockBasis {
        self.basis
    }

    fn hamiltonian_terms(&self, t: f64) -> Vec<(f64, &OperatorMatrix)> {
        self.terms
            .iter()
            .map(|term| (term.coeff * term.drive.value(t), &term.op))
            .collect()
    }

    fn lindblads(&self) -> &[OperatorMatrix] {
        &self.lindblads
    }
}

impl<T: OpenSystem + ?Sized> OpenSystem for &T {
    fn basis(&self) -> FockBasis {
        (**self).basis()
    }
    fn hamiltonian_terms(&self, t: f64) -> Vec<(f64, &OperatorMatrix)> {
        (**self).hamiltonian_terms(t)
    }
    fn lindblads(&self) -> &[OperatorMatrix] {
        (**self).lindblads()
    }
}

/// The operator monomials the Duffing Hamiltonian is assembled from, built
/// once per basis. Every entry is exact (no truncation-edge error) because
/// the powers are formed in a padded basis.
#[derive(Clone, Debug)]
pub struct DuffingOperators {
    pub basis: FockBasis,
    pub q: OperatorMatrix,
    pub p: OperatorMatrix,
    pub q2: OperatorMatrix,
    pub q3: OperatorMatrix,
    pub q4: OperatorMatrix,
    pub p2: OperatorMatrix,
    /// `Q̂P̂ + P̂Q̂`
    pub qp_sym: OperatorMatrix,
    pub a: OperatorMatrix,
}

impl DuffingOperators {
    pub fn new(basis: FockBasis) -> Result<Self> {
        let (q, p) = build_quadratures(basis)?;
        let (a, _) = build_ladder(basis)?;
        let q2 = quadrature_polynomial(basis, 2, |q, _| q.mul(q))?;
        let q3 = quadrature_polynomial(basis, 3, |q, _| q.mul(q)?.mul(q))?;
        let q4 = quadrature_polynomial(basis, 4, |q, _| {
            let q2 = q.mul(q)?;
            q2.mul(&q2)
        })?;
        let p2 = quadrature_polynomial(basis, 2, |_, p| p.mul(p))?;
        let qp_sym = quadrature_polynomial(basis, 2, |q, p| q.mul(p)?.add(&p.mul(q)?))?;
        Ok(DuffingOperators {
            basis,
            q,
            p,
            q2,
            q3,
            q4,
            p2,
            qp_sym,
            a,
        })
    }

    /// Time-independent part `P̂²/2 + β²Q̂⁴/4 − Q̂²/2 + λ(Q̂P̂+P̂Q̂)`.
    pub fn static_hamiltonian(&self, params: &DuffingParams) -> Result<OperatorMatrix> {
        let b2 = params.beta * params.beta;
        self.p2
            .scale_real(0.5)
            .add_scaled(C64::new(0.25 * b2, 0.0), &self.q4)?
            .add_scaled(C64::new(-0.5, 0.0), &self.q2)?
            .add_scaled(C64::new(params.ansatz_coeff, 0.0), &self.qp_sym)?
            .into_hermitian()
    }

    /// `L̂ = 2√Γ â = √(2Γ)(Q̂ + iP̂)`.
    pub fn damping_operator(&self, params: &DuffingParams) -> OperatorMatrix {
        self.a.scale_real(2.0 * params.gamma.sqrt())
    }
}

/// Quantum Duffing oscillator:
/// `H_β(t) = P̂²/2 + β²Q̂⁴/4 − Q̂²/2 + (g/β)cos(t)Q̂ + λ(Q̂P̂+P̂Q̂)`,
/// `L̂ = √(2Γ)(Q̂ + iP̂)`.
pub fn build_duffing_quantum(params: &DuffingParams, basis: FockBasis) -> Result<OpenSystemModel> {
    params.validate()?;
    let ops = DuffingOperators::new(basis)?;
    let h0 = ops.static_hamiltonian(params)?;
    OpenSystemModel::new(basis)
        .with_term(1.0, Drive::Constant, h0)?
        .with_term(params.g / params.beta, Drive::Cosine { omega: 1.0 }, ops.q.clone())?
        .with_lindblad(ops.damping_operator(params))
}

/// The Duffing model written in a frame displaced by `(q, p)`: every `Q̂` is
/// replaced by `Q̂ + q` and every `P̂` by `P̂ + p`, which is the exact
/// conjugation `D̂†(q,p) Ô D̂(q,p)` for polynomial operators. c-number terms of
/// the Hamiltonian only contribute a global phase and are dropped.
pub struct DisplacedDuffing<'a> {
    ops: &'a DuffingOperators,
    params: DuffingParams,
    q: f64,
    p: f64,
    lindblads: [OperatorMatrix; 1],
}

impl<'a> DisplacedDuffing<'a> {
    pub fn new(ops: &'a DuffingOperators, params: DuffingParams, q: f64, p: f64) -> Self {
        let l = ops.damping_operator(&params);
        // L̂(Q̂+q, P̂+p) = L̂ + √(2Γ)(q + ip)
        let shift = C64::new(q, p) * (2.0 * params.gamma).sqrt();
        let l = l.shift_diagonal(shift);
        DisplacedDuffing {
            ops,
            params,
            q,
            p,
            lindblads: [l],
        }
    }

    /// Real coefficients of `(P̂², P̂, Q̂⁴, Q̂³, Q̂², Q̂, Q̂P̂+P̂Q̂)` at time `t`.
    pub fn coefficients(&self, t: f64) -> [f64; 7] {
        let DuffingParams {
            g,
            beta,
            ansatz_coeff: lam,
            ..
        } = self.params;
        let (q, p) = (self.q, self.p);
        let b2 = beta * beta;
        [
            0.5,
            p + 2.0 * lam * q,
            0.25 * b2,
            b2 * q,
            1.5 * b2 * q * q - 0.5,
            b2 * q * q * q - q + 2.0 * lam * p + g / beta * Drive::Cosine { omega: 1.0 }.value(t),
            lam,
        ]
    }
}

impl OpenSystem for DisplacedDuffing<'_> {
    fn basis(&self) -> FockBasis {
        self.ops.basis
    }

    fn hamiltonian_terms(&self, t: f64) -> Vec<(f64, &OperatorMatrix)> {
        let c = self.coefficients(t);
        let o = self.ops;
        vec![
            (c[0], &o.p2),
            (c[1], &o.p),
            (c[2], &o.q4),
            (c[3], &o.q3),
            (c[4], &o.q2),
            (c[5], &o.q),
            (c[6], &o.qp_sym),
        ]
    }

    fn lindblads(&self) -> &[OperatorMatrix] {
        &self.lindblads
    }
}

/// Zero operator helper for closed-system models.
pub fn zero_operator(basis: FockBasis) -> OperatorMatrix {
    OperatorMatrix::from_fn(basis, 0, |_, _| ZERO)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fockspace::{expectation, StateVector};
    use approx::assert_abs_diff_eq;

    fn chaotic() -> DuffingParams {
        DuffingParams::new(0.125, 0.3, 1.0).unwrap()
    }

    #[test]
    fn rhs_examples() {
        let p = chaotic();
        let (dx, dp) = classical_rhs(&ClassicalState::new(1.0, 0.0, 0.0), &p);
        assert_eq!(dx, 0.0);
        assert_abs_diff_eq!(dp, 0.3, epsilon = 1e-15);
        let undriven = DuffingParams::new(0.125, 0.0, 1.0).unwrap();
        assert_eq!(classical_rhs(&ClassicalState::new(0.0, 0.0, 0.7), &undriven), (0.0, 0.0));
        for x in [-1.0, 1.0] {
            assert_eq!(classical_rhs(&ClassicalState::new(x, 0.0, 2.0), &undriven), (0.0, 0.0));
        }
    }

    #[test]
    fn rhs_ignores_beta() {
        let s = ClassicalState::new(0.3, -0.2, 1.1);
        let a = DuffingParams::new(0.125, 0.3, 1.0).unwrap();
        let b = DuffingParams::new(0.125, 0.3, 0.01).unwrap();
        assert_eq!(classical_rhs(&s, &a), classical_rhs(&s, &b));
    }

    #[test]
    fn invalid_params() {
        assert!(DuffingParams::new(0.1, 0.3, 0.0).is_err());
        assert!(DuffingParams::new(-0.1, 0.3, 1.0).is_err());
        assert!(DuffingParams::new(0.1, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn undriven_energy_never_increases() {
        let p = DuffingParams::new(0.125, 0.0, 1.0).unwrap();
        let traj = classical_integrate(ClassicalState::new(0.1, 0.0, 0.0), &p, 50.0, 0.005).unwrap();
        for w in traj.windows(2) {
            assert!(w[1].energy() <= w[0].energy() + 1e-9);
        }
    }

    #[test]
    fn integrate_lands_on_t_end() {
        let p = chaotic();
        let traj = classical_integrate(ClassicalState::new(0.0, 0.0, 0.0), &p, 1.05, 0.1).unwrap();
        assert_eq!(traj.len(), 12);
        assert_abs_diff_eq!(traj.last().unwrap().t, 1.05, epsilon = 1e-15);
        assert!(classical_integrate(ClassicalState::new(0.0, 0.0, 0.0), &p, 1.0, 0.0).is_err());
    }

    #[test]
    fn beta_one_matches_unscaled_hamiltonian_term_by_term() {
        let b = FockBasis::new(24).unwrap();
        let params = chaotic();
        let model = build_duffing_quantum(&params, b).unwrap();
        let ops = DuffingOperators::new(b).unwrap();
        let t = 0.4;
        let h = model.hamiltonian_at(t);
        let gs = params.gamma.sqrt();
        let want = ops
            .p2
            .scale_real(0.5)
            .add_scaled(C64::new(0.25, 0.0), &ops.q4)
            .unwrap()
            .add_scaled(C64::new(-0.5, 0.0), &ops.q2)
            .unwrap()
            .add_scaled(C64::new(0.3 * t.cos(), 0.0), &ops.q)
            .unwrap()
            .add_scaled(C64::new(gs, 0.0), &ops.qp_sym)
            .unwrap();
        for i in 0..24 {
            for j in 0..24 {
                assert!((h.get(i, j) - want.get(i, j)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_damping_gives_zero_lindblad_and_no_ansatz() {
        let b = FockBasis::new(10).unwrap();
        let params = DuffingParams::new(0.0, 0.3, 1.0).unwrap();
        assert_eq!(params.ansatz_coeff, 0.0);
        let model = build_duffing_quantum(&params, b).unwrap();
        assert_eq!(model.lindblads()[0].max_abs(), 0.0);
    }

    #[test]
    fn vacuum_energy_is_three_beta_squared_over_sixteen() {
        for beta in [1.0, 0.5, 0.1] {
            let b = FockBasis::new(30).unwrap();
            let params = DuffingParams::new(0.125, 0.3, beta).unwrap();
            let model = build_duffing_quantum(&params, b).unwrap();
            let e = expectation(&model.hamiltonian_at(0.0), &StateVector::vacuum(b)).unwrap();
            assert_abs_diff_eq!(e.re, 3.0 * beta * beta / 16.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hamiltonian_is_hermitian_and_periodic() {
        let b = FockBasis::new(40).unwrap();
        let model = build_duffing_quantum(&chaotic(), b).unwrap();
        for t in [0.0, 0.3, 2.0, 5.5] {
            let h = model.hamiltonian_at(t);
            assert!(h.hermiticity_error() < 1e-12);
            let h2 = model.hamiltonian_at(t + TAU);
            for i in 0..40 {
                for j in 0..40 {
                    assert!((h.get(i, j) - h2.get(i, j)).norm() <= 1e-12 * h.max_abs());
                }
            }
        }
    }

    #[test]
    fn default_dims() {
        assert_eq!(default_fixed_dim(1.0), 96);
        assert_eq!(default_fixed_dim(0.1), 1000);
        assert_eq!(default_fixed_dim(0.01), 4096);
    }
}
