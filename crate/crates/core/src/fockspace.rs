//! Truncated Fock-space linear algebra.
//!
//! Operators are stored in banded layout: every operator carries a declared
//! half-width `k` and only the diagonals `-k..=k` are kept. Ladder operators
//! have `k = 1`, the quartic `Q⁴` has `k = 4`, and a full dense matrix is the
//! special case `k = dim - 1`. Matrix-vector products only visit the band.
//!
//! Quadrature convention (with ħ = 1):
//!
//! ```text
//! â = (Q̂ + iP̂)/√2,   Q̂ = (â + â†)/√2,   P̂ = (â − â†)/(i√2),   [Q̂, P̂] = i
//! ```
//!
//! so that the damping operator `2√Γ â` equals `√(2Γ)(Q̂ + iP̂)`.

use num_complex::Complex64;

use crate::error::{QsdError, Result};

pub type C64 = Complex64;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
#[cfg(test)]
pub(crate) const I: C64 = C64::new(0.0, 1.0);

/// Tolerance on `|‖ψ‖ − 1|` accepted by operations that require a normalized state.
pub const NORM_TOL: f64 = 1e-6;

/// Number states `|0⟩ … |dim−1⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FockBasis {
    dim: usize,
}

impl FockBasis {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(QsdError::InvalidBasis(dim));
        }
        Ok(FockBasis { dim })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub(crate) fn check_same(&self, other: &FockBasis) -> Result<()> {
        if self.dim != other.dim {
            return Err(QsdError::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        Ok(())
    }
}

/// A pure state over a truncated Fock basis.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    basis: FockBasis,
    amps: Vec<C64>,
}

impl StateVector {
    /// Wraps raw amplitudes. The vector must have a finite, non-zero norm; it
    /// is not normalized here.
    pub fn new(basis: FockBasis, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != basis.dim() {
            return Err(QsdError::DimensionMismatch {
                left: basis.dim(),
                right: amps.len(),
            });
        }
        let n = norm_sqr(&amps).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(QsdError::DegenerateState);
        }
        Ok(StateVector { basis, amps })
    }

    pub fn number_state(basis: FockBasis, n: usize) -> Result<Self> {
        if n >= basis.dim() {
            return Err(QsdError::param(
                "n",
                format!("number state {} outside basis of dimension {}", n, basis.dim()),
            ));
        }
        let mut amps = vec![ZERO; basis.dim()];
        amps[n] = ONE;
        Ok(StateVector { basis, amps })
    }

    pub fn vacuum(basis: FockBasis) -> Self {
        let mut amps = vec![ZERO; basis.dim()];
        amps[0] = ONE;
        StateVector { basis, amps }
    }

    /// Coherent state `|α⟩`, renormalized over the truncated basis.
    ///
    /// Amplitudes are accumulated in log space so that large `|α|` does not
    /// underflow `e^{−|α|²/2}`.
    pub fn coherent(basis: FockBasis, alpha: C64) -> Self {
        let r = alpha.norm();
        if r == 0.0 {
            return Self::vacuum(basis);
        }
        let theta = alpha.arg();
        let ln_r = r.ln();
        let mut log_mag = -0.5 * r * r;
        let mut amps = Vec::with_capacity(basis.dim());
        // Normalize relative to the largest amplitude to keep exp() in range.
        let mut logs = Vec::with_capacity(basis.dim());
        for n in 0..basis.dim() {
            if n > 0 {
                log_mag += ln_r - 0.5 * (n as f64).ln();
            }
            logs.push(log_mag);
        }
        let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (n, l) in logs.iter().enumerate() {
            amps.push(C64::from_polar((l - peak).exp(), n as f64 * theta));
        }
        let mut psi = StateVector { basis, amps };
        psi.normalize_in_place().expect("coherent state has non-zero norm");
        psi
    }

    /// Coherent state centred at phase-space point `(q, p)`: `α = (q + ip)/√2`.
    pub fn coherent_qp(basis: FockBasis, q: f64, p: f64) -> Self {
        Self::coherent(basis, C64::new(q, p) / std::f64::consts::SQRT_2)
    }

    #[inline]
    pub fn basis(&self) -> FockBasis {
        self.basis
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    #[inline]
    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    #[inline]
    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        norm_sqr(&self.amps).sqrt()
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        self.basis.check_same(&other.basis)?;
        Ok(dot(&self.amps, &other.amps))
    }

    /// `|⟨self|other⟩|²` for normalized states.
    pub fn fidelity(&self, other: &StateVector) -> Result<f64> {
        Ok(self.inner(other)?.norm_sqr())
    }

    pub(crate) fn normalize_in_place(&mut self) -> Result<f64> {
        let n = self.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(QsdError::DegenerateState);
        }
        let inv = 1.0 / n;
        self.amps.iter_mut().for_each(|a| *a *= inv);
        Ok(n)
    }

    pub(crate) fn check_normalized(&self) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(QsdError::NotNormalized { norm: n });
        }
        Ok(())
    }

    /// Probability in the top `k` levels of the basis.
    pub fn tail_mass(&self, k: usize) -> f64 {
        let k = k.min(self.dim());
        self.amps[self.dim() - k..].iter().map(|a| a.norm_sqr()).sum::<f64>()
            / norm_sqr(&self.amps)
    }

    /// Same amplitudes in a basis of a different size: padded with zeros or
    /// truncated (without renormalization).
    pub fn resized(&self, basis: FockBasis) -> StateVector {
        let mut amps = self.amps.clone();
        amps.resize(basis.dim(), ZERO);
        StateVector { basis, amps }
    }

    /// Multiplies by the global phase that makes the largest-magnitude
    /// amplitude real and positive.
    pub fn fix_global_phase(&mut self) {
        let (mut best, mut idx) = (0.0, 0);
        for (i, a) in self.amps.iter().enumerate() {
            let m = a.norm_sqr();
            if m > best {
                best = m;
                idx = i;
            }
        }
        if best == 0.0 {
            return;
        }
        let a = self.amps[idx];
        let phase = a.conj() / a.norm();
        self.amps.iter_mut().for_each(|x| *x *= phase);
    }
}

/// Banded complex operator over a truncated Fock basis.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMatrix {
    basis: FockBasis,
    half_width: usize,
    data: Vec<C64>,
    hermitian: bool,
}

impl OperatorMatrix {
    pub fn zeros(basis: FockBasis, half_width: usize) -> Self {
        let k = half_width.min(basis.dim() - 1);
        OperatorMatrix {
            basis,
            half_width: k,
            data: vec![ZERO; basis.dim() * (2 * k + 1)],
            hermitian: false,
        }
    }

    pub fn identity(basis: FockBasis) -> Self {
        let mut m = Self::zeros(basis, 0);
        m.data.iter_mut().for_each(|x| *x = ONE);
        m.hermitian = true;
        m
    }

    /// Builds the band `|i − j| ≤ half_width` from `f(i, j)`.
    pub fn from_fn(basis: FockBasis, half_width: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(basis, half_width);
        let (d, k) = (basis.dim(), m.half_width);
        for i in 0..d {
            for j in i.saturating_sub(k)..=(i + k).min(d - 1) {
                let idx = m.index(i, j);
                m.data[idx] = f(i, j);
            }
        }
        m
    }

    /// From a row-major dense matrix; the stored band is the smallest that
    /// holds every non-zero entry.
    pub fn from_dense(basis: FockBasis, dense: &[C64]) -> Result<Self> {
        let d = basis.dim();
        if dense.len() != d * d {
            return Err(QsdError::DimensionMismatch {
                left: d * d,
                right: dense.len(),
            });
        }
        let mut k = 0;
        for i in 0..d {
            for j in 0..d {
                if dense[i * d + j] != ZERO {
                    k = k.max(i.abs_diff(j));
                }
            }
        }
        Ok(Self::from_fn(basis, k, |i, j| dense[i * d + j]))
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        i * (2 * self.half_width + 1) + j + self.half_width - i
    }

    #[inline]
    pub fn basis(&self) -> FockBasis {
        self.basis
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    #[inline]
    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        if i.abs_diff(j) > self.half_width || i >= self.dim() || j >= self.dim() {
            ZERO
        } else {
            self.data[self.index(i, j)]
        }
    }

    /// `max_ij |A_ij − conj(A_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let (d, k) = (self.dim(), self.half_width);
        let mut err: f64 = 0.0;
        for i in 0..d {
            for j in i..=(i + k).min(d - 1) {
                err = err.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        err
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Verifies `max|A − A†| ≤ 1e−12` (relative to the largest entry when that
    /// exceeds one) and sets the hermitian flag.
    pub fn into_hermitian(mut self) -> Result<Self> {
        let err = self.hermiticity_error();
        if err > 1e-12 * self.max_abs().max(1.0) {
            return Err(QsdError::param(
                "operator",
                format!("not hermitian: max|A - A†| = {err:e}"),
            ));
        }
        self.hermitian = true;
        Ok(self)
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros(self.basis, self.half_width);
        let (d, k) = (self.dim(), self.half_width);
        for i in 0..d {
            for j in i.saturating_sub(k)..=(i + k).min(d - 1) {
                let idx = m.index(i, j);
                m.data[idx] = self.get(j, i).conj();
            }
        }
        m.hermitian = self.hermitian;
        m
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|x| *x *= c);
        m.hermitian = self.hermitian && c.im == 0.0;
        m
    }

    pub fn scale_real(&self, c: f64) -> Self {
        self.scale(C64::new(c, 0.0))
    }

    /// `self + c·other`; bandwidth is the larger of the two.
    pub fn add_scaled(&self, c: C64, other: &OperatorMatrix) -> Result<Self> {
        self.basis.check_same(&other.basis)?;
        let k = self.half_width.max(other.half_width);
        let mut m = Self::from_fn(self.basis, k, |i, j| self.get(i, j) + c * other.get(i, j));
        m.hermitian = self.hermitian && other.hermitian && c.im == 0.0;
        Ok(m)
    }

    pub fn add(&self, other: &OperatorMatrix) -> Result<Self> {
        self.add_scaled(ONE, other)
    }

    pub fn sub(&self, other: &OperatorMatrix) -> Result<Self> {
        self.add_scaled(-ONE, other)
    }

    /// Adds `c·1`.
    pub fn shift_diagonal(&self, c: C64) -> Self {
        let mut m = self.clone();
        for i in 0..self.dim() {
            let idx = m.index(i, i);
            m.data[idx] += c;
        }
        m.hermitian = self.hermitian && c.im == 0.0;
        m
    }

    /// Matrix product within the truncated basis; the result band is
    /// `k₁ + k₂` (capped at `dim − 1`).
    pub fn mul(&self, other: &OperatorMatrix) -> Result<Self> {
        self.basis.check_same(&other.basis)?;
        let (d, ka, kb) = (self.dim(), self.half_width, other.half_width);
        let mut m = Self::zeros(self.basis, ka + kb);
        let kc = m.half_width;
        for i in 0..d {
            for j in i.saturating_sub(kc)..=(i + kc).min(d - 1) {
                let lo = i.saturating_sub(ka).max(j.saturating_sub(kb));
                let hi = (i + ka).min(j + kb).min(d - 1);
                let mut acc = ZERO;
                for l in lo..=hi {
                    acc += self.data[self.index(i, l)] * other.data[other.index(l, j)];
                }
                let idx = m.index(i, j);
                m.data[idx] = acc;
            }
        }
        Ok(m)
    }

    /// `[A, B] = AB − BA`.
    pub fn commutator(&self, other: &OperatorMatrix) -> Result<Self> {
        self.mul(other)?.sub(&other.mul(self)?)
    }

    /// Restriction to the leading `basis.dim()` levels.
    pub fn cropped(&self, basis: FockBasis) -> Self {
        let mut m = Self::from_fn(basis, self.half_width, |i, j| self.get(i, j));
        m.hermitian = self.hermitian;
        m
    }

    /// `out = A·x`, visiting only the stored band.
    pub fn apply_into(&self, x: &[C64], out: &mut [C64]) {
        let (d, k) = (self.dim(), self.half_width);
        debug_assert!(x.len() == d && out.len() == d);
        let w = 2 * k + 1;
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(k);
            let hi = (i + k).min(d - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let mut acc = ZERO;
            for j in lo..=hi {
                acc += row[j + k - i] * x[j];
            }
            *o = acc;
        }
    }

    /// `out = A†·x` without forming the adjoint.
    pub fn apply_adjoint_into(&self, x: &[C64], out: &mut [C64]) {
        let (d, k) = (self.dim(), self.half_width);
        debug_assert!(x.len() == d && out.len() == d);
        out.iter_mut().for_each(|o| *o = ZERO);
        let w = 2 * k + 1;
        for (i, xi) in x.iter().enumerate() {
            let lo = i.saturating_sub(k);
            let hi = (i + k).min(d - 1);
            let row = &self.data[i * w..(i + 1) * w];
            for j in lo..=hi {
                out[j] += row[j + k - i].conj() * xi;
            }
        }
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        self.basis.check_same(&psi.basis)?;
        let mut out = vec![ZERO; self.dim()];
        self.apply_into(&psi.amps, &mut out);
        Ok(StateVector {
            basis: self.basis,
            amps: out,
        })
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<C64> {
        let d = self.dim();
        let mut out = vec![ZERO; d * d];
        for i in 0..d {
            for j in i.saturating_sub(self.half_width)..=(i + self.half_width).min(d - 1) {
                out[i * d + j] = self.get(i, j);
            }
        }
        out
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        let w = 2 * self.half_width + 1;
        self.data
            .chunks(w)
            .map(|r| r.iter().map(|x| x.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Dense `exp(A)` by scaling and squaring with a Taylor kernel.
    pub fn expm(&self) -> Self {
        let d = self.dim();
        let norm = self.norm_inf();
        let squarings = if norm > 0.25 {
            (norm / 0.25).log2().ceil() as u32
        } else {
            0
        };
        let scaled = self.scale_real(0.5f64.powi(squarings as i32));
        let mut result = Self::identity(self.basis);
        let mut term = Self::identity(self.basis);
        for n in 1..=30 {
            term = term.mul(&scaled).unwrap().scale_real(1.0 / n as f64);
            result = result.add(&term).unwrap();
            if term.max_abs() < 1e-18 {
                break;
            }
        }
        for _ in 0..squarings {
            result = result.mul(&result).unwrap();
        }
        debug_assert!(result.half_width < d);
        result
    }

    /// `exp(A)·x` evaluated as a product of short Taylor series, each over a
    /// sub-interval on which `‖A‖/s ≤ 1/2`. Costs a few band-limited
    /// mat-vecs per sub-interval instead of a dense exponential.
    pub fn expm_apply(&self, x: &[C64]) -> Vec<C64> {
        let d = self.dim();
        let norm = self.norm_inf();
        let substeps = ((norm / 0.5).ceil() as usize).max(1);
        let inv_s = 1.0 / substeps as f64;
        let mut v = x.to_vec();
        let mut term = vec![ZERO; d];
        let mut next = vec![ZERO; d];
        for _ in 0..substeps {
            term.copy_from_slice(&v);
            for n in 1..=40 {
                self.apply_into(&term, &mut next);
                let f = inv_s / n as f64;
                let mut tn = 0.0;
                for (t, nx) in term.iter_mut().zip(next.iter()) {
                    *t = nx * f;
                    tn += t.norm_sqr();
                }
                v.iter_mut().zip(term.iter()).for_each(|(a, b)| *a += b);
                if tn < 1e-36 * norm_sqr(&v) {
                    break;
                }
            }
        }
        v
    }
}

/// Returns `(â, â†)` with `â|n⟩ = √n |n−1⟩`.
pub fn build_ladder(basis: FockBasis) -> Result<(OperatorMatrix, OperatorMatrix)> {
    FockBasis::new(basis.dim())?;
    let a = OperatorMatrix::from_fn(basis, 1, |i, j| {
        if j == i + 1 {
            C64::new((j as f64).sqrt(), 0.0)
        } else {
            ZERO
        }
    });
    let a_dag = a.adjoint();
    Ok((a, a_dag))
}

/// Returns `(Q̂, P̂)` with `Q̂ = (â + â†)/√2`, `P̂ = (â − â†)/(i√2)`.
pub fn build_quadratures(basis: FockBasis) -> Result<(OperatorMatrix, OperatorMatrix)> {
    let (a, a_dag) = build_ladder(basis)?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let q = a.add(&a_dag)?.scale_real(s).into_hermitian()?;
    let p = a.sub(&a_dag)?.scale(C64::new(0.0, -s)).into_hermitian()?;
    Ok((q, p))
}

/// `n̂ = â†â`.
pub fn number_operator(basis: FockBasis) -> OperatorMatrix {
    let mut m = OperatorMatrix::from_fn(basis, 0, |i, _| C64::new(i as f64, 0.0));
    m.hermitian = true;
    m
}

/// Builds a polynomial in `(Q̂, P̂)` in a basis padded by `degree` levels and
/// crops it back, so every retained entry equals the corresponding entry of
/// the untruncated operator.
pub fn quadrature_polynomial(
    basis: FockBasis,
    degree: usize,
    f: impl Fn(&OperatorMatrix, &OperatorMatrix) -> Result<OperatorMatrix>,
) -> Result<OperatorMatrix> {
    let padded = FockBasis::new(basis.dim() + degree)?;
    let (q, p) = build_quadratures(padded)?;
    let big = f(&q, &p)?;
    let hermitian = big.hermiticity_error() <= 1e-12 * big.max_abs().max(1.0);
    let mut m = big.cropped(basis);
    if hermitian {
        m = m.into_hermitian()?;
    }
    Ok(m)
}

/// `⟨ψ|Ô|ψ⟩`. For operators flagged hermitian the imaginary residue is
/// checked and discarded.
pub fn expectation(op: &OperatorMatrix, psi: &StateVector) -> Result<C64> {
    op.basis.check_same(&psi.basis)?;
    psi.check_normalized()?;
    let mut tmp = vec![ZERO; op.dim()];
    op.apply_into(&psi.amps, &mut tmp);
    let v = dot(&psi.amps, &tmp);
    if op.hermitian {
        let tol = 1e-10 * v.re.abs().max(1.0);
        assert!(
            v.im.abs() <= tol,
            "hermitian expectation has imaginary residue {:e}",
            v.im
        );
        return Ok(C64::new(v.re, 0.0));
    }
    Ok(v)
}

/// The five Gaussian moments of a state.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MomentSet {
    pub q_mean: f64,
    pub p_mean: f64,
    pub var_q: f64,
    pub var_p: f64,
    /// `⟨ΔQΔP + ΔPΔQ⟩`
    pub sym_cov: f64,
}

impl MomentSet {
    /// Moments of a coherent state centred at `(q, p)`.
    pub fn coherent(q: f64, p: f64) -> Self {
        MomentSet {
            q_mean: q,
            p_mean: p,
            var_q: 0.5,
            var_p: 0.5,
            sym_cov: 0.0,
        }
    }

    /// `var_q·var_p − (sym_cov/2)²`, bounded below by 1/4 for physical states.
    pub fn uncertainty_product(&self) -> f64 {
        self.var_q * self.var_p - 0.25 * self.sym_cov * self.sym_cov
    }
}

pub fn moments(psi: &StateVector, q: &OperatorMatrix, p: &OperatorMatrix) -> Result<MomentSet> {
    q.basis.check_same(&psi.basis)?;
    p.basis.check_same(&psi.basis)?;
    psi.check_normalized()?;
    Ok(moments_unchecked(&psi.amps, q, p))
}

/// Moments from `Q̂ψ` and `P̂ψ`: `⟨Q²⟩ = ‖Q̂ψ‖²`, `⟨QP+PQ⟩ = 2 Re⟨Q̂ψ|P̂ψ⟩`.
pub(crate) fn moments_unchecked(psi: &[C64], q: &OperatorMatrix, p: &OperatorMatrix) -> MomentSet {
    let d = psi.len();
    let mut qpsi = vec![ZERO; d];
    let mut ppsi = vec![ZERO; d];
    q.apply_into(psi, &mut qpsi);
    p.apply_into(psi, &mut ppsi);
    let q_mean = dot(psi, &qpsi).re;
    let p_mean = dot(psi, &ppsi).re;
    let q2 = norm_sqr(&qpsi);
    let p2 = norm_sqr(&ppsi);
    let qp = 2.0 * dot(&qpsi, &ppsi).re;
    MomentSet {
        q_mean,
        p_mean,
        var_q: (q2 - q_mean * q_mean).max(0.0),
        var_p: (p2 - p_mean * p_mean).max(0.0),
        sym_cov: qp - 2.0 * q_mean * p_mean,
    }
}

pub fn normalize(psi: &StateVector) -> Result<StateVector> {
    let mut out = psi.clone();
    out.normalize_in_place()?;
    Ok(out)
}

/// Probability in the top `k` levels; see [`StateVector::tail_mass`].
pub fn tail_mass(psi: &StateVector, k: usize) -> f64 {
    psi.tail_mass(k)
}

#[inline]
pub(crate) fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[inline]
pub(crate) fn norm_sqr(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn basis(d: usize) -> FockBasis {
        FockBasis::new(d).unwrap()
    }

    #[test]
    fn rejects_small_basis() {
        assert!(matches!(FockBasis::new(1), Err(QsdError::InvalidBasis(1))));
        assert!(FockBasis::new(0).is_err());
    }

    #[test]
    fn ladder_dim2_is_exact() {
        let (a, a_dag) = build_ladder(basis(2)).unwrap();
        assert_eq!(a.to_dense(), vec![ZERO, ONE, ZERO, ZERO]);
        assert_eq!(a_dag.to_dense(), vec![ZERO, ZERO, ONE, ZERO]);
    }

    #[test]
    fn ladder_commutator_is_identity_away_from_edge() {
        let b = basis(40);
        let (a, a_dag) = build_ladder(b).unwrap();
        let c = a.commutator(&a_dag).unwrap();
        for i in 0..39 {
            for j in 0..39 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(c.get(i, j).re, want, epsilon = 1e-12);
                assert_abs_diff_eq!(c.get(i, j).im, 0.0, epsilon = 1e-12);
            }
        }
        // The truncation edge is where the relation fails.
        assert_abs_diff_eq!(c.get(39, 39).re, -39.0, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_commutator_and_ladder_identity() {
        let b = basis(30);
        let (q, p) = build_quadratures(b).unwrap();
        let (a, _) = build_ladder(b).unwrap();
        let c = q.commutator(&p).unwrap();
        for i in 0..29 {
            for j in 0..29 {
                let want = if i == j { I } else { ZERO };
                assert!((c.get(i, j) - want).norm() < 1e-12);
            }
        }
        let lhs = q.add_scaled(I, &p).unwrap();
        let rhs = a.scale_real(std::f64::consts::SQRT_2);
        for i in 0..30 {
            for j in 0..30 {
                assert!((lhs.get(i, j) - rhs.get(i, j)).norm() < 1e-14);
            }
        }
        assert!(q.is_hermitian() && p.is_hermitian());
    }

    #[test]
    fn number_state_expectations() {
        let b = basis(10);
        let n = number_operator(b);
        let psi = StateVector::number_state(b, 3).unwrap();
        assert_eq!(expectation(&n, &psi).unwrap(), C64::new(3.0, 0.0));
        let id = OperatorMatrix::identity(b);
        assert_abs_diff_eq!(expectation(&id, &psi).unwrap().re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn expectation_error_paths() {
        let b = basis(6);
        let n = number_operator(b);
        let psi = StateVector::new(b, vec![C64::new(2.0, 0.0); 6]).unwrap();
        assert!(matches!(expectation(&n, &psi), Err(QsdError::NotNormalized { .. })));
        let other = StateVector::vacuum(basis(7));
        assert!(matches!(
            expectation(&n, &other),
            Err(QsdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vacuum_and_fock_moments() {
        let b = basis(20);
        let (q, p) = build_quadratures(b).unwrap();
        let m = moments(&StateVector::vacuum(b), &q, &p).unwrap();
        assert_abs_diff_eq!(m.q_mean, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.p_mean, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.var_q, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.var_p, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.sym_cov, 0.0, epsilon = 1e-15);
        let m1 = moments(&StateVector::number_state(b, 1).unwrap(), &q, &p).unwrap();
        assert_abs_diff_eq!(m1.var_q, 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(m1.var_p, 1.5, epsilon = 1e-14);
    }

    #[test]
    fn normalize_cases() {
        let b = basis(4);
        let psi = StateVector::new(b, vec![C64::new(2.0, 0.0), ZERO, ZERO, ZERO]).unwrap();
        let n = normalize(&psi).unwrap();
        assert_eq!(n.amplitudes()[0], ONE);
        let again = normalize(&n).unwrap();
        for (x, y) in again.amplitudes().iter().zip(n.amplitudes()) {
            assert!((x - y).norm() <= 1e-15);
        }
        assert!(matches!(
            StateVector::new(b, vec![ZERO; 4]),
            Err(QsdError::DegenerateState)
        ));
    }

    #[test]
    fn tail_mass_counts_top_levels() {
        let b = basis(5);
        let amps = vec![ONE, ZERO, ZERO, ONE, ONE];
        let psi = normalize(&StateVector::new(b, amps).unwrap()).unwrap();
        assert_abs_diff_eq!(psi.tail_mass(1), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(psi.tail_mass(2), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(psi.tail_mass(10), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn banded_product_matches_dense_product() {
        let b = basis(12);
        let (q, p) = build_quadratures(b).unwrap();
        let qp = q.mul(&p).unwrap();
        let dq = q.to_dense();
        let dp = p.to_dense();
        for i in 0..12 {
            for j in 0..12 {
                let want: C64 = (0..12).map(|l| dq[i * 12 + l] * dp[l * 12 + j]).sum();
                assert!((qp.get(i, j) - want).norm() < 1e-14);
            }
        }
        assert_eq!(qp.half_width(), 2);
    }

    #[test]
    fn expm_apply_matches_dense_expm() {
        let b = basis(16);
        let (q, p) = build_quadratures(b).unwrap();
        // Anti-hermitian generator of a displacement.
        let gen = q.scale(C64::new(0.0, 0.7)).add_scaled(C64::new(0.0, 0.4), &p).unwrap();
        let dense = gen.expm();
        let psi = StateVector::coherent(b, C64::new(0.3, -0.2));
        let via_dense = dense.apply(&psi).unwrap();
        let via_action = gen.expm_apply(psi.amplitudes());
        for (x, y) in via_dense.amplitudes().iter().zip(&via_action) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn fix_global_phase_makes_peak_real_positive() {
        let b = basis(3);
        let mut psi =
            StateVector::new(b, vec![C64::new(0.1, 0.0), C64::new(0.0, -0.9), ZERO]).unwrap();
        psi.fix_global_phase();
        let a = psi.amplitudes()[1];
        assert!(a.re > 0.0 && a.im.abs() < 1e-15);
    }
}
