//! Lindblad master equation integrator, used as the oracle for QSD
//! ensembles at small basis sizes.

use nalgebra::DMatrix;

use crate::error::{QsdError, Result};
use crate::fockspace::{FockBasis, OperatorMatrix, StateVector, C64, ZERO};
use crate::models::OpenSystem;

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-8;

/// Default guard on the basis size accepted by [`master_evolve`].
pub const ORACLE_MAX_DIM: usize = 512;

/// A density operator stored densely, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    basis: FockBasis,
    data: Vec<C64>,
}

impl DensityMatrix {
    /// Validates hermiticity, unit trace and positivity.
    pub fn new(basis: FockBasis, data: Vec<C64>) -> Result<Self> {
        let rho = Self::from_entries(basis, data)?;
        rho.check_invariants(1.0)?;
        Ok(rho)
    }

    /// No invariant checks beyond the shape.
    pub fn from_entries(basis: FockBasis, data: Vec<C64>) -> Result<Self> {
        if data.len() != basis.dim() * basis.dim() {
            return Err(QsdError::DimensionMismatch {
                left: basis.dim() * basis.dim(),
                right: data.len(),
            });
        }
        Ok(DensityMatrix { basis, data })
    }

    pub fn from_pure(psi: &StateVector) -> Self {
        let mut acc = DensityAccumulator::new(psi.basis());
        acc.add(psi).expect("same basis");
        acc.finish().expect("one state")
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
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.dim() + j]
    }

    pub fn entries(&self) -> &[C64] {
        &self.data
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    /// `Tr ρ²`.
    pub fn purity(&self) -> f64 {
        // Tr ρ² = Σ_ij ρ_ij ρ_ji = Σ_ij |ρ_ij|² for hermitian ρ.
        self.data.iter().map(|x| x.norm_sqr()).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut err: f64 = 0.0;
        for i in 0..d {
            for j in i..d {
                err = err.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        err
    }

    /// Eigenvalues of the hermitian part, ascending. Computed from the real
    /// symmetric embedding `[[Re H, −Im H], [Im H, Re H]]`, whose spectrum
    /// is that of `H` with every eigenvalue doubled. Entries below 1e-100
    /// are flushed to zero: the eigensolver returns NaN once products of
    /// such entries underflow to subnormals.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let d = self.dim();
        let flush = |x: f64| if x.abs() < 1e-100 { 0.0 } else { x };
        let herm = |i: usize, j: usize| {
            let h = 0.5 * (self.get(i, j) + self.get(j, i).conj());
            C64::new(flush(h.re), flush(h.im))
        };
        let m = DMatrix::<f64>::from_fn(2 * d, 2 * d, |r, c| {
            let (i, j) = (r % d, c % d);
            let h = herm(i, j);
            match (r < d, c < d) {
                (true, true) | (false, false) => h.re,
                (true, false) => -h.im,
                (false, true) => h.im,
            }
        });
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().cloned().collect();
        ev.sort_by(f64::total_cmp);
        ev.into_iter().step_by(2).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// `½ Tr|ρ − σ|`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64> {
        self.basis.check_same(&other.basis)?;
        let diff = DensityMatrix {
            basis: self.basis,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        };
        Ok(0.5 * diff.eigenvalues().iter().map(|x| x.abs()).sum::<f64>())
    }

    /// `Tr(ρ Ô)`.
    pub fn expectation(&self, op: &OperatorMatrix) -> Result<C64> {
        self.basis.check_same(&op.basis())?;
        let d = self.dim();
        let k = op.half_width();
        let mut acc = ZERO;
        for i in 0..d {
            for j in i.saturating_sub(k)..=(i + k).min(d - 1) {
                acc += self.get(j, i) * op.get(i, j);
            }
        }
        Ok(acc)
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn population(&self, psi: &StateVector) -> Result<f64> {
        self.basis.check_same(&psi.basis())?;
        let d = self.dim();
        let a = psi.amplitudes();
        let mut acc = ZERO;
        for i in 0..d {
            let mut row = ZERO;
            for j in 0..d {
                row += self.get(i, j) * a[j];
            }
            acc += a[i].conj() * row;
        }
        Ok(acc.re)
    }

    /// Checks the invariants with tolerances multiplied by `slack`.
    pub fn check_invariants(&self, slack: f64) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > HERMITIAN_TOL * slack {
            return Err(QsdError::TruncationTooSmall {
                what: format!("hermiticity error {herm:e}"),
            });
        }
        let tr = self.trace();
        if (tr - 1.0).norm() > TRACE_TOL * slack {
            return Err(QsdError::TruncationTooSmall {
                what: format!("trace {tr}"),
            });
        }
        let min = self.min_eigenvalue();
        if min < -POSITIVITY_TOL * slack {
            return Err(QsdError::TruncationTooSmall {
                what: format!("minimum eigenvalue {min:e}"),
            });
        }
        Ok(())
    }
}

/// Accumulates `Σ |ψ⟩⟨ψ|` over an ensemble. Merging is commutative and
/// associative, so partial sums from parallel workers can be combined in
/// any order.
#[derive(Clone, Debug)]
pub struct DensityAccumulator {
    basis: FockBasis,
    sum: Vec<C64>,
    count: usize,
}

impl DensityAccumulator {
    pub fn new(basis: FockBasis) -> Self {
        DensityAccumulator {
            basis,
            sum: vec![ZERO; basis.dim() * basis.dim()],
            count: 0,
        }
    }

    pub fn add(&mut self, psi: &StateVector) -> Result<()> {
        self.basis.check_same(&psi.basis())?;
        let d = self.basis.dim();
        let a = psi.amplitudes();
        let w = 1.0 / psi.norm().powi(2);
        for i in 0..d {
            let ai = a[i] * w;
            for j in 0..d {
                self.sum[i * d + j] += ai * a[j].conj();
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(mut self, other: DensityAccumulator) -> Result<Self> {
        self.basis.check_same(&other.basis)?;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.count += other.count;
        Ok(self)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<DensityMatrix> {
        if self.count == 0 {
            return Err(QsdError::param("states", "ensemble is empty"));
        }
        let inv = 1.0 / self.count as f64;
        Ok(DensityMatrix {
            basis: self.basis,
            data: self.sum.into_iter().map(|x| x * inv).collect(),
        })
    }
}

// (A·ρ) with banded A and dense ρ.
fn band_dense(a: &OperatorMatrix, rho: &[C64], d: usize, out: &mut [C64]) {
    let k = a.half_width();
    for i in 0..d {
        let lo = i.saturating_sub(k);
        let hi = (i + k).min(d - 1);
        let row = &mut out[i * d..(i + 1) * d];
        row.iter_mut().for_each(|x| *x = ZERO);
        for l in lo..=hi {
            let c = a.get(i, l);
            if c == ZERO {
                continue;
            }
            let src = &rho[l * d..(l + 1) * d];
            for (o, r) in row.iter_mut().zip(src) {
                *o += c * r;
            }
        }
    }
}

// (ρ·B†) with dense ρ and banded B.
fn dense_band_adjoint(rho: &[C64], b: &OperatorMatrix, d: usize, out: &mut [C64]) {
    let k = b.half_width();
    for i in 0..d {
        let src = &rho[i * d..(i + 1) * d];
        for j in 0..d {
            let lo = j.saturating_sub(k);
            let hi = (j + k).min(d - 1);
            let mut acc = ZERO;
            for l in lo..=hi {
                acc += src[l] * b.get(j, l).conj();
            }
            out[i * d + j] = acc;
        }
    }
}

/// The Lindblad generator at one time, written as
/// `ρ̇ = Aρ + ρA† + Σ_j L_j ρ L_j†` with `A = −iH − ½ Σ_j L_j†L_j`.
struct Generator {
    a: OperatorMatrix,
    lindblads: Vec<OperatorMatrix>,
}

impl Generator {
    fn new<M: OpenSystem + ?Sized>(model: &M, t: f64) -> Result<Self> {
        let mut a = model.hamiltonian_at(t).scale(C64::new(0.0, -1.0));
        for l in model.lindblads() {
            a = a.add_scaled(C64::new(-0.5, 0.0), &l.adjoint().mul(l)?)?;
        }
        Ok(Generator {
            a,
            lindblads: model.lindblads().to_vec(),
        })
    }

    fn apply(&self, rho: &[C64], d: usize, out: &mut [C64], tmp: &mut [C64], tmp2: &mut [C64]) {
        band_dense(&self.a, rho, d, out);
        dense_band_adjoint(rho, &self.a, d, tmp);
        out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o += t);
        for l in &self.lindblads {
            dense_band_adjoint(rho, l, d, tmp);
            band_dense(l, tmp, d, tmp2);
            out.iter_mut().zip(tmp2.iter()).for_each(|(o, t)| *o += t);
        }
    }
}

/// Time derivative of `ρ` under the Lindblad equation, row-major.
pub fn master_rhs<M: OpenSystem + ?Sized>(rho: &DensityMatrix, model: &M, t: f64) -> Result<Vec<C64>> {
    rho.basis.check_same(&model.basis())?;
    let d = rho.dim();
    let gen = Generator::new(model, t)?;
    let mut out = vec![ZERO; d * d];
    let mut tmp = vec![ZERO; d * d];
    let mut tmp2 = vec![ZERO; d * d];
    gen.apply(&rho.data, d, &mut out, &mut tmp, &mut tmp2);
    Ok(out)
}

/// Fixed-step RK4 on the master equation from `t0` to `t_end`.
pub fn master_evolve<M: OpenSystem + ?Sized>(
    rho0: &DensityMatrix,
    model: &M,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<DensityMatrix> {
    master_evolve_capped(rho0, model, t0, t_end, dt, ORACLE_MAX_DIM)
}

/// As [`master_evolve`] with an explicit basis-size guard.
pub fn master_evolve_capped<M: OpenSystem + ?Sized>(
    rho0: &DensityMatrix,
    model: &M,
    t0: f64,
    t_end: f64,
    dt: f64,
    max_dim: usize,
) -> Result<DensityMatrix> {
    rho0.basis.check_same(&model.basis())?;
    if !(dt > 0.0) {
        return Err(QsdError::param("dt", "must be > 0"));
    }
    if t_end < t0 {
        return Err(QsdError::param("t_end", "must not precede t0"));
    }
    let d = rho0.dim();
    if d > max_dim {
        return Err(QsdError::param(
            "dim",
            format!("{d} exceeds the master-equation oracle cap of {max_dim}"),
        ));
    }
    let n_steps = ((t_end - t0) / dt - 1e-9).ceil().max(0.0) as usize;
    let h = if n_steps > 0 { (t_end - t0) / n_steps as f64 } else { 0.0 };

    let n = d * d;
    let mut rho = rho0.data.clone();
    let mut k = [vec![ZERO; n], vec![ZERO; n], vec![ZERO; n], vec![ZERO; n]];
    let mut stage = vec![ZERO; n];
    let mut tmp = vec![ZERO; n];
    let mut tmp2 = vec![ZERO; n];
    let gen_at = |t: f64| Generator::new(model, t);
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        let g0 = gen_at(t)?;
        let gm = gen_at(t + 0.5 * h)?;
        let g1 = gen_at(t + h)?;
        g0.apply(&rho, d, &mut k[0], &mut tmp, &mut tmp2);
        for (s, (r, k0)) in stage.iter_mut().zip(rho.iter().zip(&k[0])) {
            *s = r + 0.5 * h * k0;
        }
        gm.apply(&stage, d, &mut k[1], &mut tmp, &mut tmp2);
        for (s, (r, k1)) in stage.iter_mut().zip(rho.iter().zip(&k[1])) {
            *s = r + 0.5 * h * k1;
        }
        gm.apply(&stage, d, &mut k[2], &mut tmp, &mut tmp2);
        for (s, (r, k2)) in stage.iter_mut().zip(rho.iter().zip(&k[2])) {
            *s = r + h * k2;
        }
        g1.apply(&stage, d, &mut k[3], &mut tmp, &mut tmp2);
        for i in 0..n {
            rho[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        if rho.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
            return Err(QsdError::Instability { t: t + h, dt: h });
        }
    }
    let out = DensityMatrix {
        basis: rho0.basis,
        data: rho,
    };
    out.check_invariants(10.0)?;
    Ok(out)
}
