//! Small dense complex linear algebra for few-level Hilbert spaces.
//!
//! Everything is row-major `Vec<Complex64>`. Dimensions are expected to be
//! small (2 to a few dozen), so there is no blocking or sparse storage.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Tolerance on the squared norm for a state to count as unit-norm.
pub const NORM_TOL: f64 = 1e-12;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

pub fn norm_sq(amps: &[C64]) -> f64 {
    amps.iter().map(|a| a.norm_sqr()).sum()
}

/// `<u|v>`, conjugate-linear in the first argument.
pub fn inner(u: &[C64], v: &[C64]) -> Result<C64> {
    check_dim(u.len(), v.len())?;
    Ok(u.iter().zip(v).map(|(a, b)| a.conj() * b).sum())
}

/// A unit-norm state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<C64>", into = "Vec<C64>")]
pub struct StateVector {
    amps: Vec<C64>,
}

impl StateVector {
    /// Wraps amplitudes that must already be normalized.
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        let n = norm_sq(&amps);
        if amps.is_empty() || (n - 1.0).abs() > NORM_TOL || amps.iter().any(|a| !a.is_finite()) {
            return Err(Error::StateAnnihilated { norm_sq: n });
        }
        Ok(Self { amps })
    }

    /// Normalizes arbitrary nonzero amplitudes.
    pub fn normalized(amps: Vec<C64>) -> Result<Self> {
        let n = norm_sq(&amps);
        if !n.is_finite() || n <= 1e-30 {
            return Err(Error::StateAnnihilated { norm_sq: n });
        }
        let s = 1.0 / n.sqrt();
        Ok(Self {
            amps: amps.into_iter().map(|a| a * s).collect(),
        })
    }

    /// Computational basis state `|k>`.
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut amps = vec![ZERO; dim];
        amps[k] = ONE;
        Self { amps }
    }

    pub(crate) fn from_raw_unchecked(amps: Vec<C64>) -> Self {
        Self { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn into_amps(self) -> Vec<C64> {
        self.amps
    }

    /// Populations `|<k|psi>|^2` in the computational basis.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }
}

impl TryFrom<Vec<C64>> for StateVector {
    type Error = Error;

    fn try_from(amps: Vec<C64>) -> Result<Self> {
        StateVector::new(amps)
    }
}

impl From<StateVector> for Vec<C64> {
    fn from(v: StateVector) -> Self {
        v.amps
    }
}

/// Square complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    dim: usize,
    data: Vec<C64>,
}

impl Operator {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![ZERO; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut op = Self::zeros(dim);
        for k in 0..dim {
            op.data[k * dim + k] = ONE;
        }
        op
    }

    /// Builds from row-major entries; `entries.len()` must be a perfect square.
    pub fn from_row_major(entries: Vec<C64>) -> Result<Self> {
        let dim = (entries.len() as f64).sqrt().round() as usize;
        if dim == 0 || dim * dim != entries.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: entries.len(),
            });
        }
        Ok(Self { dim, data: entries })
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            for c in 0..dim {
                data.push(f(r, c));
            }
        }
        Self { dim, data }
    }

    /// `|bra><ket|`-style outer product `|u><v|`.
    pub fn outer(u: &[C64], v: &[C64]) -> Self {
        assert_eq!(u.len(), v.len());
        Self::from_fn(u.len(), |r, c| u[r] * v[c].conj())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.dim + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, z: C64) {
        self.data[r * self.dim + c] = z;
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.dim, |r, c| self.get(c, r).conj())
    }

    pub fn matmul(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        let d = self.dim;
        let mut out = Self::zeros(d);
        for r in 0..d {
            for k in 0..d {
                let a = self.data[r * d + k];
                if a == ZERO {
                    continue;
                }
                for c in 0..d {
                    out.data[r * d + c] += a * other.data[k * d + c];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        Ok(Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        Ok(Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: C64, other: &Operator) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|k| self.get(k, k)).sum()
    }

    /// Largest entrywise deviation `|A_rc - conj(A_cr)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.dim {
            for c in r..self.dim {
                worst = worst.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn max_abs_diff(&self, other: &Operator) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

/// Matrix-vector product `op * v`; `v` need not be normalized.
pub fn apply(op: &Operator, v: &[C64]) -> Result<Vec<C64>> {
    check_dim(op.dim, v.len())?;
    let d = op.dim;
    let mut out = vec![ZERO; d];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &op.data[r * d..(r + 1) * d];
        let mut acc = ZERO;
        for (a, b) in row.iter().zip(v) {
            acc += a * b;
        }
        *o = acc;
    }
    Ok(out)
}

pub fn adjoint(op: &Operator) -> Operator {
    op.adjoint()
}

/// `<v|op|v>`.
pub fn expectation(v: &StateVector, op: &Operator) -> Result<C64> {
    let w = apply(op, v.amps())?;
    inner(v.amps(), &w)
}

/// `|<u|v>|^2`, invariant under global phase of either argument.
pub fn overlap_fidelity(u: &StateVector, v: &StateVector) -> Result<f64> {
    Ok(inner(u.amps(), v.amps())?.norm_sqr())
}

/// Fidelity between a unit state and an arbitrary nonzero vector, after normalizing the latter.
pub fn fidelity_unnormalized(u: &StateVector, w: &[C64]) -> Result<f64> {
    let n = norm_sq(w);
    Ok(inner(u.amps(), w)?.norm_sqr() / n)
}

/// Density matrix; a thin wrapper over [`Operator`] with physical checks.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Operator);

impl DensityMatrix {
    pub fn from_pure(v: &StateVector) -> Self {
        Self(Operator::outer(v.amps(), v.amps()))
    }

    pub fn from_operator(op: Operator) -> Self {
        Self(op)
    }

    pub fn as_operator(&self) -> &Operator {
        &self.0
    }

    pub fn into_operator(self) -> Operator {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.0.get(r, c)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// `tr(rho * obs)`.
    pub fn expectation(&self, obs: &Operator) -> Result<C64> {
        check_dim(self.dim(), obs.dim)?;
        let d = self.dim();
        let mut acc = ZERO;
        for r in 0..d {
            for k in 0..d {
                acc += self.0.get(r, k) * obs.get(k, r);
            }
        }
        Ok(acc)
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let d = self.dim();
        let m = DMatrix::from_fn(d, d, |r, c| {
            (self.0.get(r, c) + self.0.get(c, r).conj()) * 0.5
        });
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Names every violated density-matrix property at the given tolerances.
    pub fn check(&self, herm_tol: f64, trace_tol: f64, psd_tol: f64) -> Vec<String> {
        let mut issues = Vec::new();
        let h = self.0.hermiticity_error();
        if h > herm_tol {
            issues.push(format!("density matrix not Hermitian (deviation {h:e})"));
        }
        let tr = self.0.trace();
        if (tr.re - 1.0).abs() > trace_tol || tr.im.abs() > trace_tol {
            issues.push(format!("trace {tr} differs from 1"));
        }
        let min = self.min_eigenvalue();
        if min < -psd_tol {
            issues.push(format!("negative eigenvalue {min:e}"));
        }
        issues
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sigma_minus() -> Operator {
        let mut op = Operator::zeros(2);
        op.set(0, 1, ONE);
        op
    }

    fn ground() -> StateVector {
        StateVector::basis(2, 0)
    }

    fn excited() -> StateVector {
        StateVector::basis(2, 1)
    }

    fn plus() -> StateVector {
        StateVector::normalized(vec![ONE, ONE]).unwrap()
    }

    #[test]
    fn apply_basis_actions() {
        let v = plus();
        assert_eq!(apply(&Operator::identity(2), v.amps()).unwrap(), v.amps());
        assert_eq!(apply(&sigma_minus(), excited().amps()).unwrap(), ground().amps());
        assert_eq!(apply(&sigma_minus(), ground().amps()).unwrap(), vec![ZERO, ZERO]);
    }

    #[test]
    fn apply_dimension_mismatch() {
        let err = apply(&Operator::identity(3), ground().amps()).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 3, found: 2 });
    }

    #[test]
    fn adjoint_cases() {
        let sp = adjoint(&sigma_minus());
        assert_eq!(sp.get(1, 0), ONE);
        assert_eq!(sp.get(0, 1), ZERO);
        let h = Operator::from_row_major(vec![
            C64::new(1.0, 0.0),
            C64::new(0.5, -0.25),
            C64::new(0.5, 0.25),
            C64::new(-2.0, 0.0),
        ])
        .unwrap();
        assert_eq!(adjoint(&h), h);
        let a = Operator::from_fn(3, |r, c| C64::new(r as f64, c as f64 + 0.5));
        assert_eq!(adjoint(&adjoint(&a)), a);
    }

    #[test]
    fn expectation_of_excited_projector() {
        let p = adjoint(&sigma_minus()).matmul(&sigma_minus()).unwrap();
        assert_abs_diff_eq!(expectation(&excited(), &p).unwrap().re, 1.0);
        assert_abs_diff_eq!(expectation(&ground(), &p).unwrap().re, 0.0);
        assert_abs_diff_eq!(expectation(&plus(), &p).unwrap().re, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn fidelity_cases() {
        let v = plus();
        assert_abs_diff_eq!(overlap_fidelity(&v, &v).unwrap(), 1.0, epsilon = 1e-15);
        let phase = C64::from_polar(1.0, 0.7);
        let u = StateVector::new(v.amps().iter().map(|a| a * phase).collect()).unwrap();
        assert_abs_diff_eq!(overlap_fidelity(&u, &v).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(overlap_fidelity(&ground(), &excited()).unwrap(), 0.0);
        assert!(overlap_fidelity(&ground(), &StateVector::basis(3, 0)).is_err());
    }

    #[test]
    fn state_vector_rejects_unnormalized() {
        assert!(StateVector::new(vec![ONE, ONE]).is_err());
        assert!(StateVector::normalized(vec![ZERO, ZERO]).is_err());
    }

    #[test]
    fn density_checks() {
        let rho = DensityMatrix::from_pure(&plus());
        assert!(rho.check(1e-12, 1e-10, 1e-10).is_empty());
        let mut bad = rho.clone().into_operator();
        bad.set(0, 0, C64::new(-0.5, 0.0));
        bad.set(1, 1, C64::new(1.5, 0.0));
        let issues = DensityMatrix::from_operator(bad).check(1e-12, 1e-10, 1e-10);
        assert_eq!(issues.len(), 1, "{issues:?}");
    }

    fn arb_c64() -> impl Strategy<Value = C64> {
        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| C64::new(a, b))
    }

    fn arb_state(dim: usize) -> impl Strategy<Value = StateVector> {
        prop::collection::vec(arb_c64(), dim)
            .prop_filter_map("nonzero", |v| StateVector::normalized(v).ok())
    }

    proptest! {
        #[test]
        fn fidelity_symmetric_and_phase_invariant(u in arb_state(3), v in arb_state(3), theta in 0.0f64..6.3) {
            let f = overlap_fidelity(&u, &v).unwrap();
            prop_assert!((f - overlap_fidelity(&v, &u).unwrap()).abs() < 1e-14);
            let ph = C64::from_polar(1.0, theta);
            let w = StateVector::from_raw_unchecked(u.amps().iter().map(|a| a * ph).collect());
            prop_assert!((f - overlap_fidelity(&w, &v).unwrap()).abs() < 1e-14);
            prop_assert!((-1e-15..=1.0 + 1e-12).contains(&f));
        }

        #[test]
        fn hermitian_expectation_is_real(v in arb_state(4), entries in prop::collection::vec(arb_c64(), 16)) {
            let a = Operator::from_row_major(entries).unwrap();
            let h = a.add(&a.adjoint()).unwrap();
            prop_assert!(expectation(&v, &h).unwrap().im.abs() < 1e-12);
        }

        #[test]
        fn apply_is_linear(
            u in prop::collection::vec(arb_c64(), 3),
            v in prop::collection::vec(arb_c64(), 3),
            entries in prop::collection::vec(arb_c64(), 9),
            alpha in arb_c64(),
            beta in arb_c64(),
        ) {
            let a = Operator::from_row_major(entries).unwrap();
            let combo: Vec<C64> = u.iter().zip(&v).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = apply(&a, &combo).unwrap();
            let au = apply(&a, &u).unwrap();
            let av = apply(&a, &v).unwrap();
            for k in 0..3 {
                prop_assert!((lhs[k] - (alpha * au[k] + beta * av[k])).norm() < 1e-12);
            }
        }
    }
}
