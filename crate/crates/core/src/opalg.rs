//! Operators and states on the atom ⊗ cavity-mode product space.
//!
//! The atom is a four-level system with levels 3, 4, 3′, 4′ and the field is
//! a single mode truncated at `n_max` photons. Tensor ordering is always
//! atom ⊗ field, so basis index `i = level.index() * (n_max + 1) + n`.

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

/// Atomic level. `L3`/`L4` are the ground hyperfine levels F = 3, 4 and
/// `L3p`/`L4p` the excited levels F′ = 3′, 4′.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    L3,
    L4,
    L3p,
    L4p,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::L3, Level::L4, Level::L3p, Level::L4p];

    pub fn index(self) -> usize {
        match self {
            Level::L3 => 0,
            Level::L4 => 1,
            Level::L3p => 2,
            Level::L4p => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Level::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::L3 => "3",
            Level::L4 => "4",
            Level::L3p => "3'",
            Level::L4p => "4'",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Level> {
        match s.trim() {
            "3" => Ok(Level::L3),
            "4" => Ok(Level::L4),
            "3'" | "3p" | "3′" => Ok(Level::L3p),
            "4'" | "4p" | "4′" => Ok(Level::L4p),
            other => invalid(format!("unknown atomic level {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HilbertSpace {
    fock_cutoff: usize,
}

impl HilbertSpace {
    pub const ATOM_DIM: usize = 4;

    pub fn new(fock_cutoff: usize) -> Result<Self> {
        if fock_cutoff < 1 {
            return invalid("Fock cutoff must be at least 1");
        }
        Ok(HilbertSpace { fock_cutoff })
    }

    pub fn fock_cutoff(&self) -> usize {
        self.fock_cutoff
    }

    pub fn atom_dim(&self) -> usize {
        Self::ATOM_DIM
    }

    pub fn field_dim(&self) -> usize {
        self.fock_cutoff + 1
    }

    pub fn dim(&self) -> usize {
        self.atom_dim() * self.field_dim()
    }

    pub fn index(&self, level: Level, n: usize) -> usize {
        debug_assert!(n <= self.fock_cutoff);
        level.index() * self.field_dim() + n
    }

    /// Inverse of [`HilbertSpace::index`].
    pub fn label(&self, i: usize) -> (Level, usize) {
        let level = Level::from_index(i / self.field_dim()).expect("index out of range");
        (level, i % self.field_dim())
    }

    pub(crate) fn check(&self, other: &HilbertSpace) -> Result<()> {
        if self != other {
            return Err(Error::SpaceMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a.kronecker(b)
}

fn field_annihilator(field_dim: usize) -> DMatrix<C64> {
    let mut a = DMatrix::zeros(field_dim, field_dim);
    for n in 1..field_dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    space: HilbertSpace,
    matrix: DMatrix<C64>,
}

impl Operator {
    pub fn from_matrix(space: HilbertSpace, matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != space.dim() || matrix.ncols() != space.dim() {
            return invalid(format!(
                "operator shape {}x{} does not match space dimension {}",
                matrix.nrows(),
                matrix.ncols(),
                space.dim()
            ));
        }
        Ok(Operator { space, matrix })
    }

    /// Lift an atomic 4×4 operator to `A ⊗ 1_field`.
    pub fn from_atomic(space: HilbertSpace, atomic: &DMatrix<C64>) -> Result<Self> {
        if atomic.shape() != (4, 4) {
            return invalid("atomic operator must be 4x4");
        }
        let id = DMatrix::identity(space.field_dim(), space.field_dim());
        Ok(Operator {
            space,
            matrix: kron(atomic, &id),
        })
    }

    pub fn identity(space: HilbertSpace) -> Self {
        Operator {
            space,
            matrix: DMatrix::identity(space.dim(), space.dim()),
        }
    }

    pub fn zeros(space: HilbertSpace) -> Self {
        Operator {
            space,
            matrix: DMatrix::zeros(space.dim(), space.dim()),
        }
    }

    pub fn space(&self) -> HilbertSpace {
        self.space
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn dagger(&self) -> Operator {
        Operator {
            space: self.space,
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn scale(&self, s: impl Into<C64>) -> Operator {
        Operator {
            space: self.space,
            matrix: &self.matrix * s.into(),
        }
    }

    pub fn commutator(&self, other: &Operator) -> Operator {
        Operator {
            space: self.space,
            matrix: &self.matrix * &other.matrix - &other.matrix * &self.matrix,
        }
    }

    /// max |A − A†| over all elements.
    pub fn hermiticity_error(&self) -> f64 {
        max_abs(&(&self.matrix - self.matrix.adjoint()))
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        self.space.check(&psi.space)?;
        Ok(StateVector {
            space: self.space,
            amplitudes: &self.matrix * &psi.amplitudes,
        })
    }
}

impl<'a> Mul<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn mul(self, rhs: &'a Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "operator spaces differ");
        Operator {
            space: self.space,
            matrix: &self.matrix * &rhs.matrix,
        }
    }
}

impl<'a> Add<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn add(self, rhs: &'a Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "operator spaces differ");
        Operator {
            space: self.space,
            matrix: &self.matrix + &rhs.matrix,
        }
    }
}

impl<'a> Sub<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn sub(self, rhs: &'a Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "operator spaces differ");
        Operator {
            space: self.space,
            matrix: &self.matrix - &rhs.matrix,
        }
    }
}

pub(crate) fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Cavity annihilation operator `1_atom ⊗ a`.
pub fn annihilator(space: HilbertSpace) -> Operator {
    let id = DMatrix::identity(space.atom_dim(), space.atom_dim());
    Operator {
        space,
        matrix: kron(&id, &field_annihilator(space.field_dim())),
    }
}

pub fn creator(space: HilbertSpace) -> Operator {
    annihilator(space).dagger()
}

/// Photon number `a†a`.
pub fn number(space: HilbertSpace) -> Operator {
    let mut m = DMatrix::zeros(space.dim(), space.dim());
    for i in 0..space.dim() {
        m[(i, i)] = C64::new(space.label(i).1 as f64, 0.0);
    }
    Operator { space, matrix: m }
}

/// `|upper⟩⟨lower|` on the atom as a 4×4 matrix.
pub fn atomic_projector(upper: Level, lower: Level) -> DMatrix<C64> {
    let mut m = DMatrix::zeros(4, 4);
    m[(upper.index(), lower.index())] = ONE;
    m
}

/// `σ_{upper,lower} ⊗ 1_field`.
pub fn atomic_sigma(space: HilbertSpace, upper: Level, lower: Level) -> Operator {
    Operator::from_atomic(space, &atomic_projector(upper, lower)).expect("4x4 by construction")
}

/// String-labelled variant of [`atomic_sigma`]; unknown labels are rejected.
pub fn atomic_sigma_labels(space: HilbertSpace, upper: &str, lower: &str) -> Result<Operator> {
    Ok(atomic_sigma(space, upper.parse()?, lower.parse()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    space: HilbertSpace,
    matrix: DMatrix<C64>,
}

impl DensityMatrix {
    /// Wraps a matrix after checking that it is a physical state.
    pub fn new(space: HilbertSpace, matrix: DMatrix<C64>) -> Result<Self> {
        let rho = Self::new_unchecked(space, matrix)?;
        rho.validate(1e-9, 1e-8)?;
        Ok(rho)
    }

    /// Shape check only; used for intermediate (unnormalized) operators.
    pub fn new_unchecked(space: HilbertSpace, matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.shape() != (space.dim(), space.dim()) {
            return invalid("density matrix shape does not match space");
        }
        Ok(DensityMatrix { space, matrix })
    }

    pub fn pure(psi: &StateVector) -> Self {
        let v = psi.amplitudes.normalize();
        DensityMatrix {
            space: psi.space,
            matrix: &v * v.adjoint(),
        }
    }

    /// `|level⟩⟨level| ⊗ |n⟩⟨n|`.
    pub fn basis(space: HilbertSpace, level: Level, n: usize) -> Self {
        Self::pure(&StateVector::basis(space, level, n))
    }

    /// Maximally mixed atom ⊗ field vacuum.
    pub fn mixed_atom_vacuum(space: HilbertSpace) -> Self {
        let mut m = DMatrix::zeros(space.dim(), space.dim());
        for level in Level::ALL {
            let i = space.index(level, 0);
            m[(i, i)] = C64::new(0.25, 0.0);
        }
        DensityMatrix { space, matrix: m }
    }

    pub fn space(&self) -> HilbertSpace {
        self.space
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        max_abs(&(&self.matrix - self.matrix.adjoint()))
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.matrix + self.matrix.adjoint()) * C64::new(0.5, 0.0);
        h.symmetric_eigenvalues().min()
    }

    pub fn validate(&self, tol: f64, eig_tol: f64) -> Result<()> {
        let tr = self.trace();
        if (tr - ONE).norm() > tol {
            return invalid(format!("density matrix trace {tr} differs from 1"));
        }
        let herm = self.hermiticity_error();
        if herm > tol {
            return invalid(format!("density matrix not Hermitian (error {herm:e})"));
        }
        let min = self.min_eigenvalue();
        if min < -eig_tol {
            return invalid(format!("density matrix has negative eigenvalue {min:e}"));
        }
        Ok(())
    }

    /// Population of a basis state.
    pub fn population(&self, level: Level, n: usize) -> f64 {
        let i = self.space.index(level, n);
        self.matrix[(i, i)].re
    }

    /// Reduced atomic population `⟨σ_ll⟩`.
    pub fn level_population(&self, level: Level) -> f64 {
        (0..self.space.field_dim()).map(|n| self.population(level, n)).sum()
    }

    /// Mean photon number `⟨a†a⟩`.
    pub fn mean_photon_number(&self) -> f64 {
        (0..self.space.dim())
            .map(|i| self.space.label(i).1 as f64 * self.matrix[(i, i)].re)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    space: HilbertSpace,
    amplitudes: DVector<C64>,
}

impl StateVector {
    pub fn new(space: HilbertSpace, amplitudes: DVector<C64>) -> Result<Self> {
        if amplitudes.len() != space.dim() {
            return invalid("state vector length does not match space");
        }
        let norm = amplitudes.norm_squared();
        if !(norm > 0.0 && norm <= 1.0 + 1e-12) {
            return invalid(format!("state norm² {norm} outside (0, 1]"));
        }
        Ok(StateVector { space, amplitudes })
    }

    pub fn basis(space: HilbertSpace, level: Level, n: usize) -> Self {
        let mut v = DVector::zeros(space.dim());
        v[space.index(level, n)] = ONE;
        StateVector {
            space,
            amplitudes: v,
        }
    }

    pub fn space(&self) -> HilbertSpace {
        self.space
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn norm_squared(&self) -> f64 {
        self.amplitudes.norm_squared()
    }

    pub fn normalized(&self) -> StateVector {
        StateVector {
            space: self.space,
            amplitudes: self.amplitudes.normalize(),
        }
    }
}

/// `Tr(op · rho)`.
pub fn expectation(op: &Operator, rho: &DensityMatrix) -> Result<C64> {
    op.space.check(&rho.space)?;
    let n = op.space.dim();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += op.matrix[(i, k)] * rho.matrix[(k, i)];
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(n: usize) -> HilbertSpace {
        HilbertSpace::new(n).unwrap()
    }

    #[test]
    fn rejects_zero_cutoff() {
        assert!(HilbertSpace::new(0).is_err());
        assert_eq!(space(8).dim(), 36);
    }

    #[test]
    fn index_label_roundtrip() {
        let s = space(5);
        for i in 0..s.dim() {
            let (l, n) = s.label(i);
            assert_eq!(s.index(l, n), i);
        }
        // atom ⊗ field: neighbouring indices share the atomic level
        assert_eq!(s.label(0), (Level::L3, 0));
        assert_eq!(s.label(1), (Level::L3, 1));
        assert_eq!(s.label(6), (Level::L4, 0));
    }

    #[test]
    fn annihilator_single_photon() {
        let s = space(1);
        let a = annihilator(s);
        for l in Level::ALL {
            let out = a.apply(&StateVector::basis(s, l, 1)).unwrap();
            assert_eq!(out.amplitudes(), StateVector::basis(s, l, 0).amplitudes());
            let vac = a.apply(&StateVector::basis(s, l, 0)).unwrap();
            assert_eq!(vac.norm_squared(), 0.0);
        }
    }

    #[test]
    fn number_operator_spectrum() {
        let s = space(3);
        let a = annihilator(s);
        let n = &a.dagger() * &a;
        let mut ev: Vec<f64> = n.matrix().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (k, chunk) in ev.chunks(4).enumerate() {
            for e in chunk {
                assert!((e - k as f64).abs() < 1e-12);
            }
        }
        assert!(max_abs(&(n.matrix() - number(s).matrix())) < 1e-12);
    }

    #[test]
    fn truncated_commutator() {
        // Oracle: field-only 4x4 matrices multiplied by explicit loops.
        let nmax = 3;
        let d = nmax + 1;
        let mut a = [[0.0f64; 4]; 4];
        for n in 1..d {
            a[n - 1][n] = (n as f64).sqrt();
        }
        let mut comm = [[0.0f64; 4]; 4];
        for i in 0..d {
            for j in 0..d {
                let mut aad = 0.0;
                let mut ada = 0.0;
                for k in 0..d {
                    aad += a[i][k] * a[j][k];
                    ada += a[k][i] * a[k][j];
                }
                comm[i][j] = aad - ada;
            }
        }
        let s = space(nmax);
        let op = annihilator(s);
        let c = op.commutator(&op.dagger());
        for l in Level::ALL {
            for m in 0..d {
                for n in 0..d {
                    let z = c.matrix()[(s.index(l, m), s.index(l, n))];
                    assert!((z.re - comm[m][n]).abs() < 1e-12 && z.im == 0.0);
                }
            }
            let last = c.matrix()[(s.index(l, nmax), s.index(l, nmax))].re;
            assert!((last + nmax as f64).abs() < 1e-12);
            for m in 0..nmax {
                assert!((c.matrix()[(s.index(l, m), s.index(l, m))].re - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma_algebra() {
        let s = space(4);
        let p = atomic_sigma(s, Level::L3p, Level::L3p);
        assert_eq!(&p * &p, p);
        let up = atomic_sigma(s, Level::L3p, Level::L3);
        let down = atomic_sigma(s, Level::L3, Level::L3p);
        assert_eq!(&up * &down, p);
        assert_eq!(up.dagger(), down);
        let s44 = atomic_sigma(s, Level::L4, Level::L4);
        assert_eq!(s44.matrix().trace().re, 5.0);
    }

    #[test]
    fn sigma_rejects_bad_label() {
        let s = space(2);
        assert!(atomic_sigma_labels(s, "3'", "3").is_ok());
        assert!(matches!(atomic_sigma_labels(s, "5", "3"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn expectation_examples() {
        let s = space(4);
        let rho = DensityMatrix::basis(s, Level::L4, 2);
        assert!((expectation(&Operator::identity(s), &rho).unwrap() - ONE).norm() < 1e-14);
        assert!((expectation(&number(s), &rho).unwrap().re - 2.0).abs() < 1e-14);
        let mixed = DensityMatrix::mixed_atom_vacuum(s);
        mixed.validate(1e-12, 1e-12).unwrap();
        let p3p = atomic_sigma(s, Level::L3p, Level::L3p);
        assert!((expectation(&p3p, &mixed).unwrap().re - 0.25).abs() < 1e-14);
        let other = DensityMatrix::basis(space(3), Level::L3, 0);
        assert!(matches!(expectation(&p3p, &other), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn number_operator_psd_for_all_cutoffs() {
        for nmax in 1..=10 {
            let a = annihilator(space(nmax));
            let n = &a.dagger() * &a;
            assert!(n.is_hermitian(0.0));
            assert!(n.matrix().symmetric_eigenvalues().min() > -1e-12);
        }
    }

    fn cmat(n: usize, vals: &[(f64, f64)]) -> DMatrix<C64> {
        DMatrix::from_iterator(n, n, vals.iter().map(|&(r, i)| C64::new(r, i)))
    }

    fn entries(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), n * n)
    }

    proptest! {
        #[test]
        fn kron_mixed_product(a in entries(2), b in entries(3), c in entries(2), d in entries(3)) {
            let (a, b, c, d) = (cmat(2, &a), cmat(3, &b), cmat(2, &c), cmat(3, &d));
            let lhs = kron(&a, &b) * kron(&c, &d);
            let rhs = kron(&(&a * &c), &(&b * &d));
            prop_assert!(max_abs(&(lhs - rhs)) < 1e-12);
        }

        #[test]
        fn expectation_bilinear(o1 in entries(8), o2 in entries(8), r1 in entries(8), r2 in entries(8),
                                s in -2.0..2.0f64, t in -2.0..2.0f64) {
            let sp = space(1);
            let op1 = Operator::from_matrix(sp, cmat(8, &o1)).unwrap();
            let op2 = Operator::from_matrix(sp, cmat(8, &o2)).unwrap();
            let rho1 = DensityMatrix::new_unchecked(sp, cmat(8, &r1)).unwrap();
            let rho2 = DensityMatrix::new_unchecked(sp, cmat(8, &r2)).unwrap();
            let comb = &op1.scale(s) + &op2.scale(t);
            let lhs = expectation(&comb, &rho1).unwrap();
            let rhs = expectation(&op1, &rho1).unwrap() * s + expectation(&op2, &rho1).unwrap() * t;
            prop_assert!((lhs - rhs).norm() < 1e-10);
            let mix = DensityMatrix::new_unchecked(sp, rho1.matrix() * C64::new(s, 0.0) + rho2.matrix() * C64::new(t, 0.0)).unwrap();
            let lhs = expectation(&op1, &mix).unwrap();
            let rhs = expectation(&op1, &rho1).unwrap() * s + expectation(&op1, &rho2).unwrap() * t;
            prop_assert!((lhs - rhs).norm() < 1e-10);
        }
    }
}
