//! Mean-field theory of the same four-state model.
//!
//! Equations of motion follow from the master equation with every
//! atom-field moment factorized, ⟨a σ⟩ → ⟨a⟩⟨σ⟩. The atom then sees the
//! classical field through `g(α* σ₄₃′ + α σ₃′₄)` and the field obeys
//!
//!   dα/dt = −κα − i g ⟨σ₄₃′⟩.
//!
//! The equations share the quantum model's U(1) symmetry (α → α e^{iθ} with
//! levels 4 and 4′ rephased by e^{−iθ}), so a lasing solution is stationary
//! only in a frame rotating at some frequency ν. Steady states are found in
//! that frame with α real and positive.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::evolve::{check_ascending, SweepCurve, SweepPoint};
use crate::model::{atomic_collapse_ops, atomic_hamiltonian, CqedParams, DriveParams};
use crate::opalg::{atomic_projector, Level, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Relative tolerance on Jacobian eigenvalues, in units of γ.
pub const STABILITY_TOL: f64 = 1e-8;
/// Bound on the frame residual, in units of γ.
pub const RESIDUAL_TOL: f64 = 1e-10;

const FINE_FRAME_GRID: usize = 4000;
const COARSE_FRAME_GRID: usize = 120;

/// Classical field amplitude plus the full atomic density matrix.
///
/// All six atomic coherences are kept because the drive chain 3–3′–4–4′
/// couples every pair of levels.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldState {
    pub alpha: C64,
    pub rho: DMatrix<C64>,
}

/// Time derivative of a [`MeanFieldState`].
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldRate {
    pub alpha: C64,
    pub rho: DMatrix<C64>,
}

impl MeanFieldRate {
    /// Euclidean norm over α and all sixteen ρ entries.
    pub fn norm(&self) -> f64 {
        (self.alpha.norm_sqr() + self.rho.iter().map(|z| z.norm_sqr()).sum::<f64>()).sqrt()
    }
}

impl MeanFieldState {
    pub fn new(alpha: C64, rho: DMatrix<C64>) -> Result<Self> {
        if rho.shape() != (4, 4) {
            return invalid("atomic density matrix must be 4x4");
        }
        if !alpha.re.is_finite() || !alpha.im.is_finite() || rho.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return invalid("state has non-finite entries");
        }
        let herm = (&rho - rho.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > 1e-9 {
            return invalid(format!("atomic density matrix is not Hermitian (deviation {herm:.3e})"));
        }
        let tr: f64 = (0..4).map(|i| rho[(i, i)].re).sum();
        if (tr - 1.0).abs() > 1e-9 {
            return invalid(format!("populations sum to {tr}, not 1"));
        }
        if (0..4).any(|i| !(-1e-9..=1.0 + 1e-9).contains(&rho[(i, i)].re)) {
            return invalid("populations must lie in [0, 1]");
        }
        Ok(MeanFieldState { alpha, rho })
    }

    /// Empty cavity, atom in level 3.
    pub fn ground() -> Self {
        let mut rho = DMatrix::zeros(4, 4);
        rho[(Level::L3.index(), Level::L3.index())] = C64::new(1.0, 0.0);
        MeanFieldState { alpha: ZERO, rho }
    }

    pub fn population(&self, level: Level) -> f64 {
        self.rho[(level.index(), level.index())].re
    }

    pub fn p3(&self) -> f64 {
        self.population(Level::L3)
    }
    pub fn p4(&self) -> f64 {
        self.population(Level::L4)
    }
    pub fn p3p(&self) -> f64 {
        self.population(Level::L3p)
    }
    pub fn p4p(&self) -> f64 {
        self.population(Level::L4p)
    }

    /// `⟨σ_ij⟩ = Tr(ρ |i⟩⟨j|) = ρ_ji`.
    pub fn coherence(&self, i: Level, j: Level) -> C64 {
        self.rho[(j.index(), i.index())]
    }

    pub fn sigma_33p(&self) -> C64 {
        self.coherence(Level::L3, Level::L3p)
    }
    pub fn sigma_43p(&self) -> C64 {
        self.coherence(Level::L4, Level::L3p)
    }
    pub fn sigma_44p(&self) -> C64 {
        self.coherence(Level::L4, Level::L4p)
    }

    pub fn photon_number(&self) -> f64 {
        self.alpha.norm_sqr()
    }

    /// Applies the symmetry: α → α e^{iθ}, ρ → VρV† with V = e^{−iθ} on 4 and 4′.
    pub fn gauge_rotated(&self, theta: f64) -> Self {
        let v = gauge_phases(theta);
        let mut rho = self.rho.clone();
        for i in 0..4 {
            for j in 0..4 {
                rho[(i, j)] *= v[i] * v[j].conj();
            }
        }
        MeanFieldState {
            alpha: self.alpha * C64::from_polar(1.0, theta),
            rho,
        }
    }
}

fn gauge_phases(theta: f64) -> [C64; 4] {
    let mut v = [C64::new(1.0, 0.0); 4];
    v[Level::L4.index()] = C64::from_polar(1.0, -theta);
    v[Level::L4p.index()] = C64::from_polar(1.0, -theta);
    v
}

/// Number operator of the atomic charge, σ₄₄ + σ₄′₄′.
fn charge() -> DMatrix<C64> {
    atomic_projector(Level::L4, Level::L4) + atomic_projector(Level::L4p, Level::L4p)
}

fn lowering() -> DMatrix<C64> {
    atomic_projector(Level::L4, Level::L3p)
}

/// Atomic Hamiltonian seen in a frame rotating at ν, for field amplitude α.
fn mean_field_hamiltonian(p: &CqedParams, d: &DriveParams, alpha: C64, nu: f64) -> DMatrix<C64> {
    let c = lowering();
    let coupling = (&c * alpha.conj() + c.adjoint() * alpha) * C64::new(p.g(), 0.0);
    atomic_hamiltonian(p, d) + coupling - charge() * C64::new(nu, 0.0)
}

fn rate_in_frame(state: &MeanFieldState, p: &CqedParams, d: &DriveParams, nu: f64) -> MeanFieldRate {
    let h = mean_field_hamiltonian(p, d, state.alpha, nu);
    let rho = &state.rho;
    let mut drho = (&h * rho - rho * &h) * (-I);
    for (_, l) in atomic_collapse_ops(p) {
        let ldl = l.adjoint() * &l;
        drho += &l * rho * l.adjoint() - (&ldl * rho + rho * &ldl) * C64::new(0.5, 0.0);
    }
    let s43p = (rho * lowering()).trace();
    let dalpha = -state.alpha * p.kappa - I * p.g() * s43p - I * nu * state.alpha;
    MeanFieldRate { alpha: dalpha, rho: drho }
}

/// Laboratory-frame time derivative of the factorized equations.
pub fn mean_field_rhs(state: &MeanFieldState, p: &CqedParams, d: &DriveParams) -> MeanFieldRate {
    rate_in_frame(state, p, d, 0.0)
}

/// Atomic steady state for a fixed real field amplitude in the ν frame.
fn atom_steady(p: &CqedParams, d: &DriveParams, alpha: f64, nu: f64) -> Result<DMatrix<C64>> {
    let h = mean_field_hamiltonian(p, d, C64::new(alpha, 0.0), nu);
    let id = DMatrix::<C64>::identity(4, 4);
    // Row-major vectorization: vec(AρB) = (A ⊗ Bᵀ) vec(ρ).
    let mut s = (h.kronecker(&id) - id.kronecker(&h.transpose())) * (-I);
    for (_, l) in atomic_collapse_ops(p) {
        let ldl = l.adjoint() * &l;
        s += l.kronecker(&l.conjugate())
            - (ldl.kronecker(&id) + id.kronecker(&ldl.transpose())) * C64::new(0.5, 0.0);
    }
    let scale = s.iter().map(|z| z.norm()).fold(0.0, f64::max);
    for j in 0..16 {
        s[(0, j)] = ZERO;
    }
    for k in 0..4 {
        s[(0, 5 * k)] = C64::new(scale, 0.0);
    }
    let mut rhs = DVector::<C64>::zeros(16);
    rhs[0] = C64::new(scale, 0.0);
    let v = s
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::DegenerateSteadyState { dim: 2 })?;
    let m = DMatrix::from_row_slice(4, 4, v.as_slice());
    Ok((&m + m.adjoint()) * C64::new(0.5, 0.0))
}

/// Field equation residual (in units of γ) once the atom has relaxed.
fn field_residual(p: &CqedParams, d: &DriveParams, alpha: f64, nu: f64) -> Result<(C64, DMatrix<C64>)> {
    let rho = atom_steady(p, d, alpha, nu)?;
    let s43p = (&rho * lowering()).trace();
    let f = (-C64::new(alpha * p.kappa, 0.0) - I * p.g() * s43p - I * nu * alpha) / p.gamma;
    Ok((f, rho))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
    /// Largest growth rate within [`STABILITY_TOL`] of zero.
    Marginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    NonLasing,
    Lasing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemiclassicalSolution {
    pub state: MeanFieldState,
    /// Frame frequency (rad/s) in which the solution is stationary.
    pub nu: f64,
    pub branch: Branch,
    pub stability: Stability,
    /// Largest real part of the Jacobian spectrum, gauge mode removed, in units of γ.
    pub growth_rate: f64,
    /// Frame residual norm in units of γ.
    pub residual: f64,
}

/// 17 real tangent coordinates: Re α, Im α, p₄, p₃′, p₄′ (p₃ compensates)
/// and the real and imaginary parts of the six upper-triangle coherences.
fn tangent_basis() -> Vec<(C64, DMatrix<C64>)> {
    let mut out = Vec::with_capacity(17);
    out.push((C64::new(1.0, 0.0), DMatrix::zeros(4, 4)));
    out.push((I, DMatrix::zeros(4, 4)));
    for k in 1..4 {
        let mut m = DMatrix::zeros(4, 4);
        m[(k, k)] = C64::new(1.0, 0.0);
        m[(0, 0)] = C64::new(-1.0, 0.0);
        out.push((ZERO, m));
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            for phase in [C64::new(1.0, 0.0), I] {
                let mut m = DMatrix::zeros(4, 4);
                m[(i, j)] = phase;
                m[(j, i)] = phase.conj();
                out.push((ZERO, m));
            }
        }
    }
    out
}

fn coordinates(r: &MeanFieldRate) -> Vec<f64> {
    let mut v = vec![r.alpha.re, r.alpha.im];
    for k in 1..4 {
        v.push(r.rho[(k, k)].re);
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            v.push(r.rho[(i, j)].re);
            v.push(r.rho[(i, j)].im);
        }
    }
    v
}

/// Jacobian of the frame equations on the trace-preserving tangent space,
/// in units of γ. Central differences are exact for these quadratic equations
/// up to rounding.
fn jacobian(state: &MeanFieldState, p: &CqedParams, d: &DriveParams, nu: f64) -> DMatrix<f64> {
    let basis = tangent_basis();
    let h = 1e-4;
    let mut j = DMatrix::zeros(17, 17);
    for (col, (da, dr)) in basis.iter().enumerate() {
        let plus = MeanFieldState {
            alpha: state.alpha + da * h,
            rho: &state.rho + dr * C64::new(h, 0.0),
        };
        let minus = MeanFieldState {
            alpha: state.alpha - da * h,
            rho: &state.rho - dr * C64::new(h, 0.0),
        };
        let fp = coordinates(&rate_in_frame(&plus, p, d, nu));
        let fm = coordinates(&rate_in_frame(&minus, p, d, nu));
        for row in 0..17 {
            j[(row, col)] = (fp[row] - fm[row]) / (2.0 * h * p.gamma);
        }
    }
    j
}

fn classify(state: &MeanFieldState, p: &CqedParams, d: &DriveParams, nu: f64, lasing: bool) -> (Stability, f64) {
    let jac = jacobian(state, p, d, nu);
    let mut eig: Vec<C64> = jac.complex_eigenvalues().iter().copied().collect();
    if lasing {
        // The phase (Goldstone) direction is an exact zero mode.
        let k = (0..eig.len())
            .min_by(|&a, &b| eig[a].norm().partial_cmp(&eig[b].norm()).unwrap())
            .expect("17 eigenvalues");
        eig.remove(k);
    }
    let growth = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let stability = if growth > STABILITY_TOL {
        Stability::Unstable
    } else if growth < -STABILITY_TOL {
        Stability::Stable
    } else {
        Stability::Marginal
    };
    (stability, growth)
}

fn newton(p: &CqedParams, d: &DriveParams, alpha0: f64, nu0: f64) -> Option<(f64, f64)> {
    let (mut a, mut nu) = (alpha0, nu0);
    let mut f = field_residual(p, d, a, nu).ok()?.0;
    for _ in 0..80 {
        if f.norm() < 1e-14 {
            return Some((a, nu));
        }
        let ha = 1e-7 * a.abs().max(1e-6);
        let hn = 1e-7 * p.gamma;
        let fa = (field_residual(p, d, a + ha, nu).ok()?.0 - field_residual(p, d, a - ha, nu).ok()?.0) / (2.0 * ha);
        let fn_ = (field_residual(p, d, a, nu + hn).ok()?.0 - field_residual(p, d, a, nu - hn).ok()?.0) / (2.0 * hn);
        // Solve [fa fn] [da dn]ᵀ = −f as a real 2×2 system.
        let det = fa.re * fn_.im - fn_.re * fa.im;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let da = (-f.re * fn_.im + fn_.re * f.im) / det;
        let dn = (-fa.re * f.im + fa.im * f.re) / det;
        let mut lambda = 1.0;
        loop {
            let (na, nn) = (a + lambda * da, nu + lambda * dn);
            if let Ok((nf, _)) = field_residual(p, d, na, nn) {
                if nf.norm() < f.norm() || lambda < 1e-3 {
                    a = na;
                    nu = nn;
                    f = nf;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-4 {
                return None;
            }
        }
        if (lambda * da).abs() <= 1e-15 * a.abs() && (lambda * dn).abs() <= 1e-15 * p.gamma {
            break;
        }
    }
    (f.norm() < 1e-12).then_some((a, nu))
}

fn solution(p: &CqedParams, d: &DriveParams, alpha: f64, nu: f64, branch: Branch) -> Result<SemiclassicalSolution> {
    let (_, rho) = field_residual(p, d, alpha, nu)?;
    let state = MeanFieldState::new(C64::new(alpha, 0.0), rho)?;
    let residual = rate_in_frame(&state, p, d, nu).norm() / p.gamma;
    let (stability, growth_rate) = classify(&state, p, d, nu, branch == Branch::Lasing);
    Ok(SemiclassicalSolution {
        state,
        nu,
        branch,
        stability,
        growth_rate,
        residual,
    })
}

/// Frame frequencies at which the field equation's phase condition holds for
/// a fixed amplitude: sign changes of Im F on a grid wide enough to contain
/// every root, refined by bisection.
fn frame_seeds(p: &CqedParams, d: &DriveParams, alpha: f64, n: usize) -> Vec<f64> {
    let span = 2.0
        * (p.g() + d.omega3(p.gamma) + d.omega4(p.gamma) + d.delta3.abs() + d.delta4.abs() + d.delta_ca.abs() + p.kappa + p.gamma);
    let phase = |nu: f64| field_residual(p, d, alpha, nu).map(|(f, _)| f.im).ok();
    let grid: Vec<f64> = (0..=n).map(|k| -span + 2.0 * span * k as f64 / n as f64).collect();
    let vals: Vec<Option<f64>> = grid.iter().map(|&nu| phase(nu)).collect();
    let mut out = Vec::new();
    for k in 0..n {
        let (Some(fa), Some(fb)) = (vals[k], vals[k + 1]) else {
            continue;
        };
        if fa == 0.0 {
            out.push(grid[k]);
            continue;
        }
        if fa.signum() == fb.signum() {
            continue;
        }
        let (mut lo, mut hi, mut flo) = (grid[k], grid[k + 1], fa);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            let Some(fm) = phase(mid) else { break };
            if fm.signum() == flo.signum() {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    out
}

/// Every stationary solution reachable from the α = 0 seed and a ladder of
/// α ≠ 0 seeds, without stability selection.
pub fn stationary_solutions(p: &CqedParams, d: &DriveParams) -> Result<Vec<SemiclassicalSolution>> {
    p.validate()?;
    d.validate()?;
    let trivial = solution(p, d, 0.0, 0.0, Branch::NonLasing)?;
    // Weak-field phase roots barely move with α, so one fine scan serves
    // every small seed. Features of the Raman resonance can be far narrower
    // than γ, hence the resolution. Frequencies of growing modes of the
    // trivial branch are added as seeds too.
    let mut weak = frame_seeds(p, d, 1e-4, FINE_FRAME_GRID);
    let jac = jacobian(&trivial.state, p, d, 0.0);
    for z in jac.complex_eigenvalues().iter() {
        if z.re > -0.5 && z.im != 0.0 {
            weak.push(z.im.abs() * p.gamma);
            weak.push(-z.im.abs() * p.gamma);
        }
    }
    let mut roots: Vec<(f64, f64)> = Vec::new();
    for k in 0..13 {
        let a0 = 1e-4 * 10f64.powf(k as f64 / 3.0);
        let mut seeds = weak.clone();
        if a0 > 1e-2 {
            seeds.extend(frame_seeds(p, d, a0, COARSE_FRAME_GRID));
        }
        for nu0 in seeds {
            let Some((a, nu)) = newton(p, d, a0, nu0) else {
                continue;
            };
            // α < 0 is the same solution rotated by π.
            let a = a.abs();
            if a < 1e-7 {
                continue;
            }
            if roots.iter().all(|&(b, _)| (a - b).abs() > 1e-6 * a.max(b)) {
                roots.push((a, nu));
            }
        }
    }
    let mut out = vec![trivial];
    roots.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    for (a, nu) in roots {
        out.push(solution(p, d, a, nu, Branch::Lasing)?);
    }
    for s in &out {
        if !(s.residual < RESIDUAL_TOL) {
            return Err(Error::NoConvergence(format!(
                "mean-field residual {:.3e} (units of γ) above {RESIDUAL_TOL:e}",
                s.residual
            )));
        }
    }
    Ok(out)
}

/// The stable stationary solution. The non-lasing branch is preferred while
/// it is stable; otherwise the stable lasing solution with the largest field.
/// A marginal solution is returned only when nothing is strictly stable, and
/// it is flagged as such.
pub fn semiclassical_steady(p: &CqedParams, d: &DriveParams) -> Result<SemiclassicalSolution> {
    let sols = stationary_solutions(p, d)?;
    let pick = |want: Stability| -> Option<&SemiclassicalSolution> {
        if sols[0].stability == want {
            return Some(&sols[0]);
        }
        sols[1..].iter().rev().find(|s| s.stability == want)
    };
    pick(Stability::Stable)
        .or_else(|| pick(Stability::Marginal))
        .cloned()
        .ok_or_else(|| {
            Error::NoConvergence(format!(
                "no stable stationary mean-field solution among {} candidates (x = {:?})",
                sols.len(),
                d.pump_ratio().ok()
            ))
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdScan {
    /// |α|² in the `nbar` column; flux ratio is κ|α|²/(γ₄₃′ p₃′).
    pub curve: SweepCurve,
    pub solutions: Vec<SemiclassicalSolution>,
    /// Lowest pump at which the stable solution switches to lasing, if any.
    pub x_th: Option<f64>,
}

impl ThresholdScan {
    pub fn to_csv(&self) -> String {
        let mut s = self.curve.to_csv();
        match self.x_th {
            Some(x) => s.push_str(&format!("# x_th={x:.10e}\n")),
            None => s.push_str("# x_th=absent\n"),
        }
        s
    }
}

fn point(p: &CqedParams, x: f64, s: &SemiclassicalSolution) -> SweepPoint {
    let n = s.state.photon_number();
    let p3p = s.state.p3p();
    SweepPoint {
        x,
        nbar: n,
        pop_3p: p3p,
        pop_4: s.state.p4(),
        flux_ratio: if p3p > 0.0 { p.kappa * n / (p.gamma_43p() * p3p) } else { f64::NAN },
    }
}

fn steady_at(p: &CqedParams, d: &DriveParams, x: f64) -> Result<SemiclassicalSolution> {
    semiclassical_steady(p, &d.with_pump_ratio(x)?).map_err(|e| Error::AtX { x, source: Box::new(e) })
}

/// Mean-field steady states along `x_values` and the bifurcation threshold.
pub fn threshold_scan(p: &CqedParams, d_template: &DriveParams, x_values: &[f64]) -> Result<ThresholdScan> {
    check_ascending(x_values)?;
    let solve = |&x: &f64| steady_at(p, d_template, x);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<SemiclassicalSolution>> = {
        use rayon::prelude::*;
        x_values.par_iter().map(solve).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<SemiclassicalSolution>> = x_values.iter().map(solve).collect();
    let solutions: Vec<SemiclassicalSolution> = results.into_iter().collect::<Result<_>>()?;

    let mut x_th = None;
    for k in 1..solutions.len() {
        if solutions[k - 1].branch == Branch::NonLasing && solutions[k].branch == Branch::Lasing {
            let (mut lo, mut hi) = (x_values[k - 1], x_values[k]);
            while hi - lo > 1e-10 * hi.max(1e-12) {
                let mid = 0.5 * (lo + hi);
                if steady_at(p, d_template, mid)?.branch == Branch::Lasing {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            x_th = Some(0.5 * (lo + hi));
            break;
        }
    }
    let curve = SweepCurve {
        points: x_values.iter().zip(&solutions).map(|(&x, s)| point(p, x, s)).collect(),
    };
    Ok(ThresholdScan { curve, solutions, x_th })
}
