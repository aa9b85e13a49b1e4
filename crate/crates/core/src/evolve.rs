//! Lindblad master equation
//!
//!   dρ/dt = −i[H, ρ] + Σ_k (L_k ρ L_k† − ½{L_k†L_k, ρ})
//!
//! with jump operators pre-scaled by √rate. The generator is stored as a
//! sparse superoperator acting on row-major `vec(ρ)`, i.e. element `(i, j)`
//! of ρ sits at position `i·d + j`.
//!
//! The superoperator is split into its connected components (invariant
//! blocks). For the one-atom-laser model the excitation-like charge
//! `a†a − σ₄₄ − σ₄′₄′` is conserved by H and shifted by at most one unit by
//! each jump, so the steady state lives in a block of dimension `16·n_max + 8`
//! rather than `(4(n_max + 1))²`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::model::{build_collapse_ops, build_hamiltonian, Channel, CqedParams, DriveParams};
use crate::ode::{integrate, Tolerances};
use crate::opalg::{max_abs, DensityMatrix, HilbertSpace, Level, Operator, C64, I, ZERO};

/// Compressed-row complex sparse matrix.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn mul_vec(&self, x: &[C64], y: &mut [C64]) {
        for r in 0..self.n {
            let mut acc = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    /// Induced 1-norm (largest absolute column sum).
    pub fn norm1(&self) -> f64 {
        let mut col = vec![0.0; self.n];
        for (c, v) in self.cols.iter().zip(&self.vals) {
            col[*c] += v.norm();
        }
        col.into_iter().fold(0.0, f64::max)
    }

    /// Dense copy of the rows/columns listed in `idx` (sorted).
    pub fn dense_block(&self, idx: &[usize]) -> DMatrix<C64> {
        let mut local = vec![usize::MAX; self.n];
        for (k, &g) in idx.iter().enumerate() {
            local[g] = k;
        }
        let mut m = DMatrix::zeros(idx.len(), idx.len());
        for (k, &g) in idx.iter().enumerate() {
            for (c, v) in self.row(g) {
                let lc = local[c];
                if lc != usize::MAX {
                    m[(k, lc)] += v;
                }
            }
        }
        m
    }

    /// Connected components of the (symmetrized) sparsity graph.
    fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (a, b) = (find(&mut parent, r), find(&mut parent, self.cols[k]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..self.n {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
        groups.into_values().collect()
    }
}

fn sparse_rows(m: &DMatrix<C64>) -> Vec<Vec<(usize, C64)>> {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .filter(|&j| m[(i, j)] != ZERO)
                .map(|j| (j, m[(i, j)]))
                .collect()
        })
        .collect()
}

fn build_superoperator(h_eff: &DMatrix<C64>, jumps: &[Operator]) -> SparseMatrix {
    let d = h_eff.nrows();
    let h_rows = sparse_rows(h_eff);
    let jump_rows: Vec<_> = jumps.iter().map(|l| sparse_rows(l.matrix())).collect();
    let mut row_ptr = Vec::with_capacity(d * d + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    let mut entries: Vec<(usize, C64)> = Vec::new();
    for i in 0..d {
        for j in 0..d {
            entries.clear();
            // −i H_eff ρ
            for &(k, v) in &h_rows[i] {
                entries.push((k * d + j, -I * v));
            }
            // +i ρ H_eff†, (ρ H_eff†)_ij = Σ_l ρ_il conj(H_eff_jl)
            for &(l, v) in &h_rows[j] {
                entries.push((i * d + l, I * v.conj()));
            }
            // L ρ L†
            for rows in &jump_rows {
                for &(k, a) in &rows[i] {
                    for &(l, b) in &rows[j] {
                        entries.push((k * d + l, a * b.conj()));
                    }
                }
            }
            entries.sort_by_key(|e| e.0);
            let mut last = usize::MAX;
            for &(c, v) in entries.iter() {
                if c == last {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = c;
                }
            }
            row_ptr.push(cols.len());
        }
    }
    // Drop exact cancellations so they do not glue blocks together.
    let mut out = SparseMatrix {
        n: d * d,
        row_ptr: vec![0],
        cols: Vec::with_capacity(cols.len()),
        vals: Vec::with_capacity(vals.len()),
    };
    for r in 0..d * d {
        for k in row_ptr[r]..row_ptr[r + 1] {
            if vals[k] != ZERO {
                out.cols.push(cols[k]);
                out.vals.push(vals[k]);
            }
        }
        out.row_ptr.push(out.cols.len());
    }
    out
}

/// Hamiltonian plus jump operators, with the superoperator prebuilt.
#[derive(Clone, Debug)]
pub struct LindbladGenerator {
    space: HilbertSpace,
    hamiltonian: Operator,
    jumps: Vec<Operator>,
    channels: Vec<Option<Channel>>,
    superop: SparseMatrix,
    blocks: Vec<Vec<usize>>,
}

impl LindbladGenerator {
    pub fn new(hamiltonian: Operator, jumps: Vec<Operator>) -> Result<Self> {
        let channels = vec![None; jumps.len()];
        Self::with_channels(hamiltonian, jumps, channels)
    }

    pub fn with_channels(
        hamiltonian: Operator,
        jumps: Vec<Operator>,
        channels: Vec<Option<Channel>>,
    ) -> Result<Self> {
        let space = hamiltonian.space();
        for l in &jumps {
            space.check(&l.space())?;
        }
        if channels.len() != jumps.len() {
            return invalid("one channel label per jump operator");
        }
        let h_eff = effective_hamiltonian(&hamiltonian, &jumps);
        let superop = build_superoperator(&h_eff, &jumps);
        let blocks = superop.components();
        Ok(LindbladGenerator {
            space,
            hamiltonian,
            jumps,
            channels,
            superop,
            blocks,
        })
    }

    /// The one-atom-laser generator for the given parameters.
    pub fn from_model(p: &CqedParams, d: &DriveParams, space: HilbertSpace) -> Self {
        let h = build_hamiltonian(p, d, space);
        let ops = build_collapse_ops(p, space);
        let channels = ops.iter().map(|c| Some(c.channel)).collect();
        let jumps = ops.into_iter().map(|c| c.operator).collect();
        Self::with_channels(h, jumps, channels).expect("consistent by construction")
    }

    /// Same dissipators, Hamiltonian replaced by `H + extra`.
    pub fn with_extra_hamiltonian(&self, extra: &Operator) -> Result<Self> {
        self.space.check(&extra.space())?;
        Self::with_channels(
            &self.hamiltonian + extra,
            self.jumps.clone(),
            self.channels.clone(),
        )
    }

    pub fn space(&self) -> HilbertSpace {
        self.space
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn jumps(&self) -> &[Operator] {
        &self.jumps
    }

    pub fn channels(&self) -> &[Option<Channel>] {
        &self.channels
    }

    pub fn superoperator(&self) -> &SparseMatrix {
        &self.superop
    }

    /// Invariant blocks of the superoperator (indices into `vec(ρ)`).
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// `H − (i/2) Σ L†L`.
    pub fn effective_hamiltonian(&self) -> DMatrix<C64> {
        effective_hamiltonian(&self.hamiltonian, &self.jumps)
    }

    pub fn norm(&self) -> f64 {
        self.superop.norm1()
    }

    /// `L(ρ)` for an arbitrary (not necessarily physical) matrix.
    pub fn apply(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let d = self.space.dim();
        let x = to_vec(rho);
        let mut y = vec![ZERO; d * d];
        self.superop.mul_vec(&x, &mut y);
        from_vec(&y, d)
    }

    /// ‖L(ρ)‖₁ on the vectorized matrix.
    pub fn residual(&self, rho: &DensityMatrix) -> f64 {
        self.apply(rho.matrix()).iter().map(|z| z.norm()).sum()
    }

    /// Rate of jumps in channel `k`: Tr(L_k ρ L_k†).
    pub fn jump_rate(&self, k: usize, rho: &DensityMatrix) -> f64 {
        let l = self.jumps[k].matrix();
        (l * rho.matrix() * l.adjoint()).trace().re
    }

    pub fn channel_index(&self, channel: Channel) -> Option<usize> {
        self.channels.iter().position(|c| *c == Some(channel))
    }

    /// Slowest nonzero relaxation rate, min over eigenvalues λ ≠ 0 of −Re λ.
    pub fn spectral_gap(&self) -> f64 {
        let scale = self.norm();
        let mut gap = f64::INFINITY;
        for block in &self.blocks {
            let m = self.superop.dense_block(block);
            for lambda in complex_eigenvalues(m) {
                if lambda.norm() > 1e-9 * scale {
                    gap = gap.min(-lambda.re);
                }
            }
        }
        gap
    }
}

fn effective_hamiltonian(h: &Operator, jumps: &[Operator]) -> DMatrix<C64> {
    let mut m = h.matrix().clone();
    for l in jumps {
        m -= l.matrix().adjoint() * l.matrix() * C64::new(0.0, 0.5);
    }
    m
}

pub(crate) fn complex_eigenvalues(m: DMatrix<C64>) -> Vec<C64> {
    let n = m.nrows();
    if n == 0 {
        return Vec::new();
    }
    let t = m.schur().unpack().1;
    (0..n).map(|i| t[(i, i)]).collect()
}

pub(crate) fn to_vec(m: &DMatrix<C64>) -> Vec<C64> {
    let d = m.nrows();
    let mut v = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub(crate) fn from_vec(v: &[C64], d: usize) -> DMatrix<C64> {
    DMatrix::from_fn(d, d, |i, j| v[i * d + j])
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return invalid("empty time grid");
    }
    if t_grid[0] < 0.0 || t_grid.iter().any(|t| !t.is_finite()) {
        return invalid("time grid must start at or after 0 and be finite");
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return invalid("time grid must be ascending");
    }
    Ok(())
}

/// Propagates an arbitrary operator `X(0)` under `dX/dt = L(X)`.
pub fn propagate_operator(
    gen: &LindbladGenerator,
    x0: &DMatrix<C64>,
    t_grid: &[f64],
    tol: &Tolerances,
) -> Result<Vec<DMatrix<C64>>> {
    check_grid(t_grid)?;
    let d = gen.space.dim();
    if x0.shape() != (d, d) {
        return invalid("initial operator shape does not match generator");
    }
    let sup = &gen.superop;
    let out = integrate(|x, y| sup.mul_vec(x, y), &to_vec(x0), t_grid, tol)?;
    Ok(out.iter().map(|v| from_vec(v, d)).collect())
}

/// ρ(t) at each time in `t_grid` (ascending, starting at or after 0).
pub fn propagate(
    gen: &LindbladGenerator,
    rho0: &DensityMatrix,
    t_grid: &[f64],
) -> Result<Vec<DensityMatrix>> {
    propagate_with(gen, rho0, t_grid, &Tolerances::default())
}

pub fn propagate_with(
    gen: &LindbladGenerator,
    rho0: &DensityMatrix,
    t_grid: &[f64],
    tol: &Tolerances,
) -> Result<Vec<DensityMatrix>> {
    gen.space.check(&rho0.space())?;
    rho0.validate(1e-9, 1e-8)?;
    propagate_operator(gen, rho0.matrix(), t_grid, tol)?
        .into_iter()
        .map(|m| DensityMatrix::new_unchecked(gen.space, m))
        .collect()
}

/// Relative singular-value threshold below which a block direction counts as
/// part of the null space.
const NULL_TOL: f64 = 1e-11;

/// Unique stationary state of `gen`.
///
/// Every invariant block is checked for null vectors; more than one in total
/// means the stationary state is not unique and is reported as an error.
pub fn steady_state(gen: &LindbladGenerator) -> Result<DensityMatrix> {
    if gen.jumps.is_empty() {
        return invalid("steady state needs at least one dissipative channel");
    }
    let d = gen.space.dim();
    let scale = gen.norm();
    let mut nullity = 0usize;
    // (relative smallest singular value, null vector, block index)
    let mut best: Option<(f64, DVector<C64>, usize)> = None;
    for (b, block) in gen.blocks.iter().enumerate() {
        let m = gen.superop.dense_block(block);
        let svd = m.svd(false, true);
        let v_t = svd.v_t.expect("requested V");
        let sigma = &svd.singular_values;
        let block_scale = sigma.max().max(1e-300);
        let null_here = sigma.iter().filter(|&&s| s <= NULL_TOL * scale.max(block_scale)).count();
        nullity += null_here;
        let has_diagonal = block.iter().any(|&g| g / d == g % d);
        if !has_diagonal {
            continue;
        }
        let (imin, smin) = sigma
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let rel = smin / scale;
        if best.as_ref().is_none_or(|(r, _, _)| rel < *r) {
            let v = v_t.row(imin).adjoint();
            best = Some((rel, v, b));
        }
    }
    if nullity > 1 {
        return Err(Error::DegenerateSteadyState { dim: nullity });
    }
    let (_, v, b) = best.ok_or_else(|| Error::InvalidInput("no trace-carrying block".into()))?;
    let mut full = vec![ZERO; d * d];
    for (k, &g) in gen.blocks[b].iter().enumerate() {
        full[g] = v[k];
    }
    let m = from_vec(&full, d);
    let tr = m.trace();
    if tr.norm() < 1e-300 {
        return Err(Error::DegenerateSteadyState { dim: nullity.max(1) });
    }
    let m = m / tr;
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let rho = DensityMatrix::new_unchecked(gen.space, m)?;
    if gen.residual(&rho) <= 1e-10 * scale {
        return Ok(rho);
    }
    relax_to_steady_state(gen, rho)
}

/// Fallback for badly conditioned blocks: evolve the estimate forward until
/// the residual meets tolerance.
fn relax_to_steady_state(gen: &LindbladGenerator, mut rho: DensityMatrix) -> Result<DensityMatrix> {
    let scale = gen.norm();
    let tol = Tolerances {
        rtol: 1e-12,
        atol: 1e-14,
        ..Default::default()
    };
    let mut horizon = 100.0 / scale;
    for _ in 0..40 {
        let next = propagate_operator(gen, rho.matrix(), &[horizon], &tol)?.pop().unwrap();
        let next = (&next + next.adjoint()) * C64::new(0.5, 0.0);
        let tr = next.trace();
        rho = DensityMatrix::new_unchecked(gen.space, next / tr)?;
        if gen.residual(&rho) <= 1e-10 * scale {
            return Ok(rho);
        }
        horizon *= 2.0;
    }
    Err(Error::NoConvergence(format!(
        "steady-state residual {:e} above tolerance",
        gen.residual(&rho) / scale
    )))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub x: f64,
    pub nbar: f64,
    /// ⟨σ₃′₃′⟩
    pub pop_3p: f64,
    /// ⟨σ₄₄⟩
    pub pop_4: f64,
    /// Cavity-to-fluorescence flux ratio; NaN where ⟨σ₃′₃′⟩ = 0.
    pub flux_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn nbars(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.nbar).collect()
    }

    /// Point of largest n̄.
    pub fn peak(&self) -> Option<&SweepPoint> {
        self.points
            .iter()
            .max_by(|a, b| a.nbar.partial_cmp(&b.nbar).unwrap_or(std::cmp::Ordering::Equal))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,nbar,pop_3p,pop_4,flux_ratio\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{:.12e},{:.12e},{:.12e},{:.12e}",
                p.x, p.nbar, p.pop_3p, p.pop_4, p.flux_ratio
            );
        }
        s
    }
}

pub(crate) fn check_ascending(xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return invalid("empty pump grid");
    }
    if xs.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return invalid("pump values must be finite and non-negative");
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("pump grid must be strictly increasing");
    }
    Ok(())
}

/// Steady-state observables at a single pump ratio.
pub fn steady_point(p: &CqedParams, d: &DriveParams, space: HilbertSpace, x: f64) -> Result<SweepPoint> {
    let drive = d.with_pump_ratio(x)?;
    let gen = LindbladGenerator::from_model(p, &drive, space);
    let rho = steady_state(&gen)?;
    let nbar = rho.mean_photon_number();
    let pop_3p = rho.level_population(Level::L3p);
    let pop_4 = rho.level_population(Level::L4);
    let flux_ratio = if pop_3p > 0.0 {
        p.kappa * nbar / (p.gamma_43p() * pop_3p)
    } else {
        f64::NAN
    };
    Ok(SweepPoint {
        x,
        nbar,
        pop_3p,
        pop_4,
        flux_ratio,
    })
}

/// n̄(x) at fixed I₄ (taken from `d_template`), one steady-state solve per x.
pub fn sweep_nbar(
    p: &CqedParams,
    d_template: &DriveParams,
    x_values: &[f64],
    space: HilbertSpace,
) -> Result<SweepCurve> {
    check_ascending(x_values)?;
    let solve = |&x: &f64| {
        steady_point(p, d_template, space, x).map_err(|e| Error::AtX {
            x,
            source: Box::new(e),
        })
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<SweepPoint>> = {
        use rayon::prelude::*;
        x_values.par_iter().map(solve).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<SweepPoint>> = x_values.iter().map(solve).collect();
    Ok(SweepCurve {
        points: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Largest element-wise deviation of `ρ` from Hermiticity, trace one and
/// positivity, as `(trace error, hermiticity error, min eigenvalue)`.
pub fn physicality(rho: &DensityMatrix) -> (f64, f64, f64) {
    ((rho.trace() - C64::new(1.0, 0.0)).norm(), max_abs(&(rho.matrix() - rho.matrix().adjoint())), rho.min_eigenvalue())
}
