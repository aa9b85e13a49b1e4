//! Independent root scan for the mean-field lasing solutions.
//!
//! The atomic steady state for a fixed field amplitude and frame frequency is
//! obtained here by probing `mean_field_rhs` column by column and solving the
//! resulting real linear system; lasing roots are then located by scanning a
//! dense grid of frame frequencies for every amplitude.

use nalgebra::{DMatrix, DVector};
use oal_core::model::{mhz, CqedParams, DriveParams};
use oal_core::opalg::C64;
use oal_core::semiclassical::{mean_field_rhs, semiclassical_steady, threshold_scan, Branch, MeanFieldState};

const NU_SPAN_MHZ: f64 = 30.0;
const NU_POINTS: usize = 3000;

fn from_params(r: &[f64]) -> DMatrix<C64> {
    let mut m = DMatrix::zeros(4, 4);
    for k in 0..4 {
        m[(k, k)] = C64::new(r[k], 0.0);
    }
    let mut idx = 4;
    for i in 0..4 {
        for j in (i + 1)..4 {
            m[(i, j)] = C64::new(r[idx], r[idx + 1]);
            m[(j, i)] = C64::new(r[idx], -r[idx + 1]);
            idx += 2;
        }
    }
    m
}

fn to_params(m: &DMatrix<C64>) -> Vec<f64> {
    let mut r: Vec<f64> = (0..4).map(|k| m[(k, k)].re).collect();
    for i in 0..4 {
        for j in (i + 1)..4 {
            r.push(m[(i, j)].re);
            r.push(m[(i, j)].im);
        }
    }
    r
}

struct Oracle {
    p: CqedParams,
    d: DriveParams,
}

impl Oracle {
    /// Linear map ρ ↦ dρ/dt for fixed α in the laboratory frame, as a real
    /// 16×16 matrix on the Hermitian parameters.
    fn atomic_map(&self, alpha: f64) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(16, 16);
        for k in 0..16 {
            let mut e = vec![0.0; 16];
            e[k] = 1.0;
            let s = MeanFieldState {
                alpha: C64::new(alpha, 0.0),
                rho: from_params(&e),
            };
            let col = to_params(&mean_field_rhs(&s, &self.p, &self.d).rho);
            m.set_column(k, &DVector::from_vec(col));
        }
        m
    }

    /// Frame term ρ_ij ↦ iν(q_i − q_j)ρ_ij with charges q = (0, 1, 0, 1).
    fn frame_map() -> DMatrix<f64> {
        let q = [0.0, 1.0, 0.0, 1.0];
        let mut m = DMatrix::zeros(16, 16);
        for k in 0..16 {
            let mut e = vec![0.0; 16];
            e[k] = 1.0;
            let rho = from_params(&e);
            let out = DMatrix::from_fn(4, 4, |i, j| rho[(i, j)] * C64::new(0.0, q[i] - q[j]));
            m.set_column(k, &DVector::from_vec(to_params(&out)));
        }
        m
    }

    /// Field equation residual F(α, ν) in units of γ.
    fn residual(&self, lab: &DMatrix<f64>, frame: &DMatrix<f64>, alpha: f64, nu: f64) -> C64 {
        let mut a = lab + frame * nu;
        for j in 0..16 {
            a[(0, j)] = if j < 4 { self.p.gamma } else { 0.0 };
        }
        let mut b = DVector::zeros(16);
        b[0] = self.p.gamma;
        let r = a.lu().solve(&b).expect("unique atomic steady state");
        let rho = from_params(r.as_slice());
        // ⟨σ₄₃′⟩ = ρ(3′, 4) with level order (3, 4, 3′, 4′).
        let s = rho[(2, 1)];
        let g = self.p.g0 * self.p.coupling_scale;
        (C64::new(-self.p.kappa * alpha, 0.0) - C64::new(0.0, g) * s - C64::new(0.0, nu * alpha)) / self.p.gamma
    }

    /// Largest normalized gain Re F/α over all frame frequencies where the
    /// phase condition Im F = 0 holds.
    fn best_gain(&self, alpha: f64) -> f64 {
        let lab = self.atomic_map(alpha);
        let frame = Self::frame_map();
        let nus: Vec<f64> = (0..=NU_POINTS)
            .map(|k| mhz(-NU_SPAN_MHZ + 2.0 * NU_SPAN_MHZ * k as f64 / NU_POINTS as f64))
            .collect();
        let vals: Vec<C64> = nus.iter().map(|&nu| self.residual(&lab, &frame, alpha, nu)).collect();
        let mut best = f64::NEG_INFINITY;
        for k in 0..NU_POINTS {
            if vals[k].im.signum() != vals[k + 1].im.signum() {
                let (mut lo, mut hi, mut flo) = (nus[k], nus[k + 1], vals[k].im);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    let f = self.residual(&lab, &frame, alpha, mid);
                    if f.im.signum() == flo.signum() {
                        lo = mid;
                        flo = f.im;
                    } else {
                        hi = mid;
                    }
                }
                let f = self.residual(&lab, &frame, alpha, 0.5 * (lo + hi));
                best = best.max(f.re / alpha);
            }
        }
        best
    }

    /// Largest lasing amplitude: the outermost sign change of the gain on a
    /// logarithmic |α| grid, refined by bisection.
    fn lasing_amplitude(&self) -> Option<f64> {
        let grid: Vec<f64> = (0..=36).map(|k| 1e-4 * 10f64.powf(k as f64 / 9.0)).collect();
        let gains: Vec<f64> = grid.iter().map(|&a| self.best_gain(a)).collect();
        let k = (0..grid.len() - 1).rev().find(|&k| gains[k] > 0.0 && gains[k + 1] <= 0.0)?;
        let (mut lo, mut hi) = (grid[k], grid[k + 1]);
        for _ in 0..40 {
            let mid = (lo * hi).sqrt();
            if self.best_gain(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some((lo * hi).sqrt())
    }
}

fn oracle(g0_mhz: f64, x: f64) -> Oracle {
    Oracle {
        p: CqedParams {
            g0: mhz(g0_mhz),
            ..Default::default()
        },
        d: DriveParams::default().with_pump_ratio(x).unwrap(),
    }
}

#[test]
fn lasing_amplitude_matches_root_scan() {
    for x in [0.05, 0.1, 0.3] {
        let o = oracle(16.0, x);
        let a = o.lasing_amplitude().expect("oracle finds a lasing root");
        let sol = semiclassical_steady(&o.p, &o.d).unwrap();
        assert_eq!(sol.branch, Branch::Lasing, "x = {x}");
        let rel = (sol.state.photon_number() / (a * a) - 1.0).abs();
        assert!(rel < 1e-4, "x = {x}: {} vs oracle {}", sol.state.photon_number(), a * a);
    }
}

#[test]
fn weak_coupling_has_no_lasing_root() {
    let xs = [0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0];
    for &x in &xs {
        let o = oracle(4.0, x);
        for k in 0..=12 {
            let a = 1e-4 * 10f64.powf(k as f64 / 3.0);
            assert!(o.best_gain(a) < 0.0, "x = {x}, α = {a}");
        }
    }
    let p = oracle(4.0, 0.0).p;
    assert!(threshold_scan(&p, &DriveParams::default(), &xs).unwrap().x_th.is_none());
}

#[test]
fn threshold_matches_small_signal_gain() {
    // Oracle threshold: the pump where weak-field gain first becomes positive.
    let (mut lo, mut hi) = (0.005, 0.05);
    assert!(oracle(16.0, lo).best_gain(1e-5) < 0.0);
    assert!(oracle(16.0, hi).best_gain(1e-5) > 0.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if oracle(16.0, mid).best_gain(1e-5) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let x_oracle = 0.5 * (lo + hi);
    let p = CqedParams::default();
    let scan = threshold_scan(&p, &DriveParams::default(), &[0.0, 0.01, 0.03, 0.05]).unwrap();
    let x_th = scan.x_th.unwrap();
    assert!((x_th / x_oracle - 1.0).abs() < 1e-3, "{x_th} vs oracle {x_oracle}");
}
