//! Dormand–Prince 5(4) with embedded error control, stepping exactly onto a
//! caller-supplied output grid.

use crate::error::{Error, Result};
use crate::opalg::C64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 5_000_000,
        }
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b*, the embedded 4th-order error weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Workspace {
    k: [Vec<C64>; 7],
    tmp: Vec<C64>,
    y_new: Vec<C64>,
}

/// Integrates `dy/dt = f(y)` (autonomous) from `t = 0`, returning `y` at every
/// time in `grid`. `grid` must be non-decreasing and non-negative.
pub fn integrate<F>(f: F, y0: &[C64], grid: &[f64], tol: &Tolerances) -> Result<Vec<Vec<C64>>>
where
    F: Fn(&[C64], &mut [C64]),
{
    let n = y0.len();
    let mut ws = Workspace {
        k: std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n]),
        tmp: vec![C64::new(0.0, 0.0); n],
        y_new: vec![C64::new(0.0, 0.0); n],
    };
    let mut y = y0.to_vec();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(grid.len());
    let mut steps = 0usize;

    f(&y, &mut ws.k[0]);
    let mut h = initial_step(&y, &ws.k[0], tol);

    for &t_out in grid {
        while t < t_out {
            let remaining = t_out - t;
            let last = h >= remaining;
            let step = if last { remaining } else { h };
            if steps >= tol.max_steps {
                return Err(Error::Integrator {
                    t,
                    step,
                    steps,
                    reason: "step budget exhausted".into(),
                });
            }
            if !(step > 1e-15 * t.abs().max(1e-300)) {
                return Err(Error::Integrator {
                    t,
                    step,
                    steps,
                    reason: "step size underflow".into(),
                });
            }
            steps += 1;
            let err = try_step(&f, &mut ws, &y, step, tol);
            if !err.is_finite() {
                return Err(Error::Integrator {
                    t,
                    step,
                    steps,
                    reason: "non-finite state".into(),
                });
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 {
                t = if last { t_out } else { t + step };
                std::mem::swap(&mut y, &mut ws.y_new);
                // FSAL: the 7th stage is f(y_new).
                ws.k.swap(0, 6);
                // Do not let a short final step shrink the next one.
                if !last || factor > 1.0 {
                    h = step * factor;
                }
            } else {
                h = step * factor.min(1.0);
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn initial_step(y: &[C64], f0: &[C64], tol: &Tolerances) -> f64 {
    let n = y.len().max(1) as f64;
    let (mut d0, mut d1) = (0.0, 0.0);
    for (yi, fi) in y.iter().zip(f0) {
        let sc = tol.atol + tol.rtol * yi.norm();
        d0 += (yi.norm() / sc).powi(2);
        d1 += (fi.norm() / sc).powi(2);
    }
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-12
    } else {
        0.01 * d0 / d1
    }
}

fn axpy_into(out: &mut [C64], y: &[C64], h: f64, terms: &[(f64, &[C64])]) {
    for i in 0..out.len() {
        let mut acc = C64::new(0.0, 0.0);
        for (c, k) in terms {
            acc += k[i] * *c;
        }
        out[i] = y[i] + acc * h;
    }
}

/// One trial step; leaves the candidate in `ws.y_new` and returns the scaled
/// error norm.
fn try_step<F>(f: &F, ws: &mut Workspace, y: &[C64], h: f64, tol: &Tolerances) -> f64
where
    F: Fn(&[C64], &mut [C64]),
{
    let [k1, k2, k3, k4, k5, k6, k7] = &mut ws.k;
    let tmp = &mut ws.tmp;
    axpy_into(tmp, y, h, &[(A21, k1)]);
    f(tmp, k2);
    axpy_into(tmp, y, h, &[(A31, k1), (A32, k2)]);
    f(tmp, k3);
    axpy_into(tmp, y, h, &[(A41, k1), (A42, k2), (A43, k3)]);
    f(tmp, k4);
    axpy_into(tmp, y, h, &[(A51, k1), (A52, k2), (A53, k3), (A54, k4)]);
    f(tmp, k5);
    axpy_into(tmp, y, h, &[(A61, k1), (A62, k2), (A63, k3), (A64, k4), (A65, k5)]);
    f(tmp, k6);
    axpy_into(&mut ws.y_new, y, h, &[(B1, k1), (B3, k3), (B4, k4), (B5, k5), (B6, k6)]);
    f(&ws.y_new, k7);
    let mut acc = 0.0;
    for i in 0..y.len() {
        let e = (k1[i] * E1 + k3[i] * E3 + k4[i] * E4 + k5[i] * E5 + k6[i] * E6 + k7[i] * E7) * h;
        let sc = tol.atol + tol.rtol * y[i].norm().max(ws.y_new[i].norm());
        acc += e.norm_sqr() / (sc * sc);
    }
    (acc / y.len().max(1) as f64).sqrt()
}
