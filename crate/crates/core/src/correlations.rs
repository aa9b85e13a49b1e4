//! Second-order coherence g²(τ) by quantum regression, Gaussian smoothing of
//! sampled curves, and the cavity-versus-fluorescence flux comparison.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::evolve::{propagate_operator, LindbladGenerator};
use crate::model::{Channel, CqedParams};
use crate::ode::Tolerances;
use crate::opalg::{annihilator, DensityMatrix, Level, C64};

/// Sampled g²(τ). Times are in seconds and need not be uniform unless the
/// curve is smoothed.
#[derive(Clone, Debug, PartialEq)]
pub struct G2Curve {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// One-standard-deviation errors, when the curve is an estimate.
    pub errors: Option<Vec<f64>>,
    /// Width of the Gaussian already applied (0 for a raw curve).
    pub sigma: f64,
    /// Free-form description of the parameter set that produced the curve.
    pub label: String,
}

impl G2Curve {
    pub fn new(taus: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if taus.len() != values.len() {
            return invalid("tau and value lengths differ");
        }
        Ok(G2Curve {
            taus,
            values,
            errors: None,
            sigma: 0.0,
            label: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Value at the sample nearest to `tau`.
    pub fn at(&self, tau: f64) -> Option<f64> {
        let i = self
            .taus
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - tau).abs().total_cmp(&(b.1 - tau).abs()))?
            .0;
        Some(self.values[i])
    }

    /// Grid spacing, if the grid is uniform to 1e-6 relative.
    pub fn uniform_step(&self) -> Option<f64> {
        uniform_step(&self.taus)
    }
}

/// CSV with columns `tau_ns,g2,g2_smoothed`, followed by `g2_err` and
/// `g2_smoothed_err` when both curves carry errors. `smoothed` must share
/// the raw curve's grid.
pub fn g2_csv(raw: &G2Curve, smoothed: &G2Curve) -> Result<String> {
    if raw.taus != smoothed.taus {
        return invalid("raw and smoothed curves must share a tau grid");
    }
    let mut s = String::new();
    let _ = writeln!(s, "# sigma_ns={}", smoothed.sigma * 1e9);
    match (&raw.errors, &smoothed.errors) {
        (Some(re), Some(se)) => {
            s.push_str("tau_ns,g2,g2_smoothed,g2_err,g2_smoothed_err\n");
            for i in 0..raw.len() {
                let _ = writeln!(
                    s,
                    "{:.6},{:.12e},{:.12e},{:.12e},{:.12e}",
                    raw.taus[i] * 1e9,
                    raw.values[i],
                    smoothed.values[i],
                    re[i],
                    se[i]
                );
            }
        }
        _ => {
            s.push_str("tau_ns,g2,g2_smoothed\n");
            for i in 0..raw.len() {
                let _ = writeln!(
                    s,
                    "{:.6},{:.12e},{:.12e}",
                    raw.taus[i] * 1e9,
                    raw.values[i],
                    smoothed.values[i]
                );
            }
        }
    }
    Ok(s)
}

/// `n` points spaced evenly over `[-half_width, half_width]`. Use an odd `n`
/// to include τ = 0.
pub fn symmetric_taus(half_width: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let step = 2.0 * half_width / (n - 1) as f64;
    (0..n)
        .map(|k| {
            let centered = k as f64 - (n - 1) as f64 / 2.0;
            centered * step
        })
        .collect()
}

/// Default regression grid: ±3 μs, 2049 points (τ = 0 sits on the grid).
pub fn default_taus() -> Vec<f64> {
    symmetric_taus(3e-6, 2049)
}

fn uniform_step(taus: &[f64]) -> Option<f64> {
    if taus.len() < 2 {
        return None;
    }
    let step = (taus[taus.len() - 1] - taus[0]) / (taus.len() - 1) as f64;
    if step <= 0.0 {
        return None;
    }
    let ok = taus.windows(2).all(|w| ((w[1] - w[0]) - step).abs() <= 1e-6 * step);
    ok.then_some(step)
}

/// ⟨a†a⟩ in the steady state; errors when it vanishes.
fn checked_nbar(rho: &DensityMatrix) -> Result<f64> {
    let nbar = rho.mean_photon_number();
    if !(nbar > 1e-14) {
        return Err(Error::UndefinedCorrelation(format!("mean photon number {nbar:e} is zero")));
    }
    Ok(nbar)
}

/// g²(0) = ⟨a†a†aa⟩/n̄² straight from the state.
pub fn g2_zero_direct(rho: &DensityMatrix) -> Result<f64> {
    let nbar = checked_nbar(rho)?;
    let a = annihilator(rho.space());
    let a = a.matrix();
    let ad = a.adjoint();
    let op = &ad * &ad * a * a;
    Ok((op * rho.matrix()).trace().re / (nbar * nbar))
}

/// g²(τ) = Tr[a†a e^{Lτ}(aρa†)]/n̄² for |τ|, so the result is even in τ.
pub fn g2_regression(gen: &LindbladGenerator, rho_ss: &DensityMatrix, taus: &[f64]) -> Result<G2Curve> {
    g2_regression_with(gen, rho_ss, taus, &Tolerances::default())
}

/// [`g2_regression`] with explicit integrator tolerances.
pub fn g2_regression_with(
    gen: &LindbladGenerator,
    rho_ss: &DensityMatrix,
    taus: &[f64],
    tol: &Tolerances,
) -> Result<G2Curve> {
    gen.space().check(&rho_ss.space())?;
    if taus.iter().any(|t| !t.is_finite()) {
        return invalid("tau values must be finite");
    }
    let nbar = checked_nbar(rho_ss)?;
    let a = annihilator(gen.space());
    let a = a.matrix();
    let seed = a * rho_ss.matrix() * a.adjoint() / C64::new(nbar, 0.0);

    let mut abs: Vec<f64> = taus.iter().map(|t| t.abs()).collect();
    abs.sort_by(f64::total_cmp);
    abs.dedup();
    let states = propagate_operator(gen, &seed, &abs, tol)?;
    let number = a.adjoint() * a;
    let at_abs: Vec<f64> = states
        .iter()
        .map(|x| (&number * x).trace().re / nbar)
        .collect();
    let values = taus
        .iter()
        .map(|t| {
            let k = abs.binary_search_by(|v| v.total_cmp(&t.abs())).expect("present");
            at_abs[k]
        })
        .collect();
    G2Curve::new(taus.to_vec(), values)
}

/// Which cavity emission rate to compare against fluorescence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FluxConvention {
    /// κ·n̄, as written for the cavity output rate.
    #[default]
    Kappa,
    /// 2κ·n̄, the total photon loss rate of the mode.
    TwoKappa,
}

impl FluxConvention {
    fn factor(self) -> f64 {
        match self {
            FluxConvention::Kappa => 1.0,
            FluxConvention::TwoKappa => 2.0,
        }
    }
}

/// κn̄ / (γ₄₃′·⟨σ₃′₃′⟩) from expectation values.
pub fn flux_ratio(p: &CqedParams, rho_ss: &DensityMatrix) -> Result<f64> {
    flux_ratio_with(p, rho_ss, FluxConvention::Kappa)
}

pub fn flux_ratio_with(p: &CqedParams, rho_ss: &DensityMatrix, conv: FluxConvention) -> Result<f64> {
    let pop = rho_ss.level_population(Level::L3p);
    if !(pop > 0.0) {
        return invalid("population of 3' is zero; fluorescence flux undefined");
    }
    Ok(conv.factor() * p.kappa * rho_ss.mean_photon_number() / (p.gamma_43p() * pop))
}

/// Same ratio from the generator's jump-channel rates Tr(LρL†).
pub fn flux_ratio_from_channels(
    gen: &LindbladGenerator,
    rho_ss: &DensityMatrix,
    conv: FluxConvention,
) -> Result<f64> {
    let cav = gen
        .channel_index(Channel::Cavity)
        .ok_or_else(|| Error::InvalidInput("generator has no cavity channel".into()))?;
    let fl = gen
        .channel_index(Channel::Decay3pTo4)
        .ok_or_else(|| Error::InvalidInput("generator has no 3'->4 channel".into()))?;
    let fluor = gen.jump_rate(fl, rho_ss);
    if !(fluor > 0.0) {
        return invalid("3'->4 fluorescence rate is zero");
    }
    // The cavity channel rate is the full 2κn̄.
    Ok(gen.jump_rate(cav, rho_ss) * conv.factor() / 2.0 / fluor)
}

/// Discrete convolution with a normalized Gaussian of standard deviation
/// `sigma` (seconds). Near the edges the kernel is cut off and renormalized
/// over the samples that exist. Errors, if present, are propagated as
/// independent.
pub fn smooth_gaussian(curve: &G2Curve, sigma: f64) -> Result<G2Curve> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid("sigma must be finite and non-negative");
    }
    let step = match uniform_step(&curve.taus) {
        Some(s) => s,
        None if curve.len() <= 1 => {
            let mut out = curve.clone();
            out.sigma = sigma;
            return Ok(out);
        }
        None => return invalid("smoothing needs a uniform tau grid"),
    };
    if sigma == 0.0 {
        return Ok(curve.clone());
    }
    let reach = ((8.0 * sigma / step).ceil() as usize).min(curve.len());
    let kernel: Vec<f64> = (0..=reach)
        .map(|k| (-0.5 * (k as f64 * step / sigma).powi(2)).exp())
        .collect();
    let n = curve.len();
    let mut values = vec![0.0; n];
    let mut errors = curve.errors.as_ref().map(|_| vec![0.0; n]);
    for i in 0..n {
        let lo = i.saturating_sub(reach);
        let hi = (i + reach).min(n - 1);
        let mut mass = 0.0;
        let mut acc = 0.0;
        let mut var = 0.0;
        for j in lo..=hi {
            let w = kernel[i.abs_diff(j)];
            mass += w;
            acc += w * curve.values[j];
            if let Some(e) = &curve.errors {
                var += w * w * e[j] * e[j];
            }
        }
        values[i] = acc / mass;
        if let Some(out) = errors.as_mut() {
            out[i] = var.sqrt() / mass;
        }
    }
    Ok(G2Curve {
        taus: curve.taus.clone(),
        values,
        errors,
        sigma,
        label: curve.label.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::steady_state;
    use crate::model::{mhz, DriveParams};
    use crate::opalg::{number, HilbertSpace};
    use proptest::prelude::*;

    fn model_state(x: f64, n_max: usize) -> (LindbladGenerator, DensityMatrix) {
        let s = HilbertSpace::new(n_max).unwrap();
        let d = DriveParams::default().with_pump_ratio(x).unwrap();
        let gen = LindbladGenerator::from_model(&CqedParams::default(), &d, s);
        let rho = steady_state(&gen).unwrap();
        (gen, rho)
    }

    #[test]
    fn coherent_cavity_is_flat() {
        let s = HilbertSpace::new(8).unwrap();
        let mut p = CqedParams::default();
        p.g0 = 0.0;
        let d = DriveParams {
            i3: 0.0,
            ..DriveParams::default()
        };
        let a = annihilator(s);
        let drive = &(&a + &a.dagger()).scale(mhz(0.3)) + &number(s).scale(mhz(1.0));
        let gen = LindbladGenerator::from_model(&p, &d, s).with_extra_hamiltonian(&drive).unwrap();
        let rho = steady_state(&gen).unwrap();
        let taus = symmetric_taus(1e-6, 41);
        let c = g2_regression(&gen, &rho, &taus).unwrap();
        // Fock truncation at n_max = 8 for |α|² ≈ 5e-3 is far below 1e-8.
        for v in &c.values {
            assert!((v - 1.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn zero_photons_rejected() {
        let s = HilbertSpace::new(3).unwrap();
        let gen = LindbladGenerator::from_model(&CqedParams::default(), &DriveParams::default(), s);
        let rho = steady_state(&gen).unwrap();
        assert!(matches!(
            g2_regression(&gen, &rho, &[0.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn regression_consistent_at_zero_and_even() {
        let (gen, rho) = model_state(0.17, 8);
        let taus = symmetric_taus(2e-7, 21);
        let c = g2_regression(&gen, &rho, &taus).unwrap();
        let direct = g2_zero_direct(&rho).unwrap();
        assert!((c.at(0.0).unwrap() - direct).abs() < 1e-10);
        for i in 0..c.len() {
            assert_eq!(c.values[i], c.values[c.len() - 1 - i]);
        }
    }

    #[test]
    fn antibunched_at_low_pump() {
        let (gen, rho) = model_state(0.17, 8);
        let taus = symmetric_taus(2e-7, 401);
        let c = g2_regression(&gen, &rho, &taus).unwrap();
        let zero = c.at(0.0).unwrap();
        assert!(zero < 1.0);
        assert!(c.at(1e-8).unwrap() > zero && c.at(2e-7).unwrap() > zero);
        // The raw curve rings slightly below g²(0) within the first few ns;
        // after the 5 ns detector-style smoothing the dip at 0 is strict.
        let sm = smooth_gaussian(&c, 5e-9).unwrap();
        let mid = sm.len() / 2;
        assert!(sm.values[mid + 1..].iter().all(|v| *v > sm.values[mid]));
        let (_, rho_hi) = model_state(0.83, 8);
        assert!(g2_zero_direct(&rho_hi).unwrap() > zero);
    }

    #[test]
    fn factorizes_at_long_times() {
        let (gen, rho) = model_state(0.17, 8);
        let t = 20.0 / gen.spectral_gap();
        let c = g2_regression(&gen, &rho, &[t]).unwrap();
        assert!((c.values[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn flux_ratio_two_ways() {
        let p = CqedParams::default();
        let (gen, rho) = model_state(0.3, 8);
        for conv in [FluxConvention::Kappa, FluxConvention::TwoKappa] {
            let a = flux_ratio_with(&p, &rho, conv).unwrap();
            let b = flux_ratio_from_channels(&gen, &rho, conv).unwrap();
            assert!((a - b).abs() < 1e-10 * a, "{a} {b}");
        }
    }

    #[test]
    fn flux_ratio_vanishes_when_decoupled() {
        let mut p = CqedParams::default();
        p.coupling_scale = 0.5;
        let s = HilbertSpace::new(6).unwrap();
        let d = DriveParams::default().with_pump_ratio(0.3).unwrap();
        let mut last = f64::INFINITY;
        for g0 in [mhz(16.0), mhz(1.0), mhz(0.01), 0.0] {
            p.g0 = g0;
            let gen = LindbladGenerator::from_model(&p, &d, s);
            let rho = steady_state(&gen).unwrap();
            let r = flux_ratio(&p, &rho).unwrap();
            assert!(r < last);
            last = r;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn flux_ratio_rejects_empty_upper_level() {
        let s = HilbertSpace::new(2).unwrap();
        let rho = DensityMatrix::basis(s, Level::L3, 0);
        assert!(flux_ratio(&CqedParams::default(), &rho).is_err());
    }

    #[test]
    fn smoothing_identity_and_constant() {
        let taus = symmetric_taus(1e-7, 101);
        let c = G2Curve::new(taus.clone(), taus.iter().map(|t| t.sin() + 2.0).collect()).unwrap();
        assert_eq!(smooth_gaussian(&c, 0.0).unwrap(), c);
        let flat = G2Curve::new(taus.clone(), vec![1.25; taus.len()]).unwrap();
        let sm = smooth_gaussian(&flat, 5e-9).unwrap();
        assert_eq!(sm.sigma, 5e-9);
        assert!(sm.values.iter().all(|v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn smoothing_impulse_gives_kernel() {
        let n = 2001;
        let taus = symmetric_taus(1e-6, n);
        let step = taus[1] - taus[0];
        let mut values = vec![0.0; n];
        values[n / 2] = 1.0;
        let sigma = 5e-9;
        let sm = smooth_gaussian(&G2Curve::new(taus.clone(), values).unwrap(), sigma).unwrap();
        let peak = step / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        assert!((sm.values[n / 2] - peak).abs() < 0.01 * peak);
        let k = 5;
        let expect = peak * (-0.5 * (k as f64 * step / sigma).powi(2)).exp();
        assert!((sm.values[n / 2 + k] - expect).abs() < 0.01 * peak);
    }

    #[test]
    fn smoothing_rejects_nonuniform() {
        let c = G2Curve::new(vec![0.0, 1.0, 3.0], vec![1.0; 3]).unwrap();
        assert!(smooth_gaussian(&c, 0.5).is_err());
    }

    #[test]
    fn csv_header() {
        let c = G2Curve::new(vec![-1e-9, 0.0, 1e-9], vec![1.0, 0.5, 1.0]).unwrap();
        let sm = smooth_gaussian(&c, 1e-9).unwrap();
        let csv = g2_csv(&c, &sm).unwrap();
        assert!(csv.lines().nth(1).unwrap() == "tau_ns,g2,g2_smoothed");
        assert_eq!(csv.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_input_range(vals in prop::collection::vec(0.0f64..3.0, 200)) {
            let taus = symmetric_taus(1e-7, vals.len());
            let step = taus[1] - taus[0];
            let c = G2Curve::new(taus, vals).unwrap();
            let sm = smooth_gaussian(&c, 2.0 * step).unwrap();
            prop_assert!(sm.values.iter().all(|v| *v >= 0.0 && *v <= 3.0));
        }
    }
}
