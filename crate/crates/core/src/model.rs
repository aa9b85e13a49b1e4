//! The four-state one-atom-laser model: physical parameters, the
//! rotating-frame Hamiltonian and the dissipative channels.
//!
//! Rates are angular frequencies in rad/s. `kappa` and `gamma` are amplitude
//! decay rates, so the cavity photon loss rate is `2κ` and the total
//! population decay rate of either excited level is `2γ`. Every collapse
//! operator below carries that factor of two; nothing else in the crate
//! re-applies it.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::opalg::{annihilator, atomic_projector, kron, HilbertSpace, Level, Operator, C64};

/// Converts a frequency given as value/2π in MHz into rad/s.
pub fn mhz(value: f64) -> f64 {
    2.0 * PI * value * 1e6
}

/// Inverse of [`mhz`].
pub fn to_mhz(rad_per_s: f64) -> f64 {
    rad_per_s / (2.0 * PI * 1e6)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CqedParams {
    /// Peak single-photon coupling g₀.
    pub g0: f64,
    /// Cavity field amplitude decay rate κ.
    pub kappa: f64,
    /// Atomic dipole amplitude decay rate γ.
    pub gamma: f64,
    /// Effective coupling g/g₀, restricted to [0.5, 1].
    pub coupling_scale: f64,
    pub b_3p3: f64,
    pub b_3p4: f64,
    pub b_4p4: f64,
    pub b_4p3: f64,
}

impl Default for CqedParams {
    fn default() -> Self {
        CqedParams {
            g0: mhz(16.0),
            kappa: mhz(4.2),
            gamma: mhz(2.6),
            coupling_scale: 1.0,
            b_3p3: 0.75,
            b_3p4: 0.25,
            b_4p4: 7.0 / 12.0,
            b_4p3: 5.0 / 12.0,
        }
    }
}

impl CqedParams {
    pub fn from_mhz(g0: f64, kappa: f64, gamma: f64) -> Self {
        CqedParams {
            g0: mhz(g0),
            kappa: mhz(kappa),
            gamma: mhz(gamma),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("g0", self.g0), ("kappa", self.kappa), ("gamma", self.gamma)] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{name} must be a positive rate, got {v}"));
            }
        }
        if !(0.5..=1.0).contains(&self.coupling_scale) {
            return invalid(format!(
                "coupling scale g/g0 = {} outside [0.5, 1]",
                self.coupling_scale
            ));
        }
        for (name, b) in [
            ("b_3p3", self.b_3p3),
            ("b_3p4", self.b_3p4),
            ("b_4p4", self.b_4p4),
            ("b_4p3", self.b_4p3),
        ] {
            if !(0.0..=1.0).contains(&b) {
                return invalid(format!("branching fraction {name} = {b} outside [0, 1]"));
            }
        }
        if (self.b_3p3 + self.b_3p4 - 1.0).abs() > 1e-12 {
            return invalid("branching fractions out of 3' must sum to 1");
        }
        if (self.b_4p4 + self.b_4p3 - 1.0).abs() > 1e-12 {
            return invalid("branching fractions out of 4' must sum to 1");
        }
        Ok(())
    }

    /// Coupling actually used in the Hamiltonian.
    pub fn g(&self) -> f64 {
        self.g0 * self.coupling_scale
    }

    /// Spontaneous 4′ → 3 population rate γ₃₄.
    pub fn gamma_34(&self) -> f64 {
        2.0 * self.gamma * self.b_4p3
    }

    /// Fluorescent 3′ → 4 population rate γ₄₃′.
    pub fn gamma_43p(&self) -> f64 {
        2.0 * self.gamma * self.b_3p4
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticalNumbers {
    pub n0: f64,
    pub big_n0: f64,
    pub c1: f64,
}

pub fn critical_numbers(p: &CqedParams) -> CriticalNumbers {
    let g2 = p.g0 * p.g0;
    let n0 = p.gamma * p.gamma / (2.0 * g2);
    let big_n0 = 2.0 * p.kappa * p.gamma / g2;
    CriticalNumbers {
        n0,
        big_n0,
        c1: 1.0 / big_n0,
    }
}

/// Ratio of the dipole-moment-weighted pump and recycling intensities.
pub const PUMP_RATIO_FACTOR: f64 = 7.0 / 9.0;

/// `x = (7/9) I₃ / I₄`.
pub fn pump_ratio(i3: f64, i4: f64) -> Result<f64> {
    if !(i4 > 0.0) {
        return invalid(format!("recycling intensity I4 must be positive, got {i4}"));
    }
    if !(i3 >= 0.0) {
        return invalid(format!("pump intensity I3 must be non-negative, got {i3}"));
    }
    Ok(PUMP_RATIO_FACTOR * i3 / i4)
}

/// Inverse of [`pump_ratio`]: the I₃ giving pump ratio `x` at fixed I₄.
pub fn pump_intensity(x: f64, i4: f64) -> Result<f64> {
    if !(i4 > 0.0) || !(x >= 0.0) {
        return invalid(format!("need x >= 0 and I4 > 0 (x = {x}, I4 = {i4})"));
    }
    Ok(x * i4 / PUMP_RATIO_FACTOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriveParams {
    /// Dimensionless pump intensity I₃ = (Ω₃/2γ)².
    pub i3: f64,
    /// Dimensionless recycling intensity I₄ = (Ω₄/2γ)².
    pub i4: f64,
    /// Ω₃ detuning from 3 → 3′ (positive = blue).
    pub delta3: f64,
    /// Ω₄ detuning from 4 → 4′ (positive = blue).
    pub delta4: f64,
    /// Cavity detuning ω_C − ω₄₃.
    pub delta_ca: f64,
}

impl Default for DriveParams {
    fn default() -> Self {
        DriveParams {
            i3: 0.0,
            i4: 13.0,
            delta3: mhz(10.0),
            delta4: mhz(17.0),
            delta_ca: mhz(9.0),
        }
    }
}

impl DriveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.i3 >= 0.0 && self.i4 >= 0.0) || !self.i3.is_finite() || !self.i4.is_finite() {
            return invalid("drive intensities must be finite and non-negative");
        }
        for v in [self.delta3, self.delta4, self.delta_ca] {
            if !v.is_finite() {
                return invalid("detunings must be finite");
            }
        }
        Ok(())
    }

    /// Same detunings and I₄, with I₃ chosen to give pump ratio `x`.
    pub fn with_pump_ratio(&self, x: f64) -> Result<Self> {
        Ok(DriveParams {
            i3: pump_intensity(x, self.i4)?,
            ..*self
        })
    }

    pub fn pump_ratio(&self) -> Result<f64> {
        pump_ratio(self.i3, self.i4)
    }

    /// Rabi frequency Ω₃ = 2γ√I₃.
    pub fn omega3(&self, gamma: f64) -> f64 {
        2.0 * gamma * self.i3.sqrt()
    }

    /// Rabi frequency Ω₄ = 2γ√I₄.
    pub fn omega4(&self, gamma: f64) -> f64 {
        2.0 * gamma * self.i4.sqrt()
    }
}

/// Atomic part of the rotating-frame Hamiltonian (level shifts and the two
/// classical drives), as a 4×4 matrix.
///
/// The frame rotates 3′ at the pump frequency, 4 at pump − cavity and 4′ at
/// pump − cavity + recycler, which removes all explicit time dependence.
pub fn atomic_hamiltonian(p: &CqedParams, d: &DriveParams) -> DMatrix<C64> {
    let mut h = DMatrix::zeros(4, 4);
    let re = |v: f64| C64::new(v, 0.0);
    let (l3, l4, l3p, l4p) = (
        Level::L3.index(),
        Level::L4.index(),
        Level::L3p.index(),
        Level::L4p.index(),
    );
    h[(l3p, l3p)] = re(-d.delta3);
    h[(l4, l4)] = re(d.delta_ca - d.delta3);
    h[(l4p, l4p)] = re(d.delta_ca - d.delta3 - d.delta4);
    let half3 = re(0.5 * d.omega3(p.gamma));
    let half4 = re(0.5 * d.omega4(p.gamma));
    h[(l3p, l3)] = half3;
    h[(l3, l3p)] = half3;
    h[(l4p, l4)] = half4;
    h[(l4, l4p)] = half4;
    h
}

/// `a†σ₄₃′ + aσ₃′₄` (without the coupling constant).
pub fn coupling_operator(space: HilbertSpace) -> Operator {
    let a = annihilator(space);
    let field_id = DMatrix::<C64>::identity(space.field_dim(), space.field_dim());
    let lower = kron(&atomic_projector(Level::L4, Level::L3p), &field_id);
    let raise = kron(&atomic_projector(Level::L3p, Level::L4), &field_id);
    let m = a.matrix().adjoint() * lower + a.matrix() * raise;
    Operator::from_matrix(space, m).expect("shape by construction")
}

pub fn build_hamiltonian(p: &CqedParams, d: &DriveParams, space: HilbertSpace) -> Operator {
    let atom = Operator::from_atomic(space, &atomic_hamiltonian(p, d)).expect("4x4");
    &atom + &coupling_operator(space).scale(p.g())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Cavity,
    Decay3pTo3,
    Decay3pTo4,
    Decay4pTo4,
    Decay4pTo3,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Cavity,
        Channel::Decay3pTo3,
        Channel::Decay3pTo4,
        Channel::Decay4pTo4,
        Channel::Decay4pTo3,
    ];

    pub fn is_cavity(self) -> bool {
        self == Channel::Cavity
    }

    /// (upper, lower) for atomic channels.
    pub fn atomic_levels(self) -> Option<(Level, Level)> {
        match self {
            Channel::Cavity => None,
            Channel::Decay3pTo3 => Some((Level::L3p, Level::L3)),
            Channel::Decay3pTo4 => Some((Level::L3p, Level::L4)),
            Channel::Decay4pTo4 => Some((Level::L4p, Level::L4)),
            Channel::Decay4pTo3 => Some((Level::L4p, Level::L3)),
        }
    }

    /// Population rate of the channel (jump operator already includes √rate).
    pub fn rate(self, p: &CqedParams) -> f64 {
        let two_gamma = 2.0 * p.gamma;
        match self {
            Channel::Cavity => 2.0 * p.kappa,
            Channel::Decay3pTo3 => two_gamma * p.b_3p3,
            Channel::Decay3pTo4 => two_gamma * p.b_3p4,
            Channel::Decay4pTo4 => two_gamma * p.b_4p4,
            Channel::Decay4pTo3 => two_gamma * p.b_4p3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseOp {
    pub channel: Channel,
    /// Population rate; `operator` is already scaled by its square root.
    pub rate: f64,
    pub operator: Operator,
}

/// Atomic jump operators `√rate · |lower⟩⟨upper|` as 4×4 matrices.
pub fn atomic_collapse_ops(p: &CqedParams) -> Vec<(Channel, DMatrix<C64>)> {
    Channel::ALL
        .iter()
        .filter_map(|&c| {
            let (upper, lower) = c.atomic_levels()?;
            Some((c, atomic_projector(lower, upper) * C64::new(c.rate(p).sqrt(), 0.0)))
        })
        .collect()
}

/// The five dissipative channels, in [`Channel::ALL`] order.
pub fn build_collapse_ops(p: &CqedParams, space: HilbertSpace) -> Vec<CollapseOp> {
    let mut ops = vec![CollapseOp {
        channel: Channel::Cavity,
        rate: Channel::Cavity.rate(p),
        operator: annihilator(space).scale(Channel::Cavity.rate(p).sqrt()),
    }];
    for (channel, m) in atomic_collapse_ops(p) {
        ops.push(CollapseOp {
            channel,
            rate: channel.rate(p),
            operator: Operator::from_atomic(space, &m).expect("4x4"),
        });
    }
    ops
}
