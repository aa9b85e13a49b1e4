//! g²(τ) and n̄ from timestamped click records, the way a Hanbury Brown–Twiss
//! experiment does it: cross-detector coincidence histogram, normalization by
//! the singles rates, background correction, then optional smoothing.

use crate::correlations::G2Curve;
use crate::error::{invalid, Error, Result};
use crate::trajectory::{ClickRecord, DetectionChain, Detector};

/// Counts of (D1 at t, D2 at t + τ) pairs in bins of width `bin_width_ns`
/// centred on `k·bin_width_ns` for `|k| ≤ half_bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoincidenceHistogram {
    pub bin_width_ns: u64,
    pub half_bins: usize,
    pub counts: Vec<u64>,
    /// Singles counts on D1 and D2.
    pub singles: (u64, u64),
    /// Summed record duration in seconds.
    pub duration: f64,
    /// Declared background rates (B1, B2) in s⁻¹.
    pub background: (f64, f64),
}

impl CoincidenceHistogram {
    pub fn empty(bin_width_ns: u64, half_bins: usize) -> Self {
        CoincidenceHistogram {
            bin_width_ns,
            half_bins,
            counts: vec![0; 2 * half_bins + 1],
            singles: (0, 0),
            duration: 0.0,
            background: (0.0, 0.0),
        }
    }

    /// Bin centres in seconds.
    pub fn taus(&self) -> Vec<f64> {
        let h = self.half_bins as i64;
        (-h..=h)
            .map(|k| k as f64 * self.bin_width_ns as f64 * 1e-9)
            .collect()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width_ns as f64 * 1e-9
    }

    /// Singles rates (R1, R2) in s⁻¹.
    pub fn rates(&self) -> (f64, f64) {
        (
            self.singles.0 as f64 / self.duration,
            self.singles.1 as f64 / self.duration,
        )
    }

    pub fn with_background(mut self, b1: f64, b2: f64) -> Self {
        self.background = (b1, b2);
        self
    }

    pub fn total_pairs(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin-wise sum. Histograms must share the binning and background.
    pub fn merge(&mut self, other: &CoincidenceHistogram) -> Result<()> {
        if self.bin_width_ns != other.bin_width_ns || self.half_bins != other.half_bins {
            return invalid("histograms have different binning");
        }
        if self.background != other.background {
            return invalid("histograms declare different backgrounds");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.singles.0 += other.singles.0;
        self.singles.1 += other.singles.1;
        self.duration += other.duration;
        Ok(())
    }
}

/// Histogram of all ordered cross-detector pairs with `|τ|` inside the window.
/// `τ = t(D2) − t(D1)`.
pub fn cross_correlate(record: &ClickRecord, bin_width: f64, tau_max: f64) -> Result<CoincidenceHistogram> {
    if !(bin_width >= 1e-9 * (1.0 - 1e-9)) || !bin_width.is_finite() {
        return invalid("bin width must be at least 1 ns");
    }
    let w_ns = (bin_width * 1e9).round();
    if ((bin_width * 1e9) - w_ns).abs() > 1e-6 {
        return invalid("bin width must be a whole number of nanoseconds");
    }
    if !(tau_max >= 0.0) || !tau_max.is_finite() {
        return invalid("tau_max must be finite and non-negative");
    }
    let w = w_ns as u64;
    let half_bins = ((tau_max * 1e9) / w_ns + 1e-9).floor() as usize;
    let mut h = CoincidenceHistogram::empty(w, half_bins);
    h.duration = record.duration();

    let d1 = record.timestamps(Detector::D1);
    let d2 = record.timestamps(Detector::D2);
    h.singles = (d1.len() as u64, d2.len() as u64);
    if record.events.is_empty() {
        return Ok(h);
    }
    if d1.is_empty() || d2.is_empty() {
        return invalid("record has clicks on only one detector; no cross pairs exist");
    }
    // Pair τ (ns) lands in bin k when k·w − w/2 ≤ τ < k·w + w/2, computed
    // in doubled units to stay in integers.
    let reach = (half_bins as i64) * w as i64 * 2 + w as i64; // 2·(K·w + w/2)
    let mut lo = 0usize;
    for &t1 in &d1 {
        let t1 = t1 as i64;
        while lo < d2.len() && 2 * (d2[lo] as i64 - t1) < -reach {
            lo += 1;
        }
        let mut j = lo;
        while j < d2.len() {
            let tau2 = 2 * (d2[j] as i64 - t1);
            if tau2 >= reach {
                break;
            }
            let k = (tau2 + w as i64).div_euclid(2 * w as i64);
            h.counts[(k + half_bins as i64) as usize] += 1;
            j += 1;
        }
    }
    Ok(h)
}

/// g² with √n counting errors.
///
/// The raw value is `n/(R1·R2·T·Δτ)`. With declared backgrounds B1, B2 that
/// are Poissonian and uncorrelated with the signal and with each other,
///
///   g² = (g²_raw·R1·R2 − R1·B2 − B1·R2 + B1·B2) / ((R1 − B1)(R2 − B2)).
pub fn normalize_g2(h: &CoincidenceHistogram) -> Result<G2Curve> {
    if !(h.duration > 0.0) {
        return invalid("histogram has zero duration");
    }
    let (r1, r2) = h.rates();
    let (b1, b2) = h.background;
    if !(b1 >= 0.0 && b2 >= 0.0) {
        return invalid("background rates must be non-negative");
    }
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::NoSignal("a detector recorded no clicks".into()));
    }
    let scale = 1.0 / (r1 * r2 * h.duration * h.bin_width());
    let (values, errors) = if b1 == 0.0 && b2 == 0.0 {
        let v = h.counts.iter().map(|&n| n as f64 * scale).collect();
        let e = h.counts.iter().map(|&n| (n as f64).sqrt() * scale).collect();
        (v, e)
    } else {
        if !(r1 > b1 && r2 > b2) {
            return Err(Error::NoSignal(format!(
                "singles rates ({r1:.4e}, {r2:.4e}) s⁻¹ do not exceed background ({b1:.4e}, {b2:.4e}) s⁻¹"
            )));
        }
        let denom = (r1 - b1) * (r2 - b2);
        let offset = -r1 * b2 - b1 * r2 + b1 * b2;
        let v = h
            .counts
            .iter()
            .map(|&n| (n as f64 * scale * r1 * r2 + offset) / denom)
            .collect();
        let e = h
            .counts
            .iter()
            .map(|&n| (n as f64).sqrt() * scale * r1 * r2 / denom)
            .collect();
        (v, e)
    };
    let mut curve = G2Curve::new(h.taus(), values)?;
    curve.errors = Some(errors);
    curve.label = format!(
        "bin_ns={} T_s={} R=({r1:.6e},{r2:.6e}) B=({b1:.6e},{b2:.6e})",
        h.bin_width_ns, h.duration
    );
    Ok(curve)
}

/// n̄ = (R_total − B1 − B2) / (2κξ).
pub fn infer_nbar(r_total: f64, chain: &DetectionChain, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) || !(chain.xi > 0.0) {
        return invalid("kappa and xi must be positive");
    }
    let signal = r_total - 2.0 * chain.background_rate;
    if signal < 0.0 {
        return Err(Error::NoSignal(format!(
            "total rate {r_total:.4e} s⁻¹ is below the background {:.4e} s⁻¹",
            2.0 * chain.background_rate
        )));
    }
    Ok(signal / (2.0 * kappa * chain.xi))
}

/// Mean total count rate and its standard error from the scatter of
/// `bin`-wide count bins (full bins only).
pub fn rate_with_error(records: &[ClickRecord], bin: f64) -> Result<(f64, f64)> {
    let bin_ns = (bin * 1e9).round() as u64;
    if bin_ns == 0 {
        return invalid("rate bin must be at least 1 ns");
    }
    let mut samples = Vec::new();
    for r in records {
        let full = (r.duration_ns / bin_ns) as usize;
        let counts = r.binned_counts(bin_ns)?;
        samples.extend(counts[..full].iter().map(|&c| c as f64 / (bin_ns as f64 * 1e-9)));
    }
    if samples.len() < 2 {
        return invalid("need at least two full rate bins");
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// n̄ with its standard error, from the binned total rate.
pub fn infer_nbar_with_error(
    records: &[ClickRecord],
    bin: f64,
    chain: &DetectionChain,
    kappa: f64,
) -> Result<(f64, f64)> {
    let (rate, se) = rate_with_error(records, bin)?;
    let nbar = infer_nbar(rate, chain, kappa)?;
    Ok((nbar, se / (2.0 * kappa * chain.xi)))
}
