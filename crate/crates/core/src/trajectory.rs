//! Monte-Carlo wave-function unraveling and the photon-detection chain.
//!
//! Between jumps the unnormalized state evolves under
//! `H_eff = H − (i/2) Σ L†L`, whose norm can only decrease. A jump happens
//! when `‖ψ‖²` falls to a uniform random threshold, so the crossing time can
//! be located by galloping with exact propagators `exp(−i H_eff 2^j τ)`
//! followed by bisection down to one tick `τ = dt_max / 1024`.
//!
//! The state is kept inside one sector of the basis partition that is closed
//! under `H_eff` and maps to a single sector under each jump operator. For
//! the laser model these sectors have at most four states.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::evolve::LindbladGenerator;
use crate::model::Channel;
use crate::opalg::{DensityMatrix, Level, StateVector, C64, ZERO};

/// Sub-steps per `dt_max`; jump times are resolved to this fraction.
pub const TICKS_PER_STEP: u64 = 1024;

/// Optical path from intracavity photon to detector click.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionChain {
    /// Cavity escape efficiency.
    pub eta: f64,
    /// Fraction leaving through the output mirror.
    pub t_mirror: f64,
    /// Propagation efficiency to the detectors.
    pub zeta: f64,
    /// Detector quantum efficiency.
    pub alpha: f64,
    /// Overall probability that a cavity-decay photon is detected.
    pub xi: f64,
    /// Poisson background rate of each detector, in counts per second.
    pub background_rate: f64,
    /// Timestamp resolution in seconds.
    pub resolution: f64,
}

impl Default for DetectionChain {
    fn default() -> Self {
        DetectionChain {
            eta: 0.60,
            t_mirror: 0.50,
            zeta: 0.33,
            alpha: 0.50,
            xi: 0.05,
            background_rate: 0.0,
            resolution: 1e-9,
        }
    }
}

impl DetectionChain {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("t_mirror", self.t_mirror),
            ("zeta", self.zeta),
            ("alpha", self.alpha),
            ("xi", self.xi),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if !(self.background_rate >= 0.0) || !self.background_rate.is_finite() {
            return invalid("background rate must be finite and non-negative");
        }
        if (self.resolution - 1e-9).abs() > 1e-18 {
            return invalid("timestamps are integer nanoseconds; resolution must be 1 ns");
        }
        Ok(())
    }

    /// η·T·ζ·α.
    pub fn factor_product(&self) -> f64 {
        self.eta * self.t_mirror * self.zeta * self.alpha
    }

    /// Relative mismatch between `xi` and the product of the factors.
    pub fn consistency_error(&self) -> f64 {
        let prod = self.factor_product();
        if self.xi == 0.0 {
            return if prod == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (prod - self.xi).abs() / self.xi
    }

    /// Expected detected rate summed over both detectors for a given
    /// cavity photon number and decay rate κ (field amplitude).
    pub fn expected_rate(&self, nbar: f64, kappa: f64) -> f64 {
        2.0 * kappa * nbar * self.xi + 2.0 * self.background_rate
    }

    fn hash_into<H: Hasher>(&self, h: &mut H) {
        for v in [
            self.eta,
            self.t_mirror,
            self.zeta,
            self.alpha,
            self.xi,
            self.background_rate,
            self.resolution,
        ] {
            v.to_bits().hash(h);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Detector {
    D1,
    D2,
}

impl Detector {
    pub fn label(self) -> &'static str {
        match self {
            Detector::D1 => "D1",
            Detector::D2 => "D2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Click {
    pub timestamp_ns: u64,
    pub detector: Detector,
}

/// Timestamped detector events plus the configuration that produced them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClickRecord {
    /// Sorted by `(timestamp_ns, detector)`.
    pub events: Vec<Click>,
    pub duration_ns: u64,
    pub header: BTreeMap<String, String>,
}

impl ClickRecord {
    pub fn new(mut events: Vec<Click>, duration_ns: u64) -> Result<Self> {
        events.sort_unstable();
        if let Some(last) = events.last() {
            if last.timestamp_ns >= duration_ns {
                return invalid(format!(
                    "timestamp {} ns is not before the record end {} ns",
                    last.timestamp_ns, duration_ns
                ));
            }
        }
        Ok(ClickRecord {
            events,
            duration_ns,
            header: BTreeMap::new(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.duration_ns as f64 * 1e-9
    }

    pub fn count(&self, d: Detector) -> usize {
        self.events.iter().filter(|c| c.detector == d).count()
    }

    pub fn timestamps(&self, d: Detector) -> Vec<u64> {
        self.events
            .iter()
            .filter(|c| c.detector == d)
            .map(|c| c.timestamp_ns)
            .collect()
    }

    /// Total count rate over both detectors, in s⁻¹.
    pub fn total_rate(&self) -> f64 {
        self.events.len() as f64 / self.duration()
    }

    /// Counts summed over both detectors in consecutive bins of `bin_ns`.
    pub fn binned_counts(&self, bin_ns: u64) -> Result<Vec<u64>> {
        if bin_ns == 0 {
            return invalid("bin width must be positive");
        }
        let n = self.duration_ns.div_ceil(bin_ns) as usize;
        let mut bins = vec![0u64; n];
        for c in &self.events {
            bins[(c.timestamp_ns / bin_ns) as usize] += 1;
        }
        Ok(bins)
    }

    /// Text form: `# key=value` header lines (always including
    /// `duration_ns`), then one `detector<TAB>timestamp_ns` line per click.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 * self.events.len() + 256);
        let _ = writeln!(s, "# duration_ns={}", self.duration_ns);
        for (k, v) in &self.header {
            if k != "duration_ns" {
                let _ = writeln!(s, "# {k}={v}");
            }
        }
        for c in &self.events {
            let _ = writeln!(s, "{}\t{}", c.detector.label(), c.timestamp_ns);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut events = Vec::new();
        let mut duration = None;
        let mut last = [None::<u64>; 2];
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let err = |msg: String| Error::Parse { line: lineno, msg };
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if rest.is_empty() {
                    continue;
                }
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| err(format!("header line without '=': {rest:?}")))?;
                let (k, v) = (k.trim(), v.trim());
                if k == "duration_ns" {
                    duration = Some(v.parse::<u64>().map_err(|e| err(format!("bad duration: {e}")))?);
                } else {
                    header.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (det, ts) = line
                .split_once('\t')
                .ok_or_else(|| err(format!("expected detector<TAB>timestamp, got {line:?}")))?;
            let detector = match det {
                "D1" => Detector::D1,
                "D2" => Detector::D2,
                other => return Err(err(format!("unknown detector {other:?}"))),
            };
            let timestamp_ns: u64 = ts
                .trim()
                .parse()
                .map_err(|e| err(format!("bad timestamp {ts:?}: {e}")))?;
            let slot = &mut last[detector as usize];
            if slot.is_some_and(|prev| timestamp_ns < prev) {
                return Err(err(format!("{} timestamps decrease", detector.label())));
            }
            *slot = Some(timestamp_ns);
            if let Some(d) = duration {
                if timestamp_ns >= d {
                    return Err(err(format!("timestamp {timestamp_ns} not before duration {d}")));
                }
            }
            events.push(Click {
                timestamp_ns,
                detector,
            });
        }
        let duration_ns = duration.ok_or(Error::Parse {
            line: 0,
            msg: "missing '# duration_ns=' header".into(),
        })?;
        let mut rec = ClickRecord::new(events, duration_ns)?;
        rec.header = header;
        Ok(rec)
    }
}

/// Quantity tracked along trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observable {
    PhotonNumber,
    Population(Level),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Traces {
    pub times: Vec<f64>,
    pub nbar: Vec<f64>,
    /// Indexed by `Level::index()`.
    pub populations: [Vec<f64>; 4],
}

impl Traces {
    pub fn series(&self, obs: Observable) -> &[f64] {
        match obs {
            Observable::PhotonNumber => &self.nbar,
            Observable::Population(l) => &self.populations[l.index()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRun {
    pub seed: u64,
    pub stream: u64,
    pub duration: f64,
    pub dt_max: f64,
    pub traces: Traces,
    pub record: ClickRecord,
    /// Jumps per generator channel, in generator order.
    pub jump_counts: Vec<u64>,
    /// Fingerprint of the generator and run settings; runs are comparable
    /// only when it matches.
    pub config_id: u64,
}

impl TrajectoryRun {
    pub fn cavity_jumps(&self, gen: &LindbladGenerator) -> u64 {
        gen.channel_index(Channel::Cavity)
            .map_or(0, |k| self.jump_counts[k])
    }
}

/// How each trajectory's starting pure state is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    /// A single basis state |level⟩⊗|n⟩.
    Basis(Level, usize),
    /// A fixed pure state; it must lie in one sector.
    Pure(StateVector),
    /// A pure state drawn from the eigen-decomposition of a density matrix
    /// that is block-diagonal in the sectors, e.g. the steady state. The
    /// ensemble then starts in that mixed state.
    Mixed(DensityMatrix),
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Basis(Level::L3, 0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryOptions {
    /// Coarsest step; defaults to `0.1 / Γ_max` with `Γ_max` the largest
    /// eigenvalue of `Σ L†L`.
    pub dt_max: Option<f64>,
    /// Spacing of observable samples (first sample at t = 0). `None`
    /// records nothing.
    pub sample_interval: Option<f64>,
    pub initial: InitialState,
    /// Random stream index under the master seed.
    pub stream: u64,
}

/// Per-trajectory random generator: ChaCha8 keyed by the master seed, with
/// the trajectory index as the stream number.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

struct JumpMap {
    channel: usize,
    target: usize,
    /// Row-major `target_dim × source_dim`.
    matrix: Vec<C64>,
}

struct Sector {
    basis: Vec<usize>,
    /// `exp(−i H_eff 2^j τ)` row-major, j = 0..levels.
    props: Vec<Vec<C64>>,
    jumps: Vec<JumpMap>,
}

/// Precomputed sector propagators and jump maps for one generator.
pub struct Unraveling {
    sectors: Vec<Sector>,
    sector_of: Vec<usize>,
    tick: f64,
    dt_max: f64,
    photon: Vec<f64>,
    level: Vec<usize>,
    n_channels: usize,
    fingerprint: u64,
}

fn find(p: &mut [usize], mut x: usize) -> usize {
    while p[x] != x {
        p[x] = p[p[x]];
        x = p[x];
    }
    x
}

fn union(p: &mut [usize], a: usize, b: usize) -> bool {
    let (ra, rb) = (find(p, a), find(p, b));
    if ra == rb {
        return false;
    }
    p[ra.max(rb)] = ra.min(rb);
    true
}

fn matvec(m: &[C64], x: &[C64], y: &mut [C64]) {
    let n = x.len();
    for (r, out) in y.iter_mut().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        let mut acc = ZERO;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *out = acc;
    }
}

fn norm_sqr(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

/// Largest power-of-two tick count needed to span `duration`.
fn levels_for(total_ticks: u64) -> usize {
    (64 - total_ticks.max(1).leading_zeros()) as usize
}

impl Unraveling {
    pub fn new(gen: &LindbladGenerator, dt_max: Option<f64>, duration: f64) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return invalid(format!("duration must be positive, got {duration}"));
        }
        let space = gen.space();
        let d = space.dim();
        let h_eff = gen.effective_hamiltonian();
        let mut rate_op = DMatrix::<C64>::zeros(d, d);
        for l in gen.jumps() {
            rate_op += l.matrix().adjoint() * l.matrix();
        }
        let gamma_max = rate_op
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0f64, |m, v| m.max(*v));
        let dt_max = match dt_max {
            Some(dt) => {
                if !(dt > 0.0) || !dt.is_finite() {
                    return invalid(format!("dt_max must be positive, got {dt}"));
                }
                if gamma_max * dt > 0.1 {
                    return invalid(format!(
                        "dt_max = {dt:e} s allows jump probability {:.3} per step (limit 0.1)",
                        gamma_max * dt
                    ));
                }
                dt
            }
            None if gamma_max > 0.0 => 0.1 / gamma_max,
            None => duration,
        };
        let tick = dt_max / TICKS_PER_STEP as f64;
        let total_ticks = (duration / tick).ceil();
        if total_ticks >= u64::MAX as f64 / 4.0 {
            return invalid("duration is too long for the tick resolution");
        }
        let levels = levels_for(total_ticks as u64);

        // Sector partition: connected under H_eff, then merged until every
        // jump maps each sector into exactly one sector.
        let mut parent: Vec<usize> = (0..d).collect();
        for i in 0..d {
            for j in 0..d {
                if h_eff[(i, j)] != ZERO {
                    union(&mut parent, i, j);
                }
            }
        }
        loop {
            let mut changed = false;
            for l in gen.jumps() {
                let l = l.matrix();
                let mut target_of_root: BTreeMap<usize, usize> = BTreeMap::new();
                for j in 0..d {
                    let src = find(&mut parent, j);
                    for i in 0..d {
                        if l[(i, j)] != ZERO {
                            match target_of_root.get(&src) {
                                Some(&t) => changed |= union(&mut parent, t, i),
                                None => {
                                    target_of_root.insert(src, i);
                                }
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut root_to_sector = BTreeMap::new();
        let mut sector_of = vec![0; d];
        let mut bases: Vec<Vec<usize>> = Vec::new();
        for i in 0..d {
            let r = find(&mut parent, i);
            let s = *root_to_sector.entry(r).or_insert_with(|| {
                bases.push(Vec::new());
                bases.len() - 1
            });
            bases[s].push(i);
            sector_of[i] = s;
        }

        let mut sectors = Vec::with_capacity(bases.len());
        for basis in &bases {
            let m = basis.len();
            let hb = DMatrix::from_fn(m, m, |r, c| h_eff[(basis[r], basis[c])]);
            let props = (0..=levels)
                .map(|j| {
                    let t = tick * (1u64 << j) as f64;
                    let u = (hb.clone() * C64::new(0.0, -t)).exp();
                    let mut flat = Vec::with_capacity(m * m);
                    for r in 0..m {
                        for c in 0..m {
                            flat.push(u[(r, c)]);
                        }
                    }
                    flat
                })
                .collect();
            let mut jumps = Vec::new();
            for (k, l) in gen.jumps().iter().enumerate() {
                let l = l.matrix();
                let target = basis
                    .iter()
                    .flat_map(|&c| (0..d).filter(move |&r| l[(r, c)] != ZERO))
                    .map(|r| sector_of[r])
                    .next();
                if let Some(t) = target {
                    let tb = &bases[t];
                    let mut flat = Vec::with_capacity(tb.len() * m);
                    for &r in tb {
                        for &c in basis {
                            flat.push(l[(r, c)]);
                        }
                    }
                    jumps.push(JumpMap {
                        channel: k,
                        target: t,
                        matrix: flat,
                    });
                }
            }
            sectors.push(Sector {
                basis: basis.clone(),
                props,
                jumps,
            });
        }

        let photon = (0..d).map(|i| space.label(i).1 as f64).collect();
        let level = (0..d).map(|i| space.label(i).0.index()).collect();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for m in std::iter::once(gen.hamiltonian()).chain(gen.jumps()) {
            for z in m.matrix().iter() {
                z.re.to_bits().hash(&mut h);
                z.im.to_bits().hash(&mut h);
            }
        }
        dt_max.to_bits().hash(&mut h);
        Ok(Unraveling {
            sectors,
            sector_of,
            tick,
            dt_max,
            photon,
            level,
            n_channels: gen.jumps().len(),
            fingerprint: h.finish(),
        })
    }

    pub fn dt_max(&self) -> f64 {
        self.dt_max
    }

    pub fn sector_dims(&self) -> Vec<usize> {
        self.sectors.iter().map(|s| s.basis.len()).collect()
    }

    /// Splits `rho` into weighted sector-local pure states.
    fn decompose(&self, rho: &DensityMatrix) -> Result<Vec<(f64, usize, Vec<C64>)>> {
        let m = rho.matrix();
        let d = m.nrows();
        for i in 0..d {
            for j in 0..d {
                if self.sector_of[i] != self.sector_of[j] && m[(i, j)].norm() > 1e-10 {
                    return invalid("initial density matrix couples different sectors");
                }
            }
        }
        let mut out = Vec::new();
        for (s, sector) in self.sectors.iter().enumerate() {
            let b = &sector.basis;
            let block = DMatrix::from_fn(b.len(), b.len(), |r, c| m[(b[r], b[c])]);
            let eig = block.symmetric_eigen();
            for (k, &w) in eig.eigenvalues.iter().enumerate() {
                if w > 1e-14 {
                    out.push((w, s, eig.eigenvectors.column(k).iter().copied().collect()));
                }
            }
        }
        if out.is_empty() {
            return invalid("initial density matrix has no positive weight");
        }
        Ok(out)
    }

    fn locate(&self, psi: &StateVector) -> Result<(usize, Vec<C64>)> {
        let amps = psi.amplitudes();
        let support: Vec<usize> = (0..amps.len()).filter(|&i| amps[i] != ZERO).collect();
        let Some(&first) = support.first() else {
            return invalid("initial state is zero");
        };
        let s = self.sector_of[first];
        if support.iter().any(|&i| self.sector_of[i] != s) {
            return invalid("initial state must lie in a single invariant sector");
        }
        let norm = psi.norm_squared().sqrt();
        let local = self.sectors[s].basis.iter().map(|&i| amps[i] / norm).collect();
        Ok((s, local))
    }
}

struct Walker<'a> {
    un: &'a Unraveling,
    sector: usize,
    psi: Vec<C64>,
    scratch: Vec<C64>,
    now: u64,
}

enum Step {
    Reached,
    Jumped,
}

impl Walker<'_> {
    fn apply(&mut self, level: usize) -> f64 {
        let m = &self.un.sectors[self.sector].props[level];
        let n = self.psi.len();
        self.scratch.resize(n, ZERO);
        matvec(m, &self.psi, &mut self.scratch);
        norm_sqr(&self.scratch)
    }

    fn accept(&mut self, level: usize) {
        std::mem::swap(&mut self.psi, &mut self.scratch);
        self.now += 1u64 << level;
    }

    /// Advances to `boundary` or to the tick where ‖ψ‖² first drops to `r`.
    fn advance(&mut self, r: f64, boundary: u64) -> Step {
        let top = self.un.sectors[self.sector].props.len() - 1;
        let mut j = 0usize;
        loop {
            let dist = boundary - self.now;
            if dist == 0 {
                return Step::Reached;
            }
            let jj = j.min(63 - dist.leading_zeros() as usize).min(top);
            if self.apply(jj) > r {
                self.accept(jj);
                if jj == j && j < top {
                    j += 1;
                }
                continue;
            }
            for k in (0..jj).rev() {
                if self.apply(k) > r {
                    self.accept(k);
                }
            }
            self.apply(0);
            self.accept(0);
            return Step::Jumped;
        }
    }

    /// Applies a randomly chosen jump; returns its channel index.
    fn jump(&mut self, rng: &mut ChaCha8Rng) -> Option<usize> {
        let sector = &self.un.sectors[self.sector];
        let mut weights = Vec::with_capacity(sector.jumps.len());
        let mut outs = Vec::with_capacity(sector.jumps.len());
        for jm in &sector.jumps {
            let td = self.un.sectors[jm.target].basis.len();
            let mut out = vec![ZERO; td];
            matvec(&jm.matrix, &self.psi, &mut out);
            weights.push(norm_sqr(&out));
            outs.push(out);
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let scale = 1.0 / weights[pick].sqrt();
        let jm = &sector.jumps[pick];
        self.sector = jm.target;
        self.psi = outs.swap_remove(pick).into_iter().map(|z| z * scale).collect();
        Some(jm.channel)
    }

    fn sample(&self, traces: &mut Traces) {
        let basis = &self.un.sectors[self.sector].basis;
        let norm = norm_sqr(&self.psi);
        let mut n = 0.0;
        let mut pops = [0.0; 4];
        for (a, &g) in self.psi.iter().zip(basis) {
            let p = a.norm_sqr() / norm;
            n += p * self.un.photon[g];
            pops[self.un.level[g]] += p;
        }
        traces.times.push(self.now as f64 * self.un.tick);
        traces.nbar.push(n);
        for (k, p) in pops.into_iter().enumerate() {
            traces.populations[k].push(p);
        }
    }
}

/// One unraveled trajectory of `duration` seconds with its click record.
pub fn run_trajectory(
    gen: &LindbladGenerator,
    chain: &DetectionChain,
    duration: f64,
    seed: u64,
    opts: &TrajectoryOptions,
) -> Result<TrajectoryRun> {
    let un = Unraveling::new(gen, opts.dt_max, duration)?;
    run_with(&un, gen, chain, duration, seed, opts)
}

/// As [`run_trajectory`] with a prebuilt [`Unraveling`] (which fixes dt_max).
pub fn run_with(
    un: &Unraveling,
    gen: &LindbladGenerator,
    chain: &DetectionChain,
    duration: f64,
    seed: u64,
    opts: &TrajectoryOptions,
) -> Result<TrajectoryRun> {
    chain.validate()?;
    if !(duration > 0.0) || !duration.is_finite() {
        return invalid(format!("duration must be positive, got {duration}"));
    }
    if opts.dt_max.is_some_and(|dt| dt.to_bits() != un.dt_max.to_bits()) {
        return invalid("options dt_max differs from the prepared unraveling");
    }
    let total_ticks = (duration / un.tick).ceil() as u64;
    if levels_for(total_ticks) + 1 > un.sectors[0].props.len() {
        return invalid("duration exceeds the span the unraveling was prepared for");
    }
    let duration_ns = (duration * 1e9).round().max(1.0) as u64;
    // Sample k sits at the tick nearest k·interval, for k·interval < duration.
    let schedule: Vec<u64> = match opts.sample_interval {
        Some(dt) if !(dt > 0.0) || !dt.is_finite() => return invalid("sample interval must be positive"),
        Some(dt) => {
            let n = ((duration / dt) - 1e-9).ceil().max(1.0) as u64;
            let mut ticks: Vec<u64> = (0..n)
                .map(|k| ((k as f64 * dt / un.tick).round() as u64).min(total_ticks - 1))
                .collect();
            ticks.dedup();
            ticks
        }
        None => Vec::new(),
    };
    let cavity = gen.channel_index(Channel::Cavity);

    let mut rng = trajectory_rng(seed, opts.stream);
    let (sector, psi) = match &opts.initial {
        InitialState::Basis(level, n) => {
            if *n > gen.space().fock_cutoff() {
                return invalid("initial photon number exceeds the Fock cutoff");
            }
            un.locate(&StateVector::basis(gen.space(), *level, *n))?
        }
        InitialState::Pure(psi) => {
            gen.space().check(&psi.space())?;
            un.locate(psi)?
        }
        InitialState::Mixed(rho) => {
            gen.space().check(&rho.space())?;
            let parts = un.decompose(rho)?;
            let total: f64 = parts.iter().map(|p| p.0).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = parts.len() - 1;
            for (i, part) in parts.iter().enumerate() {
                if u < part.0 {
                    pick = i;
                    break;
                }
                u -= part.0;
            }
            let (_, s, v) = parts.into_iter().nth(pick).expect("index in range");
            (s, v)
        }
    };
    let mut w = Walker {
        un,
        sector,
        psi,
        scratch: Vec::new(),
        now: 0,
    };
    let mut traces = Traces::default();
    let mut upcoming = schedule.iter().copied().peekable();
    let mut jump_counts = vec![0u64; un.n_channels];
    let mut clicks = Vec::new();
    let mut r = 1.0 - rng.random::<f64>();
    loop {
        if upcoming.next_if_eq(&w.now).is_some() {
            w.sample(&mut traces);
            continue;
        }
        let boundary = upcoming.peek().copied().unwrap_or(total_ticks);
        match w.advance(r, boundary) {
            Step::Reached if w.now >= total_ticks => break,
            Step::Reached => continue,
            Step::Jumped => {
                if w.now >= total_ticks {
                    break;
                }
                let Some(k) = w.jump(&mut rng) else {
                    // No channel can fire from here; the state is dark.
                    r = 0.0;
                    continue;
                };
                jump_counts[k] += 1;
                if Some(k) == cavity && rng.random::<f64>() < chain.xi {
                    let detector = if rng.random::<bool>() { Detector::D1 } else { Detector::D2 };
                    let t = w.now as f64 * un.tick;
                    let ts = ((t / chain.resolution).floor() as u64).min(duration_ns - 1);
                    clicks.push(Click {
                        timestamp_ns: ts,
                        detector,
                    });
                }
                r = 1.0 - rng.random::<f64>();
            }
        }
    }
    if chain.background_rate > 0.0 {
        for detector in [Detector::D1, Detector::D2] {
            let mut t = 0.0;
            loop {
                t += -(1.0 - rng.random::<f64>()).ln() / chain.background_rate;
                if t >= duration {
                    break;
                }
                let ts = ((t / chain.resolution).floor() as u64).min(duration_ns - 1);
                clicks.push(Click {
                    timestamp_ns: ts,
                    detector,
                });
            }
        }
    }
    let mut record = ClickRecord::new(clicks, duration_ns)?;
    record.header.insert("seed".into(), seed.to_string());
    record.header.insert("stream".into(), opts.stream.to_string());
    record.header.insert("xi".into(), chain.xi.to_string());
    record.header.insert("background_rate_hz".into(), chain.background_rate.to_string());
    record.header.insert("dt_max_s".into(), format!("{:e}", un.dt_max));

    let mut h = std::collections::hash_map::DefaultHasher::new();
    un.fingerprint.hash(&mut h);
    chain.hash_into(&mut h);
    duration.to_bits().hash(&mut h);
    schedule.hash(&mut h);
    format!("{:?}", opts.initial).hash(&mut h);
    Ok(TrajectoryRun {
        seed,
        stream: opts.stream,
        duration,
        dt_max: un.dt_max,
        traces,
        record,
        jump_counts,
        config_id: h.finish(),
    })
}

/// `count` trajectories under one master seed, stream `k` for run `k`.
pub fn run_ensemble(
    gen: &LindbladGenerator,
    chain: &DetectionChain,
    duration: f64,
    master_seed: u64,
    count: usize,
    opts: &TrajectoryOptions,
) -> Result<Vec<TrajectoryRun>> {
    let un = Unraveling::new(gen, opts.dt_max, duration)?;
    let opts = TrajectoryOptions {
        dt_max: Some(un.dt_max),
        ..opts.clone()
    };
    let one = |k: usize| {
        let o = TrajectoryOptions {
            stream: k as u64,
            ..opts.clone()
        };
        run_with(&un, gen, chain, duration, master_seed, &o)
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<Result<TrajectoryRun>> = {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<Result<TrajectoryRun>> = (0..count).map(one).collect();
    runs.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSeries {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Pointwise mean and standard error of `obs` over runs sharing one config.
pub fn ensemble_average(runs: &[TrajectoryRun], obs: Observable) -> Result<EnsembleSeries> {
    if runs.len() < 2 {
        return invalid("ensemble average needs at least two runs");
    }
    let id = runs[0].config_id;
    if runs.iter().any(|r| r.config_id != id) {
        return invalid("runs come from different configurations");
    }
    let times = runs[0].traces.times.clone();
    let n = runs.len() as f64;
    let mut mean = vec![0.0; times.len()];
    let mut sq = vec![0.0; times.len()];
    for r in runs {
        for (i, v) in r.traces.series(obs).iter().enumerate() {
            mean[i] += v;
            sq[i] += v * v;
        }
    }
    let mut stderr = vec![0.0; times.len()];
    for i in 0..times.len() {
        mean[i] /= n;
        let var = ((sq[i] / n - mean[i] * mean[i]) * n / (n - 1.0)).max(0.0);
        stderr[i] = (var / n).sqrt();
    }
    Ok(EnsembleSeries {
        times,
        mean,
        stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::{propagate, steady_state};
    use crate::model::{CqedParams, DriveParams};
    use crate::opalg::{DensityMatrix, HilbertSpace};

    fn laser(x: f64, n_max: usize) -> LindbladGenerator {
        let s = HilbertSpace::new(n_max).unwrap();
        let d = DriveParams::default().with_pump_ratio(x).unwrap();
        LindbladGenerator::from_model(&CqedParams::default(), &d, s)
    }

    #[test]
    fn default_chain() {
        let c = DetectionChain::default();
        c.validate().unwrap();
        assert!((c.factor_product() - 0.0495).abs() < 1e-12);
        assert!(c.consistency_error() < 0.02);
        let bad = DetectionChain { eta: 1.2, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sectors_are_small() {
        let un = Unraveling::new(&laser(0.17, 8), None, 1e-6).unwrap();
        assert!(un.sector_dims().iter().all(|&m| m <= 4));
        assert_eq!(un.sector_dims().iter().sum::<usize>(), 36);
    }

    #[test]
    fn rejects_bad_inputs() {
        let gen = laser(0.17, 4);
        let chain = DetectionChain::default();
        let o = TrajectoryOptions::default();
        assert!(run_trajectory(&gen, &chain, 0.0, 1, &o).is_err());
        assert!(run_trajectory(&gen, &chain, -1.0, 1, &o).is_err());
        let coarse = TrajectoryOptions {
            dt_max: Some(1e-6),
            ..o
        };
        assert!(run_trajectory(&gen, &chain, 1e-5, 1, &coarse).is_err());
    }

    #[test]
    fn dark_chain_gives_empty_record() {
        let gen = laser(0.17, 4);
        let chain = DetectionChain {
            xi: 0.0,
            ..Default::default()
        };
        let run = run_trajectory(&gen, &chain, 2e-5, 3, &TrajectoryOptions::default()).unwrap();
        assert!(run.record.events.is_empty());
        assert!(run.cavity_jumps(&gen) > 0);
    }

    #[test]
    fn dark_state_never_jumps() {
        let s = HilbertSpace::new(3).unwrap();
        let d = DriveParams {
            i3: 0.0,
            i4: 0.0,
            ..DriveParams::default()
        };
        let gen = LindbladGenerator::from_model(&CqedParams::default(), &d, s);
        let opts = TrajectoryOptions {
            sample_interval: Some(1e-7),
            ..Default::default()
        };
        let run = run_trajectory(&gen, &DetectionChain::default(), 1e-5, 9, &opts).unwrap();
        assert!(run.jump_counts.iter().all(|&c| c == 0));
        assert_eq!(run.traces.times.len(), 100);
        assert!(run.traces.populations[Level::L3.index()].iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_record() {
        let gen = laser(0.17, 6);
        let chain = DetectionChain {
            xi: 0.5,
            background_rate: 1e5,
            ..Default::default()
        };
        let o = TrajectoryOptions::default();
        let a = run_trajectory(&gen, &chain, 5e-5, 42, &o).unwrap();
        let b = run_trajectory(&gen, &chain, 5e-5, 42, &o).unwrap();
        let c = run_trajectory(&gen, &chain, 5e-5, 43, &o).unwrap();
        assert_eq!(a.record.to_text(), b.record.to_text());
        assert_ne!(a.record.events, c.record.events);
    }

    #[test]
    fn record_text_roundtrip() {
        let mut rec = ClickRecord::new(
            vec![
                Click {
                    timestamp_ns: 5,
                    detector: Detector::D2,
                },
                Click {
                    timestamp_ns: 1,
                    detector: Detector::D1,
                },
            ],
            10,
        )
        .unwrap();
        rec.header.insert("seed".into(), "7".into());
        let text = rec.to_text();
        assert_eq!(text, "# duration_ns=10\n# seed=7\nD1\t1\nD2\t5\n");
        assert_eq!(ClickRecord::parse(&text).unwrap(), rec);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("# duration_ns=10\nD3\t1\n", 2),
            ("# duration_ns=10\nD1\t1\nD1 2\n", 3),
            ("# duration_ns=10\nD1\t5\nD1\t4\n", 3),
            ("# duration_ns=10\nD1\t10\n", 2),
            ("# duration_ns=10\nD1\tx\n", 2),
        ];
        for (text, line) in cases {
            match ClickRecord::parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(ClickRecord::parse("D1\t1\n").is_err());
    }

    #[test]
    fn binning_by_hand() {
        let events = [0u64, 4, 5, 9, 12]
            .iter()
            .map(|&t| Click {
                timestamp_ns: t,
                detector: Detector::D1,
            })
            .collect();
        let rec = ClickRecord::new(events, 15).unwrap();
        assert_eq!(rec.binned_counts(5).unwrap(), vec![2, 2, 1]);
    }

    #[test]
    fn ensemble_matches_master_equation() {
        // Single-time values of n̄ or P(3′) are carried by a few percent of
        // the runs, so their 500-run means are far from Gaussian. Per-run
        // time averages over many relaxation times are not, and make the
        // 3σ comparison meaningful.
        let gen = laser(0.17, 6);
        let rho_ss = steady_state(&gen).unwrap();
        let opts = TrajectoryOptions {
            sample_interval: Some(1e-8),
            initial: InitialState::Mixed(rho_ss.clone()),
            ..Default::default()
        };
        let runs = run_ensemble(&gen, &DetectionChain::default(), 2e-5, 11, 500, &opts).unwrap();
        for obs in [
            Observable::PhotonNumber,
            Observable::Population(Level::L3),
            Observable::Population(Level::L3p),
            Observable::Population(Level::L4),
            Observable::Population(Level::L4p),
        ] {
            let per_run: Vec<f64> = runs
                .iter()
                .map(|r| {
                    let v = r.traces.series(obs);
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            let (mean, se) = mean_se(&per_run);
            let want = match obs {
                Observable::PhotonNumber => rho_ss.mean_photon_number(),
                Observable::Population(l) => rho_ss.level_population(l),
            };
            assert!((mean - want).abs() < 3.0 * se, "{obs:?}: {mean} vs {want} ± {se}");
        }
    }

    #[test]
    fn ensemble_follows_transient() {
        let gen = laser(0.17, 6);
        let opts = TrajectoryOptions {
            sample_interval: Some(1e-8),
            ..Default::default()
        };
        let runs = run_ensemble(&gen, &DetectionChain::default(), 4e-7, 11, 4000, &opts).unwrap();
        let rho0 = DensityMatrix::basis(gen.space(), Level::L3, 0);
        let exact = propagate(&gen, &rho0, &runs[0].traces.times).unwrap();
        for obs in [
            Observable::PhotonNumber,
            Observable::Population(Level::L3p),
            Observable::Population(Level::L4),
        ] {
            let value = |r: &DensityMatrix| match obs {
                Observable::PhotonNumber => r.mean_photon_number(),
                Observable::Population(l) => r.level_population(l),
            };
            // 100 ns windows, each averaged per run before comparing.
            for w in 0..4 {
                let span = w * 10..(w + 1) * 10;
                let per_run: Vec<f64> = runs
                    .iter()
                    .map(|r| r.traces.series(obs)[span.clone()].iter().sum::<f64>() / 10.0)
                    .collect();
                let (mean, se) = mean_se(&per_run);
                let want = exact[span].iter().map(value).sum::<f64>() / 10.0;
                assert!((mean - want).abs() < 3.0 * se, "{obs:?} window {w}");
            }
        }
    }

    #[test]
    fn mixed_start_rejects_sector_coherence() {
        let gen = laser(0.17, 2);
        let s = gen.space();
        let mut m = DensityMatrix::mixed_atom_vacuum(s).into_matrix();
        let (i, j) = (s.index(Level::L3, 0), s.index(Level::L3, 1));
        m[(i, j)] = C64::new(0.1, 0.0);
        m[(j, i)] = C64::new(0.1, 0.0);
        let rho = DensityMatrix::new_unchecked(s, m).unwrap();
        let opts = TrajectoryOptions {
            initial: InitialState::Mixed(rho),
            ..Default::default()
        };
        assert!(run_trajectory(&gen, &DetectionChain::default(), 1e-7, 1, &opts).is_err());
    }

    #[test]
    fn ensemble_rejects_mixed_and_small() {
        let gen = laser(0.17, 4);
        let o = TrajectoryOptions {
            sample_interval: Some(1e-7),
            ..Default::default()
        };
        let a = run_trajectory(&gen, &DetectionChain::default(), 1e-6, 1, &o).unwrap();
        let b = run_trajectory(&gen, &DetectionChain::default(), 2e-6, 1, &o).unwrap();
        assert!(ensemble_average(std::slice::from_ref(&a), Observable::PhotonNumber).is_err());
        assert!(ensemble_average(&[a, b], Observable::PhotonNumber).is_err());
    }

    #[test]
    fn deterministic_runs_have_zero_error() {
        let s = HilbertSpace::new(2).unwrap();
        let d = DriveParams {
            i3: 0.0,
            i4: 0.0,
            ..DriveParams::default()
        };
        let gen = LindbladGenerator::from_model(&CqedParams::default(), &d, s);
        let o = TrajectoryOptions {
            sample_interval: Some(1e-7),
            ..Default::default()
        };
        let runs = run_ensemble(&gen, &DetectionChain::default(), 1e-6, 5, 4, &o).unwrap();
        let e = ensemble_average(&runs, Observable::Population(Level::L3)).unwrap();
        assert!(e.stderr.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn click_rate_and_thinning() {
        let gen = laser(0.17, 6);
        let p = CqedParams::default();
        let nbar = steady_state(&gen).unwrap().mean_photon_number();
        let chain = DetectionChain {
            background_rate: 2e4,
            ..Default::default()
        };
        let runs = run_ensemble(&gen, &chain, 2e-4, 77, 200, &TrajectoryOptions::default()).unwrap();
        let rates: Vec<f64> = runs.iter().map(|r| r.record.total_rate()).collect();
        let (mean, se) = mean_se(&rates);
        let want = chain.expected_rate(nbar, p.kappa);
        // The first ~1 μs is transient; its bias is far below the error bar.
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} ± {se}");

        let emitted: u64 = runs.iter().map(|r| r.cavity_jumps(&gen)).sum();
        let clean = DetectionChain::default();
        let clean_runs = run_ensemble(&gen, &clean, 2e-4, 77, 200, &TrajectoryOptions::default()).unwrap();
        let detected: usize = clean_runs.iter().map(|r| r.record.events.len()).sum();
        let emitted_clean: u64 = clean_runs.iter().map(|r| r.cavity_jumps(&gen)).sum();
        assert_eq!(emitted, emitted_clean);
        let ratio = detected as f64 / emitted as f64;
        let binom = (clean.xi * (1.0 - clean.xi) / emitted as f64).sqrt();
        assert!((ratio - clean.xi).abs() < 3.0 * binom);
        let per_time = emitted as f64 / (200.0 * 2e-4);
        assert!((per_time / (2.0 * p.kappa * nbar) - 1.0).abs() < 0.03);
    }

    #[test]
    fn stderr_scales_as_inverse_sqrt() {
        let gen = laser(0.17, 4);
        let o = TrajectoryOptions {
            sample_interval: Some(5e-8),
            ..Default::default()
        };
        let small = run_ensemble(&gen, &DetectionChain::default(), 5e-7, 1, 100, &o).unwrap();
        let large = run_ensemble(&gen, &DetectionChain::default(), 5e-7, 2, 400, &o).unwrap();
        let a = ensemble_average(&small, Observable::Population(Level::L4)).unwrap();
        let b = ensemble_average(&large, Observable::Population(Level::L4)).unwrap();
        // Compare at late samples where the spread is developed.
        let k = a.times.len() - 1;
        let ratio = a.stderr[k] / b.stderr[k];
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }
}
