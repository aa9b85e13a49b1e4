//! Run configuration: a flat TOML table whose keys carry their units.
//!
//! Layering, lowest priority first: built-in defaults, the preset (named in
//! the file or on the command line), keys present in the config file, then
//! command-line flags. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use oal_core::model::{mhz, CqedParams, DriveParams};
use oal_core::ode::Tolerances;
use oal_core::opalg::HilbertSpace;
use oal_core::trajectory::DetectionChain;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,

    // Cavity QED, frequencies as value/2π in MHz.
    pub g0_mhz: f64,
    pub kappa_mhz: f64,
    pub gamma_mhz: f64,
    pub coupling_scale: f64,
    pub b_3p3: f64,
    pub b_3p4: f64,
    pub b_4p4: f64,
    pub b_4p3: f64,

    // Drives.
    pub i4: f64,
    pub delta3_mhz: f64,
    pub delta4_mhz: f64,
    pub delta_ca_mhz: f64,
    /// Pump ratio for `g2` and `trajectories`.
    pub x: Option<f64>,
    /// Sweep grid.
    pub x_min: f64,
    pub x_max: Option<f64>,
    pub x_points: usize,
    pub fock_cutoff: usize,

    // Integrator.
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,

    // Regression g².
    pub tau_max_ns: f64,
    pub tau_points: usize,
    pub sigma_ns: f64,

    // Trajectories.
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub count: usize,
    pub dt_max_s: Option<f64>,
    pub sample_points: usize,
    /// "ground" (|3, 0⟩) or "steady" (sampled from the steady state).
    pub initial: String,

    // Detection chain.
    pub eta: f64,
    pub t_mirror: f64,
    pub zeta: f64,
    pub alpha_det: f64,
    pub xi: f64,
    pub background_rate_hz: f64,

    // Estimator.
    pub bin_width_ns: u64,
    pub estimate_tau_max_ns: f64,
    pub rate_bin_ms: f64,

    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = CqedParams::default();
        let d = DriveParams::default();
        let c = DetectionChain::default();
        let to = |v: f64| oal_core::model::to_mhz(v);
        RunConfig {
            preset: None,
            g0_mhz: to(p.g0),
            kappa_mhz: to(p.kappa),
            gamma_mhz: to(p.gamma),
            coupling_scale: p.coupling_scale,
            b_3p3: p.b_3p3,
            b_3p4: p.b_3p4,
            b_4p4: p.b_4p4,
            b_4p3: p.b_4p3,
            i4: d.i4,
            delta3_mhz: to(d.delta3),
            delta4_mhz: to(d.delta4),
            delta_ca_mhz: to(d.delta_ca),
            x: None,
            x_min: 0.0,
            x_max: None,
            x_points: 61,
            fock_cutoff: 8,
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 5_000_000,
            tau_max_ns: 3000.0,
            tau_points: 2049,
            sigma_ns: 5.0,
            seed: None,
            duration_s: None,
            count: 1,
            dt_max_s: None,
            sample_points: 1000,
            initial: "ground".into(),
            eta: c.eta,
            t_mirror: c.t_mirror,
            zeta: c.zeta,
            alpha_det: c.alpha,
            xi: c.xi,
            background_rate_hz: c.background_rate,
            bin_width_ns: 10,
            estimate_tau_max_ns: 1000.0,
            rate_bin_ms: 5.0,
            out_dir: "out".into(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["fig3", "fig4_low", "fig4_high"];

fn preset_table(name: &str) -> Result<toml::Table> {
    let text = match name {
        "fig3" => "x_min = 0.0\nx_max = 2.33\ni4 = 13.0\n",
        "fig4_low" => "x = 0.17\ni4 = 13.0\nsigma_ns = 5.0\n",
        "fig4_high" => "x = 0.83\ni4 = 13.0\nsigma_ns = 5.0\n",
        other => bail!("unknown preset {other:?}; available: {}", PRESETS.join(", ")),
    };
    let mut t: toml::Table = text.parse().expect("preset tables are valid TOML");
    t.insert("preset".into(), toml::Value::String(name.into()));
    Ok(t)
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub out_dir: Option<String>,
    pub seed: Option<u64>,
    pub x: Option<f64>,
}

/// Resolves defaults, preset, file and flags into a validated config.
pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let file_table: toml::Table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            text.parse().with_context(|| format!("parsing config {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    let preset = ov
        .preset
        .clone()
        .or_else(|| file_table.get("preset").and_then(|v| v.as_str()).map(String::from));

    let mut merged = match toml::Value::try_from(RunConfig::default())? {
        toml::Value::Table(t) => t,
        _ => unreachable!("struct serializes to a table"),
    };
    if let Some(name) = &preset {
        merged.extend(preset_table(name)?);
    }
    merged.extend(file_table);
    if let Some(name) = &preset {
        merged.insert("preset".into(), toml::Value::String(name.clone()));
    }
    let mut cfg: RunConfig = toml::Value::Table(merged)
        .try_into()
        .context("invalid configuration")?;
    if let Some(d) = &ov.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = ov.seed {
        cfg.seed = Some(s);
    }
    if let Some(x) = ov.x {
        cfg.x = Some(x);
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.cqed().validate()?;
        self.drive_template().validate()?;
        self.chain().validate()?;
        HilbertSpace::new(self.fock_cutoff)?;
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.max_steps > 0) {
            bail!("rtol, atol and max_steps must be positive");
        }
        if !(self.tau_max_ns > 0.0) || self.tau_points < 1 || self.tau_points % 2 == 0 {
            bail!("tau_max_ns must be positive and tau_points odd (so that tau = 0 is on the grid)");
        }
        if !(self.sigma_ns >= 0.0) {
            bail!("sigma_ns must be non-negative");
        }
        if let Some(x) = self.x {
            if !(x >= 0.0) || !x.is_finite() {
                bail!("x must be finite and non-negative, got {x}");
            }
        }
        if let Some(d) = self.duration_s {
            if !(d > 0.0) || !d.is_finite() {
                bail!("duration_s must be positive, got {d}");
            }
        }
        if self.count == 0 {
            bail!("count must be at least 1");
        }
        if self.sample_points == 0 {
            bail!("sample_points must be at least 1");
        }
        if !matches!(self.initial.as_str(), "ground" | "steady") {
            bail!("initial must be \"ground\" or \"steady\", got {:?}", self.initial);
        }
        if self.bin_width_ns == 0 || !(self.estimate_tau_max_ns >= 0.0) || !(self.rate_bin_ms > 0.0) {
            bail!("bin_width_ns, estimate_tau_max_ns and rate_bin_ms must be positive");
        }
        Ok(())
    }

    pub fn cqed(&self) -> CqedParams {
        CqedParams {
            g0: mhz(self.g0_mhz),
            kappa: mhz(self.kappa_mhz),
            gamma: mhz(self.gamma_mhz),
            coupling_scale: self.coupling_scale,
            b_3p3: self.b_3p3,
            b_3p4: self.b_3p4,
            b_4p4: self.b_4p4,
            b_4p3: self.b_4p3,
        }
    }

    /// Drives with I₃ = 0; callers set the pump through `with_pump_ratio`.
    pub fn drive_template(&self) -> DriveParams {
        DriveParams {
            i3: 0.0,
            i4: self.i4,
            delta3: mhz(self.delta3_mhz),
            delta4: mhz(self.delta4_mhz),
            delta_ca: mhz(self.delta_ca_mhz),
        }
    }

    pub fn chain(&self) -> DetectionChain {
        DetectionChain {
            eta: self.eta,
            t_mirror: self.t_mirror,
            zeta: self.zeta,
            alpha: self.alpha_det,
            xi: self.xi,
            background_rate: self.background_rate_hz,
            ..Default::default()
        }
    }

    pub fn space(&self) -> Result<HilbertSpace> {
        Ok(HilbertSpace::new(self.fock_cutoff)?)
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
        }
    }

    pub fn pump(&self) -> Result<f64> {
        self.x
            .context("no pump ratio: set `x` in the config, pass --x, or use a fig4 preset")
    }

    pub fn sweep_grid(&self) -> Result<Vec<f64>> {
        let x_max = self
            .x_max
            .context("no sweep range: set `x_max` in the config or use --preset fig3")?;
        match self.x_points {
            0 => bail!("sweep grid is empty (x_points = 0)"),
            1 => Ok(vec![self.x_min]),
            n => Ok((0..n)
                .map(|k| self.x_min + (x_max - self.x_min) * k as f64 / (n - 1) as f64)
                .collect()),
        }
    }

    /// SHA-256 of every setting that influences results (not the output
    /// directory or the preset label, which only select settings).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = String::new();
        c.preset = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("sha256:{hex}")
    }

    pub fn hash_line(&self) -> String {
        format!("# config_hash={}\n", self.hash())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
