use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use oal_core::correlations::{flux_ratio, g2_csv, g2_regression_with, smooth_gaussian, symmetric_taus};
use oal_core::estimator::{cross_correlate, infer_nbar, normalize_g2, rate_with_error};
use oal_core::evolve::{steady_state, sweep_nbar, LindbladGenerator};
use oal_core::opalg::Level;
use oal_core::semiclassical::threshold_scan;
use oal_core::trajectory::{
    ensemble_average, run_ensemble, ClickRecord, EnsembleSeries, InitialState, Observable, TrajectoryOptions,
    TrajectoryRun,
};

use crate::config::RunConfig;

/// Settings for `estimate` that may come from flags.
#[derive(Clone, Debug, Default)]
pub struct EstimateFlags {
    pub bin_width_ns: Option<u64>,
    pub tau_max_ns: Option<f64>,
    pub background_hz: Option<f64>,
    pub sigma_ns: Option<f64>,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn model_at(cfg: &RunConfig, x: f64) -> Result<LindbladGenerator> {
    let d = cfg.drive_template().with_pump_ratio(x)?;
    Ok(LindbladGenerator::from_model(&cfg.cqed(), &d, cfg.space()?))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<String> {
    let grid = cfg.sweep_grid()?;
    let p = cfg.cqed();
    let d = cfg.drive_template();
    let quantum = sweep_nbar(&p, &d, &grid, cfg.space()?).context("quantum sweep failed")?;
    let semi = threshold_scan(&p, &d, &grid).context("semiclassical scan failed")?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash_line();
    write(&dir.join("quantum.csv"), &(hash.clone() + &quantum.to_csv()))?;
    write(&dir.join("semiclassical.csv"), &(hash.clone() + &semi.to_csv()))?;

    let peak = quantum.peak().context("empty sweep")?;
    let flux: Vec<f64> = quantum
        .points
        .iter()
        .map(|q| q.flux_ratio)
        .filter(|f| f.is_finite())
        .collect();
    let mut s = hash;
    let _ = writeln!(s, "points={}", grid.len());
    let _ = writeln!(s, "x_star={}", peak.x);
    let _ = writeln!(s, "nbar_max={:.10e}", peak.nbar);
    match semi.x_th {
        Some(x) => {
            let _ = writeln!(s, "x_th={x:.10e}");
        }
        None => s.push_str("x_th=absent\n"),
    }
    let semi_max = semi.curve.nbars().into_iter().fold(0.0, f64::max);
    let _ = writeln!(s, "semiclassical_nbar_max={semi_max:.10e}");
    if !flux.is_empty() {
        let lo = flux.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = flux.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "flux_ratio_min={lo:.6}");
        let _ = writeln!(s, "flux_ratio_max={hi:.6}");
    }
    write(&dir.join("summary.txt"), &s)?;
    Ok(s)
}

pub fn cmd_g2(cfg: &RunConfig) -> Result<String> {
    let x = cfg.pump()?;
    let gen = model_at(cfg, x)?;
    let rho = steady_state(&gen).with_context(|| format!("steady state at x = {x}"))?;
    let taus = symmetric_taus(cfg.tau_max_ns * 1e-9, cfg.tau_points);
    let raw = g2_regression_with(&gen, &rho, &taus, &cfg.tolerances()).with_context(|| format!("g2 at x = {x}"))?;
    let smooth = smooth_gaussian(&raw, cfg.sigma_ns * 1e-9)?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash_line();
    write(&dir.join("g2.csv"), &(hash.clone() + &g2_csv(&raw, &smooth)?))?;
    let mid = taus.len() / 2;
    let mut s = hash;
    let _ = writeln!(s, "x={x}");
    let _ = writeln!(s, "nbar={:.10e}", rho.mean_photon_number());
    let _ = writeln!(s, "flux_ratio={:.6}", flux_ratio(&cfg.cqed(), &rho)?);
    let _ = writeln!(s, "g2_0={:.10e}", raw.values[mid]);
    let _ = writeln!(s, "g2_0_smoothed={:.10e}", smooth.values[mid]);
    let _ = writeln!(s, "g2_edge={:.10e}", raw.values[raw.len() - 1]);
    write(&dir.join("g2_summary.txt"), &s)?;
    Ok(s)
}

const OBSERVABLES: [(&str, Observable); 5] = [
    ("nbar", Observable::PhotonNumber),
    ("p3", Observable::Population(Level::L3)),
    ("p4", Observable::Population(Level::L4)),
    ("p3p", Observable::Population(Level::L3p)),
    ("p4p", Observable::Population(Level::L4p)),
];

fn ensemble_csv(runs: &[TrajectoryRun]) -> Result<String> {
    let series: Vec<EnsembleSeries> = if runs.len() >= 2 {
        OBSERVABLES
            .iter()
            .map(|(_, o)| ensemble_average(runs, *o))
            .collect::<oal_core::error::Result<_>>()?
    } else {
        OBSERVABLES
            .iter()
            .map(|(_, o)| EnsembleSeries {
                times: runs[0].traces.times.clone(),
                mean: runs[0].traces.series(*o).to_vec(),
                stderr: vec![f64::NAN; runs[0].traces.times.len()],
            })
            .collect()
    };
    let mut s = String::from("t_ns");
    for (name, _) in OBSERVABLES {
        let _ = write!(s, ",{name}_mean,{name}_se");
    }
    s.push('\n');
    for i in 0..series[0].times.len() {
        let _ = write!(s, "{:.3}", series[0].times[i] * 1e9);
        for e in &series {
            let _ = write!(s, ",{:.10e},{:.10e}", e.mean[i], e.stderr[i]);
        }
        s.push('\n');
    }
    Ok(s)
}

fn rate_trace(record: &ClickRecord, bin_ns: u64) -> Result<String> {
    let counts = record.binned_counts(bin_ns)?;
    let mut s = String::from("bin_start_ms,bin_width_ms,counts,rate_hz\n");
    for (k, c) in counts.iter().enumerate() {
        let start = k as u64 * bin_ns;
        let width = bin_ns.min(record.duration_ns - start);
        let _ = writeln!(
            s,
            "{:.6},{:.6},{c},{:.6}",
            start as f64 * 1e-6,
            width as f64 * 1e-6,
            *c as f64 / (width as f64 * 1e-9)
        );
    }
    Ok(s)
}

/// Mean total rate and its standard error: from the scatter of full rate
/// bins when there are at least two, otherwise Poisson.
fn measured_rate(records: &[ClickRecord], bin_s: f64) -> (f64, f64) {
    match rate_with_error(records, bin_s) {
        Ok(r) => r,
        Err(_) => {
            let n: usize = records.iter().map(|r| r.events.len()).sum();
            let t: f64 = records.iter().map(|r| r.duration()).sum();
            (n as f64 / t, (n as f64).sqrt() / t)
        }
    }
}

pub fn cmd_trajectories(cfg: &RunConfig) -> Result<String> {
    let x = cfg.pump()?;
    let duration = cfg
        .duration_s
        .context("no record length: set `duration_s` in the config")?;
    let seed = cfg.seed.context("no seed")?;
    let gen = model_at(cfg, x)?;
    let rho = steady_state(&gen).with_context(|| format!("steady state at x = {x}"))?;
    let chain = cfg.chain();
    let initial = match cfg.initial.as_str() {
        "steady" => InitialState::Mixed(rho.clone()),
        _ => InitialState::Basis(Level::L3, 0),
    };
    let opts = TrajectoryOptions {
        dt_max: cfg.dt_max_s,
        sample_interval: Some(duration / cfg.sample_points as f64),
        initial,
        stream: 0,
    };
    let mut runs = run_ensemble(&gen, &chain, duration, seed, cfg.count, &opts).context("trajectory ensemble failed")?;

    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    fs::create_dir_all(dir.join("records"))?;
    fs::create_dir_all(dir.join("rates"))?;
    let bin_ns = (cfg.rate_bin_ms * 1e6).round() as u64;
    for (k, run) in runs.iter_mut().enumerate() {
        run.record.header.insert("config_hash".into(), hash.clone());
        run.record.header.insert("x".into(), x.to_string());
        write(&dir.join("records").join(format!("run_{k:04}.txt")), &run.record.to_text())?;
        let trace = format!("# config_hash={hash}\n{}", rate_trace(&run.record, bin_ns)?);
        write(&dir.join("rates").join(format!("run_{k:04}.csv")), &trace)?;
    }
    write(&dir.join("ensemble.csv"), &format!("# config_hash={hash}\n{}", ensemble_csv(&runs)?))?;

    let records: Vec<ClickRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let (rate, se) = measured_rate(&records, cfg.rate_bin_ms * 1e-3);
    let nbar = rho.mean_photon_number();
    let predicted = chain.expected_rate(nbar, cfg.cqed().kappa);
    let mut s = format!("# config_hash={hash}\n");
    let _ = writeln!(s, "x={x}");
    let _ = writeln!(s, "runs={}", runs.len());
    let _ = writeln!(s, "seed={seed}");
    let _ = writeln!(s, "dt_max_s={:.6e}", runs[0].dt_max);
    let _ = writeln!(s, "nbar_steady={nbar:.10e}");
    let _ = writeln!(s, "predicted_rate_hz={predicted:.6e}");
    let _ = writeln!(s, "detected_rate_hz={rate:.6e}");
    let _ = writeln!(s, "detected_rate_se_hz={se:.6e}");
    let _ = writeln!(s, "clicks={}", records.iter().map(|r| r.events.len()).sum::<usize>());
    write(&dir.join("summary.txt"), &s)?;
    Ok(s)
}

fn header_f64(records: &[ClickRecord], key: &str) -> Result<Option<f64>> {
    let mut found: Option<f64> = None;
    for r in records {
        if let Some(v) = r.header.get(key) {
            let v: f64 = v.parse().with_context(|| format!("record header {key}={v} is not a number"))?;
            if found.is_some_and(|f| f != v) {
                bail!("records disagree on {key}");
            }
            found = Some(v);
        }
    }
    Ok(found)
}

/// Estimates g²(τ) and n̄ from click records. Background rate and ξ come
/// from flags, then record headers, then the config.
pub fn cmd_estimate(cfg: &RunConfig, files: &[PathBuf], flags: &EstimateFlags) -> Result<String> {
    if files.is_empty() {
        bail!("no record files given");
    }
    let mut records = Vec::with_capacity(files.len());
    for f in files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let r = ClickRecord::parse(&text).with_context(|| format!("in {}", f.display()))?;
        records.push(r);
    }
    let background = match flags.background_hz {
        Some(b) => b,
        None => header_f64(&records, "background_rate_hz")?.unwrap_or(cfg.background_rate_hz),
    };
    let mut chain = cfg.chain();
    chain.background_rate = background;
    if let Some(xi) = header_f64(&records, "xi")? {
        chain.xi = xi;
    }
    let bin_ns = flags.bin_width_ns.unwrap_or(cfg.bin_width_ns);
    let tau_max = flags.tau_max_ns.unwrap_or(cfg.estimate_tau_max_ns) * 1e-9;
    let sigma = flags.sigma_ns.unwrap_or(cfg.sigma_ns) * 1e-9;

    let mut hist = None;
    for (r, f) in records.iter().zip(files) {
        let h = cross_correlate(r, bin_ns as f64 * 1e-9, tau_max).with_context(|| format!("in {}", f.display()))?;
        match &mut hist {
            None => hist = Some(h),
            Some(acc) => acc.merge(&h)?,
        }
    }
    let hist = hist.expect("at least one record").with_background(background, background);
    let raw = normalize_g2(&hist)?;
    let smooth = smooth_gaussian(&raw, sigma)?;

    let (rate, rate_se) = measured_rate(&records, cfg.rate_bin_ms * 1e-3);
    let kappa = cfg.cqed().kappa;
    let nbar = infer_nbar(rate, &chain, kappa)?;
    let nbar_se = rate_se / (2.0 * kappa * chain.xi);

    let dir = out_dir(cfg)?;
    let mut hash = cfg.hash_line();
    let _ = writeln!(hash, "# inputs={}", files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join(","));
    write(&dir.join("g2_estimate.csv"), &(hash.clone() + &g2_csv(&raw, &smooth)?))?;
    let (r1, r2) = hist.rates();
    let mid = hist.half_bins;
    let mut s = hash;
    let _ = writeln!(s, "records={}", records.len());
    let _ = writeln!(s, "duration_s={:.9}", hist.duration);
    let _ = writeln!(s, "rate_d1_hz={r1:.6e}");
    let _ = writeln!(s, "rate_d2_hz={r2:.6e}");
    let _ = writeln!(s, "background_hz={background:.6e}");
    let _ = writeln!(s, "pairs={}", hist.total_pairs());
    let _ = writeln!(s, "g2_0={:.6e}", raw.values[mid]);
    let _ = writeln!(s, "g2_0_smoothed={:.6e}", smooth.values[mid]);
    let _ = writeln!(s, "nbar={nbar:.6e}");
    let _ = writeln!(s, "nbar_se={nbar_se:.6e}");
    write(&dir.join("estimate_summary.txt"), &s)?;
    Ok(s)
}
