//! End-to-end experiment driver: configuration, presets, and on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::forward::{add_noise, measure_adjoint, measure_direct, Edge, ForwardModel, MeasurementSet, SourceSpec};
use crate::grid::{NodalField, Rect, RegularGrid};
use crate::io::{write_field_csv, write_measurements_csv, write_pgm, RangePolicy};
use crate::optics::{make_phantom, make_scan_grid, OpticalCoefficients, Phantom, ScanGrid, UltrasoundShape};
use crate::recon::{run_reconstruction, ReconConfig, ReconConstants, ReconState};
use crate::sparse::SolverSettings;

/// Which route produces the synthetic measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementMode {
    Direct,
    Adjoint,
    /// Both routes; the adjoint values are used and the deviation is recorded.
    Both,
}

impl FromStr for MeasurementMode {
    type Err = UotError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "adjoint" => Ok(Self::Adjoint),
            "both" => Ok(Self::Both),
            _ => Err(UotError::config("measurement_path", format!("expected direct, adjoint or both, got `{s}`"))),
        }
    }
}

/// Flat experiment configuration. Every key has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Nodes per side of the grid used to synthesize data.
    pub forward_n: usize,
    /// Nodes per side of the reconstruction grid.
    pub recon_n: usize,
    /// Permit `forward_n == recon_n`.
    pub allow_same_grid: bool,
    pub domain_side: f64,
    pub phantom: String,
    pub mu_bar: f64,
    pub mus_prime: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub source_edge: String,
    pub source_strength: f64,
    pub detector_x: f64,
    pub detector_y: f64,
    pub region_x_min: f64,
    pub region_x_max: f64,
    pub region_y_min: f64,
    pub region_y_max: f64,
    pub scan_n1: usize,
    pub scan_n2: usize,
    /// `gaussian:<sigma1>:<sigma2>` or `perfect`.
    pub ultrasound: String,
    pub max_iters: usize,
    pub rel_change_tol: f64,
    pub relaxation: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub presmooth: bool,
    pub keep_snapshots: bool,
    /// Relative standard deviation of multiplicative noise; 0 disables noise.
    pub noise_level: f64,
    pub noise_seed: u64,
    pub solver_tol: f64,
    pub output_dir: PathBuf,
    /// `direct`, `adjoint` or `both`.
    pub measurement_path: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let recon = ReconConfig::default();
        Self {
            forward_n: 193,
            recon_n: 129,
            allow_same_grid: false,
            domain_side: 5.0,
            phantom: "disk_low".into(),
            mu_bar: crate::optics::MU_BAR,
            mus_prime: crate::optics::MUS_PRIME,
            gamma: crate::optics::GAMMA,
            alpha: 1.0,
            source_edge: "left".into(),
            source_strength: 1.0,
            detector_x: 5.0,
            detector_y: 2.5,
            region_x_min: 0.5,
            region_x_max: 4.5,
            region_y_min: 0.5,
            region_y_max: 4.5,
            scan_n1: 100,
            scan_n2: 100,
            ultrasound: "gaussian:0.1:0.1".into(),
            max_iters: recon.max_iters,
            rel_change_tol: 0.0,
            relaxation: recon.relaxation,
            mu_min: recon.mu_min,
            mu_max: recon.mu_max,
            presmooth: recon.presmooth,
            keep_snapshots: recon.keep_snapshots,
            noise_level: 0.0,
            noise_seed: 0,
            solver_tol: crate::sparse::DEFAULT_TOL,
            output_dir: PathBuf::from("uot-out"),
            measurement_path: "adjoint".into(),
        }
    }
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 4] = ["disk_low", "disk_high", "multi", "elongated"];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "disk_low" => Self { max_iters: 40, ..base },
            "disk_high" => Self {
                phantom: "disk_high".into(),
                max_iters: 70,
                ..base
            },
            "multi" => Self {
                phantom: "multi".into(),
                max_iters: 40,
                ..base
            },
            "elongated" => Self {
                ultrasound: "gaussian:0.1:0.3".into(),
                max_iters: 40,
                ..base
            },
            _ => {
                return Err(UotError::config(
                    "preset",
                    format!("unknown preset `{name}` (expected one of {})", PRESETS.join(", ")),
                ))
            }
        };
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| UotError::config("config", e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Applies a `key=value` override. Values use TOML syntax; bare words are taken as strings.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| UotError::config(assignment, "expected key=value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut table = toml::Table::try_from(&*self).expect("config serializes to a table");
        let current = table
            .get(key)
            .ok_or_else(|| UotError::config(key, "unknown key"))?
            .clone();
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let value = match (&current, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::String(_), v) if !v.is_str() => toml::Value::String(raw.to_string()),
            (_, v) => v,
        };
        if value.type_str() != current.type_str() {
            return Err(UotError::config(key, format!("expected a {}, got `{raw}`", current.type_str())));
        }
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| UotError::config(key, e.message().to_string()))?;
        Ok(())
    }

    pub fn phantom_case(&self) -> Result<Phantom> {
        self.phantom.parse()
    }

    pub fn shape(&self) -> Result<UltrasoundShape> {
        UltrasoundShape::parse(&self.ultrasound).map_err(|e| UotError::config("ultrasound", e.to_string()))
    }

    pub fn mode(&self) -> Result<MeasurementMode> {
        self.measurement_path.parse()
    }

    pub fn source(&self) -> Result<SourceSpec> {
        let edge: Edge = self.source_edge.parse()?;
        if !(self.source_strength > 0.0 && self.source_strength.is_finite()) {
            return Err(UotError::config("source_strength", "must be positive"));
        }
        Ok(SourceSpec::edge(edge, self.source_strength))
    }

    pub fn region(&self) -> Result<Rect> {
        Rect::new(self.region_x_min, self.region_x_max, self.region_y_min, self.region_y_max)
            .map_err(|e| UotError::config("region_x_min", e.to_string()))
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            max_iters: self.max_iters,
            rel_change_tol: self.rel_change_tol,
            relaxation: self.relaxation,
            mu_min: self.mu_min,
            mu_max: self.mu_max,
            presmooth: self.presmooth,
            keep_snapshots: self.keep_snapshots,
        }
    }

    pub fn recon_constants(&self) -> ReconConstants {
        ReconConstants {
            mus_prime: self.mus_prime,
            gamma: self.gamma,
            mu_bar: self.mu_bar,
        }
    }

    pub fn settings(&self) -> SolverSettings {
        SolverSettings::with_tol(self.solver_tol)
    }

    pub fn forward_grid(&self) -> Result<RegularGrid> {
        RegularGrid::square(self.forward_n, self.domain_side).map_err(|e| UotError::config("forward_n", e.to_string()))
    }

    pub fn recon_grid(&self) -> Result<RegularGrid> {
        RegularGrid::square(self.recon_n, self.domain_side).map_err(|e| UotError::config("recon_n", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("domain_side", self.domain_side),
            ("mu_bar", self.mu_bar),
            ("mus_prime", self.mus_prime),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("solver_tol", self.solver_tol),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(UotError::config(key, format!("must be positive, got {v}")));
            }
        }
        if !(self.solver_tol < 1.0) {
            return Err(UotError::config("solver_tol", "must be below 1"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(UotError::config("noise_level", "must be non-negative"));
        }
        if self.forward_n < 3 {
            return Err(UotError::config("forward_n", "need at least 3 nodes per side"));
        }
        if self.recon_n < 3 {
            return Err(UotError::config("recon_n", "need at least 3 nodes per side"));
        }
        if self.forward_n == self.recon_n && !self.allow_same_grid {
            return Err(UotError::config(
                "recon_n",
                "equals forward_n; data and inversion would share a discretization (set allow_same_grid = true to override)",
            ));
        }
        if self.scan_n1 < 3 || self.scan_n2 < 3 {
            return Err(UotError::config("scan_n1", "scan lattice needs at least 3x3 foci"));
        }
        self.phantom_case()?;
        self.shape()?;
        self.mode()?;
        self.source()?;
        let region = self.region()?;
        let domain = self.forward_grid()?;
        make_scan_grid(&domain, region, self.scan_n1, self.scan_n2)
            .map_err(|e| UotError::config("region_x_min", e.to_string()))?;
        if !domain.on_boundary(self.detector_x, self.detector_y) {
            return Err(UotError::config("detector_x", "detector must lie on the domain boundary"));
        }
        self.recon_config()
            .validate()
            .map_err(|e| match e {
                UotError::Config { .. } => e,
                other => UotError::config("recon", other.to_string()),
            })
    }

    pub fn scan(&self) -> Result<ScanGrid> {
        make_scan_grid(&self.forward_grid()?, self.region()?, self.scan_n1, self.scan_n2)
    }
}

/// Summary statistics of a reconstruction against the phantom it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhantomMetrics {
    /// Centroid of the anomaly: the excess `μ − μ̄` over region nodes where it reaches half
    /// its maximum.
    pub centroid: Option<(f64, f64)>,
    /// Mean over nodes inside any inclusion.
    pub mean_inside: f64,
    /// Mean over region nodes at least `margin` away from every inclusion.
    pub mean_background: f64,
    pub contrast: f64,
    /// `‖μ − μ_true‖` over region nodes, mass weighted.
    pub l2_error: f64,
    pub relative_l2_error: f64,
}

pub fn phantom_metrics(mu: &NodalField, truth: &NodalField, case: Phantom, mu_bar: f64, region: Rect, margin: f64) -> Result<PhantomMetrics> {
    mu.grid().check_same(truth.grid())?;
    let g = mu.grid();
    let cell = g.hx() * g.hy();
    let in_region: Vec<usize> = (0..g.len())
        .filter(|&k| {
            let (x, y) = g.node(k);
            region.contains(x, y)
        })
        .collect();
    let peak = in_region.iter().map(|&k| mu.values()[k] - mu_bar).fold(0.0, f64::max);
    let (mut wx, mut wy, mut w) = (0.0, 0.0, 0.0);
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    let (mut err, mut norm) = (0.0, 0.0);
    for &k in &in_region {
        let (x, y) = g.node(k);
        let v = mu.values()[k];
        let excess = v - mu_bar;
        if peak > 0.0 && excess >= 0.5 * peak {
            wx += excess * x;
            wy += excess * y;
            w += excess;
        }
        let dist = case
            .inclusions()
            .iter()
            .map(|&(cx, cy, r, _)| (x - cx).hypot(y - cy) - r)
            .fold(f64::INFINITY, f64::min);
        if dist <= 0.0 {
            sin += v;
            nin += 1;
        } else if dist > margin {
            sout += v;
            nout += 1;
        }
        let t = truth.values()[k];
        err += (v - t).powi(2);
        norm += t * t;
    }
    let mean_inside = if nin > 0 { sin / nin as f64 } else { f64::NAN };
    let mean_background = if nout > 0 { sout / nout as f64 } else { f64::NAN };
    Ok(PhantomMetrics {
        centroid: (w > 0.0).then(|| (wx / w, wy / w)),
        mean_inside,
        mean_background,
        contrast: mean_inside / mean_background,
        l2_error: (cell * err).sqrt(),
        relative_l2_error: (err / norm).sqrt(),
    })
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub truth_forward: NodalField,
    pub truth_recon: NodalField,
    pub measurements: MeasurementSet,
    /// Max relative deviation between the two measurement routes, in `both` mode.
    pub path_deviation: Option<f64>,
    pub state: ReconState,
    pub metrics: PhantomMetrics,
    pub timings: Vec<(String, f64)>,
    pub outputs: Vec<PathBuf>,
}

/// Synthesizes measurements for the configured phantom on the forward grid.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<(NodalField, NodalField, MeasurementSet, Option<f64>)> {
    let grid = cfg.forward_grid()?;
    let truth = make_phantom(cfg.phantom_case()?, &grid, cfg.mu_bar)?;
    let coeffs = OpticalCoefficients::new(truth.clone(), cfg.mus_prime, cfg.gamma)?;
    let model = ForwardModel::new(&coeffs, cfg.source()?, cfg.alpha, cfg.settings())?;
    let scan = cfg.scan()?;
    let shape = cfg.shape()?;
    let eta = (cfg.detector_x, cfg.detector_y);
    let (meas, deviation) = match cfg.mode()? {
        MeasurementMode::Adjoint => (measure_adjoint(&model, &scan, shape, eta)?, None),
        MeasurementMode::Direct => (measure_direct(&model, &scan, shape, eta)?, None),
        MeasurementMode::Both => {
            let a = measure_adjoint(&model, &scan, shape, eta)?;
            let d = measure_direct(&model, &scan, shape, eta)?;
            let dev = a.max_relative_deviation(&d);
            (a, Some(dev))
        }
    };
    let meas = if cfg.noise_level > 0.0 {
        add_noise(&meas, cfg.noise_level, cfg.noise_seed)?
    } else {
        meas
    };
    Ok((truth, model.incident().clone(), meas, deviation))
}

/// Runs the fixed-point reconstruction on the reconstruction grid.
pub fn reconstruct(cfg: &ExperimentConfig, meas: &MeasurementSet) -> Result<ReconState> {
    run_reconstruction(&cfg.recon_grid()?, meas, &cfg.recon_constants(), &cfg.recon_config(), cfg.settings())
}

fn write_history(state: &ReconState, path: &Path) -> Result<()> {
    let mut out = String::from("iteration,rel_change,mu_min,mu_max\n");
    for (k, change) in state.history.iter().enumerate() {
        let (lo, hi) = state.bounds[k + 1];
        out.push_str(&format!("{},{change:?},{lo:?},{hi:?}\n", k + 1));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the reconstruction, its image, the convergence history and any snapshots.
pub fn write_reconstruction(state: &ReconState, dir: &Path) -> Result<Vec<PathBuf>> {
    write_field_csv(&state.mu, &dir.join("mu_recon.csv"))?;
    write_pgm(&state.mu, &dir.join("mu_recon.pgm"), RangePolicy::Auto)?;
    write_history(state, &dir.join("history.csv"))?;
    let mut outputs = vec![dir.join("mu_recon.csv"), dir.join("mu_recon.pgm"), dir.join("history.csv")];
    for (k, snap) in state.snapshots.iter().enumerate() {
        let p = dir.join(format!("mu_iter_{:03}.csv", k + 1));
        write_field_csv(snap, &p)?;
        outputs.push(p);
    }
    Ok(outputs)
}

/// Writes `manifest.json`: the full configuration, tool version, outputs, timings and results.
pub fn write_manifest(
    dir: &Path,
    stage: &str,
    cfg: &ExperimentConfig,
    outputs: &[PathBuf],
    timings: &[(String, f64)],
    results: serde_json::Value,
) -> Result<PathBuf> {
    let manifest = serde_json::json!({
        "tool": "uot",
        "version": env!("CARGO_PKG_VERSION"),
        "stage": stage,
        "config": cfg,
        "timings_s": timings.iter().cloned().collect::<std::collections::BTreeMap<String, f64>>(),
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "results": results,
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(path)
}

/// Creates `dir` if needed and checks that it is writable.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".uot-write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

/// Full pipeline: phantom, synthetic data, reconstruction, metrics and a JSON manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    ensure_dir(&dir)?;
    let mut timings = Vec::new();
    let mut outputs = Vec::new();

    let t = Instant::now();
    let (truth_forward, u, meas, path_deviation) = synthesize(cfg)?;
    timings.push(("forward".to_string(), t.elapsed().as_secs_f64()));
    for (name, field) in [("phantom.csv", &truth_forward), ("incident.csv", &u)] {
        write_field_csv(field, &dir.join(name))?;
        outputs.push(dir.join(name));
    }
    write_pgm(&truth_forward, &dir.join("phantom.pgm"), RangePolicy::Auto)?;
    write_measurements_csv(&meas, &dir.join("measurements.csv"))?;
    outputs.extend([dir.join("phantom.pgm"), dir.join("measurements.csv")]);

    let t = Instant::now();
    let state = reconstruct(cfg, &meas)?;
    timings.push(("reconstruction".to_string(), t.elapsed().as_secs_f64()));
    outputs.extend(write_reconstruction(&state, &dir)?);

    let case = cfg.phantom_case()?;
    let truth_recon = make_phantom(case, &cfg.recon_grid()?, cfg.mu_bar)?;
    let metrics = phantom_metrics(&state.mu, &truth_recon, case, cfg.mu_bar, cfg.region()?, 0.3)?;

    let results = serde_json::json!({
        "iterations": state.iterations,
        "converged": state.converged,
        "final_change": state.history.last(),
        "warnings": state.warnings,
        "measurement_solves": meas.pde_solves,
        "path_deviation": path_deviation,
        "metrics": metrics,
    });
    outputs.push(write_manifest(&dir, "experiment", cfg, &outputs, &timings, results)?);

    Ok(ExperimentReport {
        truth_forward,
        truth_recon,
        measurements: meas,
        path_deviation,
        state,
        metrics,
        timings,
        outputs,
    })
}
