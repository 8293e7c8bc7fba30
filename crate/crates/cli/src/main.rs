use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use uot_core::experiment::{ensure_dir, reconstruct, synthesize, write_manifest, write_reconstruction, PRESETS};
use uot_core::io::{read_measurements_csv, write_field_csv, write_measurements_csv, write_pgm, RangePolicy};
use uot_core::linearized::{compactness_probe, consistency_residual, LinearizedContext, DEFAULT_LINEAR_N};
use uot_core::optics::make_phantom;
use uot_core::{run_experiment, ExperimentConfig, NodalField, RegularGrid, Result, UotError};

#[derive(Parser)]
#[command(name = "uot", version, about = "Ultrasound modulated optical tomography experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with experiment keys; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set recon_n=97`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom absorption field on the forward grid.
    Phantom,
    /// Synthesize measurements for the configured phantom.
    Forward,
    /// Reconstruct the absorption from a measurement file.
    Reconstruct {
        /// Measurement CSV; defaults to `<output_dir>/measurements.csv`.
        #[arg(long)]
        measurements: Option<PathBuf>,
    },
    /// Check the linearized equation against the nonlinear model and probe compactness.
    LinearizeCheck {
        /// Nodes per side of the grid.
        #[arg(long, default_value_t = DEFAULT_LINEAR_N)]
        n: usize,
    },
    /// Run a complete experiment from a named preset.
    Preset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        name: String,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(common: &Common, preset: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, preset) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_phantom(cfg: &ExperimentConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let t = Instant::now();
    let field = make_phantom(cfg.phantom_case()?, &cfg.forward_grid()?, cfg.mu_bar)?;
    let outputs = vec![cfg.output_dir.join("phantom.csv"), cfg.output_dir.join("phantom.pgm")];
    write_field_csv(&field, &outputs[0])?;
    write_pgm(&field, &outputs[1], RangePolicy::Auto)?;
    let timings = [("phantom".to_string(), t.elapsed().as_secs_f64())];
    let results = json!({ "min": field.min(), "max": field.max() });
    write_manifest(&cfg.output_dir, "phantom", cfg, &outputs, &timings, results)?;
    Ok(())
}

fn cmd_forward(cfg: &ExperimentConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let dir = &cfg.output_dir;
    let t = Instant::now();
    let (truth, u, meas, deviation) = synthesize(cfg)?;
    let timings = [("forward".to_string(), t.elapsed().as_secs_f64())];
    let outputs = vec![dir.join("phantom.csv"), dir.join("incident.csv"), dir.join("measurements.csv")];
    write_field_csv(&truth, &outputs[0])?;
    write_field_csv(&u, &outputs[1])?;
    write_measurements_csv(&meas, &outputs[2])?;
    let results = json!({ "measurement_solves": meas.pde_solves, "path_deviation": deviation });
    write_manifest(dir, "forward", cfg, &outputs, &timings, results)?;
    Ok(())
}

fn cmd_reconstruct(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let path = path.unwrap_or_else(|| cfg.output_dir.join("measurements.csv"));
    let meas = read_measurements_csv(&path)?;
    let t = Instant::now();
    let state = reconstruct(cfg, &meas)?;
    let timings = [("reconstruction".to_string(), t.elapsed().as_secs_f64())];
    let outputs = write_reconstruction(&state, &cfg.output_dir)?;
    let results = json!({
        "measurements": path.display().to_string(),
        "iterations": state.iterations,
        "converged": state.converged,
        "final_change": state.history.last(),
        "warnings": state.warnings,
    });
    write_manifest(&cfg.output_dir, "reconstruct", cfg, &outputs, &timings, results)?;
    Ok(())
}

fn cmd_linearize_check(cfg: &ExperimentConfig, n: usize) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let dir = &cfg.output_dir;
    let t = Instant::now();
    let grid = RegularGrid::square(n, cfg.domain_side)?;
    let ctx = LinearizedContext::build(
        &NodalField::constant(grid, cfg.mu_bar),
        cfg.mus_prime,
        cfg.gamma,
        cfg.source()?,
        (cfg.detector_x, cfg.detector_y),
        cfg.region()?,
        cfg.alpha,
        cfg.settings(),
    )?;
    let r = ctx.scan.rect();
    let (cx, cy) = (0.5 * (r.x_min + r.x_max) - 0.2, 0.5 * (r.y_min + r.y_max) + 0.2);
    let mu1 = ctx.restrict(&NodalField::from_fn(grid, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.5).exp()));
    let factors = [0.4, 0.2, 0.1];
    let eps: Vec<f64> = factors.iter().map(|f| f * cfg.mu_bar / mu1.max()).collect();
    let residuals = consistency_residual(&ctx, &mu1, &eps)?;
    let ks = [1u32, 2, 4, 8];
    let ratios = compactness_probe(&ctx, &ks)?;

    let mut table = String::from("eps,eps_over_scale,residual\n");
    for ((e, f), r) in eps.iter().zip(&factors).zip(&residuals) {
        table.push_str(&format!("{e:?},{f:?},{r:?}\n"));
    }
    let mut probe = String::from("k,k1_ratio,k2_ratio\n");
    for (k, (a, b)) in ks.iter().zip(&ratios) {
        probe.push_str(&format!("{k},{a:?},{b:?}\n"));
    }
    let outputs = vec![dir.join("linearized_residual.csv"), dir.join("compactness.csv")];
    std::fs::write(&outputs[0], table)?;
    std::fs::write(&outputs[1], probe)?;
    let timings = [("linearize_check".to_string(), t.elapsed().as_secs_f64())];
    let results = json!({
        "grid_n": n,
        "lower_bounds": [ctx.lower_bounds.0, ctx.lower_bounds.1],
        "residuals": residuals,
        "compactness": ratios,
    });
    write_manifest(dir, "linearize-check", cfg, &outputs, &timings, results)?;
    println!("residuals r(eps): {residuals:?}");
    Ok(())
}

fn cmd_preset(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(cfg)?;
    let m = report.metrics;
    println!(
        "iterations {}, relative L2 error {:.4}, contrast {:.3}, outputs in {}",
        report.state.iterations,
        m.relative_l2_error,
        m.contrast,
        cfg.output_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let preset = match &cli.command {
        Command::Preset { name } => Some(name.as_str()),
        _ => None,
    };
    let cfg = load_config(&cli.common, preset)?;
    match cli.command {
        Command::Phantom => cmd_phantom(&cfg),
        Command::Forward => cmd_forward(&cfg),
        Command::Reconstruct { measurements } => cmd_reconstruct(&cfg, measurements),
        Command::LinearizeCheck { n } => cmd_linearize_check(&cfg, n),
        Command::Preset { .. } => cmd_preset(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn error_record(e: &UotError) -> serde_json::Value {
    let mut record = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
    if let UotError::Config { key, .. } = e {
        record["key"] = json!(key);
    }
    record
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", error_record(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
