//! `mcsplit`: run multicontinuum splitting experiments from a config file.
//!
//! Coefficient rasters (`field = { kind = "raster", path = "...", format = "csv" }`)
//! hold `fine_n × fine_n` positive values in row-major order: each row runs
//! along `x`, the first row is the bottom of the domain. The CSV form has one
//! row per line separated by commas or whitespace; the binary form is
//! `fine_n²` little-endian `f64` values with no header.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mcsplit::experiment::{preset, Experiment, ExperimentConfig, Layers, TauChoice, PRESETS};
use mcsplit::macrosystem::Scheme;

#[derive(Parser, Debug)]
#[command(
    name = "mcsplit",
    version,
    about = "Multicontinuum homogenization with partially explicit splitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage and write the full artifact directory.
    Run(Common),
    /// Solve the cell problems and write effective tensors.
    Upscale(Common),
    /// Choose the splitting from the effective tensors.
    Split(Common),
    /// Stability constants and time-step bounds.
    Stability(Common),
    /// Time-step the macro system with one or all schemes.
    Solve(Common),
    /// Fine-grid reference solution.
    Reference(Common),
    /// Relative errors of the macro solutions against the reference.
    Errors(Common),
    /// Merge stage outputs into report.json.
    Report(Common),
    /// Print the resolved config of a preset as TOML.
    Preset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        name: String,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file or preset name (example1 … example5).
    #[arg(long, short)]
    config: String,
    /// Artifact directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Worker threads for the cell problems (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Restrict time stepping to one scheme.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Macro time step: a number or `auto` for 0.9 of the scheme-2 bound.
    #[arg(long)]
    tau: Option<TauChoice>,
    /// Directory for cached cell-problem solutions.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Fine cells per side; the time step scales with h.
    #[arg(long)]
    fine_n: Option<usize>,
    /// Coarse blocks per side (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    coarse_n: Vec<usize>,
    /// Oversampling layers: a number or `auto`.
    #[arg(long)]
    layers: Option<Layers>,
    /// Highest coefficient values for the stability sweep.
    #[arg(long, value_delimiter = ',')]
    contrast_sweep: Vec<f64>,
    /// Validate the config and print the plan without running anything.
    #[arg(long)]
    dry_run: bool,
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return ExperimentConfig::from_file(path).with_context(|| format!("invalid config {spec}"));
    }
    if PRESETS.contains(&spec) {
        return Ok(preset(spec)?);
    }
    bail!(
        "config '{spec}' is neither a readable file nor a preset ({})",
        PRESETS.join(", ")
    )
}

fn experiment(c: &Common) -> Result<Experiment> {
    let mut config = load_config(&c.config)?;
    if let Some(n) = c.fine_n {
        config.set_fine_n(n);
    }
    if !c.coarse_n.is_empty() {
        config.coarse_n = c.coarse_n.clone();
    }
    if let Some(l) = &c.layers {
        config.upscale.layers = l.clone();
    }
    if !c.contrast_sweep.is_empty() {
        config.contrasts = c.contrast_sweep.clone();
    }
    if let Some(s) = c.scheme {
        config.time.schemes = vec![s];
    }
    config
        .validate()
        .context("invalid config after command-line overrides")?;
    Ok(Experiment::new(config, &c.out).with_cache(c.cache_dir.clone()))
}

fn execute(cmd: Command) -> Result<()> {
    let c = match cmd {
        Command::Preset { name } => {
            print!("{}", preset(&name)?.to_toml());
            return Ok(());
        }
        Command::Run(ref c)
        | Command::Upscale(ref c)
        | Command::Split(ref c)
        | Command::Stability(ref c)
        | Command::Solve(ref c)
        | Command::Reference(ref c)
        | Command::Errors(ref c)
        | Command::Report(ref c) => c.clone(),
    };
    let exp = experiment(&c)?;
    if c.dry_run {
        print!("{}", exp.describe()?);
        return Ok(());
    }
    if c.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(c.threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    let levels = exp.config.coarse_n.clone();
    match cmd {
        Command::Run(_) => {
            let report = exp.run_all(c.tau)?;
            println!(
                "wrote {} ({} levels)",
                exp.out.join("report.json").display(),
                report.levels.len()
            );
        }
        Command::Upscale(_) => {
            for cn in levels {
                let a = exp.stage_upscale(cn)?;
                println!(
                    "H=1/{cn}: {} blocks, layers {}, max constraint residual {:.2e}",
                    a.tensors.len(),
                    a.layers,
                    a.max_constraint_residual
                );
            }
        }
        Command::Split(_) => {
            for cn in &levels {
                let p = exp.stage_split(*cn)?;
                let mixing = if p.verdicts.iter().all(|v| v.pass) {
                    "passed"
                } else {
                    "failed"
                };
                println!(
                    "H=1/{cn}: i0 = {}, method {:?}, eigenvalues {:?}, mixing check {mixing}",
                    p.i0, p.method, p.eigenvalues
                );
            }
            exp.stage_eigen_table()?;
        }
        Command::Stability(_) => {
            for &cn in &levels {
                let r = exp.stage_stability(cn)?;
                println!(
                    "H=1/{cn}: gamma {:.4}, tau1 {:?}, tau2 {:?}",
                    r.gamma, r.tau1, r.tau2
                );
            }
            if !exp.config.contrasts.is_empty() {
                let contrasts = exp.config.contrasts.clone();
                exp.stage_stability_table(&contrasts)?;
                println!("wrote {}", exp.out.join("stability_table.csv").display());
            }
        }
        Command::Solve(_) => {
            for &cn in &levels {
                for &s in &exp.config.time.schemes {
                    let a = exp.stage_solve(cn, s, c.tau)?;
                    println!(
                        "H=1/{cn} {s}: tau {:e}, {} steps{}",
                        a.tau,
                        a.steps,
                        if a.diverged { ", diverged" } else { "" }
                    );
                }
            }
        }
        Command::Reference(_) => {
            let r = exp.stage_reference()?;
            println!(
                "reference: {} steps, max residual {:.2e}",
                r.steps, r.max_residual
            );
        }
        Command::Errors(_) => {
            for &cn in &levels {
                for e in exp.stage_errors(cn)? {
                    let last: Vec<String> = (0..e.series.continua.len())
                        .map(|k| e.series.last(k).map_or("-".into(), |v| format!("{v:.4}")))
                        .collect();
                    println!("H=1/{cn} {}: e(T) = [{}]", e.scheme, last.join(", "));
                }
            }
        }
        Command::Report(_) => {
            exp.stage_report()?;
            println!("wrote {}", exp.out.join("report.json").display());
        }
        Command::Preset { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
