use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use enkbf::canonical;
use enkbf::experiment::{
    generate_data, run_evidence_sweep, run_experiment, run_filter, ExperimentKind, ExperimentOutput, Observations,
};
use enkbf::sde::read_increments_csv;
use enkbf::{Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "enkbf", version, about = "Ensemble Kalman-Bucy filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long, short)]
    config: PathBuf,
    /// Override the seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Apply the [paper_scale] overrides
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference path and observed increments
    Generate(Common),
    /// Run the configured filter on generated or loaded increments
    Filter {
        #[command(flatten)]
        common: Common,
        /// Increments CSV (`t,dy_1..`) to filter instead of generating data
        #[arg(long)]
        increments: Option<PathBuf>,
    },
    /// Exact Kalman-Bucy log evidence over a grid of diffusivities
    Evidence {
        #[command(flatten)]
        common: Common,
        /// Comma-separated values of theta (default: the configured grid, or 0.2..1.8)
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
    },
    /// Run every panel of a reference figure with the bundled configurations
    Reproduce {
        /// fig1 .. fig5
        figure: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Print a bundled configuration (or list them)
    ShowConfig { name: Option<String> },
}

fn prepare(mut cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>, paper_scale: bool) -> Result<(ExperimentConfig, PathBuf)> {
    if paper_scale {
        cfg = cfg.at_paper_scale()?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.output.dir = Some(dir.clone());
    Ok((cfg, dir))
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    prepare(cfg, common.seed, common.out.clone(), common.paper_scale)
}

fn report(out: &ExperimentOutput, dir: &Path, elapsed: f64) {
    let s = out.summary();
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    let mut line = format!("{}: {} steps of {}", s.experiment, s.filter_steps, s.filter_dt);
    if !s.final_mean_a.is_empty() && s.final_mean_a.len() <= 4 {
        line += &format!(", final mean_a {:?}, var_a {:?}", s.final_mean_a, s.final_var_a);
    }
    if let Some(m) = s.mle {
        line += &format!(", MLE {:.4} (subsampled {:.4})", m.fine, m.subsampled);
    }
    if let Some(a) = s.evidence_argmax {
        line += &format!(", evidence argmax {a}");
    }
    if let (Some(e), Some(p)) = (s.drift_rms_error, s.prior_rms_error) {
        line += &format!(", drift rms error {e:.4} (prior {p:.4})");
    }
    println!("{line} [{elapsed:.1}s] -> {}", dir.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let (cfg, dir) = load(&common)?;
            let data = generate_data(&cfg)?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            data.path.write_increments_csv(&dir.join("increments.csv"))?;
            data.path.write_states_csv(&dir.join("states.csv"))?;
            if let Some(f) = &data.fstar {
                f.write_csv(&dir.join("reference_drift.csv"))?;
            }
            println!("{} increments -> {}", data.path.n_increments(), dir.display());
        }
        Command::Filter { common, increments } => {
            let (cfg, dir) = load(&common)?;
            let t0 = Instant::now();
            match increments {
                None => {
                    let out = run_experiment(&cfg)?;
                    out.write_artifacts(&dir)?;
                    report(&out, &dir, t0.elapsed().as_secs_f64());
                }
                Some(path) => {
                    let (dt, obs_dim, incs) = read_increments_csv(&path, cfg.filter_dt()?)?;
                    let x0 = cfg.initial_state();
                    let y0 = if obs_dim == x0.len() { x0 } else { vec![0.0; obs_dim] };
                    let obs = Observations {
                        dt,
                        obs_dim,
                        y0,
                        increments: incs,
                    };
                    let trace = run_filter(&cfg, &obs)?;
                    std::fs::create_dir_all(&dir)?;
                    trace.write_csv(&dir.join("trace.csv"))?;
                    trace.write_ensemble_csv(&dir.join("ensemble_final.csv"))?;
                    let last = trace.last();
                    println!(
                        "filtered {} increments: final mean_a {:?} [{:.1}s] -> {}",
                        obs.increments.len() / obs_dim,
                        last.mean_a.iter().take(4).collect::<Vec<_>>(),
                        t0.elapsed().as_secs_f64(),
                        dir.display()
                    );
                }
            }
        }
        Command::Evidence { common, thetas } => {
            let (cfg, dir) = load(&common)?;
            let grid = match (thetas, &cfg.experiment) {
                (Some(t), _) => t,
                (None, ExperimentKind::EvidenceSweep { grid, .. }) => grid.values(),
                (None, _) => (0..17).map(|i| 0.2 + 0.1 * i as f64).collect(),
            };
            let data = generate_data(&cfg)?;
            let sweep = run_evidence_sweep(&cfg, &data, &grid)?;
            std::fs::create_dir_all(&dir)?;
            let out = ExperimentOutput {
                config: cfg,
                data,
                trace: None,
                evidence: Some(sweep),
                drift: None,
            };
            out.write_artifacts(&dir)?;
            let ev = out.evidence.as_ref().expect("sweep");
            for (t, e) in ev.thetas.iter().zip(&ev.log_evidence) {
                println!("{t:.3}\t{e:.6}");
            }
            println!("argmax theta = {}", ev.argmax);
        }
        Command::Reproduce {
            figure,
            seed,
            out,
            paper_scale,
        } => {
            let panels = canonical::figure_panels(&figure).ok_or_else(|| {
                Error::Config(format!("unknown figure {figure:?}; expected one of {:?}", canonical::FIGURES))
            })?;
            for name in panels {
                let cfg = canonical::load(name)?;
                let (cfg, dir) = prepare(cfg, seed, Some(out.join(name)), paper_scale)?;
                let t0 = Instant::now();
                let result = run_experiment(&cfg)?;
                result.write_artifacts(&dir)?;
                report(&result, &dir, t0.elapsed().as_secs_f64());
            }
        }
        Command::ShowConfig { name } => match name {
            None => {
                for (n, _) in canonical::CONFIGS {
                    println!("{n}");
                }
            }
            Some(n) => {
                let text = canonical::config_text(&n)
                    .ok_or_else(|| Error::Config(format!("unknown configuration {n:?}")))?;
                print!("{text}");
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
