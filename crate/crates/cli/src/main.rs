use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drum_cli::artifact::{self, output_dir};
use drum_cli::manifest::RunManifest;
use drum_cli::{grid, model, report, run, simulate, ExperimentConfig, HarnessError, Result};
use drum_core::simgen::Setting;

#[derive(Parser)]
#[command(
    name = "drum",
    version,
    about = "Robust prediction when covariates are missing in the target population"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulation setting's source, target and test sets as CSV.
    Simulate {
        #[arg(long)]
        setting: Option<Setting>,
        #[arg(long)]
        d_a: Option<usize>,
        /// Monte-Carlo sets per scale.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit and evaluate every configured method.
    Run {
        /// Re-run the config recorded in a previous manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one method on CSV files described by the config's schema.
    Fit {
        #[arg(long)]
        method: String,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict with a fitted model file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
    },
    /// Score a model file (optionally paired against another) on labelled data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long, default_value = "evaluation.json")]
        out: PathBuf,
    },
    /// Grid search on a held-out share of the source.
    Grid {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run manifests into tables and plot data.
    Report {
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &cli.overrides)?,
        None => ExperimentConfig::parse("", &cli.overrides)?,
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(1)
}

fn dir_for(cfg: &ExperimentConfig, flag: Option<&Path>, leaf: &str) -> PathBuf {
    output_dir(flag.or(cfg.output.as_deref()), leaf)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Simulate {
            setting,
            d_a,
            mc,
            scales,
            out,
        } => {
            let spec = simulate::spec_for(&cfg, *setting, *d_a, first_seed(&cfg))?;
            let dir = dir_for(
                &cfg,
                out.as_deref(),
                &format!("simulate-{}-seed{}", spec.setting, spec.seed),
            );
            let scales = scales.clone().unwrap_or_else(|| cfg.scales.clone());
            let m = simulate::cmd_simulate(&spec, &scales, mc.unwrap_or(cfg.mc_sets), &dir)?;
            println!("wrote {} files to {}", m.files.len() + 1, dir.display());
        }
        Command::Run { manifest, out } => {
            let cfg = match manifest {
                Some(p) => {
                    let m: RunManifest = artifact::read_json(p)?;
                    let mut c = m.config;
                    if let Some(s) = cli.seed {
                        c.seeds = vec![s];
                    }
                    c
                }
                None => cfg,
            };
            let dir = dir_for(&cfg, out.as_deref(), &cfg.name);
            let (m, metrics) = run::cmd_run(&cfg, &dir)?;
            for g in &metrics.groups {
                let text = std::fs::read_to_string(dir.join(format!("table_{}.txt", g.label)))
                    .map_err(HarnessError::io(&dir))?;
                print!("{text}");
            }
            for e in &m.errors {
                eprintln!("error in {}: {}", e.stage, e.message);
            }
            println!("manifest: {}", dir.join("manifest.json").display());
        }
        Command::Fit {
            method,
            source,
            target,
            out,
        } => {
            let dir = dir_for(&cfg, out.as_deref(), &format!("fit-{}", artifact::slug(method)));
            let m = model::cmd_fit(
                &cfg,
                method,
                source.as_deref(),
                target.as_deref(),
                first_seed(&cfg),
                &dir,
            )?;
            println!(
                "model {} (sha256 {})",
                dir.join(&m.model.path).display(),
                m.model.sha256
            );
        }
        Command::Predict { model: m, input, out } => {
            let p = model::cmd_predict(m, input, out)?;
            println!("wrote {} predictions to {}", p.len(), out.display());
        }
        Command::Evaluate {
            model: m,
            compare,
            data,
            resamples,
            out,
        } => {
            let r = model::cmd_evaluate(
                m,
                compare.as_deref(),
                data,
                resamples.unwrap_or(cfg.bootstrap_resamples),
                first_seed(&cfg),
            )?;
            let dir = out.parent().unwrap_or(Path::new("."));
            let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("evaluation.json");
            artifact::write(dir, name, &artifact::to_json(&r)?)?;
            for e in &r.models {
                for (k, ci) in &e.intervals {
                    let p = ci.paired_p.map(|p| format!("  paired p {p:.4}")).unwrap_or_default();
                    println!(
                        "{:<32} {k:<15} {:.4} [{:.4}, {:.4}]{p}",
                        e.metrics.method, ci.point, ci.lo, ci.hi
                    );
                }
            }
        }
        Command::Grid { out } => {
            let dir = dir_for(&cfg, out.as_deref(), &format!("{}-grid", cfg.name));
            let g = grid::cmd_grid(&cfg, first_seed(&cfg), &dir)?;
            for m in &g.methods {
                match m.best {
                    Some(i) => println!(
                        "{}: best {:?} ({} {:.5})",
                        m.method,
                        m.cells[i].params,
                        g.criterion,
                        m.cells[i].loss.unwrap_or(f64::NAN)
                    ),
                    None => println!("{}: every cell failed", m.method),
                }
            }
        }
        Command::Report { manifests, out } => {
            let dir = dir_for(&cfg, out.as_deref(), "report");
            let r = report::cmd_report(manifests, &dir)?;
            println!("{} rows; files in {}", r.rows.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
