use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use netrecon::config::Config;
use netrecon::par;
use netrecon::pipeline::{Run, StageError, AUDIT, BENCH};
use netrecon::validation::{pipeline_audit, scaling_benchmark, BenchOptions};

/// Reconstruct a weighted firm-level production network.
#[derive(Parser, Debug)]
#[command(name = "netrecon", version)]
struct Cli {
    /// TOML config; relative input paths resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Size bins per sector for the fit; 0 is exact.
    #[arg(long, global = true)]
    bins: Option<usize>,
    #[arg(long, global = true)]
    target_links: Option<f64>,
    #[arg(long, global = true)]
    target_density: Option<f64>,
    #[arg(long, global = true)]
    sector_tol: Option<f64>,
    /// Outer iterations of the fit, or dual iterations of the weighting.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true)]
    tau_km: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq)]
enum Command {
    /// Sample firms from the size bins.
    Ingest,
    /// Fit the link model.
    Fit,
    /// Draw the backbone.
    Sample,
    /// Make the backbone strongly connected and add self-loops.
    Close,
    /// Solve for edge weights.
    Weight,
    /// Topology summary and degree distributions.
    Stats,
    /// Spread firm links over factories.
    Factory,
    /// Refit on firm subsamples.
    Bootstrap,
    /// Time the stages at several firm counts.
    Bench,
    /// Check an output directory from its files alone.
    Audit,
    /// ingest, fit, sample, close, weight, stats (and factory if configured).
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<Config, StageError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| StageError::from_err("config", e))?,
        None => {
            let mut c = Config::default();
            c.resolve_paths(Path::new("."));
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let o = &cli.overrides;
    if let Some(b) = o.bins {
        cfg.fit.bins = b;
    }
    if let Some(t) = o.target_links {
        cfg.fit.target_links = Some(t);
        cfg.fit.target_density = None;
    }
    if let Some(d) = o.target_density {
        cfg.fit.target_density = Some(d);
        cfg.fit.target_links = None;
    }
    if let Some(t) = o.sector_tol {
        cfg.fit.sector_tol = t;
    }
    if let Some(m) = o.max_iter {
        match cli.command {
            Command::Weight => cfg.weights.max_iter = m,
            _ => cfg.fit.max_iter = m,
        }
    }
    if let Some(t) = o.tau_km {
        cfg.factory.tau_km = t;
    }
    cfg.validate()
        .map_err(|e| StageError::from_err("config", e))?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: Config) -> Result<ExitCode, StageError> {
    match cli.command {
        Command::Audit => {
            let report = pipeline_audit(&cli.out);
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(cli.out.join(AUDIT), format!("{text}\n"))
                .map_err(|e| StageError::new("audit", "Io", e.to_string()))?;
            for c in &report.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.detail
                );
                for l in &c.locations {
                    println!("       {l}");
                }
            }
            return Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            });
        }
        Command::Bench => {
            let b = &cfg.bench;
            let opts = BenchOptions {
                sizes: b.sizes.clone(),
                runs: b.runs,
                bins: b.bins,
                exact: b.exact,
                seed: cfg.seed,
                stages: b.stages.clone(),
                ..BenchOptions::default()
            };
            let table = scaling_benchmark(&opts);
            std::fs::create_dir_all(&cli.out)
                .map_err(|e| StageError::new("bench", "Io", e.to_string()))?;
            table
                .write_csv(&cli.out.join(BENCH))
                .map_err(|e| StageError::new("bench", "Io", e.to_string()))?;
            for s in &table.slopes {
                println!("{} bins={} slope={:.3}", s.stage, s.bins, s.slope);
            }
            return Ok(ExitCode::SUCCESS);
        }
        _ => {}
    }
    let r = Run::new(cfg, &cli.out)?;
    match cli.command {
        Command::Ingest => r.ingest(),
        Command::Fit => r.fit(),
        Command::Sample => r.sample(),
        Command::Close => r.close(),
        Command::Weight => r.weight(),
        Command::Stats => r.stats(),
        Command::Factory => r.factory().map(|_| ()),
        Command::Bootstrap => r.bootstrap(),
        Command::Pipeline => r.pipeline(),
        Command::Audit | Command::Bench => unreachable!(),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| match cfg.threads {
        Some(t) => par::with_threads(t, || run(&cli, cfg)),
        None => run(&cli, cfg),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
