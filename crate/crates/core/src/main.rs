use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use otafl::harness::config::{ExperimentConfig, Scheme};
use otafl::harness::{report, run};
use otafl::sca::DesignProblem;
use otafl::{Error, Result};

#[derive(Parser)]
#[command(name = "otafl", version, about = "Over-the-air federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds as a list (`0,3,5`) or half-open range (`0..20`).
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated scheme names.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every scheme for every seed and write metrics.
    Run(Common),
    /// Solve the pre-scaler design problem and write design, certificate and trace.
    Design {
        #[command(flatten)]
        common: Common,
        /// Stand-alone design problem (JSON) instead of the configured deployment.
        #[arg(long)]
        problem: Option<PathBuf>,
    },
    /// Aggregate metrics files into per-scheme series and a comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        metrics: Vec<PathBuf>,
        #[arg(long)]
        target: Option<f64>,
    },
    /// Score every stepsize of the configured grid by final accuracy.
    GridEta(Common),
    /// Parse and validate a configuration, printing the effective values.
    ValidateConfig(Common),
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |_| Error::Config(format!("cannot parse seeds '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a >= b {
            return Err(Error::Config(format!("empty seed range '{s}'")));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(bad)).collect()
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &c.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(list) = &c.schemes {
        cfg.schemes = list.iter().map(|s| s.parse::<Scheme>()).collect::<Result<_>>()?;
    }
    cfg.validate()?;
    if let Some(t) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let summary = run::run_experiment(&cfg, &c.out_dir)?;
            println!("config {} -> {}", summary.config_id, summary.metrics_path.display());
            print!("{}", fs::read_to_string(c.out_dir.join("summary").join("rounds_to_target.csv"))?);
        }
        Command::Design { common, problem } => {
            let cfg = load_config(&common)?;
            let problem = match problem {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    Some(serde_json::from_str::<DesignProblem>(&text).map_err(|e| Error::Config(e.to_string()))?)
                }
                None => None,
            };
            let file = run::design_prescalers(&cfg, problem)?;
            let path = common.out_dir.join("design.json");
            write_json(&path, &file)?;
            println!(
                "P1 {:e} after {} iterations, certificate {} -> {}",
                file.objective_trace.last().copied().unwrap_or(f64::NAN),
                file.iterations,
                if file.certificate.accepted { "accepted" } else { "REJECTED" },
                path.display()
            );
        }
        Command::Report { common, metrics, target } => {
            let target = match target {
                Some(t) => t,
                None => load_config(&common)?.target_accuracy,
            };
            let rep = report::write_report(&metrics, target, &common.out_dir)?;
            print!("{}", rep.table_csv());
        }
        Command::GridEta(c) => {
            let cfg = load_config(&c)?;
            let (scores, best) = run::grid_eta(&cfg)?;
            write_json(&c.out_dir.join("grid_eta.json"), &serde_json::json!({ "scores": scores, "best_eta": best }))?;
            for s in &scores {
                println!("eta {:<8} accuracy {:.4}", s.eta, s.mean_final_accuracy);
            }
            println!("best eta {best}");
        }
        Command::ValidateConfig(c) => {
            let cfg = load_config(&c)?;
            println!("# config id {}", cfg.config_id());
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
