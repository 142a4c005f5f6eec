use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use specfed::{config, CliError, Config, Options, SweepAxis};

#[derive(Parser)]
#[command(name = "specfed", version, about = "Federated spectral-prompting experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config
    config: PathBuf,
    /// Overrides federation.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for local training (default: available cores)
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (default: $SPECFED_OUT, then output.dir, then ./specfed-out)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated experiment
    Run(Common),
    /// Run one experiment per value of lambda or top_k
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda | top_k (default: the config's sweep section)
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Run the full pipeline and four ablated variants
    Ablate(Common),
    /// Compare full and low-pass spectra of cross-modality scene pairs
    SpectrumProbe {
        #[command(flatten)]
        common: Common,
        /// Number of pairs (default: probe.pairs)
        #[arg(long)]
        pairs: Option<usize>,
        /// Allow both images of a pair to share a modality
        #[arg(long)]
        include_same: bool,
    },
}

fn options(common: &Common, cfg: &Config) -> Result<Options, CliError> {
    let workers = match common.workers {
        Some(0) => {
            return Err(CliError::Config {
                key: "--workers".into(),
                message: "must be at least 1".into(),
            })
        }
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let env = std::env::var_os(specfed::OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    Ok(Options {
        seed: common.seed,
        workers,
        out: specfed::output_dir(common.out.clone(), env, cfg),
    })
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(c) => {
            let cfg = Config::load(&c.config)?;
            let opts = options(&c, &cfg)?;
            let result = specfed::run(&cfg, &opts)?;
            for (task, metric, v) in specfed::final_values(&result) {
                println!("{task} {metric} {v:.4}");
            }
            println!("wrote {}", opts.out.display());
        }
        Command::Sweep { common, axis, values } => {
            let cfg = Config::load(&common.config)?;
            let opts = options(&common, &cfg)?;
            let axis = match axis {
                Some(a) => SweepAxis::parse(&a).ok_or_else(|| CliError::Config {
                    key: "--axis".into(),
                    message: format!("unknown axis `{a}` (expected lambda or top_k)"),
                })?,
                None => cfg.sweep.as_ref().map(|s| s.axis).ok_or_else(|| CliError::Config {
                    key: "sweep.axis".into(),
                    message: "no --axis given and the config has no sweep section".into(),
                })?,
            };
            let values = match values {
                Some(v) => {
                    config::validate_sweep_values(axis, &v, "--values")?;
                    v
                }
                None => match &cfg.sweep {
                    Some(s) if s.axis == axis => s.values.clone(),
                    _ => {
                        return Err(CliError::Config {
                            key: "sweep.values".into(),
                            message: format!("no values given for axis {}", axis.name()),
                        })
                    }
                },
            };
            let rows = specfed::sweep(&cfg, axis, &values, &opts)?;
            for r in rows {
                println!("{}={} {} {} {:.4}", axis.name(), r.axis_value, r.task, r.metric, r.final_value);
            }
        }
        Command::Ablate(c) => {
            let cfg = Config::load(&c.config)?;
            let opts = options(&c, &cfg)?;
            for r in specfed::ablate(&cfg, &opts)? {
                println!("{} {} {} {:.4}", r.variant, r.task, r.metric, r.final_value);
            }
        }
        Command::SpectrumProbe {
            common,
            pairs,
            include_same,
        } => {
            let mut cfg = Config::load(&common.config)?;
            if let Some(n) = pairs {
                cfg.probe.pairs = n;
            }
            cfg.probe.include_same |= include_same;
            let opts = options(&common, &cfg)?;
            let outcome = specfed::spectrum_probe(&cfg, &opts)?;
            match outcome.mean_ratio {
                Some(m) => println!("mean low-pass/full distance ratio: {m:.4} over {} pairs", outcome.rows.len()),
                None => println!("mean low-pass/full distance ratio: n/a (no cross-modality pairs)"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
