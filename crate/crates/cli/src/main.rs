use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use csa_core::experiments::{
    cmd_attention_quality, cmd_mad, cmd_robustness, cmd_run, cmd_sweep_lambda, load_config, DatasetSource,
    LoadedConfig, OUTPUT_ENV,
};
use csa_core::CsaError;
use log::{info, warn};

const EXIT_FAILURE: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;
const EXIT_NAN: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "csa",
    version,
    about = "GAT experiments with causal supervision of attention"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    /// Output directory; wins over CSA_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured variant on every seed.
    Run { config: PathBuf },
    /// Accuracy curve over lambda.
    SweepLambda {
        config: PathBuf,
        /// Comma separated values; defaults to the config's `lambdas`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Accuracy under feature and edge noise.
    Robustness { config: PathBuf },
    /// Mean average distance of the logits over training.
    Mad { config: PathBuf },
    /// Attention mass on informative edges of a planted graph.
    AttnQuality { config: PathBuf },
}

impl Command {
    fn config(&self) -> &Path {
        match self {
            Command::Run { config }
            | Command::SweepLambda { config, .. }
            | Command::Robustness { config }
            | Command::Mad { config }
            | Command::AttnQuality { config } => config,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn bad_config(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_BAD_CONFIG,
        message: format!("bad config: {e}"),
    }
}

fn runtime(e: CsaError) -> Failure {
    let code = match e {
        CsaError::Diverged { .. } | CsaError::NonFinite(_) => EXIT_NAN,
        _ => EXIT_FAILURE,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

/// Everything that can be checked before training starts.
fn prepare(cli: &Cli) -> Result<(LoadedConfig, PathBuf), Failure> {
    let loaded = load_config(cli.command.config()).map_err(bad_config)?;
    for w in &loaded.warnings {
        warn!("{w}");
    }
    let cfg = &loaded.config;
    match &cli.command {
        Command::SweepLambda { values, .. } => {
            let values = values.as_deref().unwrap_or(&cfg.lambdas);
            if values.is_empty() {
                return Err(bad_config("no lambda values to sweep"));
            }
            if let Some(l) = values.iter().find(|l| !l.is_finite() || **l < 0.0) {
                return Err(bad_config(format!("swept lambda {l} must be finite and >= 0")));
            }
        }
        Command::AttnQuality { .. } if !matches!(cfg.dataset, DatasetSource::Planted(_)) => {
            return Err(bad_config("attn-quality needs a `planted` dataset"));
        }
        _ => {}
    }
    let g = cfg.load_graph(&loaded.base_dir).map_err(bad_config)?;
    info!(
        "dataset {}: {} nodes, {} edges, {} classes",
        g.name(),
        g.num_nodes(),
        g.num_edges(),
        g.class_count()
    );
    let env = std::env::var_os(OUTPUT_ENV).map(PathBuf::from);
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir(&loaded.base_dir, env));
    Ok((loaded, out))
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let (loaded, out) = prepare(cli)?;
    let (cfg, base) = (&loaded.config, loaded.base_dir.as_path());
    match &cli.command {
        Command::Run { .. } => {
            let r = cmd_run(cfg, base, &out).map_err(runtime)?;
            for v in &r.variants {
                println!("{:<8} {:6.2} ± {:5.2}", v.variant, v.mean, v.std);
            }
        }
        Command::SweepLambda { values, .. } => {
            let values = values.as_deref().unwrap_or(&cfg.lambdas);
            let r = cmd_sweep_lambda(cfg, base, &out, values).map_err(runtime)?;
            for p in &r.points {
                println!("lambda {:<6} {:6.2} ± {:5.2}", p.lambda, p.mean_acc, p.std_acc);
            }
            println!("best lambda for {}: {}", r.variant, r.best_lambda);
        }
        Command::Robustness { .. } => {
            let r = cmd_robustness(cfg, base, &out).map_err(runtime)?;
            for row in &r.rows {
                println!(
                    "{:<8} {:.2} {:<8} {:6.2} ± {:5.2}",
                    row.kind.name(),
                    row.fraction,
                    row.variant,
                    row.mean,
                    row.std
                );
            }
        }
        Command::Mad { .. } => {
            let r = cmd_mad(cfg, base, &out).map_err(runtime)?;
            for f in &r.finals {
                println!(
                    "{:<8} final mad {:.4}  inter-class {:.4}",
                    f.variant, f.mad_all, f.mad_interclass
                );
            }
        }
        Command::AttnQuality { .. } => {
            let r = cmd_attention_quality(cfg, &out).map_err(runtime)?;
            println!("uniform baseline {:.4}", r.baseline);
            for row in &r.rows {
                println!("{:<8} mass {:.4} ± {:.4}", row.variant, row.mass, row.mass_std);
            }
        }
    }
    info!("results written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
