use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use echo_imager::experiments::Strategy;
use echo_imager_cli::commands::{run_and_write, Context};
use echo_imager_cli::config::{Experiment, ScenarioConfig};
use echo_imager_cli::error::CliError;
use echo_imager_cli::output::{format_number, Format, Summary};

#[derive(Parser)]
#[command(name = "echo-imager", version, about = "Quantum-echo imaging experiments and Fisher-information reports")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Scenario config (versioned JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides run.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to run.output, then "out"
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    /// Worker threads for replications
    #[arg(long, global = true, env = "ECHO_IMAGER_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Perturbative QFI bounds against protocol FIs and a numeric oracle
    Table1 {
        /// Mean probe photon numbers
        #[arg(long = "n-s", value_delimiter = ',')]
        n_s: Option<Vec<f64>>,
        /// Rates (γ, ε or γ↑ depending on the task)
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Skip the numeric-QFI oracle column
        #[arg(long)]
        no_oracle: bool,
    },
    /// Covariance echo against the closed form and the Fock oracle
    EchoVerify {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Execute the experiment named in --config
    Run,
    /// Fisher information and MLE variance against separation
    Sweep {
        #[arg(long, value_enum, value_delimiter = ',')]
        strategy: Option<Vec<StrategyArg>>,
        /// Separations d/σ
        #[arg(long = "d", value_delimiter = ',')]
        d_over_sigma: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Per-trial Fisher information of the configured measurement
    Fisher,
    /// First-order noise sensitivity of the three probes
    NoiseMatrix,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StrategyArg {
    Direct,
    Spade,
    Echo,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Direct => Strategy::Direct,
            StrategyArg::Spade => Strategy::Spade,
            StrategyArg::Echo => Strategy::Echo,
        }
    }
}

fn base_config(global: &Global, experiment: Option<Experiment>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match (&global.config, experiment) {
        (Some(path), Some(e)) => ScenarioConfig { experiment: e, ..ScenarioConfig::load(path)? },
        (Some(path), None) => ScenarioConfig::load(path)?,
        (None, Some(e)) => ScenarioConfig::new(e),
        (None, None) => {
            return Err(CliError::Config { path: "--config".into(), message: "the run command needs a config file".into() })
        }
    };
    if let Some(seed) = global.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn build(cli: &Cli) -> Result<(&'static str, ScenarioConfig), CliError> {
    let g = &cli.global;
    let (name, cfg) = match &cli.command {
        Command::Table1 { n_s, rates, no_oracle } => {
            let mut cfg = base_config(g, Some(Experiment::Table1))?;
            if let Some(v) = n_s {
                cfg.table1.n_s = v.clone();
            }
            if let Some(v) = rates {
                cfg.table1.rates = v.clone();
            }
            if *no_oracle {
                cfg.table1.oracle = false;
            }
            ("table1", cfg)
        }
        Command::EchoVerify { samples } => {
            let mut cfg = base_config(g, Some(Experiment::EchoVerify))?;
            if let Some(n) = samples {
                cfg.echo_verify.samples = *n;
            }
            ("echo-verify", cfg)
        }
        Command::Run => ("run", base_config(g, None)?),
        Command::Sweep { strategy, d_over_sigma, trials, replications } => {
            let mut cfg = base_config(g, Some(Experiment::RayleighSweep))?;
            if let Some(s) = strategy {
                cfg.sweep.strategies = s.iter().map(|v| Strategy::from(*v)).collect();
            }
            if let Some(d) = d_over_sigma {
                cfg.sweep.d_over_sigma = d.clone();
            }
            if let Some(m) = trials {
                cfg.run.trials = *m;
            }
            if let Some(r) = replications {
                cfg.run.replications = *r;
            } else if g.config.is_none() {
                cfg.run.replications = 0;
            }
            ("sweep", cfg)
        }
        Command::Fisher => ("fisher", base_config(g, Some(Experiment::Fisher))?),
        Command::NoiseMatrix => ("noise-matrix", base_config(g, Some(Experiment::NoiseStudy))?),
    };
    cfg.validate()?;
    Ok((name, cfg))
}

fn print_summary(s: &Summary) {
    println!("{} ({}), config {}", s.command, s.version, &s.config_hash[..12]);
    if let Some(obj) = s.results.as_object() {
        for (k, v) in obj {
            let shown = v.as_f64().map(format_number).unwrap_or_else(|| v.to_string());
            println!("  {k}: {shown}");
        }
    }
    for o in &s.outputs {
        println!("  wrote {o}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let result = build(&cli).and_then(|(name, cfg)| {
        let out = cli.global.out.clone().or_else(|| cfg.run.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| "out".into());
        run_and_write(name, &cfg, &Context { out, format: cli.global.format })
    });
    match result {
        Ok(summary) => {
            print_summary(&summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
