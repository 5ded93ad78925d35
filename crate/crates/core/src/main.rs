use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use longfair::commands;
use longfair::config::RunConfig;

// A closed stdout (e.g. piping into `head`) ends the process quietly.
macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if write!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

macro_rules! say {
    ($($arg:tt)*) => {{
        say_raw!($($arg)*);
        say_raw!("\n");
    }};
}

#[derive(Parser)]
#[command(name = "longfair", version, about = "Long-term fair sequential decision experiments")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Validate the configuration and stop.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the panel dataset.
    Generate,
    /// Train the repeated-risk model and the baselines.
    Train {
        #[arg(long)]
        baselines_only: bool,
        #[arg(long)]
        max_outer_iters: Option<usize>,
    },
    /// Measure stored models on fresh populations.
    Evaluate {
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Retrain across update sensitivities.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// Estimate the stability constants.
    Sensitivity,
    /// Write the reference configuration as JSON.
    InitConfig {
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
}

fn run(cli: Cli) -> longfair::Result<()> {
    if let Command::InitConfig { output_dir } = &cli.command {
        let cfg = RunConfig::reference_synthetic(cli.seed.unwrap_or(0), output_dir.clone());
        say!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| longfair::Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    match cli.command {
        Command::Train { max_outer_iters: Some(k), .. } => cfg.training.rrm.max_outer_iters = k,
        Command::Evaluate { replicates: Some(k) } => cfg.eval.replicates = k,
        _ => {}
    }
    cfg.validate()?;
    if cli.dry_run {
        say!("configuration ok ({})", cfg.hash());
        return Ok(());
    }
    match cli.command {
        Command::Generate => {
            let m = commands::cmd_generate(&cfg, false)?.expect("manifest");
            say!(
                "wrote {} individuals x {} steps; group sizes s-={} s+={}; label base rates {:?}",
                m.individuals, m.steps, m.group_sizes[0], m.group_sizes[1], m.label_base_rates
            );
        }
        Command::Train { baselines_only, .. } => {
            let out = commands::cmd_train(&cfg, baselines_only)?;
            if let Some(tr) = &out.trace {
                match tr.converged_at {
                    Some(i) => say!("rrm converged at iteration {i}"),
                    None => say!("rrm stopped at the iteration cap ({} iterations)", tr.records.len()),
                }
            }
            for (name, m) in &out.models {
                say!("{name}: {:?}", m.weights);
            }
        }
        Command::Evaluate { .. } => {
            commands::cmd_evaluate(&cfg)?;
            say_raw!("{}", std::fs::read_to_string(cfg.output_dir.join(commands::TABLE_FILE)).unwrap_or_default());
        }
        Command::Sweep { eps } => {
            let list = if eps.is_empty() { cfg.sweep.eps_list.clone() } else { eps };
            let entries = commands::cmd_sweep(&cfg, &list)?;
            for e in &entries {
                match &e.error {
                    Some(msg) => say!("eps={}: failed: {msg}", e.eps),
                    None => say!("eps={}: converged={} iterations={}", e.eps, e.converged, e.deltas.len()),
                }
            }
            if entries.iter().any(|e| e.error.is_some()) {
                return Err(longfair::Error::Config("some sweep values failed".into()));
            }
        }
        Command::Sensitivity => {
            let f = commands::cmd_sensitivity(&cfg)?;
            say!("{}", serde_json::to_string_pretty(&f.report)?);
        }
        Command::InitConfig { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
