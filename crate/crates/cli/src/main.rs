use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vaultlab::covenant::Mechanism;
use vaultlab_cli::matrix::{cmd_matrix, Sweep};
use vaultlab_cli::run::cmd_run;
use vaultlab_cli::{load_config, CliError, Expectation};

#[derive(Parser)]
#[command(name = "vaultlab", version, about = "Deterministic vault custody simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. VAULTLAB_OUT takes precedence.
    #[arg(long, global = true, default_value = "vaultlab-out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    mechanism: Option<MechanismArg>,
    /// Golden outcome (JSON) to compare against instead of the embedded one.
    #[arg(long, global = true)]
    expect: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario config (a path or a bundled name).
    Run { config: String },
    /// Outcome matrix and tolerance table.
    Matrix {
        config: String,
        /// Sweep one topology parameter, e.g. `k=2..4`.
        #[arg(long)]
        sweep: Option<Sweep>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    DeletedKey,
    Ctv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let out = std::env::var_os("VAULTLAB_OUT").map(PathBuf::from).unwrap_or(cli.out);
    let golden = cli
        .expect
        .as_ref()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
            serde_json::from_str::<Expectation>(&text)
                .map_err(|e| CliError::Config { field: format!("--expect {}", p.display()), reason: e.to_string() })
        })
        .transpose()?;
    let config = match &cli.command {
        Command::Run { config } | Command::Matrix { config, .. } => config,
    };
    let mut cfg = load_config(config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = cli.mechanism {
        cfg.mechanism = match m {
            MechanismArg::DeletedKey => Mechanism::DeletedKey,
            MechanismArg::Ctv => Mechanism::Ctv,
        };
    }
    match cli.command {
        Command::Run { .. } => {
            let r = cmd_run(&cfg, &out, golden.as_ref())?;
            println!(
                "{} class {} strategy {} attacker_gain {} owner_retained {} frozen {} fees {}",
                if r.name.is_empty() { "run" } else { &r.name },
                r.class,
                r.strategy,
                r.attacker_gain,
                r.owner_retained,
                r.frozen,
                r.fees
            );
        }
        Command::Matrix { sweep, .. } => {
            cfg.validate()?;
            let cells = cmd_matrix(&cfg.sim_config(), sweep.as_ref(), &out)?;
            for c in &cells {
                let label = c.point.as_deref().unwrap_or("matrix");
                println!("{label}: {} scenarios, {} diverging", c.rows.len(), c.divergences());
                for r in c.rows.iter().filter(|r| !r.matches()) {
                    println!("  DIVERGES {} expected {} got {}", r.scenario, r.expected, r.class);
                }
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
