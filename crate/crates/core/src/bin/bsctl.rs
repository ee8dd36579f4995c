use std::path::PathBuf;
use std::process::ExitCode;

use bilinear_schrodinger::cli_io::{run, CliError, Command, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bsctl", version, about = "Simulation, expansions, forms, moments, synthesis and minimal-time estimates for the bilinear Schrödinger equation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Flat TOML configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config thread count (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Propagate ψ₁ under the configured control.
    Simulate,
    /// First/second/third-order terms and remainder slopes.
    Expand,
    /// Quadratic and cubic forms on a lost direction.
    Forms,
    /// Moment-problem round trip and projection onto V_T.
    Moments,
    /// Lost-direction synthesis (mode = second | third | steer).
    Synthesize,
    /// Minimal-time bracket and witness.
    Mintime,
    /// λ(T) and the top H¹₀ eigenvalue over a range of horizons.
    Sweep,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Expand => Command::Expand,
            Cmd::Forms => Command::Forms,
            Cmd::Moments => Command::Moments,
            Cmd::Synthesize => Command::Synthesize,
            Cmd::Mintime => Command::Mintime,
            Cmd::Sweep => Command::Sweep,
        }
    }
}

fn configure(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    #[cfg(feature = "parallel")]
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd: Command = cli.command.into();
    let result = configure(&cli).and_then(|cfg| run(cmd, &cfg, &cli.out));
    match result {
        Ok(rec) => {
            println!("{} ok ({}) -> {}", rec.command, &rec.config_hash[..12], cli.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bsctl {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
