use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynquant_core::app::config::{load_config, RunMode, CONFIG_HELP};
use dynquant_core::app::render::{render_frame, ColorScale};
use dynquant_core::app::{run_jko1d, selftest, simulate, AppError};

#[derive(Parser)]
#[command(name = "dynquant", version, about = "Wasserstein gradient flows of semi-discrete energies")]
#[command(after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the 2D splitting scheme.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the 1D minimizing-movement scheme.
    Jko1d {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render one snapshot of a run directory to PNG.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        frame: usize,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 4)]
        scale: u32,
        /// Use one color range for every frame of the run.
        #[arg(long)]
        fixed_colormap: bool,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn configure_threads() -> Result<(), AppError> {
    let Ok(v) = std::env::var("DYNQUANT_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| AppError::Init(format!("DYNQUANT_THREADS: expected a nonnegative integer, got `{v}`")))?;
    // a second initialization only fails if a pool already exists, which is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cmd: Command) -> Result<(), AppError> {
    configure_threads()?;
    match cmd {
        Command::Simulate { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if cfg.mode == RunMode::Jko1d {
                run_jko1d(&cfg)?;
            } else {
                let summary = simulate(&cfg)?;
                let last = summary.series.last();
                println!(
                    "{} steps, {} atoms alive, energy {:e}, output in {}",
                    cfg.steps,
                    summary.final_state.atoms.alive_count(),
                    last.map(|r| r.energy.total).unwrap_or(f64::NAN),
                    summary.out_dir.display()
                );
            }
        }
        Command::Jko1d { config } => {
            let cfg = load_config(&config)?;
            let traj = run_jko1d(&cfg)?;
            println!(
                "{} steps, energy {:e}, output in {}",
                cfg.steps,
                traj.energies.last().copied().unwrap_or(f64::NAN),
                cfg.out_dir.display()
            );
        }
        Command::Render { input, frame, scale, fixed_colormap } => {
            let mode = if fixed_colormap { ColorScale::Fixed } else { ColorScale::PerFrame };
            let path = render_frame(&input, frame, scale, mode)?;
            println!("{}", path.display());
        }
        Command::Selftest => {
            let checks = selftest();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(AppError::Format("self-test failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
