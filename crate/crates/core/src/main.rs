use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use chd::driver::{self, DriverError, Overrides};

/// Cahn–Hilliard–Darcy tumor growth solver.
#[derive(Parser, Debug)]
#[command(name = "chd", version)]
struct Cli {
    /// Named preset, e.g. `reference-nonsym-K10`, `constant-sanity`, `random`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file with [mesh], [model], [solver] and [output] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["NX", "NY"])]
    mesh: Option<Vec<usize>>,
    #[arg(long)]
    mesh_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Assert mass, bounds and the energy law after every step.
    #[arg(long)]
    check: bool,
    /// Re-solve steps whose energy increases with full stabilization.
    #[arg(long)]
    enforce_energy: bool,
    /// Seed of the `random` initial state.
    #[arg(long)]
    seed: Option<u64>,
    /// List preset names and exit.
    #[arg(long)]
    list_presets: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.list_presets {
        for name in chd::config::preset_names() {
            println!("{name}");
        }
        return ExitCode::SUCCESS;
    }
    let ov = Overrides {
        steps: cli.steps,
        mesh: cli.mesh.map(|m| (m[0], m[1])),
        mesh_file: cli.mesh_file,
        out: cli.out,
        snapshot_every: cli.snapshot_every,
        enforce_energy: cli.enforce_energy,
        seed: cli.seed,
    };
    let cfg = match driver::resolve(cli.preset.as_deref(), cli.config.as_deref(), &ov) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match driver::execute(&cfg, cli.check) {
        Ok(summary) => {
            let last = summary.reports.last().expect("step 0 report");
            println!(
                "{} steps, t = {}, E = {:.10e}, mass = {:.16e}, output in {}",
                summary.reports.len() - 1,
                last.time,
                last.energy.e_total,
                last.mass_total,
                cfg.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(DriverError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
