//! Run a resolved configuration end to end: `config.resolved`, `diag.csv`
//! and periodic snapshots in the output directory.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::config::{self, ConfigError, InitialKind, MeshSource, RunConfig};
use crate::diagnostics::{self, energy_law_tolerance};
use crate::mesh::Mesh;
use crate::output::write_snapshot;
use crate::stepper::{self, RunError, RunOutcome, State, StepReport, Stepper, BOUNDS_BAND};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Step(#[from] RunError),
    #[error("check failed at step {step}: {what}")]
    Check { step: usize, what: String },
}

/// Command-line adjustments applied on top of a preset or config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub steps: Option<usize>,
    pub mesh: Option<(usize, usize)>,
    pub mesh_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub snapshot_every: Option<usize>,
    pub enforce_energy: bool,
    pub seed: Option<u64>,
}

/// Resolve a preset name or a config file (optionally based on
/// `[output] preset`) and apply `ov`.
pub fn resolve(preset: Option<&str>, config_file: Option<&Path>, ov: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut cfg = match (preset, config_file) {
        (Some(_), Some(_)) => return Err(ConfigError::new("preset", "--preset and --config are exclusive")),
        (None, None) => return Err(ConfigError::new("preset", "one of --preset or --config is required")),
        (Some(name), None) => config::preset(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
            let base = RunConfig::parse(&text)?;
            match base.preset.clone() {
                // Re-read on top of the named preset so unset keys take its values.
                Some(name) => RunConfig::parse_with_base(&text, config::preset(&name)?)?,
                None => base,
            }
        }
    };
    if let Some(n) = ov.steps {
        cfg.n_steps = n;
    }
    if let Some((nx, ny)) = ov.mesh {
        let domain = match cfg.mesh {
            MeshSource::Crossed { domain, .. } => domain,
            MeshSource::File(_) => config::DESK_DOMAIN,
        };
        cfg.mesh = MeshSource::Crossed { nx, ny, domain };
    }
    if let Some(f) = &ov.mesh_file {
        cfg.mesh = MeshSource::File(f.clone());
    }
    if let Some(o) = &ov.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = ov.snapshot_every {
        cfg.snapshot_every = s;
    }
    if ov.enforce_energy {
        cfg.enforce_energy = true;
    }
    if let Some(seed) = ov.seed {
        match cfg.initial {
            InitialKind::Random { .. } => cfg.initial = InitialKind::Random { seed },
            _ => return Err(ConfigError::new("seed", "only the random initial state takes a seed")),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct RunSummary {
    pub mesh: Mesh,
    pub initial: State,
    pub last: State,
    /// Step 0 followed by one report per step.
    pub reports: Vec<StepReport>,
}

/// Per-step assertions of `--check`: mass drift from the initial state,
/// bounds, the energy law and incompressibility.
pub fn check_step(mesh: &Mesh, initial: &State, next: &State, report: &StepReport) -> Result<(), String> {
    let area = mesh.total_area();
    let drift = diagnostics::check_mass(mesh, initial, next);
    if drift.p0.abs() > 1e-10 * area || drift.pi1h.abs() > 1e-10 * area {
        return Err(format!("mass drift {:e} (lumped {:e})", drift.p0, drift.pi1h));
    }
    let bounds = diagnostics::check_bounds(mesh, next);
    if !bounds.within(BOUNDS_BAND) {
        return Err(format!("bounds violated: {bounds:?}"));
    }
    let tol = energy_law_tolerance(report.energy.e_total);
    if !(report.law_residual <= tol) {
        return Err(format!("energy law residual {:e} > {tol:e}", report.law_residual));
    }
    if !(report.div_v_inf <= 1e-10) {
        return Err(format!("divergence {:e}", report.div_v_inf));
    }
    Ok(())
}

fn write_resolved(cfg: &RunConfig) -> io::Result<()> {
    fs::write(cfg.out_dir.join("config.resolved"), cfg.serialize())
}

/// Run `cfg`, writing all outputs. With `check` every step is verified by
/// [`check_step`] and the first failure aborts the run.
pub fn execute(cfg: &RunConfig, check: bool) -> Result<RunSummary, DriverError> {
    cfg.validate()?;
    let mesh = cfg.build_mesh()?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_resolved(cfg)?;

    let (u0, n0) = config::initial_conditions(&mesh, cfg.initial, &cfg.params);
    let initial = State::initial(&mesh, u0, n0, &cfg.params);
    let first = diagnostics::initial_report(&mesh, &initial, &cfg.params);

    let mut diag = BufWriter::new(File::create(cfg.out_dir.join("diag.csv"))?);
    diagnostics::write_csv_header(&mut diag)?;
    diagnostics::write_csv_row(&mut diag, &first)?;
    diag.flush()?;
    write_snapshot(&cfg.out_dir, 0, &mesh, &initial)?;

    let mut stepper = Stepper::new(&mesh, cfg.params.clone(), cfg.newton.clone());
    stepper.enforce_energy = cfg.enforce_energy;
    let n_steps = cfg.n_steps;
    let every = cfg.snapshot_every;
    let result = stepper::run(&mut stepper, initial.clone(), n_steps, |next, report| -> Result<(), DriverError> {
        diagnostics::write_csv_row(&mut diag, report)?;
        diag.flush()?;
        if report.step % every == 0 || report.step == n_steps {
            write_snapshot(&cfg.out_dir, report.step, &mesh, next)?;
        }
        info!(
            "step {} t={:.4} newton={} E={:.6e} law={:.2e}",
            report.step, report.time, report.newton_iters, report.energy.e_total, report.law_residual
        );
        if check {
            check_step(&mesh, &initial, next, report).map_err(|what| DriverError::Check { step: report.step, what })?;
        }
        Ok(())
    });
    let (last, mut reports) = match result {
        Ok(r) => r,
        Err(RunOutcome::Step(e)) => return Err(e.into()),
        Err(RunOutcome::Sink(e)) => return Err(e),
    };
    reports.insert(0, first);
    drop(stepper);
    Ok(RunSummary { mesh, initial, last, reports })
}
