//! Run configuration, experiment presets and initial data.
//!
//! Text format: TOML with `key = value` lines grouped under `[mesh]`,
//! `[model]`, `[solver]` and `[output]`. Serialization prints every key,
//! and floats in shortest round-trip form, so `serialize(parse(text))` is a
//! fixed point.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use toml::{Table, Value};

use crate::mesh::{Mesh, Rect};
use crate::physics::{MobilitySpec, ModelParams};
use crate::spaces::P0Field;
use crate::stepper::NewtonConfig;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { field: field.into(), reason: reason.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeshSource {
    Crossed { nx: usize, ny: usize, domain: Rect },
    File(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialKind {
    /// Radial tumor of radius 1.75 and three nutrient bumps.
    Tumor,
    Constant { u: f64, n: f64 },
    /// Independent uniform values in `[0.05, 0.95]` per element.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub mesh: MeshSource,
    pub params: ModelParams,
    pub newton: NewtonConfig,
    pub enforce_energy: bool,
    pub n_steps: usize,
    pub snapshot_every: usize,
    pub out_dir: PathBuf,
    pub initial: InitialKind,
    /// Coarse mesh and shortened horizon.
    pub desk_scale: bool,
    /// Times of the published snapshots for this experiment.
    pub snapshot_times: Vec<f64>,
}

pub const DESK_DOMAIN: Rect = Rect { x0: -10.0, x1: 10.0, y0: -10.0, y1: 10.0 };
pub const DESK_N: usize = 36;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            mesh: MeshSource::Crossed { nx: DESK_N, ny: DESK_N, domain: DESK_DOMAIN },
            params: ModelParams::default(),
            newton: NewtonConfig::default(),
            enforce_energy: false,
            n_steps: 50,
            snapshot_every: 10,
            out_dir: PathBuf::from("out"),
            initial: InitialKind::Tumor,
            desk_scale: true,
            snapshot_times: Vec::new(),
        }
    }
}

/// `(name, P0, χ0, Δt, snapshot times, desk steps)`.
const EXPERIMENTS: [(&str, f64, f64, f64, [f64; 3], usize); 7] = [
    ("reference", 0.5, 0.1, 0.1, [10.0, 20.0, 50.0], 50),
    ("p0-0.001", 0.001, 0.1, 0.1, [30.0, 50.0, 100.0], 100),
    ("p0-0.05", 0.05, 0.1, 0.1, [50.0, 80.0, 200.0], 200),
    ("p0-2", 2.0, 0.1, 0.025, [1.25, 6.25, 12.5], 50),
    ("chi-0.01", 0.5, 0.01, 0.1, [10.0, 20.0, 50.0], 50),
    ("chi-0.5", 0.5, 0.5, 0.01, [3.0, 10.0, 17.0], 170),
    ("chi-1", 0.5, 1.0, 0.01, [2.5, 5.0, 10.0], 100),
];

/// Every preset name.
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for (exp, ..) in EXPERIMENTS {
        for sym in ["sym", "nonsym"] {
            for k in ["0.1", "1", "10"] {
                names.push(format!("{exp}-{sym}-K{k}"));
            }
        }
    }
    names.push("constant-sanity".into());
    names.push("random".into());
    names
}

pub fn preset(name: &str) -> Result<RunConfig, ConfigError> {
    let unknown = || ConfigError::new("preset", format!("unknown preset {name:?}"));
    let mut cfg = RunConfig { preset: Some(name.to_string()), ..Default::default() };
    match name {
        "constant-sanity" => {
            cfg.params.prolif_rate = 0.0;
            cfg.params.chi0 = 0.0;
            cfg.initial = InitialKind::Constant { u: 0.5, n: 0.3 };
            cfg.n_steps = 10;
            cfg.snapshot_every = 10;
            return Ok(cfg);
        }
        "random" => {
            cfg.mesh = MeshSource::Crossed { nx: 8, ny: 8, domain: Rect::new(0.0, 8.0, 0.0, 8.0) };
            cfg.initial = InitialKind::Random { seed: 0 };
            cfg.n_steps = 5;
            cfg.snapshot_every = 5;
            return Ok(cfg);
        }
        _ => {}
    }
    let (rest, k) = name.rsplit_once("-K").ok_or_else(unknown)?;
    let k: f64 = match k {
        "0.1" | "1" | "10" => k.parse().map_err(|_| unknown())?,
        _ => return Err(unknown()),
    };
    let (exp, sym) = rest.rsplit_once('-').ok_or_else(unknown)?;
    let (mobility, prolif_exps) = match sym {
        "sym" => (MobilitySpec::new(1, 1), MobilitySpec::new(1, 1)),
        "nonsym" => (MobilitySpec::new(5, 1), MobilitySpec::new(1, 3)),
        _ => return Err(unknown()),
    };
    let &(_, p0, chi0, dt, times, steps) = EXPERIMENTS.iter().find(|e| e.0 == exp).ok_or_else(unknown)?;
    cfg.params = ModelParams { k_perm: k, prolif_rate: p0, chi0, dt, mobility, prolif_exps, ..ModelParams::default() };
    cfg.n_steps = steps;
    cfg.snapshot_every = (steps / 5).max(1);
    cfg.snapshot_times = times.to_vec();
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params.validate().map_err(|e| ConfigError::new(e.field, e.reason))?;
        if self.snapshot_every < 1 {
            return Err(ConfigError::new("snapshot_every", "must be >= 1"));
        }
        if let MeshSource::Crossed { nx, ny, .. } = self.mesh {
            if nx == 0 || ny == 0 {
                return Err(ConfigError::new("nx", "mesh must have at least one cell per direction"));
            }
        }
        let n = &self.newton;
        if !(n.residual_tol > 0.0) {
            return Err(ConfigError::new("residual_tol", "must be > 0"));
        }
        if n.max_iters < 1 {
            return Err(ConfigError::new("max_iters", "must be >= 1"));
        }
        if !(n.shrink > 0.0 && n.shrink < 1.0) {
            return Err(ConfigError::new("shrink", "must lie in (0, 1)"));
        }
        if !(n.floor > 0.0 && n.floor <= 1.0) {
            return Err(ConfigError::new("floor", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn build_mesh(&self) -> Result<Mesh, ConfigError> {
        match &self.mesh {
            MeshSource::Crossed { nx, ny, domain } => {
                crate::mesh::build_crossed_mesh(*nx, *ny, *domain).map_err(|e| ConfigError::new("mesh", e.to_string()))
            }
            MeshSource::File(p) => Mesh::load(p).map_err(|e| ConfigError::new("file", e.to_string())),
        }
    }

    pub fn serialize(&self) -> String {
        let p = &self.params;
        let n = &self.newton;
        let floats = |v: &[f64]| Value::Array(v.iter().map(|&x| Value::Float(x)).collect());
        let pair = |m: MobilitySpec| Value::Array(vec![Value::Integer(m.p.into()), Value::Integer(m.q.into())]);

        let mut mesh = Table::new();
        match &self.mesh {
            MeshSource::Crossed { nx, ny, domain } => {
                mesh.insert("nx".into(), Value::Integer(*nx as i64));
                mesh.insert("ny".into(), Value::Integer(*ny as i64));
                mesh.insert("domain".into(), floats(&[domain.x0, domain.x1, domain.y0, domain.y1]));
            }
            MeshSource::File(f) => {
                mesh.insert("file".into(), Value::String(f.display().to_string()));
            }
        }
        let mut model = Table::new();
        for (k, v) in [
            ("eps", p.eps),
            ("delta", p.delta),
            ("C_u", p.c_u),
            ("C_n", p.c_n),
            ("K_perm", p.k_perm),
            ("chi0", p.chi0),
            ("prolif_rate", p.prolif_rate),
            ("sigma_u", p.sigma_u),
            ("sigma_n", p.sigma_n),
            ("eta", p.eta),
            ("dt", p.dt),
        ] {
            model.insert(k.into(), Value::Float(v));
        }
        model.insert("mobility".into(), pair(p.mobility));
        model.insert("prolif_exps".into(), pair(p.prolif_exps));

        let mut solver = Table::new();
        solver.insert("residual_tol".into(), Value::Float(n.residual_tol));
        solver.insert("max_iters".into(), Value::Integer(n.max_iters as i64));
        solver.insert("shrink".into(), Value::Float(n.shrink));
        solver.insert("floor".into(), Value::Float(n.floor));
        solver.insert("max_halvings".into(), Value::Integer(n.max_halvings.into()));
        solver.insert("enforce_energy".into(), Value::Boolean(self.enforce_energy));

        let mut output = Table::new();
        if let Some(name) = &self.preset {
            output.insert("preset".into(), Value::String(name.clone()));
        }
        output.insert("steps".into(), Value::Integer(self.n_steps as i64));
        output.insert("snapshot_every".into(), Value::Integer(self.snapshot_every as i64));
        output.insert("dir".into(), Value::String(self.out_dir.display().to_string()));
        let init = match self.initial {
            InitialKind::Tumor => "tumor".to_string(),
            InitialKind::Constant { u, n } => format!("constant {u:?} {n:?}"),
            InitialKind::Random { seed } => format!("random {seed}"),
        };
        output.insert("initial".into(), Value::String(init));
        output.insert("desk_scale".into(), Value::Boolean(self.desk_scale));
        output.insert("snapshot_times".into(), floats(&self.snapshot_times));

        let mut doc = Table::new();
        for (name, t) in [("mesh", mesh), ("model", model), ("solver", solver), ("output", output)] {
            doc.insert(name.into(), Value::Table(t));
        }
        doc.to_string()
    }

    /// Parse a config; keys not present keep the values of `base`.
    pub fn parse_with_base(text: &str, base: RunConfig) -> Result<RunConfig, ConfigError> {
        let doc: Table = text.parse().map_err(|e: toml::de::Error| syntax_error(text, &e))?;
        let mut cfg = base;
        let (mut nx, mut ny, mut domain, mut file) = match &cfg.mesh {
            MeshSource::Crossed { nx, ny, domain } => (*nx, *ny, *domain, None),
            MeshSource::File(f) => (DESK_N, DESK_N, DESK_DOMAIN, Some(f.clone())),
        };
        for (section, body) in &doc {
            let Value::Table(body) = body else {
                return Err(ConfigError::new(section.as_str(), "key outside of a section"));
            };
            if !matches!(section.as_str(), "mesh" | "model" | "solver" | "output") {
                return Err(ConfigError::new(section.as_str(), "unknown section"));
            }
            for (key, value) in body {
                let key = key.as_str();
                let p = &mut cfg.params;
                match (section.as_str(), key) {
                    ("mesh", "nx") => nx = count(key, value)?,
                    ("mesh", "ny") => ny = count(key, value)?,
                    ("mesh", "domain") => {
                        let v = float_list(key, value)?;
                        if v.len() != 4 {
                            return Err(ConfigError::new(key, "expected [x0, x1, y0, y1]"));
                        }
                        domain = Rect::new(v[0], v[1], v[2], v[3]);
                    }
                    ("mesh", "file") => file = Some(PathBuf::from(string(key, value)?)),
                    ("model", "eps") => p.eps = float(key, value)?,
                    ("model", "delta") => p.delta = float(key, value)?,
                    ("model", "C_u") => p.c_u = float(key, value)?,
                    ("model", "C_n") => p.c_n = float(key, value)?,
                    ("model", "K_perm") => p.k_perm = float(key, value)?,
                    ("model", "chi0") => p.chi0 = float(key, value)?,
                    ("model", "prolif_rate") => p.prolif_rate = float(key, value)?,
                    ("model", "mobility") => p.mobility = exponents(key, value)?,
                    ("model", "prolif_exps") => p.prolif_exps = exponents(key, value)?,
                    ("model", "sigma_u") => p.sigma_u = float(key, value)?,
                    ("model", "sigma_n") => p.sigma_n = float(key, value)?,
                    ("model", "eta") => p.eta = float(key, value)?,
                    ("model", "dt") => p.dt = float(key, value)?,
                    ("solver", "residual_tol") => cfg.newton.residual_tol = float(key, value)?,
                    ("solver", "max_iters") => cfg.newton.max_iters = count(key, value)?,
                    ("solver", "shrink") => cfg.newton.shrink = float(key, value)?,
                    ("solver", "floor") => cfg.newton.floor = float(key, value)?,
                    ("solver", "max_halvings") => cfg.newton.max_halvings = count(key, value)?,
                    ("solver", "enforce_energy") => cfg.enforce_energy = boolean(key, value)?,
                    ("output", "preset") => cfg.preset = Some(string(key, value)?.to_string()),
                    ("output", "steps") => cfg.n_steps = count(key, value)?,
                    ("output", "snapshot_every") => cfg.snapshot_every = count(key, value)?,
                    ("output", "dir") => cfg.out_dir = PathBuf::from(string(key, value)?),
                    ("output", "initial") => cfg.initial = initial(string(key, value)?)?,
                    ("output", "desk_scale") => cfg.desk_scale = boolean(key, value)?,
                    ("output", "snapshot_times") => cfg.snapshot_times = float_list(key, value)?,
                    _ => return Err(ConfigError::new(key, format!("unknown key in [{section}]"))),
                }
            }
        }
        cfg.mesh = match file {
            Some(f) => MeshSource::File(f),
            None => MeshSource::Crossed { nx, ny, domain },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        Self::parse_with_base(text, RunConfig::default())
    }
}

/// Blames the key on the offending line when there is one.
fn syntax_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let line = e.span().map_or(1, |s| text[..s.start].matches('\n').count() + 1);
    let key = text.lines().nth(line - 1).and_then(|l| l.split_once('=')).map(|(k, _)| k.trim());
    let reason = format!("line {line}: {}", e.message().trim());
    match key {
        Some(k) if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') => {
            ConfigError::new(k, reason)
        }
        _ => ConfigError::new("config", reason),
    }
}

fn type_error(key: &str, want: &str, value: &Value) -> ConfigError {
    ConfigError::new(key, format!("expected {want}, got {value}"))
}

/// Floats accept integer literals too.
fn float(key: &str, value: &Value) -> Result<f64, ConfigError> {
    match value {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_error(key, "a number", value)),
    }
}

fn count<T: TryFrom<i64>>(key: &str, value: &Value) -> Result<T, ConfigError> {
    match value {
        Value::Integer(i) => T::try_from(*i).map_err(|_| ConfigError::new(key, format!("{i} is out of range"))),
        _ => Err(type_error(key, "a nonnegative integer", value)),
    }
}

fn boolean(key: &str, value: &Value) -> Result<bool, ConfigError> {
    value.as_bool().ok_or_else(|| type_error(key, "true or false", value))
}

fn string<'a>(key: &str, value: &'a Value) -> Result<&'a str, ConfigError> {
    value.as_str().ok_or_else(|| type_error(key, "a string", value))
}

fn float_list(key: &str, value: &Value) -> Result<Vec<f64>, ConfigError> {
    let arr = value.as_array().ok_or_else(|| type_error(key, "an array of numbers", value))?;
    arr.iter().map(|v| float(key, v)).collect()
}

fn exponents(key: &str, value: &Value) -> Result<MobilitySpec, ConfigError> {
    match value.as_array().map(Vec::as_slice) {
        Some([p, q]) => Ok(MobilitySpec::new(count(key, p)?, count(key, q)?)),
        _ => Err(type_error(key, "two exponents [p, q]", value)),
    }
}

fn initial(value: &str) -> Result<InitialKind, ConfigError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    let num = |v: &str| v.parse::<f64>().map_err(|e| ConfigError::new("initial", format!("{v:?}: {e}")));
    match parts.as_slice() {
        ["tumor"] => Ok(InitialKind::Tumor),
        ["constant", u, n] => Ok(InitialKind::Constant { u: num(u)?, n: num(n)? }),
        ["random", seed] => Ok(InitialKind::Random {
            seed: seed.parse().map_err(|e| ConfigError::new("initial", format!("{seed:?}: {e}")))?,
        }),
        _ => Err(ConfigError::new("initial", format!("expected tumor | constant U N | random SEED, got {value:?}"))),
    }
}

/// Continuous initial tumor fraction.
pub fn tumor_u0(x: [f64; 2], eps: f64) -> f64 {
    let w = std::f64::consts::SQRT_2 * eps;
    let r = x[0].hypot(x[1]);
    0.5 * (((1.75 - r) / w).tanh() + 1.0)
}

/// Continuous initial nutrient.
pub fn tumor_n0(x: [f64; 2], eps: f64) -> f64 {
    let w = std::f64::consts::SQRT_2 * eps;
    let bump = |c: [f64; 2], radius: f64| ((radius - (x[0] - c[0]).hypot(x[1] - c[1])) / w).tanh();
    0.5 * (1.0 - tumor_u0(x, eps))
        + 0.25 * (bump([2.45, 1.45], 1.0) + bump([-3.75, 1.0], 1.75) + bump([0.0, -5.0], 2.5) + 3.0)
}

/// `(u0, n0)` sampled at barycenters and clamped to `[0, 1]`.
pub fn initial_conditions(mesh: &Mesh, kind: InitialKind, params: &ModelParams) -> (P0Field, P0Field) {
    let nt = mesh.n_triangles();
    match kind {
        InitialKind::Tumor => {
            let sample = |g: &dyn Fn([f64; 2]) -> f64| -> P0Field {
                mesh.barycenters.iter().map(|&b| g(b).clamp(0.0, 1.0)).collect::<Vec<_>>().into()
            };
            (sample(&|x| tumor_u0(x, params.eps)), sample(&|x| tumor_n0(x, params.eps)))
        }
        InitialKind::Constant { u, n } => (P0Field::constant(nt, u), P0Field::constant(nt, n)),
        InitialKind::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = (0..nt).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>();
            let n = (0..nt).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>();
            (u.into(), n.into())
        }
    }
}
