//! Mass, bounds, energy-law and incompressibility measurements, plus the
//! diagnostics CSV.
//!
//! The energy law is evaluated with the exact quadratures used by the
//! scheme, so for a converged step
//! `δtE + ΣD + τ_u + τ_n = ∫δtF(Π1h u) - (f, δtΠ1h u) ≤ 0`
//! holds to roundoff and Newton tolerance.

use std::io::{self, BufRead, Write};

use crate::forms::{b_upw, tau_diag};
use crate::mesh::Mesh;
use crate::physics::{
    convex_split_f, energy_parts, integrate_potential, mu_n_discrete, pos, proliferation, EnergyParts, ModelParams,
};
use crate::quadrature::{p1_at, DEGREE4};
use crate::spaces::{p1_dirichlet_energy, pi0, pi0_pi1h, pi1h, rt0_l2_product, rt0_net_flux, P0Field, P1Field};
use crate::stepper::{State, StepReport};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub e_total: f64,
    /// Energy of the previous state.
    pub e_prev: f64,
    pub e_gradient: f64,
    pub e_potential: f64,
    pub e_cross: f64,
    pub e_nutrient: f64,
    pub d_u: f64,
    pub d_n: f64,
    pub d_prolif: f64,
    pub d_darcy: f64,
    pub d_dt_u: f64,
    pub d_dt_n: f64,
    pub tau_u: f64,
    pub tau_n: f64,
}

impl EnergyBreakdown {
    pub fn dissipation(&self) -> f64 {
        self.d_u + self.d_n + self.d_prolif + self.d_darcy + self.d_dt_u + self.d_dt_n
    }
}

/// Drift of `∫(u + n)` and of its `Π1h` form `Σ_j ω_j Π1h(u + n)_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassDrift {
    pub p0: f64,
    pub pi1h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub u_min: f64,
    pub u_max: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub pi1h_u_min: f64,
    pub pi1h_u_max: f64,
    pub pi0_pi1h_u_min: f64,
    pub pi0_pi1h_u_max: f64,
}

impl Bounds {
    /// Whether every extremum lies in `[-tol, 1 + tol]`.
    pub fn within(&self, tol: f64) -> bool {
        [
            self.u_min,
            self.u_max,
            self.n_min,
            self.n_max,
            self.pi1h_u_min,
            self.pi1h_u_max,
            self.pi0_pi1h_u_min,
            self.pi0_pi1h_u_max,
        ]
        .iter()
        .all(|&x| (-tol..=1.0 + tol).contains(&x))
    }
}

pub fn total_mass(mesh: &Mesh, s: &State) -> f64 {
    s.u.iter().zip(s.n.iter()).zip(&mesh.areas).map(|((u, n), a)| a * (u + n)).sum()
}

fn lumped_mass(mesh: &Mesh, s: &State) -> f64 {
    let sum: P0Field = s.u.iter().zip(s.n.iter()).map(|(u, n)| u + n).collect::<Vec<_>>().into();
    pi1h(mesh, &sum).iter().zip(&mesh.vertex_support_volume).map(|(g, w)| g * w).sum()
}

pub fn check_mass(mesh: &Mesh, prev: &State, next: &State) -> MassDrift {
    MassDrift {
        p0: total_mass(mesh, next) - total_mass(mesh, prev),
        pi1h: lumped_mass(mesh, next) - lumped_mass(mesh, prev),
    }
}

pub fn check_bounds(mesh: &Mesh, s: &State) -> Bounds {
    let smooth = pi1h(mesh, &s.u);
    let avg = pi0(mesh, &smooth);
    Bounds {
        u_min: s.u.min(),
        u_max: s.u.max(),
        n_min: s.n.min(),
        n_max: s.n.max(),
        pi1h_u_min: smooth.min(),
        pi1h_u_max: smooth.max(),
        pi0_pi1h_u_min: avg.min(),
        pi0_pi1h_u_max: avg.max(),
    }
}

pub fn energy_of(mesh: &Mesh, s: &State, params: &ModelParams) -> EnergyParts {
    energy_parts(mesh, &s.u, &s.n, params)
}

/// `1e-9 · max(1, |E|)`.
pub fn energy_law_tolerance(energy: f64) -> f64 {
    1e-9 * energy.abs().max(1.0)
}

/// `(1/Δt)[∫F(Π1h u_next) - ∫F(Π1h u_prev) - (f(Π1h u_next, Π1h u_prev), Π1h(u_next - u_prev))]`,
/// integrated exactly.
pub fn convex_split_slack(mesh: &Mesh, u_prev: &P0Field, u_next: &P0Field, dt: f64) -> f64 {
    let a = pi1h(mesh, u_next);
    let b = pi1h(mesh, u_prev);
    let mut pairing = 0.0;
    for (k, tri) in mesh.triangles.iter().enumerate() {
        let va = tri.map(|j| a[j]);
        let vb = tri.map(|j| b[j]);
        for (l, w) in DEGREE4 {
            let (x, y) = (p1_at(va, l), p1_at(vb, l));
            pairing += mesh.areas[k] * w * convex_split_f(x, y) * (x - y);
        }
    }
    (integrate_potential(mesh, &a) - integrate_potential(mesh, &b) - pairing) / dt
}

/// Energy breakdown of the step `prev -> next` and the residual
/// `δtE + ΣD + τ_u + τ_n`, which is `≤ 0` for solutions of the scheme.
pub fn check_energy_law(mesh: &Mesh, prev: &State, next: &State, params: &ModelParams) -> (EnergyBreakdown, f64) {
    let b = energy_breakdown(mesh, prev, next, params);
    let residual = (b.e_total - b.e_prev) / params.dt + b.dissipation() + b.tau_u + b.tau_n;
    (b, residual)
}

pub fn energy_breakdown(mesh: &Mesh, prev: &State, next: &State, params: &ModelParams) -> EnergyBreakdown {
    let dt = params.dt;
    let parts = energy_of(mesh, next, params);
    let e_prev = energy_of(mesh, prev, params).total();
    let mu_bar = pi0(mesh, &next.mu_u);
    let mu_n = mu_n_discrete(mesh, &next.n, &prev.u, params);

    let d_u = params.c_u * b_upw(mesh, &mu_bar, &next.u, params.mobility, &mu_bar);
    let d_n = params.c_n * b_upw(mesh, &mu_n, &next.n, params.mobility, &mu_n);
    let d_prolif = params.delta
        * params.prolif_rate
        * (0..mesh.n_triangles())
            .map(|k| {
                let z = pos(mu_n[k] - mu_bar[k]);
                mesh.areas[k] * proliferation(next.u[k], next.n[k], params.prolif_exps) * z * z
            })
            .sum::<f64>();
    let d_darcy = rt0_l2_product(mesh, &next.v, &next.v) / params.k_perm;
    let du: P0Field = next.u.iter().zip(prev.u.iter()).map(|(a, b)| a - b).collect::<Vec<_>>().into();
    let d_dt_u = params.eps * params.eps / (2.0 * dt) * p1_dirichlet_energy(mesh, &pi1h(mesh, &du));
    let d_dt_n = next
        .n
        .iter()
        .zip(prev.n.iter())
        .zip(&mesh.areas)
        .map(|((a, b), area)| area * (a - b) * (a - b))
        .sum::<f64>()
        / (2.0 * params.delta * dt);
    EnergyBreakdown {
        e_total: parts.total(),
        e_prev,
        e_gradient: parts.gradient,
        e_potential: parts.potential,
        e_cross: parts.cross,
        e_nutrient: parts.nutrient,
        d_u,
        d_n,
        d_prolif,
        d_darcy,
        d_dt_u,
        d_dt_n,
        tau_u: tau_diag(mesh, &next.v, &next.u, &mu_bar, params.sigma_u, params.eta),
        tau_n: tau_diag(mesh, &next.v, &next.n, &mu_n, params.sigma_n, params.eta),
    }
}

/// `(‖div v‖_∞, max_K |Σ_e F_e [[1_K]]|)`; the second is the local
/// incompressibility sum against indicator test functions.
pub fn incompressibility(mesh: &Mesh, s: &State) -> (f64, f64) {
    (0..mesh.n_triangles()).fold((0.0f64, 0.0f64), |(d, l), k| {
        let flux = rt0_net_flux(mesh, &s.v, k);
        (d.max((flux / mesh.areas[k]).abs()), l.max(flux.abs()))
    })
}

/// Local incompressibility sum `Σ_e F_e [[p̄]]` for an arbitrary P0 `p̄`.
pub fn incompressibility_sum(mesh: &Mesh, s: &State, pbar: &P0Field) -> f64 {
    mesh.interior_edges
        .iter()
        .enumerate()
        .map(|(e, ed)| s.v[e] * (pbar[ed.left] - pbar[ed.right]))
        .sum()
}

/// All diagnostics of the step `prev -> next` with `Δt = params.dt`.
/// Newton statistics are left for the caller.
pub fn step_report(mesh: &Mesh, prev: &State, next: &State, params: &ModelParams) -> StepReport {
    let (energy, law_residual) = check_energy_law(mesh, prev, next, params);
    let bounds = check_bounds(mesh, next);
    let (div_v_inf, incomp) = incompressibility(mesh, next);
    StepReport {
        time: next.t,
        mass_total: total_mass(mesh, next),
        u_min: bounds.u_min,
        u_max: bounds.u_max,
        n_min: bounds.n_min,
        n_max: bounds.n_max,
        pi1h_u_min: bounds.pi1h_u_min,
        pi1h_u_max: bounds.pi1h_u_max,
        law_residual,
        law_residual_minus_tau: law_residual - 2.0 * (energy.tau_u + energy.tau_n),
        convex_split_slack: convex_split_slack(mesh, &prev.u, &next.u, params.dt),
        div_v_inf,
        incompressibility: incomp,
        pressure_mean: next.p.mean(mesh),
        energy,
        ..Default::default()
    }
}

/// Report row of the initial state (step 0): no rates.
pub fn initial_report(mesh: &Mesh, s: &State, params: &ModelParams) -> StepReport {
    let parts = energy_of(mesh, s, params);
    let bounds = check_bounds(mesh, s);
    let (div_v_inf, incomp) = incompressibility(mesh, s);
    StepReport {
        time: s.t,
        mass_total: total_mass(mesh, s),
        u_min: bounds.u_min,
        u_max: bounds.u_max,
        n_min: bounds.n_min,
        n_max: bounds.n_max,
        pi1h_u_min: bounds.pi1h_u_min,
        pi1h_u_max: bounds.pi1h_u_max,
        div_v_inf,
        incompressibility: incomp,
        pressure_mean: s.p.mean(mesh),
        energy: EnergyBreakdown {
            e_total: parts.total(),
            e_prev: parts.total(),
            e_gradient: parts.gradient,
            e_potential: parts.potential,
            e_cross: parts.cross,
            e_nutrient: parts.nutrient,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub const CSV_COLUMNS: [&str; 19] = [
    "step",
    "time",
    "newton_iters",
    "mass",
    "u_min",
    "u_max",
    "n_min",
    "n_max",
    "E",
    "D_u",
    "D_n",
    "D_prolif",
    "D_darcy",
    "D_dt_u",
    "D_dt_n",
    "tau_u",
    "tau_n",
    "law_residual",
    "div_v_inf",
];

pub fn write_csv_header<W: Write>(w: &mut W) -> io::Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))
}

/// One CSV row; floats use 17 significant digits so parsing is lossless.
pub fn write_csv_row<W: Write>(w: &mut W, r: &StepReport) -> io::Result<()> {
    let e = &r.energy;
    write!(w, "{},{:.16e},{}", r.step, r.time, r.newton_iters)?;
    for x in [
        r.mass_total,
        r.u_min,
        r.u_max,
        r.n_min,
        r.n_max,
        e.e_total,
        e.d_u,
        e.d_n,
        e.d_prolif,
        e.d_darcy,
        e.d_dt_u,
        e.d_dt_n,
        e.tau_u,
        e.tau_n,
        r.law_residual,
        r.div_v_inf,
    ] {
        write!(w, ",{x:.16e}")?;
    }
    writeln!(w)
}

pub fn emit_csv<W: Write>(reports: &[StepReport], mut w: W) -> io::Result<()> {
    write_csv_header(&mut w)?;
    for r in reports {
        write_csv_row(&mut w, r)?;
    }
    Ok(())
}

/// Parse a diagnostics CSV into rows of numbers in [`CSV_COLUMNS`] order.
pub fn read_csv<R: BufRead>(r: R) -> io::Result<Vec<Vec<f64>>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    if header.trim() != CSV_COLUMNS.join(",") {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2))))
            .collect::<io::Result<Vec<_>>>()?;
        if row.len() != CSV_COLUMNS.len() {
            return Err(bad(format!("line {}: {} fields", i + 2, row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `Π0Π1h` extrema never leave the P0 range; used as a sanity check.
pub fn smoothing_is_convex(mesh: &Mesh, u: &P0Field) -> bool {
    let s: P1Field = pi1h(mesh, u);
    let a = pi0_pi1h(mesh, u);
    s.min() >= u.min() - 1e-15 && s.max() <= u.max() + 1e-15 && a.min() >= s.min() - 1e-15 && a.max() <= s.max() + 1e-15
}
