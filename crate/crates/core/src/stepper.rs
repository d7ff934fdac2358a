//! One time step of the coupled scheme: assembly of the nonlinear residual,
//! its semismooth Jacobian, and a damped Newton solve with a sparse direct
//! LU whose symbolic factorization is reused across iterations and steps.
//!
//! Unknown ordering: `[v edges | p elements | u elements | μ_u vertices |
//! n elements | λ]`. The pressure is only defined up to a constant; `λ`
//! fixes that gauge through element 0 alone (`p_0 = 0`, with `λ|K_0|` added
//! to its incompressibility row). Summing the incompressibility rows gives
//! `λ = 0` at every solution. A gauge spread over all elements would add a
//! dense row and column and raise the LU cost more than tenfold. The
//! zero-mean pressure is restored after convergence.

use std::collections::HashMap;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use log::{debug, warn};
use thiserror::Error;

use crate::diagnostics::{self, EnergyBreakdown};
use crate::forms::{
    a_upw_apply, b_upw_apply, c_h_rows, centered_row, mobility_edge, s_h_rows, stab_ratio, upwind_edge,
};
use crate::mesh::{EdgeRef, Mesh};
use crate::physics::{
    convex_split_explicit, dpos, mu_n_discrete, pos, proliferation, proliferation_derivative, ModelParams,
    CONVEX_SPLIT_IMPLICIT_SLOPE,
};
use crate::quadrature::{p1_at, DEGREE4};
use crate::spaces::{
    p1_local_stiffness, pi0, pi0_pi1h, pi1h, P0Field, P1Field, PressureField, RT0Field, Rt0Local,
};

/// Half-width of the band around `[0, 1]` that is clamped after a step.
pub const BOUNDS_BAND: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("Newton did not converge in {iters} iterations (scaled residual {residual:e})")]
    NewtonDiverged { iters: usize, residual: f64 },
    #[error("singular linear system: {0}")]
    SingularLinearSystem(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{field} = {value} outside [0, 1] beyond the clamp band")]
    BoundsViolation { field: &'static str, value: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("step {step}: {source}")]
pub struct RunError {
    pub step: usize,
    #[source]
    pub source: StepError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub v: RT0Field,
    pub p: PressureField,
    pub u: P0Field,
    pub mu_u: P1Field,
    pub n: P0Field,
    /// `μ_n` of the step that produced this state.
    pub mu_n: P0Field,
    pub t: f64,
}

impl State {
    /// Initial state: zero velocity and pressure, `μ_u` from the chemical
    /// potential equation with `u^{m+1} = u^m = u0`.
    pub fn initial(mesh: &Mesh, u0: P0Field, n0: P0Field, params: &ModelParams) -> State {
        let smooth = pi1h(mesh, &u0);
        let eps2 = params.eps * params.eps;
        let mut rhs = vec![0.0; mesh.n_vertices()];
        for (k, tri) in mesh.triangles.iter().enumerate() {
            let s = p1_local_stiffness(mesh, k);
            let vals = tri.map(|j| smooth[j]);
            let area = mesh.areas[k];
            for a in 0..3 {
                let mut r = eps2 * (0..3).map(|b| s[a][b] * vals[b]).sum::<f64>();
                for (l, w) in DEGREE4 {
                    let x = p1_at(vals, l);
                    let f = CONVEX_SPLIT_IMPLICIT_SLOPE * x + convex_split_explicit(x);
                    r += area * w * f * l[a];
                }
                r -= params.chi0 * n0[k] * area / 3.0;
                rhs[tri[a]] += r;
            }
        }
        let mu_u: P1Field = rhs
            .iter()
            .zip(&mesh.vertex_support_volume)
            .map(|(r, w)| r / w)
            .collect::<Vec<_>>()
            .into();
        let mu_n = mu_n_discrete(mesh, &n0, &u0, params);
        State {
            v: RT0Field::zeros(mesh.n_interior_edges()),
            p: PressureField::zeros(mesh.n_triangles()),
            u: u0,
            mu_u,
            n: n0,
            mu_n,
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.p.is_finite() && self.u.is_finite() && self.mu_u.is_finite() && self.n.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonConfig {
    /// Absolute tolerance on the max-norm of the scaled residual.
    pub residual_tol: f64,
    pub max_iters: usize,
    /// Backtracking factor of the Armijo line search.
    pub shrink: f64,
    /// Smallest step length tried by the line search.
    pub floor: f64,
    /// Number of Δt halvings attempted after a Newton failure.
    pub max_halvings: u32,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { residual_tol: 1e-9, max_iters: 30, shrink: 0.5, floor: 1.0 / 1024.0, max_halvings: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    pub newton_iters: usize,
    pub final_residual: f64,
    pub mass_total: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub pi1h_u_min: f64,
    pub pi1h_u_max: f64,
    pub energy: EnergyBreakdown,
    /// `δtE + ΣD + τ_u + τ_n`; equals the convex-splitting slack, so `≤ 0`.
    pub law_residual: f64,
    /// `δtE + ΣD - τ_u - τ_n`.
    pub law_residual_minus_tau: f64,
    /// `∫δtF(Π1h u) - (f, δtΠ1h u)`.
    pub convex_split_slack: f64,
    pub div_v_inf: f64,
    /// Largest `|Σ_e F_e [[p̄]]|` over indicator test functions `p̄`.
    pub incompressibility: f64,
    pub pressure_mean: f64,
    /// Number of Δt halvings used for this step.
    pub halvings: u32,
    /// Whether the step was re-solved with σ = 1.
    pub stabilized: bool,
}

/// Offsets of each block in the unknown vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_edges: usize,
    pub n_elements: usize,
    pub n_vertices: usize,
}

impl Layout {
    pub fn new(mesh: &Mesh) -> Self {
        Self { n_edges: mesh.n_interior_edges(), n_elements: mesh.n_triangles(), n_vertices: mesh.n_vertices() }
    }

    pub fn v(&self, e: usize) -> usize {
        e
    }

    pub fn p(&self, k: usize) -> usize {
        self.n_edges + k
    }

    pub fn u(&self, k: usize) -> usize {
        self.n_edges + self.n_elements + k
    }

    pub fn mu(&self, j: usize) -> usize {
        self.n_edges + 2 * self.n_elements + j
    }

    pub fn n(&self, k: usize) -> usize {
        self.n_edges + 2 * self.n_elements + self.n_vertices + k
    }

    pub fn lambda(&self) -> usize {
        self.n_edges + 3 * self.n_elements + self.n_vertices
    }

    pub fn len(&self) -> usize {
        self.lambda() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, s: &State) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend_from_slice(&s.v);
        x.extend_from_slice(&s.p);
        x.extend_from_slice(&s.u);
        x.extend_from_slice(&s.mu_u);
        x.extend_from_slice(&s.n);
        x.push(0.0);
        x
    }

    fn split<'a>(&self, x: &'a [f64]) -> Blocks<'a> {
        let (v, rest) = x.split_at(self.n_edges);
        let (p, rest) = rest.split_at(self.n_elements);
        let (u, rest) = rest.split_at(self.n_elements);
        let (mu, rest) = rest.split_at(self.n_vertices);
        let (n, rest) = rest.split_at(self.n_elements);
        Blocks { v, p, u, mu, n, lambda: rest[0] }
    }
}

struct Blocks<'a> {
    v: &'a [f64],
    p: &'a [f64],
    u: &'a [f64],
    mu: &'a [f64],
    n: &'a [f64],
    lambda: f64,
}

/// Quantities fixed during one step: the previous state and `Δt`.
#[derive(Clone, Debug)]
pub struct StepData {
    pub u_prev: P0Field,
    pub n_prev: P0Field,
    /// `Π0 Π1h u^m`, the explicit chemotaxis field of `μ_n`.
    pub smooth_prev: P0Field,
    /// `∫ f_explicit(Π1h u^m) φ_j`.
    pub explicit_mu: Vec<f64>,
    pub dt: f64,
}

impl StepData {
    pub fn new(mesh: &Mesh, prev: &State, dt: f64) -> Self {
        let smooth = pi1h(mesh, &prev.u);
        let mut explicit_mu = vec![0.0; mesh.n_vertices()];
        for (k, tri) in mesh.triangles.iter().enumerate() {
            let vals = tri.map(|j| smooth[j]);
            for (l, w) in DEGREE4 {
                let f = mesh.areas[k] * w * convex_split_explicit(p1_at(vals, l));
                for a in 0..3 {
                    explicit_mu[tri[a]] += f * l[a];
                }
            }
        }
        Self {
            u_prev: prev.u.clone(),
            n_prev: prev.n.clone(),
            smooth_prev: pi0(mesh, &smooth),
            explicit_mu,
            dt,
        }
    }
}

struct Pattern {
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: SymbolicLu<usize>,
    len: usize,
}

/// Discrete operator for one mesh and parameter set.
pub struct System<'m> {
    pub mesh: &'m Mesh,
    pub params: ModelParams,
    pub layout: Layout,
    /// RT0 mass matrix entries (duplicates summed).
    darcy_mass: Vec<(usize, usize, f64)>,
    /// Entries `(j, K, c)` of `(ε² S + ¾ M) Π1h`, vertex rows, element columns.
    smooth_op: Vec<(usize, usize, f64)>,
    pattern: Option<Pattern>,
}

impl<'m> System<'m> {
    pub fn new(mesh: &'m Mesh, params: ModelParams) -> Self {
        let layout = Layout::new(mesh);
        let mut darcy_mass = Vec::new();
        for k in 0..mesh.n_triangles() {
            let loc = Rt0Local::new(mesh, k);
            let m = loc.mass();
            for i in 0..3 {
                for j in 0..3 {
                    if let (Some(a), Some(b)) = (loc.edge[i], loc.edge[j]) {
                        darcy_mass.push((a, b, m[i][j]));
                    }
                }
            }
        }

        let eps2 = params.eps * params.eps;
        let mut acc: HashMap<(usize, usize), f64> = HashMap::new();
        for (k, tri) in mesh.triangles.iter().enumerate() {
            let s = p1_local_stiffness(mesh, k);
            let area = mesh.areas[k];
            for a in 0..3 {
                for b in 0..3 {
                    let mass = area / 12.0 * if a == b { 2.0 } else { 1.0 };
                    let c = eps2 * s[a][b] + CONVEX_SPLIT_IMPLICIT_SLOPE * mass;
                    let vb = tri[b];
                    let support: f64 = mesh.vertex_support_volume[vb] * 3.0;
                    for &l in mesh.vertex_elements(vb) {
                        *acc.entry((tri[a], l)).or_insert(0.0) += c * mesh.areas[l] / support;
                    }
                }
            }
        }
        let mut smooth_op: Vec<_> = acc.into_iter().map(|((j, k), c)| (j, k, c)).collect();
        smooth_op.sort_by_key(|&(j, k, _)| (j, k));

        Self { mesh, params, layout, darcy_mass, smooth_op, pattern: None }
    }

    /// Diagonal weights making every residual block O(1): `1/|K|` for
    /// pressure, u and n rows, `1/ω_j` for μ_u rows, `1/|K_0|` for `λ`.
    pub fn row_scaling(&self) -> Vec<f64> {
        let m = self.mesh;
        let l = self.layout;
        let mut d = vec![1.0; l.len()];
        for k in 0..l.n_elements {
            d[l.p(k)] = 1.0 / m.areas[k];
            d[l.u(k)] = 1.0 / m.areas[k];
            d[l.n(k)] = 1.0 / m.areas[k];
        }
        for j in 0..l.n_vertices {
            d[l.mu(j)] = 1.0 / m.vertex_support_volume[j];
        }
        d[l.lambda()] = 1.0 / m.areas[0];
        d
    }

    pub fn residual(&self, x: &[f64], data: &StepData) -> Vec<f64> {
        let m = self.mesh;
        let pr = &self.params;
        let l = self.layout;
        let b = l.split(x);
        let v: RT0Field = b.v.to_vec().into();
        let u: P0Field = b.u.to_vec().into();
        let n: P0Field = b.n.to_vec().into();
        let mu_bar = pi0(m, &P1Field(b.mu.to_vec()));
        let mu_n = self.mu_n(b.n, data);
        let mut r = vec![0.0; l.len()];

        // Darcy.
        for &(i, j, c) in &self.darcy_mass {
            r[l.v(i)] += c * b.v[j] / pr.k_perm;
        }
        let cu = c_h_rows(m, &u, &mu_bar);
        let cn = c_h_rows(m, &n, &mu_n);
        let su = s_h_rows(m, &v, &u, &mu_bar, pr.eta);
        let sn = s_h_rows(m, &v, &n, &mu_n, pr.eta);
        for (e, ed) in m.interior_edges.iter().enumerate() {
            r[l.v(e)] += -(b.p[ed.left] - b.p[ed.right]) + cu[e] + cn[e] + pr.sigma_u * su[e] + pr.sigma_n * sn[e];
        }

        // Incompressibility with the pressure gauge.
        for k in 0..l.n_elements {
            let flux: f64 = m
                .incidence(k)
                .iter()
                .filter_map(|inc| match inc.edge {
                    EdgeRef::Interior(e) => Some(inc.sign as f64 * b.v[e]),
                    EdgeRef::Boundary(_) => None,
                })
                .sum();
            r[l.p(k)] = flux;
        }
        r[l.p(0)] += b.lambda * m.areas[0];
        r[l.lambda()] = m.areas[0] * b.p[0];

        // Transport, diffusion and proliferation exchange.
        let au = a_upw_apply(m, &v, &u);
        let an = a_upw_apply(m, &v, &n);
        let bu = b_upw_apply(m, &mu_bar, &u, pr.mobility);
        let bn = b_upw_apply(m, &mu_n, &n, pr.mobility);
        for k in 0..l.n_elements {
            let area = m.areas[k];
            let q = pr.delta * pr.prolif_rate * area * proliferation(b.u[k], b.n[k], pr.prolif_exps)
                * pos(mu_n[k] - mu_bar[k]);
            r[l.u(k)] = area * (b.u[k] - data.u_prev[k]) / data.dt + au[k] + pr.c_u * bu[k] - q;
            r[l.n(k)] = area * (b.n[k] - data.n_prev[k]) / data.dt + an[k] + pr.c_n * bn[k] + q;
        }

        // Chemical potential, lumped mass on the left.
        for j in 0..l.n_vertices {
            r[l.mu(j)] = m.vertex_support_volume[j] * b.mu[j] - data.explicit_mu[j];
        }
        for &(j, k, c) in &self.smooth_op {
            r[l.mu(j)] -= c * b.u[k];
        }
        for (k, tri) in m.triangles.iter().enumerate() {
            for &j in tri {
                r[l.mu(j)] += pr.chi0 * b.n[k] * m.areas[k] / 3.0;
            }
        }
        r
    }

    fn mu_n(&self, n: &[f64], data: &StepData) -> P0Field {
        n.iter()
            .zip(data.smooth_prev.iter())
            .map(|(n, s)| n / self.params.delta - self.params.chi0 * s)
            .collect::<Vec<_>>()
            .into()
    }

    /// Jacobian entries in a fixed order independent of the values, so the
    /// sparsity pattern (explicit zeros included) never changes.
    pub fn jacobian_triplets(&self, x: &[f64], data: &StepData) -> Vec<(usize, usize, f64)> {
        let m = self.mesh;
        let pr = &self.params;
        let l = self.layout;
        let b = l.split(x);
        let mu_bar = pi0(m, &P1Field(b.mu.to_vec()));
        let mu_n = self.mu_n(b.n, data);
        let inv_delta = 1.0 / pr.delta;
        let mut t = Vec::with_capacity(40 * l.len());

        for &(i, j, c) in &self.darcy_mass {
            t.push((l.v(i), l.v(j), c / pr.k_perm));
        }

        for (e, ed) in m.interior_edges.iter().enumerate() {
            let (kl, kr) = (ed.left, ed.right);
            let row = l.v(e);
            let (g, dg) = stab_ratio(b.v[e] / ed.length, pr.eta);
            let ju = b.u[kl] - b.u[kr];
            let jmu = mu_bar[kl] - mu_bar[kr];
            let jn = b.n[kl] - b.n[kr];
            let jmun = mu_n[kl] - mu_n[kr];

            t.push((row, row, -0.5 * dg / ed.length * (pr.sigma_u * ju * jmu + pr.sigma_n * jn * jmun)));
            t.push((row, l.p(kl), -1.0));
            t.push((row, l.p(kr), 1.0));

            let cu = centered_row(b.u[kl], b.u[kr], mu_bar[kl], mu_bar[kr]);
            t.push((row, l.u(kl), cu.d_w_k - 0.5 * pr.sigma_u * g * jmu));
            t.push((row, l.u(kr), cu.d_w_l + 0.5 * pr.sigma_u * g * jmu));
            let dk = (cu.d_mu_k - 0.5 * pr.sigma_u * g * ju) / 3.0;
            let dl = (cu.d_mu_l + 0.5 * pr.sigma_u * g * ju) / 3.0;
            for &j in &m.triangles[kl] {
                t.push((row, l.mu(j), dk));
            }
            for &j in &m.triangles[kr] {
                t.push((row, l.mu(j), dl));
            }

            let cn = centered_row(b.n[kl], b.n[kr], mu_n[kl], mu_n[kr]);
            let sn = 0.5 * pr.sigma_n * g * (jmun + jn * inv_delta);
            t.push((row, l.n(kl), cn.d_w_k + cn.d_mu_k * inv_delta - sn));
            t.push((row, l.n(kr), cn.d_w_l + cn.d_mu_l * inv_delta + sn));
        }

        for k in 0..l.n_elements {
            for inc in m.incidence(k) {
                if let EdgeRef::Interior(e) = inc.edge {
                    t.push((l.p(k), l.v(e), inc.sign as f64));
                }
            }
        }
        t.push((l.p(0), l.lambda(), m.areas[0]));
        t.push((l.lambda(), l.p(0), m.areas[0]));

        for k in 0..l.n_elements {
            let area = m.areas[k];
            t.push((l.u(k), l.u(k), area / data.dt));
            t.push((l.n(k), l.n(k), area / data.dt));
        }
        for (e, ed) in m.interior_edges.iter().enumerate() {
            let (kl, kr) = (ed.left, ed.right);
            let ratio = ed.length / ed.barycenter_distance;
            let au = upwind_edge(b.v[e], b.u[kl], b.u[kr]);
            let bu = mobility_edge(pr.mobility, ratio, mu_bar[kl] - mu_bar[kr], b.u[kl], b.u[kr]);
            let an = upwind_edge(b.v[e], b.n[kl], b.n[kr]);
            let bn = mobility_edge(pr.mobility, ratio, mu_n[kl] - mu_n[kr], b.n[kl], b.n[kr]);
            for (k, s) in [(kl, 1.0), (kr, -1.0)] {
                t.push((l.u(k), l.v(e), s * au.d_flux));
                t.push((l.u(k), l.u(kl), s * (au.d_phi_k + pr.c_u * bu.d_w_k)));
                t.push((l.u(k), l.u(kr), s * (au.d_phi_l + pr.c_u * bu.d_w_l)));
                let dj = s * pr.c_u * bu.d_jump / 3.0;
                for &j in &m.triangles[kl] {
                    t.push((l.u(k), l.mu(j), dj));
                }
                for &j in &m.triangles[kr] {
                    t.push((l.u(k), l.mu(j), -dj));
                }
                t.push((l.n(k), l.v(e), s * an.d_flux));
                t.push((l.n(k), l.n(kl), s * (an.d_phi_k + pr.c_n * (bn.d_w_k + bn.d_jump * inv_delta))));
                t.push((l.n(k), l.n(kr), s * (an.d_phi_l + pr.c_n * (bn.d_w_l - bn.d_jump * inv_delta))));
            }
        }
        for k in 0..l.n_elements {
            let scale = pr.delta * pr.prolif_rate * m.areas[k];
            let z = mu_n[k] - mu_bar[k];
            let p = proliferation(b.u[k], b.n[k], pr.prolif_exps);
            let (pu, pn) = proliferation_derivative(b.u[k], b.n[k], pr.prolif_exps);
            let qu = scale * pu * pos(z);
            let qn = scale * (pn * pos(z) + p * dpos(z) * inv_delta);
            let qmu = -scale * p * dpos(z) / 3.0;
            t.push((l.u(k), l.u(k), -qu));
            t.push((l.u(k), l.n(k), -qn));
            t.push((l.n(k), l.u(k), qu));
            t.push((l.n(k), l.n(k), qn));
            for &j in &m.triangles[k] {
                t.push((l.u(k), l.mu(j), -qmu));
                t.push((l.n(k), l.mu(j), qmu));
            }
        }

        for j in 0..l.n_vertices {
            t.push((l.mu(j), l.mu(j), m.vertex_support_volume[j]));
        }
        for &(j, k, c) in &self.smooth_op {
            t.push((l.mu(j), l.u(k), -c));
        }
        for (k, tri) in m.triangles.iter().enumerate() {
            for &j in tri {
                t.push((l.mu(j), l.n(k), pr.chi0 * m.areas[k] / 3.0));
            }
        }
        t
    }

    pub fn jacobian(&mut self, x: &[f64], data: &StepData) -> Result<SparseColMat<usize, f64>, StepError> {
        let t = self.jacobian_triplets(x, data);
        self.from_triplets(&t, None)
    }

    /// Assemble `t` on the cached pattern, rows multiplied by `scale`.
    fn from_triplets(
        &mut self,
        t: &[(usize, usize, f64)],
        scale: Option<&[f64]>,
    ) -> Result<SparseColMat<usize, f64>, StepError> {
        let n = self.layout.len();
        if self.pattern.as_ref().is_none_or(|p| p.len != t.len()) {
            let idx: Vec<Pair<usize, usize>> = t.iter().map(|&(row, col, _)| Pair { row, col }).collect();
            let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &idx)
                .map_err(|e| StepError::SingularLinearSystem(format!("{e:?}")))?;
            let lu = SymbolicLu::try_new(symbolic.as_ref())
                .map_err(|e| StepError::SingularLinearSystem(format!("{e:?}")))?;
            self.pattern = Some(Pattern { symbolic, argsort, lu, len: t.len() });
        }
        let pat = self.pattern.as_ref().expect("pattern built above");
        let vals: Vec<f64> = match scale {
            Some(d) => t.iter().map(|&(i, _, v)| d[i] * v).collect(),
            None => t.iter().map(|e| e.2).collect(),
        };
        SparseColMat::new_from_argsort(pat.symbolic.clone(), &pat.argsort, &vals)
            .map_err(|e| StepError::SingularLinearSystem(format!("{e:?}")))
    }

    /// Solve `D (J + P/δ) d = -D r` with the residual row scaling `D` and
    /// the pseudo-time diagonal `P` (`1/δ = 0` is plain Newton). `P` is
    /// always pushed so the pattern never changes.
    fn newton_direction(
        &mut self,
        x: &[f64],
        r: &[f64],
        scale: &[f64],
        data: &StepData,
        inv_delta: f64,
    ) -> Result<Vec<f64>, StepError> {
        let mut t = self.jacobian_triplets(x, data);
        t.extend(self.pseudo_time_diagonal(data.dt).into_iter().map(|(i, p)| (i, i, inv_delta * p)));
        let a = self.from_triplets(&t, Some(scale))?;
        let sym = self.pattern.as_ref().expect("pattern built by jacobian").lu.clone();
        let rhs = Mat::<f64>::from_fn(r.len(), 1, |i, _| -scale[i] * r[i]);
        // Mobility powers and positive-part derivatives put subnormal
        // entries into the factors; flushing them speeds the LU up about 2x
        // and only perturbs the direction, never the residual.
        let d = {
            let _ftz = FlushSubnormals::new();
            let lu = Lu::try_new_with_symbolic(sym, a.as_ref())
                .map_err(|e| StepError::SingularLinearSystem(format!("{e:?}")))?;
            lu.solve(&rhs)
        };
        let d: Vec<f64> = (0..r.len()).map(|i| d[(i, 0)]).collect();
        if d.iter().any(|x| !x.is_finite()) {
            return Err(StepError::SingularLinearSystem("non-finite Newton direction".into()));
        }
        Ok(d)
    }

    /// Damped semismooth Newton from the initial guess `x`. Returns the
    /// iterate, the iteration count and the final scaled residual.
    pub fn newton(&mut self, x: Vec<f64>, data: &StepData, cfg: &NewtonConfig) -> Result<(Vec<f64>, usize, f64), StepError> {
        self.damped_newton(x, data, cfg, None)
    }

    /// With `stall = Some(m)`, gives up after `m` consecutive steps shorter
    /// than `NEWTON_SHORT_STEP`.
    fn damped_newton(
        &mut self,
        mut x: Vec<f64>,
        data: &StepData,
        cfg: &NewtonConfig,
        stall: Option<usize>,
    ) -> Result<(Vec<f64>, usize, f64), StepError> {
        let scale = self.row_scaling();
        let measure = |r: &[f64]| scaled_norms(r, &scale);
        let mut r = self.residual(&x, data);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(StepError::NonFinite("residual"));
        }
        let (mut res, mut merit) = measure(&r);
        let mut short_steps = 0;
        for it in 0..cfg.max_iters {
            if res <= cfg.residual_tol {
                return Ok((x, it, res));
            }
            // A run of tiny damped steps means Newton is stuck at a kink;
            // give up early so the caller can switch strategy.
            if stall == Some(short_steps) {
                return Err(StepError::NewtonDiverged { iters: it, residual: res });
            }
            let d = self.newton_direction(&x, &r, &scale, data, 0.0)?;
            let mut alpha = 1.0;
            loop {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                let rt = self.residual(&trial, data);
                let finite = rt.iter().all(|v| v.is_finite());
                let (rest, mt) = if finite { measure(&rt) } else { (f64::INFINITY, f64::INFINITY) };
                if (finite && mt <= (1.0 - 1e-4 * alpha) * merit) || alpha <= cfg.floor {
                    if !finite {
                        return Err(StepError::NonFinite("Newton iterate"));
                    }
                    x = trial;
                    r = rt;
                    res = rest;
                    merit = mt;
                    break;
                }
                alpha *= cfg.shrink;
            }
            short_steps = if alpha < NEWTON_SHORT_STEP { short_steps + 1 } else { 0 };
            debug!("newton it {} alpha {alpha} residual {res:e}", it + 1);
        }
        if res <= cfg.residual_tol {
            return Ok((x, cfg.max_iters, res));
        }
        Err(StepError::NewtonDiverged { iters: cfg.max_iters, residual: res })
    }

    /// Unpack a Newton solution into a clamped, zero-mean-pressure state.
    pub fn finish_state(&self, x: &[f64], data: &StepData, t: f64) -> Result<State, StepError> {
        let b = self.layout.split(x);
        let mut p = PressureField(b.p.to_vec());
        p.remove_mean(self.mesh);
        let clamp = |field: &'static str, vals: &[f64]| -> Result<P0Field, StepError> {
            vals.iter()
                .map(|&v| {
                    if !(-BOUNDS_BAND..=1.0 + BOUNDS_BAND).contains(&v) {
                        Err(StepError::BoundsViolation { field, value: v })
                    } else {
                        Ok(v.clamp(0.0, 1.0))
                    }
                })
                .collect::<Result<Vec<_>, _>>()
                .map(P0Field)
        };
        let u = clamp("u", b.u)?;
        let n = clamp("n", b.n)?;
        let mu_n = self.mu_n(&n, data);
        Ok(State { v: b.v.to_vec().into(), p, u, mu_u: b.mu.to_vec().into(), n, mu_n, t })
    }

    /// One step of length `dt` from `prev`. If Newton stalls, retries with
    /// pseudo-transient continuation from the same initial guess, and if
    /// that fails too, with Newton run to its full iteration limit.
    pub fn solve_step(&mut self, prev: &State, dt: f64, cfg: &NewtonConfig) -> Result<(State, usize, f64), StepError> {
        let data = StepData::new(self.mesh, prev, dt);
        let x0 = self.layout.pack(prev);
        let mut spent = 0;
        let (x, iters, res) = match self.damped_newton(x0.clone(), &data, cfg, Some(NEWTON_STALL)) {
            Err(e @ StepError::NewtonDiverged { iters, .. }) => {
                spent += iters;
                debug!("{e}; retrying with pseudo-transient continuation");
                match self.pseudo_transient(x0.clone(), &data, cfg) {
                    Err(e @ StepError::NewtonDiverged { iters, .. }) => {
                        spent += iters;
                        debug!("{e}; retrying with plain Newton");
                        self.newton(x0, &data, cfg).map_err(|e| match e {
                            StepError::NewtonDiverged { residual, .. } => {
                                StepError::NewtonDiverged { iters: spent + cfg.max_iters, residual }
                            }
                            e => e,
                        })?
                    }
                    other => other?,
                }
            }
            other => other?,
        };
        let iters = spent + iters;
        let next = self.finish_state(&x, &data, prev.t + dt)?;
        Ok((next, iters, res))
    }

    /// Diagonal `P` of the pseudo-time term: the Darcy mass diagonal on
    /// velocity rows and `|K|/Δt` on `u` and `n` rows. Pressure, chemical
    /// potential and multiplier rows are constraints and get none.
    fn pseudo_time_diagonal(&self, dt: f64) -> Vec<(usize, f64)> {
        let l = self.layout;
        let mut p: Vec<(usize, f64)> = Vec::with_capacity(l.n_edges + 2 * l.n_elements);
        p.extend(self.darcy_mass.iter().filter(|e| e.0 == e.1).map(|&(i, _, c)| (l.v(i), c / self.params.k_perm)));
        for (k, &a) in self.mesh.areas.iter().enumerate() {
            p.push((l.u(k), a / dt));
            p.push((l.n(k), a / dt));
        }
        p
    }

    /// Pseudo-transient continuation with switched evolution relaxation:
    /// full steps of `(J + P/δ) d = -r`, with `δ` scaled by the ratio of
    /// successive residuals, so it turns into Newton as the residual drops.
    /// With `σ > 0` the velocity rows are the optimality conditions of a
    /// nonconvex functional; for small `δ` the iteration follows its
    /// gradient flow instead of jumping between roots. Only a point where
    /// the unmodified residual meets the tolerance is returned.
    pub fn pseudo_transient(&mut self, mut x: Vec<f64>, data: &StepData, cfg: &NewtonConfig) -> Result<(Vec<f64>, usize, f64), StepError> {
        let scale = self.row_scaling();
        let mut r = self.residual(&x, data);
        let (mut res, _) = scaled_norms(&r, &scale);
        let mut delta = PTC_DELTA0;
        let mut best = res;
        let mut stalled = 0;
        let max_iters = PTC_ITERS_PER_NEWTON * cfg.max_iters;
        for it in 0..max_iters {
            if res <= cfg.residual_tol {
                return Ok((x, it, res));
            }
            let d = self.newton_direction(&x, &r, &scale, data, 1.0 / delta)?;
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            let rt = self.residual(&trial, data);
            let (rest, _) = scaled_norms(&rt, &scale);
            if !rest.is_finite() || rest > PTC_REJECT * res {
                delta *= 0.1;
                debug!("ptc it {} rejected, delta {delta:e}", it + 1);
                continue;
            }
            delta = (delta * res / rest).clamp(PTC_DELTA_MIN, PTC_DELTA_MAX);
            // Near a kink the large-δ iteration can cycle with constant
            // residual ratios; damp harder when the best residual stalls.
            if rest < 0.99 * best {
                best = rest;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled == PTC_STALL {
                    delta = (delta * 1e-2).max(PTC_DELTA_MIN);
                    best = rest;
                    stalled = 0;
                }
            }
            x = trial;
            r = rt;
            res = rest;
            debug!("ptc it {} delta {delta:e} residual {res:e}", it + 1);
        }
        if res <= cfg.residual_tol {
            return Ok((x, max_iters, res));
        }
        Err(StepError::NewtonDiverged { iters: max_iters, residual: res })
    }
}

/// Residual of the scheme at `trial` for the step starting at `prev`.
pub fn assemble_residual(mesh: &Mesh, trial: &State, prev: &State, params: &ModelParams) -> Result<Vec<f64>, StepError> {
    if !trial.is_finite() || !prev.is_finite() {
        return Err(StepError::NonFinite("state"));
    }
    let sys = System::new(mesh, params.clone());
    let data = StepData::new(mesh, prev, params.dt);
    Ok(sys.residual(&sys.layout.pack(trial), &data))
}

pub fn assemble_jacobian(
    mesh: &Mesh,
    trial: &State,
    prev: &State,
    params: &ModelParams,
) -> Result<SparseColMat<usize, f64>, StepError> {
    let mut sys = System::new(mesh, params.clone());
    let data = StepData::new(mesh, prev, params.dt);
    let x = sys.layout.pack(trial);
    sys.jacobian(&x, &data)
}

/// The first Newton attempt of a step stops after this many consecutive
/// steps shorter than `NEWTON_SHORT_STEP`.
const NEWTON_STALL: usize = 4;
const NEWTON_SHORT_STEP: f64 = 1.0 / 32.0;
/// Initial pseudo-time step, relative to the physical inertia in `P`.
const PTC_DELTA0: f64 = 1e-2;
const PTC_DELTA_MIN: f64 = 1e-10;
const PTC_DELTA_MAX: f64 = 1e12;
/// A step is rejected, and `δ` cut by 10, if the residual grows by more.
const PTC_REJECT: f64 = 10.0;
/// Iterations without a 1% improvement before `δ` is cut by 100.
const PTC_STALL: usize = 3;
/// Pseudo-transient budget in units of the Newton iteration limit.
const PTC_ITERS_PER_NEWTON: usize = 5;

fn scaled_norms(r: &[f64], scale: &[f64]) -> (f64, f64) {
    let mut inf = 0.0f64;
    let mut two = 0.0;
    for (ri, di) in r.iter().zip(scale) {
        let s = ri * di;
        inf = inf.max(s.abs());
        two += s * s;
    }
    (inf, 0.5 * two)
}

/// Time stepper holding the cached factorization pattern.
pub struct Stepper<'m> {
    system: System<'m>,
    stabilized: Option<System<'m>>,
    pub cfg: NewtonConfig,
    /// Re-solve a step with `σ_u = σ_n = 1`, `η = 1e-8` when the energy
    /// increases.
    pub enforce_energy: bool,
    step_index: usize,
}

impl<'m> Stepper<'m> {
    pub fn new(mesh: &'m Mesh, params: ModelParams, cfg: NewtonConfig) -> Self {
        Self { system: System::new(mesh, params), stabilized: None, cfg, enforce_energy: false, step_index: 0 }
    }

    pub fn params(&self) -> &ModelParams {
        &self.system.params
    }

    pub fn mesh(&self) -> &'m Mesh {
        self.system.mesh
    }

    /// Advance one `Δt`, halving it up to `max_halvings` times on Newton
    /// failure. With halvings the report averages the per-substep rates.
    pub fn step(&mut self, prev: &State) -> Result<(State, StepReport), StepError> {
        self.step_index += 1;
        let (next, mut report) = Self::step_with(&mut self.system, prev, &self.cfg)?;
        report.step = self.step_index;
        if self.enforce_energy && report.energy.e_total > report.energy.e_prev {
            warn!(
                "step {}: energy increased by {:e}, re-solving with stabilization",
                self.step_index,
                report.energy.e_total - report.energy.e_prev
            );
            let mesh = self.system.mesh;
            let params = ModelParams { sigma_u: 1.0, sigma_n: 1.0, eta: 1e-8, ..self.system.params.clone() };
            let sys = self.stabilized.get_or_insert_with(|| System::new(mesh, params));
            let (next, mut report) = Self::step_with(sys, prev, &self.cfg)?;
            report.step = self.step_index;
            report.stabilized = true;
            return Ok((next, report));
        }
        Ok((next, report))
    }

    fn step_with(sys: &mut System<'m>, prev: &State, cfg: &NewtonConfig) -> Result<(State, StepReport), StepError> {
        let dt = sys.params.dt;
        let mut last_err = None;
        for halvings in 0..=cfg.max_halvings {
            let substeps = 1usize << halvings;
            let h = dt / substeps as f64;
            match Self::substeps(sys, prev, h, substeps, cfg) {
                Ok((next, mut report)) => {
                    report.halvings = halvings;
                    return Ok((next, report));
                }
                Err(e @ StepError::NewtonDiverged { .. }) | Err(e @ StepError::SingularLinearSystem(_)) => {
                    warn!("{e}; halving dt to {}", h / 2.0);
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn substeps(
        sys: &mut System<'m>,
        prev: &State,
        h: f64,
        count: usize,
        cfg: &NewtonConfig,
    ) -> Result<(State, StepReport), StepError> {
        let mut cur = prev.clone();
        let mut acc: Option<StepReport> = None;
        let w = 1.0 / count as f64;
        for _ in 0..count {
            let (next, iters, res) = sys.solve_step(&cur, h, cfg)?;
            let params = ModelParams { dt: h, ..sys.params.clone() };
            let mut r = diagnostics::step_report(sys.mesh, &cur, &next, &params);
            r.newton_iters = iters;
            r.final_residual = res;
            acc = Some(match acc {
                None => scale_rates(r, w),
                Some(a) => merge_reports(a, r, w),
            });
            cur = next;
        }
        let mut report = acc.expect("count >= 1");
        report.energy.e_prev = diagnostics::energy_of(sys.mesh, prev, &sys.params).total();
        Ok((cur, report))
    }
}

fn scale_rates(mut r: StepReport, w: f64) -> StepReport {
    let e = &mut r.energy;
    for x in [
        &mut e.d_u,
        &mut e.d_n,
        &mut e.d_prolif,
        &mut e.d_darcy,
        &mut e.d_dt_u,
        &mut e.d_dt_n,
        &mut e.tau_u,
        &mut e.tau_n,
    ] {
        *x *= w;
    }
    r.law_residual *= w;
    r.law_residual_minus_tau *= w;
    r.convex_split_slack *= w;
    r
}

/// Combine the report `a` of earlier substeps with the report `b` of the
/// next one: rates accumulate with weight `w`, state quantities are taken
/// from `b`, worst cases are kept.
fn merge_reports(a: StepReport, b: StepReport, w: f64) -> StepReport {
    let b = scale_rates(b, w);
    let mut out = b.clone();
    let (ea, eb) = (&a.energy, &b.energy);
    out.energy.d_u = ea.d_u + eb.d_u;
    out.energy.d_n = ea.d_n + eb.d_n;
    out.energy.d_prolif = ea.d_prolif + eb.d_prolif;
    out.energy.d_darcy = ea.d_darcy + eb.d_darcy;
    out.energy.d_dt_u = ea.d_dt_u + eb.d_dt_u;
    out.energy.d_dt_n = ea.d_dt_n + eb.d_dt_n;
    out.energy.tau_u = ea.tau_u + eb.tau_u;
    out.energy.tau_n = ea.tau_n + eb.tau_n;
    out.law_residual = a.law_residual + b.law_residual;
    out.law_residual_minus_tau = a.law_residual_minus_tau + b.law_residual_minus_tau;
    out.convex_split_slack = a.convex_split_slack + b.convex_split_slack;
    out.newton_iters = a.newton_iters + b.newton_iters;
    out.final_residual = a.final_residual.max(b.final_residual);
    out.div_v_inf = a.div_v_inf.max(b.div_v_inf);
    out.incompressibility = a.incompressibility.max(b.incompressibility);
    out.pressure_mean = if a.pressure_mean.abs() > b.pressure_mean.abs() { a.pressure_mean } else { b.pressure_mean };
    out
}

/// Single step with a fresh [`Stepper`].
pub fn solve_timestep(
    mesh: &Mesh,
    prev: &State,
    params: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<(State, StepReport), StepError> {
    Stepper::new(mesh, params.clone(), cfg.clone()).step(prev)
}

/// Run `n_steps` steps, handing every new state and its report to `sink`.
/// The sink's error aborts the run.
pub fn run<E>(
    stepper: &mut Stepper<'_>,
    initial: State,
    n_steps: usize,
    mut sink: impl FnMut(&State, &StepReport) -> Result<(), E>,
) -> Result<(State, Vec<StepReport>), RunOutcome<E>> {
    let mut state = initial;
    let mut reports = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let (next, report) = stepper
            .step(&state)
            .map_err(|source| RunOutcome::Step(RunError { step, source }))?;
        sink(&next, &report).map_err(RunOutcome::Sink)?;
        reports.push(report);
        state = next;
    }
    Ok((state, reports))
}

#[derive(Debug)]
pub enum RunOutcome<E> {
    Step(RunError),
    Sink(E),
}

impl<E: std::fmt::Display> std::fmt::Display for RunOutcome<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunOutcome::Step(e) => e.fmt(f),
            RunOutcome::Sink(e) => e.fmt(f),
        }
    }
}

impl<E: std::fmt::Debug + std::fmt::Display> std::error::Error for RunOutcome<E> {}

/// `Π0 Π1h` of the previous `u`, exposed for diagnostics.
pub fn chemotaxis_field(mesh: &Mesh, u_prev: &P0Field) -> P0Field {
    pi0_pi1h(mesh, u_prev)
}

/// Sets flush-to-zero and denormals-are-zero for the current thread and
/// restores the previous mode on drop. A no-op off x86_64.
struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    fn new() -> Self {
        const FTZ_DAZ: u32 = (1 << 15) | (1 << 6);
        let mut saved = 0u32;
        // SAFETY: only the MXCSR rounding-mode bits of this thread change,
        // and they are restored in `drop`.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
            let mode = saved | FTZ_DAZ;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &mode, options(nostack, readonly));
        }
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn new() -> Self {
        Self {}
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the mode saved in `new`.
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack, readonly));
        }
    }
}
