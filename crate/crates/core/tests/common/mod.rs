//! Independent oracles shared by the integration tests: brute-force form
//! evaluations that walk elements instead of the edge list, random inputs,
//! and the directional finite-difference check.
#![allow(dead_code)]

use chd::mesh::{build_crossed_mesh, EdgeRef, Mesh, Rect};
use chd::physics::MobilitySpec;
use chd::spaces::{rt0_curl, P0Field, P1Field, RT0Field};
use chd::stepper::{Layout, StepData, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Crossed mesh with 1..=4 square cells per direction, random cell size and
/// offset.
pub fn random_mesh(rng: &mut ChaCha8Rng) -> Mesh {
    let nx = rng.random_range(1..=4);
    let ny = rng.random_range(1..=4);
    let h: f64 = rng.random_range(0.3..2.0);
    let (x0, y0): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    build_crossed_mesh(nx, ny, Rect::new(x0, x0 + nx as f64 * h, y0, y0 + ny as f64 * h)).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_p0(rng: &mut ChaCha8Rng, mesh: &Mesh, lo: f64, hi: f64) -> P0Field {
    P0Field(random_vec(rng, mesh.n_triangles(), lo, hi))
}

pub fn random_rt0(rng: &mut ChaCha8Rng, mesh: &Mesh, scale: f64) -> RT0Field {
    RT0Field(random_vec(rng, mesh.n_interior_edges(), -scale, scale))
}

/// Divergence-free RT0 field: discrete curl of a random stream function
/// vanishing on the boundary.
pub fn random_div_free(rng: &mut ChaCha8Rng, mesh: &Mesh, scale: f64) -> RT0Field {
    let mut on_boundary = vec![false; mesh.n_vertices()];
    for b in &mesh.boundary_edges {
        on_boundary[b.vertices[0]] = true;
        on_boundary[b.vertices[1]] = true;
    }
    let psi: Vec<f64> = on_boundary
        .iter()
        .map(|&b| if b { 0.0 } else { rng.random_range(-scale..scale) })
        .collect();
    rt0_curl(mesh, &P1Field(psi))
}

/// Divergence per element by walking each element's own edges.
pub fn divergence(mesh: &Mesh, v: &[f64]) -> Vec<f64> {
    (0..mesh.n_triangles())
        .map(|k| {
            mesh.incidence(k)
                .iter()
                .map(|inc| match inc.edge {
                    EdgeRef::Interior(e) => inc.sign as f64 * v[e] / mesh.areas[k],
                    EdgeRef::Boundary(_) => 0.0,
                })
                .sum()
        })
        .collect()
}

/// The other element across interior edge `e` as seen from `k`, with the
/// flux of `v` out of `k`, the edge length and the barycenter distance.
struct Neighbor {
    other: usize,
    out_flux: f64,
    length: f64,
    dist: f64,
}

fn neighbors(mesh: &Mesh, k: usize, v: Option<&[f64]>) -> Vec<(usize, Neighbor)> {
    mesh.incidence(k)
        .iter()
        .filter_map(|inc| match inc.edge {
            EdgeRef::Interior(e) => {
                let ed = &mesh.interior_edges[e];
                let other = if ed.left == k { ed.right } else { ed.left };
                let out_flux = v.map_or(0.0, |v| inc.sign as f64 * v[e]);
                Some((e, Neighbor { other, out_flux, length: ed.length, dist: ed.barycenter_distance }))
            }
            EdgeRef::Boundary(_) => None,
        })
        .collect()
}

/// Upwind form: each element collects its outflow upwind value times its
/// own test value; summing over both sides of every edge gives the jump.
pub fn oracle_a_upw(mesh: &Mesh, v: &[f64], phi: &[f64], test: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..mesh.n_triangles() {
        for (_, nb) in neighbors(mesh, k, Some(v)) {
            let vn = nb.out_flux / nb.length;
            let upwind = vn.max(0.0) * phi[k] - (-vn).max(0.0) * phi[nb.other];
            total += nb.length * upwind * test[k];
        }
    }
    total
}

/// `K v^p (1-v)^q` on `(0,1)`, zero elsewhere, scaled to peak 1.
pub fn oracle_mobility(spec: MobilitySpec, v: f64) -> f64 {
    let (p, q) = (spec.p as f64, spec.q as f64);
    let shape = |v: f64| if v > 0.0 && v < 1.0 { v.powf(p) * (1.0 - v).powf(q) } else { 0.0 };
    shape(v) / shape(p / (p + q))
}

/// `(M↑, M↓)`: running maximum from the left and the remainder.
pub fn oracle_split(spec: MobilitySpec, v: f64) -> (f64, f64) {
    let peak = spec.p as f64 / (spec.p + spec.q) as f64;
    let up = oracle_mobility(spec, v.min(peak));
    (up, oracle_mobility(spec, v) - up)
}

pub fn oracle_b_upw(mesh: &Mesh, mu: &[f64], w: &[f64], spec: MobilitySpec, test: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..mesh.n_triangles() {
        for (_, nb) in neighbors(mesh, k, None) {
            let l = nb.other;
            let jump = mu[k] - mu[l];
            let (uk, dk) = oracle_split(spec, w[k]);
            let (ul, dl) = oracle_split(spec, w[l]);
            let flow = jump.max(0.0) * (uk + dl).max(0.0) - (-jump).max(0.0) * (ul + dk).max(0.0);
            total += nb.length / nb.dist * flow * test[k];
        }
    }
    total
}

/// `-Σ_K μ_K w_K ∫_{∂K} v̄·n - Σ_e |e| (v̄·n_e) ⟨w⟩ [[μ]]`.
pub fn oracle_c_h(mesh: &Mesh, w: &[f64], mu: &[f64], vbar: &[f64]) -> f64 {
    let div = divergence(mesh, vbar);
    let element: f64 = (0..mesh.n_triangles()).map(|k| -mu[k] * w[k] * div[k] * mesh.areas[k]).sum();
    let mut edges = 0.0;
    for k in 0..mesh.n_triangles() {
        for (_, nb) in neighbors(mesh, k, Some(vbar)) {
            let l = nb.other;
            // Each edge is visited from both sides with opposite flux and
            // jump, so the product is counted twice.
            edges -= 0.5 * nb.out_flux * 0.5 * (w[k] + w[l]) * (mu[k] - mu[l]);
        }
    }
    element + edges
}

fn sign_or_ratio(x: f64, eta: f64) -> f64 {
    if eta > 0.0 {
        x / (x.abs() + eta)
    } else if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

pub fn oracle_s_h(mesh: &Mesh, u_vel: &[f64], phi: &[f64], mu: &[f64], test: &[f64], eta: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..mesh.n_triangles() {
        for (e, nb) in neighbors(mesh, k, Some(u_vel)) {
            let l = nb.other;
            let un = nb.out_flux / nb.length;
            let tn = mesh.incidence(k).iter().find(|i| i.edge == EdgeRef::Interior(e)).unwrap().sign as f64
                * test[e]
                / nb.length;
            total -= 0.25 * nb.length * tn * sign_or_ratio(un, eta) * (phi[k] - phi[l]) * (mu[k] - mu[l]);
        }
    }
    total
}

pub fn oracle_tau(mesh: &Mesh, v: &[f64], phi: &[f64], mu: &[f64], sigma: f64, eta: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..mesh.n_triangles() {
        for (_, nb) in neighbors(mesh, k, Some(v)) {
            let vn = (nb.out_flux / nb.length).abs();
            if vn + eta == 0.0 {
                continue;
            }
            let factor = ((1.0 - sigma) * vn + eta) / (vn + eta);
            total += 0.25 * nb.length * factor * vn * (phi[k] - phi[nb.other]) * (mu[k] - mu[nb.other]);
        }
    }
    total
}

pub fn sparse_apply(triplets: &[(usize, usize, f64)], x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for &(i, j, v) in triplets {
        y[i] += v * x[j];
    }
    y
}

/// Random state vector with `u, n ∈ (0.05, 0.95)`.
pub fn random_unknowns(rng: &mut ChaCha8Rng, mesh: &Mesh) -> Vec<f64> {
    let l = Layout::new(mesh);
    let mut x = random_vec(rng, l.len(), -1.0, 1.0);
    for k in 0..l.n_elements {
        x[l.u(k)] = rng.random_range(0.05..0.95);
        x[l.n(k)] = rng.random_range(0.05..0.95);
    }
    x
}

/// Least-squares slope of `log err` against `log h` for the forward
/// difference `(R(x + hδ) - R(x))/h` versus `J δ`, errors measured in the
/// row-scaled max norm. Returns the slope and the errors.
pub fn fd_slope(sys: &mut System<'_>, x: &[f64], dir: &[f64], data: &StepData, hs: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let scale = sys.row_scaling();
    let r0 = sys.residual(x, data);
    let jd = sparse_apply(&sys.jacobian_triplets(x, data), dir, n);
    let errs: Vec<f64> = hs
        .iter()
        .map(|&h| {
            let xh: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + h * b).collect();
            let rh = sys.residual(&xh, data);
            (0..n).map(|i| (scale[i] * ((rh[i] - r0[i]) / h - jd[i])).abs()).fold(0.0, f64::max)
        })
        .collect();
    let pts: Vec<(f64, f64)> = hs.iter().zip(&errs).map(|(h, e)| (h.ln(), e.max(1e-300).ln())).collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (num / den, errs)
}

/// Area of `{g > level}` for a P1 function `g`, clipping each triangle
/// exactly.
pub fn superlevel_area(mesh: &Mesh, g: &[f64], level: f64) -> f64 {
    let mut area = 0.0;
    for (k, tri) in mesh.triangles.iter().enumerate() {
        let pts = mesh.triangle_points(k);
        let vals = [g[tri[0]] - level, g[tri[1]] - level, g[tri[2]] - level];
        // Sutherland–Hodgman against the half-plane {value > 0}.
        let mut poly: Vec<([f64; 2], f64)> = Vec::new();
        for i in 0..3 {
            let (a, fa) = (pts[i], vals[i]);
            let (b, fb) = (pts[(i + 1) % 3], vals[(i + 1) % 3]);
            if fa > 0.0 {
                poly.push((a, fa));
            }
            if (fa > 0.0) != (fb > 0.0) {
                let t = fa / (fa - fb);
                poly.push(([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], 0.0));
            }
        }
        let n = poly.len();
        let mut twice = 0.0;
        for i in 0..n {
            let (p, q) = (poly[i].0, poly[(i + 1) % n].0);
            twice += p[0] * q[1] - q[0] * p[1];
        }
        area += 0.5 * twice.abs();
    }
    area
}
