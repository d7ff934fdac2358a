//! Edge forms of the scheme.
//!
//! Conventions on an interior edge `e` with neighbors `K` (left) and `L`
//! (right), normal `n_e` pointing from `K` to `L`:
//! `[[φ]] = φ_K - φ_L`, `⟨φ⟩ = (φ_K + φ_L)/2`, and the RT0 coefficient `F_e`
//! is the total flux, so `v·n_e = F_e / |e|` on the whole edge.
//!
//! Every form is available as a scalar and as an `*_apply`/`*_rows` vector
//! indexed by the test DOF. The scalar is the dot product of the two, so the
//! stepper and the diagnostics share one code path. The per-edge kernels
//! also return the partial derivatives used by the Newton Jacobian.

use thiserror::Error;

use crate::mesh::{EdgeRef, Mesh};
use crate::physics::{dpos, mobility_split, mobility_split_derivative, neg, pos, MobilitySpec};
use crate::spaces::{P0Field, RT0Field};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormError {
    #[error("boundary edge {0} has no neighbor")]
    BoundaryEdge(usize),
}

/// Two-point normal gradient `(μ_L - μ_K) / D_e`.
pub fn grad_n0(mesh: &Mesh, mu: &P0Field, edge: EdgeRef) -> Result<f64, FormError> {
    match edge {
        EdgeRef::Interior(e) => {
            let ed = &mesh.interior_edges[e];
            Ok((mu[ed.right] - mu[ed.left]) / ed.barycenter_distance)
        }
        EdgeRef::Boundary(b) => Err(FormError::BoundaryEdge(b)),
    }
}

/// Normal velocity `v·n_e` on each interior edge.
pub fn edge_normal_velocity(mesh: &Mesh, v: &RT0Field) -> Vec<f64> {
    mesh.interior_edges.iter().zip(v.iter()).map(|(e, f)| f / e.length).collect()
}

/// `F_+ φ_K - F_- φ_L` and its partials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpwindEdge {
    pub value: f64,
    pub d_flux: f64,
    pub d_phi_k: f64,
    pub d_phi_l: f64,
}

pub fn upwind_edge(flux: f64, phi_k: f64, phi_l: f64) -> UpwindEdge {
    UpwindEdge {
        value: pos(flux) * phi_k - neg(flux) * phi_l,
        d_flux: if flux > 0.0 {
            phi_k
        } else if flux < 0.0 {
            phi_l
        } else {
            0.0
        },
        d_phi_k: pos(flux),
        d_phi_l: -neg(flux),
    }
}

/// `(|e|/D_e) (J_+ (M↑(w_K)+M↓(w_L))_+ - J_- (M↑(w_L)+M↓(w_K))_+)` with
/// `J = [[μ]]`, and its partials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MobilityEdge {
    pub value: f64,
    pub d_jump: f64,
    pub d_w_k: f64,
    pub d_w_l: f64,
}

pub fn mobility_edge(spec: MobilitySpec, ratio: f64, jump: f64, w_k: f64, w_l: f64) -> MobilityEdge {
    let (up_k, down_k) = mobility_split(spec, w_k);
    let (up_l, down_l) = mobility_split(spec, w_l);
    let x = up_k + down_l;
    let y = up_l + down_k;
    let (jp, jm) = (pos(jump), neg(jump));
    let (dup_k, ddown_k) = mobility_split_derivative(spec, w_k);
    let (dup_l, ddown_l) = mobility_split_derivative(spec, w_l);
    let d_jump = if jump > 0.0 {
        pos(x)
    } else if jump < 0.0 {
        pos(y)
    } else {
        0.0
    };
    MobilityEdge {
        value: ratio * (jp * pos(x) - jm * pos(y)),
        d_jump: ratio * d_jump,
        d_w_k: ratio * (jp * dpos(x) * dup_k - jm * dpos(y) * ddown_k),
        d_w_l: ratio * (jp * dpos(x) * ddown_l - jm * dpos(y) * dup_l),
    }
}

/// Coefficient of the basis flux `F_e` in `c_h(w, μ, ·)`:
/// `-(w_K μ_K - w_L μ_L) - ⟨w⟩[[μ]]`, and its partials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenteredRow {
    pub value: f64,
    pub d_w_k: f64,
    pub d_w_l: f64,
    pub d_mu_k: f64,
    pub d_mu_l: f64,
}

pub fn centered_row(w_k: f64, w_l: f64, mu_k: f64, mu_l: f64) -> CenteredRow {
    let jump = mu_k - mu_l;
    let avg = 0.5 * (w_k + w_l);
    CenteredRow {
        value: -(w_k * mu_k - w_l * mu_l) - avg * jump,
        d_w_k: -mu_k - 0.5 * jump,
        d_w_l: mu_l - 0.5 * jump,
        d_mu_k: -w_k - avg,
        d_mu_l: w_l + avg,
    }
}

/// `x / (|x| + η)`, or `sign(x)` with `sign(0) = 0` when `η = 0`; returns
/// the value and the (semismooth) derivative.
pub fn stab_ratio(x: f64, eta: f64) -> (f64, f64) {
    if eta > 0.0 {
        let d = x.abs() + eta;
        (x / d, eta / (d * d))
    } else if x > 0.0 {
        (1.0, 0.0)
    } else if x < 0.0 {
        (-1.0, 0.0)
    } else {
        (0.0, 0.0)
    }
}

/// `a_upw(v, φ, ·)` as a vector over elements.
pub fn a_upw_apply(mesh: &Mesh, v: &RT0Field, phi: &P0Field) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_triangles()];
    for (e, ed) in mesh.interior_edges.iter().enumerate() {
        let g = upwind_edge(v[e], phi[ed.left], phi[ed.right]).value;
        out[ed.left] += g;
        out[ed.right] -= g;
    }
    out
}

pub fn a_upw(mesh: &Mesh, v: &RT0Field, phi: &P0Field, test: &P0Field) -> f64 {
    dot(&a_upw_apply(mesh, v, phi), test)
}

/// `b_upw(μ, w, ·)` as a vector over elements.
pub fn b_upw_apply(mesh: &Mesh, mu: &P0Field, w: &P0Field, spec: MobilitySpec) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_triangles()];
    for ed in &mesh.interior_edges {
        let (k, l) = (ed.left, ed.right);
        let g = mobility_edge(spec, ed.length / ed.barycenter_distance, mu[k] - mu[l], w[k], w[l]).value;
        out[k] += g;
        out[l] -= g;
    }
    out
}

pub fn b_upw(mesh: &Mesh, mu: &P0Field, w: &P0Field, spec: MobilitySpec, test: &P0Field) -> f64 {
    dot(&b_upw_apply(mesh, mu, w, spec), test)
}

/// `c_h(w, μ, ·)` as a vector over velocity DOFs.
pub fn c_h_rows(mesh: &Mesh, w: &P0Field, mu: &P0Field) -> Vec<f64> {
    mesh.interior_edges
        .iter()
        .map(|ed| centered_row(w[ed.left], w[ed.right], mu[ed.left], mu[ed.right]).value)
        .collect()
}

pub fn c_h(mesh: &Mesh, w: &P0Field, mu: &P0Field, vbar: &RT0Field) -> f64 {
    dot(&c_h_rows(mesh, w, mu), vbar)
}

/// `s_h(u, φ, μ, ·; η)` as a vector over velocity DOFs.
pub fn s_h_rows(mesh: &Mesh, u_vel: &RT0Field, phi: &P0Field, mu: &P0Field, eta: f64) -> Vec<f64> {
    mesh.interior_edges
        .iter()
        .enumerate()
        .map(|(e, ed)| {
            let (g, _) = stab_ratio(u_vel[e] / ed.length, eta);
            -0.5 * g * (phi[ed.left] - phi[ed.right]) * (mu[ed.left] - mu[ed.right])
        })
        .collect()
}

pub fn s_h(mesh: &Mesh, u_vel: &RT0Field, phi: &P0Field, mu: &P0Field, test: &RT0Field, eta: f64) -> f64 {
    dot(&s_h_rows(mesh, u_vel, phi, mu, eta), test)
}

/// `½ Σ_e |e| ((1-σ)|v·n|+η)/(|v·n|+η) |v·n| [[φ]][[μ]]`; an edge with
/// `|v·n| + η = 0` contributes 0.
pub fn tau_diag(mesh: &Mesh, v: &RT0Field, phi: &P0Field, mu: &P0Field, sigma: f64, eta: f64) -> f64 {
    mesh.interior_edges
        .iter()
        .enumerate()
        .map(|(e, ed)| {
            let vn = (v[e] / ed.length).abs();
            let den = vn + eta;
            if den == 0.0 {
                return 0.0;
            }
            0.5 * ed.length * ((1.0 - sigma) * vn + eta) / den
                * vn
                * (phi[ed.left] - phi[ed.right])
                * (mu[ed.left] - mu[ed.right])
        })
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_crossed_mesh, Rect};
    use crate::physics::mobility_eval;

    #[test]
    fn grad_n0_examples() {
        let m = build_crossed_mesh(2, 2, Rect::unit()).unwrap();
        let nt = m.n_triangles();
        let mu = P0Field::constant(nt, 0.3);
        assert_eq!(grad_n0(&m, &mu, EdgeRef::Interior(0)).unwrap(), 0.0);
        assert_eq!(grad_n0(&m, &mu, EdgeRef::Boundary(2)), Err(FormError::BoundaryEdge(2)));
        let ed = &m.interior_edges[3];
        let mut mu = P0Field::zeros(nt);
        mu[ed.left] = 1.0;
        let g = grad_n0(&m, &mu, EdgeRef::Interior(3)).unwrap();
        assert!((g + 1.0 / ed.barycenter_distance).abs() < 1e-14);
    }

    #[test]
    fn upwind_edge_example() {
        // v_n = 2 on a unit edge, φ_K = 3, φ_L = 7: upwind picks K.
        assert_eq!(upwind_edge(2.0, 3.0, 7.0).value, 6.0);
        assert_eq!(upwind_edge(-2.0, 3.0, 7.0).value, -14.0);
        assert_eq!(upwind_edge(0.0, 3.0, 7.0).value, 0.0);
    }

    #[test]
    fn mobility_edge_example() {
        let s = MobilitySpec::new(1, 1);
        let w = s.w_star();
        assert!((mobility_edge(s, 1.0 / 0.5, 1.0, w, w).value - 2.0).abs() < 1e-15);
        for (wk, wl) in [(1.5, 1.2), (-0.5, -0.1)] {
            assert_eq!(mobility_edge(s, 2.0, 1.0, wk, wl).value, 0.0);
            assert_eq!(mobility_edge(s, 2.0, -1.0, wk, wl).value, 0.0);
        }
        // Opposite sides of [0, 1]: the nondecreasing branch saturates at M(w*).
        assert_eq!(mobility_edge(s, 2.0, 1.0, 1.5, -0.5).value, 2.0);
        assert_eq!(mobility_edge(s, 2.0, 0.0, 0.3, 0.6).value, 0.0);
        assert!((mobility_eval(s, w) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stab_ratio_branches() {
        assert_eq!(stab_ratio(1.0, 0.0).0, 1.0);
        assert_eq!(stab_ratio(0.0, 0.0).0, 0.0);
        assert_eq!(stab_ratio(-3.0, 0.0).0, -1.0);
        assert!((stab_ratio(1.0, 1.0).0 - 0.5).abs() < 1e-16);
        assert!(stab_ratio(1.0, 1e300).0 < 1e-299);
    }

    #[test]
    fn centered_partials_by_difference() {
        let (wk, wl, mk, ml) = (0.3, 0.8, -1.2, 0.7);
        let r = centered_row(wk, wl, mk, ml);
        let h = 1e-7;
        let fd = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
        assert!((fd(&|x| centered_row(x, wl, mk, ml).value, wk) - r.d_w_k).abs() < 1e-7);
        assert!((fd(&|x| centered_row(wk, x, mk, ml).value, wl) - r.d_w_l).abs() < 1e-7);
        assert!((fd(&|x| centered_row(wk, wl, x, ml).value, mk) - r.d_mu_k).abs() < 1e-7);
        assert!((fd(&|x| centered_row(wk, wl, mk, x).value, ml) - r.d_mu_l).abs() < 1e-7);
    }

    #[test]
    fn mobility_partials_by_difference() {
        let h = 1e-7;
        for spec in [MobilitySpec::new(1, 1), MobilitySpec::new(5, 1)] {
            for (j, wk, wl) in [(0.7, 0.2, 0.35), (-0.4, 0.9, 0.1), (1.3, 0.95, 0.6), (-2.0, 0.3, 0.97)] {
                let r = mobility_edge(spec, 1.7, j, wk, wl);
                let f = |j: f64, a: f64, b: f64| mobility_edge(spec, 1.7, j, a, b).value;
                assert!(((f(j + h, wk, wl) - f(j - h, wk, wl)) / (2.0 * h) - r.d_jump).abs() < 1e-6);
                assert!(((f(j, wk + h, wl) - f(j, wk - h, wl)) / (2.0 * h) - r.d_w_k).abs() < 1e-6);
                assert!(((f(j, wk, wl + h) - f(j, wk, wl - h)) / (2.0 * h) - r.d_w_l).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tau_collapses() {
        let m = build_crossed_mesh(3, 3, Rect::unit()).unwrap();
        let nt = m.n_triangles();
        let v: RT0Field = (0..m.n_interior_edges()).map(|e| (e as f64 * 0.37).sin()).collect::<Vec<_>>().into();
        let phi: P0Field = (0..nt).map(|k| (k as f64 * 0.11).cos()).collect::<Vec<_>>().into();
        let mu: P0Field = (0..nt).map(|k| (k as f64 * 0.7).sin()).collect::<Vec<_>>().into();
        assert_eq!(tau_diag(&m, &v, &phi, &mu, 1.0, 0.0), 0.0);
        let direct: f64 = m
            .interior_edges
            .iter()
            .enumerate()
            .map(|(e, ed)| 0.5 * v[e].abs() * (phi[ed.left] - phi[ed.right]) * (mu[ed.left] - mu[ed.right]))
            .sum();
        assert!((tau_diag(&m, &v, &phi, &mu, 0.0, 0.0) - direct).abs() < 1e-13);
    }
}
