//! Discrete function spaces and the two projection operators.
//!
//! - [`P0Field`]: one value per triangle (u, n, μ_n).
//! - [`P1Field`]: one value per vertex, continuous piecewise linear (μ_u).
//! - [`RT0Field`]: lowest-order Raviart–Thomas, one coefficient per interior
//!   edge equal to the total flux `∫_e v·n_e`. Boundary fluxes are zero by
//!   construction and are not stored.
//! - [`PressureField`]: piecewise constant pressure.

use std::io::{self, Write};
use std::ops::{Deref, DerefMut};

use crate::mesh::{EdgeRef, Mesh, Point};
use crate::quadrature::DEGREE2;

macro_rules! field {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Default)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(n: usize) -> Self {
                Self(vec![0.0; n])
            }

            pub fn constant(n: usize, c: f64) -> Self {
                Self(vec![c; n])
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|x| x.is_finite())
            }

            pub fn min(&self) -> f64 {
                self.0.iter().copied().fold(f64::INFINITY, f64::min)
            }

            pub fn max(&self) -> f64 {
                self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

field!(
    /// Piecewise constant values, indexed by triangle.
    P0Field
);
field!(
    /// Continuous piecewise linear values, indexed by vertex.
    P1Field
);
field!(
    /// Normal fluxes `∫_e v·n_e`, indexed by interior edge.
    RT0Field
);
field!(
    /// Piecewise constant pressure, indexed by triangle.
    PressureField
);

impl P0Field {
    /// `∫_Ω g`.
    pub fn integral(&self, mesh: &Mesh) -> f64 {
        self.iter().zip(&mesh.areas).map(|(g, a)| g * a).sum()
    }
}

impl P1Field {
    /// Lumped integral `Σ_j ω_j g_j` (exact for P1).
    pub fn integral(&self, mesh: &Mesh) -> f64 {
        self.iter()
            .zip(&mesh.vertex_support_volume)
            .map(|(g, w)| g * w)
            .sum()
    }
}

impl PressureField {
    pub fn mean(&self, mesh: &Mesh) -> f64 {
        self.iter().zip(&mesh.areas).map(|(p, a)| p * a).sum::<f64>() / mesh.total_area()
    }

    /// Shift to zero area-weighted mean; returns the removed mean.
    pub fn remove_mean(&mut self, mesh: &Mesh) -> f64 {
        let m = self.mean(mesh);
        for p in self.iter_mut() {
            *p -= m;
        }
        m
    }
}

/// Element averages of a P1 function: the mean of the three vertex values.
pub fn pi0(mesh: &Mesh, g: &P1Field) -> P0Field {
    mesh.triangles
        .iter()
        .map(|t| (g[t[0]] + g[t[1]] + g[t[2]]) / 3.0)
        .collect::<Vec<_>>()
        .into()
}

/// Mass-lumped regularization of a P0 function: each vertex gets the
/// area-weighted average of the surrounding element values.
pub fn pi1h(mesh: &Mesh, g: &P0Field) -> P1Field {
    (0..mesh.n_vertices())
        .map(|j| {
            let (num, den) = mesh
                .vertex_elements(j)
                .iter()
                .fold((0.0, 0.0), |(n, d), &k| (n + mesh.areas[k] * g[k], d + mesh.areas[k]));
            num / den
        })
        .collect::<Vec<_>>()
        .into()
}

pub fn pi0_pi1h(mesh: &Mesh, g: &P0Field) -> P0Field {
    pi0(mesh, &pi1h(mesh, g))
}

/// `(a, b)_h = Σ_j ω_j a_j b_j`.
pub fn lumped_mass_product(mesh: &Mesh, a: &P1Field, b: &P1Field) -> f64 {
    mesh.vertex_support_volume
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(w, (x, y))| w * x * y)
        .sum()
}

/// Local P1 stiffness matrix `∫_K ∇φ_i·∇φ_j`.
pub fn p1_local_stiffness(mesh: &Mesh, element: usize) -> [[f64; 3]; 3] {
    let g = mesh.barycentric_gradients(element);
    let area = mesh.areas[element];
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
        }
    }
    s
}

/// Action of the P1 stiffness matrix, returned as a dual vector indexed by
/// vertex.
pub fn p1_stiffness_apply(mesh: &Mesh, a: &P1Field) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_vertices()];
    for (k, tri) in mesh.triangles.iter().enumerate() {
        let s = p1_local_stiffness(mesh, k);
        for i in 0..3 {
            out[tri[i]] += (0..3).map(|j| s[i][j] * a[tri[j]]).sum::<f64>();
        }
    }
    out
}

/// `∫_Ω |∇a|²` for a P1 field.
pub fn p1_dirichlet_energy(mesh: &Mesh, a: &P1Field) -> f64 {
    p1_stiffness_apply(mesh, a)
        .iter()
        .zip(a.iter())
        .map(|(s, x)| s * x)
        .sum()
}

/// Element divergence `(Σ signed fluxes) / |K|`.
pub fn rt0_divergence(mesh: &Mesh, v: &RT0Field) -> P0Field {
    (0..mesh.n_triangles())
        .map(|k| rt0_net_flux(mesh, v, k) / mesh.areas[k])
        .collect::<Vec<_>>()
        .into()
}

/// Net outward flux of `v` through `∂K`.
pub fn rt0_net_flux(mesh: &Mesh, v: &RT0Field, element: usize) -> f64 {
    mesh.incidence(element)
        .iter()
        .map(|inc| match inc.edge {
            EdgeRef::Interior(e) => inc.sign as f64 * v[e],
            EdgeRef::Boundary(_) => 0.0,
        })
        .sum()
}

/// Restriction of the RT0 basis to one triangle: local function `i` is
/// `sign_i (x - a_i) / (2|K|)`, with unit outward flux through the edge
/// opposite vertex `a_i` (times the sign).
#[derive(Clone, Copy, Debug)]
pub struct Rt0Local {
    pub opposite: [Point; 3],
    pub sign: [f64; 3],
    /// Interior edge id of each local edge (`None` on the boundary).
    pub edge: [Option<usize>; 3],
    pub area: f64,
}

impl Rt0Local {
    pub fn new(mesh: &Mesh, element: usize) -> Self {
        let inc = mesh.incidence(element);
        let pts = mesh.triangle_points(element);
        Self {
            opposite: pts,
            sign: inc.map(|i| i.sign as f64),
            edge: inc.map(|i| match i.edge {
                EdgeRef::Interior(e) => Some(e),
                EdgeRef::Boundary(_) => None,
            }),
            area: mesh.areas[element],
        }
    }

    pub fn basis(&self, i: usize, x: Point) -> Point {
        let s = self.sign[i] / (2.0 * self.area);
        [s * (x[0] - self.opposite[i][0]), s * (x[1] - self.opposite[i][1])]
    }

    /// `∫_K ψ_i·ψ_j`, exact with the degree-2 rule.
    pub fn mass(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (l, w) in DEGREE2 {
            let x = [
                l[0] * self.opposite[0][0] + l[1] * self.opposite[1][0] + l[2] * self.opposite[2][0],
                l[0] * self.opposite[0][1] + l[1] * self.opposite[1][1] + l[2] * self.opposite[2][1],
            ];
            let psi = [self.basis(0, x), self.basis(1, x), self.basis(2, x)];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += w * self.area * (psi[i][0] * psi[j][0] + psi[i][1] * psi[j][1]);
                }
            }
        }
        m
    }

    /// Local coefficients of `v` (zero on boundary edges).
    pub fn coefficients(&self, v: &RT0Field) -> [f64; 3] {
        self.edge.map(|e| e.map_or(0.0, |e| v[e]))
    }

    pub fn eval(&self, v: &RT0Field, x: Point) -> Point {
        let c = self.coefficients(v);
        let mut out = [0.0; 2];
        for (i, ci) in c.iter().enumerate() {
            let b = self.basis(i, x);
            out[0] += ci * b[0];
            out[1] += ci * b[1];
        }
        out
    }
}

/// `∫_Ω v·w`.
pub fn rt0_l2_product(mesh: &Mesh, v: &RT0Field, w: &RT0Field) -> f64 {
    (0..mesh.n_triangles())
        .map(|k| {
            let loc = Rt0Local::new(mesh, k);
            let m = loc.mass();
            let a = loc.coefficients(v);
            let b = loc.coefficients(w);
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| a[i] * m[i][j] * b[j])
                .sum::<f64>()
        })
        .sum()
}

/// RT0 interpolant of a constant vector: flux `|e| c·n_e` per interior edge.
/// Boundary fluxes are dropped.
pub fn rt0_interpolate_constant(mesh: &Mesh, c: Point) -> RT0Field {
    mesh.interior_edges
        .iter()
        .map(|e| e.length * (c[0] * e.normal[0] + c[1] * e.normal[1]))
        .collect::<Vec<_>>()
        .into()
}

/// Velocity at each barycenter (cell-averaged vector for output).
pub fn rt0_cell_vectors(mesh: &Mesh, v: &RT0Field) -> Vec<Point> {
    (0..mesh.n_triangles())
        .map(|k| Rt0Local::new(mesh, k).eval(v, mesh.barycenters[k]))
        .collect()
}

/// Discrete curl `(ψ_y, -ψ_x)` of a P1 stream function. The flux through an
/// edge `a -> b` along its stored normal is `ψ(b) - ψ(a)`. The result is
/// divergence free only when `ψ` is constant on the boundary, since boundary
/// fluxes are not stored.
pub fn rt0_curl(mesh: &Mesh, psi: &P1Field) -> RT0Field {
    mesh.interior_edges
        .iter()
        .map(|e| psi[e.vertices[1]] - psi[e.vertices[0]])
        .collect::<Vec<_>>()
        .into()
}

/// Snapshot record kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotKind {
    P0,
    P1,
    Rt0,
    Pressure,
}

impl SnapshotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SnapshotKind::P0 => "p0",
            SnapshotKind::P1 => "p1",
            SnapshotKind::Rt0 => "rt0",
            SnapshotKind::Pressure => "pressure",
        }
    }
}

/// Write fields as CSV rows `kind,index,value` under a single header.
pub fn write_snapshot_csv<W: Write>(
    mut w: W,
    fields: &[(SnapshotKind, &[f64])],
) -> io::Result<()> {
    writeln!(w, "kind,index,value")?;
    for (kind, values) in fields {
        for (i, x) in values.iter().enumerate() {
            writeln!(w, "{},{},{:.16e}", kind.as_str(), i, x)?;
        }
    }
    Ok(())
}
