//! Triangular meshes of rectangular domains with the edge topology used by
//! the upwind forms.
//!
//! Conventions:
//! - triangles are stored counterclockwise;
//! - every interior edge has a left element `K` and a right element `L`, and
//!   its unit normal points from `K` into `L`;
//! - boundary normals point out of the domain;
//! - local edge `i` of a triangle is the edge opposite local vertex `i`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub type Point = [f64; 2];

/// Angular tolerance used when loading external meshes.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("number of cells must be positive (nx={nx}, ny={ny})")]
    EmptyGrid { nx: usize, ny: usize },
    #[error("degenerate rectangle [{x0}, {x1}] x [{y0}, {y1}]")]
    DegenerateDomain { x0: f64, x1: f64, y0: f64, y1: f64 },
    #[error(
        "crossed cells must be square to keep barycenter segments orthogonal to edges \
         (hx={hx}, hy={hy})"
    )]
    NonSquareCells { hx: f64, hy: f64 },
    #[error("triangle {0} has zero area")]
    DegenerateTriangle(usize),
    #[error("triangle {tri} references vertex {vertex} but only {n} vertices exist")]
    BadVertexIndex { tri: usize, vertex: usize, n: usize },
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("mesh violates barycenter orthogonality on {count} interior edges (worst edge {worst}, angle {angle:e} rad)")]
    NotOrthogonal { count: usize, worst: usize, angle: f64 },
    #[error("mesh file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn is_degenerate(&self) -> bool {
        !(self.x1 - self.x0 > 0.0 && self.y1 - self.y0 > 0.0)
            || !self.area().is_finite()
    }
}

#[derive(Clone, Debug)]
pub struct InteriorEdge {
    pub vertices: [usize; 2],
    /// Element `K`; the normal points out of it.
    pub left: usize,
    /// Element `L`.
    pub right: usize,
    pub normal: Point,
    pub length: f64,
    /// Distance between the barycenters of `left` and `right`.
    pub barycenter_distance: f64,
}

#[derive(Clone, Debug)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub element: usize,
    pub normal: Point,
    pub length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeRef {
    Interior(usize),
    Boundary(usize),
}

/// One edge of a triangle as seen from that triangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Incidence {
    pub edge: EdgeRef,
    /// `+1` when the stored edge normal is outward for this triangle.
    pub sign: i8,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub areas: Vec<f64>,
    pub barycenters: Vec<Point>,
    pub interior_edges: Vec<InteriorEdge>,
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Lumped weight `sum_{K ∋ a_j} |K| / 3` of every vertex.
    pub vertex_support_volume: Vec<f64>,
    /// Local edge `i` of each triangle, opposite local vertex `i`.
    incidence: Vec<[Incidence; 3]>,
    /// Triangles around each vertex.
    vertex_elements: Vec<Vec<usize>>,
}

/// Outcome of [`validate_orthogonality`].
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalityCertificate {
    pub passed: bool,
    /// Interior edge with the largest deviation and its angle in radians.
    pub worst_edge: Option<(usize, f64)>,
    pub failing_edges: Vec<usize>,
}

impl fmt::Display for OrthogonalityCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.worst_edge {
            Some((e, a)) => write!(
                f,
                "{} (worst edge {e}, angle {a:.3e} rad, {} failing)",
                if self.passed { "pass" } else { "fail" },
                self.failing_edges.len()
            ),
            None => write!(f, "pass (no interior edges)"),
        }
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Split each of the `nx * ny` cells of `domain` into four triangles through
/// the cell center.
pub fn build_crossed_mesh(nx: usize, ny: usize, domain: Rect) -> Result<Mesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::EmptyGrid { nx, ny });
    }
    if domain.is_degenerate() {
        return Err(MeshError::DegenerateDomain {
            x0: domain.x0,
            x1: domain.x1,
            y0: domain.y0,
            y1: domain.y1,
        });
    }
    let hx = (domain.x1 - domain.x0) / nx as f64;
    let hy = (domain.y1 - domain.y0) / ny as f64;
    if (hx - hy).abs() > 1e-12 * hx.max(hy) {
        return Err(MeshError::NonSquareCells { hx, hy });
    }

    let corner = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) + nx * ny);
    for j in 0..=ny {
        for i in 0..=nx {
            // Use the exact end points on the last row/column.
            let x = if i == nx { domain.x1 } else { domain.x0 + i as f64 * hx };
            let y = if j == ny { domain.y1 } else { domain.y0 + j as f64 * hy };
            vertices.push([x, y]);
        }
    }
    let center0 = vertices.len();
    for j in 0..ny {
        for i in 0..nx {
            let a = vertices[corner(i, j)];
            let c = vertices[corner(i + 1, j + 1)];
            vertices.push([0.5 * (a[0] + c[0]), 0.5 * (a[1] + c[1])]);
        }
    }

    let mut triangles = Vec::with_capacity(4 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v00 = corner(i, j);
            let v10 = corner(i + 1, j);
            let v11 = corner(i + 1, j + 1);
            let v01 = corner(i, j + 1);
            let c = center0 + j * nx + i;
            triangles.push([v00, v10, c]);
            triangles.push([v10, v11, c]);
            triangles.push([v11, v01, c]);
            triangles.push([v01, v00, c]);
        }
    }
    Mesh::from_triangles(vertices, triangles)
}

/// Check that every segment joining adjacent barycenters is orthogonal to the
/// shared edge: `|(b_L - b_K) . t_e| <= tol |b_L - b_K|`.
pub fn validate_orthogonality(mesh: &Mesh, tol: f64) -> OrthogonalityCertificate {
    let mut worst: Option<(usize, f64)> = None;
    let mut failing = Vec::new();
    for (id, e) in mesh.interior_edges.iter().enumerate() {
        let seg = sub(mesh.barycenters[e.right], mesh.barycenters[e.left]);
        let tangent = [-e.normal[1], e.normal[0]];
        let len = norm(seg);
        let along = dot(seg, tangent).abs();
        let angle = (along / len).min(1.0).asin();
        if along > tol * len {
            failing.push(id);
        }
        if worst.map_or(true, |(_, a)| angle > a) {
            worst = Some((id, angle));
        }
    }
    OrthogonalityCertificate {
        passed: failing.is_empty(),
        worst_edge: worst,
        failing_edges: failing,
    }
}

/// Per-element list of `(edge, sign)` where `sign` relates the stored edge
/// normal to the element's outward normal.
pub fn edge_incidence(mesh: &Mesh) -> &[[Incidence; 3]] {
    &mesh.incidence
}

impl Mesh {
    /// Build the topology of an arbitrary triangulation. Clockwise triangles
    /// are reoriented. Orthogonality is not enforced here.
    pub fn from_triangles(
        vertices: Vec<Point>,
        mut triangles: Vec<[usize; 3]>,
    ) -> Result<Mesh, MeshError> {
        let nv = vertices.len();
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in tri.iter() {
                if v >= nv {
                    return Err(MeshError::BadVertexIndex { tri: t, vertex: v, n: nv });
                }
            }
            let [a, b, c] = tri.map(|v| vertices[v]);
            let twice = cross(sub(b, a), sub(c, a));
            if !(twice.abs() > 0.0) {
                return Err(MeshError::DegenerateTriangle(t));
            }
            if twice < 0.0 {
                tri.swap(1, 2);
            }
        }

        let areas: Vec<f64> = triangles
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|v| vertices[v]);
                0.5 * cross(sub(b, a), sub(c, a))
            })
            .collect();
        let barycenters: Vec<Point> = triangles
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|v| vertices[v]);
                [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
            })
            .collect();

        // Edge key -> (first triangle, local index), optional second.
        let mut owners: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (t, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                let a = tri[(i + 1) % 3];
                let b = tri[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                let slot = owners.entry(key).or_default();
                if slot.is_empty() {
                    order.push(key);
                }
                slot.push((t, i));
                if slot.len() > 2 {
                    return Err(MeshError::NonManifoldEdge(key.0, key.1));
                }
            }
        }

        let placeholder = Incidence { edge: EdgeRef::Boundary(usize::MAX), sign: 0 };
        let mut incidence = vec![[placeholder; 3]; triangles.len()];
        let mut interior_edges = Vec::new();
        let mut boundary_edges = Vec::new();
        for key in order {
            let slot = &owners[&key];
            let (k, ik) = slot[0];
            let a = triangles[k][(ik + 1) % 3];
            let b = triangles[k][(ik + 2) % 3];
            let pa = vertices[a];
            let pb = vertices[b];
            let t = sub(pb, pa);
            let length = norm(t);
            // CCW triangle: the outward normal of edge a->b is the tangent
            // rotated clockwise.
            let normal = [t[1] / length, -t[0] / length];
            match slot.as_slice() {
                [_] => {
                    incidence[k][ik] = Incidence { edge: EdgeRef::Boundary(boundary_edges.len()), sign: 1 };
                    boundary_edges.push(BoundaryEdge { vertices: [a, b], element: k, normal, length });
                }
                [_, (l, il)] => {
                    let id = interior_edges.len();
                    incidence[k][ik] = Incidence { edge: EdgeRef::Interior(id), sign: 1 };
                    incidence[*l][*il] = Incidence { edge: EdgeRef::Interior(id), sign: -1 };
                    let d = norm(sub(barycenters[*l], barycenters[k]));
                    interior_edges.push(InteriorEdge {
                        vertices: [a, b],
                        left: k,
                        right: *l,
                        normal,
                        length,
                        barycenter_distance: d,
                    });
                }
                _ => unreachable!(),
            }
        }

        let mut vertex_support_volume = vec![0.0; nv];
        let mut vertex_elements = vec![Vec::new(); nv];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                vertex_support_volume[v] += areas[t] / 3.0;
                vertex_elements[v].push(t);
            }
        }

        Ok(Mesh {
            vertices,
            triangles,
            areas,
            barycenters,
            interior_edges,
            boundary_edges,
            vertex_support_volume,
            incidence,
            vertex_elements,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_interior_edges(&self) -> usize {
        self.interior_edges.len()
    }

    pub fn n_edges(&self) -> usize {
        self.interior_edges.len() + self.boundary_edges.len()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Maximum edge length.
    pub fn h(&self) -> f64 {
        self.interior_edges
            .iter()
            .map(|e| e.length)
            .chain(self.boundary_edges.iter().map(|e| e.length))
            .fold(0.0, f64::max)
    }

    pub fn incidence(&self, element: usize) -> &[Incidence; 3] {
        &self.incidence[element]
    }

    pub fn vertex_elements(&self, vertex: usize) -> &[usize] {
        &self.vertex_elements[vertex]
    }

    pub fn triangle_points(&self, element: usize) -> [Point; 3] {
        self.triangles[element].map(|v| self.vertices[v])
    }

    /// Gradients of the three barycentric coordinates on `element`.
    pub fn barycentric_gradients(&self, element: usize) -> [Point; 3] {
        let [a, b, c] = self.triangle_points(element);
        let twice = 2.0 * self.areas[element];
        let grad = |p: Point, q: Point| [(p[1] - q[1]) / twice, (q[0] - p[0]) / twice];
        [grad(b, c), grad(c, a), grad(a, b)]
    }

    /// Read the plain-text format and require barycenter orthogonality.
    pub fn load(path: &Path) -> Result<Mesh, MeshError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    /// Parse `vertices N triangles M`, then `N` lines `x y` and `M` lines
    /// `i j k` (0-based).
    pub fn read<R: BufRead>(reader: R) -> Result<Mesh, MeshError> {
        let mut lines = reader
            .lines()
            .map(|l| l.map(|s| s.trim().to_owned()))
            .filter(|l| l.as_ref().map_or(true, |s| !s.is_empty() && !s.starts_with('#')));
        let header = lines
            .next()
            .ok_or_else(|| MeshError::Parse("empty file".into()))??;
        let words: Vec<&str> = header.split_whitespace().collect();
        let (nv, nt) = match words.as_slice() {
            ["vertices", n, "triangles", m] => (
                n.parse::<usize>().map_err(|e| MeshError::Parse(format!("vertex count: {e}")))?,
                m.parse::<usize>().map_err(|e| MeshError::Parse(format!("triangle count: {e}")))?,
            ),
            _ => return Err(MeshError::Parse(format!("bad header {header:?}"))),
        };
        let mut vertices = Vec::with_capacity(nv);
        for i in 0..nv {
            let line = lines
                .next()
                .ok_or_else(|| MeshError::Parse(format!("missing vertex line {i}")))??;
            let xs: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| MeshError::Parse(format!("vertex {i}: {e}")))?;
            if xs.len() != 2 {
                return Err(MeshError::Parse(format!("vertex {i}: expected 2 coordinates")));
            }
            vertices.push([xs[0], xs[1]]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for i in 0..nt {
            let line = lines
                .next()
                .ok_or_else(|| MeshError::Parse(format!("missing triangle line {i}")))??;
            let ids: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| MeshError::Parse(format!("triangle {i}: {e}")))?;
            if ids.len() != 3 {
                return Err(MeshError::Parse(format!("triangle {i}: expected 3 indices")));
            }
            triangles.push([ids[0], ids[1], ids[2]]);
        }
        let mesh = Mesh::from_triangles(vertices, triangles)?;
        let cert = validate_orthogonality(&mesh, ORTHOGONALITY_TOL);
        if !cert.passed {
            let (worst, angle) = cert.worst_edge.unwrap_or((0, 0.0));
            return Err(MeshError::NotOrthogonal { count: cert.failing_edges.len(), worst, angle });
        }
        Ok(mesh)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "vertices {} triangles {}", self.n_vertices(), self.n_triangles())?;
        for p in &self.vertices {
            writeln!(w, "{:?} {:?}", p[0], p[1])?;
        }
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}
