//! Field snapshots: legacy ASCII VTK and the `kind,index,value` CSV.
//!
//! In the CSV, `p0` rows hold `u` at indices `0..nt` followed by `n` at
//! `nt..2nt`; `p1` rows hold `Π1h u` at `0..nv` followed by `μ_u` at
//! `nv..2nv`; `rt0` rows are edge fluxes and `pressure` rows the pressure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::mesh::Mesh;
use crate::spaces::{pi1h, rt0_cell_vectors, write_snapshot_csv, SnapshotKind};
use crate::stepper::State;

pub fn write_vtk<W: Write>(mut w: W, mesh: &Mesh, s: &State) -> io::Result<()> {
    let (nv, nt) = (mesh.n_vertices(), mesh.n_triangles());
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "chd snapshot t={:e}", s.t)?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {nv} double")?;
    for p in &mesh.vertices {
        writeln!(w, "{:e} {:e} 0", p[0], p[1])?;
    }
    writeln!(w, "CELLS {nt} {}", 4 * nt)?;
    for t in &mesh.triangles {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    writeln!(w, "CELL_TYPES {nt}")?;
    for _ in 0..nt {
        writeln!(w, "5")?;
    }

    writeln!(w, "CELL_DATA {nt}")?;
    for (name, vals) in [("u", &s.u[..]), ("n", &s.n[..]), ("p", &s.p[..]), ("mu_n", &s.mu_n[..])] {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for x in vals {
            writeln!(w, "{x:.16e}")?;
        }
    }
    writeln!(w, "VECTORS velocity double")?;
    for v in rt0_cell_vectors(mesh, &s.v) {
        writeln!(w, "{:.16e} {:.16e} 0", v[0], v[1])?;
    }

    writeln!(w, "POINT_DATA {nv}")?;
    let smooth = pi1h(mesh, &s.u);
    for (name, vals) in [("pi1h_u", &smooth[..]), ("mu_u", &s.mu_u[..])] {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for x in vals {
            writeln!(w, "{x:.16e}")?;
        }
    }
    Ok(())
}

pub fn write_state_csv<W: Write>(w: W, mesh: &Mesh, s: &State) -> io::Result<()> {
    let p0: Vec<f64> = s.u.iter().chain(s.n.iter()).copied().collect();
    let smooth = pi1h(mesh, &s.u);
    let p1: Vec<f64> = smooth.iter().chain(s.mu_u.iter()).copied().collect();
    write_snapshot_csv(
        w,
        &[
            (SnapshotKind::P0, &p0),
            (SnapshotKind::P1, &p1),
            (SnapshotKind::Rt0, &s.v),
            (SnapshotKind::Pressure, &s.p),
        ],
    )
}

/// Write `snap_%06d.vtk` and `snap_%06d.csv` into `dir`.
pub fn write_snapshot(dir: &Path, step: usize, mesh: &Mesh, s: &State) -> io::Result<[PathBuf; 2]> {
    let vtk = dir.join(format!("snap_{step:06}.vtk"));
    let csv = dir.join(format!("snap_{step:06}.csv"));
    let mut w = BufWriter::new(File::create(&vtk)?);
    write_vtk(&mut w, mesh, s)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(&csv)?);
    write_state_csv(&mut w, mesh, s)?;
    w.flush()?;
    Ok([vtk, csv])
}
