//! Legacy VTK structured-points snapshots.
//!
//! Layout of a file written by [`write_snapshot`]:
//!
//! ```text
//! # vtk DataFile Version 3.0
//! micromorphx snapshot t=<t>
//! ASCII
//! DATASET STRUCTURED_POINTS
//! DIMENSIONS <nx+1> <ny+1> <nz+1>
//! ORIGIN 0 0 0
//! SPACING <hx> <hy> <hz>
//! POINT_DATA <nodes>
//! VECTORS u double
//! <ux uy uz per point>
//! SCALARS P11 double 1
//! LOOKUP_TABLE default
//! <one value per point>
//! ... P12 through P33 ...
//! SCALARS energy_density double 1
//! LOOKUP_TABLE default
//! <one value per point>
//! ```
//!
//! Points run with `x` fastest. Values are printed as `{:.16e}` (17
//! significant digits) and read back exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::assembly::SystemMatrices;
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::grid::{discrete_Curl, discrete_Grad, interpolate, interpolate_transpose, Grid, NodalField, QuadField};
use crate::tensor::Mat9;

pub const P_NAMES: [&str; 9] = ["P11", "P12", "P13", "P21", "P22", "P23", "P31", "P32", "P33"];

/// Nodal energy density: quadrature density projected with the lumped mass,
/// so `Σ_a w_a ∫ N_a` equals the total energy.
pub fn nodal_energy_density(sm: &SystemMatrices, state: &State) -> Result<NodalField> {
    let grid = &sm.grid;
    let f = state.fields(sm);
    let grad = discrete_Grad(grid, &f.u)?;
    let p = interpolate(grid, &f.p)?;
    let curl = discrete_Curl(grid, &f.p)?;
    let v = interpolate(grid, &f.v)?;
    let pd = interpolate(grid, &f.p_dot)?;
    let (micro, curv) = sm.variant.channels();
    let h: Mat9 = micro.projector().transpose() * sm.material.h.coefficients * micro.projector();
    let l: Mat9 = curv.projector().transpose() * sm.material.l.coefficients * curv.projector();
    let c = sm.material.c.coefficients;
    let quad = |m: &Mat9, x: &[f64]| {
        let x = crate::tensor::Vec9::from_column_slice(x);
        (m * x).dot(&x)
    };
    let npts = grid.quad_point_count();
    let mut density = QuadField::zeros(grid, 1);
    for q in 0..npts {
        let e: Vec<f64> = grad.point(q).iter().zip(p.point(q)).map(|(g, p)| g - p).collect();
        let kinetic: f64 = v.point(q).iter().chain(pd.point(q)).map(|x| x * x).sum();
        density.values[q] = 0.5 * (kinetic + quad(&c, &e) + quad(&h, p.point(q)) + quad(&l, curl.point(q)));
    }
    let weighted = interpolate_transpose(grid, &density);
    let lumped = interpolate_transpose(grid, &QuadField { ncomp: 1, values: vec![1.0; npts] });
    Ok(NodalField {
        ncomp: 1,
        values: weighted.values.iter().zip(&lumped.values).map(|(w, m)| w / m).collect(),
    })
}

/// VTK order (x fastest) of the nodes.
fn vtk_order(grid: &Grid) -> impl Iterator<Item = usize> + '_ {
    let [nx, ny, nz] = grid.nodes_per_axis();
    (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| grid.node_index(i, j, k))))
}

pub fn write_snapshot(sm: &SystemMatrices, state: &State, path: &Path) -> Result<()> {
    let f = state.fields(sm);
    let density = nodal_energy_density(sm, state)?;
    write_fields(&sm.grid, state.t, &f.u, &f.p, &density, path)
}

/// Writes `u` (3 components), `P` (9) and a scalar density.
pub fn write_fields(grid: &Grid, t: f64, u: &NodalField, p: &NodalField, density: &NodalField, path: &Path) -> Result<()> {
    for (f, nc) in [(u, 3), (p, 9), (density, 1)] {
        f.check(grid)?;
        if f.ncomp != nc {
            return Err(Error::SizeMismatch { expected: nc, got: f.ncomp });
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let [nx, ny, nz] = grid.nodes_per_axis();
    let h = grid.spacing();
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "micromorphx snapshot t={t:.16e}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {nx} {ny} {nz}")?;
    writeln!(w, "ORIGIN 0 0 0")?;
    writeln!(w, "SPACING {:.16e} {:.16e} {:.16e}", h[0], h[1], h[2])?;
    writeln!(w, "POINT_DATA {}", grid.node_count())?;
    writeln!(w, "VECTORS u double")?;
    for node in vtk_order(grid) {
        let x = u.node(node);
        writeln!(w, "{:.16e} {:.16e} {:.16e}", x[0], x[1], x[2])?;
    }
    for (c, name) in P_NAMES.iter().enumerate() {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for node in vtk_order(grid) {
            writeln!(w, "{:.16e}", p.node(node)[c])?;
        }
    }
    writeln!(w, "SCALARS energy_density double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for node in vtk_order(grid) {
        writeln!(w, "{:.16e}", density.values[node])?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of a snapshot, arrays in file (VTK) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub dimensions: [usize; 3],
    pub spacing: [f64; 3],
    pub point_count: usize,
    /// Name to `(components, values)`.
    pub arrays: BTreeMap<String, (usize, Vec<f64>)>,
}

impl Snapshot {
    /// Array reordered to the crate's node numbering.
    pub fn nodal(&self, grid: &Grid, name: &str) -> Result<NodalField> {
        let (nc, values) = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("snapshot has no array '{name}'")))?;
        let mut field = NodalField::zeros(grid, *nc);
        for (slot, node) in vtk_order(grid).enumerate() {
            field.node_mut(node).copy_from_slice(&values[slot * nc..(slot + 1) * nc]);
        }
        Ok(field)
    }
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("vtk line {line}: {msg}"))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut points = None;
    let mut arrays = BTreeMap::new();
    let mut i = 0;
    let numbers = |i: usize, s: &str| -> Result<Vec<f64>> {
        s.split_whitespace().map(|t| t.parse::<f64>().map_err(|e| parse_err(i + 1, e))).collect()
    };
    while i < lines.len() {
        let line = lines[i].trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("DIMENSIONS") => {
                let v = numbers(i, &line["DIMENSIONS".len()..])?;
                if v.len() != 3 {
                    return Err(parse_err(i + 1, "DIMENSIONS needs three values"));
                }
                dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
            }
            Some("SPACING") => {
                let v = numbers(i, &line["SPACING".len()..])?;
                if v.len() != 3 {
                    return Err(parse_err(i + 1, "SPACING needs three values"));
                }
                spacing = [v[0], v[1], v[2]];
            }
            Some("POINT_DATA") => {
                let n = parts.next().and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| parse_err(i + 1, "bad POINT_DATA"))?;
                points = Some(n);
            }
            Some(kind @ ("VECTORS" | "SCALARS")) => {
                let name = parts.next().ok_or_else(|| parse_err(i + 1, "array without name"))?.to_string();
                let n = points.ok_or_else(|| parse_err(i + 1, "array before POINT_DATA"))?;
                let nc = if kind == "VECTORS" {
                    3
                } else {
                    parts.nth(1).map_or(Ok(1), |t| t.parse::<usize>().map_err(|e| parse_err(i + 1, e)))?
                };
                i += 1;
                if kind == "SCALARS" && lines.get(i).is_some_and(|l| l.trim_start().starts_with("LOOKUP_TABLE")) {
                    i += 1;
                }
                let mut values = Vec::with_capacity(n * nc);
                while values.len() < n * nc {
                    let l = lines.get(i).ok_or_else(|| parse_err(i + 1, format!("array {name} truncated")))?;
                    values.extend(numbers(i, l)?);
                    i += 1;
                }
                if values.len() != n * nc {
                    return Err(parse_err(i, format!("array {name} has {} values, expected {}", values.len(), n * nc)));
                }
                arrays.insert(name, (nc, values));
                continue;
            }
            _ => {}
        }
        i += 1;
    }
    let dimensions = dims.ok_or_else(|| parse_err(0, "missing DIMENSIONS"))?;
    let point_count = points.ok_or_else(|| parse_err(0, "missing POINT_DATA"))?;
    if dimensions.iter().product::<usize>() != point_count {
        return Err(parse_err(0, "POINT_DATA does not match DIMENSIONS"));
    }
    Ok(Snapshot { dimensions, spacing, point_count, arrays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::energy;
    use crate::tensor::{IsotropicModuli, Material, ModelVariant};

    fn system(n: [usize; 3]) -> SystemMatrices {
        let m = Material::isotropic(IsotropicModuli::unit(), ModelVariant::Full).unwrap();
        SystemMatrices::new(&Grid::new(n, [1.0, 2.0, 0.5]).unwrap(), &m, ModelVariant::Full).unwrap()
    }

    #[test]
    fn zero_state_file() {
        let sm = system([2, 3, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.vtk");
        write_snapshot(&sm, &State::zeros(&sm), &path).unwrap();
        let snap = read_snapshot(&path).unwrap();
        assert_eq!(snap.dimensions, [3, 4, 3]);
        assert_eq!(snap.arrays.len(), 11);
        for (nc, values) in snap.arrays.values() {
            assert_eq!(values.len(), nc * sm.grid.node_count());
            assert!(values.iter().all(|v| *v == 0.0));
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
    }

    #[test]
    fn round_trip_is_exact() {
        let sm = system([3, 2, 2]);
        let s = State::random(&sm, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vtk");
        write_snapshot(&sm, &s, &path).unwrap();
        let snap = read_snapshot(&path).unwrap();
        let f = s.fields(&sm);
        assert_eq!(snap.nodal(&sm.grid, "u").unwrap(), f.u);
        for (c, name) in P_NAMES.iter().enumerate() {
            let back = snap.nodal(&sm.grid, name).unwrap();
            for node in 0..sm.grid.node_count() {
                assert_eq!(back.values[node], f.p.node(node)[c]);
            }
        }
        assert_eq!(snap.nodal(&sm.grid, "energy_density").unwrap(), nodal_energy_density(&sm, &s).unwrap());
        assert_eq!(snap.spacing, sm.grid.spacing());
    }

    #[test]
    fn density_integrates_to_energy() {
        let sm = system([3, 3, 3]);
        let s = State::random(&sm, 2);
        let density = nodal_energy_density(&sm, &s).unwrap();
        let npts = sm.grid.quad_point_count();
        let lumped = interpolate_transpose(&sm.grid, &QuadField { ncomp: 1, values: vec![1.0; npts] });
        let total: f64 = density.values.iter().zip(&lumped.values).map(|(w, m)| w * m).sum();
        let e = energy(&sm, &s).total;
        assert!((total - e).abs() <= 1e-12 * e);
    }
}
