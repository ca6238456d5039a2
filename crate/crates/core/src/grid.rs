//! Structured hexahedral box mesh with trilinear (Q1) nodal fields.
//!
//! Nodes and cells are numbered row-major over `(i, j, k)`, i.e. `k` runs
//! fastest. Every cell carries a 2×2×2 Gauss rule; fields evaluated at
//! quadrature points are stored cell by cell, point by point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GAUSS: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Local node offsets, local index `a = ax + 2 ay + 4 az`.
pub const LOCAL_NODES: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: [usize; 3],
    pub lengths: [f64; 3],
}

/// Shape functions of a cell evaluated at its eight Gauss points. All cells
/// of a uniform box grid share the same values.
#[derive(Debug, Clone)]
pub struct ReferenceCell {
    /// `values[g][a]` = N_a at Gauss point g.
    pub values: [[f64; 8]; 8],
    /// `grads[g][a]` = physical gradient of N_a at Gauss point g.
    pub grads: [[[f64; 3]; 8]; 8],
    /// Reference coordinates in [0, 1]^3 of each Gauss point.
    pub points: [[f64; 3]; 8],
    /// Quadrature weight of each point (cell volume / 8).
    pub weight: f64,
}

impl Grid {
    pub fn new(n: [usize; 3], lengths: [f64; 3]) -> Result<Self> {
        if n.iter().any(|&c| c < 2) {
            return Err(Error::InvalidGrid(format!("need at least 2 cells per axis, got {n:?}")));
        }
        if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidGrid(format!("box lengths must be positive, got {lengths:?}")));
        }
        Ok(Self { n, lengths })
    }

    /// Cube `[0, 1]^3` with `n` cells per axis.
    pub fn unit_cube(n: usize) -> Result<Self> {
        Self::new([n; 3], [1.0; 3])
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            self.lengths[0] / self.n[0] as f64,
            self.lengths[1] / self.n[1] as f64,
            self.lengths[2] / self.n[2] as f64,
        ]
    }

    pub fn nodes_per_axis(&self) -> [usize; 3] {
        [self.n[0] + 1, self.n[1] + 1, self.n[2] + 1]
    }

    pub fn node_count(&self) -> usize {
        let m = self.nodes_per_axis();
        m[0] * m[1] * m[2]
    }

    pub fn cell_count(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn quad_point_count(&self) -> usize {
        8 * self.cell_count()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        let m = self.nodes_per_axis();
        (i * m[1] + j) * m[2] + k
    }

    pub fn node_ijk(&self, node: usize) -> [usize; 3] {
        let m = self.nodes_per_axis();
        [node / (m[1] * m[2]), (node / m[2]) % m[1], node % m[2]]
    }

    pub fn node_coords(&self, node: usize) -> [f64; 3] {
        let ijk = self.node_ijk(node);
        let h = self.spacing();
        [ijk[0] as f64 * h[0], ijk[1] as f64 * h[1], ijk[2] as f64 * h[2]]
    }

    /// For each axis, whether the node sits on the low or high face.
    pub fn boundary_axes(&self, node: usize) -> [bool; 3] {
        let ijk = self.node_ijk(node);
        [0, 1, 2].map(|a| ijk[a] == 0 || ijk[a] == self.n[a])
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_axes(node).iter().any(|&b| b)
    }

    pub fn cell_ijk(&self, cell: usize) -> [usize; 3] {
        [cell / (self.n[1] * self.n[2]), (cell / self.n[2]) % self.n[1], cell % self.n[2]]
    }

    pub fn cell_nodes(&self, cell: usize) -> [usize; 8] {
        let [ci, cj, ck] = self.cell_ijk(cell);
        LOCAL_NODES.map(|o| self.node_index(ci + o[0], cj + o[1], ck + o[2]))
    }

    /// Physical coordinates of Gauss point `g` of `cell`.
    pub fn quad_point_coords(&self, reference: &ReferenceCell, cell: usize, g: usize) -> [f64; 3] {
        let ijk = self.cell_ijk(cell);
        let h = self.spacing();
        [0, 1, 2].map(|a| (ijk[a] as f64 + reference.points[g][a]) * h[a])
    }

    /// Whether `coarse` nodes coincide with nodes of `self` (each axis count divides).
    pub fn refines(&self, coarse: &Grid) -> bool {
        (0..3).all(|a| self.n[a] % coarse.n[a] == 0 && (self.lengths[a] - coarse.lengths[a]).abs() <= 1e-12 * self.lengths[a])
    }

    pub fn reference_cell(&self) -> ReferenceCell {
        let h = self.spacing();
        let xi = [-GAUSS, GAUSS];
        let mut values = [[0.0; 8]; 8];
        let mut grads = [[[0.0; 3]; 8]; 8];
        let mut points = [[0.0; 3]; 8];
        for g in 0..8 {
            let gp = LOCAL_NODES[g].map(|o| xi[o]);
            points[g] = gp.map(|x| 0.5 * (1.0 + x));
            for a in 0..8 {
                let s = LOCAL_NODES[a].map(|o| if o == 0 { -1.0 } else { 1.0 });
                let f = [0, 1, 2].map(|d| 0.5 * (1.0 + s[d] * gp[d]));
                values[g][a] = f[0] * f[1] * f[2];
                for d in 0..3 {
                    let mut dv = 0.5 * s[d] * 2.0 / h[d];
                    for e in 0..3 {
                        if e != d {
                            dv *= f[e];
                        }
                    }
                    grads[g][a][d] = dv;
                }
            }
        }
        ReferenceCell {
            values,
            grads,
            points,
            weight: h[0] * h[1] * h[2] / 8.0,
        }
    }
}

/// `build_grid` entry point: validated grid with a 2×2×2 Gauss rule per cell.
pub fn build_grid(n: [usize; 3], lengths: [f64; 3]) -> Result<Grid> {
    Grid::new(n, lengths)
}

/// Nodal field with `ncomp` components per node (1 scalar, 3 vector, 9 tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub ncomp: usize,
    pub values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(grid: &Grid, ncomp: usize) -> Self {
        Self { ncomp, values: vec![0.0; grid.node_count() * ncomp] }
    }

    pub fn scalar(grid: &Grid) -> Self {
        Self::zeros(grid, 1)
    }

    pub fn vector(grid: &Grid) -> Self {
        Self::zeros(grid, 3)
    }

    pub fn tensor(grid: &Grid) -> Self {
        Self::zeros(grid, 9)
    }

    pub fn from_fn(grid: &Grid, ncomp: usize, f: impl Fn([f64; 3], usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.node_count() * ncomp);
        for node in 0..grid.node_count() {
            let x = grid.node_coords(node);
            for c in 0..ncomp {
                values.push(f(x, c));
            }
        }
        Self { ncomp, values }
    }

    pub fn random(grid: &Grid, ncomp: usize, rng: &mut impl Rng) -> Self {
        let values = (0..grid.node_count() * ncomp).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { ncomp, values }
    }

    pub fn node_count(&self) -> usize {
        self.values.len() / self.ncomp
    }

    pub fn node(&self, node: usize) -> &[f64] {
        &self.values[node * self.ncomp..(node + 1) * self.ncomp]
    }

    pub fn node_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.values[node * self.ncomp..(node + 1) * self.ncomp]
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        let expected = grid.node_count() * self.ncomp;
        if self.values.len() != expected {
            return Err(Error::SizeMismatch { expected, got: self.values.len() });
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { ncomp: self.ncomp, values: self.values.iter().map(|v| v * s).collect() }
    }

    pub fn axpy(&mut self, a: f64, x: &NodalField) {
        for (y, x) in self.values.iter_mut().zip(&x.values) {
            *y += a * x;
        }
    }
}

/// Values at quadrature points, `ncomp` per point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadField {
    pub ncomp: usize,
    pub values: Vec<f64>,
}

impl QuadField {
    pub fn zeros(grid: &Grid, ncomp: usize) -> Self {
        Self { ncomp, values: vec![0.0; grid.quad_point_count() * ncomp] }
    }

    pub fn from_fn(grid: &Grid, ncomp: usize, f: impl Fn([f64; 3], usize) -> f64) -> Self {
        let rc = grid.reference_cell();
        let mut values = Vec::with_capacity(grid.quad_point_count() * ncomp);
        for cell in 0..grid.cell_count() {
            for g in 0..8 {
                let x = grid.quad_point_coords(&rc, cell, g);
                for c in 0..ncomp {
                    values.push(f(x, c));
                }
            }
        }
        Self { ncomp, values }
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.values[q * self.ncomp..(q + 1) * self.ncomp]
    }

    /// Applies a linear map pointwise (`out = map · value` per point).
    pub fn map_points(&self, out_ncomp: usize, f: impl Fn(&[f64], &mut [f64])) -> QuadField {
        let npts = self.values.len() / self.ncomp;
        let mut values = vec![0.0; npts * out_ncomp];
        for q in 0..npts {
            f(self.point(q), &mut values[q * out_ncomp..(q + 1) * out_ncomp]);
        }
        QuadField { ncomp: out_ncomp, values }
    }
}

fn check_ncomp(field: &NodalField, allowed: impl Fn(usize) -> bool, what: &str) -> Result<()> {
    if !allowed(field.ncomp) {
        return Err(Error::InvalidArgument(format!("{what}: unexpected component count {}", field.ncomp)));
    }
    Ok(())
}

/// Trilinear interpolation of a nodal field to quadrature points.
pub fn interpolate(grid: &Grid, field: &NodalField) -> Result<QuadField> {
    field.check(grid)?;
    let rc = grid.reference_cell();
    let nc = field.ncomp;
    let mut out = QuadField::zeros(grid, nc);
    for cell in 0..grid.cell_count() {
        let nodes = grid.cell_nodes(cell);
        for g in 0..8 {
            let dst = &mut out.values[(cell * 8 + g) * nc..(cell * 8 + g + 1) * nc];
            for (a, &node) in nodes.iter().enumerate() {
                let w = rc.values[g][a];
                for (d, s) in dst.iter_mut().zip(field.node(node)) {
                    *d += w * s;
                }
            }
        }
    }
    Ok(out)
}

/// Componentwise gradient; entry `3c + j` holds `∂_j` of component `c`.
pub fn gradient(grid: &Grid, field: &NodalField) -> Result<QuadField> {
    field.check(grid)?;
    let rc = grid.reference_cell();
    let nc = field.ncomp;
    let mut out = QuadField::zeros(grid, 3 * nc);
    for cell in 0..grid.cell_count() {
        let nodes = grid.cell_nodes(cell);
        for g in 0..8 {
            let base = (cell * 8 + g) * 3 * nc;
            for (a, &node) in nodes.iter().enumerate() {
                let dn = rc.grads[g][a];
                for (c, &s) in field.node(node).iter().enumerate() {
                    for j in 0..3 {
                        out.values[base + 3 * c + j] += dn[j] * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of a scalar field.
pub fn discrete_grad(grid: &Grid, u: &NodalField) -> Result<QuadField> {
    check_ncomp(u, |n| n == 1, "discrete_grad")?;
    gradient(grid, u)
}

/// Rowwise gradient of a vector field: row `i` is `grad v_i`.
#[allow(non_snake_case)]
pub fn discrete_Grad(grid: &Grid, v: &NodalField) -> Result<QuadField> {
    check_ncomp(v, |n| n == 3, "discrete_Grad")?;
    gradient(grid, v)
}

/// Curl of each row (groups of three components): row `i` becomes `curl P_i`.
/// Accepts vector fields (one row) and tensor fields (three rows).
#[allow(non_snake_case)]
pub fn discrete_Curl(grid: &Grid, p: &NodalField) -> Result<QuadField> {
    check_ncomp(p, |n| n % 3 == 0 && n > 0, "discrete_Curl")?;
    let g = gradient(grid, p)?;
    let rows = p.ncomp / 3;
    Ok(g.map_points(p.ncomp, |gr, out| {
        for i in 0..rows {
            // ∂_j P_im sits at 3(3i + m) + j
            let d = |m: usize, j: usize| gr[3 * (3 * i + m) + j];
            out[3 * i] = d(2, 1) - d(1, 2);
            out[3 * i + 1] = d(0, 2) - d(2, 0);
            out[3 * i + 2] = d(1, 0) - d(0, 1);
        }
    }))
}

pub fn discrete_div(grid: &Grid, v: &NodalField) -> Result<QuadField> {
    check_ncomp(v, |n| n == 3, "discrete_div")?;
    let g = gradient(grid, v)?;
    Ok(g.map_points(1, |gr, out| out[0] = gr[0] + gr[4] + gr[8]))
}

/// Gauss-weighted approximation of `∫_Ω ⟨a, b⟩ dv`.
pub fn l2_inner(grid: &Grid, a: &QuadField, b: &QuadField) -> Result<f64> {
    if a.ncomp != b.ncomp || a.values.len() != b.values.len() {
        return Err(Error::SizeMismatch { expected: a.values.len(), got: b.values.len() });
    }
    let expected = grid.quad_point_count() * a.ncomp;
    if a.values.len() != expected {
        return Err(Error::SizeMismatch { expected, got: a.values.len() });
    }
    let w = grid.reference_cell().weight;
    Ok(w * a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>())
}

/// Transpose of [`interpolate`] through `l2_inner`: `r_a = ∫ q N_a`.
pub fn interpolate_transpose(grid: &Grid, q: &QuadField) -> NodalField {
    let rc = grid.reference_cell();
    let nc = q.ncomp;
    let mut out = NodalField::zeros(grid, nc);
    for cell in 0..grid.cell_count() {
        let nodes = grid.cell_nodes(cell);
        for g in 0..8 {
            let val = q.point(cell * 8 + g);
            for (a, &node) in nodes.iter().enumerate() {
                let w = rc.weight * rc.values[g][a];
                for (d, s) in out.node_mut(node).iter_mut().zip(val) {
                    *d += w * s;
                }
            }
        }
    }
    out
}

/// Transpose of [`gradient`] through `l2_inner`: `r_{a,c} = ∫ ⟨σ_c, ∇N_a⟩`.
/// The weak divergence of a tensor field is the negative of this.
pub fn gradient_transpose(grid: &Grid, sigma: &QuadField) -> Result<NodalField> {
    if sigma.ncomp % 3 != 0 {
        return Err(Error::InvalidArgument("gradient_transpose expects 3 entries per component".into()));
    }
    let rc = grid.reference_cell();
    let nc = sigma.ncomp / 3;
    let mut out = NodalField::zeros(grid, nc);
    for cell in 0..grid.cell_count() {
        let nodes = grid.cell_nodes(cell);
        for g in 0..8 {
            let val = sigma.point(cell * 8 + g);
            for (a, &node) in nodes.iter().enumerate() {
                let dn = rc.grads[g][a];
                let dst = out.node_mut(node);
                for c in 0..nc {
                    dst[c] += rc.weight * (val[3 * c] * dn[0] + val[3 * c + 1] * dn[1] + val[3 * c + 2] * dn[2]);
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`discrete_Curl`] through `l2_inner`.
#[allow(non_snake_case)]
pub fn curl_transpose(grid: &Grid, m: &QuadField) -> Result<NodalField> {
    if m.ncomp % 3 != 0 {
        return Err(Error::InvalidArgument("curl_transpose expects rows of three".into()));
    }
    let rows = m.ncomp / 3;
    // ⟨m, Curl P⟩ = Σ m_ik ε_kjl ∂_j P_il, so the gradient-slot coefficient
    // of ∂_j P_il is Σ_k m_ik ε_kjl.
    let expanded = m.map_points(3 * m.ncomp, |mv, out| {
        for i in 0..rows {
            let mi = [mv[3 * i], mv[3 * i + 1], mv[3 * i + 2]];
            for l in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for (k, mik) in mi.iter().enumerate() {
                        s += mik * levi_civita(k, j, l);
                    }
                    out[3 * (3 * i + l) + j] = s;
                }
            }
        }
    });
    gradient_transpose(grid, &expanded)
}

pub fn levi_civita(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Constraint {
    Free,
    /// Every component vanishes at boundary nodes.
    DisplacementZero,
    /// For each row of three, the components tangential to every boundary
    /// face containing the node vanish (union over faces at edges/corners).
    TangentialZero,
}

/// Free/constrained flags for each scalar degree of freedom of a layout of
/// node-interleaved blocks (e.g. `u` then `P` for the coupled problem).
#[derive(Debug, Clone)]
pub struct DofMap {
    pub blocks: Vec<(usize, Constraint)>,
    pub ncomp: usize,
    pub node_count: usize,
    free: Vec<bool>,
    full_to_free: Vec<usize>,
    free_to_full: Vec<usize>,
}

pub const CONSTRAINED: usize = usize::MAX;

impl DofMap {
    pub fn new(grid: &Grid, blocks: &[(usize, Constraint)]) -> Result<Self> {
        let ncomp: usize = blocks.iter().map(|b| b.0).sum();
        for &(nc, kind) in blocks {
            if kind == Constraint::TangentialZero && nc % 3 != 0 {
                return Err(Error::InvalidArgument("tangential constraint needs rows of three".into()));
            }
        }
        let node_count = grid.node_count();
        let mut free = vec![true; node_count * ncomp];
        for node in 0..node_count {
            let faces = grid.boundary_axes(node);
            if !faces.iter().any(|&f| f) {
                continue;
            }
            let mut offset = 0;
            for &(nc, kind) in blocks {
                for c in 0..nc {
                    let constrained = match kind {
                        Constraint::Free => false,
                        Constraint::DisplacementZero => true,
                        Constraint::TangentialZero => {
                            let d = c % 3;
                            (0..3).any(|axis| faces[axis] && axis != d)
                        }
                    };
                    if constrained {
                        free[node * ncomp + offset + c] = false;
                    }
                }
                offset += nc;
            }
        }
        let mut full_to_free = vec![CONSTRAINED; free.len()];
        let mut free_to_full = Vec::new();
        for (i, &f) in free.iter().enumerate() {
            if f {
                full_to_free[i] = free_to_full.len();
                free_to_full.push(i);
            }
        }
        Ok(Self {
            blocks: blocks.to_vec(),
            ncomp,
            node_count,
            free,
            full_to_free,
            free_to_full,
        })
    }

    /// `(u, P)` with `u = 0` and `P_i × n = 0` on the boundary.
    pub fn coupled(grid: &Grid) -> Self {
        Self::new(grid, &[(3, Constraint::DisplacementZero), (9, Constraint::TangentialZero)]).expect("static layout")
    }

    pub fn scalar_dirichlet(grid: &Grid) -> Self {
        Self::new(grid, &[(1, Constraint::DisplacementZero)]).expect("static layout")
    }

    pub fn vector_dirichlet(grid: &Grid) -> Self {
        Self::new(grid, &[(3, Constraint::DisplacementZero)]).expect("static layout")
    }

    pub fn vector_tangential(grid: &Grid) -> Self {
        Self::new(grid, &[(3, Constraint::TangentialZero)]).expect("static layout")
    }

    pub fn tensor_tangential(grid: &Grid) -> Self {
        Self::new(grid, &[(9, Constraint::TangentialZero)]).expect("static layout")
    }

    pub fn free_count(&self) -> usize {
        self.free_to_full.len()
    }

    pub fn full_count(&self) -> usize {
        self.free.len()
    }

    pub fn is_free(&self, full: usize) -> bool {
        self.free[full]
    }

    pub fn free_index(&self, full: usize) -> Option<usize> {
        let r = self.full_to_free[full];
        (r != CONSTRAINED).then_some(r)
    }

    pub fn free_to_full(&self) -> &[usize] {
        &self.free_to_full
    }

    /// Restriction of a full nodal vector to the free dofs.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.free_to_full.iter().map(|&i| full[i]).collect()
    }

    /// Extension by zero of a free-dof vector.
    pub fn scatter(&self, reduced: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.free.len()];
        for (r, &i) in self.free_to_full.iter().enumerate() {
            out[i] = reduced[r];
        }
        out
    }
}

/// Zeroes the constrained entries of `field`; free entries are untouched.
pub fn apply_bc(dofmap: &DofMap, field: &NodalField) -> Result<NodalField> {
    if field.ncomp != dofmap.ncomp || field.values.len() != dofmap.full_count() {
        return Err(Error::SizeMismatch { expected: dofmap.full_count(), got: field.values.len() });
    }
    let values = field
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| if dofmap.is_free(i) { v } else { 0.0 })
        .collect();
    Ok(NodalField { ncomp: field.ncomp, values })
}

/// Splits a node-interleaved field into consecutive blocks of components.
pub fn split_blocks(field: &NodalField, sizes: &[usize]) -> Vec<NodalField> {
    let total: usize = sizes.iter().sum();
    assert_eq!(total, field.ncomp);
    let nodes = field.node_count();
    let mut out: Vec<NodalField> = sizes
        .iter()
        .map(|&nc| NodalField { ncomp: nc, values: Vec::with_capacity(nodes * nc) })
        .collect();
    for node in 0..nodes {
        let vals = field.node(node);
        let mut off = 0;
        for (b, &nc) in sizes.iter().enumerate() {
            out[b].values.extend_from_slice(&vals[off..off + nc]);
            off += nc;
        }
    }
    out
}

/// Interleaves fields of equal node count into one field.
pub fn join_blocks(fields: &[&NodalField]) -> NodalField {
    let nodes = fields[0].node_count();
    let ncomp: usize = fields.iter().map(|f| f.ncomp).sum();
    let mut values = Vec::with_capacity(nodes * ncomp);
    for node in 0..nodes {
        for f in fields {
            values.extend_from_slice(f.node(node));
        }
    }
    NodalField { ncomp, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn build_grid_examples() {
        assert_eq!(build_grid([2, 2, 2], [1.0; 3]).unwrap().node_count(), 27);
        let g = build_grid([4, 2, 2], [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.node_count(), 45);
        assert_eq!(g.spacing(), [0.5, 0.5, 0.5]);
        assert!(build_grid([1, 2, 2], [1.0; 3]).is_err());
        assert!(build_grid([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let g = Grid::new([3, 2, 4], [1.0, 0.7, 1.3]).unwrap();
        let u = NodalField::from_fn(&g, 1, |_, _| 4.2);
        let gr = discrete_grad(&g, &u).unwrap();
        assert!(gr.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn curl_of_row_shear() {
        // P_1 = (x2, 0, 0): curl P_1 = (0, 0, -1)
        let g = Grid::new([3, 3, 2], [1.0, 2.0, 1.0]).unwrap();
        let p = NodalField::from_fn(&g, 9, |x, c| if c == 0 { x[1] } else { 0.0 });
        let curl = discrete_Curl(&g, &p).unwrap();
        for q in 0..g.quad_point_count() {
            let v = curl.point(q);
            let expected = [0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
            for (a, b) in v.iter().zip(expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curl_of_gradient_vanishes() {
        let g = Grid::new([3, 4, 2], [1.0, 1.5, 0.8]).unwrap();
        let w = NodalField::random(&g, 3, &mut rng());
        // P = Grad w is not a nodal field in general; instead use the
        // componentwise structure: each row of P built from a trilinear
        // potential evaluated through the gradient at quadrature points.
        let grad = discrete_Grad(&g, &w).unwrap();
        // Compute the curl of the quadrature-level gradient via the
        // identity curl(grad w_i) = 0 on each cell using nodal potentials:
        // here check with rows P_i = grad of trilinear w_i expressed nodally
        // for the linear part, which Q1 reproduces exactly.
        let lin = NodalField::from_fn(&g, 3, |x, c| [1.0, -2.0, 0.5][c] * x[0] + [0.3, 1.0, -1.0][c] * x[1] * x[2]);
        let _ = grad;
        let glin = discrete_Grad(&g, &lin).unwrap();
        // For the bilinear term x1 x2 the gradient (0, x2, x1) is itself
        // trilinear, so its nodal interpolant is exact.
        let p = NodalField::from_fn(&g, 9, |x, c| {
            let i = c / 3;
            let j = c % 3;
            let a = [1.0, -2.0, 0.5][i];
            let b = [0.3, 1.0, -1.0][i];
            match j {
                0 => a,
                1 => b * x[2],
                _ => b * x[1],
            }
        });
        let curl = discrete_Curl(&g, &p).unwrap();
        assert!(curl.values.iter().all(|v| v.abs() < 1e-12));
        // and the nodal P really is Grad lin at the Gauss points
        let ip = interpolate(&g, &p).unwrap();
        for (a, b) in ip.values.iter().zip(&glin.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_inner_examples() {
        let g = Grid::unit_cube(3).unwrap();
        let one = QuadField::from_fn(&g, 1, |_, _| 1.0);
        assert!((l2_inner(&g, &one, &one).unwrap() - 1.0).abs() < 1e-14);
        let x1 = QuadField::from_fn(&g, 1, |x, _| x[0]);
        assert!((l2_inner(&g, &x1, &one).unwrap() - 0.5).abs() < 1e-14);
        let a = QuadField::from_fn(&g, 3, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let b = QuadField::from_fn(&g, 3, |_, c| if c == 1 { 1.0 } else { 0.0 });
        assert_eq!(l2_inner(&g, &a, &b).unwrap(), 0.0);
        let bad = QuadField::zeros(&g, 2);
        assert!(l2_inner(&g, &one, &bad).is_err());
    }

    #[test]
    fn quadrature_exact_for_cubic_products() {
        // ∫ x^3 y^2 z dv over [0,2]x[0,1]x[0,3] = (16/4)(1/3)(9/2) = 6
        let g = Grid::new([2, 3, 4], [2.0, 1.0, 3.0]).unwrap();
        let f = QuadField::from_fn(&g, 1, |x, _| x[0].powi(3) * x[1].powi(2) * x[2]);
        let one = QuadField::from_fn(&g, 1, |_, _| 1.0);
        assert!((l2_inner(&g, &f, &one).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_rejected() {
        let g = Grid::unit_cube(2).unwrap();
        let wrong = NodalField { ncomp: 3, values: vec![0.0; 10] };
        assert!(discrete_Grad(&g, &wrong).is_err());
        let scalar = NodalField::scalar(&g);
        assert!(discrete_Grad(&g, &scalar).is_err());
    }

    #[test]
    fn dirichlet_mask_on_constant_field() {
        let g = Grid::unit_cube(3).unwrap();
        let dm = DofMap::vector_dirichlet(&g);
        let u = NodalField::from_fn(&g, 3, |_, _| 2.0);
        let masked = apply_bc(&dm, &u).unwrap();
        for node in 0..g.node_count() {
            let expected = if g.is_boundary(node) { 0.0 } else { 2.0 };
            assert!(masked.node(node).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn tangential_mask_keeps_normal_component() {
        let g = Grid::unit_cube(3).unwrap();
        let dm = DofMap::tensor_tangential(&g);
        // row P_3 = e3 everywhere
        let p = NodalField::from_fn(&g, 9, |_, c| if c == 8 { 1.0 } else { 0.0 });
        let masked = apply_bc(&dm, &p).unwrap();
        // a node in the interior of the face z = 0
        let node = g.node_index(1, 2, 0);
        assert_eq!(masked.node(node)[8], 1.0);
        // on the face x = 0 the e3 component of every row is tangential
        let node = g.node_index(0, 1, 2);
        assert_eq!(masked.node(node)[8], 0.0);
        // an edge shared by z = 0 and x = 0: everything vanishes
        let edge = g.node_index(0, 1, 0);
        assert!(masked.node(edge).iter().all(|&v| v == 0.0));
        // face z = 0: tangential components (P_3)_1,(P_3)_2 are zero, normal kept
        let mut dense = NodalField::from_fn(&g, 9, |_, _| 1.0);
        dense = apply_bc(&dm, &dense).unwrap();
        let face = dense.node(g.node_index(1, 1, 0));
        assert_eq!(&face[6..9], &[0.0, 0.0, 1.0]);
        assert_eq!(&face[0..3], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn bc_projection_idempotent() {
        let g = Grid::new([3, 2, 2], [1.0; 3]).unwrap();
        let dm = DofMap::coupled(&g);
        let f = NodalField::random(&g, 12, &mut rng());
        let once = apply_bc(&dm, &f).unwrap();
        let twice = apply_bc(&dm, &once).unwrap();
        assert_eq!(once, twice);
        for (i, (&a, &b)) in f.values.iter().zip(&once.values).enumerate() {
            if dm.is_free(i) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn gather_scatter_round_trip() {
        let g = Grid::unit_cube(3).unwrap();
        let dm = DofMap::coupled(&g);
        let f = apply_bc(&dm, &NodalField::random(&g, 12, &mut rng())).unwrap();
        assert_eq!(dm.scatter(&dm.gather(&f.values)), f.values);
    }

    #[test]
    fn divergence_adjointness() {
        let g = Grid::new([3, 3, 2], [1.0, 1.2, 0.9]).unwrap();
        let dm = DofMap::vector_dirichlet(&g);
        let mut r = rng();
        let v = apply_bc(&dm, &NodalField::random(&g, 3, &mut r)).unwrap();
        let sigma = QuadField::from_fn(&g, 9, |x, c| (c as f64 + 1.0) * x[0] * x[1] - x[2] * c as f64);
        let weak = gradient_transpose(&g, &sigma).unwrap();
        // discrete Div σ = -weak (restricted to free dofs)
        let div_dot_v: f64 = -weak.values.iter().zip(&v.values).map(|(a, b)| a * b).sum::<f64>();
        let rhs = l2_inner(&g, &sigma, &discrete_Grad(&g, &v).unwrap()).unwrap();
        assert!((div_dot_v + rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn curl_adjointness() {
        let g = Grid::new([2, 3, 3], [0.8, 1.0, 1.1]).unwrap();
        let dm = DofMap::tensor_tangential(&g);
        let mut r = rng();
        let q = apply_bc(&dm, &NodalField::random(&g, 9, &mut r)).unwrap();
        let p = apply_bc(&dm, &NodalField::random(&g, 9, &mut r)).unwrap();
        let m = discrete_Curl(&g, &p).unwrap();
        let ct = curl_transpose(&g, &m).unwrap();
        let lhs: f64 = ct.values.iter().zip(&q.values).map(|(a, b)| a * b).sum();
        let rhs = l2_inner(&g, &m, &discrete_Curl(&g, &q).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn blocks_split_and_join() {
        let g = Grid::unit_cube(2).unwrap();
        let f = NodalField::random(&g, 12, &mut rng());
        let parts = split_blocks(&f, &[3, 9]);
        assert_eq!(join_blocks(&[&parts[0], &parts[1]]), f);
    }
}
