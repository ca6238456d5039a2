//! Galerkin assembly of the quadratic forms of the theory.
//!
//! Every form is `∫ ⟨W B q, B q⟩` where `B` is a linear combination of
//! nodal channels (values, gradients, curls, divergence) and `W` a constant
//! weight matrix. On a uniform box all cells share one element matrix,
//! which is scattered row by row into a CSR matrix over the free dofs.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DofMap, Grid, ReferenceCell};
use crate::sparse::{self, CgOptions, CsrMatrix};
use crate::tensor::{validate_for_variant, Mat9, Material, ModelVariant};

/// Component offsets of the coupled `(u, P)` layout.
pub const U_OFFSET: usize = 0;
pub const P_OFFSET: usize = 3;
pub const COUPLED_NCOMP: usize = 12;

/// A linear map from the nodal components of one cell to values at a Gauss point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// `count` components starting at `offset`.
    Value { offset: usize, count: usize },
    /// Row `3c + j` is `∂_j` of component `offset + c`.
    Grad { offset: usize, count: usize },
    /// Row `3i + k` is `(curl P_i)_k` for the rows `P_i` stored from `offset`.
    Curl { offset: usize, rows: usize },
    /// Divergence of the three components at `offset`.
    Div { offset: usize },
}

impl Channel {
    pub fn rows(&self) -> usize {
        match *self {
            Channel::Value { count, .. } => count,
            Channel::Grad { count, .. } => 3 * count,
            Channel::Curl { rows, .. } => 3 * rows,
            Channel::Div { .. } => 1,
        }
    }

    fn max_component(&self) -> usize {
        match *self {
            Channel::Value { offset, count } | Channel::Grad { offset, count } => offset + count,
            Channel::Curl { offset, rows } => offset + 3 * rows,
            Channel::Div { offset } => offset + 3,
        }
    }

    /// Dense `rows × 8·ncomp` matrix at Gauss point `g`.
    pub fn matrix(&self, rc: &ReferenceCell, g: usize, ncomp: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.rows(), 8 * ncomp);
        for a in 0..8 {
            let n = rc.values[g][a];
            let dn = rc.grads[g][a];
            let col = |c: usize| a * ncomp + c;
            match *self {
                Channel::Value { offset, count } => {
                    for c in 0..count {
                        b[(c, col(offset + c))] = n;
                    }
                }
                Channel::Grad { offset, count } => {
                    for c in 0..count {
                        for j in 0..3 {
                            b[(3 * c + j, col(offset + c))] = dn[j];
                        }
                    }
                }
                Channel::Curl { offset, rows } => {
                    for i in 0..rows {
                        let base = offset + 3 * i;
                        // (curl r)_0 = ∂_1 r_2 − ∂_2 r_1, cyclic
                        b[(3 * i, col(base + 2))] += dn[1];
                        b[(3 * i, col(base + 1))] -= dn[2];
                        b[(3 * i + 1, col(base))] += dn[2];
                        b[(3 * i + 1, col(base + 2))] -= dn[0];
                        b[(3 * i + 2, col(base + 1))] += dn[0];
                        b[(3 * i + 2, col(base))] -= dn[1];
                    }
                }
                Channel::Div { offset } => {
                    for j in 0..3 {
                        b[(0, col(offset + j))] = dn[j];
                    }
                }
            }
        }
        b
    }
}

/// `∫ ⟨W B q, B q⟩` with `B = Σ coeff · channel`.
#[derive(Debug, Clone)]
pub struct Term {
    pub parts: Vec<(f64, Channel)>,
    pub weight: DMatrix<f64>,
}

impl Term {
    pub fn new(parts: Vec<(f64, Channel)>, weight: DMatrix<f64>) -> Self {
        Self { parts, weight }
    }

    /// Unweighted Gram term `∫ |B q|²`.
    pub fn gram(channel: Channel) -> Self {
        let r = channel.rows();
        Self::new(vec![(1.0, channel)], DMatrix::identity(r, r))
    }

    /// `∫ |Π B q|²` for a 9-row channel and an orthogonal projector `Π`.
    pub fn projected(channel: Channel, proj: Mat9) -> Self {
        Self::new(vec![(1.0, channel)], to_dmatrix(&proj))
    }

    fn check(&self, ncomp: usize) -> Result<()> {
        let rows = self.weight.nrows();
        if self.weight.ncols() != rows {
            return Err(Error::InvalidArgument("weight matrix must be square".into()));
        }
        for (_, ch) in &self.parts {
            if ch.rows() != rows {
                return Err(Error::InvalidArgument(format!("channel {ch:?} has {} rows, weight has {rows}", ch.rows())));
            }
            if ch.max_component() > ncomp {
                return Err(Error::InvalidArgument(format!("channel {ch:?} exceeds {ncomp} components")));
            }
        }
        Ok(())
    }

    fn b_matrix(&self, rc: &ReferenceCell, g: usize, ncomp: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.weight.nrows(), 8 * ncomp);
        for (coeff, ch) in &self.parts {
            b += ch.matrix(rc, g, ncomp) * *coeff;
        }
        b
    }
}

pub fn to_dmatrix(m: &Mat9) -> DMatrix<f64> {
    DMatrix::from_fn(9, 9, |r, c| m[(r, c)])
}

/// `Πᵀ T Π`.
pub(crate) fn sandwich(t: &Mat9, p: &Mat9) -> DMatrix<f64> {
    to_dmatrix(&(p.transpose() * t * p))
}

/// Element matrix `Σ_g w_g Σ_terms Bᵀ W B` on the local `8·ncomp` dofs.
pub fn element_matrix(grid: &Grid, ncomp: usize, terms: &[Term]) -> Result<DMatrix<f64>> {
    for t in terms {
        t.check(ncomp)?;
    }
    let rc = grid.reference_cell();
    let mut ke = DMatrix::zeros(8 * ncomp, 8 * ncomp);
    for g in 0..8 {
        for t in terms {
            let b = t.b_matrix(&rc, g, ncomp);
            ke += b.transpose() * &t.weight * &b * rc.weight;
        }
    }
    Ok((&ke + ke.transpose()) * 0.5)
}

/// Which component pairs an element matrix couples.
pub fn coupling_mask(ke: &DMatrix<f64>, ncomp: usize) -> Vec<Vec<bool>> {
    let mut mask = vec![vec![false; ncomp]; ncomp];
    for r in 0..ke.nrows() {
        for c in 0..ke.ncols() {
            if ke[(r, c)] != 0.0 {
                mask[r % ncomp][c % ncomp] = true;
            }
        }
    }
    mask
}

fn union_mask(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| *p || *q).collect()).collect()
}

/// Row pattern over free dofs: neighbouring nodes (up to 27) times the
/// components coupled by `mask`.
fn pattern(grid: &Grid, dofmap: &DofMap, mask: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let nc = dofmap.ncomp;
    let m = grid.nodes_per_axis();
    dofmap
        .free_to_full()
        .par_iter()
        .map(|&full| {
            let node = full / nc;
            let c = full % nc;
            let [i, j, k] = grid.node_ijk(node);
            let mut cols = Vec::with_capacity(27 * nc);
            for ii in i.saturating_sub(1)..=(i + 1).min(m[0] - 1) {
                for jj in j.saturating_sub(1)..=(j + 1).min(m[1] - 1) {
                    for kk in k.saturating_sub(1)..=(k + 1).min(m[2] - 1) {
                        let nb = grid.node_index(ii, jj, kk);
                        for c2 in 0..nc {
                            if mask[c][c2] {
                                if let Some(f) = dofmap.free_index(nb * nc + c2) {
                                    cols.push(f);
                                }
                            }
                        }
                    }
                }
            }
            cols
        })
        .collect()
}

/// Scatters one element matrix into every cell, keeping only free dofs.
pub fn assemble_uniform(grid: &Grid, dofmap: &DofMap, ke: &DMatrix<f64>, mask: &[Vec<bool>]) -> CsrMatrix {
    let nc = dofmap.ncomp;
    let rows = pattern(grid, dofmap, mask);
    let mut mat = CsrMatrix::from_pattern(dofmap.free_count(), &rows);
    let free_to_full = dofmap.free_to_full();
    mat.rows_mut().into_par_iter().enumerate().for_each(|(r, (cols, vals))| {
        let full = free_to_full[r];
        let node = full / nc;
        let c = full % nc;
        let ijk = grid.node_ijk(node);
        for (a, off) in crate::grid::LOCAL_NODES.iter().enumerate() {
            if (0..3).any(|d| ijk[d] < off[d] || ijk[d] - off[d] >= grid.n[d]) {
                continue;
            }
            let cell = ((ijk[0] - off[0]) * grid.n[1] + (ijk[1] - off[1])) * grid.n[2] + (ijk[2] - off[2]);
            let nodes = grid.cell_nodes(cell);
            for (b, &nb) in nodes.iter().enumerate() {
                for c2 in 0..nc {
                    let v = ke[(a * nc + c, b * nc + c2)];
                    if v == 0.0 {
                        continue;
                    }
                    if let Some(f) = dofmap.free_index(nb * nc + c2) {
                        let pos = cols.binary_search(&f).expect("column in pattern");
                        vals[pos] += v;
                    }
                }
            }
        }
    });
    mat
}

/// Assembled form over the free dofs of `dofmap`.
pub fn assemble_form(grid: &Grid, dofmap: &DofMap, terms: &[Term]) -> Result<CsrMatrix> {
    let ke = element_matrix(grid, dofmap.ncomp, terms)?;
    let mask = coupling_mask(&ke, dofmap.ncomp);
    Ok(assemble_uniform(grid, dofmap, &ke, &mask))
}

/// Consistent mass (`L²` Gram) matrix of all components.
pub fn mass_matrix(grid: &Grid, dofmap: &DofMap) -> Result<CsrMatrix> {
    assemble_form(grid, dofmap, &[Term::gram(Channel::Value { offset: 0, count: dofmap.ncomp })])
}

/// Sparse map from free dofs to channel values at every quadrature point
/// (rows ordered cell, Gauss point, channel row).
pub fn discrete_operator(grid: &Grid, dofmap: &DofMap, channel: Channel) -> Result<CsrMatrix> {
    let nc = dofmap.ncomp;
    let term = Term::gram(channel);
    term.check(nc)?;
    let rc = grid.reference_cell();
    let rows = channel.rows();
    let bs: Vec<DMatrix<f64>> = (0..8).map(|g| channel.matrix(&rc, g, nc)).collect();
    let mut triplets = Vec::new();
    for cell in 0..grid.cell_count() {
        let nodes = grid.cell_nodes(cell);
        for (g, b) in bs.iter().enumerate() {
            let row0 = (cell * 8 + g) * rows;
            for r in 0..rows {
                for (a, &node) in nodes.iter().enumerate() {
                    for c in 0..nc {
                        let v = b[(r, a * nc + c)];
                        if v != 0.0 {
                            if let Some(f) = dofmap.free_index(node * nc + c) {
                                triplets.push((row0 + r, f, v));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(grid.quad_point_count() * rows, dofmap.free_count(), &triplets))
}

/// The three energy terms: elastic `C` on `∇u − P`, micro-strain `H` on the
/// variant's projection of `P`, curvature `L_c` on the projection of `Curl P`.
pub fn energy_terms(material: &Material, variant: ModelVariant) -> [Term; 3] {
    let (micro, curv) = variant.channels();
    let grad_u = Channel::Grad { offset: U_OFFSET, count: 3 };
    let p = Channel::Value { offset: P_OFFSET, count: 9 };
    let curl = Channel::Curl { offset: P_OFFSET, rows: 3 };
    [
        Term::new(vec![(1.0, grad_u), (-1.0, p)], to_dmatrix(&material.c.coefficients)),
        Term::new(vec![(1.0, p)], sandwich(&material.h.coefficients, &micro.projector())),
        Term::new(vec![(1.0, curl)], sandwich(&material.l.coefficients, &curv.projector())),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassKind {
    #[default]
    Consistent,
    /// Row-sum lumping; cheap explicit steps, exact ledger identities lost at O(h²).
    Lumped,
}

/// Assembled operators of the coupled `(u, P)` problem over free dofs.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub grid: Grid,
    pub dofmap: DofMap,
    pub material: Material,
    pub variant: ModelVariant,
    pub mass_kind: MassKind,
    pub elastic: CsrMatrix,
    pub micro: CsrMatrix,
    pub curvature: CsrMatrix,
    /// `K = elastic + micro + curvature`.
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
    mass_inv_diag: Vec<f64>,
}

/// Potential energy split `½ qᵀ K_i q`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PotentialParts {
    pub elastic: f64,
    pub microstrain: f64,
    pub dislocation: f64,
}

impl PotentialParts {
    pub fn total(&self) -> f64 {
        self.elastic + self.microstrain + self.dislocation
    }
}

pub(crate) fn check_material(material: &Material, variant: ModelVariant) -> Result<()> {
    if let Some(m) = &material.isotropic {
        let report = validate_for_variant(m, variant);
        if !report.passed {
            let failed: Vec<_> = report.failures().map(|c| c.condition).collect();
            return Err(Error::InvalidMaterial(failed.join(", ")));
        }
    } else {
        let b = material.bounds(variant);
        if !(b.c_min > 0.0 && b.h_min > 0.0 && b.l_min > 0.0) {
            return Err(Error::InvalidMaterial(format!("tensors not positive definite on the {variant} channels")));
        }
    }
    Ok(())
}

/// Stiffness and mass of the coupled problem with `u = 0` and `P_i × n = 0`
/// on the boundary.
pub fn assemble_stiffness(grid: &Grid, dofmap: &DofMap, material: &Material, variant: ModelVariant) -> Result<SystemMatrices> {
    check_material(material, variant)?;
    assemble_stiffness_unchecked(grid, dofmap, material, variant)
}

/// Same as [`assemble_stiffness`] without positivity checks, for degenerate experiments.
pub fn assemble_stiffness_unchecked(grid: &Grid, dofmap: &DofMap, material: &Material, variant: ModelVariant) -> Result<SystemMatrices> {
    if dofmap.ncomp != COUPLED_NCOMP {
        return Err(Error::InvalidArgument(format!("coupled layout needs 12 components, got {}", dofmap.ncomp)));
    }
    let [t_el, t_mi, t_cu] = energy_terms(material, variant);
    let ke_el = element_matrix(grid, COUPLED_NCOMP, &[t_el])?;
    let ke_mi = element_matrix(grid, COUPLED_NCOMP, &[t_mi])?;
    let ke_cu = element_matrix(grid, COUPLED_NCOMP, &[t_cu])?;
    let ke_m = element_matrix(grid, COUPLED_NCOMP, &[Term::gram(Channel::Value { offset: 0, count: COUPLED_NCOMP })])?;
    let mut mask = coupling_mask(&ke_m, COUPLED_NCOMP);
    for ke in [&ke_el, &ke_mi, &ke_cu] {
        mask = union_mask(&mask, &coupling_mask(ke, COUPLED_NCOMP));
    }
    let elastic = assemble_uniform(grid, dofmap, &ke_el, &mask);
    let micro = assemble_uniform(grid, dofmap, &ke_mi, &mask);
    let curvature = assemble_uniform(grid, dofmap, &ke_cu, &mask);
    let mass = assemble_uniform(grid, dofmap, &ke_m, &mask);
    let stiffness = CsrMatrix::linear_combination(&[(1.0, &elastic), (1.0, &micro), (1.0, &curvature)])?;
    let mass_inv_diag = sparse::jacobi(&mass);
    Ok(SystemMatrices {
        grid: grid.clone(),
        dofmap: dofmap.clone(),
        material: material.clone(),
        variant,
        mass_kind: MassKind::Consistent,
        elastic,
        micro,
        curvature,
        stiffness,
        mass,
        mass_inv_diag,
    })
}

/// `R = M + K`, symmetric positive definite for valid materials.
pub fn assemble_resolvent(grid: &Grid, dofmap: &DofMap, material: &Material, variant: ModelVariant) -> Result<CsrMatrix> {
    assemble_stiffness(grid, dofmap, material, variant)?.resolvent()
}

impl SystemMatrices {
    /// Default setup: coupled boundary conditions on `grid`.
    pub fn new(grid: &Grid, material: &Material, variant: ModelVariant) -> Result<Self> {
        assemble_stiffness(grid, &DofMap::coupled(grid), material, variant)
    }

    pub fn with_mass_kind(mut self, kind: MassKind) -> Self {
        if kind != self.mass_kind {
            // switching back needs the consistent matrix again
            let consistent = if self.mass_kind == MassKind::Lumped {
                mass_matrix(&self.grid, &self.dofmap).expect("valid layout")
            } else {
                self.mass.clone()
            };
            self.mass = match kind {
                MassKind::Consistent => consistent,
                MassKind::Lumped => consistent.lumped(),
            };
            if !self.mass.same_pattern(&self.stiffness) {
                let zero = CsrMatrix::linear_combination(&[(0.0, &self.stiffness)]).expect("nonempty");
                self.mass = CsrMatrix::linear_combination(&[(1.0, &self.mass), (1.0, &zero)]).expect("same shape");
            }
            self.mass_inv_diag = sparse::jacobi(&self.mass);
            self.mass_kind = kind;
        }
        self
    }

    /// Number of free dofs of `q = (u, P)`.
    pub fn dof_count(&self) -> usize {
        self.dofmap.free_count()
    }

    pub fn resolvent(&self) -> Result<CsrMatrix> {
        CsrMatrix::linear_combination(&[(1.0, &self.mass), (1.0, &self.stiffness)])
    }

    pub fn potential_parts(&self, q: &[f64]) -> PotentialParts {
        PotentialParts {
            elastic: 0.5 * self.elastic.quad_form(q),
            microstrain: 0.5 * self.micro.quad_form(q),
            dislocation: 0.5 * self.curvature.quad_form(q),
        }
    }

    /// `M⁻¹ r` by Jacobi-CG to relative residual `1e−12` (exact for lumped mass).
    pub fn mass_solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        if self.mass_kind == MassKind::Lumped {
            return Ok(r.iter().zip(&self.mass_inv_diag).map(|(r, d)| r * d).collect());
        }
        let mut x: Vec<f64> = r.iter().zip(&self.mass_inv_diag).map(|(r, d)| r * d).collect();
        sparse::conjugate_gradient(&self.mass, r, &mut x, Some(&self.mass_inv_diag), CgOptions::with_tol(1e-12))?;
        Ok(x)
    }

    /// Splits a first-order vector `w = (q, p)`.
    pub fn split<'a>(&self, w: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        let n = self.dof_count();
        if w.len() != 2 * n {
            return Err(Error::SizeMismatch { expected: 2 * n, got: w.len() });
        }
        Ok(w.split_at(n))
    }

    /// MatrixMarket dumps of `K` and `M` into `dir`.
    pub fn write_matrix_market(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, m) in [("stiffness.mtx", &self.stiffness), ("mass.mtx", &self.mass)] {
            let f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            m.write_matrix_market(f)?;
        }
        Ok(())
    }
}

/// `A w` for the first-order form `w = (q, p)`: `(p, −M⁻¹ K q)`.
pub fn generator_apply(sm: &SystemMatrices, w: &[f64]) -> Result<Vec<f64>> {
    let (q, p) = sm.split(w)?;
    let kq = sm.stiffness.mul(q);
    let acc = sm.mass_solve(&kq)?;
    let mut out = Vec::with_capacity(w.len());
    out.extend_from_slice(p);
    out.extend(acc.into_iter().map(|a| -a));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{discrete_Curl, discrete_Grad, interpolate, l2_inner, split_blocks, NodalField, QuadField};
    use crate::tensor::{IsotropicModuli, Tensor2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_material() -> Material {
        Material::isotropic(IsotropicModuli::unit(), ModelVariant::Full).unwrap()
    }

    /// Potential energy parts by direct quadrature of the constitutive integrands.
    fn energy_oracle(sm: &SystemMatrices, q: &[f64]) -> [f64; 3] {
        let g = &sm.grid;
        let full = NodalField { ncomp: 12, values: sm.dofmap.scatter(q) };
        let parts = split_blocks(&full, &[3, 9]);
        let grad = discrete_Grad(g, &parts[0]).unwrap();
        let p = interpolate(g, &parts[1]).unwrap();
        let curl = discrete_Curl(g, &parts[1]).unwrap();
        let (micro, curv) = sm.variant.channels();
        let m = &sm.material;
        let pointwise = |f: &dyn Fn(usize) -> (Tensor2, Tensor2)| {
            let a = QuadField { ncomp: 9, values: (0..g.quad_point_count()).flat_map(|i| f(i).0.to_vec9().iter().copied().collect::<Vec<_>>()).collect() };
            let b = QuadField { ncomp: 9, values: (0..g.quad_point_count()).flat_map(|i| f(i).1.to_vec9().iter().copied().collect::<Vec<_>>()).collect() };
            0.5 * l2_inner(g, &a, &b).unwrap()
        };
        let proj = |t: &Tensor2, pm: Mat9| Tensor2::from_vec9((pm * t.to_vec9()).as_slice());
        let el = pointwise(&|i| {
            let e = Tensor2::from_vec9(grad.point(i)) - Tensor2::from_vec9(p.point(i));
            (m.c.apply(&e), e)
        });
        let mi = pointwise(&|i| {
            let x = proj(&Tensor2::from_vec9(p.point(i)), micro.projector());
            (m.h.apply(&x), x)
        });
        let cu = pointwise(&|i| {
            let x = proj(&Tensor2::from_vec9(curl.point(i)), curv.projector());
            (m.l.apply(&x), x)
        });
        [el, mi, cu]
    }

    fn random_q(sm: &SystemMatrices, seed: u64) -> Vec<f64> {
        sparse::random_vector(sm.dof_count(), seed)
    }

    #[test]
    fn symmetric_and_zero_energy_at_zero() {
        let g = Grid::unit_cube(3).unwrap();
        let sm = SystemMatrices::new(&g, &unit_material(), ModelVariant::Full).unwrap();
        assert!(sm.stiffness.asymmetry() <= 1e-12);
        assert!(sm.mass.asymmetry() <= 1e-14);
        let zero = vec![0.0; sm.dof_count()];
        assert_eq!(sm.stiffness.quad_form(&zero), 0.0);
        let r = sm.resolvent().unwrap();
        assert!(r.asymmetry() <= 1e-14);
    }

    #[test]
    fn term_by_term_energy_matches_quadrature() {
        let g = Grid::new([3, 3, 4], [1.0, 1.2, 0.8]).unwrap();
        let m = IsotropicModuli { mu_e: 1.3, lambda_e: 0.7, mu_c: 0.4, mu_h: 0.9, lambda_h: 0.2, alpha_1: 1.1, alpha_2: 0.6, alpha_3: 0.3 };
        for variant in [ModelVariant::Full, ModelVariant::DevDev] {
            let sm = SystemMatrices::new(&g, &Material::isotropic(m, variant).unwrap(), variant).unwrap();
            for seed in 0..3 {
                let q = random_q(&sm, seed);
                let parts = sm.potential_parts(&q);
                let oracle = energy_oracle(&sm, &q);
                for (a, b) in [parts.elastic, parts.microstrain, parts.dislocation].iter().zip(oracle) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
                }
                assert!(sm.stiffness.quad_form(&q) >= 0.0);
                assert!((sm.stiffness.quad_form(&q) - 2.0 * parts.total()).abs() <= 1e-12 * parts.total());
            }
        }
    }

    #[test]
    fn spherical_micro_distortion_energy() {
        // P = c·1 at interior nodes, u = 0: H-term density (2μh + 3λh)·c²·3/2
        // wherever the interpolant is the constant; compare with quadrature.
        let g = Grid::unit_cube(4).unwrap();
        let sm = SystemMatrices::new(&g, &unit_material(), ModelVariant::Full).unwrap();
        let c = 0.7;
        let full = NodalField::from_fn(&g, 12, |_, comp| if comp == 3 || comp == 7 || comp == 11 { c } else { 0.0 });
        let q = sm.dofmap.gather(&full.values);
        let parts = sm.potential_parts(&q);
        let pm = crate::grid::apply_bc(&sm.dofmap, &full).unwrap();
        let p = interpolate(&g, &split_blocks(&pm, &[3, 9])[1]).unwrap();
        // masked P stays diagonal: density ½(2μh Σ P_ii² + λh (Σ P_ii)²)
        let density = QuadField {
            ncomp: 1,
            values: (0..g.quad_point_count())
                .map(|i| {
                    let t = p.point(i);
                    let d = [t[0], t[4], t[8]];
                    0.5 * (2.0 * d.iter().map(|x| x * x).sum::<f64>() + d.iter().sum::<f64>().powi(2))
                })
                .collect(),
        };
        let one = QuadField::from_fn(&g, 1, |_, _| 1.0);
        let expected = l2_inner(&g, &density, &one).unwrap();
        assert!((parts.microstrain - expected).abs() < 1e-12);
        // where P = c·1 the density is (2μh + 3λh)·c²·3/2
        let interior = 0.5 * (2.0 * 3.0 * c * c + 9.0 * c * c);
        assert!((interior - (2.0 + 3.0) * c * c * 1.5).abs() < 1e-15);
        assert!(parts.elastic > 0.0 && parts.dislocation > 0.0);
    }

    #[test]
    fn finite_difference_hessian() {
        let sm = SystemMatrices::new(&Grid::unit_cube(3).unwrap(), &unit_material(), ModelVariant::Full).unwrap();
        let q = random_q(&sm, 11);
        let kq = sm.stiffness.mul(&q);
        let total = |x: &[f64]| energy_oracle(&sm, x).iter().sum::<f64>();
        let h = 1e-4;
        let mut max_err: f64 = 0.0;
        let scale = kq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..sm.dof_count() {
            let mut xp = q.clone();
            let mut xm = q.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (total(&xp) - total(&xm)) / (2.0 * h);
            max_err = max_err.max((fd - kq[i]).abs());
        }
        assert!(max_err <= 1e-6 * scale, "{max_err}");
    }

    #[test]
    fn stiffness_positive_definite_on_free_dofs() {
        let g = Grid::unit_cube(3).unwrap();
        let sm = SystemMatrices::new(&g, &unit_material(), ModelVariant::Full).unwrap();
        let k = sm.stiffness.to_dense();
        let eig = nalgebra::SymmetricEigen::new(k);
        let min = eig.eigenvalues.min();
        assert!(min > 0.0, "{min}");
    }

    #[test]
    fn full_minus_devdev_is_psd() {
        let g = Grid::unit_cube(3).unwrap();
        let m = IsotropicModuli::unit();
        let full = SystemMatrices::new(&g, &Material::isotropic(m, ModelVariant::Full).unwrap(), ModelVariant::Full).unwrap();
        let dev = SystemMatrices::new(&g, &Material::isotropic(m, ModelVariant::DevDev).unwrap(), ModelVariant::DevDev).unwrap();
        let kk = full.stiffness.frobenius_norm();
        for seed in 0..50 {
            let q = random_q(&full, seed);
            let d = full.stiffness.quad_form(&q) - dev.stiffness.quad_form(&q);
            assert!(d >= -1e-10 * kk, "{d}");
        }
    }

    #[test]
    fn mass_is_l2_gram() {
        let g = Grid::new([3, 2, 3], [1.0, 0.5, 1.5]).unwrap();
        let sm = SystemMatrices::new(&g, &unit_material(), ModelVariant::Full).unwrap();
        let q = random_q(&sm, 3);
        let f = NodalField { ncomp: 12, values: sm.dofmap.scatter(&q) };
        let qf = interpolate(&g, &f).unwrap();
        let oracle = l2_inner(&g, &qf, &qf).unwrap();
        assert!((sm.mass.quad_form(&q) - oracle).abs() < 1e-13 * oracle);
    }

    #[test]
    fn resolvent_smallest_eigenvalue_positive() {
        let g = Grid::unit_cube(4).unwrap();
        let r = assemble_resolvent(&g, &DofMap::coupled(&g), &unit_material(), ModelVariant::Full).unwrap();
        let id = CsrMatrix::identity(r.nrows());
        let e = sparse::smallest_generalized_eigenpair(&r, &id, sparse::EigenOptions::default()).unwrap();
        assert!(e.value > 0.0);
    }

    #[test]
    fn discrete_operator_reproduces_elastic_block() {
        let sm = SystemMatrices::new(&Grid::unit_cube(3).unwrap(), &unit_material(), ModelVariant::Full).unwrap();
        let b_grad = discrete_operator(&sm.grid, &sm.dofmap, Channel::Grad { offset: 0, count: 3 }).unwrap();
        let b_p = discrete_operator(&sm.grid, &sm.dofmap, Channel::Value { offset: 3, count: 9 }).unwrap();
        let b1 = CsrMatrix::linear_combination(&[(1.0, &b_grad), (-1.0, &b_p)]).unwrap();
        let q = random_q(&sm, 5);
        let e = b1.mul(&q);
        let w = sm.grid.reference_cell().weight;
        let c = sm.material.c.coefficients;
        let mut energy = 0.0;
        for pt in e.chunks(9) {
            let v = crate::tensor::Vec9::from_column_slice(pt);
            energy += w * v.dot(&(c * v));
        }
        assert!((energy - sm.elastic.quad_form(&q)).abs() < 1e-12 * energy);
    }

    #[test]
    fn generator_structure() {
        let g = Grid::unit_cube(3).unwrap();
        let sm = SystemMatrices::new(&g, &unit_material(), ModelVariant::Full).unwrap();
        let n = sm.dof_count();
        assert!(generator_apply(&sm, &vec![0.0; 2 * n]).unwrap().iter().all(|v| *v == 0.0));
        let mut w = random_q(&sm, 9);
        w.extend(vec![0.0; n]);
        let aw = generator_apply(&sm, &w).unwrap();
        assert!(aw[..n].iter().all(|v| *v == 0.0));
        // M a = −K q
        let ma = sm.mass.mul(&aw[n..]);
        let kq = sm.stiffness.mul(&w[..n]);
        let scale = sparse::norm(&kq);
        let res: f64 = ma.iter().zip(&kq).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
        assert!(res <= 1e-11 * scale);
        assert!(generator_apply(&sm, &w[..n]).is_err());
    }

    #[test]
    fn lumped_mass_round_trip() {
        let g = Grid::unit_cube(3).unwrap();
        let sm = SystemMatrices::new(&g, &unit_material(), ModelVariant::Full).unwrap();
        let consistent = sm.mass.clone();
        let lumped = sm.clone().with_mass_kind(MassKind::Lumped);
        assert!(lumped.mass.same_pattern(&lumped.stiffness));
        let ones = vec![1.0; sm.dof_count()];
        let a = consistent.mul(&ones);
        let b = lumped.mass.mul(&ones);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        let back = lumped.with_mass_kind(MassKind::Consistent);
        assert_eq!(back.mass, consistent);
    }

    #[test]
    fn invalid_material_rejected() {
        let g = Grid::unit_cube(2).unwrap();
        let m = IsotropicModuli { mu_h: -1.0, ..IsotropicModuli::unit() };
        let mat = Material::isotropic_unchecked(m);
        let err = assemble_stiffness(&g, &DofMap::coupled(&g), &mat, ModelVariant::Full).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn random_probe_semidefinite() {
        let g = Grid::unit_cube(3).unwrap();
        let sm = SystemMatrices::new(&g, &unit_material(), ModelVariant::DevDev).unwrap();
        let norm = sm.stiffness.frobenius_norm();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q: Vec<f64> = (0..sm.dof_count()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let rq = sm.stiffness.quad_form(&q) / sparse::dot(&q, &q);
            assert!(rq >= -1e-10 * norm);
        }
    }
}
