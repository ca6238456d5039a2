//! Plane-wave symbol of the coupled system and its dispersion branches.
//!
//! Substituting `(u, P) = (û, P̂) e^{i(k·x − ωt)}` gives `ω² ŵ = S(k) ŵ` with
//! `S(k) = Bᴴ W B`, where `∇ → i k ⊗` and `Curl → i k ×` row-wise.

use nalgebra::{Complex, DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::assembly::{check_material, sandwich, to_dmatrix};
use crate::error::{Error, Result};
use crate::tensor::{Material, ModelVariant};

pub type C64 = Complex<f64>;

/// Size of the symbol: three displacement and nine micro-distortion amplitudes.
pub const SYMBOL_DIM: usize = 12;

/// Allowed negative eigenvalue before a symbol is declared indefinite.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Hermitian symbol `S(k)` for a validated material.
pub fn symbol_matrix(k: [f64; 3], material: &Material, variant: ModelVariant) -> Result<DMatrix<C64>> {
    check_material(material, variant)?;
    Ok(raw_symbol(k, material, variant))
}

/// Symbol without parameter checks.
pub fn raw_symbol(k: [f64; 3], material: &Material, variant: ModelVariant) -> DMatrix<C64> {
    let (micro, curv) = variant.channels();
    let real = |m: &DMatrix<f64>| m.map(|x| C64::new(x, 0.0));
    let c = real(&to_dmatrix(&material.c.coefficients));
    let h = real(&sandwich(&material.h.coefficients, &micro.projector()));
    let l = real(&sandwich(&material.l.coefficients, &curv.projector()));
    let i = C64::new(0.0, 1.0);

    // elastic distortion ∇u − P
    let mut elastic = DMatrix::<C64>::zeros(9, SYMBOL_DIM);
    for a in 0..3 {
        for b in 0..3 {
            elastic[(3 * a + b, a)] = i * k[b];
            elastic[(3 * a + b, 3 + 3 * a + b)] = C64::new(-1.0, 0.0);
        }
    }
    let mut micro_map = DMatrix::<C64>::zeros(9, SYMBOL_DIM);
    for a in 0..9 {
        micro_map[(a, 3 + a)] = C64::new(1.0, 0.0);
    }
    // (Curl P)_{a c} = ε_{c l m} i k_l P_{a m}
    let mut curl = DMatrix::<C64>::zeros(9, SYMBOL_DIM);
    for a in 0..3 {
        for c in 0..3 {
            for l in 0..3 {
                for m in 0..3 {
                    let e = crate::grid::levi_civita(c, l, m);
                    if e != 0.0 {
                        curl[(3 * a + c, 3 + 3 * a + m)] += i * (e * k[l]);
                    }
                }
            }
        }
    }
    elastic.adjoint() * c * &elastic + micro_map.adjoint() * h * &micro_map + curl.adjoint() * l * &curl
}

/// Ascending eigenvalues `ω²` of a Hermitian symbol.
pub fn symbol_eigenvalues(s: &DMatrix<C64>) -> Vec<f64> {
    let mut values: Vec<f64> = SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

/// `‖S − Sᴴ‖_F / ‖S‖_F`.
pub fn hermitian_defect(s: &DMatrix<C64>) -> f64 {
    let norm = s.norm();
    if norm == 0.0 {
        0.0
    } else {
        (s - s.adjoint()).norm() / norm
    }
}

/// `k = 0` optic values: eigenvalues of `C + Π_pᵀ H Π_p` on the 9 micro
/// amplitudes, ascending.
pub fn cutoff_eigenvalues(material: &Material, variant: ModelVariant) -> Vec<f64> {
    let (micro, _) = variant.channels();
    let block = to_dmatrix(&material.c.coefficients) + sandwich(&material.h.coefficients, &micro.projector());
    let mut values: Vec<f64> = nalgebra::SymmetricEigen::new(block).eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionPoint {
    pub k: [f64; 3],
    /// Sorted `ω_j = √λ_j`, twelve entries.
    pub omegas: Vec<f64>,
}

impl DispersionPoint {
    pub fn k_norm(&self) -> f64 {
        self.k.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Branches along a sampled path; errors when a symbol has an eigenvalue
/// below `−1e−10`.
pub fn dispersion_curves(path: &[[f64; 3]], material: &Material, variant: ModelVariant) -> Result<Vec<DispersionPoint>> {
    check_material(material, variant)?;
    path.par_iter()
        .map(|&k| {
            let values = symbol_eigenvalues(&raw_symbol(k, material, variant));
            if values[0] < -PSD_TOLERANCE {
                return Err(Error::SymbolNotPsd(values[0]));
            }
            Ok(DispersionPoint { k, omegas: values.into_iter().map(|v| v.max(0.0).sqrt()).collect() })
        })
        .collect()
}

/// `points` samples spread uniformly by arc length over the polyline
/// through `vertices`, both ends included.
pub fn sample_path(vertices: &[[f64; 3]], points: usize) -> Result<Vec<[f64; 3]>> {
    if vertices.is_empty() || points == 0 {
        return Err(Error::InvalidArgument("path needs at least one vertex and one point".into()));
    }
    if vertices.len() == 1 || points == 1 {
        return Ok(vec![vertices[0]; points]);
    }
    let seg_len: Vec<f64> = vertices
        .windows(2)
        .map(|w| (0..3).map(|d| (w[1][d] - w[0][d]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let total: f64 = seg_len.iter().sum();
    if total == 0.0 {
        return Ok(vec![vertices[0]; points]);
    }
    let mut out = Vec::with_capacity(points);
    for p in 0..points {
        let mut s = total * p as f64 / (points - 1) as f64;
        let mut seg = 0;
        while seg + 1 < seg_len.len() && s > seg_len[seg] {
            s -= seg_len[seg];
            seg += 1;
        }
        let theta = if seg_len[seg] > 0.0 { (s / seg_len[seg]).min(1.0) } else { 0.0 };
        let (a, b) = (vertices[seg], vertices[seg + 1]);
        out.push([0, 1, 2].map(|d| a[d] + theta * (b[d] - a[d])));
    }
    Ok(out)
}
