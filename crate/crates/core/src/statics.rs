//! The resolvent problem `(I − A) w = w*`, the energy inner product on the
//! first-order space and the coercivity diagnostics built on it.

use serde::Serialize;

use crate::assembly::{assemble_form, generator_apply, Channel, SystemMatrices, Term, COUPLED_NCOMP, P_OFFSET, U_OFFSET};
use crate::error::{Error, Result};
use crate::sparse::{self, CgOptions, CsrMatrix, EigenOptions};

/// `(w1, w2)_X = p1ᵀ M p2 + q1ᵀ K q2` for `w = (q, p)`.
pub fn inner_product_x(sm: &SystemMatrices, w1: &[f64], w2: &[f64]) -> Result<f64> {
    let (q1, p1) = sm.split(w1)?;
    let (q2, p2) = sm.split(w2)?;
    Ok(sm.mass.bilinear(p1, p2) + sm.stiffness.bilinear(q1, q2))
}

pub fn norm_x(sm: &SystemMatrices, w: &[f64]) -> Result<f64> {
    Ok(inner_product_x(sm, w, w)?.max(0.0).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolventSolution {
    pub w: Vec<f64>,
    pub cg_iterations: usize,
    pub cg_residual: f64,
}

/// Solves `(I − A) w = w*`: `R q = M (q* + p*)` with `R = M + K`, then
/// `p = q − q*`.
pub fn solve_resolvent(sm: &SystemMatrices, w_star: &[f64]) -> Result<ResolventSolution> {
    let (q_star, p_star) = sm.split(w_star)?;
    let n = sm.dof_count();
    let g: Vec<f64> = q_star.iter().zip(p_star).map(|(a, b)| a + b).collect();
    let rhs = sm.mass.mul(&g);
    let r = sm.resolvent()?;
    let (q, stats) = sparse::solve(&r, &rhs, CgOptions { tol: 1e-12, max_iter: 50 * n.max(100) })?;
    let mut w = q.clone();
    w.extend(q.iter().zip(q_star).map(|(a, b)| a - b));
    Ok(ResolventSolution { w, cg_iterations: stats.iterations, cg_residual: stats.residual })
}

/// `‖(I − A) w − w*‖_X / ‖w*‖_X`.
pub fn resolvent_residual(sm: &SystemMatrices, w: &[f64], w_star: &[f64]) -> Result<f64> {
    let aw = generator_apply(sm, w)?;
    let r: Vec<f64> = w.iter().zip(&aw).zip(w_star).map(|((w, a), s)| w - a - s).collect();
    Ok(norm_x(sm, &r)? / norm_x(sm, w_star)?.max(f64::MIN_POSITIVE))
}

/// Largest `|(Aw, w)_X| / (w, w)_X` over random admissible states.
pub fn check_dissipativity(sm: &SystemMatrices, samples: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..samples {
        let w = sparse::random_vector(2 * sm.dof_count(), seed.wrapping_add(s as u64));
        let ww = inner_product_x(sm, &w, &w)?;
        if ww == 0.0 {
            continue;
        }
        let aw = generator_apply(sm, &w)?;
        worst = worst.max(inner_product_x(sm, &aw, &w)?.abs() / ww);
    }
    Ok(worst)
}

/// Gram matrix of `‖u‖²_{H¹} + ‖P‖²_{H(Curl)}` on the free dofs.
pub fn z_gram(sm: &SystemMatrices) -> Result<CsrMatrix> {
    assemble_form(
        &sm.grid,
        &sm.dofmap,
        &[
            Term::gram(Channel::Value { offset: 0, count: COUPLED_NCOMP }),
            Term::gram(Channel::Grad { offset: U_OFFSET, count: 3 }),
            Term::gram(Channel::Curl { offset: P_OFFSET, rows: 3 }),
        ],
    )
}

/// Gram matrix of `‖∇u‖² + ‖P‖² + ‖Curl P‖²` (the potential part of the
/// continuous-dependence norm).
pub fn potential_norm_gram(sm: &SystemMatrices) -> Result<CsrMatrix> {
    assemble_form(
        &sm.grid,
        &sm.dofmap,
        &[
            Term::gram(Channel::Grad { offset: U_OFFSET, count: 3 }),
            Term::gram(Channel::Value { offset: P_OFFSET, count: 9 }),
            Term::gram(Channel::Curl { offset: P_OFFSET, rows: 3 }),
        ],
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct Coercivity {
    pub lambda_min: f64,
    pub iterations: usize,
}

/// `λ_min` of `R x = λ G_Z x`; a positive value certifies discrete coercivity.
pub fn coercivity_lower_bound(sm: &SystemMatrices, opts: EigenOptions) -> Result<Coercivity> {
    let r = sm.resolvent()?;
    let gz = z_gram(sm)?;
    let e = sparse::smallest_generalized_eigenpair(&r, &gz, opts)?.require_converged()?;
    Ok(Coercivity { lambda_min: e.value, iterations: e.iterations })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormEquivalence {
    /// `lower ‖w‖²_std ≤ (w, w)_X ≤ upper ‖w‖²_std`.
    pub lower: f64,
    pub upper: f64,
}

/// Equivalence of the energy norm with `‖p‖²_{L²} + ‖q‖²_Z`. The kinetic
/// blocks coincide, so the constants are those of `(K, G_Z)` clipped by 1.
pub fn norm_equivalence(sm: &SystemMatrices, opts: EigenOptions) -> Result<NormEquivalence> {
    let gz = z_gram(sm)?;
    let lo = sparse::smallest_generalized_eigenpair(&sm.stiffness, &gz, opts)?.require_converged()?;
    let hi = sparse::largest_generalized_eigenvalue(&sm.stiffness, &gz, 300, opts.seed, opts.inner)?;
    Ok(NormEquivalence { lower: lo.value.min(1.0), upper: hi.max(1.0) })
}

/// Constant of the coercivity lemma for the pair
/// `⟨C (X − Y), X − Y⟩ + ⟨H Y, Y⟩ ≥ a1 (|X|² + |Y|²)`, from the splitting
/// `2|X||Y| ≤ δ|X|² + |Y|²/δ` at the `δ` balancing both coefficients.
pub fn lemma_a1(c_min: f64, h_min: f64) -> Result<(f64, f64)> {
    if !(c_min > 0.0) || !(h_min > 0.0) {
        return Err(Error::InvalidMaterial(format!("need c_m > 0 and h_m > 0, got {c_min}, {h_min}")));
    }
    let delta = (-h_min + (h_min * h_min + 4.0 * c_min * c_min).sqrt()) / (2.0 * c_min);
    Ok((c_min * (1.0 - delta), delta))
}

#[derive(Debug, Clone, Serialize)]
pub struct DegenerateMicroExperiment {
    /// Smallest eigenvalue of `K` relative to `G_Z` with `H = 0`.
    pub lambda_min: f64,
    pub converged: bool,
    pub resolvent_residual: f64,
}

/// The `H = 0` experiment: the resolvent stays solvable (`R = M + K` is
/// still SPD) while the energy form loses its control of `P`. Reported, not asserted.
pub fn zero_micro_experiment(sm: &SystemMatrices, seed: u64) -> Result<DegenerateMicroExperiment> {
    let mut material = sm.material.clone();
    material.h.coefficients *= 0.0;
    if let Some(m) = material.isotropic.as_mut() {
        m.mu_h = 0.0;
        m.lambda_h = 0.0;
    }
    let degenerate = crate::assembly::assemble_stiffness_unchecked(&sm.grid, &sm.dofmap, &material, sm.variant)?;
    let gz = z_gram(&degenerate)?;
    let opts = EigenOptions { max_iter: 300, seed, ..EigenOptions::default() };
    let (lambda_min, converged) = match sparse::smallest_generalized_eigenpair(&degenerate.stiffness, &gz, opts) {
        Ok(e) => (e.value, e.converged),
        Err(_) => (0.0, false),
    };
    let w_star = sparse::random_vector(2 * degenerate.dof_count(), seed);
    let sol = solve_resolvent(&degenerate, &w_star)?;
    let aw = generator_apply(&degenerate, &sol.w)?;
    let r: Vec<f64> = sol.w.iter().zip(&aw).zip(&w_star).map(|((w, a), s)| w - a - s).collect();
    let resolvent_residual = sparse::norm(&r) / sparse::norm(&w_star);
    Ok(DegenerateMicroExperiment { lambda_min, converged, resolvent_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::tensor::{IsotropicModuli, Material, ModelVariant};

    fn system(n: usize, variant: ModelVariant) -> SystemMatrices {
        let m = Material::isotropic(IsotropicModuli::unit(), variant).unwrap();
        SystemMatrices::new(&Grid::unit_cube(n).unwrap(), &m, variant).unwrap()
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let sm = system(3, ModelVariant::Full);
        let sol = solve_resolvent(&sm, &vec![0.0; 2 * sm.dof_count()]).unwrap();
        assert!(sol.w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn manufactured_solution_recovered() {
        for variant in [ModelVariant::Full, ModelVariant::DevDev] {
            let sm = system(3, variant);
            let n = sm.dof_count();
            let mut w = sparse::random_vector(n, 4);
            w.extend(vec![0.0; n]);
            let aw = generator_apply(&sm, &w).unwrap();
            let w_star: Vec<f64> = w.iter().zip(&aw).map(|(a, b)| a - b).collect();
            let sol = solve_resolvent(&sm, &w_star).unwrap();
            let err: Vec<f64> = sol.w.iter().zip(&w).map(|(a, b)| a - b).collect();
            let rel = norm_x(&sm, &err).unwrap() / norm_x(&sm, &w).unwrap();
            assert!(rel <= 1e-8, "{variant}: {rel}");
        }
    }

    #[test]
    fn random_rhs_residual() {
        let sm = system(3, ModelVariant::Full);
        let w_star = sparse::random_vector(2 * sm.dof_count(), 8);
        let sol = solve_resolvent(&sm, &w_star).unwrap();
        assert!(resolvent_residual(&sm, &sol.w, &w_star).unwrap() <= 1e-8);
        // reconstruction p = q − q* holds exactly
        let n = sm.dof_count();
        for i in 0..n {
            assert_eq!(sol.w[n + i], sol.w[i] - w_star[i]);
        }
    }

    #[test]
    fn inner_product_properties() {
        let sm = system(3, ModelVariant::Full);
        let a = sparse::random_vector(2 * sm.dof_count(), 1);
        let b = sparse::random_vector(2 * sm.dof_count(), 2);
        let ab = inner_product_x(&sm, &a, &b).unwrap();
        let ba = inner_product_x(&sm, &b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-13 * ab.abs().max(1.0));
        assert!(inner_product_x(&sm, &a, &a).unwrap() > 0.0);
    }

    #[test]
    fn dissipativity_small_grid() {
        let sm = system(3, ModelVariant::Full);
        assert!(check_dissipativity(&sm, 20, 3).unwrap() <= 1e-10);
        // pure kinetic state: (Aw, w)_X vanishes
        let n = sm.dof_count();
        let mut w = vec![0.0; n];
        w.extend(sparse::random_vector(n, 5));
        let aw = generator_apply(&sm, &w).unwrap();
        assert!(inner_product_x(&sm, &aw, &w).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn coercivity_positive_and_monotone() {
        let coarse = coercivity_lower_bound(&system(2, ModelVariant::Full), EigenOptions::default()).unwrap();
        let fine = coercivity_lower_bound(&system(4, ModelVariant::Full), EigenOptions::default()).unwrap();
        assert!(fine.lambda_min > 0.0);
        assert!(fine.lambda_min <= coarse.lambda_min * (1.0 + 1e-9));
        let dev = coercivity_lower_bound(&system(3, ModelVariant::DevDev), EigenOptions::default()).unwrap();
        assert!(dev.lambda_min > 0.0);
    }

    #[test]
    fn lemma_a1_balances_coefficients() {
        let (a1, delta) = lemma_a1(2.0, 2.0).unwrap();
        assert!(delta > 0.0 && delta < 1.0);
        // both coefficients agree at the optimizing δ
        let second = 2.0 + 2.0 - 2.0 / delta;
        assert!((a1 - second).abs() < 1e-12);
        assert!(lemma_a1(1.0, 0.0).is_err());
    }

    #[test]
    fn lemma_a1_holds_pointwise() {
        use crate::tensor::Tensor2;
        use rand::{Rng, SeedableRng};
        let m = IsotropicModuli { mu_e: 0.7, lambda_e: 0.4, mu_c: 0.0, mu_h: 1.3, lambda_h: -0.2, alpha_1: 1.0, alpha_2: 1.0, alpha_3: 1.0 };
        let mat = Material::isotropic(m, ModelVariant::Full).unwrap();
        let b = mat.bounds(ModelVariant::Full);
        let (a1, _) = lemma_a1(b.c_min, b.h_min).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = Tensor2::from_vec9(&(0..9).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).sym();
            let y = Tensor2::from_vec9(&(0..9).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).sym();
            let e = x - y;
            let lhs = mat.c.apply(&e).dot(&e) + mat.h.apply(&y).dot(&y);
            assert!(lhs >= a1 * (x.dot(&x) + y.dot(&y)) - 1e-12);
        }
    }
}
