//! Built-in invariant suite on small grids.

use micromorphx_core::assembly::{generator_apply, SystemMatrices};
use micromorphx_core::dispersion::{cutoff_eigenvalues, symbol_eigenvalues, symbol_matrix};
use micromorphx_core::dynamics::{dependence_constant, run, Loads, MidpointStepper, LoadOperator, RunConfig, State};
use micromorphx_core::inequalities::{estimate_constant, InequalitySpec};
use micromorphx_core::sparse::EigenOptions;
use micromorphx_core::statics::{check_dissipativity, norm_x, solve_resolvent};
use micromorphx_core::{Grid, IsotropicModuli, Material, ModelVariant};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = micromorphx_core::Result<(bool, String)>;

fn system(n: usize, variant: ModelVariant) -> micromorphx_core::Result<SystemMatrices> {
    let m = Material::isotropic(IsotropicModuli::unit(), variant)?;
    SystemMatrices::new(&Grid::unit_cube(n)?, &m, variant)
}

fn conservation(variant: ModelVariant, seed: u64) -> Outcome {
    let sm = system(4, variant)?;
    let out = run(&sm, &State::random(&sm, seed), &Loads::None, &RunConfig::new(0.01, 1.0))?;
    let dev = out.ledger.max_energy_deviation();
    Ok((dev <= 1e-9, format!("max |E_n − E_0|/E_0 = {dev:.3e} over {} steps", out.steps)))
}

fn reversibility(seed: u64) -> Outcome {
    let sm = system(3, ModelVariant::Full)?;
    let s0 = State::random(&sm, seed);
    let none = LoadOperator::new(&sm, &Loads::None)?;
    let (s1, _) = MidpointStepper::new(&sm, 0.05)?.step(&s0, &none)?;
    let (back, _) = MidpointStepper::new(&sm, -0.05)?.step(&s1, &none)?;
    let err = back.max_abs_diff(&s0);
    Ok((err <= 1e-10, format!("max deviation after ±dt = {err:.3e}")))
}

fn dissipativity(variant: ModelVariant, seed: u64) -> Outcome {
    let sm = system(3, variant)?;
    let worst = check_dissipativity(&sm, 20, seed)?;
    Ok((worst <= 1e-10, format!("max |(Aw,w)_X|/(w,w)_X = {worst:.3e}")))
}

fn range_condition(variant: ModelVariant, seed: u64) -> Outcome {
    let sm = system(3, variant)?;
    let w = State::random(&sm, seed).to_vec();
    let aw = generator_apply(&sm, &w)?;
    let w_star: Vec<f64> = w.iter().zip(&aw).map(|(a, b)| a - b).collect();
    let sol = solve_resolvent(&sm, &w_star)?;
    let err: Vec<f64> = sol.w.iter().zip(&w).map(|(a, b)| a - b).collect();
    let rel = norm_x(&sm, &err)? / norm_x(&sm, &w)?;
    Ok((rel <= 1e-8, format!("relative X-norm error {rel:.3e}")))
}

fn poincare(seed: u64) -> Outcome {
    let e = estimate_constant(InequalitySpec::Poincare, &Grid::unit_cube(8)?, EigenOptions { seed, ..EigenOptions::default() })?;
    let target = 1.0 / (3.0 * std::f64::consts::PI.powi(2)).sqrt();
    let rel = (e.constant - target).abs() / target;
    Ok((rel <= 0.02, format!("c = {:.6} at 8³, {:.2}% from 1/√(3π²)", e.constant, 100.0 * rel)))
}

fn korn(seed: u64) -> Outcome {
    let e = estimate_constant(InequalitySpec::Korn, &Grid::unit_cube(4)?, EigenOptions { seed, ..EigenOptions::default() })?;
    let ok = e.converged && e.constant <= std::f64::consts::SQRT_2 * (1.0 + 1e-9) && e.constant >= 1.3;
    Ok((ok, format!("c = {:.6} at 4³ (bounded by √2)", e.constant)))
}

fn sym_curl(seed: u64) -> Outcome {
    let e = estimate_constant(InequalitySpec::SymCurl, &Grid::unit_cube(4)?, EigenOptions { seed, ..EigenOptions::default() })?;
    let ok = e.constant.is_finite() && e.constant > 0.0 && !e.degenerate;
    Ok((ok, format!("c = {:.6} at 4³", e.constant)))
}

fn cutoffs() -> Outcome {
    let m = IsotropicModuli { mu_e: 1.3, lambda_e: 0.7, mu_c: 0.2, mu_h: 0.9, lambda_h: 0.4, alpha_1: 1.0, alpha_2: 1.0, alpha_3: 1.0 };
    let mut worst: f64 = 0.0;
    for variant in [ModelVariant::Full, ModelVariant::DevDev] {
        let material = Material::isotropic(m, variant)?;
        let values = symbol_eigenvalues(&symbol_matrix([0.0; 3], &material, variant)?);
        let block = cutoff_eigenvalues(&material, variant);
        for (v, b) in values[3..].iter().zip(&block) {
            worst = worst.max((v - b).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max |k = 0 symbol − (C+H) block| = {worst:.3e}")))
}

fn dependence(seed: u64) -> Outcome {
    let sm = system(3, ModelVariant::Full)?;
    let c = dependence_constant(&sm, EigenOptions { seed, ..EigenOptions::default() })?;
    let ok = c.a > 0.0 && c.a <= c.a_sharp * (1.0 + 1e-9);
    Ok((ok, format!("a = {:.6e} ≤ a_sharp = {:.6e}", c.a, c.a_sharp)))
}

pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Outcome>)> = vec![
        ("conservation_full", Box::new(move || conservation(ModelVariant::Full, seed))),
        ("conservation_dev_dev", Box::new(move || conservation(ModelVariant::DevDev, seed))),
        ("midpoint_reversibility", Box::new(move || reversibility(seed))),
        ("dissipativity_full", Box::new(move || dissipativity(ModelVariant::Full, seed))),
        ("dissipativity_dev_dev", Box::new(move || dissipativity(ModelVariant::DevDev, seed))),
        ("range_condition_full", Box::new(move || range_condition(ModelVariant::Full, seed))),
        ("range_condition_dev_dev", Box::new(move || range_condition(ModelVariant::DevDev, seed))),
        ("poincare_constant", Box::new(move || poincare(seed))),
        ("korn_constant", Box::new(move || korn(seed))),
        ("sym_curl_constant", Box::new(move || sym_curl(seed))),
        ("cutoff_frequencies", Box::new(cutoffs)),
        ("dependence_constant", Box::new(move || dependence(seed))),
    ];
    checks
        .into_iter()
        .map(|(name, check)| match check() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}
