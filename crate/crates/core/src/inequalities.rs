//! Best constants of the coercive inequalities on the discrete spaces.
//!
//! Each inequality `‖x‖_N ≤ c ‖x‖_D` is a pencil of two Gram matrices; the
//! best discrete constant is `c = 1/√λ_min` with `D x = λ N x`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_form, Channel, Term};
use crate::error::{Error, Result};
use crate::grid::{DofMap, Grid};
use crate::sparse::{smallest_generalized_eigenpair, CsrMatrix, EigenOptions};
use crate::tensor::{projector, ModelVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InequalitySpec {
    /// Scalar `H0¹`: `‖u‖ ≤ c ‖grad u‖`.
    Poincare,
    /// Vector `H0¹`: `‖∇u‖ ≤ c ‖sym ∇u‖`.
    Korn,
    /// Vanishing tangential trace: `‖v‖² ≤ c² (‖curl v‖² + ‖div v‖²)`.
    Maxwell,
    /// `‖P‖ ≤ c |||P|||`, `|||P|||² = ‖sym P‖² + ‖Curl P‖²`.
    SymCurl,
    /// `‖Curl P‖ ≤ c ‖dev Curl P‖`.
    DevCurl,
    /// `‖P‖² + ‖Curl P‖² ≤ c² (‖dev sym P‖² + ‖dev Curl P‖²)`.
    DevsymDevcurl,
    /// `‖∇u‖ ≤ c ‖dev sym ∇u‖`.
    DevsymGrad,
    /// `‖P‖²_{H(Curl)} ≤ c² |||P|||²`.
    HcurlEquivalence,
    /// `‖P‖² ≤ c² (‖Π_p P‖² + ‖Π_a Curl P‖²)` with the channels of a relaxed model.
    Relaxed(ModelVariant),
}

impl InequalitySpec {
    pub const CORE: [InequalitySpec; 8] = [
        InequalitySpec::Poincare,
        InequalitySpec::Korn,
        InequalitySpec::Maxwell,
        InequalitySpec::SymCurl,
        InequalitySpec::DevCurl,
        InequalitySpec::DevsymDevcurl,
        InequalitySpec::DevsymGrad,
        InequalitySpec::HcurlEquivalence,
    ];

    pub fn name(&self) -> String {
        match self {
            InequalitySpec::Poincare => "poincare".into(),
            InequalitySpec::Korn => "korn".into(),
            InequalitySpec::Maxwell => "maxwell".into(),
            InequalitySpec::SymCurl => "sym_curl".into(),
            InequalitySpec::DevCurl => "dev_curl".into(),
            InequalitySpec::DevsymDevcurl => "devsym_devcurl".into(),
            InequalitySpec::DevsymGrad => "devsym_grad".into(),
            InequalitySpec::HcurlEquivalence => "hcurl_equivalence".into(),
            InequalitySpec::Relaxed(v) => format!("relaxed:{v}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        if let Some(v) = norm.strip_prefix("relaxed:") {
            return ModelVariant::parse(v)
                .map(InequalitySpec::Relaxed)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown model variant '{v}'")));
        }
        Self::CORE
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown inequality '{s}'")))
    }

    /// Discrete space: layout and boundary constraint.
    pub fn dofmap(&self, grid: &Grid) -> DofMap {
        match self {
            InequalitySpec::Poincare => DofMap::scalar_dirichlet(grid),
            InequalitySpec::Korn | InequalitySpec::DevsymGrad => DofMap::vector_dirichlet(grid),
            InequalitySpec::Maxwell => DofMap::vector_tangential(grid),
            _ => DofMap::tensor_tangential(grid),
        }
    }

    /// `(N, D)`: the form bounded and the bounding form.
    pub fn terms(&self) -> (Vec<Term>, Vec<Term>) {
        let value = |count| Channel::Value { offset: 0, count };
        let grad = |count| Channel::Grad { offset: 0, count };
        let curl = Channel::Curl { offset: 0, rows: 3 };
        match self {
            InequalitySpec::Poincare => (vec![Term::gram(value(1))], vec![Term::gram(grad(1))]),
            InequalitySpec::Korn => (vec![Term::gram(grad(3))], vec![Term::projected(grad(3), projector::sym())]),
            InequalitySpec::DevsymGrad => (vec![Term::gram(grad(3))], vec![Term::projected(grad(3), projector::dev_sym())]),
            InequalitySpec::Maxwell => (
                vec![Term::gram(value(3))],
                vec![Term::gram(Channel::Curl { offset: 0, rows: 1 }), Term::gram(Channel::Div { offset: 0 })],
            ),
            InequalitySpec::SymCurl => (
                vec![Term::gram(value(9))],
                vec![Term::projected(value(9), projector::sym()), Term::gram(curl)],
            ),
            InequalitySpec::DevCurl => (vec![Term::gram(curl)], vec![Term::projected(curl, projector::dev())]),
            InequalitySpec::DevsymDevcurl => (
                vec![Term::gram(value(9)), Term::gram(curl)],
                vec![Term::projected(value(9), projector::dev_sym()), Term::projected(curl, projector::dev())],
            ),
            InequalitySpec::HcurlEquivalence => (
                vec![Term::gram(value(9)), Term::gram(curl)],
                vec![Term::projected(value(9), projector::sym()), Term::gram(curl)],
            ),
            InequalitySpec::Relaxed(v) => {
                let (micro, curv) = v.channels();
                (
                    vec![Term::gram(value(9))],
                    vec![Term::projected(value(9), micro.projector()), Term::projected(curl, curv.projector())],
                )
            }
        }
    }

    /// Assembled `(N, D)` on `grid`.
    pub fn grams(&self, grid: &Grid) -> Result<(CsrMatrix, CsrMatrix)> {
        let dm = self.dofmap(grid);
        let (n, d) = self.terms();
        Ok((assemble_form(grid, &dm, &n)?, assemble_form(grid, &dm, &d)?))
    }
}

impl std::fmt::Display for InequalitySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantEstimate {
    pub spec: String,
    pub grid: [usize; 3],
    /// `1/√λ_min`; infinite when degenerate.
    pub constant: f64,
    pub lambda_min: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
}

/// Smallest eigenvalue below which a pencil is reported as degenerate
/// (relative to the largest diagonal ratio).
const DEGENERACY_RATIO: f64 = 1e-12;

pub fn estimate_constant(spec: InequalitySpec, grid: &Grid, opts: EigenOptions) -> Result<ConstantEstimate> {
    let (n, d) = spec.grams(grid)?;
    if n.nrows() == 0 {
        return Err(Error::InvalidGrid("no free degrees of freedom".into()));
    }
    let scale = d
        .diagonal()
        .iter()
        .zip(n.diagonal())
        .filter(|(_, nd)| *nd > 0.0)
        .map(|(dd, nd)| dd / nd)
        .fold(0.0f64, f64::max);
    let base = ConstantEstimate {
        spec: spec.name(),
        grid: grid.n,
        constant: f64::INFINITY,
        lambda_min: 0.0,
        iterations: 0,
        converged: false,
        degenerate: true,
    };
    match smallest_generalized_eigenpair(&d, &n, opts) {
        Ok(r) => {
            let degenerate = !(r.value > DEGENERACY_RATIO * scale);
            Ok(ConstantEstimate {
                constant: if degenerate { f64::INFINITY } else { 1.0 / r.value.sqrt() },
                lambda_min: r.value,
                iterations: r.iterations,
                converged: r.converged,
                degenerate,
                ..base
            })
        }
        Err(Error::NoConvergence { iterations, .. }) => Ok(ConstantEstimate { iterations, ..base }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    WellPosedEvidence,
    DegenerateEvidence,
    Inconclusive,
}

impl Classification {
    pub fn label(self) -> &'static str {
        match self {
            Classification::WellPosedEvidence => "WELL_POSED_EVIDENCE",
            Classification::DegenerateEvidence => "DEGENERATE_EVIDENCE",
            Classification::Inconclusive => "INCONCLUSIVE",
        }
    }
}

pub const STABLE_CHANGE: f64 = 0.2;
pub const GROWTH_FACTOR: f64 = 2.0;

/// Bounded (last relative change ≤ 20%) or growing (≥ 2× per level).
pub fn classify(constants: &[f64]) -> Classification {
    if constants.iter().any(|c| !c.is_finite()) {
        return Classification::DegenerateEvidence;
    }
    if constants.len() < 2 {
        return Classification::Inconclusive;
    }
    if constants.windows(2).all(|w| w[1] >= GROWTH_FACTOR * w[0]) {
        return Classification::DegenerateEvidence;
    }
    let k = constants.len();
    if (constants[k - 1] - constants[k - 2]).abs() <= STABLE_CHANGE * constants[k - 2] {
        return Classification::WellPosedEvidence;
    }
    Classification::Inconclusive
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStudy {
    pub spec: String,
    pub levels: Vec<ConstantEstimate>,
    pub classification: Classification,
}

impl RefinementStudy {
    pub fn constants(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.constant).collect()
    }

    /// Relative change between the two finest levels.
    pub fn last_change(&self) -> Option<f64> {
        let c = self.constants();
        let k = c.len();
        (k >= 2).then(|| (c[k - 1] - c[k - 2]).abs() / c[k - 2])
    }
}

pub fn refinement_study(spec: InequalitySpec, levels: &[Grid], opts: EigenOptions) -> Result<RefinementStudy> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no refinement levels".into()));
    }
    for w in levels.windows(2) {
        if !w[1].refines(&w[0]) || w[1].n == w[0].n {
            return Err(Error::InvalidArgument(format!("levels {:?} and {:?} are not nested", w[0].n, w[1].n)));
        }
    }
    let estimates: Result<Vec<_>> = levels.par_iter().map(|g| estimate_constant(spec, g, opts)).collect();
    let levels = estimates?;
    let constants: Vec<f64> = levels.iter().map(|l| l.constant).collect();
    Ok(RefinementStudy { spec: spec.name(), classification: classify(&constants), levels })
}

/// Largest `‖x‖_N − c ‖x‖_D` over random admissible fields (≤ 0 when the
/// constant is valid on the discrete space).
pub fn max_violation(spec: InequalitySpec, grid: &Grid, constant: f64, samples: usize, seed: u64) -> Result<f64> {
    let (n, d) = spec.grams(grid)?;
    let mut worst = f64::NEG_INFINITY;
    for s in 0..samples {
        let x = crate::sparse::random_vector(n.nrows(), seed.wrapping_add(s as u64));
        let lhs = n.quad_form(&x).max(0.0).sqrt();
        let rhs = d.quad_form(&x).max(0.0).sqrt();
        worst = worst.max(lhs - constant * rhs);
    }
    Ok(worst)
}

/// Unit cubes with `n` cells per axis for each entry of `ns`.
pub fn cube_levels(ns: &[usize]) -> Result<Vec<Grid>> {
    ns.iter().map(|&n| Grid::unit_cube(n)).collect()
}
