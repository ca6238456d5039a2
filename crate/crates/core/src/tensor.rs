//! 3×3 tensor algebra, the Cartan decomposition and constitutive tensors.
//!
//! Second-order tensors are vectorized row-major (`X_ij` at index `3i + j`),
//! fourth-order tensors are stored as 9×9 matrices acting on that
//! vectorization.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;

/// Relative tolerance used for symmetry validation of fourth-order tensors.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A real 3×3 second-order tensor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tensor2(pub Matrix3<f64>);

impl Tensor2 {
    pub fn zero() -> Self {
        Self(Matrix3::zeros())
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    pub fn from_vec9(v: &[f64]) -> Self {
        Self(Matrix3::from_fn(|i, j| v[3 * i + j]))
    }

    pub fn to_vec9(&self) -> Vec9 {
        Vec9::from_fn(|k, _| self.0[(k / 3, k % 3)])
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn sym(&self) -> Self {
        Self((self.0 + self.0.transpose()) * 0.5)
    }

    pub fn skew(&self) -> Self {
        Self((self.0 - self.0.transpose()) * 0.5)
    }

    /// Trace-free part `X - tr(X)/3 · 1`.
    pub fn dev(&self) -> Self {
        Self(self.0 - Matrix3::identity() * (self.trace() / 3.0))
    }

    pub fn dev_sym(&self) -> Self {
        self.sym().dev()
    }

    pub fn spherical(&self) -> Self {
        Self(Matrix3::identity() * (self.trace() / 3.0))
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> f64 {
        self.0.component_mul(&other.0).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0 * s)
    }
}

impl std::ops::Add for Tensor2 {
    type Output = Tensor2;
    fn add(self, rhs: Tensor2) -> Tensor2 {
        Tensor2(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Tensor2 {
    type Output = Tensor2;
    fn sub(self, rhs: Tensor2) -> Tensor2 {
        Tensor2(self.0 - rhs.0)
    }
}

/// The three mutually orthogonal Cartan parts of a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartanParts {
    pub dev_sym: Tensor2,
    pub skew: Tensor2,
    pub spherical: Tensor2,
}

/// `X = dev sym X + skew X + tr(X)/3 · 1`.
pub fn decompose(x: &Tensor2) -> CartanParts {
    CartanParts {
        dev_sym: x.dev_sym(),
        skew: x.skew(),
        spherical: x.spherical(),
    }
}

/// Orthogonal projectors on vectorized tensors.
pub mod projector {
    use super::{Mat9, Tensor2};

    fn from_map(f: impl Fn(&Tensor2) -> Tensor2) -> Mat9 {
        let mut m = Mat9::zeros();
        for c in 0..9 {
            let mut e = [0.0; 9];
            e[c] = 1.0;
            let col = f(&Tensor2::from_vec9(&e)).to_vec9();
            m.set_column(c, &col);
        }
        m
    }

    pub fn identity() -> Mat9 {
        Mat9::identity()
    }
    pub fn sym() -> Mat9 {
        from_map(Tensor2::sym)
    }
    pub fn skew() -> Mat9 {
        from_map(Tensor2::skew)
    }
    pub fn dev() -> Mat9 {
        from_map(Tensor2::dev)
    }
    pub fn dev_sym() -> Mat9 {
        from_map(Tensor2::dev_sym)
    }
    pub fn spherical() -> Mat9 {
        from_map(Tensor2::spherical)
    }
    /// `1 ⊗ 1`, i.e. `X ↦ tr(X) · 1`.
    pub fn trace_identity() -> Mat9 {
        spherical() * 3.0
    }
}

/// Subspace of `R^{3×3}` on which a quadratic form is examined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorDomain {
    Full,
    Sym,
    Dev,
    DevSym,
}

impl TensorDomain {
    /// Orthonormal basis (columns) of the subspace.
    pub fn basis(self) -> nalgebra::DMatrix<f64> {
        let p = match self {
            TensorDomain::Full => projector::identity(),
            TensorDomain::Sym => projector::sym(),
            TensorDomain::Dev => projector::dev(),
            TensorDomain::DevSym => projector::dev_sym(),
        };
        // the projector is symmetric idempotent: its unit eigenvectors span the range
        let eig = SymmetricEigen::new(p);
        let cols: Vec<_> = (0..9)
            .filter(|&k| eig.eigenvalues[k] > 0.5)
            .map(|k| eig.eigenvectors.column(k).into_owned())
            .collect();
        nalgebra::DMatrix::from_fn(9, cols.len(), |r, c| cols[c][r])
    }

    pub fn dim(self) -> usize {
        match self {
            TensorDomain::Full => 9,
            TensorDomain::Sym => 6,
            TensorDomain::Dev => 8,
            TensorDomain::DevSym => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SymmetryClass {
    /// Maps Sym(3) to Sym(3); major and minor symmetric.
    SymToSym,
    /// Major symmetric only.
    FullMajor,
}

impl SymmetryClass {
    pub fn domain(self) -> TensorDomain {
        match self {
            SymmetryClass::SymToSym => TensorDomain::Sym,
            SymmetryClass::FullMajor => TensorDomain::Full,
        }
    }
}

/// A fourth-order tensor stored as a 9×9 matrix on vectorized tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FourthOrderTensor {
    pub coefficients: Mat9,
    pub symmetry_class: SymmetryClass,
}

impl FourthOrderTensor {
    pub fn new(coefficients: Mat9, symmetry_class: SymmetryClass) -> Result<Self> {
        let t = Self { coefficients, symmetry_class };
        t.check_symmetry()?;
        Ok(t)
    }

    /// `C.X = 2μ sym X + λ tr(X) 1 (+ 2μc skew X)`.
    pub fn isotropic_elastic(mu: f64, lambda: f64, mu_c: f64) -> Self {
        let coefficients = projector::sym() * (2.0 * mu)
            + projector::trace_identity() * lambda
            + projector::skew() * (2.0 * mu_c);
        let symmetry_class = if mu_c == 0.0 {
            SymmetryClass::SymToSym
        } else {
            SymmetryClass::FullMajor
        };
        Self { coefficients, symmetry_class }
    }

    /// `L.X = α1 dev sym X + α2 skew X + α3 tr(X) 1`.
    pub fn isotropic_curvature(alpha_1: f64, alpha_2: f64, alpha_3: f64) -> Self {
        let coefficients = projector::dev_sym() * alpha_1
            + projector::skew() * alpha_2
            + projector::trace_identity() * alpha_3;
        Self {
            coefficients,
            symmetry_class: SymmetryClass::FullMajor,
        }
    }

    pub fn apply(&self, x: &Tensor2) -> Tensor2 {
        let v = self.coefficients * x.to_vec9();
        Tensor2::from_vec9(v.as_slice())
    }

    pub fn check_symmetry(&self) -> Result<()> {
        let c = &self.coefficients;
        let scale = c.norm().max(f64::MIN_POSITIVE);
        let major = (c - c.transpose()).norm();
        if major > SYMMETRY_TOL * scale {
            return Err(Error::AsymmetricTensor(format!(
                "major symmetry violated (relative {:.3e})",
                major / scale
            )));
        }
        if self.symmetry_class == SymmetryClass::SymToSym {
            // C_ijrs = C_jirs: rows (i,j) and (j,i) coincide
            let mut minor: f64 = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    for col in 0..9 {
                        let d = c[(3 * i + j, col)] - c[(3 * j + i, col)];
                        minor += d * d;
                    }
                }
            }
            let minor = minor.sqrt();
            if minor > SYMMETRY_TOL * scale {
                return Err(Error::AsymmetricTensor(format!(
                    "minor symmetry violated (relative {:.3e})",
                    minor / scale
                )));
            }
        }
        Ok(())
    }

    /// Extreme eigenvalues on the declared domain (Sym(3) or all of `R^{3×3}`).
    pub fn eigen_bounds(&self) -> Result<(f64, f64)> {
        self.check_symmetry()?;
        Ok(self.eigen_bounds_on(self.symmetry_class.domain()))
    }

    /// Extreme eigenvalues of the form restricted to `domain`.
    pub fn eigen_bounds_on(&self, domain: TensorDomain) -> (f64, f64) {
        let b = domain.basis();
        let c = nalgebra::DMatrix::from_fn(9, 9, |r, s| self.coefficients[(r, s)]);
        let restricted = b.transpose() * c * &b;
        let restricted = (&restricted + restricted.transpose()) * 0.5;
        let eig = SymmetricEigen::new(restricted);
        let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// The family of relaxed models. Dynamics and statics accept only `Full`
/// and `DevDev`; the remaining four are used for constant studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Full,
    DevDev,
    DevSymCurl,
    SymCurl,
    DevsymCurl,
    DevDevsymCurl,
}

/// Projection applied to `sym P` in the micro-strain energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicroChannel {
    Sym,
    DevSym,
}

/// Projection applied to `Curl P` in the dislocation energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureChannel {
    Full,
    Dev,
    Sym,
    DevSym,
}

impl MicroChannel {
    pub fn projector(self) -> Mat9 {
        match self {
            MicroChannel::Sym => projector::sym(),
            MicroChannel::DevSym => projector::dev_sym(),
        }
    }
    pub fn domain(self) -> TensorDomain {
        match self {
            MicroChannel::Sym => TensorDomain::Sym,
            MicroChannel::DevSym => TensorDomain::DevSym,
        }
    }
}

impl CurvatureChannel {
    pub fn projector(self) -> Mat9 {
        match self {
            CurvatureChannel::Full => projector::identity(),
            CurvatureChannel::Dev => projector::dev(),
            CurvatureChannel::Sym => projector::sym(),
            CurvatureChannel::DevSym => projector::dev_sym(),
        }
    }
    pub fn domain(self) -> TensorDomain {
        match self {
            CurvatureChannel::Full => TensorDomain::Full,
            CurvatureChannel::Dev => TensorDomain::Dev,
            CurvatureChannel::Sym => TensorDomain::Sym,
            CurvatureChannel::DevSym => TensorDomain::DevSym,
        }
    }
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Full,
        ModelVariant::DevDev,
        ModelVariant::DevSymCurl,
        ModelVariant::SymCurl,
        ModelVariant::DevsymCurl,
        ModelVariant::DevDevsymCurl,
    ];

    /// The four further-relaxed models of the family diagram.
    pub const EXPLORATORY: [ModelVariant; 4] = [
        ModelVariant::DevSymCurl,
        ModelVariant::SymCurl,
        ModelVariant::DevsymCurl,
        ModelVariant::DevDevsymCurl,
    ];

    pub fn channels(self) -> (MicroChannel, CurvatureChannel) {
        match self {
            ModelVariant::Full => (MicroChannel::Sym, CurvatureChannel::Full),
            ModelVariant::DevDev => (MicroChannel::DevSym, CurvatureChannel::Dev),
            ModelVariant::SymCurl => (MicroChannel::Sym, CurvatureChannel::Sym),
            ModelVariant::DevsymCurl => (MicroChannel::Sym, CurvatureChannel::DevSym),
            ModelVariant::DevSymCurl => (MicroChannel::DevSym, CurvatureChannel::Sym),
            ModelVariant::DevDevsymCurl => (MicroChannel::DevSym, CurvatureChannel::DevSym),
        }
    }

    pub fn supports_evolution(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::DevDev)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::DevDev => "dev_dev",
            ModelVariant::DevSymCurl => "dev_sym_curl",
            ModelVariant::SymCurl => "sym_curl",
            ModelVariant::DevsymCurl => "devsym_curl",
            ModelVariant::DevDevsymCurl => "dev_devsym_curl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|v| v.name() == norm)
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Isotropic moduli in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicModuli {
    pub mu_e: f64,
    pub lambda_e: f64,
    #[serde(default)]
    pub mu_c: f64,
    pub mu_h: f64,
    pub lambda_h: f64,
    pub alpha_1: f64,
    pub alpha_2: f64,
    pub alpha_3: f64,
}

impl IsotropicModuli {
    /// All moduli equal to one, `μc = 0`.
    pub fn unit() -> Self {
        Self {
            mu_e: 1.0,
            lambda_e: 1.0,
            mu_c: 0.0,
            mu_h: 1.0,
            lambda_h: 1.0,
            alpha_1: 1.0,
            alpha_2: 1.0,
            alpha_3: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterCheck {
    pub condition: &'static str,
    pub value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ParameterCheck>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParameterCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Checks the positivity restrictions on the isotropic moduli. The `μc ≥ 0`
/// condition is listed only when the couple modulus is non-zero.
pub fn validate_parameters(m: &IsotropicModuli) -> ValidationReport {
    let mut checks = vec![
        ("mu_e > 0", m.mu_e, m.mu_e > 0.0),
        ("2 mu_e + 3 lambda_e > 0", 2.0 * m.mu_e + 3.0 * m.lambda_e, 2.0 * m.mu_e + 3.0 * m.lambda_e > 0.0),
        ("mu_h > 0", m.mu_h, m.mu_h > 0.0),
        ("2 mu_h + 3 lambda_h > 0", 2.0 * m.mu_h + 3.0 * m.lambda_h, 2.0 * m.mu_h + 3.0 * m.lambda_h > 0.0),
        ("alpha_1 > 0", m.alpha_1, m.alpha_1 > 0.0),
        ("alpha_2 > 0", m.alpha_2, m.alpha_2 > 0.0),
        ("alpha_3 > 0", m.alpha_3, m.alpha_3 > 0.0),
    ];
    if m.mu_c != 0.0 {
        checks.push(("mu_c >= 0", m.mu_c, m.mu_c >= 0.0));
    }
    let checks: Vec<_> = checks
        .into_iter()
        .map(|(condition, value, passed)| ParameterCheck { condition, value, passed: passed && value.is_finite() })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    ValidationReport { checks, passed }
}

/// Variant-aware validation: the (dev,dev) energy never sees the spherical
/// micro-strain or the trace of `Curl P`, so `λh` and `α3` are unrestricted.
pub fn validate_for_variant(m: &IsotropicModuli, variant: ModelVariant) -> ValidationReport {
    let mut report = validate_parameters(m);
    if variant == ModelVariant::DevDev {
        report
            .checks
            .retain(|c| c.condition != "2 mu_h + 3 lambda_h > 0" && c.condition != "alpha_3 > 0");
        report.passed = report.checks.iter().all(|c| c.passed);
    }
    report
}

/// `σ = 2μe sym E + λe tr(E) 1 (+ 2μc skew E)`.
pub fn apply_isotropic_sigma(m: &IsotropicModuli, e: &Tensor2) -> Tensor2 {
    let mut s = e.sym().scale(2.0 * m.mu_e) + Tensor2::identity().scale(m.lambda_e * e.trace());
    if m.mu_c != 0.0 {
        s = s + e.skew().scale(2.0 * m.mu_c);
    }
    s
}

/// Moment stress `m`. Under `DevDev` the trace channel is dropped.
pub fn apply_isotropic_m(m: &IsotropicModuli, a: &Tensor2, variant: ModelVariant) -> Tensor2 {
    let base = a.dev_sym().scale(m.alpha_1) + a.skew().scale(m.alpha_2);
    match variant {
        ModelVariant::DevDev => base.dev(),
        _ => base + Tensor2::identity().scale(m.alpha_3 * a.trace()),
    }
}

/// Micro-strain stress `s`.
pub fn apply_isotropic_s(m: &IsotropicModuli, p: &Tensor2, variant: ModelVariant) -> Tensor2 {
    match variant {
        ModelVariant::DevDev => p.dev_sym().scale(2.0 * m.mu_h),
        _ => p.sym().scale(2.0 * m.mu_h) + Tensor2::identity().scale(m.lambda_h * p.trace()),
    }
}

/// Constitutive data: elastic `C`, micro-strain `H` and curvature `L_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub c: FourthOrderTensor,
    pub h: FourthOrderTensor,
    pub l: FourthOrderTensor,
    pub isotropic: Option<IsotropicModuli>,
}

/// Positivity bounds of the constitutive tensors on the subspaces a variant sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaterialBounds {
    pub c_min: f64,
    pub c_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub l_min: f64,
    pub l_max: f64,
}

impl Material {
    /// Validated isotropic material for the given variant.
    pub fn isotropic(m: IsotropicModuli, variant: ModelVariant) -> Result<Self> {
        let report = validate_for_variant(&m, variant);
        if !report.passed {
            let failed: Vec<_> = report.failures().map(|c| c.condition).collect();
            return Err(Error::InvalidMaterial(failed.join(", ")));
        }
        Ok(Self::isotropic_unchecked(m))
    }

    /// Builds the tensors without enforcing positivity; used for degenerate experiments.
    pub fn isotropic_unchecked(m: IsotropicModuli) -> Self {
        Self {
            c: FourthOrderTensor::isotropic_elastic(m.mu_e, m.lambda_e, m.mu_c),
            h: FourthOrderTensor::isotropic_elastic(m.mu_h, m.lambda_h, 0.0),
            l: FourthOrderTensor::isotropic_curvature(m.alpha_1, m.alpha_2, m.alpha_3),
            isotropic: Some(m),
        }
    }

    /// General anisotropic material; `C` and `H` must be Sym(3)-to-Sym(3)
    /// (or `C` major-symmetric when a couple term is present), all positive
    /// definite on their domains.
    pub fn anisotropic(c: FourthOrderTensor, h: FourthOrderTensor, l: FourthOrderTensor) -> Result<Self> {
        if h.symmetry_class != SymmetryClass::SymToSym {
            return Err(Error::InvalidMaterial("H must map Sym(3) to Sym(3)".into()));
        }
        for (name, t) in [("C", &c), ("H", &h), ("L_c", &l)] {
            let (lo, _) = t.eigen_bounds()?;
            if lo <= 0.0 {
                return Err(Error::InvalidMaterial(format!(
                    "{name} is not positive definite on its domain (min eigenvalue {lo:.6e})"
                )));
            }
        }
        Ok(Self { c, h, l, isotropic: None })
    }

    pub fn bounds(&self, variant: ModelVariant) -> MaterialBounds {
        let (micro, curv) = variant.channels();
        let (c_min, c_max) = self.c.eigen_bounds_on(self.c.symmetry_class.domain());
        let (h_min, h_max) = self.h.eigen_bounds_on(micro.domain());
        let (l_min, l_max) = self.l.eigen_bounds_on(curv.domain());
        MaterialBounds { c_min, c_max, h_min, h_max, l_min, l_max }
    }
}
