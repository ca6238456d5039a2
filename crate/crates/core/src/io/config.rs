//! TOML scenario files.
//!
//! ```toml
//! seed = 42
//!
//! [grid]
//! n = 6                # or [nx, ny, nz]
//! lengths = [1.0, 1.0, 1.0]
//!
//! [material]
//! variant = "full"
//! mu_e = 1.0
//! lambda_e = 1.0
//! mu_h = 1.0
//! lambda_h = 1.0
//! alpha_1 = 1.0
//! alpha_2 = 1.0
//! alpha_3 = 1.0
//!
//! [time]
//! dt = 0.01
//! T = 1.0
//!
//! [ic]
//! preset = "random"
//!
//! [[loads.terms]]
//! target = "force"
//! component = 0
//! shape = { kind = "sine", modes = [1, 1, 1] }
//! time = "sin"
//! omega = 2.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::SystemMatrices;
use crate::dynamics::{LoadTerm, Loads, RunConfig, Scheme, SpatialShape, StabilityPolicy, State};
use crate::error::{Error, Result};
use crate::grid::{Grid, NodalField};
use crate::inequalities::InequalitySpec;
use crate::tensor::{validate_for_variant, FourthOrderTensor, IsotropicModuli, Mat9, Material, ModelVariant, SymmetryClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub grid: GridConfig,
    pub material: MaterialConfig,
    #[serde(default)]
    pub time: Option<TimeConfig>,
    #[serde(default)]
    pub ic: IcConfig,
    #[serde(default)]
    pub loads: LoadsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub constants: Option<ConstantsConfig>,
    #[serde(default)]
    pub dispersion: Option<DispersionConfig>,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSize {
    Cube(usize),
    Box([usize; 3]),
}

impl GridSize {
    pub fn cells(self) -> [usize; 3] {
        match self {
            GridSize::Cube(n) => [n; 3],
            GridSize::Box(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: GridSize,
    #[serde(default = "unit_lengths")]
    pub lengths: [f64; 3],
}

fn unit_lengths() -> [f64; 3] {
    [1.0; 3]
}

/// Isotropic moduli, or 9×9 coefficient files for `c`, `h` and `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    #[serde(default = "default_variant")]
    pub variant: ModelVariant,
    pub mu_e: Option<f64>,
    pub lambda_e: Option<f64>,
    #[serde(default)]
    pub mu_c: f64,
    pub mu_h: Option<f64>,
    pub lambda_h: Option<f64>,
    pub alpha_1: Option<f64>,
    pub alpha_2: Option<f64>,
    pub alpha_3: Option<f64>,
    pub c_file: Option<PathBuf>,
    pub h_file: Option<PathBuf>,
    pub l_file: Option<PathBuf>,
}

fn default_variant() -> ModelVariant {
    ModelVariant::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    #[serde(rename = "T", alias = "t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub stability: StabilityPolicy,
    /// Continuous-dependence diagnostics along the run.
    #[serde(default = "yes")]
    pub dependence: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IcPreset {
    #[default]
    Zero,
    /// Uniform random free dofs in `[−amplitude, amplitude)`.
    Random,
    /// First sine mode in every component of `u` and `P`, at rest.
    Bump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IcField {
    #[serde(rename = "u")]
    Displacement,
    #[serde(rename = "v")]
    Velocity,
    #[serde(rename = "P")]
    MicroDistortion,
    #[serde(rename = "Pdot")]
    MicroRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcTerm {
    pub field: IcField,
    pub component: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub shape: SpatialShape,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcConfig {
    #[serde(default)]
    pub preset: IcPreset,
    #[serde(default = "one")]
    pub amplitude: f64,
    /// Overrides the top-level seed for the random preset.
    pub seed: Option<u64>,
    #[serde(default)]
    pub terms: Vec<IcTerm>,
}

impl Default for IcConfig {
    fn default() -> Self {
        Self { preset: IcPreset::Zero, amplitude: 1.0, seed: None, terms: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LoadsConfig {
    #[serde(default)]
    pub terms: Vec<LoadTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Vtk,
    Json,
    Mtx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "one_usize")]
    pub ledger_every: usize,
    /// Zero disables snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn one_usize() -> usize {
    1
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: default_dir(), ledger_every: 1, snapshot_every: 0, formats: default_formats() }
    }
}

impl OutputConfig {
    pub fn wants(&self, format: OutputFormat) -> bool {
        self.formats.contains(&format)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    #[serde(default)]
    pub specs: Vec<String>,
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_max_iter() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionConfig {
    pub path: Vec<[f64; 3]>,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    100
}

/// Parses a scenario, rejecting unknown keys and invalid parameters.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let config = parse_structure(text)?;
    config.validate()?;
    Ok(config)
}

/// Syntax and key checks only; parameter values are not validated.
pub fn parse_structure(text: &str) -> Result<ScenarioConfig> {
    toml::from_str(text).map_err(|e| {
        let msg = e.to_string().replace("unknown field", "unknown key").replace("missing field", "missing key");
        Error::Config(msg.trim_end().to_string())
    })
}

/// Reads and parses a file; relative material paths resolve against its directory.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let config = load_structure(path)?;
    config.validate()?;
    Ok(config)
}

/// [`load_config`] without parameter validation.
pub fn load_structure(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_structure(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for file in [&mut config.material.c_file, &mut config.material.h_file, &mut config.material.l_file].into_iter().flatten() {
        if file.is_relative() {
            *file = base.join(&*file);
        }
    }
    Ok(config)
}

impl ScenarioConfig {
    /// Semantic checks; all problems are reported together with their key paths.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let n = self.grid.n.cells();
        if n.iter().any(|&k| k == 0) {
            problems.push(format!("grid.n: every axis needs at least one cell, got {n:?}"));
        }
        if self.grid.lengths.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            problems.push(format!("grid.lengths: must be positive, got {:?}", self.grid.lengths));
        }
        problems.extend(self.material.problems());
        if let Some(t) = &self.time {
            if !(t.dt > 0.0) || !t.dt.is_finite() {
                problems.push(format!("time.dt: must be > 0, got {}", t.dt));
            }
            if !(t.t_end > 0.0) || !t.t_end.is_finite() {
                problems.push(format!("time.T: must be > 0, got {}", t.t_end));
            }
            if !self.material.variant.supports_evolution() {
                problems.push(format!("material.variant: {} has no evolution problem", self.material.variant));
            }
        }
        for (i, term) in self.ic.terms.iter().enumerate() {
            let limit = match term.field {
                IcField::Displacement | IcField::Velocity => 3,
                IcField::MicroDistortion | IcField::MicroRate => 9,
            };
            if term.component >= limit {
                problems.push(format!("ic.terms[{i}].component: {} out of range 0..{limit}", term.component));
            }
        }
        for (i, term) in self.loads.terms.iter().enumerate() {
            let limit = match term.target {
                crate::dynamics::LoadTarget::Force => 3,
                crate::dynamics::LoadTarget::Moment => 9,
            };
            if term.component >= limit {
                problems.push(format!("loads.terms[{i}].component: {} out of range 0..{limit}", term.component));
            }
        }
        if let Some(c) = &self.constants {
            for s in &c.specs {
                if let Err(e) = InequalitySpec::parse(s) {
                    problems.push(format!("constants.specs: {e}"));
                }
            }
        }
        if let Some(d) = &self.dispersion {
            if d.path.is_empty() || d.points == 0 {
                problems.push("dispersion: path needs a vertex and points > 0".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn build_grid(&self) -> Result<Grid> {
        Grid::new(self.grid.n.cells(), self.grid.lengths)
    }

    pub fn build_material(&self) -> Result<Material> {
        self.material.build()
    }

    pub fn system(&self) -> Result<SystemMatrices> {
        let material = self.build_material()?;
        SystemMatrices::new(&self.build_grid()?, &material, self.material.variant)
    }

    pub fn loads(&self) -> Loads {
        if self.loads.terms.is_empty() {
            Loads::None
        } else {
            Loads::Separable(self.loads.terms.clone())
        }
    }

    pub fn initial_state(&self, sm: &SystemMatrices) -> Result<State> {
        self.ic.build(sm, self.seed)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let t = self.time.as_ref().ok_or_else(|| Error::Config("missing key `time`".into()))?;
        Ok(RunConfig {
            dt: t.dt,
            t_end: t.t_end,
            scheme: t.scheme,
            ledger_every: self.output.ledger_every.max(1),
            snapshot_every: (self.output.snapshot_every > 0).then_some(self.output.snapshot_every),
            stability: t.stability,
        })
    }
}

impl MaterialConfig {
    pub fn unit(variant: ModelVariant) -> Self {
        let m = IsotropicModuli::unit();
        Self {
            variant,
            mu_e: Some(m.mu_e),
            lambda_e: Some(m.lambda_e),
            mu_c: 0.0,
            mu_h: Some(m.mu_h),
            lambda_h: Some(m.lambda_h),
            alpha_1: Some(m.alpha_1),
            alpha_2: Some(m.alpha_2),
            alpha_3: Some(m.alpha_3),
            c_file: None,
            h_file: None,
            l_file: None,
        }
    }

    fn is_anisotropic(&self) -> bool {
        self.c_file.is_some() || self.h_file.is_some() || self.l_file.is_some()
    }

    /// The isotropic moduli, or the list of missing keys.
    pub fn moduli(&self) -> std::result::Result<IsotropicModuli, Vec<String>> {
        let keys = [
            ("mu_e", self.mu_e),
            ("lambda_e", self.lambda_e),
            ("mu_h", self.mu_h),
            ("lambda_h", self.lambda_h),
            ("alpha_1", self.alpha_1),
            ("alpha_2", self.alpha_2),
            ("alpha_3", self.alpha_3),
        ];
        let missing: Vec<String> = keys.iter().filter(|(_, v)| v.is_none()).map(|(k, _)| format!("material.{k}: missing key")).collect();
        if !missing.is_empty() {
            return Err(missing);
        }
        let v = |x: Option<f64>| x.unwrap_or_default();
        Ok(IsotropicModuli {
            mu_e: v(self.mu_e),
            lambda_e: v(self.lambda_e),
            mu_c: self.mu_c,
            mu_h: v(self.mu_h),
            lambda_h: v(self.lambda_h),
            alpha_1: v(self.alpha_1),
            alpha_2: v(self.alpha_2),
            alpha_3: v(self.alpha_3),
        })
    }

    fn problems(&self) -> Vec<String> {
        if self.is_anisotropic() {
            let missing: Vec<String> = [("c_file", &self.c_file), ("h_file", &self.h_file), ("l_file", &self.l_file)]
                .iter()
                .filter(|(_, f)| f.is_none())
                .map(|(k, _)| format!("material.{k}: missing key (anisotropic input needs all three files)"))
                .collect();
            return missing;
        }
        match self.moduli() {
            Err(missing) => missing,
            Ok(m) => validate_for_variant(&m, self.variant)
                .failures()
                .map(|c| format!("material: condpara: {} (value {})", c.condition, c.value))
                .collect(),
        }
    }

    pub fn build(&self) -> Result<Material> {
        let problems = self.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if self.is_anisotropic() {
            let read = |p: &Option<PathBuf>| read_mat9(p.as_ref().expect("checked above"));
            let c = read(&self.c_file)?;
            let class = if FourthOrderTensor::new(c, SymmetryClass::SymToSym).is_ok() {
                SymmetryClass::SymToSym
            } else {
                SymmetryClass::FullMajor
            };
            return Material::anisotropic(
                FourthOrderTensor::new(c, class)?,
                FourthOrderTensor::new(read(&self.h_file)?, SymmetryClass::SymToSym)?,
                FourthOrderTensor::new(read(&self.l_file)?, SymmetryClass::FullMajor)?,
            );
        }
        let m = self.moduli().map_err(|missing| Error::Config(missing.join("; ")))?;
        Material::isotropic(m, self.variant)
    }
}

/// Reads 81 whitespace-separated numbers (row-major 9×9).
pub fn read_mat9(path: &Path) -> Result<Mat9> {
    let text = std::fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("{}: bad number '{t}': {e}", path.display()))))
        .collect::<Result<_>>()?;
    if values.len() != 81 {
        return Err(Error::Config(format!("{}: expected 81 numbers, found {}", path.display(), values.len())));
    }
    Ok(Mat9::from_row_slice(&values))
}

impl IcConfig {
    pub fn build(&self, sm: &SystemMatrices, seed: u64) -> Result<State> {
        let grid = &sm.grid;
        let mut state = match self.preset {
            IcPreset::Zero => State::zeros(sm),
            IcPreset::Random => State::random(sm, self.seed.unwrap_or(seed)).scaled(self.amplitude),
            IcPreset::Bump => {
                let pi = std::f64::consts::PI;
                let bump = |x: [f64; 3], c: usize| {
                    self.amplitude
                        * (0..3).map(|d| (pi * x[d] / grid.lengths[d]).sin()).product::<f64>()
                        * (1.0 + 0.1 * c as f64)
                };
                let u = NodalField::from_fn(grid, 3, bump);
                let p = NodalField::from_fn(grid, 9, bump);
                State::from_fields(sm, &u, &NodalField::vector(grid), &p, &NodalField::tensor(grid), 0.0)?
            }
        };
        if !self.terms.is_empty() {
            let mut fields = [NodalField::vector(grid), NodalField::vector(grid), NodalField::tensor(grid), NodalField::tensor(grid)];
            for term in &self.terms {
                let slot = match term.field {
                    IcField::Displacement => 0,
                    IcField::Velocity => 1,
                    IcField::MicroDistortion => 2,
                    IcField::MicroRate => 3,
                };
                let f = &mut fields[slot];
                if term.component >= f.ncomp {
                    return Err(Error::Config(format!("ic term component {} out of range", term.component)));
                }
                let shaper = LoadTerm {
                    target: crate::dynamics::LoadTarget::Force,
                    component: 0,
                    amplitude: 1.0,
                    shape: term.shape,
                    poly: vec![1.0],
                    time: Default::default(),
                    omega: 0.0,
                };
                for node in 0..grid.node_count() {
                    let x = grid.node_coords(node);
                    f.node_mut(node)[term.component] += term.amplitude * shaper.spatial(x, grid.lengths);
                }
            }
            let [u, v, p, pd] = &fields;
            state = state.added(&State::from_fields(sm, u, v, p, pd, 0.0)?);
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
n = 3

[material]
mu_e = 1.0
lambda_e = 1.0
mu_h = 1.0
lambda_h = 1.0
alpha_1 = 1.0
alpha_2 = 1.0
alpha_3 = 1.0

[time]
dt = 0.1
T = 1.0
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.material.mu_c, 0.0);
        assert_eq!(c.time.as_ref().unwrap().scheme, Scheme::Midpoint);
        assert_eq!(c.material.variant, ModelVariant::Full);
        assert_eq!(c.grid.lengths, [1.0; 3]);
        assert_eq!(c.seed, 42);
        assert!(c.build_material().is_ok());
    }

    #[test]
    fn negative_mu_e_cites_condition() {
        let text = MINIMAL.replace("mu_e = 1.0", "mu_e = -1.0");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("condpara: mu_e > 0"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = MINIMAL.replace("[time]", "[time]\nviscosity = 0.1");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
        assert!(err.contains("viscosity"), "{err}");
    }

    #[test]
    fn missing_key_reported_with_path() {
        let text = MINIMAL.replace("alpha_2 = 1.0\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("material.alpha_2"), "{err}");
        let text = MINIMAL.replace("dt = 0.1\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("missing key") && err.contains("dt"), "{err}");
    }

    #[test]
    fn type_mismatch_reported() {
        let text = MINIMAL.replace("dt = 0.1", "dt = \"fast\"");
        assert!(matches!(parse_config(&text), Err(Error::Config(_))));
    }

    #[test]
    fn order_insensitive() {
        let reordered = MINIMAL.replace("mu_e = 1.0\nlambda_e = 1.0", "lambda_e = 1.0\nmu_e = 1.0");
        assert_eq!(parse_config(MINIMAL).unwrap(), parse_config(&reordered).unwrap());
    }

    #[test]
    fn non_positive_step_rejected() {
        let text = MINIMAL.replace("dt = 0.1", "dt = 0.0");
        assert!(parse_config(&text).unwrap_err().to_string().contains("time.dt"));
    }

    #[test]
    fn dev_dev_allows_negative_lambda_h() {
        let text = MINIMAL.replace("lambda_h = 1.0", "lambda_h = -5.0").replace("[material]", "[material]\nvariant = \"dev_dev\"");
        assert!(parse_config(&text).is_ok());
        let full = MINIMAL.replace("lambda_h = 1.0", "lambda_h = -5.0");
        assert!(parse_config(&full).is_err());
    }

    #[test]
    fn initial_state_terms() {
        let text = format!("{MINIMAL}\n[ic]\npreset = \"zero\"\n[[ic.terms]]\nfield = \"v\"\ncomponent = 1\namplitude = 2.0\nshape = {{ kind = \"sine\", modes = [1, 1, 1] }}\n");
        let c = parse_config(&text).unwrap();
        let sm = c.system().unwrap();
        let s = c.initial_state(&sm).unwrap();
        assert!(s.q.iter().all(|x| *x == 0.0));
        let f = s.fields(&sm);
        let center = sm.grid.node_index(1, 1, 1);
        let x = sm.grid.node_coords(center);
        let expected = 2.0 * (0..3).map(|d| (std::f64::consts::PI * x[d]).sin()).product::<f64>();
        assert!((f.v.node(center)[1] - expected).abs() < 1e-14);
    }

    #[test]
    fn anisotropic_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = Material::isotropic(IsotropicModuli::unit(), ModelVariant::Full).unwrap();
        for (name, t) in [("c.txt", &m.c), ("h.txt", &m.h), ("l.txt", &m.l)] {
            let body: Vec<String> = (0..9).map(|r| (0..9).map(|c| format!("{:.17e}", t.coefficients[(r, c)])).collect::<Vec<_>>().join(" ")).collect();
            std::fs::write(dir.path().join(name), body.join("\n")).unwrap();
        }
        let text = "[grid]\nn = 2\n[material]\nc_file = \"c.txt\"\nh_file = \"h.txt\"\nl_file = \"l.txt\"\n";
        let path = dir.path().join("scenario.toml");
        std::fs::write(&path, text).unwrap();
        let c = load_config(&path).unwrap();
        let built = c.build_material().unwrap();
        assert_eq!(built.c.coefficients, m.c.coefficients);
        assert_eq!(built.c.symmetry_class, SymmetryClass::SymToSym);
    }
}
