//! Scenario files and output writers.

pub mod config;
pub mod vtk;

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::dispersion::DispersionPoint;
use crate::dynamics::EnergyLedger;
use crate::error::Result;
use crate::inequalities::{classify, Classification, ConstantEstimate, RefinementStudy};

pub use config::{load_config, parse_config, ScenarioConfig};
pub use vtk::{read_snapshot, write_snapshot};

pub const LEDGER_HEADER: &str = "t,kinetic,elastic,microstrain,dislocation,total,power,work,drift";
pub const CONSTANTS_HEADER: &str = "spec,grid,constant,lambda_min,iterations,classification";

/// Lossless float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_ledger(ledger: &EnergyLedger, mut w: impl Write) -> Result<()> {
    writeln!(w, "{LEDGER_HEADER}")?;
    for r in &ledger.rows {
        let row = [r.t, r.kinetic, r.elastic, r.microstrain, r.dislocation, r.total, r.power, r.work, r.drift];
        writeln!(w, "{}", row.map(fmt_f64).join(","))?;
    }
    Ok(())
}

fn constant_row(e: &ConstantEstimate, class: Classification, mut w: impl Write) -> Result<()> {
    let [nx, ny, nz] = e.grid;
    writeln!(
        w,
        "{},{nx}x{ny}x{nz},{},{},{},{}",
        e.spec,
        fmt_f64(e.constant),
        fmt_f64(e.lambda_min),
        e.iterations,
        class.label()
    )?;
    Ok(())
}

/// One row per level; every row carries the study's classification.
pub fn write_constants(studies: &[RefinementStudy], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CONSTANTS_HEADER}")?;
    for s in studies {
        for level in &s.levels {
            constant_row(level, s.classification, &mut w)?;
        }
    }
    Ok(())
}

/// Single estimates, each classified on its own.
pub fn write_estimates(estimates: &[ConstantEstimate], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CONSTANTS_HEADER}")?;
    for e in estimates {
        constant_row(e, classify(&[e.constant]), &mut w)?;
    }
    Ok(())
}

pub fn write_dispersion(points: &[DispersionPoint], mut w: impl Write) -> Result<()> {
    let branches = points.first().map_or(crate::dispersion::SYMBOL_DIM, |p| p.omegas.len());
    let omegas: Vec<String> = (1..=branches).map(|j| format!("omega_{j}")).collect();
    writeln!(w, "k_index,|k|,kx,ky,kz,{}", omegas.join(","))?;
    for (i, p) in points.iter().enumerate() {
        let mut cols = vec![i.to_string(), fmt_f64(p.k_norm())];
        cols.extend(p.k.iter().map(|x| fmt_f64(*x)));
        cols.extend(p.omegas.iter().map(|x| fmt_f64(*x)));
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

pub fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Reproduction record written next to every CLI output.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub arguments: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub config: Option<ScenarioConfig>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, arguments: Vec<String>, seed: u64, threads: usize, config: Option<ScenarioConfig>) -> Self {
        Self {
            tool: "micromorphx",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            arguments,
            seed,
            threads,
            config,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(self, &dir.join("manifest.json"))
    }
}
