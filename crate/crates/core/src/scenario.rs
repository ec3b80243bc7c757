//! Load and generation-availability time series, one row per 5-minute step.
//!
//! CSV layout: header `t,load_<id>...,genmax_<id>...`, then rows `t = 0..=T`.
//! Row 0 is the starting point; an episode takes `T` steps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub const STEP_MINUTES: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    /// Demand per load, indexed `[t][load]`.
    pub loads: Vec<Vec<f64>>,
    /// Available generation per generator, indexed `[t][generator]`.
    pub gen_max: Vec<Vec<f64>>,
}

impl Scenario {
    /// Number of steps in an episode.
    pub fn horizon(&self) -> usize {
        self.loads.len().saturating_sub(1)
    }

    pub fn total_demand(&self, t: usize) -> f64 {
        self.loads[t].iter().sum()
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let mut problems = Vec::new();
        if self.loads.len() < 2 {
            problems.push("needs at least two rows".to_string());
        }
        if self.loads.len() != self.gen_max.len() {
            problems.push(format!(
                "{} load rows but {} generation rows",
                self.loads.len(),
                self.gen_max.len()
            ));
        }
        for (t, row) in self.loads.iter().enumerate() {
            if row.len() != grid.n_loads() {
                problems.push(format!(
                    "row {t}: {} load columns, grid has {} loads",
                    row.len(),
                    grid.n_loads()
                ));
            }
            if let Some((i, v)) = row.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                problems.push(format!("row {t}: load_{i} = {v} is negative"));
            }
        }
        for (t, row) in self.gen_max.iter().enumerate() {
            if row.len() != grid.n_generators() {
                problems.push(format!(
                    "row {t}: {} genmax columns, grid has {} generators",
                    row.len(),
                    grid.n_generators()
                ));
            }
            if let Some((i, v)) = row.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                problems.push(format!("row {t}: genmax_{i} = {v} is negative"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScenario {
                name: self.name.clone(),
                problems,
            })
        }
    }

    pub fn to_csv(&self) -> String {
        let n_loads = self.loads.first().map_or(0, Vec::len);
        let n_gens = self.gen_max.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 0..n_loads {
            write!(out, ",load_{i}").unwrap();
        }
        for i in 0..n_gens {
            write!(out, ",genmax_{i}").unwrap();
        }
        out.push('\n');
        for (t, (loads, gens)) in self.loads.iter().zip(&self.gen_max).enumerate() {
            write!(out, "{t}").unwrap();
            for v in loads.iter().chain(gens) {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(name: &str, text: &str, grid: &GridSpec) -> Result<Scenario> {
        let origin = PathBuf::from(name);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(&origin, e.to_string()))?
            .clone();
        let mut expected = vec!["t".to_string()];
        expected.extend((0..grid.n_loads()).map(|i| format!("load_{i}")));
        expected.extend((0..grid.n_generators()).map(|i| format!("genmax_{i}")));
        let got: Vec<&str> = headers.iter().collect();
        if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::parse(
                &origin,
                format!("header {:?} does not match grid, expected {:?}", got, expected),
            ));
        }
        let mut loads = Vec::new();
        let mut gen_max = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::parse(&origin, format!("line {line}: {e}")))?;
            let mut values = Vec::with_capacity(record.len());
            for (col, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::parse(
                        &origin,
                        format!("line {line}, column {}: not a number: {field:?}", &headers[col]),
                    )
                })?;
                values.push(v);
            }
            if values[0] as usize != row {
                return Err(Error::parse(
                    &origin,
                    format!("line {line}: expected t = {row}, found {}", values[0]),
                ));
            }
            let split = 1 + grid.n_loads();
            loads.push(values[1..split].to_vec());
            gen_max.push(values[split..].to_vec());
        }
        let scenario = Scenario {
            name: name.to_string(),
            loads,
            gen_max,
        };
        scenario.validate(grid)?;
        Ok(scenario)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loads every `*.csv` in `dir`, sorted by file name.
pub fn load_scenarios(dir: &Path, grid: &GridSpec) -> Result<Vec<Scenario>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::parse(dir, "no scenario CSV files found"));
    }
    paths
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let name = path.file_stem().unwrap_or_default().to_string_lossy();
            Scenario::from_csv(&name, &text, grid).map_err(|e| match e {
                Error::Parse { message, .. } => Error::parse(path, message),
                other => other,
            })
        })
        .collect()
}

/// Synthetic daily demand shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioProfile {
    pub horizon: usize,
    /// Clock time of row 0, in hours.
    pub start_hour: f64,
    /// Range of the per-scenario peak scaling factor.
    pub peak_scale: (f64, f64),
    /// Per-load static scaling spread (uniform, +/-).
    pub load_spread: f64,
    /// Standard deviation of the slow multiplicative noise.
    pub noise: f64,
}

impl Default for ScenarioProfile {
    fn default() -> Self {
        ScenarioProfile {
            horizon: 288,
            start_hour: 6.0,
            peak_scale: (0.97, 1.05),
            load_spread: 0.04,
            noise: 0.015,
        }
    }
}

/// Demand multiplier at a clock hour: night trough, midday plateau, evening peak.
pub fn daily_shape(hour: f64) -> f64 {
    let h = hour.rem_euclid(24.0);
    let bump = |center: f64, width: f64| {
        let d = (h - center + 12.0).rem_euclid(24.0) - 12.0;
        (-(d / width).powi(2)).exp()
    };
    0.60 + 0.30 * bump(13.0, 4.0) + 0.14 * bump(18.5, 1.8)
}

impl ScenarioProfile {
    /// `count` scenarios named `{prefix}_00`, `{prefix}_01`, ...; scenario `i`
    /// is drawn from seed `seed + i`.
    pub fn generate_split(&self, grid: &GridSpec, prefix: &str, seed: u64, count: usize) -> Vec<Scenario> {
        (0..count)
            .map(|i| self.generate(grid, &format!("{prefix}_{i:02}"), seed + i as u64))
            .collect()
    }

    pub fn generate(&self, grid: &GridSpec, name: &str, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.gen_range(self.peak_scale.0..=self.peak_scale.1);
        let per_load: Vec<f64> = grid
            .loads
            .iter()
            .map(|_| 1.0 + rng.gen_range(-self.load_spread..=self.load_spread))
            .collect();
        let mut noise = vec![0.0; grid.n_loads()];
        let rho: f64 = 0.97;
        let innovation = self.noise * (1.0 - rho * rho).sqrt();
        let mut loads = Vec::with_capacity(self.horizon + 1);
        let mut gen_max = Vec::with_capacity(self.horizon + 1);
        for t in 0..=self.horizon {
            let hour = self.start_hour + t as f64 * STEP_MINUTES / 60.0;
            let shape = daily_shape(hour);
            let row = grid
                .loads
                .iter()
                .enumerate()
                .map(|(i, load)| {
                    noise[i] = rho * noise[i] + innovation * standard_normal(&mut rng);
                    let v = load.nominal_p * scale * per_load[i] * shape * (1.0 + noise[i]);
                    round6(v.max(0.0))
                })
                .collect();
            loads.push(row);
            gen_max.push(grid.generators.iter().map(|g| round6(g.p_max)).collect());
        }
        Scenario {
            name: name.to_string(),
            loads,
            gen_max,
        }
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple to reason about.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
