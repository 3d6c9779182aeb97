//! Experiment configuration: typed defaults, TOML config files, and
//! `--section.key=value` command-line overrides.
//!
//! The config file is a flat key-value file with one section per module
//! (see `config.example.toml` at the repository root). Every key can be
//! overridden on the command line as `--section.key=value`; overrides are
//! type-checked against the schema before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::harness::data::SyntheticSpec;
use crate::harness::HarnessError;
use crate::model::{db_to_linear, Point, Rect, SystemConfig};
use crate::stackelberg::SolverSettings;
use crate::mdl::TrainSettings;

// ---------------------------------------------------------------------------
// Raw schema (mirrors the file layout, every field defaulted)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    seed: u64,
    system: RawSystem,
    workers: RawWorkers,
    data: RawData,
    mechanisms: RawMechanisms,
    solver: RawSolver,
    train: RawTrain,
    audit: RawAudit,
    output: RawOutput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSystem {
    g_db: f64,
    bandwidth: f64,
    alpha: f64,
    eta: f64,
    gamma_db: f64,
    h: f64,
    a1: f64,
    a2: f64,
    area_side: f64,
}

impl Default for RawSystem {
    fn default() -> Self {
        RawSystem {
            g_db: 90.0,
            bandwidth: 60e6,
            alpha: 2.0,
            eta: 0.6,
            gamma_db: -30.0,
            h: 10.0,
            a1: 1e4,
            a2: 200.0,
            area_side: 200.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawWorkers {
    count: u64,
    b_min: f64,
    b_max: f64,
}

impl Default for RawWorkers {
    fn default() -> Self {
        RawWorkers { count: 40, b_min: 1e-4, b_max: 1.1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawData {
    source: String,
    samples: u64,
    path: String,
    slot: f64,
    train_fraction: f64,
    split: String,
    mixture_centers: String,
    mixture_sigma: f64,
    rects: String,
    cluster_a: String,
    cluster_b: String,
    cluster_noise: f64,
    cluster_k_min: u64,
    cluster_k_max: u64,
}

impl Default for RawData {
    fn default() -> Self {
        RawData {
            source: "uniform".into(),
            samples: 1000,
            path: String::new(),
            slot: 3600.0,
            train_fraction: 0.8,
            split: "chronological".into(),
            mixture_centers: "0.3,0.3;0.7,0.7".into(),
            mixture_sigma: 0.05,
            rects: String::new(),
            cluster_a: "0.25,0.25".into(),
            cluster_b: "0.75,0.75".into(),
            cluster_noise: 0.08,
            cluster_k_min: 3,
            cluster_k_max: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawMechanisms {
    list: String,
    msc_constant: String,
    msc_grid: u64,
}

impl Default for RawMechanisms {
    fn default() -> Self {
        RawMechanisms {
            list: "med_lower,msc,opt".into(),
            msc_constant: "auto".into(),
            msc_grid: 21,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSolver {
    rate_tol: f64,
    max_iters: u64,
    p_max: f64,
    p_tol: f64,
}

impl Default for RawSolver {
    fn default() -> Self {
        RawSolver { rate_tol: 0.0, max_iters: 400, p_max: 0.0, p_tol: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawTrain {
    learning_rate: f64,
    batch: u64,
    epochs: u64,
    j: u64,
    k: u64,
}

impl Default for RawTrain {
    fn default() -> Self {
        RawTrain { learning_rate: 0.005, batch: 200, epochs: 50, j: 8, k: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawAudit {
    grid: u64,
}

impl Default for RawAudit {
    fn default() -> Self {
        RawAudit { grid: 21 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawOutput {
    dir: String,
}

impl Default for RawOutput {
    fn default() -> Self {
        RawOutput { dir: "out".into() }
    }
}

// ---------------------------------------------------------------------------
// Validated configuration
// ---------------------------------------------------------------------------

/// Where deployment samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Traces { path: PathBuf, slot: f64 },
}

/// Train/test partition rule for the sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRule {
    /// First `train_fraction` of the samples train, the rest test.
    Chronological,
    /// Seed-deterministic shuffle before the same split.
    Random,
}

/// Fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemConfig,
    pub worker_count: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub data: DataSource,
    pub samples: usize,
    pub train_fraction: f64,
    pub split: SplitRule,
    /// Mechanism names in report order.
    pub mechanisms: Vec<String>,
    /// Fixed MSC phantom constant (physical units); `None` = pick by grid
    /// search on the training split.
    pub msc_constant: Option<Point>,
    pub msc_grid: usize,
    pub solver: SolverSettings,
    pub train: TrainSettings,
    pub mdl_j: usize,
    pub mdl_k: usize,
    pub audit_grid: usize,
    pub output_dir: PathBuf,
}

/// Mechanism names accepted in `mechanisms.list`.
pub const MECHANISM_NAMES: [&str; 6] =
    ["med_average", "med_lower", "msc", "mdl", "opt", "mean"];

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Config(msg.into()))
}

fn parse_point(text: &str, what: &str) -> Result<Point, HarnessError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return cfg_err(format!("{what}: expected `x,y`, got `{text}`"));
    }
    let x: f64 = parts[0]
        .parse()
        .map_err(|e| HarnessError::Config(format!("{what}: {e}")))?;
    let y: f64 = parts[1]
        .parse()
        .map_err(|e| HarnessError::Config(format!("{what}: {e}")))?;
    let p = Point::new(x, y);
    if !p.is_finite() {
        return cfg_err(format!("{what}: coordinates must be finite"));
    }
    Ok(p)
}

fn parse_points(text: &str, what: &str) -> Result<Vec<Point>, HarnessError> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_point(s, what))
        .collect()
}

fn parse_rects(text: &str, what: &str) -> Result<Vec<Rect>, HarnessError> {
    let mut rects = Vec::new();
    for chunk in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let vals: Result<Vec<f64>, _> =
            chunk.split(',').map(str::trim).map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| HarnessError::Config(format!("{what}: {e}")))?;
        if vals.len() != 4 {
            return cfg_err(format!("{what}: expected `x0,y0,x1,y1`, got `{chunk}`"));
        }
        let rect = Rect::new(Point::new(vals[0], vals[1]), Point::new(vals[2], vals[3]))
            .map_err(|e| HarnessError::Config(format!("{what}: {e}")))?;
        rects.push(rect);
    }
    Ok(rects)
}

impl ExperimentConfig {
    /// Load a configuration: defaults, then the optional file, then
    /// `--section.key=value` overrides, then the global `--seed`/`--out`
    /// flags. Every failure is a [`HarnessError::Config`].
    pub fn load(
        file: Option<&Path>,
        overrides: &[(String, String)],
        seed_flag: Option<u64>,
        out_flag: Option<&Path>,
    ) -> Result<Self, HarnessError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    HarnessError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };

        let oracle = Value::try_from(RawConfig::default())
            .expect("default config serializes")
            .as_table()
            .expect("default config is a table")
            .clone();

        for (key, value) in overrides {
            apply_override(&mut table, &oracle, key, value)?;
        }

        let raw: RawConfig = Value::Table(table)
            .try_into()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut cfg = raw.validate()?;
        if let Some(seed) = seed_flag {
            cfg.seed = seed;
            cfg.solver.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(out) = out_flag {
            cfg.output_dir = out.to_path_buf();
        }
        Ok(cfg)
    }

    /// The built-in defaults: a 200 m x 200 m uniform market of 40 workers.
    pub fn defaults() -> Self {
        RawConfig::default().validate().expect("defaults are valid")
    }

    /// Serialized defaults, the reference for every section and key.
    pub fn default_file() -> String {
        toml::to_string_pretty(&RawConfig::default()).expect("defaults serialize")
    }
}

fn apply_override(
    table: &mut toml::Table,
    oracle: &toml::Table,
    key: &str,
    value: &str,
) -> Result<(), HarnessError> {
    let segments: Vec<&str> = key.split('.').collect();
    match segments.as_slice() {
        [root] => {
            let expected = oracle
                .get(*root)
                .ok_or_else(|| HarnessError::Config(format!("unknown key `{key}`")))?;
            let coerced = coerce(value, expected, key)?;
            table.insert((*root).to_string(), coerced);
        }
        [section, field] => {
            let expected = oracle
                .get(*section)
                .and_then(Value::as_table)
                .and_then(|t| t.get(*field))
                .ok_or_else(|| HarnessError::Config(format!("unknown key `{key}`")))?;
            let coerced = coerce(value, expected, key)?;
            let entry = table
                .entry((*section).to_string())
                .or_insert_with(|| Value::Table(toml::Table::new()));
            match entry.as_table_mut() {
                Some(t) => {
                    t.insert((*field).to_string(), coerced);
                }
                None => {
                    return cfg_err(format!("`{section}` is not a section"));
                }
            }
        }
        _ => return cfg_err(format!("override key `{key}` must be `key` or `section.key`")),
    }
    Ok(())
}

fn coerce(value: &str, expected: &Value, key: &str) -> Result<Value, HarnessError> {
    match expected {
        Value::String(_) => Ok(Value::String(value.to_string())),
        Value::Integer(_) => value
            .parse::<i64>()
            .map(Value::Integer)
            .map_err(|_| HarnessError::Config(format!("`{key}` expects an integer, got `{value}`"))),
        Value::Float(_) => value
            .parse::<f64>()
            .map(Value::Float)
            .map_err(|_| HarnessError::Config(format!("`{key}` expects a number, got `{value}`"))),
        Value::Boolean(_) => value
            .parse::<bool>()
            .map(Value::Boolean)
            .map_err(|_| HarnessError::Config(format!("`{key}` expects true/false, got `{value}`"))),
        _ => cfg_err(format!("`{key}` cannot be overridden on the command line")),
    }
}

impl RawConfig {
    fn validate(self) -> Result<ExperimentConfig, HarnessError> {
        let s = &self.system;
        if !(s.area_side > 0.0) {
            return cfg_err(format!("system.area_side must be positive, got {}", s.area_side));
        }
        let system = SystemConfig::new(
            db_to_linear(s.g_db),
            s.bandwidth,
            s.alpha,
            s.eta,
            db_to_linear(s.gamma_db),
            s.h,
            s.a1,
            s.a2,
            Rect::square(s.area_side),
        )
        .map_err(|e| HarnessError::Config(e.to_string()))?;

        let w = &self.workers;
        if w.count == 0 {
            return cfg_err("workers.count must be at least 1");
        }
        if !(w.b_min > 0.0) || !(w.b_max >= w.b_min) {
            return cfg_err(format!(
                "workers.b range must satisfy 0 < b_min <= b_max, got [{}, {}]",
                w.b_min, w.b_max
            ));
        }

        let d = &self.data;
        if d.samples == 0 {
            return cfg_err("data.samples must be at least 1");
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return cfg_err(format!(
                "data.train_fraction must be in (0,1), got {}",
                d.train_fraction
            ));
        }
        let split = match d.split.as_str() {
            "chronological" => SplitRule::Chronological,
            "random" => SplitRule::Random,
            other => return cfg_err(format!("data.split must be chronological|random, got `{other}`")),
        };
        let data = match d.source.as_str() {
            "uniform" => DataSource::Synthetic(SyntheticSpec::Uniform),
            "gaussian_mixture" => {
                let centers = parse_points(&d.mixture_centers, "data.mixture_centers")?;
                DataSource::Synthetic(SyntheticSpec::GaussianMixture {
                    centers,
                    sigma: d.mixture_sigma,
                })
            }
            "rectangles" => {
                let rects = parse_rects(&d.rects, "data.rects")?;
                DataSource::Synthetic(SyntheticSpec::Rectangles { rects })
            }
            "two_cluster" => DataSource::Synthetic(SyntheticSpec::TwoCluster {
                a: parse_point(&d.cluster_a, "data.cluster_a")?,
                b: parse_point(&d.cluster_b, "data.cluster_b")?,
                noise: d.cluster_noise,
                k_min: d.cluster_k_min as usize,
                k_max: d.cluster_k_max as usize,
            }),
            "traces" => {
                if d.path.is_empty() {
                    return cfg_err("data.path is required when data.source = traces");
                }
                if !(d.slot > 0.0) {
                    return cfg_err(format!("data.slot must be positive, got {}", d.slot));
                }
                DataSource::Traces { path: PathBuf::from(&d.path), slot: d.slot }
            }
            other => {
                return cfg_err(format!(
                    "data.source must be one of uniform|gaussian_mixture|rectangles|two_cluster|traces, got `{other}`"
                ))
            }
        };

        let mut mechanisms = Vec::new();
        for name in self.mechanisms.list.split(',').map(str::trim) {
            if name.is_empty() {
                continue;
            }
            if !MECHANISM_NAMES.contains(&name) {
                return cfg_err(format!(
                    "unknown mechanism `{name}` (expected one of {})",
                    MECHANISM_NAMES.join("|")
                ));
            }
            mechanisms.push(name.to_string());
        }
        let msc_constant = match self.mechanisms.msc_constant.as_str() {
            "auto" => None,
            text => {
                let p = parse_point(text, "mechanisms.msc_constant")?;
                if !system.task_area.contains(p) {
                    return cfg_err(format!(
                        "mechanisms.msc_constant ({}, {}) lies outside the task area",
                        p.x, p.y
                    ));
                }
                Some(p)
            }
        };
        if self.mechanisms.msc_grid < 2 {
            return cfg_err("mechanisms.msc_grid must be at least 2");
        }

        let sv = &self.solver;
        if sv.rate_tol < 0.0 || sv.p_max < 0.0 || sv.p_tol < 0.0 {
            return cfg_err("solver tolerances must be nonnegative (0 = automatic)");
        }
        if sv.max_iters == 0 {
            return cfg_err("solver.max_iters must be at least 1");
        }
        let solver = SolverSettings {
            rate_tol: sv.rate_tol,
            max_iters: sv.max_iters as usize,
            p_max: (sv.p_max > 0.0).then_some(sv.p_max),
            p_tol: (sv.p_tol > 0.0).then_some(sv.p_tol),
            seed: self.seed,
        };

        let t = &self.train;
        if !(t.learning_rate >= 0.0) {
            return cfg_err(format!("train.learning_rate must be >= 0, got {}", t.learning_rate));
        }
        if t.batch == 0 || t.j == 0 || t.k == 0 {
            return cfg_err("train.batch, train.j, train.k must all be at least 1");
        }
        let train = TrainSettings {
            learning_rate: t.learning_rate,
            batch: t.batch as usize,
            epochs: t.epochs as usize,
            seed: self.seed,
        };

        if self.audit.grid < 2 {
            return cfg_err("audit.grid must be at least 2");
        }
        if self.output.dir.is_empty() {
            return cfg_err("output.dir must not be empty");
        }

        Ok(ExperimentConfig {
            seed: self.seed,
            system,
            worker_count: self.workers.count as usize,
            b_min: w.b_min,
            b_max: w.b_max,
            data,
            samples: d.samples as usize,
            train_fraction: d.train_fraction,
            split,
            mechanisms,
            msc_constant,
            msc_grid: self.mechanisms.msc_grid as usize,
            solver,
            train,
            mdl_j: t.j as usize,
            mdl_k: t.k as usize,
            audit_grid: self.audit.grid as usize,
            output_dir: PathBuf::from(&self.output.dir),
        })
    }
}
