//! Run configuration: one TOML file with a section per concern. Command-line
//! flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fleetdesign::ingest::{CityAssembly, GridSpec, TimeSpec, TripColumns, TurnstileColumns};
use fleetdesign::{presets, EvalMode, Hyperparams, ObjectiveConfig, RewardDesign, Scenario, ScenarioConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name or path to a scenario file (JSON or TOML).
    pub scenario: Option<String>,
    pub design: Option<DesignSection>,
    pub hyper: HyperSection,
    /// Overrides of the objective weights, e.g. `w` and `m`.
    pub objective: toml::Table,
    pub eval: EvalSection,
    pub train: TrainSection,
    pub optimize: OptimizeSection,
    pub ingest: IngestSection,
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub mode: String,
    pub alpha: Option<f64>,
    pub grids: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct HyperSection {
    pub preset: Option<String>,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<EvalMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct OptimizeSection {
    /// Objective weights to sweep; empty means the objective's own `w`.
    pub w: Vec<f64>,
    /// Overrides of the BO settings (`lo`, `hi`, `budget`, `seed`, ...).
    #[serde(flatten)]
    pub bo: toml::Table,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub trips: Option<PathBuf>,
    pub turnstile: Option<PathBuf>,
    pub grid: Option<GridSpec>,
    pub time: Option<TimeSpec>,
    pub trip_columns: Option<TripColumns>,
    pub turnstile_columns: Option<TurnstileColumns>,
    /// When present, a scenario file is assembled from the demand tensor.
    pub assembly: Option<CityAssembly>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub alpha: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Replace fields of `base` with the entries of `table`, rejecting keys
/// `base` does not have.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: &toml::Table, what: &str) -> Result<T> {
    let mut merged = toml::Table::try_from(base).with_context(|| format!("encoding {what}"))?;
    for (key, value) in table {
        if !merged.contains_key(key) {
            bail!("unknown {what} setting {key:?}");
        }
        merged.insert(key.clone(), value.clone());
    }
    toml::Value::Table(merged).try_into().with_context(|| format!("invalid {what} settings"))
}

pub struct LoadedScenario {
    pub source: String,
    pub config: ScenarioConfig,
    pub scenario: Scenario,
}

/// A preset name or a scenario file.
pub fn load_scenario(source: &str) -> Result<LoadedScenario> {
    let config = match presets::by_name(source) {
        Some(config) => config,
        None => {
            let path = Path::new(source);
            if !path.exists() {
                bail!("scenario {source:?} is neither a preset ({}) nor an existing file", presets::NAMES.join(", "));
            }
            let text = std::fs::read_to_string(path).with_context(|| format!("reading scenario {source}"))?;
            if path.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).with_context(|| format!("parsing scenario {source}"))?
            } else {
                serde_json::from_str(&text).with_context(|| format!("parsing scenario {source}"))?
            }
        }
    };
    let scenario = Scenario::build(config.clone()).with_context(|| format!("invalid scenario {source}"))?;
    Ok(LoadedScenario { source: source.to_string(), config, scenario })
}

pub const HYPER_PRESETS: [&str; 4] = ["default", "two-by-two", "two-driver", "city"];

pub fn hyper_preset(name: &str) -> Result<Hyperparams> {
    Ok(match name {
        "default" => Hyperparams::default(),
        "two-by-two" => Hyperparams::two_by_two(),
        "two-driver" => Hyperparams::two_driver(),
        "city" => Hyperparams::city(),
        _ => bail!("unknown hyperparameter preset {name:?}; expected one of {}", HYPER_PRESETS.join(", ")),
    })
}

/// Preset tuned for a built-in scenario; `default` for scenario files.
pub fn default_hyper_preset(scenario: &str) -> &'static str {
    match scenario {
        "two-driver" => "two-driver",
        "service-charge-2x2" => "two-by-two",
        "synthetic-city" => "city",
        _ => "default",
    }
}

/// Design for a built-in scenario when none is given.
pub fn default_design_mode(scenario: &str) -> &'static str {
    match scenario {
        "synthetic-city" => "toll",
        "two-driver" => "none",
        _ => "service_charge",
    }
}

pub fn build_design(mode: &str, alpha: Option<f64>, grids: Option<Vec<usize>>) -> Result<RewardDesign> {
    let design = match mode.replace('-', "_").as_str() {
        "none" => RewardDesign::None,
        "service_charge" => RewardDesign::ServiceCharge { alpha: alpha.unwrap_or(0.0) },
        "toll" => RewardDesign::Toll { alpha: alpha.unwrap_or(0.0) },
        "flat_deduction" | "deduction" => RewardDesign::FlatDeduction {
            alpha: alpha.unwrap_or(0.0),
            grids: grids.ok_or_else(|| anyhow!("a flat deduction needs its grids"))?,
        },
        other => bail!("unknown design mode {other:?}; expected none, service_charge, toll or flat_deduction"),
    };
    design.validate()?;
    Ok(design)
}

pub fn objective_for(design: &RewardDesign, overrides: &toml::Table, w: Option<f64>) -> Result<ObjectiveConfig> {
    let mut objective = overlay(&ObjectiveConfig::for_kind(design.objective_kind()), overrides, "objective")?;
    if let Some(w) = w {
        objective.w = w;
    }
    objective.validate()?;
    Ok(objective)
}
