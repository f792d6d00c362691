//! Run and sweep specifications, read from JSON. Partial JSON objects are
//! merged over the defaults, so a spec only lists what it changes.

use std::path::{Path, PathBuf};

use idw_core::dataset::LogFormat;
use idw_core::experiment::{ExperimentConfig, Method};
use idw_core::synthetic::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

/// Where the interactions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated data; each run seed also seeds the generator.
    Synthetic {
        config: SynthConfig,
        /// Clusters counted as head interests in head/tail metrics.
        head_clusters: Vec<usize>,
    },
    Log {
        path: PathBuf,
        format: LogFormat,
    },
}

/// Default hyperparameters a spec starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Real,
    /// Synthetic metric runs (d = 16).
    Synthetic,
    /// Synthetic runs meant for plotting item representations (d = 2).
    #[serde(rename = "synthetic_2d")]
    Synthetic2d,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Real => ExperimentConfig::real(),
            Preset::Synthetic => ExperimentConfig::synthetic(),
            Preset::Synthetic2d => ExperimentConfig::synthetic_2d(),
        }
    }
}

/// A fully resolved run specification. This is what gets echoed into run
/// directories, so feeding an echo back reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataSource,
    pub experiment: ExperimentConfig,
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Write `items.csv` with the item representations of each run.
    pub dump_embeddings: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), Failure> {
        if self.seeds.is_empty() {
            return Err(Failure::usage("seeds: at least one seed is required"));
        }
        match &self.data {
            DataSource::Log { path, .. } if !path.exists() => {
                return Err(Failure::usage(format!(
                    "data.path: {} does not exist",
                    path.display()
                )));
            }
            DataSource::Synthetic {
                config,
                head_clusters,
            } => {
                config
                    .validate()
                    .map_err(|e| Failure::usage(format!("data.config: {e}")))?;
                if let Some(c) = head_clusters.iter().find(|&&c| c >= config.num_clusters) {
                    return Err(Failure::usage(format!(
                        "data.head_clusters: cluster {c} does not exist"
                    )));
                }
            }
            DataSource::Log { .. } => {}
        }
        self.experiment
            .validate()
            .map_err(|e| Failure::usage(format!("experiment: {e}")))
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{} is not valid JSON: {e}", path.display())))
}

fn parse<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> Result<T, Failure> {
    serde_json::from_value(value).map_err(|e| Failure::usage(format!("{what}: {e}")))
}

/// Resolves a (possibly partial) spec. Missing `data` means the default
/// synthetic generator; missing hyperparameters come from `preset`, which
/// itself defaults by data source.
pub fn resolve_spec(raw: &Value) -> Result<ExperimentSpec, Failure> {
    let obj = raw
        .as_object()
        .ok_or_else(|| Failure::usage("spec must be a JSON object"))?;
    let known = [
        "data",
        "experiment",
        "method",
        "seeds",
        "dump_embeddings",
        "preset",
    ];
    if let Some(k) = obj.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Failure::usage(format!("unknown spec field `{k}`")));
    }

    let data = match obj.get("data") {
        None => DataSource::Synthetic {
            config: SynthConfig::default(),
            head_clusters: vec![0, 1],
        },
        Some(d) if d.get("kind").and_then(Value::as_str) == Some("synthetic") => {
            let mut config = serde_json::to_value(SynthConfig::default()).expect("serializable");
            if let Some(patch) = d.get("config") {
                merge(&mut config, patch);
            }
            let head = d
                .get("head_clusters")
                .cloned()
                .unwrap_or(serde_json::json!([0, 1]));
            DataSource::Synthetic {
                config: parse(config, "data.config")?,
                head_clusters: parse(head, "data.head_clusters")?,
            }
        }
        Some(d) => parse(d.clone(), "data")?,
    };

    let preset = match obj.get("preset") {
        Some(p) => parse(p.clone(), "preset")?,
        None if matches!(data, DataSource::Synthetic { .. }) => Preset::Synthetic,
        None => Preset::Real,
    };
    let mut experiment = serde_json::to_value(preset.config()).expect("serializable");
    if let Some(patch) = obj.get("experiment") {
        merge(&mut experiment, patch);
    }

    Ok(ExperimentSpec {
        data,
        experiment: parse(experiment, "experiment")?,
        method: match obj.get("method") {
            Some(m) => parse(m.clone(), "method")?,
            None => Method::Mur,
        },
        seeds: match obj.get("seeds") {
            Some(s) => parse(s.clone(), "seeds")?,
            None => vec![0],
        },
        dump_embeddings: match obj.get("dump_embeddings") {
            Some(b) => parse(b.clone(), "dump_embeddings")?,
            None => false,
        },
    })
}

/// Reads and resolves a spec file; `None` gives the default synthetic spec.
pub fn load_spec(path: Option<&Path>) -> Result<ExperimentSpec, Failure> {
    match path {
        Some(p) => resolve_spec(&read_json(p)?),
        None => resolve_spec(&serde_json::json!({})),
    }
}

/// The hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    InterestExponent,
    #[serde(alias = "M")]
    M,
    Eta,
    Momentum,
    Strategy,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::InterestExponent => "interest_exponent",
            Axis::M => "m",
            Axis::Eta => "eta",
            Axis::Momentum => "momentum",
            Axis::Strategy => "strategy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<Value>,
    /// Methods run at every axis value; ignored for the strategy axis,
    /// whose values are the methods.
    pub methods: Vec<Method>,
    pub base: ExperimentSpec,
}

/// One point of a sweep: the label used in the CSV and the spec to run.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub methods: Vec<Method>,
    pub spec: ExperimentSpec,
}

impl SweepSpec {
    pub fn from_value(raw: &Value) -> Result<Self, Failure> {
        let obj = raw
            .as_object()
            .ok_or_else(|| Failure::usage("sweep spec must be a JSON object"))?;
        let base = resolve_spec(obj.get("base").unwrap_or(&serde_json::json!({})))?;
        let sweep = SweepSpec {
            axis: parse(obj.get("axis").cloned().unwrap_or(Value::Null), "axis")?,
            values: parse(obj.get("values").cloned().unwrap_or(Value::Null), "values")?,
            methods: match obj.get("methods") {
                Some(m) => parse(m.clone(), "methods")?,
                None => vec![base.method],
            },
            base,
        };
        sweep.points()?;
        Ok(sweep)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        Self::from_value(&read_json(path)?)
    }

    /// Expands and validates every axis value.
    pub fn points(&self) -> Result<Vec<SweepPoint>, Failure> {
        if self.values.is_empty() {
            return Err(Failure::usage("values: a sweep needs at least one value"));
        }
        if self.methods.is_empty() && self.axis != Axis::Strategy {
            return Err(Failure::usage("methods: at least one method is required"));
        }
        self.base.validate()?;
        self.values.iter().map(|v| self.point(v)).collect()
    }

    fn point(&self, value: &Value) -> Result<SweepPoint, Failure> {
        let bad = || {
            Failure::usage(format!(
                "values: {value} is not valid for axis {}",
                self.axis.name()
            ))
        };
        let mut spec = self.base.clone();
        let mut methods = self.methods.clone();
        let number = || value.as_f64().filter(|x| x.is_finite()).ok_or_else(bad);
        let label = match self.axis {
            Axis::InterestExponent => {
                let x = number()?;
                match &mut spec.data {
                    DataSource::Synthetic { config, .. } => config.interest_exponent = x,
                    DataSource::Log { .. } => {
                        return Err(Failure::usage(
                            "axis: interest_exponent needs synthetic data",
                        ))
                    }
                }
                x.to_string()
            }
            Axis::M => {
                let m = value.as_u64().filter(|&m| m >= 1).ok_or_else(bad)?;
                spec.experiment.tower.num_reps = m as usize;
                m.to_string()
            }
            Axis::Eta => {
                let x = number()?;
                spec.experiment.idw.eta = x;
                x.to_string()
            }
            Axis::Momentum => {
                let x = number()?;
                spec.experiment.idw.momentum = x;
                x.to_string()
            }
            Axis::Strategy => {
                let m: Method = value.as_str().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                methods = vec![m];
                spec.method = m;
                m.name().to_string()
            }
        };
        spec.validate()
            .map_err(|e| Failure::usage(format!("values: {label}: {e}")))?;
        Ok(SweepPoint {
            label,
            methods,
            spec,
        })
    }
}
