//! Run configuration: one JSON document plus `--key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use surronas_core::analytics::EnergyParams;
use surronas_core::engine::EvolutionConfig;
use surronas_core::smallnet::SyntheticSpec;

use crate::CliError;

/// Environment variable naming the directory new runs are created under.
pub const OUTPUT_ROOT_ENV: &str = "SURRONAS_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset directory; the synthetic generator is used when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    #[serde(flatten)]
    pub evolution: EvolutionConfig,
    pub energy: EnergyParams,
    /// Run directory; defaults to a name derived from mode and seed under
    /// the output root.
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: SyntheticSpec::default(),
            evolution: EvolutionConfig::default(),
            energy: EnergyParams::default(),
            output: None,
        }
    }
}

/// Parses `--a.b=value` into a path and a JSON value. Values that are not
/// valid JSON are taken as strings.
pub fn parse_override(arg: &str) -> Result<(Vec<String>, Value), CliError> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| CliError::Usage(format!("expected --key=value, got '{arg}'")))?;
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected --key=value, got '{arg}'")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("empty key in '{arg}'")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(String::from).collect(), value))
}

fn set_path(doc: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut cur = doc;
    for (i, key) in path.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just created")
            }
            _ => {
                return Err(CliError::Config(format!(
                    "cannot set '{}': '{}' is not an object",
                    path.join("."),
                    path[..i].join(".")
                )))
            }
        };
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Keys present in `given` but absent from `known`, as dotted paths.
fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Builds a config from JSON text, applying overrides in order and
/// rejecting unknown keys.
pub fn config_from_value<T>(mut doc: Value, overrides: &[String]) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    if doc.is_null() {
        doc = Value::Object(Default::default());
    }
    if !doc.is_object() {
        return Err(CliError::Config("configuration must be a JSON object".into()));
    }
    for arg in overrides {
        let (path, value) = parse_override(arg)?;
        set_path(&mut doc, &path, value)?;
    }
    let cfg: T = serde_json::from_value(doc.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let known = serde_json::to_value(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(&doc, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(CliError::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
    }
    Ok(cfg)
}

pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Null,
    };
    config_from_value(doc, overrides)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.evolution.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.energy.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dataset.is_none() {
            self.synthetic.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        if let Some(p) = &self.output {
            return p.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        let mode = match self.evolution.mode {
            surronas_core::engine::EvolutionMode::Full => "full",
            surronas_core::engine::EvolutionMode::Surrogate => "surrogate",
        };
        root.join(format!("{mode}-seed{}", self.evolution.seed))
    }
}
