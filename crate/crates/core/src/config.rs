//! Experiment configuration: one JSON document, optionally patched by
//! `path.to.field=value` overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::learners::LearnerConfig;
use crate::sequences::SamplerConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Environment variable holding `;`-separated `dot.path=value` overrides.
pub const OVERRIDES_ENV: &str = "OCFSL_OVERRIDES";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sequences: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub learner: LearnerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            sampler: SamplerConfig::default(),
            learner: LearnerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("{} is not supported (expected {CONFIG_SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.sampler.validate()?;
        self.learner.validate()?;
        self.train.validate()?;
        if self.eval.sequences == 0 {
            return Err(Error::config("eval.sequences", "must be at least 1"));
        }
        Ok(())
    }

    /// Parse, apply overrides, and validate.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Defaults with overrides applied.
    pub fn with_overrides(overrides: &[(String, String)]) -> Result<Self> {
        Self::from_json(&Self::default().to_json(), overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The configuration with `output_dir` cleared: where results are written
    /// is not part of what an experiment is.
    pub fn identity(&self) -> Self {
        Self {
            output_dir: String::new(),
            ..self.clone()
        }
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            schema_version: self.schema_version,
            config_hash: self.hash(),
            seed: self.seed,
            config: self.identity(),
        }
    }

    /// Short stable digest of the configuration, excluding `output_dir`.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.identity()).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Provenance embedded in every artifact: the full resolved configuration
/// and the identifiers derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl Stamp {
    /// `key: value` lines, suitable for `#` comment headers.
    pub fn header_lines(&self) -> String {
        format!(
            "schema_version: {}\nconfig_hash: {}\nseed: {}\nconfig: {}",
            self.schema_version,
            self.config_hash,
            self.seed,
            serde_json::to_string(&self.config).expect("config serializes")
        )
    }

    pub fn check_schema(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "artifact has schema {}, this build reads {CONFIG_SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        Ok(())
    }
}

/// Split `a.b=c` into `("a.b", "c")`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (path, value) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like dot.path=value"))?;
    Ok((path.trim().to_string(), value.trim().to_string()))
}

/// Overrides from [`OVERRIDES_ENV`], if set.
pub fn env_overrides() -> Result<Vec<(String, String)>> {
    match std::env::var(OVERRIDES_ENV) {
        Ok(v) => v
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(parse_override)
            .collect(),
        Err(_) => Ok(Vec::new()),
    }
}

/// Set the field at `path` to `raw`, parsed as JSON when possible and as a
/// string otherwise. Missing intermediate objects are created; whether the
/// field exists is decided when the result is deserialized.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(path, "empty path segment"));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json(), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_json(r#"{"train":{"stepz":3}}"#, &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_json(
            "{}",
            &[
                parse_override("train.steps=50").unwrap(),
                parse_override("learner.kind=protonet").unwrap(),
                parse_override("sampler.spatial_cue=false").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.steps, 50);
        assert_eq!(c.learner.kind, crate::learners::LearnerKind::ProtoNet);
        assert!(!c.sampler.spatial_cue);
        assert!(ExperimentConfig::from_json("{}", &[parse_override("nope.x=1").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn output_dir_is_not_identity() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.stamp(), b.stamp());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"sampler":{"label_ratio":0}}"#, &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("sampler.label_ratio"), "{err}");
    }
}
