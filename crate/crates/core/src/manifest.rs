//! Experiment manifests: one TOML file describing data, model and metrics.
//!
//! ```toml
//! name = "etth-128"
//! seed = 7
//!
//! [data]
//! path = "ETTh1.csv"
//! schema = { columns = ["HUFL", "HULL", "OT"] }
//!
//! [model]
//! l_ser = 128
//! stages = 4
//! dim = 3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::CsvSchema;
use crate::error::{Error, Result};
use crate::evalsuite::MetricConfig;
use crate::model::StageDiffConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    /// Root seed; copied into the model and metric sections on resolve.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSpec,
    #[serde(default)]
    pub model: StageDiffConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

impl ExperimentManifest {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_value(toml::from_str(s).map_err(|e| Error::Manifest(e.to_string()))?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    fn from_value(v: toml::Value) -> Result<Self> {
        let m: Self = v.try_into().map_err(|e: toml::de::Error| Error::Manifest(e.to_string()))?;
        Ok(m.resolved())
    }

    /// Reads a manifest and applies `key=value` overrides before parsing
    /// into typed sections, so unknown keys are rejected either way.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, overrides)
            .map_err(|e| match e {
                Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: toml::Value = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    /// Propagates the root seed into every section.
    pub fn resolved(mut self) -> Self {
        self.model.seed = self.seed;
        self.metrics.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "experiment name {:?} must be a nonempty file-name component",
                self.name
            )));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be ≥ 1".into()));
        }
        self.model.validate()?;
        self.metrics.validate()
    }
}

/// Applies one `dotted.key=value` assignment to a TOML tree.
///
/// The value is parsed as a TOML literal when possible and kept as a
/// string otherwise, so `model.norm=batch` and `model.stages=4` both work.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Manifest(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim().trim_start_matches("--");
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Manifest(format!("bad override key `{key}`")));
    }
    let value = parse_literal(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut node = root;
    for part in parts {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Manifest(format!("`{key}` descends into a non-table")))?;
        node = table
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Manifest(format!("`{key}` descends into a non-table")))?
        .insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    const BASIC: &str = r#"
name = "toy"
seed = 11

[data]
path = "toy.csv"

[model]
l_ser = 32
stages = 2
dim = 2
"#;

    #[test]
    fn parses_and_propagates_seed() {
        let m = ExperimentManifest::from_toml_str(BASIC).unwrap();
        assert_eq!(m.model.l_ser, 32);
        assert_eq!(m.model.seed, 11);
        assert_eq!(m.metrics.seed, 11);
        assert_eq!(m.data.stride, 1);
        m.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let m = ExperimentManifest::parse_with_overrides(
            BASIC,
            &["model.pool_kernels=[5, 3, 1]".into(), "model.schedule.schedule.kind=\"cosine\"".into()],
        );
        // Cosine needs its offset field; the untyped override alone is incomplete.
        assert!(m.is_err());
        let m = ExperimentManifest::parse_with_overrides(
            BASIC,
            &[
                "model.pool_kernels=[5, 3, 1]".into(),
                "model.schedule.schedule={ kind = \"cosine\", offset = 0.008 }".into(),
                "metrics.tsne.perplexity=12.5".into(),
                "output_dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        let text = m.to_toml_string().unwrap();
        assert_eq!(ExperimentManifest::from_toml_str(&text).unwrap(), m);
    }

    #[test]
    fn overrides_are_typed() {
        let m = ExperimentManifest::parse_with_overrides(
            BASIC,
            &[
                "--model.ablation=no_stage".into(),
                "model.train.steps=0".into(),
                "model.train.learning_rate=0.01".into(),
                "seed=5".into(),
            ],
        )
        .unwrap();
        assert_eq!(m.model.ablation, Ablation::NoStage);
        assert_eq!(m.model.train.steps, 0);
        assert_eq!(m.model.train.learning_rate, 0.01);
        assert_eq!(m.model.seed, 5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_syntax() {
        let typo = ExperimentManifest::parse_with_overrides(BASIC, &["model.stagez=3".into()]);
        assert!(matches!(typo, Err(Error::Manifest(_))));
        assert!(ExperimentManifest::parse_with_overrides(BASIC, &["model.stages".into()]).is_err());
        assert!(ExperimentManifest::parse_with_overrides(BASIC, &["model..x=1".into()]).is_err());
        assert!(ExperimentManifest::parse_with_overrides(BASIC, &["name.x=1".into()]).is_err());
        assert!(ExperimentManifest::from_toml_str("name = 1").is_err());
    }

    #[test]
    fn validation_catches_bad_sections() {
        let m = ExperimentManifest::parse_with_overrides(BASIC, &["model.stages=3".into()]).unwrap();
        assert!(m.validate().is_err());
        let m = ExperimentManifest::parse_with_overrides(BASIC, &["name=\"a/b\"".into()]).unwrap();
        assert!(m.validate().is_err());
    }

    #[test]
    fn literal_parsing() {
        assert_eq!(parse_literal("4"), toml::Value::Integer(4));
        assert_eq!(parse_literal("batch"), toml::Value::String("batch".into()));
        assert_eq!(parse_literal("true"), toml::Value::Boolean(true));
    }
}
