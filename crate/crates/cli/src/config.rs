//! Run configuration. Every table rejects unknown keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lvef_core::ecg_features;
use lvef_core::eval::BootstrapConfig;
use lvef_core::gbt::GbtParams;
use lvef_core::pipeline::{CohortConfig, FeatureConfig};
use lvef_core::signal::{PreprocessConfig, DEFAULT_SAMPLING_RATE};
use lvef_core::synth::{CohortOptions, Prevalence};
use lvef_core::ts_features;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Drives every random choice: synthesis, splits, boosting, bootstrap
    /// and stability resampling.
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub features: FeatureConfig,
    pub cohort: CohortConfig,
    pub gbt: GbtParams,
    pub evaluation: EvaluationConfig,
    pub explain: ExplainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out_dir: PathBuf::from("lvef-out"),
            inputs: Inputs::default(),
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            features: FeatureConfig::default(),
            cohort: CohortConfig::default(),
            gbt: GbtParams::default(),
            evaluation: EvaluationConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

/// Locations of real input data. Unset entries fall back to the output of
/// `synth` under the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub records_dir: Option<PathBuf>,
    pub echos: Option<PathBuf>,
    pub snapshots: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub prevalence: Prevalence,
    pub options: CohortOptions,
    /// Decimal places for waveform CSVs; unset writes exact values.
    pub decimals: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            prevalence: Prevalence::REFERENCE,
            options: CohortOptions::default(),
            decimals: Some(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub resamples: usize,
    pub alpha: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let b = BootstrapConfig::default();
        Self {
            resamples: b.resamples,
            alpha: b.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub resamples: usize,
    pub top_k: usize,
    /// Dependence data is written for this many top-ranked features.
    pub dependence_features: usize,
    /// Replace raw feature names by display labels in SHAP outputs.
    pub display_labels: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            resamples: 20,
            top_k: 10,
            dependence_features: 5,
            display_labels: false,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: &dyn std::fmt::Display| CliError::ConfigInvalid(e.to_string());
        self.preprocess
            .validate(DEFAULT_SAMPLING_RATE)
            .map_err(|e| invalid(&e))?;
        self.gbt.validate().map_err(|e| invalid(&e))?;
        self.cohort.fractions.validate().map_err(|e| invalid(&e))?;
        self.synth.prevalence.counts(self.synth.n).map_err(|e| invalid(&e))?;
        if self.threads == 0 {
            return Err(invalid(&"threads must be >= 1"));
        }
        if !(self.evaluation.alpha > 0.0 && self.evaluation.alpha < 1.0) || self.evaluation.resamples == 0 {
            return Err(invalid(&"evaluation needs resamples >= 1 and 0 < alpha < 1"));
        }
        if self.explain.resamples == 0 || self.explain.top_k == 0 {
            return Err(invalid(&"explain needs resamples >= 1 and top_k >= 1"));
        }
        Ok(())
    }

    /// Boosting parameters with the run seed applied.
    pub fn gbt_params(&self) -> GbtParams {
        GbtParams {
            seed: self.seed,
            ..self.gbt.clone()
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.evaluation.resamples,
            alpha: self.evaluation.alpha,
            seed: self.seed,
        }
    }

    /// SHA-256 of the settings that influence results. The output directory
    /// and thread count are left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
            m.remove("threads");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn provenance(&self) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        p.insert("config_sha256".into(), self.hash());
        p.insert(
            "clinical_catalog".into(),
            format!("{}@{}", ecg_features::CATALOG_NAME, ecg_features::CATALOG_VERSION),
        );
        if self.features.include_ts {
            p.insert(
                "ts_catalog".into(),
                format!("{}@{}", ts_features::CATALOG_NAME, ts_features::CATALOG_VERSION),
            );
        }
        p.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
        Config::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[gbt]\nlearning_rat = 0.1", "[synth.options]\nwindow = 3"] {
            assert!(matches!(Config::from_toml(text), Err(CliError::ConfigInvalid(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = Config::from_toml("[gbt]\nlearning_rate = 0.0").unwrap();
        assert!(c.validate().is_err());
        let c = Config::from_toml("[cohort.fractions]\ntrain = 0.5\nval = 0.1\ntest = 0.1").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_runtime_settings() {
        let a = Config::default();
        let b = Config {
            out_dir: "elsewhere".into(),
            threads: 8,
            ..Config::default()
        };
        let c = Config {
            seed: 1,
            ..Config::default()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn nested_tables_parse() {
        let c = Config::from_toml(
            r#"
seed = 9
[synth]
n = 300
prevalence = { normal = 0.4, mild = 0.2, moderate = 0.2, severe = 0.2 }
[cohort]
external_cutoff = "2023-07-01T00:00:00Z"
[features]
exclusions = ["I50", "I42"]
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.synth.n, 300);
        assert!(c.cohort.external_cutoff.is_some());
        assert!(c.features.exclusions.contains("I42"));
        c.validate().unwrap();
    }
}
