//! Run configuration: a JSON document in which every field has a default.
//! Unknown keys are rejected with the full path of the offending field.

use std::path::{Path, PathBuf};

use diffaug::data::{gen_gaussian_mixture, load_csv, Dataset};
use diffaug::eval::ProbeConfig;
use diffaug::trainer::{DiffusionConfig, TrainConfig, TrainerConfig};
use diffaug::trainer::EncoderConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Seeded Gaussian mixture used when no data file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub dim: usize,
    pub samples: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 3,
            dim: 20,
            samples: 1500,
            separation: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV file; when absent the synthetic mixture is used.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Per-feature standardization fitted on the training data.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticSpec::default(),
            standardize: true,
        }
    }
}

impl DataConfig {
    /// Loads the CSV or generates the mixture, unstandardized.
    pub fn load(&self) -> Result<Dataset, CliError> {
        match &self.path {
            Some(p) => load_data(p),
            None => {
                let s = &self.synthetic;
                gen_gaussian_mixture(s.clusters, s.dim, s.samples, s.separation, s.seed)
                    .map_err(|e| CliError::Usage(format!("data.synthetic: {e}")))
            }
        }
    }
}

/// Reads a CSV, reporting a missing or malformed file as a usage error.
pub fn load_data(path: &Path) -> Result<Dataset, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("data file not found: {}", path.display())));
    }
    load_csv(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// Trunk output.
    Y,
    /// Head output.
    #[default]
    Z,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// The probe seed also drives the split and k-means restarts.
    pub probe: ProbeConfig,
    pub embedding: Embedding,
    pub train_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            embedding: Embedding::Z,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Usage(format!("config error at `{path}`: {}", e.inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            encoder: self.encoder.clone(),
            diffusion: self.diffusion.clone(),
            trainer: self.trainer.clone(),
        }
    }

    /// Checks every field that can be checked without data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let f = self.eval.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Usage(format!(
                "config error at `eval.train_fraction`: {f} is outside (0, 1)"
            )));
        }
        let p = &self.eval.probe;
        if p.iterations == 0 || !(p.step > 0.0) || !(p.l2 >= 0.0) {
            return Err(CliError::Usage(
                "config error at `eval.probe`: iterations and step must be positive, l2 nonnegative"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.trainer.plan.lambda = 0.15;
        c.data.path = Some("x.csv".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_json(r#"{"trainer": {"plan": {"lambdda": 0.1}}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trainer.plan.lambdda"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let mut c = RunConfig::default();
        c.trainer.plan.lambda = 1.5;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("trainer.plan.lambda"), "{msg}");
        let mut c = RunConfig::default();
        c.eval.train_fraction = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("eval.train_fraction"));
    }

    #[test]
    fn missing_data_file_names_the_path() {
        let err = load_data(Path::new("/nonexistent/dir/data.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/dir/data.csv"));
    }
}
