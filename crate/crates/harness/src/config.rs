//! Run configuration, loaded from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use veil_core::analytics::Metric;
use veil_core::backend::{FillerBank, SentenceProfile, SyntheticConfig};
use veil_core::obfuscation::ReusePolicy;

use crate::dataset::{Columns, DatasetFormat};
use crate::error::HarnessError;

/// Environment variable holding the bearer credential for remote endpoints.
pub const API_KEY_ENV: &str = "VEIL_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackendSpec {
    /// In-process synthetic model built from `RunConfig::model`.
    Synthetic,
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_in_flight")]
        in_flight_cap: usize,
    },
}

fn default_timeout_ms() -> u64 {
    10_000
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PprgMode {
    /// Plain text goes on the wire.
    Off,
    /// Clean token embeddings, no noise. Only useful as an ablation.
    Identity,
    /// Token embeddings plus Gamma-radius isotropic noise.
    Noisy,
    /// External encoder process, see [`PprgConfig::plugin_command`].
    Plugin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PprgConfig {
    pub mode: PprgMode,
    pub eta: f64,
    /// Overrides the Gamma shape, which otherwise equals the embedding dimension.
    pub gamma_shape: Option<f64>,
    /// Program and arguments. It reads text on stdin and writes a JSON
    /// array of equal-length rows on stdout.
    pub plugin_command: Vec<String>,
}

impl Default for PprgConfig {
    fn default() -> Self {
        Self {
            mode: PprgMode::Off,
            eta: 100.0,
            gamma_shape: None,
            plugin_command: Vec::new(),
        }
    }
}

/// How obfuscators are drawn for each instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    /// `group_n` balanced unit groups.
    Balanced,
    /// `count` obfuscators drawn from the whole pool, labels ignored.
    Random { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: DatasetFormat,
    #[serde(default)]
    pub columns: Columns,
}

/// Generated evaluation data when no dataset file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    pub instances: usize,
    pub candidates: usize,
    pub instance_profile: SentenceProfile,
    pub candidate_profile: SentenceProfile,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            instances: 200,
            candidates: 600,
            instance_profile: SentenceProfile::evaluation(),
            candidate_profile: SentenceProfile::candidates(FillerBank::InDomain),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Prebuilt pool JSON. Takes precedence over `candidates`.
    pub path: Option<PathBuf>,
    /// Unlabeled candidate corpus, see [`crate::dataset::ingest_candidates`].
    pub candidates: Option<PathBuf>,
    pub format: DatasetFormat,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            path: None,
            candidates: None,
            format: DatasetFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Label names; defaults to "0".."n-1" with n from `model.label_count`.
    pub labels: Option<Vec<String>>,
    pub dataset: Option<DatasetConfig>,
    pub synthetic_data: SyntheticData,
    pub backend: BackendSpec,
    /// Synthetic model settings. Also fixes the public token embedding the
    /// encoder shares with the model, in remote mode as well.
    pub model: SyntheticConfig,
    pub pool: PoolConfig,
    pub pprg: PprgConfig,
    pub min_confidence: f64,
    pub group_n: usize,
    pub expansion_k: usize,
    pub sampling: Sampling,
    pub reuse: ReusePolicy,
    pub metric: Metric,
    /// Query the backend with plain `x` to measure the unprotected score.
    pub baseline: bool,
    /// Concurrent requests during dispatch.
    pub concurrency: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            labels: None,
            dataset: None,
            synthetic_data: SyntheticData::default(),
            backend: BackendSpec::Synthetic,
            model: SyntheticConfig::default(),
            pool: PoolConfig::default(),
            pprg: PprgConfig::default(),
            min_confidence: 0.9,
            group_n: 1,
            expansion_k: 1,
            sampling: Sampling::Balanced,
            reuse: ReusePolicy::None,
            metric: Metric::Accuracy,
            baseline: true,
            concurrency: 8,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Per-dataset reference settings: max sequence length, confidence
    /// threshold, group count, label set and metric.
    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        let mut c = Self::default();
        let (max_len, min_conf, labels, metric): (usize, f64, Vec<&str>, Metric) = match name {
            "sst2" => (128, 0.99, vec!["negative", "positive"], Metric::Accuracy),
            "sst5" => (
                128,
                0.90,
                vec!["very negative", "negative", "neutral", "positive", "very positive"],
                Metric::Accuracy,
            ),
            "mrpc" => (
                512,
                0.90,
                vec!["not_equivalent", "equivalent"],
                Metric::BinaryF1 { positive: 1 },
            ),
            "qnli" => (256, 0.99, vec!["entailment", "not_entailment"], Metric::Accuracy),
            other => return Err(HarnessError::Config(format!("unknown preset '{other}'"))),
        };
        c.model.max_sequence_length = max_len;
        c.model.label_count = labels.len();
        c.min_confidence = min_conf;
        c.group_n = 1;
        c.metric = metric;
        c.labels = Some(labels.into_iter().map(String::from).collect());
        Ok(c)
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels
            .clone()
            .unwrap_or_else(|| (0..self.model.label_count).map(|i| i.to_string()).collect())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.label_names().len() != self.model.label_count {
            return bad(format!(
                "{} label names for a {}-label model",
                self.label_names().len(),
                self.model.label_count
            ));
        }
        if !(0.0..1.0).contains(&self.min_confidence) {
            return bad(format!("min_confidence {} outside [0, 1)", self.min_confidence));
        }
        if self.group_n == 0 || self.expansion_k == 0 {
            return bad("group_n and expansion_k must be at least 1".into());
        }
        if let Sampling::Random { count: 0 } = self.sampling {
            return bad("random sampling needs a positive count".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if !(self.pprg.eta > 0.0 && self.pprg.eta.is_finite()) {
            return bad(format!("pprg.eta must be positive, got {}", self.pprg.eta));
        }
        if self.pprg.mode == PprgMode::Plugin && self.pprg.plugin_command.is_empty() {
            return bad("plugin mode needs pprg.plugin_command".into());
        }
        let mut paths: Vec<&Path> = Vec::new();
        if let Some(d) = &self.dataset {
            paths.push(&d.path);
        }
        paths.extend(self.pool.path.as_deref());
        paths.extend(self.pool.candidates.as_deref());
        for p in paths {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = RunConfig::from_toml_str(
            r#"
seed = 9
expansion_k = 3
reuse = "full"
[pprg]
mode = "noisy"
eta = 50.0
[backend]
kind = "remote"
endpoint = "http://127.0.0.1:9/classify"
[sampling]
kind = "random"
count = 4
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.expansion_k, 3);
        assert_eq!(c.group_n, 1);
        assert_eq!(c.pprg.mode, PprgMode::Noisy);
        assert_eq!(c.sampling, Sampling::Random { count: 4 });
        assert!(matches!(c.backend, BackendSpec::Remote { timeout_ms: 10_000, .. }));
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn mistyped_values_are_rejected() {
        assert!(RunConfig::from_toml_str("expansion_k = \"three\"").is_err());
    }

    #[test]
    fn presets() {
        let sst2 = RunConfig::preset("sst2").unwrap();
        assert_eq!(sst2.model.max_sequence_length, 128);
        assert_eq!(sst2.min_confidence, 0.99);
        let mrpc = RunConfig::preset("mrpc").unwrap();
        assert_eq!(mrpc.model.max_sequence_length, 512);
        assert_eq!(mrpc.metric, Metric::BinaryF1 { positive: 1 });
        assert_eq!(RunConfig::preset("sst5").unwrap().model.label_count, 5);
        assert_eq!(RunConfig::preset("qnli").unwrap().model.max_sequence_length, 256);
        for p in ["sst2", "sst5", "mrpc", "qnli"] {
            let c = RunConfig::preset(p).unwrap();
            assert_eq!(c.group_n, 1);
            c.validate().unwrap();
        }
        assert!(RunConfig::preset("cola").is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.expansion_k = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.pool.path = Some("/no/such/pool.json".into());
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.min_confidence = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.labels = Some(vec!["a".into()]);
        assert!(c.validate().is_err());
    }
}
