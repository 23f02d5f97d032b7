//! Run configuration: JSON file, `NTKRL_` environment overrides, validation.

use std::path::{Path, PathBuf};

use ntkrl::corpus::TaskSpec;
use ntkrl::format::FORMAT_VERSION;
use ntkrl::model::ModelConfig;
use ntkrl::trainer::TrainConfig;
use ntkrl::verify::VerifyConfig;
use ntkrl::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "NTKRL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub entropy: bool,
    pub similarity: bool,
    pub best_of_n: bool,
    pub diversity: bool,
    pub classifier: bool,
    pub feature_change: bool,
    pub bon_n: Vec<usize>,
    pub bon_samples: usize,
    pub diversity_samples: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            entropy: true,
            similarity: true,
            best_of_n: true,
            diversity: true,
            classifier: true,
            feature_change: true,
            bon_n: vec![1, 2, 4, 8, 16],
            bon_samples: 16,
            diversity_samples: 4,
            top_k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub verify: VerifyConfig,
    pub out_dir: Option<PathBuf>,
    /// Keep this many most recent epoch checkpoints besides epoch 0; `None` keeps all.
    pub retain_checkpoints: Option<usize>,
    pub format_version: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            verify: VerifyConfig::default(),
            out_dir: None,
            retain_checkpoints: None,
            format_version: FORMAT_VERSION,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != self.task.vocab.size {
            return Err(Error::Config(format!(
                "model.vocab_size ({}) must equal task.vocab ({})",
                self.model.vocab_size, self.task.vocab.size
            )));
        }
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let a = &self.analysis;
        if a.bon_samples == 0 {
            return Err(Error::Config("analysis.bon_samples must be >= 1".into()));
        }
        if a.bon_n.iter().any(|n| *n == 0 || *n > a.bon_samples) {
            return Err(Error::Config(format!("analysis.bon_n entries must lie in 1..={}", a.bon_samples)));
        }
        if a.diversity_samples < 2 {
            return Err(Error::Config("analysis.diversity_samples must be >= 2".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Applies `NTKRL_SECTION__KEY=value` overrides to a JSON config value. Keys
/// are lowercased and split on `__`; values parse as JSON, else as strings.
pub fn apply_overrides<I>(mut value: Value, vars: I) -> Result<Value>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        let mut node = &mut value;
        for (i, part) in path.iter().enumerate() {
            let Value::Object(map) = node else {
                return Err(Error::Config(format!("{key}: {} is not a section", path[..i].join("."))));
            };
            if i + 1 == path.len() {
                map.insert(part.clone(), parsed.clone());
                break;
            }
            node = map.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(value)
}

/// Loads `path` (or defaults), applies environment overrides and validates.
pub fn load<I>(path: Option<&Path>, env: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    let value = apply_overrides(base, env)?;
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.train.lr = 3e-4;
        c.out_dir = Some("runs/x".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.hash(), RunConfig::from_json(&c.to_json()).unwrap().hash());
    }

    #[test]
    fn env_overrides() {
        let c = load(None, vars(&[("NTKRL_TRAIN__LR", "0.001"), ("NTKRL_TRAIN__ALGO", "grpo"), ("PATH", "/bin")])).unwrap();
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.algo, ntkrl::trainer::Algo::Grpo);
        let c = load(None, vars(&[("NTKRL_OUT_DIR", "runs/a")])).unwrap();
        assert_eq!(c.out_dir, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn errors_name_the_field() {
        let e = load(None, vars(&[("NTKRL_TRAIN__LRR", "1")])).unwrap_err().to_string();
        assert!(e.contains("lrr"), "{e}");
        let e = load(None, vars(&[("NTKRL_TRAIN__LR", "-1")])).unwrap_err().to_string();
        assert!(e.contains("train.lr"), "{e}");
        let e = load(None, vars(&[("NTKRL_MODEL__VOCAB_SIZE", "8")])).unwrap_err().to_string();
        assert!(e.contains("vocab"), "{e}");
        let e = load(None, vars(&[("NTKRL_TRAIN__ALGO", "grpo"), ("NTKRL_TRAIN__K", "1")])).unwrap_err().to_string();
        assert!(e.contains("train.k"), "{e}");
    }
}
