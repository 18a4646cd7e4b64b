use std::path::Path;

use anyhow::{Context, Result};
use lwtta_core::data::DataSpec;
use lwtta_core::eval::DEFAULT_MAX_NEW_TOKENS;
use lwtta_core::lm::{ModelConfig, PretrainConfig};
use lwtta_core::meta::MetaConfig;
use lwtta_core::tta::{TtaConfig, TtaMode};
use lwtta_core::Dtype;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub modes: Vec<TtaMode>,
    #[serde(rename = "K")]
    pub k_list: Vec<usize>,
    /// Held-out episodes scored per cell.
    pub episodes: usize,
    pub rouge: bool,
    pub max_new_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            modes: vec![TtaMode::Fixed, TtaMode::StepWise, TtaMode::LayerWise, TtaMode::SampleAveraged],
            k_list: (0..=5).collect(),
            episodes: 300,
            rouge: false,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tta: TtaConfig,
    pub meta: MetaConfig,
    pub data: DataSpec,
    pub eval: EvalSettings,
    pub seed: u64,
    pub precision: Dtype,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            tta: TtaConfig::default(),
            meta: MetaConfig::default(),
            data: DataSpec::default(),
            eval: EvalSettings::default(),
            seed: 0,
            precision: Dtype::F32,
        }
    }
}

/// A configuration problem; reported with exit status 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::Error::new(ConfigError(format!("{path}: {}", e.inner())))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            self.model.validate(),
            self.tta.validate(),
            self.meta.validate(),
        ];
        for c in checks {
            if let Err(e) = c {
                return Err(ConfigError(e.to_string()).into());
            }
        }
        if self.tta.k_max != self.meta.k_max {
            return Err(ConfigError(format!(
                "tta.K_max ({}) and meta.K_max ({}) differ",
                self.tta.k_max, self.meta.k_max
            ))
            .into());
        }
        if let Some(k) = self.eval.k_list.iter().find(|&&k| k > self.tta.k_max) {
            return Err(ConfigError(format!("eval.K: {k} exceeds K_max {}", self.tta.k_max)).into());
        }
        if self.eval.episodes == 0 {
            return Err(ConfigError("eval.episodes: must be >= 1".into()).into());
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse `a..b` (inclusive), `a..=b`, or a comma list.
pub fn parse_k_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let bad = |_| format!("invalid K list '{s}'");
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (usize, usize) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a > b {
            return Err(format!("empty K range '{s}'"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(bad)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_pretty_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "tta": {"eta": 0.5}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.tta.eta, 0.5);
        assert_eq!(c.tta.k_max, 5);
    }

    #[test]
    fn bad_field_reports_path() {
        let e = RunConfig::from_json(r#"{"tta": {"eta": "fast"}}"#).unwrap_err();
        assert!(e.to_string().contains("tta.eta"), "{e}");
        let e = RunConfig::from_json(r#"{"modle": {}}"#).unwrap_err();
        assert!(e.to_string().contains("modle"), "{e}");
    }

    #[test]
    fn k_lists() {
        assert_eq!(parse_k_list("0..5").unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(parse_k_list("1..=2").unwrap(), vec![1, 2]);
        assert_eq!(parse_k_list("0,3").unwrap(), vec![0, 3]);
        assert!(parse_k_list("3..1").is_err());
        assert!(parse_k_list("x").is_err());
    }
}
