//! Flat key-value run configuration with dotted keys.
//!
//! A config file holds `key = value` lines (`#` starts a comment). Flags and
//! `--set key=value` overrides win over file values. The effective config is
//! echoed into the output directory so every run is reproducible from its
//! artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use schedrank::{
    BackboneKind, Error, FeatureConfig, LossKind, ModelConfig, PrimitiveTypeRegistry, Result,
    TrainConfig,
};

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "registry.types",
    "feature.sequence_length",
    "feature.embedding_size",
    "feature.positional_encoding",
    "model.hidden_dim",
    "model.backbone",
    "model.attention_heads",
    "model.backbone_layers",
    "model.residual_blocks",
    "model.loss",
    "model.positional_encoding",
    "model.mask_padding",
    "model.layer_norm",
    "train.learning_rate",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.batch_groups",
    "train.group_cap",
    "train.epochs",
    "train.patience",
    "data.val_fraction",
    "data.holdout",
    "search.pool",
    "search.evolve_iters",
    "search.mutation_rate",
    "search.crossover_rate",
];

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("config line {} is not `key = value`", i + 1))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got `{item}`"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn registry(&self) -> Result<PrimitiveTypeRegistry> {
        match self.get("registry.types") {
            None => Ok(PrimitiveTypeRegistry::default()),
            Some(list) => {
                PrimitiveTypeRegistry::new(list.split(',').map(str::trim).filter(|s| !s.is_empty()))
            }
        }
    }

    pub fn feature(&self, registry: &PrimitiveTypeRegistry) -> Result<FeatureConfig> {
        let cfg = FeatureConfig {
            num_types: registry.len(),
            sequence_length: self.parse("feature.sequence_length", 25)?,
            embedding_size: self.parse("feature.embedding_size", 22)?,
            positional_encoding: self.parse("feature.positional_encoding", false)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let backbone = match self.get("model.backbone").unwrap_or("self_attention") {
            "self_attention" => BackboneKind::SelfAttention,
            "lstm" => BackboneKind::Lstm,
            other => {
                return Err(Error::Config(format!(
                    "model.backbone must be self_attention or lstm, got `{other}`"
                )))
            }
        };
        let loss = match self.get("model.loss").unwrap_or("lambda_rank") {
            "lambda_rank" => LossKind::LambdaRank,
            "mse" => LossKind::Mse,
            other => {
                return Err(Error::Config(format!(
                    "model.loss must be lambda_rank or mse, got `{other}`"
                )))
            }
        };
        let cfg = ModelConfig {
            hidden_dim: self.parse("model.hidden_dim", 256)?,
            backbone,
            attention_heads: self.parse("model.attention_heads", 8)?,
            backbone_layers: self.parse("model.backbone_layers", 1)?,
            residual_blocks: self.parse("model.residual_blocks", 2)?,
            loss,
            positional_encoding: self.parse("model.positional_encoding", false)?,
            mask_padding: self.parse("model.mask_padding", false)?,
            layer_norm: self.parse("model.layer_norm", false)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self, seed: u64, epochs_flag: Option<usize>) -> Result<TrainConfig> {
        let group_cap = match self.get("train.group_cap") {
            None => None,
            Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("bad value `{v}` for `train.group_cap`"))
            })?),
        };
        let patience = match self.get("train.patience") {
            None => Some(10),
            Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("bad value `{v}` for `train.patience`"))
            })?),
        };
        let cfg = TrainConfig {
            learning_rate: self.parse("train.learning_rate", 1e-3)?,
            beta1: self.parse("train.beta1", 0.9)?,
            beta2: self.parse("train.beta2", 0.999)?,
            epsilon: self.parse("train.epsilon", 1e-8)?,
            batch_groups: self.parse("train.batch_groups", 16)?,
            group_cap,
            epochs: match epochs_flag {
                Some(e) => e,
                None => self.parse("train.epochs", 50)?,
            },
            seed,
            patience,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn val_fraction(&self, flag: Option<f64>) -> Result<f64> {
        match flag {
            Some(v) => Ok(v),
            None => self.parse("data.val_fraction", 0.1),
        }
    }

    pub fn holdout(&self, flag: &[String]) -> Vec<String> {
        if !flag.is_empty() {
            return flag.to_vec();
        }
        self.get("data.holdout")
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn search_pool(&self) -> Result<usize> {
        self.parse("search.pool", 512)
    }

    pub fn search_evolve_iters(&self) -> Result<usize> {
        self.parse("search.evolve_iters", 4)
    }

    pub fn search_mutation_rate(&self) -> Result<f64> {
        self.parse("search.mutation_rate", 0.3)
    }

    pub fn search_crossover_rate(&self) -> Result<f64> {
        self.parse("search.crossover_rate", 0.5)
    }

    /// The effective configuration in file format, every known key present.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KNOWN_KEYS {
            let value = self.get(key).map(String::from).unwrap_or_else(|| {
                default_for(key).to_string()
            });
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

fn default_for(key: &str) -> &'static str {
    match key {
        "registry.types" => "SP,RE,FU,FSP,CA,AN,RF,PR,CHW,CR,CI,PRG,UN,TS",
        "feature.sequence_length" => "25",
        "feature.embedding_size" => "22",
        "feature.positional_encoding" => "false",
        "model.hidden_dim" => "256",
        "model.backbone" => "self_attention",
        "model.attention_heads" => "8",
        "model.backbone_layers" => "1",
        "model.residual_blocks" => "2",
        "model.loss" => "lambda_rank",
        "model.positional_encoding" => "false",
        "model.mask_padding" => "false",
        "model.layer_norm" => "false",
        "train.learning_rate" => "0.001",
        "train.beta1" => "0.9",
        "train.beta2" => "0.999",
        "train.epsilon" => "0.00000001",
        "train.batch_groups" => "16",
        "train.group_cap" => "none",
        "train.epochs" => "50",
        "train.patience" => "10",
        "data.val_fraction" => "0.1",
        "data.holdout" => "",
        "search.pool" => "512",
        "search.evolve_iters" => "4",
        "search.mutation_rate" => "0.3",
        "search.crossover_rate" => "0.5",
        _ => "",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nmodel.hidden_dim = 64\ntrain.epochs = 7\n").unwrap();
        let mut cfg = RunConfig::load(Some(&path)).unwrap();
        cfg.apply_overrides(&["train.epochs=9".to_string()]).unwrap();
        assert_eq!(cfg.model().unwrap().hidden_dim, 64);
        assert_eq!(cfg.train(0, None).unwrap().epochs, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("model.depth", "4").is_err());
    }

    #[test]
    fn echo_lists_every_key() {
        let cfg = RunConfig::default();
        let echo = cfg.echo();
        for key in KNOWN_KEYS {
            assert!(echo.contains(key), "{key} missing from echo");
        }
    }
}
