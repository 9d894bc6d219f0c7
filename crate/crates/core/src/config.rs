//! Experiment configuration: a flat TOML file of `key = value` lines.
//!
//! Absent keys take their defaults and unknown keys are rejected. Every
//! error names the offending key. The schema is listed in `KEYS`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::data::SyntheticSpec;
use crate::federation::{ProtocolConfig, VariantFlags, VariantTag, VotingSize};
use crate::nn::ModelArch;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: expected {expected}")]
    Type { key: String, expected: &'static str },
    #[error("key `{key}`: {msg}")]
    Constraint { key: String, msg: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Where the domains come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Manifest CSV listing `domain_id,path,role`.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: VariantTag,
    pub voting_size: VotingSize,
    pub protocol: ProtocolConfig,
    pub encoder_hidden: usize,
    pub feature_dim: usize,
    pub classifier_hidden: usize,
    pub seed: u64,
    pub replicates: usize,
    pub data: DataSource,
    pub output_dir: PathBuf,
    pub dump_features: bool,
    pub save_models: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: VariantTag::FedKA,
            voting_size: VotingSize::Small,
            protocol: ProtocolConfig::default(),
            encoder_hidden: 500,
            feature_dim: 50,
            classifier_hidden: 100,
            seed: 0,
            replicates: 5,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            output_dir: PathBuf::from("out"),
            dump_features: true,
            save_models: true,
        }
    }
}

impl ExperimentConfig {
    pub fn flags(&self) -> VariantFlags {
        VariantFlags::new(self.variant, self.voting_size)
    }

    pub fn arch(&self, input_dim: usize, classes: usize) -> ModelArch {
        ModelArch {
            input_dim,
            encoder_hidden: self.encoder_hidden,
            feature_dim: self.feature_dim,
            classifier_hidden: self.classifier_hidden,
            classes,
        }
    }

    pub fn synthetic(&self) -> Option<&SyntheticSpec> {
        match &self.data {
            DataSource::Synthetic(s) => Some(s),
            DataSource::Manifest(_) => None,
        }
    }
}

/// Recognized keys with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("variant", "FedAvg | f-DANN | f-DAN | Voting | Dis+Voting | Dis+MMD | FedKA"),
    ("voting_size", "512 | 2048 | \"small\" | \"large\" | \"all\""),
    ("rounds", "federated rounds per replicate"),
    ("batches_per_round", "local mini-batches per client per round"),
    ("batch_size", "mini-batch size"),
    ("mmd_group", "mini-batches per MMD macro-batch"),
    ("lr", "Adam learning rate"),
    ("gamma", "steepness of the adaptation schedule"),
    ("encoder_hidden", "encoder hidden width"),
    ("feature_dim", "encoder output width"),
    ("classifier_hidden", "hidden width of class and domain classifiers"),
    ("seed", "master seed"),
    ("replicates", "independent replicates"),
    ("group_effect", "measure the group effect every round"),
    ("parallel_clients", "train clients on a thread pool"),
    ("output_dir", "output directory"),
    ("dump_features", "write encoder feature dumps after each replicate"),
    ("save_models", "write final global models as JSON"),
    ("manifest", "domain manifest CSV; replaces the synthetic generator"),
    ("dim", "synthetic: ambient dimension"),
    ("classes", "synthetic: class count"),
    ("mean_scale", "synthetic: class-mean scale"),
    ("noise", "synthetic: per-coordinate noise std"),
    ("source_angles", "synthetic: rotation angle of each source domain, degrees"),
    ("target_angle", "synthetic: rotation angle of the target domain, degrees"),
    ("rotation_planes", "synthetic: Givens planes per rotation"),
    ("samples_per_source", "synthetic: samples per source domain"),
    ("target_train", "synthetic: unlabeled target samples"),
    ("target_test", "synthetic: labeled target test samples"),
];

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut cfg = parse_config(&text)?;
    // relative manifest paths are taken relative to the config file
    if let DataSource::Manifest(m) = &mut cfg.data {
        if m.is_relative() {
            if let Some(dir) = path.parent() {
                *m = dir.join(&*m);
            }
        }
    }
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
    let mut cfg = ExperimentConfig::default();
    let mut synth = SyntheticSpec::default();
    let mut synth_keys = false;
    let mut manifest = None;

    for (key, value) in &table {
        let k = key.as_str();
        match k {
            "variant" => {
                let s = string(k, value)?;
                cfg.variant = s.parse().map_err(|_| constraint(k, format!("unknown variant `{s}`")))?;
            }
            "voting_size" => cfg.voting_size = voting_size(k, value)?,
            "rounds" => cfg.protocol.rounds = positive(k, value)?,
            "batches_per_round" => cfg.protocol.batches_per_round = positive(k, value)?,
            "batch_size" => {
                cfg.protocol.batch_size = positive(k, value)?;
                if cfg.protocol.batch_size < 2 {
                    return Err(constraint(k, "must be at least 2 (batch normalization)"));
                }
            }
            "mmd_group" => cfg.protocol.mmd_group = positive(k, value)?,
            "lr" => cfg.protocol.lr = positive_real(k, value)?,
            "gamma" => cfg.protocol.gamma = positive_real(k, value)?,
            "encoder_hidden" => cfg.encoder_hidden = positive(k, value)?,
            "feature_dim" => cfg.feature_dim = positive(k, value)?,
            "classifier_hidden" => cfg.classifier_hidden = positive(k, value)?,
            "seed" => cfg.seed = integer(k, value)?.try_into().map_err(|_| constraint(k, "must be non-negative"))?,
            "replicates" => cfg.replicates = positive(k, value)?,
            "group_effect" => cfg.protocol.group_effect = boolean(k, value)?,
            "parallel_clients" => cfg.protocol.parallel_clients = boolean(k, value)?,
            "output_dir" => cfg.output_dir = PathBuf::from(string(k, value)?),
            "dump_features" => cfg.dump_features = boolean(k, value)?,
            "save_models" => cfg.save_models = boolean(k, value)?,
            "manifest" => manifest = Some(PathBuf::from(string(k, value)?)),
            "dim" => synth.dim = positive(k, value)?,
            "classes" => synth.classes = positive(k, value)?,
            "mean_scale" => synth.mean_scale = non_negative_real(k, value)?,
            "noise" => synth.noise = non_negative_real(k, value)?,
            "source_angles" => {
                let Value::Array(items) = value else {
                    return Err(ConfigError::Type { key: k.into(), expected: "array of numbers" });
                };
                synth.source_angles = items.iter().map(|v| real(k, v)).collect::<Result<_, _>>()?;
            }
            "target_angle" => synth.target_angle = real(k, value)?,
            "rotation_planes" => synth.rotation_planes = positive(k, value)?,
            "samples_per_source" => synth.samples_per_source = positive(k, value)?,
            "target_train" => synth.target_train = positive(k, value)?,
            "target_test" => synth.target_test = positive(k, value)?,
            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
        if KEYS.iter().position(|(name, _)| *name == k).is_some_and(|i| i >= 19) {
            synth_keys = true;
        }
    }

    if cfg.protocol.mmd_group > cfg.protocol.batches_per_round {
        return Err(constraint("mmd_group", "must not exceed batches_per_round"));
    }
    match manifest {
        Some(path) => {
            if synth_keys {
                return Err(constraint("manifest", "cannot be combined with synthetic-data keys"));
            }
            cfg.data = DataSource::Manifest(path);
        }
        None => {
            synth.validate().map_err(|e| {
                let key = if synth.dim < 2 {
                    "dim"
                } else if synth.classes < 2 {
                    "classes"
                } else if synth.source_angles.is_empty() {
                    "source_angles"
                } else if !(0.0..180.0).contains(&synth.target_angle) {
                    "target_angle"
                } else {
                    "source_angles"
                };
                constraint(key, e.to_string())
            })?;
            cfg.data = DataSource::Synthetic(synth);
        }
    }
    Ok(cfg)
}

fn constraint(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Constraint { key: key.to_string(), msg: msg.into() }
}

fn integer(key: &str, v: &Value) -> Result<i64, ConfigError> {
    v.as_integer().ok_or_else(|| ConfigError::Type { key: key.into(), expected: "integer" })
}

fn positive(key: &str, v: &Value) -> Result<usize, ConfigError> {
    let n = integer(key, v)?;
    if n <= 0 {
        return Err(constraint(key, format!("must be positive, got {n}")));
    }
    Ok(n as usize)
}

fn real(key: &str, v: &Value) -> Result<f64, ConfigError> {
    let x = match v {
        Value::Float(f) => *f,
        Value::Integer(i) => *i as f64,
        _ => return Err(ConfigError::Type { key: key.into(), expected: "number" }),
    };
    if !x.is_finite() {
        return Err(constraint(key, "must be finite"));
    }
    Ok(x)
}

fn positive_real(key: &str, v: &Value) -> Result<f64, ConfigError> {
    let x = real(key, v)?;
    if x <= 0.0 {
        return Err(constraint(key, format!("must be positive, got {x}")));
    }
    Ok(x)
}

fn non_negative_real(key: &str, v: &Value) -> Result<f64, ConfigError> {
    let x = real(key, v)?;
    if x < 0.0 {
        return Err(constraint(key, format!("must be non-negative, got {x}")));
    }
    Ok(x)
}

fn boolean(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| ConfigError::Type { key: key.into(), expected: "boolean" })
}

fn string<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| ConfigError::Type { key: key.into(), expected: "string" })
}

fn voting_size(key: &str, v: &Value) -> Result<VotingSize, ConfigError> {
    match v {
        Value::Integer(512) => Ok(VotingSize::Small),
        Value::Integer(2048) => Ok(VotingSize::Large),
        Value::Integer(n) => Err(constraint(key, format!("must be 512, 2048 or \"all\", got {n}"))),
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "small" | "s" | "512" => Ok(VotingSize::Small),
            "large" | "l" | "2048" => Ok(VotingSize::Large),
            "all" => Ok(VotingSize::All),
            _ => Err(constraint(key, format!("must be 512, 2048 or \"all\", got `{s}`"))),
        },
        _ => Err(ConfigError::Type { key: key.into(), expected: "integer or string" }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: ConfigError) -> String {
        match e {
            ConfigError::UnknownKey(k) => k,
            ConfigError::Type { key, .. } | ConfigError::Constraint { key, .. } => key,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.variant, VariantTag::FedKA);
        assert_eq!(cfg.protocol.rounds, 200);
        assert_eq!(cfg.protocol.lr, 0.0003);
        assert_eq!(cfg.protocol.batches_per_round, 32);
        assert_eq!(cfg.protocol.batch_size, 16);
        assert_eq!(cfg.protocol.gamma, 5.0);
        assert_eq!((cfg.encoder_hidden, cfg.feature_dim, cfg.classifier_hidden), (500, 50, 100));
        assert_eq!(cfg.replicates, 5);
        assert!(cfg.protocol.group_effect);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(parse_config("rounds = -5").unwrap_err()), "rounds");
        assert!(parse_config("rounds = -5").unwrap_err().to_string().contains("rounds"));
        assert_eq!(key_of(parse_config("vortingsize = 512").unwrap_err()), "vortingsize");
        assert!(matches!(parse_config("vortingsize = 512"), Err(ConfigError::UnknownKey(_))));
        assert_eq!(key_of(parse_config("lr = \"fast\"").unwrap_err()), "lr");
        assert_eq!(key_of(parse_config("voting_size = 100").unwrap_err()), "voting_size");
        assert_eq!(key_of(parse_config("variant = \"FedProx\"").unwrap_err()), "variant");
        assert_eq!(key_of(parse_config("target_angle = 200").unwrap_err()), "target_angle");
        assert_eq!(key_of(parse_config("batch_size = 1").unwrap_err()), "batch_size");
        assert_eq!(key_of(parse_config("mmd_group = 64").unwrap_err()), "mmd_group");
        assert_eq!(key_of(parse_config("manifest = \"m.csv\"\ndim = 4").unwrap_err()), "manifest");
    }

    #[test]
    fn values_are_applied() {
        let cfg = parse_config(
            "variant = \"Dis+Voting\"\nvoting_size = \"all\"\nrounds = 3\nlr = 1e-3\nseed = 7\n\
             source_angles = [10, 20.5]\ngroup_effect = false\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, VariantTag::DisVoting);
        assert_eq!(cfg.voting_size, VotingSize::All);
        assert_eq!(cfg.protocol.rounds, 3);
        assert_eq!(cfg.protocol.lr, 1e-3);
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.protocol.group_effect);
        assert_eq!(cfg.synthetic().unwrap().source_angles, vec![10.0, 20.5]);
        let m = parse_config("manifest = \"d/manifest.csv\"").unwrap();
        assert_eq!(m.data, DataSource::Manifest(PathBuf::from("d/manifest.csv")));
    }

    #[test]
    fn syntax_errors_are_reported() {
        assert!(matches!(parse_config("rounds = = 3"), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn schema_lists_every_key() {
        for (k, _) in KEYS {
            let probe = format!("{k} = []");
            // every listed key is recognized, so the failure is never UnknownKey
            assert!(!matches!(parse_config(&probe), Err(ConfigError::UnknownKey(_))), "{k}");
        }
    }
}
