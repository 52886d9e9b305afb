//! Experiment configuration: a TOML file, `--set` overrides and defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use debclust::data::LongTailSpec;
use debclust::encoder::EncoderConfig;
use debclust::evaluation::ProbeConfig;
use debclust::training::TrainConfig;
use debclust::{Error, Result};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DEBCLUST_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub long_tail: LongTailSpec,
    pub dim: usize,
    /// Distance between neighbouring class means along the first axis.
    pub spacing: f64,
    pub sigma: f64,
    /// Size of each class in the balanced test split.
    pub test_per_class: usize,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            long_tail: LongTailSpec {
                class_count: 2,
                max_per_class: 1000,
                imbalance_ratio: 20.0,
            },
            dim: 2,
            spacing: 6.0,
            sigma: 1.0,
            test_per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    /// Subsample the training split to a long-tailed profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_tail: Option<LongTailSpec>,
    /// Keep at most this many test records (0: all).
    #[serde(default)]
    pub max_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Blobs(BlobsConfig),
    Cifar(CifarConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs(BlobsConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub sim_pos: f64,
    /// Anchor-to-negative similarities (an even count).
    pub sim_negs: Vec<f64>,
    pub tau: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0],
            sim_pos: 1.0,
            sim_negs: vec![0.0, 0.0],
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Exponents contrasted over several seeds.
    pub compare_lambdas: Vec<f64>,
    pub compare_seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            lambdas: vec![2.0, 3.0, 5.0],
            gammas: vec![0.1, 1.0, 5.0],
            compare_lambdas: vec![1.0, 2.0],
            compare_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 100,
            tolerance: debclust::gradsuite::TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; drives data generation, training and probes.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            sweep: SweepConfig::default(),
            ablate: AblateConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

fn config_error(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Merges `over` into `base`. Nested tables merge key by key, except a
/// tagged section whose tag differs from the base, which replaces it whole.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let retagged = ["source", "kind"]
                    .iter()
                    .any(|tag| o.get(*tag).is_some_and(|t| b.get(*tag) != Some(t)));
                if retagged {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Applies `key.path=value` to a TOML table, creating tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(assignment, "override must look like key.path=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(path, "empty key in override path"));
    }
    let mut cur = table;
    for (i, key) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(keys[..=i].join("."), "not a table"))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads the optional config file, applies overrides in order and the
    /// output-directory environment variable, and validates the result.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_output_dir: Option<PathBuf>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&ExperimentConfig::default().to_toml()).expect("defaults parse");
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)?;
            let file_table = text
                .parse::<toml::Table>()
                .map_err(|e| config_error(p.display().to_string(), e.to_string().trim().to_string()))?;
            merge(&mut table, file_table);
        }
        let mut set = toml::Table::new();
        for o in overrides {
            apply_override(&mut set, o)?;
        }
        merge(&mut table, set);
        let mut cfg = ExperimentConfig::from_table(table)?;
        if let Some(dir) = env_output_dir {
            cfg.output_dir = dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            config_error(path, e.into_inner().to_string().trim().to_string())
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| config_error("<input>", e.to_string().trim().to_string()))?;
        ExperimentConfig::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let at = |section: &'static str| move |e: Error| config_error(section, e.to_string());
        self.encoder.validate().map_err(at("encoder"))?;
        self.train.validate().map_err(at("train"))?;
        self.probe.validate().map_err(at("probe"))?;
        if let DataConfig::Blobs(b) = &self.data {
            b.long_tail.validate().map_err(at("data.long_tail"))?;
            if b.dim == 0 || !(b.sigma >= 0.0) || b.test_per_class == 0 {
                return Err(config_error("data", "blobs need dim >= 1, sigma >= 0, test_per_class >= 1"));
            }
            if let EncoderConfig::Mlp(m) = &self.encoder {
                if m.input_dim != b.dim {
                    return Err(config_error(
                        "encoder.input_dim",
                        format!("must equal data.dim = {}", b.dim),
                    ));
                }
            } else {
                return Err(config_error("encoder.kind", "vector data needs the mlp encoder"));
            }
        } else if matches!(self.encoder, EncoderConfig::Mlp(_)) {
            return Err(config_error("encoder.kind", "image data needs the mixer encoder"));
        }
        if self.grad_check.instances == 0 {
            return Err(config_error("grad_check.instances", "must be >= 1"));
        }
        Ok(())
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed,
            ..self.probe
        }
    }

    /// FNV-1a hash of everything that determines a trained model.
    pub fn model_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            data: &'a DataConfig,
            encoder: &'a EncoderConfig,
            train: &'a TrainConfig,
        }
        let text = toml::to_string(&Key {
            seed: self.seed,
            data: &self.data,
            encoder: &self.encoder,
            train: &self.train,
        })
        .expect("serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}
