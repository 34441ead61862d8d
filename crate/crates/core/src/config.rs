//! Flat TOML experiment configuration.
//!
//! Every key lives at the top level. Unknown keys are rejected, and the
//! digest of the normalized config (minus output location and worker count)
//! is stamped into every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{HyperParams, Method};
use crate::data::{ConceptShiftMode, CovariateConfig, ShiftConfig};
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::server::PoolMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftRegime {
    /// Per-client long-tailed class profiles.
    #[default]
    Prior,
    /// Per-client feature transforms over balanced shards.
    Covariate,
    /// Balanced shards, no transform.
    None,
}

fn d_alpha() -> f64 {
    5.0
}
fn d_eta() -> f64 {
    0.01
}
fn d_batch() -> usize {
    32
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn d_pool_size() -> usize {
    100
}
fn d_k() -> usize {
    10
}
fn d_rho() -> f64 {
    0.01
}
fn d_frac() -> f64 {
    0.1
}
fn d_domains() -> usize {
    4
}
fn d_one() -> f64 {
    1.0
}
fn d_hidden() -> Vec<usize> {
    vec![32]
}
fn d_classes() -> usize {
    10
}
fn d_dim() -> usize {
    16
}
fn d_samples() -> usize {
    200
}
fn d_val_samples() -> usize {
    100
}
fn d_target() -> f64 {
    0.7
}
fn d_true() -> bool {
    true
}
fn d_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Global rounds `T`.
    pub rounds: usize,
    /// Local epochs `E`.
    pub epochs: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Defaults to `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedcurv_alpha: Option<f64>,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_true")]
    pub rectify: bool,

    #[serde(default)]
    pub pool: PoolMode,
    /// Roster size for cross-silo runs.
    #[serde(default = "d_pool_size")]
    pub pool_size: usize,
    #[serde(default = "d_k")]
    pub clients_per_round: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,

    #[serde(default)]
    pub shift: ShiftRegime,
    #[serde(default = "d_rho")]
    pub imbalance_ratio: f64,
    #[serde(default = "d_frac")]
    pub sample_fraction: f64,
    #[serde(default = "d_domains")]
    pub num_domains: usize,
    #[serde(default = "d_one")]
    pub covariate_bias_scale: f64,
    #[serde(default)]
    pub concept_shift_prob: f64,
    #[serde(default)]
    pub concept_shift_mode: ConceptShiftMode,
    /// Rounds on which a remap is forced regardless of the coin.
    #[serde(default)]
    pub concept_shift_rounds: Vec<usize>,
    #[serde(default = "d_true")]
    pub score_reset_on_shift: bool,

    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub norm_layer: bool,
    /// Keep normalization parameters local (requires `norm_layer`).
    #[serde(default)]
    pub fedbn: bool,
    #[serde(default)]
    pub weighted_aggregation: bool,

    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_samples")]
    pub samples_per_class: usize,
    #[serde(default = "d_val_samples")]
    pub val_samples_per_class: usize,
    /// Mixes into the synthetic-data seed alongside the run seed.
    #[serde(default)]
    pub data_seed: u64,
    /// Training table; replaces the synthetic mixture when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_path: Option<PathBuf>,

    /// Threshold for the rounds-to-accuracy column.
    #[serde(default = "d_target")]
    pub acc_target: f64,

    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    /// Parallel (method, seed) cells; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().to_string())
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with_overrides(text, &[])
}

/// Like [`parse_config`], with `key=value` overrides applied on top of the
/// file. Values use TOML syntax; anything that does not parse as TOML is
/// taken as a bare string.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(toml_err)?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.to_string(), value);
    }
    let cfg: ExperimentConfig = table.try_into().map_err(toml_err)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_with_overrides(&text, overrides)
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(key, msg))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(
            !self.methods.is_empty(),
            "methods",
            "at least one method is required",
        )?;
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check(
            self.alpha.is_finite() && self.alpha >= 0.0,
            "alpha",
            "must be >= 0",
        )?;
        if let Some(a) = self.fedcurv_alpha {
            check(a.is_finite() && a >= 0.0, "fedcurv_alpha", "must be >= 0")?;
        }
        check(self.eta.is_finite() && self.eta > 0.0, "eta", "must be > 0")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(
            self.clients_per_round >= 1,
            "clients_per_round",
            "must be at least 1",
        )?;
        if self.pool == PoolMode::CrossSilo {
            check(
                self.clients_per_round <= self.pool_size,
                "clients_per_round",
                "cannot exceed pool_size in cross-silo mode",
            )?;
        }
        check(
            !self.seeds.is_empty(),
            "seeds",
            "at least one seed is required",
        )?;
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        check(
            seeds.len() == self.seeds.len(),
            "seeds",
            "seeds must be distinct",
        )?;
        let mut methods = self.methods.clone();
        methods.sort_unstable();
        methods.dedup();
        check(
            methods.len() == self.methods.len(),
            "methods",
            "methods must be distinct",
        )?;

        check(self.num_domains >= 1, "num_domains", "must be at least 1")?;
        check(
            self.covariate_bias_scale.is_finite() && self.covariate_bias_scale >= 0.0,
            "covariate_bias_scale",
            "must be >= 0",
        )?;
        check(
            self.concept_shift_rounds
                .iter()
                .all(|&r| r >= 1 && r <= self.rounds),
            "concept_shift_rounds",
            "rounds must lie in 1..=rounds",
        )?;
        self.shift_config().validate()?;

        check(
            self.hidden.iter().all(|&h| h >= 1),
            "hidden",
            "layer widths must be >= 1",
        )?;
        check(
            !self.norm_layer || !self.hidden.is_empty(),
            "norm_layer",
            "requires at least one hidden layer",
        )?;
        check(
            !self.fedbn || self.norm_layer,
            "fedbn",
            "requires norm_layer = true",
        )?;
        check(self.classes >= 2, "classes", "must be at least 2")?;
        check(self.dim >= 2, "dim", "must be at least 2")?;
        check(
            self.samples_per_class >= 1,
            "samples_per_class",
            "must be at least 1",
        )?;
        check(
            self.val_samples_per_class >= 1,
            "val_samples_per_class",
            "must be at least 1",
        )?;
        check(
            self.data_path.is_some() == self.val_path.is_some(),
            "data_path",
            "data_path and val_path must be given together",
        )?;
        check(
            self.acc_target > 0.0 && self.acc_target < 1.0,
            "acc_target",
            "must lie in (0, 1)",
        )?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.dim);
        sizes.extend(&self.hidden);
        sizes.push(self.classes);
        ModelSpec::new(sizes, self.norm_layer)
    }

    pub fn hyper_params(&self) -> Result<HyperParams> {
        let mut hp = HyperParams::new(
            self.eta,
            self.alpha,
            self.epochs,
            self.batch_size,
            self.clients_per_round,
        )?
        .with_fedcurv_alpha(self.fedcurv_alpha.unwrap_or(self.alpha))?;
        if !self.rectify {
            hp = hp.unrectified();
        }
        Ok(hp)
    }

    pub fn shift_config(&self) -> ShiftConfig {
        ShiftConfig {
            imbalance_ratio: self.imbalance_ratio,
            sample_fraction: self.sample_fraction,
            concept_shift_prob: self.concept_shift_prob,
            concept_shift_mode: self.concept_shift_mode,
            covariate: CovariateConfig {
                seed: self.data_seed,
                bias_scale: self.covariate_bias_scale,
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(toml_err)
    }

    /// The config with where output goes and how many workers produce it
    /// reset; these never affect results.
    pub fn canonical(&self) -> Self {
        Self {
            output_dir: d_out(),
            workers: 0,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical config.
    pub fn digest(&self) -> String {
        let text = toml::to_string(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
