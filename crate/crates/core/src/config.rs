//! Top-level run configuration: one JSON file naming the per-module config
//! files plus the global seed and output directory. Loading resolves paths
//! relative to the top-level file, reads every referenced file, and validates
//! the pieces against each other, so a run that starts is a run whose
//! configuration is coherent.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AugConfig;
use crate::heatmap::HeatmapConfig;
use crate::micronet::NetConfig;
use crate::oks::OksParams;
use crate::skeleton::SkeletonSpec;
use crate::trainer::TrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV_VAR: &str = "POSEFORGE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path} cannot be read: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("config file {path} does not parse: {message}")]
    BadFile { path: String, message: String },
    #[error("configs disagree: {0}")]
    Incoherent(String),
    #[error("{SEED_ENV_VAR} is set but is not a valid unsigned integer: {0:?}")]
    BadSeedOverride(String),
}

/// The on-disk shape of the top-level config file. Paths are relative to the
/// file's own directory unless absolute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub skeleton: String,
    pub net: String,
    pub train: String,
    pub aug: String,
    pub heatmap: String,
    pub oks: String,
    pub seed: u64,
    pub out_dir: String,
}

/// Everything loaded, parsed, and cross-validated.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub skeleton: SkeletonSpec,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub aug: AugConfig,
    pub heatmap: HeatmapConfig,
    pub oks: OksParams,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn read(path: &Path) -> Result<Vec<u8>, ConfigError> {
    fs::read(path).map_err(|source| ConfigError::Unreadable {
        path: path.display().to_string(),
        source,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| ConfigError::BadFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn bad(path: &Path, message: impl ToString) -> ConfigError {
    ConfigError::BadFile {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn parse_seed_override(value: &str) -> Result<u64, ConfigError> {
    value
        .trim()
        .parse::<u64>()
        .map_err(|_| ConfigError::BadSeedOverride(value.into()))
}

/// Reads the seed override from the environment, if any.
pub fn seed_override() -> Result<Option<u64>, ConfigError> {
    match env::var(SEED_ENV_VAR) {
        Ok(s) => parse_seed_override(&s).map(Some),
        Err(_) => Ok(None),
    }
}

/// Loads the top-level file and everything it references. Every file must
/// exist and parse; the parts must agree on keypoint count and tensor sizes.
/// A `POSEFORGE_SEED` environment value replaces the configured seed.
pub fn load_global(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let global: GlobalConfig = parse_json(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let skeleton_path = resolve(&base, &global.skeleton);
    let skeleton = SkeletonSpec::from_json(&read(&skeleton_path)?)
        .map_err(|e| bad(&skeleton_path, e))?;

    let net_path = resolve(&base, &global.net);
    let net: NetConfig = parse_json(&net_path)?;
    net.validate().map_err(|e| bad(&net_path, e))?;

    let train_path = resolve(&base, &global.train);
    let train: TrainConfig = parse_json(&train_path)?;
    train.validate().map_err(|e| bad(&train_path, e))?;

    let aug_path = resolve(&base, &global.aug);
    let aug: AugConfig = parse_json(&aug_path)?;
    aug.validate().map_err(|e| bad(&aug_path, e))?;

    let heatmap_path = resolve(&base, &global.heatmap);
    let heatmap: HeatmapConfig = parse_json(&heatmap_path)?;
    heatmap.validate().map_err(|e| bad(&heatmap_path, e))?;

    let oks_path = resolve(&base, &global.oks);
    let oks: OksParams = parse_json(&oks_path)?;
    oks.validate().map_err(|e| bad(&oks_path, e))?;

    if net.k != skeleton.k {
        return Err(ConfigError::Incoherent(format!(
            "net k = {} but skeleton k = {}",
            net.k, skeleton.k
        )));
    }
    if oks.k.len() != skeleton.k {
        return Err(ConfigError::Incoherent(format!(
            "oks has {} falloff constants but skeleton k = {}",
            oks.k.len(),
            skeleton.k
        )));
    }
    if heatmap.input_size != net.input_size {
        return Err(ConfigError::Incoherent(format!(
            "heatmap input {:?} but net input {:?}",
            heatmap.input_size, net.input_size
        )));
    }
    if heatmap.heatmap_size != net.heatmap_size() {
        return Err(ConfigError::Incoherent(format!(
            "heatmap grid {:?} but the net decodes to {:?}",
            heatmap.heatmap_size,
            net.heatmap_size()
        )));
    }

    let seed = match seed_override()? {
        Some(s) => s,
        None => global.seed,
    };

    Ok(LoadedConfig {
        skeleton,
        net,
        train,
        aug,
        heatmap,
        oks,
        seed,
        out_dir: resolve(&base, &global.out_dir),
    })
}
