use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use cor_core::chain::CoRConfig;
use cor_core::discriminator::{TrainConfig, TrainingSetConfig, DEFAULT_EPSILON_O, DEFAULT_LOW_LIGHT_EPSILON};
use cor_core::restorers::{ClassicalParams, RestorerMode};
use cor_core::synthesis::{default_categories, CleanSource, SynthesisConfig};
use cor_core::{BasisSet, DegradationLabel};

/// File name of the configuration snapshot written next to every output.
pub const SNAPSHOT_FILE: &str = "config.json";

/// Everything a command needs. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub registry: RegistryConfig,
    pub discriminator: DiscriminatorConfig,
    pub cor: CoRConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Writes the effective configuration into `dir`.
    pub fn snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(SNAPSHOT_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Dataset root: written by `synth`, read by `eval`.
    pub path: PathBuf,
    /// Manifest used for oracle runs; defaults to the one under `path`.
    pub manifest: Option<PathBuf>,
    pub categories: Vec<DegradationLabel>,
    pub per_category: usize,
    pub source: CleanSource,
    pub synthesis: SynthesisConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("uird-mini"),
            manifest: None,
            categories: default_categories(),
            per_category: 20,
            source: CleanSource::default(),
            synthesis: SynthesisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryConfig {
    pub mode: RestorerMode,
    pub bases: Vec<DegradationLabel>,
    pub classical: ClassicalParams,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            mode: RestorerMode::Classical,
            bases: ["n1", "n2", "n5", "r", "h"].iter().map(|s| s.parse().expect("static label")).collect(),
            classical: ClassicalParams::default(),
        }
    }
}

impl RegistryConfig {
    pub fn basis_set(&self) -> BasisSet {
        BasisSet::new(self.bases.iter().cloned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Trained model used by `run` and `eval`.
    pub model: Option<PathBuf>,
    pub training_set: TrainingSetConfig,
    pub training: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Category directory names or labels; `clean` evaluates the clean
    /// references. Empty means every category in the manifest.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedBasisSet {
    pub name: String,
    pub bases: Vec<DegradationLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub restorers: RestorerMode,
    pub images: usize,
    pub image_size: usize,
    /// PSNR of a bit-exact restoration is infinite; per-image values are
    /// capped here before averaging.
    pub psnr_cap: f64,
    /// Quantize degraded inputs to 8 bits before restoration.
    pub quantize_inputs: bool,
    /// Composite used for the margin settings.
    pub margin_label: DegradationLabel,
    /// Highest basis order trained for the margin settings.
    pub margin_order: usize,
    pub epsilon_o: f64,
    pub low_light_epsilon: f64,
    /// Composite used for the basis-set settings.
    pub basis_label: DegradationLabel,
    pub basis_sets: Vec<NamedBasisSet>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let set = |name: &str, bases: &[&str]| NamedBasisSet {
            name: name.into(),
            bases: bases.iter().map(|s| s.parse().expect("static label")).collect(),
        };
        Self {
            restorers: RestorerMode::Oracle,
            images: 20,
            image_size: 256,
            psnr_cap: 60.0,
            quantize_inputs: false,
            margin_label: "l+h+s".parse().expect("static label"),
            margin_order: 2,
            epsilon_o: DEFAULT_EPSILON_O,
            low_light_epsilon: DEFAULT_LOW_LIGHT_EPSILON,
            basis_label: "l+h+r".parse().expect("static label"),
            basis_sets: vec![
                set("a", &["r", "h", "r+h"]),
                set("b", &["r+h", "l+h"]),
                set("c", &["l", "r", "h"]),
                set("d", &["l", "r", "h", "r+h", "l+h"]),
            ],
        }
    }
}
