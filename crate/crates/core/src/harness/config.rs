use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{PartitionMode, PartitionSpec, ServerMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fedcore::{AccuracyScale, FedConfig, UpdateMode};
use crate::nnkernel::{Model, ModelBuilder, DEFAULT_HESSIAN_CAP};
use crate::pruner::{FedApConfig, RateConfig};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "feddu")]
    FedDu,
    #[serde(rename = "fedap")]
    FedAp,
    #[serde(rename = "fedduap")]
    FedDuAp,
    #[serde(rename = "fixed-rate-prune")]
    FixedRatePrune,
}

impl Mode {
    pub fn update_mode(self) -> UpdateMode {
        match self {
            Mode::FedDu | Mode::FedDuAp => UpdateMode::FedDu,
            Mode::FedAvg | Mode::FedAp | Mode::FixedRatePrune => UpdateMode::FedAvg,
        }
    }

    pub fn prunes(self) -> bool {
        matches!(self, Mode::FedAp | Mode::FedDuAp | Mode::FixedRatePrune)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedAvg => "fedavg",
            Mode::FedDu => "feddu",
            Mode::FedAp => "fedap",
            Mode::FedDuAp => "fedduap",
            Mode::FixedRatePrune => "fixed-rate-prune",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Mode::FedAvg),
            "feddu" => Ok(Mode::FedDu),
            "fedap" => Ok(Mode::FedAp),
            "fedduap" => Ok(Mode::FedDuAp),
            "fixed-rate-prune" => Ok(Mode::FixedRatePrune),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub shape: [usize; 3],
    pub per_class: usize,
    /// Held-out samples per class, drawn from the same class templates.
    pub test_per_class: usize,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 4,
            shape: [1, 16, 16],
            per_class: 500,
            test_per_class: 250,
            noise_sigma: 1.5,
        }
    }
}

impl DataConfig {
    pub fn train_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            shape: self.shape,
            per_class: self.per_class,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn test_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            per_class: self.test_per_class,
            ..self.train_spec()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub server_fraction: f64,
    pub server_mode: ServerMode,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            mode: PartitionMode::Dirichlet { alpha: 0.5 },
            server_fraction: 0.05,
            server_mode: ServerMode::Iid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Conv layers (each followed by ReLU), flatten, optional hidden dense
/// layers (each followed by ReLU), then a dense classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv: vec![
                ConvSpec {
                    channels: 4,
                    kernel: 4,
                    stride: 4,
                    padding: 0,
                },
                ConvSpec {
                    channels: 8,
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                },
            ],
            hidden: vec![],
        }
    }
}

impl ModelConfig {
    pub fn builder(&self, input: [usize; 3], classes: usize) -> ModelBuilder {
        let mut b = ModelBuilder::new(input);
        for c in &self.conv {
            b = b.conv(c.channels, c.kernel, c.stride, c.padding).relu();
        }
        b = b.flatten();
        for &h in &self.hidden {
            b = b.dense(h).relu();
        }
        b.dense(classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    pub enabled: bool,
    /// Round after whose update the model is pruned; defaults to
    /// `ceil(0.2 * total_rounds)`.
    pub prune_at_round: Option<usize>,
    pub hessian_cap: usize,
    pub p_max: f64,
    pub lipschitz_pairs: usize,
    pub lipschitz_radius: f64,
    pub lipschitz_safety: f64,
    pub epsilon: f64,
    pub calibration_batch: usize,
    /// Per-layer rate of the fixed-rate baseline.
    pub fixed_rate: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            enabled: true,
            prune_at_round: None,
            hessian_cap: DEFAULT_HESSIAN_CAP,
            p_max: 0.9,
            lipschitz_pairs: 16,
            lipschitz_radius: 1.0,
            lipschitz_safety: 2.0,
            epsilon: 0.01,
            calibration_batch: 32,
            fixed_rate: 0.4,
        }
    }
}

/// Federation parameters as written in the file; the seed comes from the
/// top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub num_devices: usize,
    pub per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub server_scale: f64,
    pub f_prime: AccuracyScale,
    pub total_rounds: usize,
    pub device_flops: f64,
}

impl Default for FedSection {
    fn default() -> Self {
        let d = FedConfig::default();
        FedSection {
            num_devices: d.num_devices,
            per_round: d.per_round,
            local_epochs: d.local_epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            decay: d.decay,
            server_scale: d.server_scale,
            f_prime: d.f_prime,
            total_rounds: d.total_rounds,
            device_flops: d.device_flops,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Test accuracy whose first crossing defines time-to-target.
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub fed: FedSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
}

fn default_target() -> f64 {
    0.9
}

impl ExperimentConfig {
    /// All defaults for the given mode and seed, already resolved.
    pub fn new(mode: Mode, seed: u64) -> Self {
        let mut c = ExperimentConfig {
            mode,
            seed,
            output_dir: None,
            target_accuracy: default_target(),
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            fed: FedSection::default(),
            model: ModelConfig::default(),
            pruning: PruningConfig::default(),
        };
        c.resolve_defaults();
        c
    }

    /// Fills derived defaults (currently `prune_at_round`).
    pub fn resolve_defaults(&mut self) {
        if self.pruning.prune_at_round.is_none() {
            self.pruning.prune_at_round = Some((self.fed.total_rounds as f64 * 0.2).ceil() as usize);
        }
    }

    pub fn prune_round(&self) -> Option<usize> {
        if self.mode.prunes() && self.pruning.enabled {
            self.pruning.prune_at_round
        } else {
            None
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.fed;
        FedConfig {
            num_devices: f.num_devices,
            per_round: f.per_round,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            decay: f.decay,
            server_scale: f.server_scale,
            f_prime: f.f_prime,
            total_rounds: f.total_rounds,
            device_flops: f.device_flops,
            seed: self.seed,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: self.partition.mode,
            num_devices: self.fed.num_devices,
            server_fraction: self.partition.server_fraction,
            server_mode: self.partition.server_mode,
            seed: self.seed,
        }
    }

    pub fn fedap_config(&self) -> FedApConfig {
        let p = &self.pruning;
        FedApConfig {
            rate: RateConfig {
                hessian_cap: p.hessian_cap,
                p_max: p.p_max,
                lipschitz_pairs: p.lipschitz_pairs,
                lipschitz_radius: p.lipschitz_radius,
                lipschitz_safety: p.lipschitz_safety,
                seed: seed::derive(self.seed, &[tag::LIPSCHITZ]),
            },
            epsilon: p.epsilon,
            calibration_batch: p.calibration_batch,
        }
    }

    pub fn initial_model(&self) -> Result<Model> {
        self.model
            .builder(self.data.shape, self.data.classes)
            .build_random(&mut seed::rng(self.seed, &[tag::INIT]))
    }

    pub fn validate(&self) -> Result<()> {
        self.fed_config().validate()?;
        self.partition_spec()
            .validate()
            .map_err(|e| Error::config("partition", e.to_string()))?;
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        if d.per_class == 0 {
            return Err(Error::config("data.per_class", "must be at least 1"));
        }
        if d.test_per_class == 0 {
            return Err(Error::config("data.test_per_class", "must be at least 1"));
        }
        if d.shape.iter().any(|&x| x == 0) {
            return Err(Error::config("data.shape", "extents must be positive"));
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(Error::config("data.noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::config("target_accuracy", "must lie in [0, 1]"));
        }
        if let Some(bad) = self.model.conv.iter().position(|c| {
            c.channels == 0 || c.kernel == 0 || c.stride == 0
        }) {
            return Err(Error::config(
                format!("model.conv[{bad}]"),
                "channels, kernel and stride must be positive",
            ));
        }
        if let Some(bad) = self.model.hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("model.hidden[{bad}]"), "must be positive"));
        }
        self.model
            .builder(d.shape, d.classes)
            .build_zeros()
            .map_err(|e| Error::config("model", e.to_string()))?;
        let p = &self.pruning;
        if !(0.0..=1.0).contains(&p.p_max) {
            return Err(Error::config("pruning.p_max", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&p.fixed_rate) {
            return Err(Error::config("pruning.fixed_rate", "must lie in [0, 1]"));
        }
        if p.lipschitz_pairs < 2 {
            return Err(Error::config("pruning.lipschitz_pairs", "must be at least 2"));
        }
        if !(p.lipschitz_radius >= 0.0) || !(p.lipschitz_safety >= 0.0) {
            return Err(Error::config("pruning.lipschitz_radius", "radius and safety must be >= 0"));
        }
        if !(p.epsilon > 0.0) {
            return Err(Error::config("pruning.epsilon", "must be > 0"));
        }
        if p.calibration_batch == 0 {
            return Err(Error::config("pruning.calibration_batch", "must be at least 1"));
        }
        if self.mode.prunes() && p.enabled {
            match p.prune_at_round {
                Some(r) if r < self.fed.total_rounds => {}
                Some(r) => {
                    return Err(Error::config(
                        "pruning.prune_at_round",
                        format!(
                            "{} requires prune_at_round < total_rounds ({r} >= {})",
                            self.mode.name(),
                            self.fed.total_rounds
                        ),
                    ))
                }
                None => return Err(Error::config("pruning.prune_at_round", "unresolved")),
            }
        }
        Ok(())
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Parses, fills defaults and validates a TOML configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().message().to_string())
    })?;
    cfg.resolve_defaults();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
