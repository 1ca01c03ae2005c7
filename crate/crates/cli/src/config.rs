//! Experiment configuration: a TOML file with `dataset`, `protocol`,
//! `memory`, `train`, and `output` sections. Every field has a default, so
//! an empty file is a valid config describing the reference desk-scale
//! experiment. Unknown keys are rejected; validation errors name the
//! offending field.

use std::path::{Path, PathBuf};

use gradcil_core::datagen::ImbalanceProfile;
use gradcil_core::memory::MemoryRegime;
use gradcil_core::protocol::{ClassOrder, Protocol};
use gradcil_core::trainer::{Method, TrainConfig};
use gradcil_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub protocol: ProtocolSection,
    pub memory: MemorySection,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Seeded Gaussian clusters subsampled to the long-tail profile.
    Synthetic,
    /// Pre-generated IDX image/label file pairs.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    pub num_classes: usize,
    pub d_in: usize,
    /// Imbalance factor: most-frequent over least-frequent class count.
    pub rho: f64,
    /// Training rows for the most frequent class.
    pub n_max: usize,
    /// Minimum pairwise distance between synthetic cluster means.
    pub separation: f64,
    pub test_per_class: usize,
    /// IDX file paths; required when `source = "idx"`.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 10,
            d_in: 96,
            rho: 100.0,
            n_max: 2800,
            separation: 2.75,
            test_per_class: 100,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Equal class splits across all phases (learning from scratch).
    Lfs,
    /// Half the classes first, then equal splits (learning from half).
    Lfh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    Shuffled,
    Ordered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub kind: ProtocolKind,
    /// Incremental task count: phase count for `lfs`, post-base phase
    /// count for `lfh`.
    pub n_tasks: usize,
    pub order: OrderKind,
    /// Master seed for the whole experiment.
    pub seed: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::Lfs,
            n_tasks: 5,
            order: OrderKind::Shuffled,
            seed: 1993,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Growing,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub regime: RegimeKind,
    /// Exemplars kept per old class under the growing regime.
    pub n_eps: usize,
    /// Total exemplar budget under the fixed regime.
    pub budget: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            regime: RegimeKind::Growing,
            n_eps: 5,
            budget: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_drops: Vec<(usize, f64)>,
    pub gamma: f64,
    pub lambda_b: f64,
    pub tau: f64,
    pub rs_enabled: bool,
    pub method: Method,
    pub hidden_dim: Option<usize>,
    pub pi_from_gradients: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let reference = TrainConfig::desk_default();
        Self {
            epochs_per_phase: reference.epochs_per_phase,
            batch_size: reference.batch_size,
            lr_init: reference.lr_init,
            lr_drops: reference.lr_drops,
            gamma: reference.gamma,
            lambda_b: reference.lambda_b,
            tau: reference.tau,
            rs_enabled: reference.rs_enabled,
            method: reference.method,
            hidden_dim: reference.hidden_dim,
            pi_from_gradients: reference.pi_from_gradients,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Emit per-iteration correction-factor records as trace.csv.
    pub trace: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trace: false,
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Parse and validate config text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)
            .map_err(|e| Error::parameter(format!("config parse failed: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::parameter(format!("config serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(d.rho >= 1.0) || !d.rho.is_finite() {
            return Err(Error::parameter(format!(
                "dataset.rho must be finite and at least 1, got {}",
                d.rho
            )));
        }
        if d.num_classes < 2 {
            return Err(Error::parameter(format!(
                "dataset.num_classes must be at least 2, got {}",
                d.num_classes
            )));
        }
        if d.d_in == 0 {
            return Err(Error::parameter("dataset.d_in must be positive"));
        }
        if d.n_max == 0 {
            return Err(Error::parameter("dataset.n_max must be positive"));
        }
        if !(d.separation > 0.0) || !d.separation.is_finite() {
            return Err(Error::parameter(format!(
                "dataset.separation must be finite and positive, got {}",
                d.separation
            )));
        }
        if d.test_per_class == 0 {
            return Err(Error::parameter("dataset.test_per_class must be positive"));
        }
        if d.source == DataSource::Idx {
            for (field, value) in [
                ("dataset.images", &d.images),
                ("dataset.labels", &d.labels),
                ("dataset.test_images", &d.test_images),
                ("dataset.test_labels", &d.test_labels),
            ] {
                if value.is_none() {
                    return Err(Error::parameter(format!(
                        "{field} is required when dataset.source is \"idx\""
                    )));
                }
            }
        }

        let p = &self.protocol;
        if p.n_tasks == 0 {
            return Err(Error::parameter("protocol.n_tasks must be positive"));
        }
        match p.kind {
            ProtocolKind::Lfs => {
                if d.num_classes % p.n_tasks != 0 {
                    return Err(Error::parameter(format!(
                        "protocol.n_tasks ({}) must divide dataset.num_classes ({})",
                        p.n_tasks, d.num_classes
                    )));
                }
            }
            ProtocolKind::Lfh => {
                if d.num_classes % 2 != 0 || (d.num_classes / 2) % p.n_tasks != 0 {
                    return Err(Error::parameter(format!(
                        "protocol.n_tasks ({}) must divide half of an even dataset.num_classes ({})",
                        p.n_tasks, d.num_classes
                    )));
                }
            }
        }

        let m = &self.memory;
        match m.regime {
            RegimeKind::Growing => {
                if m.n_eps == 0 {
                    return Err(Error::parameter("memory.n_eps must be positive"));
                }
            }
            RegimeKind::Fixed => {
                if m.budget == 0 {
                    return Err(Error::parameter("memory.budget must be positive"));
                }
            }
        }

        self.to_train_config(None)
            .validate()
            .map_err(|e| Error::parameter(format!("train section: {e}")))?;
        Ok(())
    }

    /// The trainer-facing hyperparameters, with the optional seed override
    /// applied.
    pub fn to_train_config(&self, seed_override: Option<u64>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs_per_phase: t.epochs_per_phase,
            batch_size: t.batch_size,
            lr_init: t.lr_init,
            lr_drops: t.lr_drops.clone(),
            gamma: t.gamma,
            lambda_b: t.lambda_b,
            tau: t.tau,
            rs_enabled: t.rs_enabled,
            method: t.method,
            seed: seed_override.unwrap_or(self.protocol.seed),
            hidden_dim: t.hidden_dim,
            pi_from_gradients: t.pi_from_gradients,
        }
    }

    pub fn imbalance_profile(&self) -> ImbalanceProfile {
        ImbalanceProfile {
            rho: self.dataset.rho,
            n_max: self.dataset.n_max,
            num_classes: self.dataset.num_classes,
        }
    }

    pub fn protocol_enum(&self) -> Protocol {
        match self.protocol.kind {
            ProtocolKind::Lfs => Protocol::EqualSplits,
            ProtocolKind::Lfh => Protocol::HalfThenSplits,
        }
    }

    pub fn order_enum(&self) -> ClassOrder {
        match self.protocol.order {
            OrderKind::Shuffled => ClassOrder::Shuffled,
            OrderKind::Ordered => ClassOrder::Ordered,
        }
    }

    pub fn memory_regime(&self) -> MemoryRegime {
        match self.memory.regime {
            RegimeKind::Growing => MemoryRegime::Growing {
                n_eps: self.memory.n_eps,
            },
            RegimeKind::Fixed => MemoryRegime::Fixed {
                budget: self.memory.budget,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_reference_config() {
        let config = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.dataset.num_classes, 10);
        assert_eq!(config.train.epochs_per_phase, 20);
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let text = r#"
            [dataset]
            num_classes = 6
            rho = 50.0
            n_max = 120

            [protocol]
            kind = "lfh"
            n_tasks = 3
            seed = 7

            [memory]
            regime = "fixed"
            budget = 30

            [train]
            method = "kd_only"
            lr_drops = [[4, 10.0]]
            hidden_dim = 12

            [output]
            trace = true
        "#;
        let first = ExperimentConfig::from_toml(text).unwrap();
        let reserialized = first.to_toml_string().unwrap();
        let second = ExperimentConfig::from_toml(&reserialized).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn rho_below_one_names_the_field() {
        let err = ExperimentConfig::from_toml("[dataset]\nrho = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("dataset.rho"), "{err}");
    }

    #[test]
    fn idx_source_requires_all_four_paths() {
        let err = ExperimentConfig::from_toml("[dataset]\nsource = \"idx\"\n").unwrap_err();
        assert!(err.to_string().contains("dataset.images"), "{err}");
    }

    #[test]
    fn indivisible_task_count_names_the_field() {
        let err = ExperimentConfig::from_toml("[protocol]\nn_tasks = 3\n").unwrap_err();
        assert!(err.to_string().contains("protocol.n_tasks"), "{err}");
    }

    #[test]
    fn seed_override_reaches_the_train_config() {
        let config = ExperimentConfig::default();
        assert_eq!(config.to_train_config(None).seed, 1993);
        assert_eq!(config.to_train_config(Some(5)).seed, 5);
    }

    #[test]
    fn bad_train_values_are_reported_under_their_section() {
        let err = ExperimentConfig::from_toml("[train]\ntau = 0.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train section") && msg.contains("tau"), "{msg}");
    }
}
