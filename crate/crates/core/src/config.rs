//! Experiment description: a TOML document with a strict schema.
//!
//! Parsing fills every default into the returned [`ExperimentConfig`], so the
//! resolved config written next to the reports describes the run completely.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::attacks::{AttackKind, AttackSpec, TriggerPattern};
use crate::clustering::Linkage;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::training::{Activation, NetworkArchitecture, TrainConfig};

const MNIST_DIM: usize = 784;
const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::malicious_fraction")]
    pub malicious_fraction: f64,
    /// Lower and upper share of clients drawn each round.
    #[serde(default = "defaults::participation")]
    pub participation: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    pub aggregator: AggregatorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

/// Exactly one of the two sources must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist: Option<MnistConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "defaults::synthetic_classes")]
    pub classes: usize,
    #[serde(default = "defaults::synthetic_samples")]
    pub samples: usize,
    #[serde(default = "defaults::synthetic_test_samples")]
    pub test_samples: usize,
    #[serde(default = "defaults::synthetic_features")]
    pub features: usize,
    #[serde(default = "defaults::synthetic_separation")]
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first `n` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    #[default]
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default)]
    pub kind: PartitionKind,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Iid,
            alpha: defaults::alpha(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub positions: Vec<usize>,
    /// Value written at every position; defaults to the largest training feature value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub kind: AttackKind,
    #[serde(default = "defaults::source_class")]
    pub source_class: usize,
    #[serde(default = "defaults::target_class")]
    pub target_class: usize,
    #[serde(default = "defaults::flip_fraction")]
    pub flip_fraction: f64,
    #[serde(default = "defaults::poison_fraction")]
    pub poison_fraction: f64,
    /// Model-replacement scale; absent means "number of participants in the round".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boost: Option<f64>,
    #[serde(default = "defaults::mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dba_parts: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let spec = AttackSpec::none();
        Self {
            kind: spec.kind,
            source_class: spec.source_class,
            target_class: spec.target_class,
            flip_fraction: spec.flip_fraction,
            poison_fraction: spec.poison_fraction,
            boost: None,
            mask_ratio: spec.mask_ratio,
            trigger: None,
            dba_parts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorName {
    Celtibero,
    Fedavg,
    CoordMedian,
    Krum,
    MedianKrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorName,
    #[serde(default)]
    pub linkage: Linkage,
    /// Tolerated byzantine count for Krum variants; absent means the largest
    /// value the round's participant count allows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub krum_f: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: None,
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
        }
    }
}

mod defaults {
    pub fn seed() -> u64 {
        1
    }
    pub fn rounds() -> usize {
        50
    }
    pub fn clients() -> usize {
        20
    }
    pub fn malicious_fraction() -> f64 {
        0.4
    }
    pub fn participation() -> [f64; 2] {
        [0.6, 0.9]
    }
    pub fn synthetic_classes() -> usize {
        4
    }
    pub fn synthetic_samples() -> usize {
        4000
    }
    pub fn synthetic_test_samples() -> usize {
        1000
    }
    pub fn synthetic_features() -> usize {
        20
    }
    pub fn synthetic_separation() -> f64 {
        3.0
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn source_class() -> usize {
        1
    }
    pub fn target_class() -> usize {
        0
    }
    pub fn flip_fraction() -> f64 {
        1.0
    }
    pub fn poison_fraction() -> f64 {
        0.5
    }
    pub fn mask_ratio() -> f64 {
        0.05
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn epochs() -> usize {
        3
    }
    pub const SYNTHETIC_HIDDEN: usize = 16;
    pub const MNIST_HIDDEN: usize = 32;
    pub const SYNTHETIC_LR: f64 = 0.05;
    pub const MNIST_LR: f64 = 0.1;
}

impl ExperimentConfig {
    /// Feature dimension and class count implied by the dataset section.
    pub fn data_shape(&self) -> Option<(usize, usize)> {
        match (&self.dataset.synthetic, &self.dataset.mnist) {
            (Some(s), None) => Some((s.features, s.classes)),
            (None, Some(_)) => Some((MNIST_DIM, MNIST_CLASSES)),
            _ => None,
        }
    }

    /// Fills dataset-dependent defaults in place.
    fn resolve(&mut self) {
        let mnist = self.dataset.mnist.is_some();
        if self.model.hidden.is_none() {
            let h = if mnist {
                defaults::MNIST_HIDDEN
            } else {
                defaults::SYNTHETIC_HIDDEN
            };
            self.model.hidden = Some(vec![h]);
        }
        if self.training.learning_rate.is_none() {
            self.training.learning_rate = Some(if mnist {
                defaults::MNIST_LR
            } else {
                defaults::SYNTHETIC_LR
            });
        }
    }

    /// Number of malicious clients, `round(malicious_fraction × K)`.
    pub fn malicious_count(&self) -> usize {
        (self.malicious_fraction * self.clients as f64).round() as usize
    }

    pub fn architecture(&self) -> Result<NetworkArchitecture> {
        let (dim, classes) = self
            .data_shape()
            .ok_or_else(|| Error::usage("dataset must name exactly one source"))?;
        let mut sizes = vec![dim];
        sizes.extend(self.model.hidden.clone().unwrap_or_else(|| vec![defaults::SYNTHETIC_HIDDEN]));
        sizes.push(classes);
        NetworkArchitecture::new(sizes, self.model.activation)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.training.learning_rate.unwrap_or(defaults::SYNTHETIC_LR),
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            seed,
        }
    }

    pub fn aggregator_kind(&self) -> AggregatorKind {
        let a = &self.aggregator;
        match a.kind {
            AggregatorName::Celtibero => AggregatorKind::Celtibero { linkage: a.linkage },
            AggregatorName::Fedavg => AggregatorKind::FedAvg,
            AggregatorName::CoordMedian => AggregatorKind::CoordMedian,
            AggregatorName::Krum => AggregatorKind::Krum { f: a.krum_f },
            AggregatorName::MedianKrum => AggregatorKind::MedianKrum { f: a.krum_f },
        }
    }

    fn base_attack_spec(&self) -> AttackSpec {
        let a = &self.attack;
        AttackSpec {
            kind: a.kind,
            source_class: a.source_class,
            target_class: a.target_class,
            flip_fraction: a.flip_fraction,
            poison_fraction: a.poison_fraction,
            boost: a.boost,
            mask_ratio: a.mask_ratio,
            trigger: None,
            dba_parts: a.dba_parts,
        }
    }

    /// Attack parameters with the trigger resolved against the training data.
    ///
    /// Without an explicit trigger, images get a 3×3 top-left square and
    /// vectors their first 3 features, set to the largest training feature value.
    pub fn attack_spec(&self, train: &LabeledDataset) -> Result<AttackSpec> {
        let mut spec = self.base_attack_spec();
        let value_or_max = |v: Option<f64>| v.unwrap_or_else(|| train.max_feature());
        let target = spec.target_class;
        spec.trigger = Some(match (&self.attack.trigger, train.image_shape()) {
            (Some(t), _) => TriggerPattern::new(
                t.positions.clone(),
                vec![value_or_max(t.value); t.positions.len()],
                target,
            )?,
            (None, Some((_, cols))) => {
                TriggerPattern::corner_square(cols, 3, value_or_max(None), target)?
            }
            (None, None) => TriggerPattern::leading_features(3.min(train.dim()), value_or_max(None), target)?,
        });
        Ok(spec)
    }

    /// Every constraint violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.seed > i64::MAX as u64 {
            v.push(format!("seed must be at most {}", i64::MAX));
        }
        if self.clients < 2 {
            v.push(format!("clients must be >= 2, got {}", self.clients));
        }
        if !(0.0..0.5).contains(&self.malicious_fraction) {
            v.push(format!(
                "malicious_fraction must be in [0, 0.5) by the threat model (fewer than half the clients are adversarial), got {}",
                self.malicious_fraction
            ));
        } else if 2 * self.malicious_count() >= self.clients {
            v.push(format!(
                "threat model violated: {} malicious of {} clients is not fewer than half",
                self.malicious_count(),
                self.clients
            ));
        }
        let [lo, hi] = self.participation;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            v.push(format!("participation bounds must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        if self.partition.kind == PartitionKind::Dirichlet
            && !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite())
        {
            v.push(format!("partition.alpha must be > 0, got {}", self.partition.alpha));
        }

        match (&self.dataset.synthetic, &self.dataset.mnist) {
            (Some(s), None) => {
                if s.classes < 2 {
                    v.push(format!("dataset.synthetic.classes must be >= 2, got {}", s.classes));
                }
                if s.features < s.classes {
                    v.push(format!(
                        "dataset.synthetic.features ({}) must be >= classes ({})",
                        s.features, s.classes
                    ));
                }
                if s.samples < self.clients {
                    v.push(format!(
                        "dataset.synthetic.samples ({}) must be >= clients ({})",
                        s.samples, self.clients
                    ));
                }
                if s.test_samples == 0 {
                    v.push("dataset.synthetic.test_samples must be >= 1".to_string());
                }
                if !(s.separation >= 0.0 && s.separation.is_finite()) {
                    v.push(format!("dataset.synthetic.separation must be >= 0, got {}", s.separation));
                }
            }
            (None, Some(m)) => {
                if m.train_limit.is_some_and(|n| n < self.clients) {
                    v.push("dataset.mnist.train_limit must be >= clients".to_string());
                }
                if m.test_limit == Some(0) {
                    v.push("dataset.mnist.test_limit must be >= 1".to_string());
                }
            }
            _ => v.push("dataset must contain exactly one of [dataset.synthetic] or [dataset.mnist]".to_string()),
        }

        if let Some(hidden) = &self.model.hidden {
            if hidden.is_empty() || hidden.contains(&0) {
                v.push(format!("model.hidden must be nonempty with positive sizes, got {hidden:?}"));
            }
        }
        v.extend(self.train_config(0).violations().into_iter().map(|e| format!("training.{e}")));

        v.extend(self.base_attack_spec().violations().into_iter().map(|e| format!("attack.{e}")));
        if let Some((dim, classes)) = self.data_shape() {
            let a = &self.attack;
            if a.kind != AttackKind::None {
                if a.target_class >= classes {
                    v.push(format!("attack.target_class {} outside [0, {classes})", a.target_class));
                }
                if a.kind == AttackKind::Tlfa && a.source_class >= classes {
                    v.push(format!("attack.source_class {} outside [0, {classes})", a.source_class));
                }
            }
            if let Some(t) = &a.trigger {
                if t.positions.is_empty() {
                    v.push("attack.trigger.positions must be nonempty".to_string());
                }
                if let Some(p) = t.positions.iter().find(|&&p| p >= dim) {
                    v.push(format!("attack.trigger position {p} outside feature dimension {dim}"));
                }
                if let Some(val) = t.value.filter(|x| !(0.0..=1.0).contains(x)) {
                    v.push(format!("attack.trigger.value {val} outside [0, 1]"));
                }
            }
            if a.kind == AttackKind::Dba {
                let positions = a.trigger.as_ref().map_or(
                    if dim == MNIST_DIM && self.dataset.mnist.is_some() { 9 } else { 3 },
                    |t| t.positions.len(),
                );
                if let Some(m) = a.dba_parts.filter(|&m| m > positions) {
                    v.push(format!("attack.dba_parts {m} exceeds trigger size {positions}"));
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(v))
        }
    }

    /// The resolved config as a TOML document that parses back to an equal config.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::usage(format!("cannot serialize config: {e}")))
    }
}

/// Parses, fills defaults and validates a config document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        Error::ConfigSyntax {
            line,
            message: e.message().to_string(),
        }
    })?;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
