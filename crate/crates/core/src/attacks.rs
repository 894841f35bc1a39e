//! Poisoning strategies run by malicious clients.
//!
//! Data-level attacks rewrite the local dataset once (label flips, trigger
//! embedding). Model-level attacks transform the trained local model before it
//! is sent (boosting the delta, masking heavily-updated coordinates).

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{add_update, diff, GradientUpdate, ModelWeights};

/// Feature positions and values that form a backdoor, plus the class it maps to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPattern {
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    pub target_class: usize,
}

impl TriggerPattern {
    pub fn new(positions: Vec<usize>, values: Vec<f64>, target_class: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::usage("trigger needs at least one position"));
        }
        if positions.len() != values.len() {
            return Err(Error::structural(format!(
                "trigger has {} positions but {} values",
                positions.len(),
                values.len()
            )));
        }
        Ok(Self {
            positions,
            values,
            target_class,
        })
    }

    /// A `side × side` square at the top-left corner of a row-major image.
    pub fn corner_square(cols: usize, side: usize, value: f64, target_class: usize) -> Result<Self> {
        let positions = (0..side)
            .flat_map(|r| (0..side).map(move |c| r * cols + c))
            .collect::<Vec<_>>();
        let values = vec![value; positions.len()];
        Self::new(positions, values, target_class)
    }

    /// The first `count` features.
    pub fn leading_features(count: usize, value: f64, target_class: usize) -> Result<Self> {
        Self::new((0..count).collect(), vec![value; count], target_class)
    }

    fn check_fits(&self, data: &LabeledDataset) -> Result<()> {
        if let Some(&p) = self.positions.iter().find(|&&p| p >= data.dim()) {
            return Err(Error::structural(format!(
                "trigger position {p} outside feature dimension {}",
                data.dim()
            )));
        }
        if self.target_class >= data.classes() {
            return Err(Error::usage(format!(
                "trigger target class {} outside [0, {})",
                self.target_class,
                data.classes()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::usage(format!("trigger value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Writes the trigger values into one feature row.
    pub fn stamp(&self, row: &mut [f64]) {
        for (&p, &v) in self.positions.iter().zip(&self.values) {
            row[p] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[default]
    None,
    Ulfa,
    Tlfa,
    Mra,
    Dba,
    Neurotoxin,
}

impl AttackKind {
    pub fn is_backdoor(self) -> bool {
        matches!(self, AttackKind::Mra | AttackKind::Dba | AttackKind::Neurotoxin)
    }

    pub fn is_label_flip(self) -> bool {
        matches!(self, AttackKind::Ulfa | AttackKind::Tlfa)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::None => "none",
            AttackKind::Ulfa => "ulfa",
            AttackKind::Tlfa => "tlfa",
            AttackKind::Mra => "mra",
            AttackKind::Dba => "dba",
            AttackKind::Neurotoxin => "neurotoxin",
        })
    }
}

/// Attack parameters shared by all malicious clients of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub source_class: usize,
    pub target_class: usize,
    /// Share of local samples relabelled by the untargeted flip.
    pub flip_fraction: f64,
    /// Share of local samples carrying the trigger in backdoor attacks.
    pub poison_fraction: f64,
    /// Model-replacement scale; `None` means the round's participant count.
    pub boost: Option<f64>,
    pub mask_ratio: f64,
    /// Full trigger; `None` until resolved against a dataset.
    pub trigger: Option<TriggerPattern>,
    /// Number of distributed-backdoor fragments; `None` means `min(4, attackers)`.
    pub dba_parts: Option<usize>,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            source_class: 1,
            target_class: 0,
            flip_fraction: 1.0,
            poison_fraction: 0.5,
            boost: None,
            mask_ratio: 0.05,
            trigger: None,
            dba_parts: None,
        }
    }

    /// Invariant violations, if any.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.kind == AttackKind::Tlfa && self.source_class == self.target_class {
            out.push("tlfa requires source_class != target_class".to_string());
        }
        if !(self.flip_fraction > 0.0 && self.flip_fraction <= 1.0) {
            out.push(format!("flip_fraction must be in (0, 1], got {}", self.flip_fraction));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            out.push(format!(
                "poison_fraction must be in (0, 1], got {}",
                self.poison_fraction
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            out.push(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        if let Some(b) = self.boost {
            if !(b > 0.0 && b.is_finite()) {
                out.push(format!("boost must be > 0, got {b}"));
            }
        }
        if self.dba_parts == Some(0) {
            out.push("dba_parts must be >= 1".to_string());
        }
        out
    }
}

/// Rounds `fraction × n` half away from zero.
fn share(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Relabels a uniformly chosen `fraction` of the samples, each to a uniformly
/// random class different from its own.
pub fn flip_labels_untargeted<R: Rng + ?Sized>(
    data: &LabeledDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if data.classes() < 2 {
        return Err(Error::usage("label flipping needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::usage(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let mut out = data.clone();
    let classes = data.classes();
    let chosen = sample(rng, data.len(), share(fraction, data.len())).into_vec();
    let labels = out.labels_mut();
    for i in chosen {
        // draw from the C-1 other classes
        let r = rng.random_range(0..classes - 1);
        labels[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok(out)
}

/// Every `source` label becomes `target`.
pub fn flip_labels_targeted(
    data: &LabeledDataset,
    source: usize,
    target: usize,
) -> Result<LabeledDataset> {
    if source == target {
        return Err(Error::usage("targeted flip needs source != target"));
    }
    if source >= data.classes() || target >= data.classes() {
        return Err(Error::usage(format!(
            "classes {source}->{target} outside [0, {})",
            data.classes()
        )));
    }
    let mut out = data.clone();
    for l in out.labels_mut() {
        if *l == source {
            *l = target;
        }
    }
    Ok(out)
}

/// Stamps the trigger onto a uniformly chosen `fraction` of the samples and
/// relabels them to the trigger's target class.
pub fn embed_trigger<R: Rng + ?Sized>(
    data: &LabeledDataset,
    trigger: &TriggerPattern,
    fraction: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    trigger.check_fits(data)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::usage(format!("poison fraction {fraction} outside [0, 1]")));
    }
    let mut out = data.clone();
    let chosen = sample(rng, data.len(), share(fraction, data.len())).into_vec();
    for &i in &chosen {
        trigger.stamp(out.row_mut(i));
        out.labels_mut()[i] = trigger.target_class;
    }
    Ok(out)
}

/// Every sample with the full trigger applied; labels untouched.
pub fn stamp_all(data: &LabeledDataset, trigger: &TriggerPattern) -> Result<LabeledDataset> {
    trigger.check_fits(data)?;
    let mut out = data.clone();
    for i in 0..out.len() {
        trigger.stamp(out.row_mut(i));
    }
    Ok(out)
}

/// Cuts the trigger into `parts` contiguous, nonempty fragments (sizes differ by at most one).
pub fn split_trigger(trigger: &TriggerPattern, parts: usize) -> Result<Vec<TriggerPattern>> {
    let n = trigger.positions.len();
    if parts == 0 || parts > n {
        return Err(Error::usage(format!(
            "cannot split a {n}-position trigger into {parts} parts"
        )));
    }
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let len = n / parts + usize::from(k < n % parts);
        out.push(TriggerPattern {
            positions: trigger.positions[start..start + len].to_vec(),
            values: trigger.values[start..start + len].to_vec(),
            target_class: trigger.target_class,
        });
        start += len;
    }
    Ok(out)
}

/// `global + γ (local − global)`.
pub fn boost_update(local: &ModelWeights, global: &ModelWeights, gamma: f64) -> Result<ModelWeights> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::usage(format!("boost factor must be > 0, got {gamma}")));
    }
    let delta = diff(local, global)?;
    let scaled = GradientUpdate::new(
        delta
            .into_layers()
            .into_iter()
            .map(|l| l.into_iter().map(|v| gamma * v).collect())
            .collect(),
    );
    add_update(global, &scaled)
}

/// Zeroes, per layer, the `⌈ratio · size⌉` coordinates of `update` where
/// `|reference|` is largest. Equal magnitudes rank the lower index first.
pub fn neurotoxin_mask(
    update: &GradientUpdate,
    reference: &GradientUpdate,
    mask_ratio: f64,
) -> Result<GradientUpdate> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::usage(format!("mask ratio must be in (0, 1), got {mask_ratio}")));
    }
    if update.num_layers() != reference.num_layers() {
        return Err(Error::structural("update and reference layer counts differ"));
    }
    let layers = update
        .layers()
        .iter()
        .zip(reference.layers())
        .enumerate()
        .map(|(l, (u, r))| {
            if u.len() != r.len() {
                return Err(Error::structural(format!("layer {l} length mismatch")));
            }
            let k = ((mask_ratio * u.len() as f64).ceil() as usize).min(u.len());
            let mut order: Vec<usize> = (0..u.len()).collect();
            order.sort_by(|&a, &b| r[b].abs().total_cmp(&r[a].abs()).then(a.cmp(&b)));
            let mut out = u.clone();
            for &i in &order[..k] {
                out[i] = 0.0;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(GradientUpdate::new(layers))
}
