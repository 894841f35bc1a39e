//! The federated round loop.
//!
//! Each round samples participants, trains them locally from the current
//! global model, lets malicious participants transform their models, aggregates
//! and scores the new global model on the held-out test set.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::attacks::{
    boost_update, embed_trigger, flip_labels_targeted, flip_labels_untargeted, neurotoxin_mask,
    split_trigger, stamp_all, AttackKind, AttackSpec, TriggerPattern,
};
use crate::config::{ExperimentConfig, PartitionKind};
use crate::data::{gen_synthetic, load_idx, partition_dirichlet, partition_iid, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{add_update, diff, GradientUpdate, ModelWeights};
use crate::seed::{self, Stream};
use crate::training::{evaluate, init_model, predict_all, train_local, Evaluation, NetworkArchitecture};

/// Draws a participation share uniformly in `[lo, hi]` and picks
/// `max(2, round(share × K))` distinct clients, returned in ascending order.
pub fn sample_participants<R: Rng + ?Sized>(
    clients: usize,
    bounds: [f64; 2],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let [lo, hi] = bounds;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::usage(format!(
            "participation bounds must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
        )));
    }
    if clients < 2 {
        return Err(Error::usage(format!("need at least 2 clients, got {clients}")));
    }
    let share = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let m = ((share * clients as f64).round() as usize).clamp(2, clients);
    let mut chosen = sample(rng, clients, m).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// A simulated node and the (possibly poisoned) data it trains on.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub malicious: bool,
    pub data: LabeledDataset,
}

#[derive(Debug, Clone)]
pub struct FederationState {
    /// Number of completed rounds.
    pub round: usize,
    pub global: ModelWeights,
    /// Global model before the last round, observable by attackers.
    pub previous_global: Option<ModelWeights>,
    pub clients: Vec<Client>,
    pub master_seed: u64,
}

impl FederationState {
    pub fn malicious_count(&self) -> usize {
        self.clients.iter().filter(|c| c.malicious).count()
    }
}

/// One layer's verdict, expressed in client ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVerdict {
    pub layer: usize,
    pub benign: Vec<usize>,
    pub poisoned: Vec<usize>,
    pub score_1: f64,
    pub score_2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub malicious_participants: usize,
    /// Empty unless the layered defense is active.
    pub verdicts: Vec<LayerVerdict>,
    pub mta: f64,
    pub per_class: Vec<Option<f64>>,
    pub asr: f64,
    /// Participants kept in every layer (all participants for other aggregators).
    pub benign_count: usize,
    /// Participants dropped in at least one layer.
    pub poisoned_count: usize,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// ASR value plus a warning when it had to be defined by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrOutcome {
    pub asr: f64,
    pub warning: Option<String>,
}

fn decay_ratio(reference: f64, attacked: f64, what: &str) -> AsrOutcome {
    if reference <= 0.0 {
        return AsrOutcome {
            asr: 0.0,
            warning: Some(format!("reference {what} is zero; ASR set to 0")),
        };
    }
    AsrOutcome {
        asr: ((reference - attacked) / reference).clamp(0.0, 1.0),
        warning: None,
    }
}

/// Attack success rate for one evaluation.
///
/// Label flips compare against a matched no-attack `reference`: relative drop of
/// overall accuracy (untargeted) or of the source class's accuracy (targeted).
/// Backdoors use `triggered_rate`, the share of triggered non-target test
/// samples classified as the target class. No attack scores 0.
pub fn compute_asr(
    spec: &AttackSpec,
    attacked: &Evaluation,
    reference: Option<&Evaluation>,
    triggered_rate: Option<f64>,
) -> Result<AsrOutcome> {
    let need_ref = || reference.ok_or_else(|| Error::usage(format!("{} ASR needs a reference evaluation", spec.kind)));
    match spec.kind {
        AttackKind::None => Ok(AsrOutcome { asr: 0.0, warning: None }),
        AttackKind::Ulfa => Ok(decay_ratio(need_ref()?.accuracy, attacked.accuracy, "accuracy")),
        AttackKind::Tlfa => {
            let class_acc = |e: &Evaluation| e.per_class.get(spec.source_class).copied().flatten();
            match (class_acc(need_ref()?), class_acc(attacked)) {
                (Some(r), Some(a)) => Ok(decay_ratio(r, a, "source-class accuracy")),
                _ => Ok(AsrOutcome {
                    asr: 0.0,
                    warning: Some("source class absent from the test set; ASR set to 0".into()),
                }),
            }
        }
        AttackKind::Mra | AttackKind::Dba | AttackKind::Neurotoxin => {
            let rate = triggered_rate
                .ok_or_else(|| Error::usage("backdoor ASR needs a triggered evaluation"))?;
            Ok(AsrOutcome { asr: rate.clamp(0.0, 1.0), warning: None })
        }
    }
}

/// Share of `triggered` samples predicted as `target`.
pub fn backdoor_success_rate(
    model: &ModelWeights,
    arch: &NetworkArchitecture,
    triggered: &LabeledDataset,
    target: usize,
) -> Result<Option<f64>> {
    if triggered.is_empty() {
        return Ok(None);
    }
    let predictions = predict_all(model, arch, triggered)?;
    let hits = predictions.iter().filter(|&&p| p == target).count();
    Ok(Some(hits as f64 / triggered.len() as f64))
}

/// Test samples whose true class is not `target`, each stamped with the full trigger.
pub fn triggered_test_set(test: &LabeledDataset, trigger: &TriggerPattern) -> Result<LabeledDataset> {
    let keep: Vec<usize> = (0..test.len())
        .filter(|&i| test.label(i) != trigger.target_class)
        .collect();
    stamp_all(&test.subset(&keep), trigger)
}

/// Everything fixed for the lifetime of an experiment.
pub struct Federation {
    config: ExperimentConfig,
    arch: NetworkArchitecture,
    aggregator: AggregatorKind,
    attack: AttackSpec,
    test: LabeledDataset,
    triggered_test: Option<LabeledDataset>,
    state: FederationState,
}

/// Train/test data described by the config.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let seed = config.seed;
    if let Some(s) = &config.dataset.synthetic {
        let mut rng = seed::rng(seed, Stream::Dataset, 0, 0);
        let train = gen_synthetic(s.classes, s.samples, s.features, s.separation, &mut rng)?;
        let mut rng = seed::rng(seed, Stream::TestSet, 0, 0);
        let test = gen_synthetic(s.classes, s.test_samples, s.features, s.separation, &mut rng)?;
        Ok((train, test))
    } else if let Some(m) = &config.dataset.mnist {
        let truncate = |d: LabeledDataset, limit: Option<usize>| match limit {
            Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>()),
            _ => d,
        };
        let train = truncate(load_idx(&m.train_images, &m.train_labels)?, m.train_limit);
        let test = truncate(load_idx(&m.test_images, &m.test_labels)?, m.test_limit);
        Ok((train, test))
    } else {
        Err(Error::usage("dataset must name exactly one source"))
    }
}

impl Federation {
    /// Builds datasets, partitions, roster and the initial model from a validated config.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let (train, test) = load_datasets(config)?;
        Self::with_data(config, &train, test)
    }

    pub fn with_data(config: &ExperimentConfig, train: &LabeledDataset, test: LabeledDataset) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let arch = config.architecture()?;
        if train.dim() != arch.input_dim() || test.dim() != arch.input_dim() {
            return Err(Error::structural("dataset dimension does not match the architecture"));
        }
        let attack = config.attack_spec(train)?;
        let k = config.clients;

        let mut rng = seed::rng(seed, Stream::Partition, 0, 0);
        let partition = match config.partition.kind {
            PartitionKind::Iid => partition_iid(train, k, &mut rng)?,
            PartitionKind::Dirichlet => partition_dirichlet(train, k, config.partition.alpha, &mut rng)?,
        };

        let mut roster: Vec<usize> = (0..k).collect();
        roster.shuffle(&mut seed::rng(seed, Stream::Roster, 0, 0));
        let malicious: BTreeSet<usize> = roster[..config.malicious_count()].iter().copied().collect();

        let trigger = attack.trigger.clone().expect("attack_spec resolves the trigger");
        let fragments = if attack.kind == AttackKind::Dba {
            let parts = attack
                .dba_parts
                .unwrap_or_else(|| 4.min(malicious.len()).max(1))
                .min(trigger.positions.len());
            split_trigger(&trigger, parts)?
        } else {
            vec![trigger.clone()]
        };

        let clients = (0..k)
            .map(|id| {
                let local = train.subset(partition.client(id));
                let is_malicious = malicious.contains(&id);
                let data = if is_malicious {
                    let rank = malicious.range(..id).count();
                    poison_local_data(&attack, &fragments[rank % fragments.len()], local, seed, id)?
                } else {
                    local
                };
                Ok(Client { id, malicious: is_malicious, data })
            })
            .collect::<Result<Vec<_>>>()?;

        let triggered_test = if attack.kind.is_backdoor() {
            Some(triggered_test_set(&test, &trigger)?)
        } else {
            None
        };

        let global = init_model(&arch, seed::derive(seed, Stream::ModelInit, 0, 0));
        Ok(Self {
            config: config.clone(),
            aggregator: config.aggregator_kind(),
            arch,
            attack,
            test,
            triggered_test,
            state: FederationState {
                round: 0,
                global,
                previous_global: None,
                clients,
                master_seed: seed,
            },
        })
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn architecture(&self) -> &NetworkArchitecture {
        &self.arch
    }

    pub fn attack(&self) -> &AttackSpec {
        &self.attack
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    /// Evaluates the current global model: test accuracy, and the backdoor rate when relevant.
    pub fn evaluate_global(&self) -> Result<(Evaluation, Option<f64>)> {
        let eval = evaluate(&self.state.global, &self.arch, &self.test)?;
        let rate = match &self.triggered_test {
            Some(t) => backdoor_success_rate(&self.state.global, &self.arch, t, self.attack.target_class)?,
            None => None,
        };
        Ok((eval, rate))
    }

    /// Scores the current global model against an optional matched reference.
    pub fn score(&self, reference: Option<&Evaluation>) -> Result<(Evaluation, AsrOutcome)> {
        let (eval, rate) = self.evaluate_global()?;
        let mut outcome = compute_asr(
            &self.attack,
            &eval,
            reference,
            rate.or(self.attack.kind.is_backdoor().then_some(0.0)),
        )?;
        if self.attack.kind.is_backdoor() && rate.is_none() {
            outcome.warning = Some("no non-target test samples; backdoor ASR set to 0".into());
        }
        Ok((eval, outcome))
    }

    /// Runs one round. `reference` is the matched no-attack evaluation after the
    /// same round, required for label-flip attacks.
    pub fn run_round(&mut self, reference: Option<&Evaluation>) -> Result<RoundReport> {
        let round = self.state.round + 1;
        self.step(round, reference)
            .map_err(|e| Error::Round { round, source: Box::new(e) })
    }

    fn step(&mut self, round: usize, reference: Option<&Evaluation>) -> Result<RoundReport> {
        let started = Instant::now();
        let seed = self.state.master_seed;
        let participants = sample_participants(
            self.config.clients,
            self.config.participation,
            &mut seed::rng(seed, Stream::Participants, round as u64, 0),
        )?;

        let global = &self.state.global;
        let neurotoxin_reference = match &self.state.previous_global {
            Some(prev) => diff(global, prev)?,
            None => GradientUpdate::new(global.layers().iter().map(|l| vec![0.0; l.len()]).collect()),
        };
        let gamma = self.attack.boost.unwrap_or(participants.len() as f64);

        let locals = participants
            .par_iter()
            .map(|&id| {
                let client = &self.state.clients[id];
                let cfg = self
                    .config
                    .train_config(seed::derive(seed, Stream::LocalTraining, round as u64, id as u64));
                let local = train_local(global, &self.arch, &client.data, &cfg)?;
                if !client.malicious {
                    return Ok(local);
                }
                match self.attack.kind {
                    AttackKind::Mra => boost_update(&local, global, gamma),
                    AttackKind::Neurotoxin => {
                        let masked = neurotoxin_mask(&diff(&local, global)?, &neurotoxin_reference, self.attack.mask_ratio)?;
                        add_update(global, &masked)
                    }
                    _ => Ok(local),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let aggregation = self.aggregator.aggregate(global, &locals)?;
        if !aggregation.model.is_finite() {
            return Err(Error::usage("aggregated model contains non-finite weights"));
        }

        let verdicts: Vec<LayerVerdict> = aggregation
            .verdicts
            .iter()
            .enumerate()
            .map(|(layer, v)| LayerVerdict {
                layer,
                benign: v.benign.iter().map(|&i| participants[i]).collect(),
                poisoned: v.poisoned.iter().map(|&i| participants[i]).collect(),
                score_1: v.score_1,
                score_2: v.score_2,
            })
            .collect();
        let dropped: BTreeSet<usize> = verdicts.iter().flat_map(|v| v.poisoned.iter().copied()).collect();

        let previous = std::mem::replace(&mut self.state.global, aggregation.model);
        self.state.previous_global = Some(previous);
        self.state.round = round;

        let (eval, asr) = self.score(reference)?;
        let malicious_participants = participants
            .iter()
            .filter(|&&id| self.state.clients[id].malicious)
            .count();
        Ok(RoundReport {
            round,
            benign_count: participants.len() - dropped.len(),
            poisoned_count: dropped.len(),
            malicious_participants,
            participants,
            verdicts,
            mta: eval.accuracy,
            per_class: eval.per_class,
            asr: asr.asr,
            wall_ms: started.elapsed().as_millis() as u64,
            warnings: asr.warning.into_iter().collect(),
        })
    }
}

fn poison_local_data(
    attack: &AttackSpec,
    trigger: &TriggerPattern,
    data: LabeledDataset,
    master: u64,
    client: usize,
) -> Result<LabeledDataset> {
    let mut rng = seed::rng(master, Stream::Poison, client as u64, 0);
    match attack.kind {
        AttackKind::None => Ok(data),
        AttackKind::Ulfa => flip_labels_untargeted(&data, attack.flip_fraction, &mut rng),
        AttackKind::Tlfa => flip_labels_targeted(&data, attack.source_class, attack.target_class),
        AttackKind::Mra | AttackKind::Dba | AttackKind::Neurotoxin => {
            embed_trigger(&data, trigger, attack.poison_fraction, &mut rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub rounds_completed: usize,
    pub initial_mta: f64,
    pub final_mta: f64,
    pub final_asr: f64,
    pub final_per_class: Vec<Option<f64>>,
    /// Final accuracy of the matched no-attack run, for label-flip attacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_final_mta: Option<f64>,
    pub verdict_history: Vec<RoundVerdicts>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundVerdicts {
    pub round: usize,
    pub layers: Vec<LayerVerdict>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    /// Per-round reports of the matched no-attack run, when one was needed.
    pub reference: Option<Vec<RoundReport>>,
}

/// Runs a full experiment; see [`run_experiment_with`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(config, |_| {})
}

/// Runs `config.rounds` rounds, calling `on_round` after each attacked-run round.
///
/// Label-flip attacks first run the same config with the attack disabled; both
/// runs share every seed, so participants and benign training match exactly.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let (train, test) = load_datasets(config)?;

    let reference = if config.attack.kind.is_label_flip() {
        let mut clean = config.clone();
        clean.attack.kind = AttackKind::None;
        let mut fed = Federation::with_data(&clean, &train, test.clone())?;
        let initial = fed.score(None)?.0;
        let mut evals = vec![initial];
        let mut reports = Vec::with_capacity(config.rounds);
        for _ in 0..config.rounds {
            let r = fed.run_round(None)?;
            evals.push(Evaluation {
                accuracy: r.mta,
                per_class: r.per_class.clone(),
            });
            reports.push(r);
        }
        Some((evals, reports))
    } else {
        None
    };

    let mut fed = Federation::with_data(config, &train, test)?;
    let ref_eval = |t: usize| reference.as_ref().map(|(e, _)| &e[t]);
    let (initial, initial_asr) = fed.score(ref_eval(0))?;
    let mut warnings: Vec<String> = initial_asr.warning.iter().cloned().collect();
    let mut reports = Vec::with_capacity(config.rounds);
    for t in 1..=config.rounds {
        let report = fed.run_round(ref_eval(t))?;
        on_round(&report);
        warnings.extend(report.warnings.iter().map(|w| format!("round {t}: {w}")));
        reports.push(report);
    }

    let (final_mta, final_asr, final_per_class) = match reports.last() {
        Some(r) => (r.mta, r.asr, r.per_class.clone()),
        None => (initial.accuracy, initial_asr.asr, initial.per_class.clone()),
    };
    let summary = Summary {
        config: config.clone(),
        rounds_completed: reports.len(),
        initial_mta: initial.accuracy,
        final_mta,
        final_asr,
        final_per_class,
        reference_final_mta: reference.as_ref().map(|(e, _)| e.last().expect("initial eval").accuracy),
        verdict_history: reports
            .iter()
            .filter(|r| !r.verdicts.is_empty())
            .map(|r| RoundVerdicts { round: r.round, layers: r.verdicts.clone() })
            .collect(),
        warnings,
    };
    Ok(ExperimentOutcome {
        reports,
        summary,
        reference: reference.map(|(_, r)| r),
    })
}
