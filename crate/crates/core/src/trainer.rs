//! Plain SGD over batch-hard triplets with the combined objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RawInput};
use crate::error::{Error, Result};
use crate::matcher::graph::{pair_distance, SeqVars};
use crate::matcher::{pairwise_distances, DistanceMode};
use crate::mining::{mine_hard_triplets, sample_pk_batch, BatchSpec, MinedTriplet};
use crate::model::{Checkpoint, Model};
use crate::objectives::{graph as loss_graph, LossBreakdown, LossConfig, PoolingWeights};
use crate::parallel::Execution;
use crate::rng::{stream_rng, Stream};
use crate::tensor::nn::{Binder, BnMode, BnUpdate, Parameters, TensorKind};
use crate::tensor::{Array, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// First epoch trained with `lr_final`; past `epochs` the rate never drops.
    pub lr_drop_epoch: usize,
    pub seed: u64,
    pub freeze_extractor: bool,
    pub loss: LossConfig,
    pub batch: BatchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 50,
            lr_initial: 0.01,
            lr_final: 0.001,
            lr_drop_epoch: 25,
            seed: 0,
            freeze_extractor: false,
            loss: LossConfig::default(),
            batch: BatchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps_per_epoch == 0 {
            out.push("steps_per_epoch must be positive".to_string());
        }
        for (name, lr) in [("lr_initial", self.lr_initial), ("lr_final", self.lr_final)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                out.push(format!("{name} must be a finite non-negative number, got {lr}"));
            }
        }
        out.extend(self.loss.problems());
        out.extend(self.batch.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Step size for a given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_initial
        } else {
            self.lr_final
        }
    }
}

/// Which loss terms contribute gradient in a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub triplet: bool,
    pub decorrelation: bool,
    pub identity: bool,
}

impl LossTerms {
    pub const ALL: Self = Self {
        triplet: true,
        decorrelation: true,
        identity: true,
    };
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss,triplet_loss,decorr_loss,ce_loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.loss.total, self.loss.triplet, self.loss.decorrelation, self.loss.ce
        )
    }
}

pub struct Trainer<'d> {
    config: TrainConfig,
    model: Model,
    dataset: &'d Dataset,
    by_identity: Vec<Vec<usize>>,
    step: u64,
    exec: Execution,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, dataset: &'d Dataset, config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        if dataset.num_identities != model.head.num_identities() {
            return Err(Error::Config(format!(
                "dataset has {} identities but the classifier head has {}",
                dataset.num_identities,
                model.head.num_identities()
            )));
        }
        let by_identity = dataset.by_identity();
        let populated = by_identity.iter().filter(|g| !g.is_empty()).count();
        if populated < config.batch.p {
            return Err(Error::NotEnoughIdentities {
                needed: config.batch.p,
                available: populated,
            });
        }
        Ok(Self {
            config,
            model,
            dataset,
            by_identity,
            step: 0,
            exec,
        })
    }

    /// Continues from a checkpoint; the schedule picks up at its step.
    pub fn resume(checkpoint: Checkpoint, dataset: &'d Dataset, config: TrainConfig, exec: Execution) -> Result<Self> {
        let mut t = Self::new(checkpoint.model, dataset, config, exec)?;
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.config.steps_per_epoch as u64) as usize
    }

    pub fn is_finished(&self) -> bool {
        self.epoch() >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            seed: self.config.seed,
            epoch: self.epoch(),
            step: self.step,
        }
    }

    /// Trains until the configured number of epochs is complete.
    pub fn run(&mut self, log: &mut dyn FnMut(&StepLog)) -> Result<()> {
        while !self.is_finished() {
            let row = self.train_step(LossTerms::ALL)?;
            log(&row);
        }
        Ok(())
    }

    /// Runs one optimisation step.
    pub fn train_step(&mut self, terms: LossTerms) -> Result<StepLog> {
        let step = self.step;
        let epoch = self.epoch();
        let lr = self.config.lr_at(epoch);
        let mode = self.model.mode();
        let non_finite = |detail: String| Error::NonFiniteLoss { step, epoch, detail };

        let batch = sample_pk_batch(
            &self.by_identity,
            &self.config.batch,
            &mut stream_rng(self.config.seed, Stream::Sampler, step),
        )?;
        let inputs: Vec<_> = batch.items.iter().map(|&i| &self.dataset.inputs[i]).collect();
        let snapshot = self.model.embed_all(&inputs, mode, self.exec)?;
        let dist = pairwise_distances(&snapshot, mode, self.exec)?;
        let triplets = mine_hard_triplets(&dist, &batch.labels)?;

        let mut pooling_rng = stream_rng(self.config.seed, Stream::Pooling, step);
        let pooling: Vec<PoolingWeights> = snapshot
            .iter()
            .map(|e| PoolingWeights::draw(e.seq.rows(), self.config.loss.p, &mut pooling_rng))
            .collect();

        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let objective = batch_objective(
            &self.model,
            &mut binder,
            &BatchInputs {
                inputs: &inputs,
                labels: &batch.labels,
                triplets: &triplets,
                pooling: &pooling,
            },
            &self.config.loss,
        )?;
        let breakdown = objective.breakdown(&self.config.loss);
        if !breakdown.total.is_finite() {
            return Err(non_finite(format!(
                "loss {} (triplet {}, decorrelation {}, identity {})",
                breakdown.total, breakdown.triplet, breakdown.decorrelation, breakdown.ce
            )));
        }
        if let Some(total) = objective.total(&self.config.loss, terms)? {
            tape.backward(total).map_err(|e| non_finite(e.to_string()))?;
        }
        let grads = binder.gradients();
        self.apply_sgd(&grads, lr).map_err(|name| non_finite(format!("gradient of {name}")))?;
        if let Some(update) = objective.bn_update {
            self.model.matcher.bn.apply_update(&update);
        }
        self.step += 1;
        Ok(StepLog {
            step,
            epoch,
            lr,
            loss: breakdown,
        })
    }

    fn apply_sgd(&mut self, grads: &BTreeMap<String, Array>, lr: f64) -> std::result::Result<(), String> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(name.clone());
            }
        }
        let frozen = self.config.freeze_extractor;
        self.model.visit_mut("", &mut |name, kind, param| {
            if kind != TensorKind::Param || (frozen && name.starts_with("extractor.")) {
                return;
            }
            if let Some(g) = grads.get(name) {
                for (p, &d) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
            }
        });
        Ok(())
    }
}

/// Everything a loss evaluation needs besides the weights.
pub struct BatchInputs<'a> {
    pub inputs: &'a [&'a RawInput],
    pub labels: &'a [usize],
    pub triplets: &'a [MinedTriplet],
    /// Pooling weights for the identity loss, one per input.
    pub pooling: &'a [PoolingWeights],
}

/// The three loss terms of a batch on a tape.
pub struct BatchObjective<'t> {
    pub triplet: Var<'t>,
    pub decorrelation: Var<'t>,
    pub identity: Var<'t>,
    /// Batch statistics of the matcher's BN, when the mode uses filters.
    pub bn_update: Option<BnUpdate>,
}

impl<'t> BatchObjective<'t> {
    pub fn breakdown(&self, cfg: &LossConfig) -> LossBreakdown {
        LossBreakdown::compose(self.triplet.item(), self.decorrelation.item(), self.identity.item(), cfg)
    }

    /// Weighted sum of the selected terms, or `None` if none is selected.
    pub fn total(&self, cfg: &LossConfig, terms: LossTerms) -> Result<Option<Var<'t>>> {
        let mut selected = Vec::new();
        if terms.triplet {
            selected.push(self.triplet);
        }
        if terms.decorrelation {
            selected.push(self.decorrelation.scale(cfg.lambda1));
        }
        if terms.identity {
            selected.push(self.identity.scale(cfg.lambda2));
        }
        match selected.split_first() {
            Some((&first, rest)) => Ok(Some(rest.iter().try_fold(first, |acc, &v| acc.add(v))?)),
            None => Ok(None),
        }
    }
}

/// Builds the batch loss with training-mode BN: the mean hinge over
/// `triplets` and the de-correlation and identity losses averaged over
/// every input. Parameters are bound through `binder` under the names
/// `extractor.*`, `matcher.*` and `head.*`.
pub fn batch_objective<'t>(
    model: &Model,
    binder: &mut Binder<'t>,
    batch: &BatchInputs<'_>,
    cfg: &LossConfig,
) -> Result<BatchObjective<'t>> {
    let tape = binder.tape();
    let mode = model.mode();
    let ev = model.extractor.bind(binder, "extractor");
    let mv = model.matcher.bind(binder, "matcher");
    let hv = model.head.bind(binder, "head");

    let seqs = batch
        .inputs
        .iter()
        .map(|input| ev.forward(tape, input))
        .collect::<Result<Vec<Var>>>()?;
    let (filters, bn_update) = if mode.uses_filters() {
        let stacked = Var::concat_rows(&seqs)?;
        let (q, update) = model.matcher.filters(&mv, stacked, BnMode::Training)?;
        let mut start = 0;
        let mut per_seq = Vec::with_capacity(seqs.len());
        for s in &seqs {
            let len = s.value().rows();
            per_seq.push(Some(q.slice_rows(start, len)?));
            start += len;
        }
        (per_seq, update)
    } else {
        (vec![None; seqs.len()], None)
    };
    let views: Vec<SeqVars> = seqs.iter().zip(&filters).map(|(&x, &q)| SeqVars { x, q }).collect();

    let triplet = triplet_term(&views, batch.triplets, mode, cfg.gamma)?;
    let mut decorr = Vec::with_capacity(seqs.len());
    let mut ce = Vec::with_capacity(seqs.len());
    for ((x, &label), weights) in seqs.iter().zip(batch.labels).zip(batch.pooling) {
        decorr.push(loss_graph::decorrelation(*x)?);
        let z = loss_graph::pool(*x, weights)?;
        ce.push(loss_graph::identity_ce(z, label, &hv)?);
    }
    Ok(BatchObjective {
        triplet,
        decorrelation: mean_of(&decorr)?,
        identity: mean_of(&ce)?,
        bn_update,
    })
}

/// Mean hinge over the mined triplets; each unordered pair is built once.
fn triplet_term<'t>(views: &[SeqVars<'t>], triplets: &[MinedTriplet], mode: DistanceMode, gamma: f64) -> Result<Var<'t>> {
    let mut cache: BTreeMap<(usize, usize), Var<'t>> = BTreeMap::new();
    let mut distance = |i: usize, j: usize| -> Result<Var<'t>> {
        let key = (i.min(j), i.max(j));
        if let Some(&d) = cache.get(&key) {
            return Ok(d);
        }
        let d = pair_distance(&views[key.0], &views[key.1], mode)?.distance;
        cache.insert(key, d);
        Ok(d)
    };
    let mut hinges = Vec::with_capacity(triplets.len());
    for t in triplets {
        let pos = distance(t.anchor, t.positive)?;
        let neg = distance(t.anchor, t.negative)?;
        hinges.push(loss_graph::triplet_hinge(pos, neg, gamma)?);
    }
    mean_of(&hinges)
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let stacked = Var::concat_rows(
        &terms
            .iter()
            .map(|t| t.reshape(&[1, 1]))
            .collect::<std::result::Result<Vec<_>, _>>()?,
    )?;
    Ok(stacked.mean())
}

/// Trains a fresh model and returns it with its per-step log.
pub fn train(model: Model, dataset: &Dataset, config: TrainConfig, exec: Execution) -> Result<(Model, Vec<StepLog>)> {
    let mut trainer = Trainer::new(model, dataset, config, exec)?;
    let mut rows = Vec::new();
    trainer.run(&mut |r| rows.push(*r))?;
    Ok((trainer.into_model(), rows))
}
