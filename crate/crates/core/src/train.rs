//! Pre-training, supervised training on the masked loss, and assembly of the
//! predicted distance matrix.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, OptimizerConfig, ParameterStore, Tape, Var};
use crate::encoder::{pretrain_losses, Dropout, EncoderVars};
use crate::error::{Error, Result};
use crate::eval::spearman_rho;
use crate::ged::LabelSet;
use crate::graph::{Corpus, SplitIndices};
use crate::head::{build_mask, masked_loss, DistanceMatrix, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::model::GraphDistanceModel;
use crate::wl::GraphFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without a new best validation rho before stopping.
    pub patience: usize,
    /// Labeled pairs per step; the same number of unlabeled pairs is added.
    pub batch_pairs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_graphs: usize,
    /// Apply the encoder's dropout during pre-training too.
    pub pretrain_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            patience: 50,
            batch_pairs: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            seed: 1,
            pretrain_epochs: 0,
            pretrain_batch_graphs: 16,
            pretrain_dropout: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs == 0 || self.pretrain_batch_graphs == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("lr must be positive and weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Train,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean mini-batch loss, dropout on.
    pub loss: f64,
    /// Full masked objective over the corpus matrix, dropout off.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    /// Root mean squared error on labeled training pairs, dropout off.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_rho: Option<f64>,
}

pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn save_log(log: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, log_to_jsonl(log)).map_err(|e| Error::io(path, e))
}

const PRETRAIN_STREAM: u64 = 0x7072_6574;
const TRAIN_STREAM: u64 = 0x7472_6169;

/// Unsupervised epochs over `graphs`: attribute reconstruction plus
/// structure recovery. Optimizer moments are reset before and after.
pub fn pretrain(
    model: &mut GraphDistanceModel,
    corpus: &Corpus,
    features: &[GraphFeatures],
    graphs: &[usize],
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if graphs.is_empty() {
        return Err(Error::InvalidArgument("no graphs to pre-train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PRETRAIN_STREAM);
    let optimizer = config.optimizer();
    let encoder_config = model.config().encoder.clone();
    model.store.reset_optimizer();
    let mut log = Vec::new();
    let mut order = graphs.to_vec();
    for epoch in 1..=config.pretrain_epochs {
        let last_good = model.store.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.pretrain_batch_graphs) {
            let batch: Vec<_> = chunk.iter().map(|&i| (corpus.get(i), &features[i])).collect();
            let mut tape = Tape::new();
            let vars = EncoderVars::bind(&mut tape, &model.store, &model.encoder);
            let mut dropout = Dropout::from_config(rng.gen(), &encoder_config);
            let dropout = config.pretrain_dropout.then_some(&mut dropout);
            let loss = pretrain_losses(&mut tape, &vars, &batch, &encoder_config, dropout)?;
            let value = tape.value(loss).item();
            step(model, &mut tape, loss, value, &optimizer).map_err(|reason| Error::Diverged {
                epoch,
                reason,
                last_good: Box::new(last_good.clone()),
            })?;
            total += value;
            steps += 1;
        }
        log.push(EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            loss: total / steps as f64,
            objective: None,
            train_rmse: None,
            validation_rho: None,
        });
    }
    model.store.reset_optimizer();
    Ok(log)
}

fn step(
    model: &mut GraphDistanceModel,
    tape: &mut Tape,
    loss: Var,
    value: f64,
    optimizer: &OptimizerConfig,
) -> std::result::Result<(), String> {
    if !value.is_finite() {
        return Err(format!("loss is {value}"));
    }
    tape.backward(loss).map_err(|e| e.to_string())?;
    model.store.zero_grad();
    model.store.accumulate_gradients(tape);
    model.store.optimizer_step(optimizer).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (the last one without validation).
    pub best_epoch: usize,
    pub best_validation_rho: Option<f64>,
    pub final_validation_rho: Option<f64>,
    /// Parameters after the last epoch run, before best-epoch selection.
    pub final_store: ParameterStore,
}

/// Labeled pairs `i < j` within `train`, with their targets.
pub fn labeled_train_pairs(corpus: &Corpus, train: &[usize], labels: &LabelSet) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (a, &i) in train.iter().enumerate() {
        for &j in &train[a + 1..] {
            if let Some(t) = labels.get(corpus.get(i).id(), corpus.get(j).id()) {
                pairs.push((i.min(j), i.max(j), t));
            }
        }
    }
    pairs
}

/// Context shared by the per-epoch evaluation.
struct Monitor<'a> {
    corpus: &'a Corpus,
    features: &'a [GraphFeatures],
    labeled: &'a [(usize, usize, f64)],
    validation: Vec<(usize, Vec<(usize, f64)>)>,
    alpha: f64,
    beta: f64,
}

impl Monitor<'_> {
    fn run(&self, model: &GraphDistanceModel) -> Result<(f64, f64, Option<f64>)> {
        let z = model.embed_all(self.features)?;
        let pred = model.distance_matrix(self.corpus.ids(), &z)?;
        let m = self.corpus.len();

        let pairs: Vec<(usize, usize)> = self.labeled.iter().map(|&(i, j, _)| (i, j)).collect();
        let mask = build_mask(m, &pairs, self.alpha, self.beta)?;
        let mut target = Matrix::filled(m, m, 1.0);
        for i in 0..m {
            target[(i, i)] = 0.0;
        }
        let mut sse = 0.0;
        for &(i, j, t) in self.labeled {
            target[(i, j)] = t;
            target[(j, i)] = t;
            sse += (pred.get(i, j) - t).powi(2);
        }
        let objective = masked_loss(pred.values(), &target, &mask.weights, 2.0)?;
        let rmse = (sse / self.labeled.len() as f64).sqrt();

        let mut rhos = Vec::new();
        for (q, refs) in &self.validation {
            let p: Vec<f64> = refs.iter().map(|&(j, _)| pred.get(*q, j)).collect();
            let t: Vec<f64> = refs.iter().map(|&(_, t)| t).collect();
            if let Ok(r) = spearman_rho(&p, &t) {
                rhos.push(r);
            } else if t.windows(2).any(|w| w[0] != w[1]) {
                // Constant predictions against a varying truth carry no ranking.
                rhos.push(0.0);
            }
        }
        let rho = (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64);
        Ok((objective, rmse, rho))
    }
}

/// Mini-batch descent on `||M ⊙ (D - D̄)||_2`: each step takes a slice of
/// shuffled labeled training pairs (weight 1, target the label) and as many
/// uniformly drawn unlabeled pairs (weight `alpha`, target 1). The diagonal
/// term is identically zero for this head and is left out of the steps.
///
/// Validation graphs are ranked against training graphs each epoch; the
/// parameters with the best mean Spearman rho are left in `model`.
pub fn train_unconstrained(
    model: &mut GraphDistanceModel,
    corpus: &Corpus,
    features: &[GraphFeatures],
    splits: &SplitIndices,
    labels: &LabelSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if features.len() != corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature sets for {} graphs",
            features.len(),
            corpus.len()
        )));
    }
    let labeled = labeled_train_pairs(corpus, &splits.train, labels);
    if labeled.is_empty() {
        return Err(Error::InvalidData("no labeled training pairs".into()));
    }
    let labeled_set: HashSet<(usize, usize)> = labeled.iter().map(|&(i, j, _)| (i, j)).collect();
    let m = corpus.len();
    let unlabeled: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .filter(|p| !labeled_set.contains(p))
        .collect();
    let validation = splits
        .validation
        .iter()
        .map(|&q| {
            let refs = splits
                .train
                .iter()
                .filter_map(|&t| labels.get(corpus.get(q).id(), corpus.get(t).id()).map(|d| (t, d)))
                .collect::<Vec<_>>();
            (q, refs)
        })
        .filter(|(_, refs)| refs.len() >= 2)
        .collect();
    let monitor = Monitor {
        corpus,
        features,
        labeled: &labeled,
        validation,
        alpha: config.alpha,
        beta: config.beta,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_STREAM);
    let optimizer = config.optimizer();
    let encoder_config = model.config().encoder.clone();
    model.store.reset_optimizer();

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut final_rho = None;
    let mut last_epoch = 0;
    let mut order = labeled.clone();
    for epoch in 1..=config.epochs {
        let last_good = model.store.clone();
        let diverged = |reason: String| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good.clone()),
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_pairs) {
            let mut batch: Vec<(usize, usize, f64, f64)> = chunk.iter().map(|&(i, j, t)| (i, j, t, 1.0)).collect();
            if !unlabeled.is_empty() && config.alpha > 0.0 {
                for _ in 0..chunk.len() {
                    let (i, j) = unlabeled[rng.gen_range(0..unlabeled.len())];
                    batch.push((i, j, 1.0, config.alpha));
                }
            }
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let mut dropout = Dropout::from_config(rng.gen(), &encoder_config);
            let mut z: BTreeMap<usize, Var> = BTreeMap::new();
            let mut distances = Vec::with_capacity(batch.len());
            for &(i, j, _, _) in &batch {
                for g in [i, j] {
                    if !z.contains_key(&g) {
                        let v = model.encode_on_tape(&mut tape, &vars, &features[g], Some(&mut dropout))?;
                        z.insert(g, v);
                    }
                }
                distances.push(model.distance_on_tape(&mut tape, &vars, z[&i], z[&j])?);
            }
            let d = tape.concat_cols(&distances)?;
            let n = batch.len();
            let targets = tape.constant(Matrix::from_vec(1, n, batch.iter().map(|b| b.2).collect())?);
            let weights = tape.constant(Matrix::from_vec(1, n, batch.iter().map(|b| b.3).collect())?);
            let diff = tape.sub(d, targets)?;
            let weighted = tape.mul(diff, weights)?;
            let sq = tape.square(weighted);
            let sse = tape.sum(sq);
            let loss = tape.sqrt(sse);
            let value = tape.value(loss).item();
            step(model, &mut tape, loss, value, &optimizer).map_err(diverged)?;
            total += value;
            steps += 1;
        }

        let (objective, rmse, rho) = monitor.run(model).map_err(|e| diverged(e.to_string()))?;
        log.push(EpochRecord {
            phase: Phase::Train,
            epoch,
            loss: total / steps as f64,
            objective: Some(objective),
            train_rmse: Some(rmse),
            validation_rho: rho,
        });
        last_epoch = epoch;
        final_rho = rho;
        if let Some(r) = rho {
            let improved = best.as_ref().map_or(true, |(_, b, _)| r > *b);
            if improved {
                best = Some((epoch, r, model.store.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.0) >= config.patience {
                break;
            }
        }
    }

    let final_store = model.store.clone();
    let (best_epoch, best_rho) = match best {
        Some((epoch, rho, store)) => {
            model.store = store;
            (epoch, Some(rho))
        }
        None => (last_epoch, None),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_validation_rho: best_rho,
        final_validation_rho: final_rho,
        final_store,
    })
}

/// Predicted matrix over the whole corpus, with every labeled training pair
/// replaced by its label.
pub fn predict_distance_matrix(
    model: &GraphDistanceModel,
    corpus: &Corpus,
    features: &[GraphFeatures],
    labels: &LabelSet,
    train: &[usize],
) -> Result<DistanceMatrix> {
    let z = model.embed_all(features)?;
    let pred = model.distance_matrix(corpus.ids(), &z)?;
    let mut values = pred.into_values();
    for (i, j, t) in labeled_train_pairs(corpus, train, labels) {
        values[(i, j)] = t;
        values[(j, i)] = t;
    }
    let d = DistanceMatrix::new(corpus.ids(), values)?;
    d.check_invariants()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ged::{all_pairs, build_ground_truth, EditCostModel};
    use crate::graph::{generate_synthetic_corpus, split_corpus, SynthParams};
    use crate::model::ModelConfig;

    fn setup(count: usize) -> (Corpus, SplitIndices, LabelSet) {
        let corpus = generate_synthetic_corpus(&SynthParams {
            count,
            ..SynthParams::default()
        })
        .unwrap();
        let splits = split_corpus(&corpus, [0.6, 0.2, 0.2], 1).unwrap().indices(&corpus).unwrap();
        let labels = build_ground_truth(&corpus, &all_pairs(count), &EditCostModel::default(), 8).unwrap();
        (corpus, splits, labels)
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_best_epoch() {
        let (corpus, splits, labels) = setup(12);
        let cfg = TrainConfig {
            epochs: 8,
            patience: 3,
            pretrain_epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = GraphDistanceModel::for_corpus(ModelConfig::default(), &corpus, 5).unwrap();
            let f = model.features(&corpus).unwrap();
            let mut log = pretrain(&mut model, &corpus, &f, &(0..corpus.len()).collect::<Vec<_>>(), &cfg).unwrap();
            let out = train_unconstrained(&mut model, &corpus, &f, &splits, &labels, &cfg).unwrap();
            log.extend(out.log.clone());
            (model, out, log)
        };
        let (a, out, log) = run();
        let (b, _, log_b) = run();
        assert_eq!(a.store.to_checkpoint_bytes(), b.store.to_checkpoint_bytes());
        assert_eq!(log_to_jsonl(&log), log_to_jsonl(&log_b));
        assert!(out.best_validation_rho.unwrap() >= out.final_validation_rho.unwrap());
        let best = out.log.iter().find(|r| r.epoch == out.best_epoch).unwrap();
        assert_eq!(best.validation_rho, out.best_validation_rho);
    }

    #[test]
    fn prediction_overwrites_training_pairs() {
        let (corpus, splits, labels) = setup(10);
        let model = GraphDistanceModel::for_corpus(ModelConfig::default(), &corpus, 5).unwrap();
        let f = model.features(&corpus).unwrap();
        let d = predict_distance_matrix(&model, &corpus, &f, &labels, &splits.train).unwrap();
        d.check_invariants().unwrap();
        let (i, j) = (splits.train[0], splits.train[1]);
        let t = labels.get(corpus.get(i).id(), corpus.get(j).id()).unwrap();
        assert_eq!(d.get(i, j), t);
        assert_eq!(d.get(j, i), t);
    }

    #[test]
    fn no_labels_is_an_error() {
        let (corpus, splits, _) = setup(6);
        let mut model = GraphDistanceModel::for_corpus(ModelConfig::default(), &corpus, 5).unwrap();
        let f = model.features(&corpus).unwrap();
        let err = train_unconstrained(&mut model, &corpus, &f, &splits, &LabelSet::new(), &TrainConfig::default());
        assert!(matches!(err, Err(Error::InvalidData(_))));
    }
}
