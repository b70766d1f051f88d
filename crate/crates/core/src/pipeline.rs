//! End-to-end stages shared by the command line and the tests. Each stage
//! reads and writes fixed file names inside one output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, truth_matrix, EvalReport};
use crate::ged::{all_pairs, build_ground_truth, LabelSet};
use crate::graph::{generate_synthetic_corpus, split_corpus, Corpus, SplitAssignment};
use crate::head::DistanceMatrix;
use crate::model::GraphDistanceModel;
use crate::nearness::{fix_distance_matrix, triangle_violations};
use crate::train::{pretrain, save_log, train_unconstrained, EpochRecord, TrainOutcome};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const PRETRAINED_FILE: &str = "pretrained.gdck";
pub const MODEL_FILE: &str = "model.gdck";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PREDICTED_FILE: &str = "dhat.csv";
pub const FIXED_FILE: &str = "fixed.csv";
pub const FIX_REPORT_FILE: &str = "fix_report.json";
pub const REPORT_FILE: &str = "report.json";
pub const FIXED_REPORT_FILE: &str = "report_fixed.json";

/// The configured corpus file, or a synthetic corpus.
pub fn load_or_generate_corpus(config: &RunConfig) -> Result<Corpus> {
    match &config.corpus.path {
        Some(path) => Corpus::load(path),
        None => generate_synthetic_corpus(&config.corpus.synth_params()),
    }
}

pub fn make_splits(config: &RunConfig, corpus: &Corpus) -> Result<SplitAssignment> {
    split_corpus(corpus, config.corpus.split, config.corpus.seed)
}

/// External labels when configured, otherwise normalized exact GED for
/// every pair of the corpus.
pub fn compute_labels(config: &RunConfig, corpus: &Corpus) -> Result<LabelSet> {
    match &config.ged.labels_path {
        Some(path) => LabelSet::load(path),
        None => build_ground_truth(corpus, &all_pairs(corpus.len()), &config.ged.costs, config.ged.size_cap),
    }
}

/// Fresh model pre-trained on every graph of the corpus.
pub fn pretrain_model(config: &RunConfig, corpus: &Corpus) -> Result<(GraphDistanceModel, Vec<EpochRecord>)> {
    let mut model = GraphDistanceModel::for_corpus(config.model(), corpus, config.train.seed)?;
    let features = model.features(corpus)?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let log = pretrain(&mut model, corpus, &features, &all, &config.train)?;
    Ok((model, log))
}

/// Supervised training from `init`, or from a fresh model after the
/// configured number of pre-training epochs.
pub fn train_model(
    config: &RunConfig,
    corpus: &Corpus,
    splits: &SplitAssignment,
    labels: &LabelSet,
    init: Option<GraphDistanceModel>,
) -> Result<(GraphDistanceModel, Vec<EpochRecord>, TrainOutcome)> {
    let (mut model, pre_log) = match init {
        Some(m) => (m, Vec::new()),
        None => pretrain_model(config, corpus)?,
    };
    let features = model.features(corpus)?;
    let indices = splits.indices(corpus)?;
    let outcome = train_unconstrained(&mut model, corpus, &features, &indices, labels, &config.train)?;
    Ok((model, pre_log, outcome))
}

pub fn predict(
    model: &GraphDistanceModel,
    corpus: &Corpus,
    splits: &SplitAssignment,
    labels: &LabelSet,
) -> Result<DistanceMatrix> {
    let features = model.features(corpus)?;
    let indices = splits.indices(corpus)?;
    crate::train::predict_distance_matrix(model, corpus, &features, labels, &indices.train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixSummary {
    pub epsilon: f64,
    pub violations_before: usize,
    pub violations_after: usize,
    pub sweeps: usize,
    pub final_delta: f64,
}

/// Triangle fixing plus a violation count before and after at `10 * epsilon`.
pub fn fix(config: &RunConfig, d_hat: &DistanceMatrix) -> Result<(DistanceMatrix, FixSummary)> {
    let tol = 10.0 * config.fix.epsilon;
    let before = triangle_violations(d_hat.values(), tol)?.len();
    let (fixed, outcome) = fix_distance_matrix(d_hat, &config.fix)?;
    let after = triangle_violations(fixed.values(), tol)?.len();
    Ok((
        fixed,
        FixSummary {
            epsilon: config.fix.epsilon,
            violations_before: before,
            violations_after: after,
            sweeps: outcome.sweeps,
            final_delta: outcome.delta,
        },
    ))
}

pub fn evaluate_matrix(
    config: &RunConfig,
    d: &DistanceMatrix,
    corpus: &Corpus,
    splits: &SplitAssignment,
    labels: &LabelSet,
) -> Result<EvalReport> {
    let truth = truth_matrix(&corpus.ids(), labels)?;
    evaluate(d, &truth, &splits.test_ids, config.eval.k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub report: EvalReport,
    pub fixed_report: EvalReport,
    pub fix: FixSummary,
    pub outcome: TrainOutcome,
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Every stage in order, all artifacts written to `out`.
pub fn run_pipeline(config: &RunConfig, out: &Path) -> Result<PipelineSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let corpus = load_or_generate_corpus(config)?;
    corpus.save(out.join(CORPUS_FILE))?;
    let splits = make_splits(config, &corpus)?;
    splits.save(out.join(SPLITS_FILE))?;
    let labels = compute_labels(config, &corpus)?;
    labels.save(out.join(LABELS_FILE))?;

    let (pretrained, pre_log) = pretrain_model(config, &corpus)?;
    pretrained.save(out.join(PRETRAINED_FILE))?;
    save_log(&pre_log, out.join(PRETRAIN_LOG_FILE))?;
    let (model, _, outcome) = train_model(config, &corpus, &splits, &labels, Some(pretrained))?;
    model.save(out.join(MODEL_FILE))?;
    save_log(&outcome.log, out.join(TRAIN_LOG_FILE))?;

    let d_hat = predict(&model, &corpus, &splits, &labels)?;
    d_hat.save(out.join(PREDICTED_FILE))?;
    let (fixed, fix_summary) = fix(config, &d_hat)?;
    fixed.save(out.join(FIXED_FILE))?;
    write_json(&fix_summary, out.join(FIX_REPORT_FILE))?;

    let report = evaluate_matrix(config, &d_hat, &corpus, &splits, &labels)?;
    report.save(out.join(REPORT_FILE))?;
    let fixed_report = evaluate_matrix(config, &fixed, &corpus, &splits, &labels)?;
    fixed_report.save(out.join(FIXED_REPORT_FILE))?;
    Ok(PipelineSummary {
        report,
        fixed_report,
        fix: fix_summary,
        outcome,
    })
}
