use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graphdist_core::config::RunConfig;
use graphdist_core::eval::nearest;
use graphdist_core::ged::LabelSet;
use graphdist_core::graph::{generate_synthetic_corpus, Corpus, SplitAssignment};
use graphdist_core::head::DistanceMatrix;
use graphdist_core::model::GraphDistanceModel;
use graphdist_core::nearness::FixingRule;
use graphdist_core::pipeline::{self, *};
use graphdist_core::train::save_log;
use graphdist_core::{Error, Result};

/// Learned graph distances: corpus generation, exact GED labels, training,
/// prediction, triangle fixing and rank evaluation.
#[derive(Debug, Parser)]
#[command(name = "graphdist", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the corpus and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory holding every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its train/validation/test split.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        min: Option<usize>,
        #[arg(long)]
        max: Option<usize>,
        #[arg(long)]
        edge_prob: Option<f64>,
        /// Node label alphabet size (0 for unlabelled graphs).
        #[arg(long)]
        labels: Option<usize>,
    },
    /// Label every corpus pair with normalized exact graph edit distance.
    Ged,
    /// Unsupervised pre-training of the encoder.
    Pretrain,
    /// Supervised training; starts from the pre-trained checkpoint if present.
    Train {
        /// Checkpoint to start from instead of the output directory's.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write the predicted distance matrix.
    Predict,
    /// Repair triangle-inequality violations in a distance matrix.
    Fix {
        /// Matrix to repair (default: the predicted matrix in --out).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Stop once a sweep's total correction falls below this.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Use the literal published update rule instead of the projection.
        #[arg(long)]
        verbatim: bool,
    },
    /// Rank-metric report for the test queries.
    Eval {
        /// Matrix to score (default: predicted and fixed matrices in --out).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Cutoff for precision@k.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Nearest graphs to one query by learned distance.
    Query {
        id: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Distance matrix to search (default: the predicted one).
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Every stage in order.
    Run,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;

    match cli.command {
        Command::Synth {
            count,
            min,
            max,
            edge_prob,
            labels,
        } => {
            let c = &mut config.corpus;
            c.count = count.unwrap_or(c.count);
            c.size_min = min.unwrap_or(c.size_min);
            c.size_max = max.unwrap_or(c.size_max);
            c.edge_prob = edge_prob.unwrap_or(c.edge_prob);
            c.labels = labels.unwrap_or(c.labels);
            let corpus = generate_synthetic_corpus(&config.corpus.synth_params())?;
            corpus.save(out.join(CORPUS_FILE))?;
            let splits = make_splits(&config, &corpus)?;
            splits.save(out.join(SPLITS_FILE))?;
            println!(
                "wrote {} graphs ({} train, {} validation, {} test) to {}",
                corpus.len(),
                splits.train_ids.len(),
                splits.validation_ids.len(),
                splits.test_ids.len(),
                out.join(CORPUS_FILE).display()
            );
        }
        Command::Ged => {
            let corpus = corpus(&config, out)?;
            let labels = compute_labels(&config, &corpus)?;
            labels.save(out.join(LABELS_FILE))?;
            println!("wrote {} labelled pairs to {}", labels.len(), out.join(LABELS_FILE).display());
        }
        Command::Pretrain => {
            let corpus = corpus(&config, out)?;
            let (model, log) = pretrain_model(&config, &corpus)?;
            model.save(out.join(PRETRAINED_FILE))?;
            save_log(&log, out.join(PRETRAIN_LOG_FILE))?;
            match log.last() {
                Some(r) => println!("pre-trained {} epochs, final loss {:.6}", log.len(), r.loss),
                None => println!("pre-training disabled (train.pretrain_epochs = 0); wrote initial weights"),
            }
        }
        Command::Train { init } => {
            let corpus = corpus(&config, out)?;
            let splits = splits(&config, &corpus, out)?;
            let labels = LabelSet::load(out.join(LABELS_FILE))?;
            let init = init.or_else(|| Some(out.join(PRETRAINED_FILE)).filter(|p| p.exists()));
            let init = init.map(GraphDistanceModel::load).transpose()?;
            let (model, pre_log, outcome) = train_model(&config, &corpus, &splits, &labels, init)?;
            if !pre_log.is_empty() {
                save_log(&pre_log, out.join(PRETRAIN_LOG_FILE))?;
            }
            model.save(out.join(MODEL_FILE))?;
            save_log(&outcome.log, out.join(TRAIN_LOG_FILE))?;
            println!(
                "trained {} epochs; kept epoch {} (validation rho {})",
                outcome.log.len(),
                outcome.best_epoch,
                outcome
                    .best_validation_rho
                    .map_or("n/a".to_string(), |r| format!("{r:.4}"))
            );
        }
        Command::Predict => {
            let corpus = corpus(&config, out)?;
            let splits = splits(&config, &corpus, out)?;
            let labels = LabelSet::load(out.join(LABELS_FILE))?;
            let model = GraphDistanceModel::load(out.join(MODEL_FILE))?;
            let d = predict(&model, &corpus, &splits, &labels)?;
            d.save(out.join(PREDICTED_FILE))?;
            println!("wrote {0}x{0} matrix to {1}", d.len(), out.join(PREDICTED_FILE).display());
        }
        Command::Fix {
            input,
            epsilon,
            verbatim,
        } => {
            if let Some(eps) = epsilon {
                config.fix.epsilon = eps;
            }
            if verbatim {
                config.fix.rule = FixingRule::Verbatim;
            }
            let d = DistanceMatrix::load(input.unwrap_or_else(|| out.join(PREDICTED_FILE)))?;
            let (fixed, summary) = pipeline::fix(&config, &d)?;
            fixed.save(out.join(FIXED_FILE))?;
            write_json(&summary, out.join(FIX_REPORT_FILE))?;
            println!(
                "violations at tol {:e}: {} before, {} after; {} sweeps (last delta {:e})",
                10.0 * summary.epsilon,
                summary.violations_before,
                summary.violations_after,
                summary.sweeps,
                summary.final_delta
            );
        }
        Command::Eval { input, k } => {
            if let Some(k) = k {
                config.eval.k = k;
            }
            let corpus = corpus(&config, out)?;
            let splits = splits(&config, &corpus, out)?;
            let labels = LabelSet::load(out.join(LABELS_FILE))?;
            let targets = match input {
                Some(path) => vec![(path, out.join(REPORT_FILE))],
                None => [(PREDICTED_FILE, REPORT_FILE), (FIXED_FILE, FIXED_REPORT_FILE)]
                    .into_iter()
                    .map(|(m, r)| (out.join(m), out.join(r)))
                    .filter(|(m, _)| m.exists())
                    .collect(),
            };
            if targets.is_empty() {
                return Err(Error::InvalidData(format!(
                    "no distance matrix in {}; run predict first",
                    out.display()
                )));
            }
            for (matrix, report_path) in targets {
                let d = DistanceMatrix::load(&matrix)?.aligned_to(&corpus.ids())?;
                let report = evaluate_matrix(&config, &d, &corpus, &splits, &labels)?;
                report.save(&report_path)?;
                println!(
                    "{}: rho {:.4}  tau {:.4}  p@{} {:.4}  ({} queries)",
                    matrix.display(),
                    report.rho,
                    report.tau,
                    report.k,
                    report.precision_at_k,
                    report.queries.len()
                );
            }
        }
        Command::Query { id, top, input } => {
            let d = DistanceMatrix::load(input.unwrap_or_else(|| out.join(PREDICTED_FILE)))?;
            let labels = LabelSet::load(out.join(LABELS_FILE)).ok();
            let hits = nearest(&d, &id, top)?;
            println!("{:>4}  {:<16} {:>10} {:>10}", "rank", "graph", "learned", "true");
            for (rank, (other, dist)) in hits.iter().enumerate() {
                let truth = labels
                    .as_ref()
                    .and_then(|l| l.get(&id, other))
                    .map_or("-".to_string(), |t| format!("{t:.4}"));
                println!("{:>4}  {:<16} {:>10.4} {:>10}", rank + 1, other, dist, truth);
            }
        }
        Command::Run => {
            let summary = run_pipeline(&config, out)?;
            println!(
                "test rho {:.4} (fixed {:.4}), tau {:.4}, p@{} {:.4}; violations {} -> {}",
                summary.report.rho,
                summary.fixed_report.rho,
                summary.report.tau,
                summary.report.k,
                summary.report.precision_at_k,
                summary.fix.violations_before,
                summary.fix.violations_after
            );
        }
    }
    Ok(())
}

/// The output directory's corpus if one was written, else the configured one.
fn corpus(config: &RunConfig, out: &Path) -> Result<Corpus> {
    let path = out.join(CORPUS_FILE);
    if path.exists() {
        Corpus::load(path)
    } else {
        load_or_generate_corpus(config)
    }
}

fn splits(config: &RunConfig, corpus: &Corpus, out: &Path) -> Result<SplitAssignment> {
    let path = out.join(SPLITS_FILE);
    if path.exists() {
        SplitAssignment::load(path)
    } else {
        make_splits(config, corpus)
    }
}
