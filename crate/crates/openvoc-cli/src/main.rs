//! Command-line front end.
//!
//! Five subcommands: `train` fits an embedding and class weights, `eval`
//! scores a trained model per recognition setting, `predict` dumps ranked
//! candidates, `gen-synth` writes a synthetic benchmark directory, and
//! `fit-evt` fits the distance-tail model to raw samples (a diagnostic).
//!
//! Every option can also come from a `key = value` file via `--config`;
//! explicit flags win. Exit codes: 2 for usage and configuration problems,
//! 3 for data errors (unreadable, malformed, or mismatched inputs), 4 for
//! numerical failures.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use openvoc::embedding::{LabeledFeatures, SemanticVocabulary};
use openvoc::evaluation::{evaluate, EvalSet, GammaPolicy};
use openvoc::evt::{coverage_radius, fit_weibull_min, margin_radius, DEFAULT_SIGNIFICANCE};
use openvoc::io::{
    load_model, read_features, read_labels, read_vectors, save_model, train_class_indices,
    vocab_row_indices, write_features_binary, write_labels, write_vectors, TrainedModel,
    VectorFormat,
};
use openvoc::loss::LossConfig;
use openvoc::recognition::{batch_classify, CandidateSet, Setting};
use openvoc::solver::{train, Method, SolverConfig};
use openvoc::synth::{generate_benchmark, SynthSpec};
use openvoc::{Error, Result};

use config::ConfigFile;

#[derive(Parser)]
#[command(
    name = "openvoc",
    version,
    about = "Vocabulary-scale embedding training, recognition, and evaluation"
)]
struct Cli {
    /// Configuration file with `key = value` defaults for this command.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Random seed (training shuffles, synthetic generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (0 or absent = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output path; a directory for gen-synth, a file elsewhere.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the embedding and class weights on labeled features
    Train(TrainArgs),
    /// Score a trained model on a labeled test set
    Eval(EvalArgs),
    /// Rank candidate labels for each feature row
    Predict(PredictArgs),
    /// Generate a synthetic benchmark directory
    GenSynth(GenSynthArgs),
    /// Fit the distance-tail model to raw samples
    FitEvt(FitEvtArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Semantic vector file.
    #[arg(long, value_name = "FILE")]
    vectors: Option<PathBuf>,
    /// Vector file layout: text, text-noheader, or binary.
    #[arg(long, value_name = "FORMAT")]
    vector_format: Option<String>,
    /// Training feature matrix (binary container or CSV).
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    /// Training labels, one token per line, aligned with the features.
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
    /// Source-class tokens, one per line. Default: the distinct training
    /// labels, in vocabulary order.
    #[arg(long, value_name = "FILE")]
    source_labels: Option<PathBuf>,
    /// Target-class tokens, one per line. Default: none.
    #[arg(long, value_name = "FILE")]
    target_labels: Option<PathBuf>,
    /// Scale semantic vectors to unit length (default true).
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
    /// Data-term weight in [0, 1]; the margin terms get the complement.
    #[arg(long)]
    alpha: Option<f64>,
    /// Ridge penalty on the embedding.
    #[arg(long)]
    lambda: Option<f64>,
    /// Base width of the residual tolerance tube.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Margin offset in the ranking terms.
    #[arg(long)]
    margin_c: Option<f64>,
    /// Open-vocabulary neighbors per class in the margin terms.
    #[arg(long)]
    open_neighbors: Option<usize>,
    /// Source-class neighbors per class in the margin terms.
    #[arg(long)]
    source_neighbors: Option<usize>,
    /// Average margin terms over the neighbor pool instead of summing.
    #[arg(long, value_name = "BOOL")]
    average_triplets: Option<bool>,
    /// Optimizer: lbfgs, sgd, or hybrid.
    #[arg(long)]
    method: Option<String>,
    /// Iteration (epoch) budget per weight round.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Gradient-norm stop, relative to the starting gradient.
    #[arg(long)]
    grad_tol: Option<f64>,
    /// History pairs kept by the quasi-Newton solver.
    #[arg(long)]
    lbfgs_memory: Option<usize>,
    /// Initial stochastic learning rate.
    #[arg(long)]
    sgd_lr: Option<f64>,
    /// Epochs between learning-rate halvings.
    #[arg(long)]
    sgd_halve_every: Option<usize>,
    /// Starting mini-batch size (doubles each epoch).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction of the budget the hybrid method spends in its stochastic
    /// phase.
    #[arg(long)]
    hybrid_frac: Option<f64>,
    /// Alternations between optimizing and refreshing class weights.
    #[arg(long)]
    weight_rounds: Option<usize>,
    /// Tail significance used for the class radii.
    #[arg(long)]
    significance: Option<f64>,
    /// Write the optimization log here.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    vectors: Option<PathBuf>,
    #[arg(long, value_name = "FORMAT")]
    vector_format: Option<String>,
    /// Test feature matrix.
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    /// Test labels, one token per line.
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
    /// Source-class tokens (must match training for the model to load).
    #[arg(long, value_name = "FILE")]
    source_labels: Option<PathBuf>,
    /// Target-class tokens for the zero-shot settings.
    #[arg(long, value_name = "FILE")]
    target_labels: Option<PathBuf>,
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Comma-separated settings: supervised, zsl, gzsl, openset.
    #[arg(long)]
    settings: Option<String>,
    /// Comma-separated accuracy depths, e.g. 1,5.
    #[arg(long)]
    topk: Option<String>,
    /// Trace the seen-unseen curve on this many grid points instead of
    /// exactly.
    #[arg(long)]
    gamma_grid: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    vectors: Option<PathBuf>,
    #[arg(long, value_name = "FORMAT")]
    vector_format: Option<String>,
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    source_labels: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    target_labels: Option<PathBuf>,
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Candidate pool: supervised, zsl, gzsl, or openset (default).
    #[arg(long)]
    setting: Option<String>,
    /// Candidates listed per instance.
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    n_distractor: Option<usize>,
    /// Semantic dimensionality.
    #[arg(long)]
    dim_semantic: Option<usize>,
    /// Visual dimensionality.
    #[arg(long)]
    dim_visual: Option<usize>,
    #[arg(long)]
    instances_per_class: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Condition number of the semantic-to-visual map.
    #[arg(long)]
    map_condition: Option<f64>,
}

#[derive(Args)]
struct FitEvtArgs {
    /// Distance samples, one positive number per line.
    #[arg(long, value_name = "FILE")]
    samples: Option<PathBuf>,
    /// Tail significance for the reported radii.
    #[arg(long)]
    significance: Option<f64>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Config(_) => 2,
            Error::Numerical(_) | Error::DegenerateSamples(_) => 4,
            _ => 3,
        });
    }
}

struct Globals {
    seed: u64,
    threads: usize,
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    let mut conf = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::empty(),
    };
    let mut seed = cli.seed;
    let mut threads = cli.threads;
    let mut out = cli.out;
    conf.merge(&mut seed, "seed")?;
    conf.merge(&mut threads, "threads")?;
    conf.merge(&mut out, "out")?;
    let g = Globals {
        seed: seed.unwrap_or(0),
        threads: threads.unwrap_or(0),
        out,
    };
    if g.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(g.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::Train(a) => run_train(&g, a, conf),
        Cmd::Eval(a) => run_eval(&g, a, conf),
        Cmd::Predict(a) => run_predict(&g, a, conf),
        Cmd::GenSynth(a) => run_gen_synth(&g, a, conf),
        Cmd::FitEvt(a) => run_fit_evt(&g, a, conf),
    }
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing --{key} (set it on the command line or in the config file)"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads vectors and builds the vocabulary with its roles. Shared by the
/// commands that consume a model or train one.
#[allow(clippy::too_many_arguments)]
fn load_vocab(
    vectors: &Path,
    format: Option<&str>,
    normalize: bool,
    source_labels: Option<&Path>,
    target_labels: Option<&Path>,
    inferred_sources: Option<&[String]>,
) -> Result<SemanticVocabulary> {
    let format = match format {
        Some(s) => VectorFormat::parse(s)?,
        None => VectorFormat::Text,
    };
    let vf = read_vectors(vectors, format)?;
    if vf.duplicates > 0 {
        eprintln!(
            "warning: {} duplicate token(s) in {}; kept the last vector of each",
            vf.duplicates,
            vectors.display()
        );
    }
    let mut vocab = SemanticVocabulary::new(vf.labels, vf.vectors, normalize)?;
    let sources = match (source_labels, inferred_sources) {
        (Some(p), _) => read_labels(p)?,
        (None, Some(inferred)) => inferred.to_vec(),
        (None, None) => return Err(missing("source-labels")),
    };
    let targets = match target_labels {
        Some(p) => read_labels(p)?,
        None => Vec::new(),
    };
    vocab.assign_roles(&sources, &targets)?;
    Ok(vocab)
}

/// The distinct training tokens, ordered by vocabulary row.
fn infer_source_labels(tokens: &[String], vectors: &Path, format: Option<&str>) -> Result<Vec<String>> {
    // A throwaway read keeps this simple: training is file-bound anyway.
    let format = match format {
        Some(s) => VectorFormat::parse(s)?,
        None => VectorFormat::Text,
    };
    let vf = read_vectors(vectors, format)?;
    let index: std::collections::HashMap<&str, usize> = vf
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut rows = BTreeSet::new();
    for t in tokens {
        let &row = index.get(t.as_str()).ok_or_else(|| Error::UnknownLabel {
            label: t.clone(),
            where_: "vocabulary",
        })?;
        rows.insert(row);
    }
    Ok(rows.into_iter().map(|r| vf.labels[r].clone()).collect())
}

fn run_train(g: &Globals, mut a: TrainArgs, mut conf: ConfigFile) -> Result<()> {
    conf.merge(&mut a.vectors, "vectors")?;
    conf.merge(&mut a.vector_format, "vector-format")?;
    conf.merge(&mut a.features, "features")?;
    conf.merge(&mut a.labels, "labels")?;
    conf.merge(&mut a.source_labels, "source-labels")?;
    conf.merge(&mut a.target_labels, "target-labels")?;
    conf.merge(&mut a.normalize, "normalize")?;
    conf.merge(&mut a.alpha, "alpha")?;
    conf.merge(&mut a.lambda, "lambda")?;
    conf.merge(&mut a.epsilon, "epsilon")?;
    conf.merge(&mut a.margin_c, "margin-c")?;
    conf.merge(&mut a.open_neighbors, "open-neighbors")?;
    conf.merge(&mut a.source_neighbors, "source-neighbors")?;
    conf.merge(&mut a.average_triplets, "average-triplets")?;
    conf.merge(&mut a.method, "method")?;
    conf.merge(&mut a.max_iters, "max-iters")?;
    conf.merge(&mut a.grad_tol, "grad-tol")?;
    conf.merge(&mut a.lbfgs_memory, "lbfgs-memory")?;
    conf.merge(&mut a.sgd_lr, "sgd-lr")?;
    conf.merge(&mut a.sgd_halve_every, "sgd-halve-every")?;
    conf.merge(&mut a.batch_size, "batch-size")?;
    conf.merge(&mut a.hybrid_frac, "hybrid-frac")?;
    conf.merge(&mut a.weight_rounds, "weight-rounds")?;
    conf.merge(&mut a.significance, "significance")?;
    conf.merge(&mut a.trace, "trace")?;
    conf.finish()?;

    let vectors = a.vectors.ok_or_else(|| missing("vectors"))?;
    let features_path = a.features.ok_or_else(|| missing("features"))?;
    let labels_path = a.labels.ok_or_else(|| missing("labels"))?;
    let out = g.out.clone().ok_or_else(|| missing("out"))?;
    let normalize = a.normalize.unwrap_or(true);

    let train_tokens = read_labels(&labels_path)?;
    let inferred;
    let inferred_ref = if a.source_labels.is_none() {
        inferred = infer_source_labels(&train_tokens, &vectors, a.vector_format.as_deref())?;
        Some(inferred.as_slice())
    } else {
        None
    };
    let vocab = load_vocab(
        &vectors,
        a.vector_format.as_deref(),
        normalize,
        a.source_labels.as_deref(),
        a.target_labels.as_deref(),
        inferred_ref,
    )?;

    let features = read_features(&features_path)?;
    let class_idx = train_class_indices(&train_tokens, &vocab)?;
    let data = LabeledFeatures::new(features, class_idx, vocab.source_ids().len())?;

    let mut loss = LossConfig::default();
    if let Some(v) = a.alpha {
        loss.alpha = v;
    }
    if let Some(v) = a.lambda {
        loss.lambda_reg = v;
    }
    if let Some(v) = a.epsilon {
        loss.epsilon = v;
    }
    if let Some(v) = a.margin_c {
        loss.margin_c = v;
    }
    if let Some(v) = a.open_neighbors {
        loss.open_neighbors = v;
    }
    if let Some(v) = a.source_neighbors {
        loss.source_neighbors = v;
    }
    if let Some(v) = a.average_triplets {
        loss.average_triplets = v;
    }

    let mut sol = SolverConfig::default();
    sol.seed = g.seed;
    if let Some(m) = &a.method {
        sol.method = Method::parse(m)?;
    }
    if let Some(v) = a.max_iters {
        sol.max_iters = v;
    }
    if let Some(v) = a.grad_tol {
        sol.grad_tol = v;
    }
    if let Some(v) = a.lbfgs_memory {
        sol.lbfgs_memory = v;
    }
    if let Some(v) = a.sgd_lr {
        sol.sgd_lr = v;
    }
    if let Some(v) = a.sgd_halve_every {
        sol.sgd_lr_halve_every = v;
    }
    if let Some(v) = a.batch_size {
        sol.batch_size = v;
    }
    if let Some(v) = a.hybrid_frac {
        sol.hybrid_switch_frac = v;
    }
    if let Some(v) = a.weight_rounds {
        sol.weight_rounds = v;
    }
    if let Some(v) = a.significance {
        sol.significance = v;
    }

    let (w, weights, trace) = train(&data, &vocab, &loss, &sol)?;
    save_model(&out, &TrainedModel { w, weights, loss: loss.clone() }, &vocab)?;
    if let Some(trace_path) = &a.trace {
        write_text(trace_path, &trace.render_log())?;
    }
    for warning in &trace.warnings {
        eprintln!("warning: {warning}");
    }

    let last = trace.records.last();
    let mut text = String::new();
    text.push_str("[config]\n");
    text.push_str(&format!("method = {}\n", sol.method.name()));
    text.push_str(&format!("alpha = {}\n", loss.alpha));
    text.push_str(&format!("lambda = {}\n", loss.lambda_reg));
    text.push_str(&format!("epsilon = {}\n", loss.epsilon));
    text.push_str(&format!("margin_c = {}\n", loss.margin_c));
    text.push_str(&format!("open_neighbors = {}\n", loss.open_neighbors));
    text.push_str(&format!("source_neighbors = {}\n", loss.source_neighbors));
    text.push_str(&format!("average_triplets = {}\n", loss.average_triplets));
    text.push_str(&format!("max_iters = {}\n", sol.max_iters));
    text.push_str(&format!("grad_tol = {}\n", sol.grad_tol));
    text.push_str(&format!("weight_rounds = {}\n", sol.weight_rounds));
    text.push_str(&format!("significance = {}\n", sol.significance));
    text.push_str(&format!("seed = {}\n", sol.seed));
    text.push_str(&format!("normalize = {normalize}\n"));
    text.push('\n');
    text.push_str("[train]\n");
    text.push_str(&format!("instances = {}\n", data.len()));
    text.push_str(&format!("source_classes = {}\n", vocab.source_ids().len()));
    text.push_str(&format!("vocabulary = {}\n", vocab.len()));
    text.push_str(&format!(
        "iterations = {}\n",
        last.map(|r| r.iter).unwrap_or(0)
    ));
    if let Some(r) = last {
        text.push_str(&format!("objective = {:.12e}\n", r.objective));
    }
    text.push_str(&format!("warnings = {}\n", trace.warnings.len()));
    text.push_str(&format!("model = {}\n", out.display()));
    print!("{text}");
    Ok(())
}

fn parse_settings(raw: &str) -> Result<Vec<Setting>> {
    let settings: Vec<Setting> = raw
        .split(',')
        .map(|s| Setting::parse(s.trim()))
        .collect::<Result<_>>()?;
    if settings.is_empty() {
        return Err(Error::Config("empty settings list".into()));
    }
    Ok(settings)
}

fn parse_topk(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad top-k value {:?}", s.trim())))
        })
        .collect()
}

fn run_eval(g: &Globals, mut a: EvalArgs, mut conf: ConfigFile) -> Result<()> {
    conf.merge(&mut a.vectors, "vectors")?;
    conf.merge(&mut a.vector_format, "vector-format")?;
    conf.merge(&mut a.features, "features")?;
    conf.merge(&mut a.labels, "labels")?;
    conf.merge(&mut a.source_labels, "source-labels")?;
    conf.merge(&mut a.target_labels, "target-labels")?;
    conf.merge(&mut a.normalize, "normalize")?;
    conf.merge(&mut a.model, "model")?;
    conf.merge(&mut a.settings, "settings")?;
    conf.merge(&mut a.topk, "topk")?;
    conf.merge(&mut a.gamma_grid, "gamma-grid")?;
    conf.finish()?;

    let vectors = a.vectors.ok_or_else(|| missing("vectors"))?;
    let features_path = a.features.ok_or_else(|| missing("features"))?;
    let labels_path = a.labels.ok_or_else(|| missing("labels"))?;
    let model_path = a.model.ok_or_else(|| missing("model"))?;
    if a.source_labels.is_none() {
        return Err(missing("source-labels"));
    }
    let normalize = a.normalize.unwrap_or(true);

    let vocab = load_vocab(
        &vectors,
        a.vector_format.as_deref(),
        normalize,
        a.source_labels.as_deref(),
        a.target_labels.as_deref(),
        None,
    )?;
    let model = load_model(&model_path, &vocab)?;

    let features = read_features(&features_path)?;
    let tokens = read_labels(&labels_path)?;
    let rows = vocab_row_indices(&tokens, &vocab)?;
    let test = EvalSet::new(features, rows)?;

    let settings = parse_settings(a.settings.as_deref().unwrap_or("supervised"))?;
    let ks = parse_topk(a.topk.as_deref().unwrap_or("1"))?;
    let gamma = match a.gamma_grid {
        Some(n) => GammaPolicy::FixedGrid(n),
        None => GammaPolicy::ExactCritical,
    };

    let report = evaluate(&model.w, &test, &vocab, &settings, &ks, gamma)?;

    let mut text = String::new();
    text.push_str("[config]\n");
    text.push_str(&format!("model = {}\n", model_path.display()));
    text.push_str(&format!("vectors = {}\n", vectors.display()));
    text.push_str(&format!("features = {}\n", features_path.display()));
    text.push_str(&format!("normalize = {normalize}\n"));
    text.push_str(&format!(
        "settings = {}\n",
        settings.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
    ));
    text.push_str(&format!(
        "topk = {}\n",
        ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    ));
    match gamma {
        GammaPolicy::ExactCritical => text.push_str("gamma = exact\n"),
        GammaPolicy::FixedGrid(n) => text.push_str(&format!("gamma = grid:{n}\n")),
    }
    text.push('\n');
    text.push_str(&report.render());

    print!("{text}");
    if let Some(out) = &g.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn run_predict(g: &Globals, mut a: PredictArgs, mut conf: ConfigFile) -> Result<()> {
    conf.merge(&mut a.vectors, "vectors")?;
    conf.merge(&mut a.vector_format, "vector-format")?;
    conf.merge(&mut a.features, "features")?;
    conf.merge(&mut a.source_labels, "source-labels")?;
    conf.merge(&mut a.target_labels, "target-labels")?;
    conf.merge(&mut a.normalize, "normalize")?;
    conf.merge(&mut a.model, "model")?;
    conf.merge(&mut a.setting, "setting")?;
    conf.merge(&mut a.topk, "topk")?;
    conf.finish()?;

    let vectors = a.vectors.ok_or_else(|| missing("vectors"))?;
    let features_path = a.features.ok_or_else(|| missing("features"))?;
    let model_path = a.model.ok_or_else(|| missing("model"))?;
    if a.source_labels.is_none() {
        return Err(missing("source-labels"));
    }
    let normalize = a.normalize.unwrap_or(true);
    let setting = Setting::parse(a.setting.as_deref().unwrap_or("openset"))?;
    let k = a.topk.unwrap_or(5);

    let vocab = load_vocab(
        &vectors,
        a.vector_format.as_deref(),
        normalize,
        a.source_labels.as_deref(),
        a.target_labels.as_deref(),
        None,
    )?;
    let model = load_model(&model_path, &vocab)?;
    let features = read_features(&features_path)?;
    let candidates = CandidateSet::for_setting(setting, &vocab)?;
    let predictions = batch_classify(&model.w, &features, &vocab, &candidates, k)?;

    let mut text = String::new();
    for (i, pred) in predictions.iter().enumerate() {
        text.push_str(&format!("{i}"));
        for &(id, dist) in &pred.ranked {
            text.push_str(&format!("\t{}:{dist:.6}", vocab.label(id)));
        }
        text.push('\n');
    }
    match &g.out {
        Some(out) => write_text(out, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_gen_synth(g: &Globals, mut a: GenSynthArgs, mut conf: ConfigFile) -> Result<()> {
    conf.merge(&mut a.n_source, "n-source")?;
    conf.merge(&mut a.n_target, "n-target")?;
    conf.merge(&mut a.n_distractor, "n-distractor")?;
    conf.merge(&mut a.dim_semantic, "dim-semantic")?;
    conf.merge(&mut a.dim_visual, "dim-visual")?;
    conf.merge(&mut a.instances_per_class, "instances-per-class")?;
    conf.merge(&mut a.noise_sigma, "noise-sigma")?;
    conf.merge(&mut a.map_condition, "map-condition")?;
    conf.finish()?;

    let out = g.out.clone().ok_or_else(|| missing("out"))?;
    let base = SynthSpec::default();
    let spec = SynthSpec {
        seed: g.seed,
        n_source: a.n_source.unwrap_or(base.n_source),
        n_target: a.n_target.unwrap_or(base.n_target),
        n_distractor: a.n_distractor.unwrap_or(base.n_distractor),
        d: a.dim_semantic.unwrap_or(base.d),
        p: a.dim_visual.unwrap_or(base.p),
        instances_per_class: a.instances_per_class.unwrap_or(base.instances_per_class),
        noise_sigma: a.noise_sigma.unwrap_or(base.noise_sigma),
        map_condition: a.map_condition.unwrap_or(base.map_condition),
    };
    let b = generate_benchmark(&spec)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    write_vectors(
        &out.join("vectors.txt"),
        b.vocab.labels(),
        b.vocab.vectors(),
        VectorFormat::Text,
    )?;
    write_features_binary(&out.join("train.feat"), b.train.features())?;
    let train_tokens: Vec<String> = b
        .train
        .labels()
        .iter()
        .map(|&c| b.vocab.label(b.vocab.source_row(c)).to_string())
        .collect();
    write_labels(&out.join("train_labels.txt"), &train_tokens)?;
    write_features_binary(&out.join("test.feat"), b.test.features())?;
    let test_tokens: Vec<String> = b
        .test
        .class_ids()
        .iter()
        .map(|&row| b.vocab.label(row).to_string())
        .collect();
    write_labels(&out.join("test_labels.txt"), &test_tokens)?;
    let source_tokens: Vec<String> = b
        .vocab
        .source_ids()
        .iter()
        .map(|&r| b.vocab.label(r).to_string())
        .collect();
    write_labels(&out.join("source_labels.txt"), &source_tokens)?;
    let target_tokens: Vec<String> = b
        .vocab
        .target_ids()
        .iter()
        .map(|&r| b.vocab.label(r).to_string())
        .collect();
    write_labels(&out.join("target_labels.txt"), &target_tokens)?;

    println!("benchmark written to {}", out.display());
    println!(
        "classes: {} source, {} target, {} distractor; dims: {} visual -> {} semantic",
        spec.n_source, spec.n_target, spec.n_distractor, spec.p, spec.d
    );
    println!("train: {} instances; test: {} instances", b.train.len(), b.test.len());
    Ok(())
}

fn run_fit_evt(g: &Globals, mut a: FitEvtArgs, mut conf: ConfigFile) -> Result<()> {
    conf.merge(&mut a.samples, "samples")?;
    conf.merge(&mut a.significance, "significance")?;
    conf.finish()?;

    let samples_path = a.samples.ok_or_else(|| missing("samples"))?;
    let significance = a.significance.unwrap_or(DEFAULT_SIGNIFICANCE);

    let display = samples_path.display().to_string();
    let raw = std::fs::read_to_string(&samples_path).map_err(|e| Error::Io {
        path: display.clone(),
        source: e,
    })?;
    let mut samples = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: lineno + 1,
            msg: format!("bad number {line:?}"),
        })?;
        samples.push(v);
    }

    let fit = fit_weibull_min(&samples)?;
    let text = format!(
        "samples = {}\nshape = {}\nscale = {}\nmargin_radius = {}\ncoverage_radius = {}\n",
        samples.len(),
        fit.shape,
        fit.scale,
        margin_radius(&fit, significance)?,
        coverage_radius(&fit, significance)?,
    );
    print!("{text}");
    if let Some(out) = &g.out {
        write_text(out, &text)?;
    }
    Ok(())
}
