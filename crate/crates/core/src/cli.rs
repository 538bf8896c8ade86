//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 the run finished but too many examples failed
//! (or a computation failed), 2 bad arguments or unreadable inputs.

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    load_dataset, load_embeddings, load_pairs, sample_mixture, DatasetFormat, Example,
    GaussianMixtureSpec, Input, LabelMap,
};
use crate::error::{Error, Result};
use crate::fim::{score_dataset, ScoredRow};
use crate::models::{load_checkpoint, save_checkpoint, Classifier, EmbeddingTable, ModelSpec};
use crate::probe::stats::DEFAULT_BINS;
use crate::probe::{boundary_distance, histogram_csv, histogram_overlap, score_pairs, spearman};
use crate::train::{evaluate, train, Optimizer, TrainConfig};

/// Minimum fraction of examples that must score for `score`/`pairs` to exit 0.
pub const MIN_SUCCESS_RATE: f64 = 0.99;

/// Number of highest-scoring points whose eigenvectors `synthetic` exports.
pub const TOP_EIGVEC_POINTS: usize = 20;

#[derive(Debug, Parser)]
#[command(
    name = "fisher-probe",
    version,
    about = "Fisher-information difficulty scores for small classifiers",
    after_help = "Set FISHER_PROBE_THREADS to cap the number of worker threads."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a training report.
    Train(TrainArgs),
    /// Score every example of a dataset and write one JSON line per example.
    Score(ScoreArgs),
    /// Score original/perturbed pairs and summarise the eigenvalue deltas.
    Pairs(PairsArgs),
    /// Two-Gaussian toy experiment: eigenvalues against boundary distance.
    Synthetic(SyntheticArgs),
    /// Serve scores, attributions and substitutions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Labeled dataset (JSONL or TSV).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset format; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<DatasetFormat>,
    /// Whitespace-separated embedding file (`token v1 ... vd` per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Comma-separated label names in class-index order.
    #[arg(long, default_value = "neg,pos", value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Use the two-Gaussian mixture instead of a dataset file.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: bool,
    /// Points per mixture component with --synthetic.
    #[arg(long, default_value_t = 500)]
    pub n_per_class: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report output path (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scored JSONL output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the mixture sample with --synthetic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Order rows by lambda_max, largest first.
    #[arg(long)]
    pub sort: bool,
    /// Include the unit-norm top eigenvector in every row.
    #[arg(long)]
    pub top_eigvec: bool,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL with original_text, perturbed_text, original_label, perturbed_label.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "neg,pos", value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Output directory for pairs.jsonl, summary.json and the histograms
    /// (histogram.json/.csv compare original and perturbed lambda_max).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Delta threshold for the tail fractions.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Scored JSONL of a base set; writes overlap.json comparing its
    /// lambda_max values with those of the perturbed texts.
    #[arg(long)]
    pub overlap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub n_per_class: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }

    fn run(e: impl std::fmt::Display) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    crate::init_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Pairs(a) => cmd_pairs(&a),
        Command::Synthetic(a) => cmd_synthetic(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::input(Error::io(dir, e)))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::input(Error::io(path, e)))
}

fn json_pretty<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn load_labels(names: &[String]) -> std::result::Result<LabelMap, Failure> {
    LabelMap::new(names.iter().cloned()).map_err(Failure::input)
}

fn load_table(path: Option<&Path>) -> std::result::Result<Option<EmbeddingTable>, Failure> {
    path.map(load_embeddings).transpose().map_err(Failure::input)
}

/// The examples named by `--data` or `--synthetic`.
fn load_examples(args: &DataArgs, seed: u64) -> std::result::Result<Vec<Example>, Failure> {
    if args.synthetic {
        return sample_mixture(&GaussianMixtureSpec {
            n_per_class: args.n_per_class,
            seed,
            ..GaussianMixtureSpec::default()
        })
        .map_err(Failure::input);
    }
    let path = args
        .data
        .as_deref()
        .ok_or_else(|| Failure::input("either --data or --synthetic is required"))?;
    let format = match args.format {
        Some(f) => f,
        None => DatasetFormat::from_path(path).ok_or_else(|| {
            Failure::input(format!(
                "cannot tell the format of {}; pass --format",
                path.display()
            ))
        })?,
    };
    load_dataset(path, format, &load_labels(&args.labels)?).map_err(Failure::input)
}

fn load_classifier(
    checkpoint: &Path,
    embeddings: Option<&Path>,
) -> std::result::Result<Classifier, Failure> {
    let model = load_checkpoint(checkpoint).map_err(Failure::input)?;
    let table = if model.is_text() {
        let path = embeddings
            .ok_or_else(|| Failure::input("this checkpoint needs --embeddings"))?;
        load_table(Some(path))?
    } else {
        None
    };
    Classifier::new(model, table).map_err(Failure::input)
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let examples = load_examples(&args.data, args.seed)?;
    let (spec, mut cfg, table) = if args.data.synthetic {
        (ModelSpec::synthetic_mlp(), TrainConfig::synthetic_mlp(), None)
    } else {
        let path = args
            .data
            .embeddings
            .as_deref()
            .ok_or_else(|| Failure::input("text training needs --embeddings"))?;
        let table = load_table(Some(path))?.expect("path given");
        let classes = load_labels(&args.data.labels)?.len();
        (
            ModelSpec::text_cnn(table.dim(), classes),
            TrainConfig::text_cnn(),
            Some(table),
        )
    };
    cfg.seed = args.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        match &mut cfg.optimizer {
            Optimizer::Sgd { lr: l } | Optimizer::Adam { lr: l, .. } => *l = lr,
        }
    }
    let (clf, report) = train(&spec, &examples, &cfg, table).map_err(Failure::run)?;
    write(&args.out, crate::models::checkpoint_bytes(clf.model()).map_err(Failure::run)?)?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write(&report_path, json_pretty(&report).map_err(Failure::run)?)?;
    println!("valid accuracy: {}", report.best_valid_accuracy);
    Ok(())
}

/// `(min, median, max)`; the median of an even count averages the middle two.
fn summary(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Some((v[0], median, v[n - 1]))
}

fn success_ok(ok: usize, total: usize) -> bool {
    total > 0 && ok as f64 >= MIN_SUCCESS_RATE * total as f64
}

pub fn cmd_score(args: &ScoreArgs) -> CmdResult {
    let clf = load_classifier(&args.checkpoint, args.data.embeddings.as_deref())?;
    let examples = load_examples(&args.data, args.seed)?;
    let mut rows = Vec::with_capacity(examples.len());
    for (ex, result) in examples.iter().zip(score_dataset(&clf, &examples)) {
        match result {
            Ok(r) => rows.push(ScoredRow::new(&r, args.top_eigvec)),
            Err(e) => log::warn!("example {}: {e}", ex.id),
        }
    }
    if args.sort {
        rows.sort_by(|a, b| b.lambda_max.total_cmp(&a.lambda_max));
    }
    write(&args.out, jsonl(&rows).map_err(Failure::run)?)?;
    let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda_max).collect();
    match summary(&lambdas) {
        Some((lo, mid, hi)) => println!(
            "scored {}/{}: lambda_max min {lo} median {mid} max {hi}",
            rows.len(),
            examples.len()
        ),
        None => println!("scored 0/{}", examples.len()),
    }
    if success_ok(rows.len(), examples.len()) {
        Ok(())
    } else {
        Err(Failure::run(format!(
            "only {} of {} examples scored",
            rows.len(),
            examples.len()
        )))
    }
}

fn read_scored(path: &Path) -> std::result::Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(Error::io(path, e)))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<ScoredRow>(l)
                .map(|r| r.lambda_max)
                .map_err(|e| {
                    Failure::input(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
        })
        .collect()
}

pub fn cmd_pairs(args: &PairsArgs) -> CmdResult {
    let clf = load_classifier(&args.checkpoint, Some(&args.embeddings))?;
    let labels = load_labels(&args.labels)?;
    let pairs = load_pairs(&args.pairs, &labels).map_err(Failure::input)?;
    let base = args.overlap.as_deref().map(read_scored).transpose()?;
    let (results, stats) = score_pairs(&clf, &pairs, args.threshold).map_err(Failure::run)?;
    let mut records = Vec::new();
    for (pair, r) in pairs.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => log::warn!("pair {}: {e}", pair.id),
        }
    }
    let dir = &args.out_dir;
    write(&dir.join("pairs.jsonl"), jsonl(&records).map_err(Failure::run)?)?;
    write(&dir.join("summary.json"), json_pretty(&stats).map_err(Failure::run)?)?;
    let originals: Vec<f64> = records.iter().map(|r| r.lambda_original).collect();
    let perturbed: Vec<f64> = records.iter().map(|r| r.lambda_perturbed).collect();
    let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
    let hist = histogram_overlap(&originals, &perturbed, args.bins).map_err(Failure::run)?;
    write(&dir.join("histogram.csv"), hist.to_csv())?;
    write(&dir.join("histogram.json"), json_pretty(&hist).map_err(Failure::run)?)?;
    write(
        &dir.join("delta_histogram.csv"),
        histogram_csv(&deltas, args.bins).map_err(Failure::run)?,
    )?;
    if let Some(base) = base {
        let report = histogram_overlap(&base, &perturbed, args.bins).map_err(Failure::run)?;
        write(&dir.join("overlap.json"), json_pretty(&report).map_err(Failure::run)?)?;
        println!("overlap with base set: {}%", report.overlap_percent);
    }
    println!(
        "pairs {}/{}: delta mean {} std {}, frac <= {} {}, frac > {} {}",
        stats.count,
        pairs.len(),
        stats.mean,
        stats.std,
        stats.threshold,
        stats.frac_le_threshold,
        stats.threshold,
        stats.frac_gt_threshold
    );
    if success_ok(records.len(), pairs.len()) {
        Ok(())
    } else {
        Err(Failure::run(format!(
            "only {} of {} pairs scored",
            records.len(),
            pairs.len()
        )))
    }
}

/// Outcome of the two-Gaussian experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSummary {
    pub seed: u64,
    pub n_points: usize,
    pub valid_accuracy: f64,
    pub accuracy_all: f64,
    pub spearman_lambda_vs_distance: f64,
    pub points_without_crossing: usize,
}

pub fn cmd_synthetic(args: &SyntheticArgs) -> CmdResult {
    let points = sample_mixture(&GaussianMixtureSpec {
        n_per_class: args.n_per_class,
        seed: args.seed,
        ..GaussianMixtureSpec::default()
    })
    .map_err(Failure::input)?;
    let mut cfg = TrainConfig::synthetic_mlp();
    cfg.seed = args.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let (clf, report) =
        train(&ModelSpec::synthetic_mlp(), &points, &cfg, None).map_err(Failure::run)?;
    let scores: Vec<_> = score_dataset(&clf, &points)
        .into_iter()
        .collect::<Result<_>>()
        .map_err(Failure::run)?;
    let distances: Vec<f64> = {
        use rayon::prelude::*;
        points
            .par_iter()
            .map(|p| match &p.input {
                Input::Point(x) => boundary_distance(clf.model(), x),
                Input::Text(_) => unreachable!("mixture samples are points"),
            })
            .collect::<Result<_>>()
            .map_err(Failure::run)?
    };
    let lambdas: Vec<f64> = scores.iter().map(|s| s.lambda_max).collect();
    let rho = spearman(&lambdas, &distances).map_err(Failure::run)?;
    let accuracy_all = evaluate(&clf, &points).map_err(Failure::run)?;

    let coords = |e: &Example| match &e.input {
        Input::Point(x) => (x[0], x[1]),
        Input::Text(_) => unreachable!("mixture samples are points"),
    };
    let mut csv = String::from("x1,x2,label,lambda_max,boundary_distance\n");
    for ((p, s), d) in points.iter().zip(&scores).zip(&distances) {
        let (x1, x2) = coords(p);
        csv.push_str(&format!("{x1},{x2},{},{},{d}\n", p.label, s.lambda_max));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut top = String::from("x1,x2,v1,v2\n");
    for &i in order.iter().take(TOP_EIGVEC_POINTS) {
        let (x1, x2) = coords(&points[i]);
        let v = &scores[i].top_eigenvector;
        top.push_str(&format!("{x1},{x2},{},{}\n", v[0], v[1]));
    }
    let summary = SyntheticSummary {
        seed: args.seed,
        n_points: points.len(),
        valid_accuracy: report.best_valid_accuracy,
        accuracy_all,
        spearman_lambda_vs_distance: rho,
        points_without_crossing: distances.iter().filter(|d| d.is_infinite()).count(),
    };
    let dir = &args.out_dir;
    write(&dir.join("points.csv"), csv)?;
    write(&dir.join("top20_eigvec.csv"), top)?;
    fs::create_dir_all(dir).map_err(|e| Failure::input(Error::io(dir, e)))?;
    save_checkpoint(clf.model(), dir.join("model.ckpt")).map_err(Failure::run)?;
    write(&dir.join("train_report.json"), json_pretty(&report).map_err(Failure::run)?)?;
    write(&dir.join("summary.json"), json_pretty(&summary).map_err(Failure::run)?)?;
    println!("valid accuracy: {}", summary.valid_accuracy);
    println!("spearman(lambda_max, boundary_distance): {rho}");
    Ok(())
}

pub fn cmd_serve(args: &ServeArgs) -> CmdResult {
    let clf = load_classifier(&args.checkpoint, args.data.embeddings.as_deref())?;
    let examples = if args.data.data.is_some() || args.data.synthetic {
        load_examples(&args.data, args.seed)?
    } else {
        Vec::new()
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| Failure::input(format!("bad address: {e}")))?;
    let state = crate::service::AppState::new(clf, examples).map_err(Failure::run)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::run)?;
    rt.block_on(crate::service::serve(state, addr))
        .map_err(Failure::run)
}
