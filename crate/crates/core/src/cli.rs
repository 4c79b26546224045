//! Command-line front end: `train`, `eval`, `convert`, `info`, `gradcheck`
//! and `cross-validate`.
//!
//! Exit codes: 0 success, 1 gradient check failure or internal error,
//! 2 configuration error, 3 dataset error, 4 numerical abort.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Reduce;
use crate::data::{holdout_split, load_dataset, summary_line, write_graph_dataset, Dataset, Graph, GraphTask, Split};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, Fault};
use crate::layers::Aggregation;
use crate::model::{build_model, Model, ModelConfig, Operator, SavedModel};
use crate::stroke::{image_to_stroke, load_idx, make_synthetic_strokes, stroke_to_graph, IngestConfig, Stroke};
use crate::train::{cross_validate, evaluate, train, CvReport, TrainConfig, TrainReport};

pub const EXIT_GRADCHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATASET: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Fraction of graphs held out for testing when `train` gets a graph file.
pub const GRAPH_TEST_FRAC: f64 = 0.3;
pub const GRAPH_VAL_FRAC: f64 = 0.1;

#[derive(Parser, Debug)]
#[command(name = "gtagcn", version, about = "Polynomial-filter graph convolutions")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write report.json and model.json.
    Train(TrainArgs),
    /// Score a saved model on one split.
    Eval(EvalArgs),
    /// Turn IDX rasters, stroke text or a synthetic spec into a graph file.
    Convert(ConvertArgs),
    /// Print graphs, nodes, edges, features and classes.
    Info(InfoArgs),
    /// Finite-difference audit of every op and layer.
    Gradcheck(GradcheckArgs),
    /// k-fold cross-validation on a graph file.
    CrossValidate(CvArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn on(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReadoutArg {
    Mean,
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
    let num = |default: f64| -> std::result::Result<f64, String> {
        arg.map_or(Ok(default), |a| a.parse().map_err(|_| format!("bad number '{a}'")))
    };
    let agg = match kind {
        "softmax" => Aggregation::Softmax { beta: num(1.0)? },
        "powermean" => Aggregation::PowerMean { p: num(1.0)? },
        "mean" if arg.is_none() => Aggregation::Mean,
        "max" if arg.is_none() => Aggregation::Max,
        _ => {
            return Err(format!(
                "expected softmax[:beta], powermean[:p], mean or max, got '{s}'"
            ))
        }
    };
    agg.validate().map_err(|e| e.to_string())?;
    Ok(agg)
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// gtagcn, tagcn, gcn or gen-gtagcn.
    #[arg(long, default_value = "gtagcn")]
    model: Operator,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 1e-7)]
    epsilon: f64,
    /// Defaults to on for gcn and off otherwise.
    #[arg(long, value_enum)]
    self_loops: Option<OnOff>,
    #[arg(long, value_enum, default_value = "mean")]
    readout: ReadoutArg,
    /// One GTAGCN weight per adjacency power.
    #[arg(long)]
    per_power_weights: bool,
    /// Stages of the MLP inside each GTAGCN layer (0 disables it).
    #[arg(long, default_value_t = 2)]
    layer_mlp_depth: usize,
    #[arg(long)]
    no_batch_norm: bool,
    /// Keep edge direction instead of symmetrizing.
    #[arg(long)]
    no_symmetrize: bool,
    /// gen-gtagcn aggregation: softmax[:beta], powermean[:p], mean or max.
    #[arg(long, default_value = "softmax:1", value_parser = parse_aggregation)]
    aggregation: Aggregation,
    /// gen-gtagcn message normalization scale.
    #[arg(long)]
    message_norm: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            operator: self.model,
            k: self.k,
            hidden: self.hidden,
            num_layers: self.layers,
            dropout: self.dropout,
            epsilon: self.epsilon,
            readout: match self.readout {
                ReadoutArg::Mean => Reduce::Mean,
                ReadoutArg::Sum => Reduce::Sum,
                ReadoutArg::Max => Reduce::Max,
            },
            self_loops: self.self_loops.map(OnOff::on),
            symmetrize: !self.no_symmetrize,
            per_power_weights: self.per_power_weights,
            layer_mlp_depth: self.layer_mlp_depth,
            batch_norm: !self.no_batch_norm,
            aggregation: self.aggregation,
            message_norm: self.message_norm,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    /// Graphs per mini-batch.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

impl OptimArgs {
    fn config(&self, folds: usize) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.lr,
            max_epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch,
            folds,
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Divide each node feature row by its L1 norm (node datasets only).
    #[arg(long, value_enum, default_value = "on")]
    row_normalize: OnOff,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// model.json written by `train`, or the directory holding it.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// IDX image file; needs --idx-labels.
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long)]
    idx_labels: Option<PathBuf>,
    /// Stroke text: one stroke per line, `label<TAB>x,y x,y ...`.
    #[arg(long)]
    strokes: Option<PathBuf>,
    /// Synthetic benchmark spec such as "C=10 n=200 seed=7".
    #[arg(long)]
    synthetic: Option<String>,
    /// Nodes per graph.
    #[arg(long = "length", short = 'L', default_value_t = 25)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    bins: usize,
    /// Foreground threshold for IDX rasters.
    #[arg(long, default_value_t = 128)]
    threshold: u8,
    /// Convert only the first N IDX images.
    #[arg(long)]
    limit: Option<usize>,
    /// Jitter scale for synthetic strokes.
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, hide = true, value_parser = ["relu"])]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance stamped into every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Command line with the output location removed.
    pub command: Vec<String>,
    pub config: serde_json::Value,
    /// SHA-256 of the dataset file, or of a directory's files in name order.
    pub dataset_sha256: String,
    pub seed: u64,
    pub version: String,
}

impl RunManifest {
    fn new(argv: &[String], config: serde_json::Value, dataset: &Path, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            command: command_echo(argv),
            config,
            dataset_sha256: fingerprint(dataset)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

fn command_echo(argv: &[String]) -> Vec<String> {
    let mut out = vec!["gtagcn".to_string()];
    let mut skip = false;
    for a in argv.iter().skip(1) {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}

/// Content hash of a dataset file or directory.
pub fn fingerprint(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            h.update(f.file_name().unwrap_or_default().as_encoded_bytes());
            h.update([0u8]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// How a graph file's items were assigned to splits by `train`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub test_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

/// Contents of `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: RunManifest,
    pub row_normalize: bool,
    /// Present when the dataset was a graph file.
    pub split: Option<SplitProtocol>,
    /// Accuracy of the saved parameters on each nonempty split.
    pub accuracy: BTreeMap<String, f64>,
    pub model: SavedModel,
}

/// Contents of `report.json` for `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub manifest: RunManifest,
    pub report: TrainReport,
}

/// Contents of `report.json` for `cross-validate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutput {
    pub manifest: RunManifest,
    pub report: CvReport,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        e if e.is_dataset_error() => EXIT_DATASET,
        Error::Numerical(_) | Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => 1,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Loads a dataset the way `train` saw it.
fn prepare(path: &Path, row_normalize: bool, split: Option<SplitProtocol>) -> Result<Dataset> {
    let mut ds = load_dataset(path)?;
    match &mut ds {
        Dataset::Node(t) if row_normalize => t.row_normalize_features(),
        Dataset::Graph(t) => {
            if let Some(p) = split {
                t.splits = holdout_split(&t.labels(), p.test_frac, p.val_frac, p.seed)?;
            }
        }
        _ => {}
    }
    Ok(ds)
}

fn split_accuracies(model: &Model, ds: &Dataset) -> Result<BTreeMap<String, f64>> {
    let mut acc = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        if !ds.split_indices(s).is_empty() {
            acc.insert(s.as_str().to_string(), evaluate(model, ds, s)?.accuracy);
        }
    }
    Ok(acc)
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<i32> {
    let cfg = a.model.config()?;
    let tcfg = a.optim.config(TrainConfig::default().folds)?;
    let graph_file = !a.dataset.is_dir();
    let split = graph_file.then_some(SplitProtocol {
        test_frac: GRAPH_TEST_FRAC,
        val_frac: GRAPH_VAL_FRAC,
        seed: cfg.seed,
    });
    let row_normalize = a.row_normalize.on();
    let ds = prepare(&a.dataset, row_normalize, split)?;
    let mut model = build_model(&cfg, ds.num_features(), ds.num_classes(), ds.is_graph_level())?;
    log::info!("{} parameters", model.num_parameters());
    let report = train(&mut model, &ds, &tcfg)?;
    let accuracy = split_accuracies(&model, &ds)?;

    let config = serde_json::json!({ "model": cfg, "train": tcfg, "row_normalize": row_normalize, "split": split });
    let manifest = RunManifest::new(argv, config, &a.dataset, cfg.seed)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("model.json"),
        &Checkpoint {
            manifest: manifest.clone(),
            row_normalize,
            split,
            accuracy,
            model: model.to_saved(),
        },
    )?;
    println!(
        "epochs={} best_epoch={} best_val_acc={}",
        report.epochs_run(),
        report.best_epoch,
        report.best_val_acc
    );
    match report.test_acc {
        Some(t) => println!("test_acc={t}"),
        None => println!("test_acc=nan"),
    }
    write_json(&a.out.join("report.json"), &TrainOutput { manifest, report })?;
    Ok(0)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let path = if a.checkpoint.is_dir() {
        a.checkpoint.join("model.json")
    } else {
        a.checkpoint.clone()
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: not a saved model: {e}", path.display())))?;
    let ds = prepare(&a.dataset, ckpt.row_normalize, ckpt.split)?;
    let model = Model::from_saved(ckpt.model)?;
    if model.is_graph_level() != ds.is_graph_level() {
        return Err(Error::Dataset(format!(
            "model is {}-level, dataset is {}-level",
            if model.is_graph_level() { "graph" } else { "node" },
            if ds.is_graph_level() { "graph" } else { "node" }
        )));
    }
    let split = a.split.split();
    let ev = evaluate(&model, &ds, split)?;
    println!("correct={} total={}", ev.correct, ev.total);
    println!("{}_acc={}", split.as_str(), ev.accuracy);
    Ok(0)
}

/// Parses `key=value` pairs such as `C=10 n=200 seed=7`.
fn parse_synthetic(spec: &str) -> Result<(usize, usize, u64)> {
    let (mut c, mut n, mut seed) = (None, None, 0);
    for tok in spec
        .split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|t| !t.is_empty())
    {
        let bad = || Error::Config(format!("--synthetic: cannot parse '{tok}'"));
        let (k, v) = tok.split_once('=').ok_or_else(bad)?;
        match k {
            "C" | "classes" => c = Some(v.parse().map_err(|_| bad())?),
            "n" | "per_class" => n = Some(v.parse().map_err(|_| bad())?),
            "seed" => seed = v.parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    match (c, n) {
        (Some(c), Some(n)) => Ok((c, n, seed)),
        _ => Err(Error::Config("--synthetic needs C=<classes> and n=<per class>".into())),
    }
}

fn parse_stroke_line(path: &Path, ln: usize, line: &str) -> Result<(Stroke, usize)> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: ln,
        msg,
    };
    let mut fields = line.split_whitespace();
    let label = fields
        .next()
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| err("expected a class label".into()))?;
    let pts = fields
        .map(|f| {
            let (x, y) = f.split_once(',').ok_or_else(|| err(format!("bad point '{f}'")))?;
            match (x.parse(), y.parse()) {
                (Ok(x), Ok(y)) => Ok([x, y]),
                _ => Err(err(format!("bad point '{f}'"))),
            }
        })
        .collect::<Result<Vec<[f64; 2]>>>()?;
    let stroke = Stroke::new(pts).map_err(|e| err(e.to_string()))?;
    Ok((stroke, label))
}

fn cmd_convert(a: &ConvertArgs, argv: &[String]) -> Result<i32> {
    let cfg = IngestConfig::new(a.length, a.bins)?;
    let sources = [a.idx_images.is_some(), a.strokes.is_some(), a.synthetic.is_some()];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(Error::Config(
            "give exactly one of --idx-images/--idx-labels, --strokes or --synthetic".into(),
        ));
    }
    let (graphs, source, seed) = if let Some(spec) = &a.synthetic {
        let (c, n, seed) = parse_synthetic(spec)?;
        (make_synthetic_strokes(c, n, seed, a.jitter, &cfg)?.graphs, None, seed)
    } else if let Some(p) = &a.strokes {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut graphs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (stroke, label) = parse_stroke_line(p, i + 1, line)?;
            let mut g = stroke_to_graph(&stroke, &cfg).map_err(|e| Error::Parse {
                path: p.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            g.y = Some(label);
            graphs.push(g);
        }
        (graphs, Some(p.clone()), 0)
    } else {
        let (ip, lp) = (a.idx_images.as_ref().unwrap(), a.idx_labels.as_ref().unwrap());
        let items = load_idx(ip, lp)?;
        let take = a.limit.unwrap_or(items.len()).min(items.len());
        let mut graphs: Vec<Graph> = Vec::with_capacity(take);
        let mut skipped = 0;
        for (i, (img, label)) in items.into_iter().take(take).enumerate() {
            match image_to_stroke(&img, a.threshold).and_then(|s| stroke_to_graph(&s, &cfg)) {
                Ok(mut g) => {
                    g.y = Some(label as usize);
                    graphs.push(g);
                }
                Err(e) => {
                    log::warn!("image {i} skipped: {e}");
                    skipped += 1;
                }
            }
        }
        if skipped > 0 {
            println!("skipped={skipped}");
        }
        (graphs, Some(ip.clone()), 0)
    };
    if graphs.is_empty() {
        return Err(Error::Dataset("conversion produced no graphs".into()));
    }
    write_graph_dataset(&a.out, &graphs)?;
    let classes = graphs.iter().filter_map(|g| g.y).max().map_or(0, |m| m + 1);
    let task = GraphTask {
        splits: vec![Split::Train; graphs.len()],
        graphs,
        num_classes: classes,
    };
    println!("graphs={} classes={classes}", task.graphs.len());
    println!("{}", summary_line(&Dataset::Graph(task)));

    let config = serde_json::json!({
        "length": cfg.length,
        "direction_bins": cfg.direction_bins,
        "threshold": a.threshold,
        "jitter": a.jitter,
        "limit": a.limit,
    });
    let fingerprinted = source.as_deref().unwrap_or(&a.out);
    let manifest = RunManifest::new(argv, config, fingerprinted, seed)?;
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".manifest.json");
    write_json(Path::new(&sidecar), &manifest)?;
    Ok(0)
}

fn cmd_info(a: &InfoArgs) -> Result<i32> {
    println!("{}", summary_line(&load_dataset(&a.dataset)?));
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let fault = a.inject_fault.as_deref().map(|_| Fault::Relu);
    let start = std::time::Instant::now();
    let report = run_suite(fault)?;
    print!("{}", report.table());
    let worst = report.worst();
    println!(
        "worst={} rel_err={:.3e} checks={} secs={:.2}",
        worst.name,
        worst.max_rel_err,
        report.results.len(),
        start.elapsed().as_secs_f64()
    );
    if report.passes() {
        return Ok(0);
    }
    let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
    eprintln!("gradcheck failed: {}", names.join(", "));
    Ok(EXIT_GRADCHECK)
}

fn cmd_cross_validate(a: &CvArgs, argv: &[String]) -> Result<i32> {
    let cfg = a.model.config()?;
    let tcfg = a.optim.config(a.folds)?;
    let task = match load_dataset(&a.dataset)? {
        Dataset::Graph(t) => t,
        Dataset::Node(_) => {
            return Err(Error::Dataset("cross-validation needs a graph dataset file".into()));
        }
    };
    let report = cross_validate(&task, &cfg, &tcfg)?;
    for (f, acc) in report.fold_acc.iter().enumerate() {
        println!("fold={} test_acc={acc}", f + 1);
    }
    println!("cv_mean={} cv_std={}", report.mean, report.std);
    if let Some(out) = &a.out {
        let config = serde_json::json!({ "model": cfg, "train": tcfg });
        let manifest = RunManifest::new(argv, config, &a.dataset, cfg.seed)?;
        create_dir(out)?;
        write_json(&out.join("report.json"), &CvOutput { manifest, report })?;
    }
    Ok(0)
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a),
        Command::Convert(a) => cmd_convert(a, argv),
        Command::Info(a) => cmd_info(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::CrossValidate(a) => cmd_cross_validate(a, argv),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_CONFIG,
            };
        }
    };
    match dispatch(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
