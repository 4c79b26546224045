//! Training with Adam and early stopping, evaluation, and k-fold
//! cross-validation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape};
use crate::data::{holdout_split, stratified_folds, Dataset, Graph, GraphTask, Split};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::{build_model, Model, ModelConfig, ModelInput};

/// Graphs per forward pass when evaluating graph tasks.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a strict improvement in validation accuracy before
    /// training stops.
    pub patience: usize,
    /// Graphs per mini-batch (graph tasks only).
    pub batch_size: usize,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            max_epochs: 1000,
            patience: 100,
            batch_size: 64,
            folds: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "--lr must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("--patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("--epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("--batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch metrics and the outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    /// Accuracy of the restored model on the test split, when there is one.
    pub test_acc: Option<f64>,
    pub seed: u64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

/// Accuracy on one split plus per-class `(correct, total)` counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<(usize, usize)>,
}

/// Cross-validation outcome, folds in index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_acc: Vec<f64>,
    pub fold_train_sizes: Vec<usize>,
    pub fold_test_sizes: Vec<usize>,
    pub mean: f64,
    /// Sample standard deviation over folds.
    pub std: f64,
}

fn numerical(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical(format!("epoch {epoch}: non-finite value in {op}")),
        other => other,
    }
}

/// Seed of the dropout and shuffling stream, kept apart from the
/// initialization stream.
fn train_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Where the data for one run comes from.
enum Plan<'a> {
    Node {
        input: ModelInput,
        labels: &'a [usize],
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
    Graph {
        graphs: &'a [Graph],
        labels: Vec<usize>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
}

fn plan<'a>(model: &Model, ds: &'a Dataset) -> Result<Plan<'a>> {
    if model.is_graph_level() != ds.is_graph_level() {
        return Err(Error::Config(
            "model and dataset disagree on node vs. graph classification".into(),
        ));
    }
    if model.num_classes() < ds.num_classes() {
        return Err(Error::Dataset(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    let train = ds.split_indices(Split::Train);
    let mut val = ds.split_indices(Split::Val);
    let test = ds.split_indices(Split::Test);
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    match ds {
        Dataset::Node(t) => {
            if val.is_empty() {
                return Err(Error::Dataset("validation split is empty".into()));
            }
            Ok(Plan::Node {
                input: ModelInput::node_level(&t.graph, model.config())?,
                labels: &t.labels,
                train,
                val,
                test,
            })
        }
        Dataset::Graph(t) => {
            if val.is_empty() {
                log::warn!("no validation graphs; using the training graphs for model selection");
                val = train.clone();
            }
            Ok(Plan::Graph {
                graphs: &t.graphs,
                labels: t.labels(),
                train,
                val,
                test,
            })
        }
    }
}

fn score(logp: &crate::autodiff::Tensor, rows: &[usize], labels: &[usize], num_classes: usize) -> Evaluation {
    let pred = logp.argmax_rows();
    let mut per_class = vec![(0usize, 0usize); num_classes];
    let mut loss = 0.0;
    for (&r, &y) in rows.iter().zip(labels) {
        per_class[y].1 += 1;
        if pred[r] == y {
            per_class[y].0 += 1;
        }
        loss -= logp.get(r, y);
    }
    let correct = per_class.iter().map(|c| c.0).sum();
    let total = rows.len();
    Evaluation {
        accuracy: correct as f64 / total as f64,
        loss: loss / total as f64,
        correct,
        total,
        per_class,
    }
}

fn merge(parts: Vec<Evaluation>, num_classes: usize) -> Evaluation {
    let mut per_class = vec![(0, 0); num_classes];
    let (mut correct, mut total, mut loss) = (0, 0, 0.0);
    for p in parts {
        correct += p.correct;
        total += p.total;
        loss += p.loss * p.total as f64;
        for (acc, c) in per_class.iter_mut().zip(p.per_class) {
            acc.0 += c.0;
            acc.1 += c.1;
        }
    }
    Evaluation {
        accuracy: correct as f64 / total as f64,
        loss: loss / total as f64,
        correct,
        total,
        per_class,
    }
}

fn eval_graphs(model: &Model, graphs: &[Graph], labels: &[usize], idx: &[usize]) -> Result<Evaluation> {
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch: Vec<&Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
        let logp = model.predict(&ModelInput::from_graphs(&batch, model.config())?)?;
        let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let rows: Vec<usize> = (0..chunk.len()).collect();
        parts.push(score(&logp, &rows, &ys, model.num_classes()));
    }
    Ok(merge(parts, model.num_classes()))
}

fn eval_plan(model: &Model, plan: &Plan, which: Split) -> Result<Evaluation> {
    match plan {
        Plan::Node {
            input,
            labels,
            train,
            val,
            test,
        } => {
            let rows = match which {
                Split::Train => train,
                Split::Val => val,
                _ => test,
            };
            let logp = model.predict(input)?;
            let ys: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            Ok(score(&logp, rows, &ys, model.num_classes()))
        }
        Plan::Graph {
            graphs,
            labels,
            train,
            val,
            test,
        } => {
            let rows = match which {
                Split::Train => train,
                Split::Val => val,
                _ => test,
            };
            eval_graphs(model, graphs, labels, rows)
        }
    }
}

/// Accuracy of `model` on one split of `ds`, in evaluation mode.
pub fn evaluate(model: &Model, ds: &Dataset, which: Split) -> Result<Evaluation> {
    let idx = ds.split_indices(which);
    if idx.is_empty() {
        return Err(Error::Dataset(format!("{} split is empty", which.as_str())));
    }
    if model.num_classes() < ds.num_classes() {
        return Err(Error::Dataset(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    match ds {
        Dataset::Node(t) => {
            let logp = model.predict(&ModelInput::node_level(&t.graph, model.config())?)?;
            let ys: Vec<usize> = idx.iter().map(|&i| t.labels[i]).collect();
            Ok(score(&logp, &idx, &ys, model.num_classes()))
        }
        Dataset::Graph(t) => eval_graphs(model, &t.graphs, &t.labels(), &idx),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    /// This epoch becomes the checkpoint.
    pub is_best: bool,
    pub stop: bool,
}

/// Checkpoint choice and patience bookkeeping.
///
/// The checkpoint moves on higher validation accuracy, or equal accuracy
/// with lower loss. Patience resets only on strictly higher accuracy.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    since_improvement: usize,
    pub best_epoch: usize,
    pub best_acc: f64,
    pub best_loss: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            since_improvement: 0,
            best_epoch: 0,
            best_acc: f64::NEG_INFINITY,
            best_loss: f64::INFINITY,
        }
    }

    pub fn observe(&mut self, epoch: usize, acc: f64, loss: f64) -> Verdict {
        let improved = acc > self.best_acc;
        let is_best = improved || (acc == self.best_acc && loss < self.best_loss);
        if is_best {
            self.best_epoch = epoch;
            self.best_acc = acc;
            self.best_loss = loss;
        }
        if improved {
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        Verdict {
            is_best,
            stop: self.since_improvement >= self.patience,
        }
    }
}

/// One optimization step on the given rows; returns the training loss.
fn step(
    model: &mut Model,
    adam: &mut AdamState,
    lr: f64,
    input: &ModelInput,
    labels: &[usize],
    rows: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (logp, params) = model.forward_train(&mut tape, input, rng)?;
    let loss = tape.nll_masked(logp, labels, rows)?;
    let value = tape.value(loss).get(0, 0);
    tape.backward(loss)?;
    let grads: Vec<_> = params
        .iter()
        .map(|&p| tape.grad(p).cloned().expect("leaf gradient"))
        .collect();
    adam_step(model.params_mut().tensors_mut(), &grads, adam, lr)?;
    Ok(value)
}

/// Trains `model` on `ds` and restores the parameters of the best
/// validation epoch.
///
/// Node tasks run full-batch epochs; graph tasks run shuffled mini-batches
/// of `batch_size` graphs. The checkpoint is chosen by highest validation
/// accuracy, then lower validation loss, then earlier epoch. Patience
/// counts epochs since the last strict accuracy improvement.
pub fn train(model: &mut Model, ds: &Dataset, tcfg: &TrainConfig) -> Result<TrainReport> {
    tcfg.validate()?;
    let start = Instant::now();
    let plan = plan(model, ds)?;
    let seed = model.config().seed;
    let mut rng = train_rng(seed);
    let mut adam = AdamState::new(&model.params().shapes());

    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_acc: Vec::new(),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
        best_val_loss: f64::INFINITY,
        test_acc: None,
        seed,
        wall_time_secs: 0.0,
    };
    let mut best_params: Option<ParamStore> = None;
    let mut stopper = EarlyStopping::new(tcfg.patience);

    for epoch in 1..=tcfg.max_epochs {
        let train_loss = match &plan {
            Plan::Node {
                input, labels, train, ..
            } => step(model, &mut adam, tcfg.lr, input, labels, train, &mut rng).map_err(|e| numerical(epoch, e))?,
            Plan::Graph {
                graphs, labels, train, ..
            } => {
                let mut order = train.clone();
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for chunk in order.chunks(tcfg.batch_size) {
                    let batch: Vec<&Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
                    let input = ModelInput::from_graphs(&batch, model.config())?;
                    let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    let rows: Vec<usize> = (0..chunk.len()).collect();
                    let l = step(model, &mut adam, tcfg.lr, &input, &ys, &rows, &mut rng)
                        .map_err(|e| numerical(epoch, e))?;
                    total += l * chunk.len() as f64;
                }
                total / order.len() as f64
            }
        };
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "epoch {epoch}: training loss is {train_loss}"
            )));
        }
        let val = eval_plan(model, &plan, Split::Val).map_err(|e| numerical(epoch, e))?;
        report.train_loss.push(train_loss);
        report.val_loss.push(val.loss);
        report.val_acc.push(val.accuracy);
        log::debug!(
            "epoch {epoch}: train_loss={train_loss:.6} val_loss={:.6} val_acc={:.4}",
            val.loss,
            val.accuracy
        );

        let verdict = stopper.observe(epoch, val.accuracy, val.loss);
        if verdict.is_best {
            best_params = Some(model.params().clone());
        }
        if verdict.stop {
            break;
        }
    }

    if let Some(p) = best_params {
        *model.params_mut() = p;
    }
    report.best_epoch = stopper.best_epoch;
    report.best_val_acc = stopper.best_acc;
    report.best_val_loss = stopper.best_loss;
    let has_test = match &plan {
        Plan::Node { test, .. } | Plan::Graph { test, .. } => !test.is_empty(),
    };
    if has_test {
        report.test_acc = Some(eval_plan(model, &plan, Split::Test)?.accuracy);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `tcfg.folds`-fold cross-validation over a graph task.
///
/// Each fold trains a fresh model on the other folds, carving 10% of them
/// (stratified, seeded) for validation, and scores the held-out fold.
pub fn cross_validate(task: &GraphTask, cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<CvReport> {
    tcfg.validate()?;
    let labels = task.labels();
    let fold_of = stratified_folds(&labels, tcfg.folds, cfg.seed)?;
    let mut fold_acc = Vec::with_capacity(tcfg.folds);
    let mut fold_train_sizes = Vec::with_capacity(tcfg.folds);
    let mut fold_test_sizes = Vec::with_capacity(tcfg.folds);
    for f in 0..tcfg.folds {
        let rest: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        let rest_labels: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
        let carve = holdout_split(&rest_labels, 0.0, 0.1, cfg.seed.wrapping_add(f as u64))?;
        let mut splits = vec![Split::Test; labels.len()];
        for (&i, s) in rest.iter().zip(carve) {
            splits[i] = s;
        }
        let fold_task = Dataset::Graph(GraphTask {
            graphs: task.graphs.clone(),
            num_classes: task.num_classes,
            splits,
        });
        let mut model = build_model(cfg, task.num_features(), task.num_classes, true)?;
        let report = train(&mut model, &fold_task, tcfg)?;
        let acc = report.test_acc.expect("held-out fold is nonempty");
        log::info!(
            "fold {}/{}: test_acc={acc:.4} best_epoch={}",
            f + 1,
            tcfg.folds,
            report.best_epoch
        );
        fold_train_sizes.push(fold_task.split_indices(Split::Train).len());
        fold_test_sizes.push(fold_task.split_indices(Split::Test).len());
        fold_acc.push(acc);
    }
    let (mean, std) = mean_std(&fold_acc);
    Ok(CvReport {
        fold_acc,
        fold_train_sizes,
        fold_test_sizes,
        mean,
        std,
    })
}
