//! Model configuration and assembly: input MLP, a stack of graph
//! convolution layers, optional readout, prediction MLP and log-softmax.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Tensor, Var};
use crate::data::{batch_graphs, readout, Graph, GraphBatch};
use crate::error::{Error, Result};
use crate::layers::{Aggregation, GcnLayer, GenGtagcnLayer, GtagcnLayer, MlpBlock, ParamStore, Session, TagcnLayer};
use crate::sparse::{normalized_adjacency, normalized_adjacency_directed, CsrMatrix};

/// Graph convolution used in the hidden stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operator {
    Gtagcn,
    Tagcn,
    Gcn,
    GenGtagcn,
}

impl Operator {
    /// GCN is normalized with self-loops, the power-series operators without.
    pub fn default_self_loops(self) -> bool {
        matches!(self, Operator::Gcn)
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gtagcn" => Ok(Operator::Gtagcn),
            "tagcn" => Ok(Operator::Tagcn),
            "gcn" => Ok(Operator::Gcn),
            "gen-gtagcn" => Ok(Operator::GenGtagcn),
            other => Err(Error::Config(format!(
                "--model: unknown operator {other:?} (expected gtagcn, tagcn, gcn or gen-gtagcn)"
            ))),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::Gtagcn => "gtagcn",
            Operator::Tagcn => "tagcn",
            Operator::Gcn => "gcn",
            Operator::GenGtagcn => "gen-gtagcn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub operator: Operator,
    /// Filter order of the power-series operators.
    pub k: usize,
    pub hidden: usize,
    pub num_layers: usize,
    /// Dropout applied to the input of every hidden layer.
    pub dropout: f64,
    pub epsilon: f64,
    pub readout: Reduce,
    /// `None` picks the operator default.
    pub self_loops: Option<bool>,
    pub symmetrize: bool,
    /// One GTAGCN weight per power instead of a shared one.
    pub per_power_weights: bool,
    /// Stages of the MLP inside each GTAGCN layer; 0 disables it.
    pub layer_mlp_depth: usize,
    pub batch_norm: bool,
    pub aggregation: Aggregation,
    pub message_norm: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            operator: Operator::Gtagcn,
            k: 6,
            hidden: 16,
            num_layers: 2,
            dropout: 0.5,
            epsilon: 1e-7,
            readout: Reduce::Mean,
            self_loops: None,
            symmetrize: true,
            per_power_weights: false,
            layer_mlp_depth: 2,
            batch_norm: true,
            aggregation: Aggregation::Softmax { beta: 1.0 },
            message_norm: None,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn self_loops(&self) -> bool {
        self.self_loops.unwrap_or(self.operator.default_self_loops())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("--hidden must be at least 1".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("--layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("--dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        self.aggregation.validate()
    }
}

/// Normalized operator for one (possibly batched) graph.
pub fn build_adjacency(n: usize, edges: &[(usize, usize)], symmetrize: bool, self_loops: bool) -> Result<CsrMatrix> {
    let a = CsrMatrix::from_edges(n, edges, symmetrize)?;
    if a.is_symmetric() {
        normalized_adjacency(&a, self_loops)
    } else {
        Ok(normalized_adjacency_directed(&a, self_loops))
    }
}

/// Features, normalized operator and, for graph tasks, the node-to-graph map.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub x: Tensor,
    pub adj: Arc<CsrMatrix>,
    pub graphs: Option<(Vec<usize>, usize)>,
}

impl ModelInput {
    pub fn node_level(g: &Graph, cfg: &ModelConfig) -> Result<Self> {
        Ok(ModelInput {
            x: g.x.clone(),
            adj: Arc::new(build_adjacency(
                g.num_nodes,
                &g.edges,
                cfg.symmetrize,
                cfg.self_loops(),
            )?),
            graphs: None,
        })
    }

    pub fn graph_level(batch: GraphBatch, cfg: &ModelConfig) -> Result<Self> {
        let adj = build_adjacency(batch.num_nodes, &batch.edges, cfg.symmetrize, cfg.self_loops())?;
        Ok(ModelInput {
            x: batch.x,
            adj: Arc::new(adj),
            graphs: Some((batch.graph_index, batch.num_graphs)),
        })
    }

    pub fn from_graphs<G: std::borrow::Borrow<Graph>>(graphs: &[G], cfg: &ModelConfig) -> Result<Self> {
        Self::graph_level(batch_graphs(graphs)?, cfg)
    }

    /// Rows of the model output: nodes, or graphs for batched input.
    pub fn output_rows(&self) -> usize {
        self.graphs.as_ref().map_or(self.x.rows(), |(_, g)| *g)
    }
}

#[derive(Clone, Debug)]
enum OpLayer {
    Gtagcn(GtagcnLayer),
    Tagcn(TagcnLayer),
    Gcn(GcnLayer),
    Gen(GenGtagcnLayer),
}

#[derive(Clone, Debug)]
struct Architecture {
    input_mlp: MlpBlock,
    layers: Vec<OpLayer>,
    pred_mlp: MlpBlock,
    dropout: f64,
    readout: Reduce,
    graph_level: bool,
}

impl Architecture {
    fn forward(&self, s: &mut Session, input: &ModelInput) -> Result<Var> {
        if self.graph_level != input.graphs.is_some() {
            return Err(Error::Config(if self.graph_level {
                "graph-level model needs batched graph input".into()
            } else {
                "node-level model got batched graph input".into()
            }));
        }
        let x = s.tape.constant(input.x.clone());
        let mut h = self.input_mlp.forward(s, x)?;
        for layer in &self.layers {
            h = s.dropout(h, self.dropout)?;
            h = match layer {
                OpLayer::Gtagcn(l) => l.forward(s, &input.adj, h)?,
                OpLayer::Tagcn(l) => l.forward(s, &input.adj, h)?,
                OpLayer::Gcn(l) => l.forward(s, &input.adj, h)?,
                OpLayer::Gen(l) => l.forward(s, &input.adj, h)?,
            };
        }
        if let Some((index, count)) = &input.graphs {
            h = readout(s.tape, h, index, *count, self.readout)?;
        }
        let logits = self.pred_mlp.forward(s, h)?;
        s.tape.log_softmax(logits)
    }
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub config: ModelConfig,
    pub num_features: usize,
    pub num_classes: usize,
    pub graph_level: bool,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    num_features: usize,
    num_classes: usize,
    arch: Architecture,
    store: ParamStore,
}

/// Assembles a model. Initialization draws from a generator seeded with
/// `cfg.seed`, so equal configurations give bit-identical models.
pub fn build_model(cfg: &ModelConfig, num_features: usize, num_classes: usize, graph_level: bool) -> Result<Model> {
    cfg.validate()?;
    if num_features == 0 || num_classes == 0 {
        return Err(Error::Config(format!(
            "model needs at least one feature and one class, got {num_features} and {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let h = cfg.hidden;
    let input_mlp = MlpBlock::new(
        &mut store,
        "input_mlp",
        &[num_features, h, h, h],
        cfg.batch_norm,
        &mut rng,
    )?;
    let layer_mlp = vec![
        h;
        if cfg.layer_mlp_depth == 0 {
            0
        } else {
            cfg.layer_mlp_depth + 1
        }
    ];
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let name = format!("layer{i}");
        let layer = match cfg.operator {
            Operator::Gtagcn => OpLayer::Gtagcn(GtagcnLayer::new(
                &mut store,
                &name,
                h,
                h,
                cfg.k,
                cfg.epsilon,
                cfg.per_power_weights,
                &layer_mlp,
                cfg.batch_norm,
                &mut rng,
            )?),
            Operator::Tagcn => OpLayer::Tagcn(TagcnLayer::new(&mut store, &name, h, h, cfg.k, &mut rng)?),
            Operator::Gcn => {
                let last = i + 1 == cfg.num_layers;
                OpLayer::Gcn(GcnLayer::new(&mut store, &name, h, h, !last, &mut rng))
            }
            Operator::GenGtagcn => OpLayer::Gen(GenGtagcnLayer::new(
                &mut store,
                &name,
                h,
                h,
                cfg.k,
                cfg.epsilon,
                cfg.aggregation,
                cfg.message_norm,
                &layer_mlp,
                cfg.batch_norm,
                &mut rng,
            )?),
        };
        layers.push(layer);
    }
    let pred_mlp = MlpBlock::new(&mut store, "pred_mlp", &[h, h, h, num_classes], false, &mut rng)?;
    Ok(Model {
        config: cfg.clone(),
        num_features,
        num_classes,
        arch: Architecture {
            input_mlp,
            layers,
            pred_mlp,
            dropout: cfg.dropout,
            readout: cfg.readout,
            graph_level,
        },
        store,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_graph_level(&self) -> bool {
        self.arch.graph_level
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        if input.x.cols() != self.num_features {
            return Err(Error::Dataset(format!(
                "model expects {} input features, dataset has {}",
                self.num_features,
                input.x.cols()
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass recording onto `tape`; returns the
    /// log-probabilities and the parameter leaves in store order.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        input: &ModelInput,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(input)?;
        let mut s = self.store.session(tape, true, rng);
        let out = self.arch.forward(&mut s, input)?;
        Ok((out, s.params().to_vec()))
    }

    /// Forward pass with caller-supplied parameter variables.
    pub fn forward_with(&self, s: &mut Session, input: &ModelInput) -> Result<Var> {
        self.check_input(input)?;
        self.arch.forward(s, input)
    }

    /// Evaluation-mode log-probabilities.
    pub fn predict(&self, input: &ModelInput) -> Result<Tensor> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let params = self.store.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let mut buffers = self.store.buffers().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Session::with_vars(&mut tape, params, &mut buffers, false, &mut rng);
        let out = self.arch.forward(&mut s, input)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_saved(&self) -> SavedModel {
        SavedModel {
            config: self.config.clone(),
            num_features: self.num_features,
            num_classes: self.num_classes,
            graph_level: self.arch.graph_level,
            params: self.store.clone(),
        }
    }

    pub fn from_saved(saved: SavedModel) -> Result<Self> {
        let mut model = build_model(&saved.config, saved.num_features, saved.num_classes, saved.graph_level)?;
        model.store.load_from(saved.params)?;
        Ok(model)
    }
}
