//! Graphs, labeled tasks, portable file formats and batching.

mod batch;
mod io;
mod split;

pub use batch::{batch_graphs, readout, GraphBatch};
pub use io::{load_dataset, load_graph_dataset, load_node_dataset, write_graph_dataset, write_node_dataset, NodeMeta};
pub use split::{holdout_split, stratified_folds};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One graph: node features plus an edge list as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub x: Tensor,
    pub y: Option<usize>,
}

impl Graph {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, x: Tensor, y: Option<usize>) -> Result<Self> {
        let g = Graph { num_nodes, edges, x, y };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.rows() != self.num_nodes {
            return Err(Error::Dataset(format!(
                "feature matrix has {} rows for {} nodes",
                self.x.rows(),
                self.num_nodes
            )));
        }
        if let Some(&(u, v)) = self
            .edges
            .iter()
            .find(|&&(u, v)| u >= self.num_nodes || v >= self.num_nodes)
        {
            return Err(Error::Dataset(format!(
                "edge ({u}, {v}) out of range for {} nodes",
                self.num_nodes
            )));
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }
}

/// Role of a node (node tasks) or a graph (graph tasks) in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "none" => Some(Split::None),
            _ => None,
        }
    }
}

fn indices_of(splits: &[Split], which: Split) -> Vec<usize> {
    splits
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == which)
        .map(|(i, _)| i)
        .collect()
}

/// Transductive node classification on one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeTask {
    pub graph: Graph,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
}

impl NodeTask {
    pub fn new(graph: Graph, labels: Vec<usize>, splits: Vec<Split>, num_classes: usize) -> Result<Self> {
        let t = NodeTask {
            graph,
            labels,
            splits,
            num_classes,
        };
        t.validate()?;
        Ok(t)
    }

    /// Labels in range, one label and one split entry per node, and a
    /// nonempty training split. Validation and test splits may be empty
    /// here; training and evaluation reject empty splits themselves.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let n = self.graph.num_nodes;
        if self.labels.len() != n || self.splits.len() != n {
            return Err(Error::Dataset(format!(
                "{} labels and {} split entries for {n} nodes",
                self.labels.len(),
                self.splits.len()
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "node {i}: label {l} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.split_indices(Split::Train).is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        Ok(())
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        indices_of(&self.splits, which)
    }

    /// Scales every feature row to unit L1 norm; all-zero rows stay zero.
    pub fn row_normalize_features(&mut self) {
        let x = &mut self.graph.x;
        for i in 0..x.rows() {
            let s: f64 = x.row(i).iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                x.row_mut(i).iter_mut().for_each(|v| *v /= s);
            }
        }
    }
}

/// Inductive graph classification over many labeled graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTask {
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
}

impl GraphTask {
    pub fn new(graphs: Vec<Graph>, num_classes: usize, splits: Vec<Split>) -> Result<Self> {
        let t = GraphTask {
            graphs,
            num_classes,
            splits,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.graphs.len() {
            return Err(Error::Dataset(format!(
                "{} split entries for {} graphs",
                self.splits.len(),
                self.graphs.len()
            )));
        }
        let d = self.graphs.first().map(|g| g.num_features());
        for (i, g) in self.graphs.iter().enumerate() {
            g.validate().map_err(|e| Error::Dataset(format!("graph {i}: {e}")))?;
            match g.y {
                None => return Err(Error::Dataset(format!("graph {i} has no label"))),
                Some(y) if y >= self.num_classes => {
                    return Err(Error::Dataset(format!(
                        "graph {i}: label {y} out of range for {} classes",
                        self.num_classes
                    )))
                }
                _ => {}
            }
            if Some(g.num_features()) != d {
                return Err(Error::Dataset(format!(
                    "graph {i}: feature dimension differs from graph 0"
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.y.expect("validated label")).collect()
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        indices_of(&self.splits, which)
    }

    pub fn num_features(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.num_features())
    }
}

/// Either kind of task, as loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Node(NodeTask),
    Graph(GraphTask),
}

impl Dataset {
    pub fn num_features(&self) -> usize {
        match self {
            Dataset::Node(t) => t.graph.num_features(),
            Dataset::Graph(t) => t.num_features(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Dataset::Node(t) => t.num_classes,
            Dataset::Graph(t) => t.num_classes,
        }
    }

    pub fn is_graph_level(&self) -> bool {
        matches!(self, Dataset::Graph(_))
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        match self {
            Dataset::Node(t) => t.split_indices(which),
            Dataset::Graph(t) => t.split_indices(which),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        match self {
            Dataset::Node(t) => t.labels.clone(),
            Dataset::Graph(t) => t.labels(),
        }
    }
}

/// Table-style shape summary: graphs, nodes, edges, features, classes.
///
/// For node datasets the edge column counts stored edge lines. For graph
/// datasets the per-graph columns print a single value when every graph
/// agrees and `min-max` otherwise.
pub fn summary_line(ds: &Dataset) -> String {
    match ds {
        Dataset::Node(t) => format!(
            "1 {} {} {} {}",
            t.graph.num_nodes,
            t.graph.edges.len(),
            t.graph.num_features(),
            t.num_classes
        ),
        Dataset::Graph(t) => {
            let span = |vals: Vec<usize>| {
                let lo = vals.iter().copied().min().unwrap_or(0);
                let hi = vals.iter().copied().max().unwrap_or(0);
                if lo == hi {
                    lo.to_string()
                } else {
                    format!("{lo}-{hi}")
                }
            };
            format!(
                "{} {} {} {} {}",
                t.graphs.len(),
                span(t.graphs.iter().map(|g| g.num_nodes).collect()),
                span(t.graphs.iter().map(|g| g.edges.len()).collect()),
                t.num_features(),
                t.num_classes
            )
        }
    }
}
