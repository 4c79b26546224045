use std::borrow::Borrow;

use super::Graph;
use crate::autodiff::{Reduce, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Block-diagonal union of several graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub num_nodes: usize,
    /// Edges with node ids offset by the running node count.
    pub edges: Vec<(usize, usize)>,
    pub x: Tensor,
    /// Source graph of every merged node, nondecreasing.
    pub graph_index: Vec<usize>,
    pub num_graphs: usize,
}

pub fn batch_graphs<G: Borrow<Graph>>(graphs: &[G]) -> Result<GraphBatch> {
    let Some(first) = graphs.first() else {
        return Err(Error::Dataset("cannot batch zero graphs".into()));
    };
    let d = first.borrow().num_features();
    let total: usize = graphs.iter().map(|g| g.borrow().num_nodes).sum();
    let mut data = Vec::with_capacity(total * d);
    let mut edges = Vec::new();
    let mut graph_index = Vec::with_capacity(total);
    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        let g = g.borrow();
        if g.num_features() != d {
            return Err(Error::shape(
                "batch_graphs",
                format!("feature dimension {d}"),
                format!("{} in graph {gi}", g.num_features()),
            ));
        }
        edges.extend(g.edges.iter().map(|&(u, v)| (u + offset, v + offset)));
        data.extend_from_slice(g.x.data());
        graph_index.extend(std::iter::repeat_n(gi, g.num_nodes));
        offset += g.num_nodes;
    }
    Ok(GraphBatch {
        num_nodes: total,
        edges,
        x: Tensor::new(total, d, data)?,
        graph_index,
        num_graphs: graphs.len(),
    })
}

/// Pools node rows into one row per graph. A graph with no rows is an error.
pub fn readout(tape: &mut Tape, h: Var, graph_index: &[usize], num_graphs: usize, mode: Reduce) -> Result<Var> {
    tape.segment_reduce(h, graph_index, num_graphs, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: usize, edges: Vec<(usize, usize)>, fill: f64) -> Graph {
        Graph::new(n, edges, Tensor::filled(n, 2, fill), Some(0)).unwrap()
    }

    #[test]
    fn single_graph_batch_is_identity() {
        let a = g(3, vec![(0, 1), (1, 2)], 1.5);
        let b = batch_graphs(&[&a]).unwrap();
        assert_eq!(b.edges, a.edges);
        assert_eq!(b.x, a.x);
        assert_eq!(b.graph_index, vec![0, 0, 0]);
    }

    #[test]
    fn two_graphs_offset_edges() {
        let b = batch_graphs(&[g(2, vec![(0, 1), (1, 0)], 1.0), g(2, vec![(0, 1), (1, 0)], 2.0)]).unwrap();
        assert_eq!(b.num_nodes, 4);
        assert_eq!(b.edges, vec![(0, 1), (1, 0), (2, 3), (3, 2)]);
        assert_eq!(b.graph_index, vec![0, 0, 1, 1]);
        assert_eq!(b.x.row(2), &[2.0, 2.0]);
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let a = g(1, vec![], 0.0);
        let b = Graph::new(1, vec![], Tensor::ones(1, 3), None).unwrap();
        assert!(batch_graphs(&[&a, &b]).is_err());
    }

    #[test]
    fn readout_modes() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[[1.0], [3.0]]).unwrap());
        for (mode, want) in [(Reduce::Mean, 2.0), (Reduce::Sum, 4.0), (Reduce::Max, 3.0)] {
            let r = readout(&mut tape, h, &[0, 0], 1, mode).unwrap();
            assert_eq!(tape.value(r).data(), &[want]);
        }
        let single = tape.constant(Tensor::from_rows(&[[-2.0, 5.0]]).unwrap());
        for mode in [Reduce::Mean, Reduce::Sum, Reduce::Max] {
            let r = readout(&mut tape, single, &[0], 1, mode).unwrap();
            assert_eq!(tape.value(r).data(), &[-2.0, 5.0]);
        }
        assert!(readout(&mut tape, h, &[0, 0], 2, Reduce::Mean).is_err());
    }

    #[test]
    fn mean_readout_gradient_is_uniform() {
        let mut tape = Tape::new();
        let h = tape.param(Tensor::from_rows(&[[1.0], [-2.0], [0.5], [4.0]]).unwrap());
        let r = readout(&mut tape, h, &[0; 4], 1, Reduce::Mean).unwrap();
        let loss = tape.sum(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(h).unwrap().data(), &[0.25; 4]);
    }
}
