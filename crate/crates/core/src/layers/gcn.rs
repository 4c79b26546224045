use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, Session};
use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::sparse::CsrMatrix;

/// `σ(Â H W)`; the activation is skipped when `activate` is false.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    w: ParamId,
    activate: bool,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        activate: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::from_weights(store, name, Tensor::glorot_uniform(d_in, d_out, rng), activate)
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, w: Tensor, activate: bool) -> Self {
        GcnLayer {
            w: store.add(format!("{name}.w"), w),
            activate,
        }
    }

    pub fn forward(&self, s: &mut Session, adj: &Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let hw = s.tape.matmul(h, s.param(self.w))?;
        let out = s.tape.spmm(adj, hw)?;
        if self.activate {
            s.tape.relu(out)
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::sparse::normalized_adjacency;

    fn run(layers: &[GcnLayer], store: &mut ParamStore, adj: &Arc<CsrMatrix>, h: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = store.session(&mut tape, false, &mut rng);
        let mut v = s.tape.constant(h);
        for l in layers {
            v = l.forward(&mut s, adj, v).unwrap();
        }
        s.tape.value(v).clone()
    }

    #[test]
    fn single_self_looped_node() {
        let mut store = ParamStore::new();
        let layer = GcnLayer::from_weights(&mut store, "c", Tensor::scalar(3.0), true);
        let a = CsrMatrix::from_edges(1, &[], true).unwrap();
        let adj = Arc::new(normalized_adjacency(&a, true).unwrap());
        assert_eq!(run(&[layer], &mut store, &adj, Tensor::scalar(2.0)).data(), &[6.0]);
    }

    #[test]
    fn zero_weight_gives_zero() {
        let mut store = ParamStore::new();
        let layer = GcnLayer::from_weights(&mut store, "c", Tensor::zeros(2, 3), true);
        let adj = Arc::new(CsrMatrix::identity(2));
        assert_eq!(run(&[layer], &mut store, &adj, Tensor::ones(2, 2)), Tensor::zeros(2, 3));
    }

    #[test]
    fn two_layers_on_three_node_path() {
        // Degrees with self-loops are 2, 3, 2.
        let (a, b, c) = (1.0 / 2.0, 1.0 / 6f64.sqrt(), 1.0 / 3.0);
        let dense = Tensor::from_rows(&[[a, b, 0.0], [b, c, b], [0.0, b, a]]).unwrap();
        let h = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]).unwrap();
        let w1 = Tensor::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap();
        let w2 = Tensor::from_rows(&[[1.0], [-0.5]]).unwrap();
        let hidden = dense.matmul(&h).unwrap().matmul(&w1).unwrap().map(|v| v.max(0.0));
        let want = dense.matmul(&hidden).unwrap().matmul(&w2).unwrap();

        let mut store = ParamStore::new();
        let l1 = GcnLayer::from_weights(&mut store, "c1", w1, true);
        let l2 = GcnLayer::from_weights(&mut store, "c2", w2, false);
        let adj = CsrMatrix::from_edges(3, &[(0, 1), (1, 2)], true).unwrap();
        let adj = Arc::new(normalized_adjacency(&adj, true).unwrap());
        let out = run(&[l1, l2], &mut store, &adj, h);
        assert!(out.max_abs_diff(&want) < 1e-12);
    }
}
