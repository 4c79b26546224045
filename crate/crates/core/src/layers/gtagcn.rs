use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::mlp::MlpBlock;
use super::params::{ParamId, ParamStore, Session};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// `MLP( Σ_{k=0..K} ReLU(Â^k H W + ε) )`.
///
/// One `W` is shared by all powers unless the layer was built with
/// per-power weights, in which case power `k` uses its own `W_k`.
#[derive(Clone, Debug)]
pub struct GtagcnLayer {
    k: usize,
    weights: Vec<ParamId>,
    epsilon: f64,
    mlp: MlpBlock,
}

impl GtagcnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        k: usize,
        epsilon: f64,
        per_power_weights: bool,
        mlp_dims: &[usize],
        mlp_batch_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let count = if per_power_weights { k + 1 } else { 1 };
        let weights = (0..count).map(|_| Tensor::glorot_uniform(d_in, d_out, rng)).collect();
        let mut layer = Self::from_weights(store, name, k, epsilon, weights, MlpBlock::identity())?;
        if mlp_dims.len() >= 2 {
            if mlp_dims[0] != d_out {
                return Err(Error::Config(format!(
                    "{name}: MLP input width {} differs from layer width {d_out}",
                    mlp_dims[0]
                )));
            }
            layer.mlp = MlpBlock::new(store, &format!("{name}.mlp"), mlp_dims, mlp_batch_norm, rng)?;
        }
        Ok(layer)
    }

    /// Builds a layer from explicit weights: one matrix (shared) or `K + 1`.
    pub fn from_weights(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        epsilon: f64,
        weights: Vec<Tensor>,
        mlp: MlpBlock,
    ) -> Result<Self> {
        if epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "{name}: epsilon must be positive, got {epsilon}"
            )));
        }
        if weights.len() != 1 && weights.len() != k + 1 {
            return Err(Error::Config(format!(
                "{name}: expected 1 or {} weight matrices, got {}",
                k + 1,
                weights.len()
            )));
        }
        let shape = weights[0].shape();
        if weights.iter().any(|w| w.shape() != shape) {
            return Err(Error::Config(format!("{name}: weight matrices differ in shape")));
        }
        let weights = weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| store.add(format!("{name}.w{i}"), w))
            .collect();
        Ok(GtagcnLayer {
            k,
            weights,
            epsilon,
            mlp,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shares_weights(&self) -> bool {
        self.weights.len() == 1
    }

    /// The rectified power sum before the MLP.
    pub fn pre_mlp(&self, s: &mut Session, adj: &Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let terms = if self.shares_weights() {
            // Â^k (H W) needs only d_out-wide sparse products.
            let z = s.tape.matmul(h, s.param(self.weights[0]))?;
            s.tape.power_apply(adj, z, self.k)?
        } else {
            let powers = s.tape.power_apply(adj, h, self.k)?;
            let mut terms = Vec::with_capacity(powers.len());
            for (p, &w) in powers.into_iter().zip(&self.weights) {
                terms.push(s.tape.matmul(p, s.param(w))?);
            }
            terms
        };
        let mut acc: Option<Var> = None;
        for t in terms {
            let shifted = s.tape.add_scalar(t, self.epsilon)?;
            let r = s.tape.relu(shifted)?;
            acc = Some(match acc {
                None => r,
                Some(a) => s.tape.add(a, r)?,
            });
        }
        Ok(acc.expect("K + 1 >= 1 terms"))
    }

    pub fn forward(&self, s: &mut Session, adj: &Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let pre = self.pre_mlp(s, adj, h)?;
        self.mlp.forward(s, pre)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::layers::test_support::{dense_normalized, random_graph};
    use crate::sparse::normalized_adjacency;

    fn run(layer: &GtagcnLayer, store: &mut ParamStore, adj: &Arc<CsrMatrix>, h: Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = store.session(&mut tape, false, &mut rng);
        let hv = s.tape.constant(h);
        let pre = layer.pre_mlp(&mut s, adj, hv).unwrap();
        let out = layer.forward(&mut s, adj, hv).unwrap();
        (s.tape.value(pre).clone(), s.tape.value(out).clone())
    }

    #[test]
    fn k0_identity_is_shifted_relu() {
        let mut store = ParamStore::new();
        let layer = GtagcnLayer::from_weights(
            &mut store,
            "g",
            0,
            1e-7,
            vec![Tensor::identity(2)],
            MlpBlock::identity(),
        )
        .unwrap();
        let adj = Arc::new(CsrMatrix::identity(1));
        let (_, out) = run(&layer, &mut store, &adj, Tensor::from_rows(&[[1.0, -2.0]]).unwrap());
        assert_eq!(out.data(), &[1.0 + 1e-7, 0.0]);
    }

    #[test]
    fn k1_on_edgeless_graph_adds_epsilon() {
        let eps = 1e-7;
        let mut store = ParamStore::new();
        let w = Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25]]).unwrap();
        let layer = GtagcnLayer::from_weights(&mut store, "g", 1, eps, vec![w.clone()], MlpBlock::identity()).unwrap();
        let a = CsrMatrix::from_edges(3, &[], true).unwrap();
        let adj = Arc::new(normalized_adjacency(&a, false).unwrap());
        let h = Tensor::from_rows(&[[1.0, 2.0], [-1.0, 0.0], [0.0, -3.0]]).unwrap();
        let (_, out) = run(&layer, &mut store, &adj, h.clone());
        let want = h.matmul(&w).unwrap().map(|v| (v + eps).max(0.0) + eps);
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn matches_dense_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, edges) = random_graph(6, 0.5, &mut rng);
        let a = CsrMatrix::from_edges(n, &edges, true).unwrap();
        let adj = Arc::new(normalized_adjacency(&a, false).unwrap());
        let dense = dense_normalized(n, &edges, false);
        let h = Tensor::glorot_uniform(n, 3, &mut rng);
        for per_power in [false, true] {
            let mut store = ParamStore::new();
            let k = 2;
            let ws: Vec<Tensor> = (0..if per_power { k + 1 } else { 1 })
                .map(|_| Tensor::glorot_uniform(3, 4, &mut rng))
                .collect();
            let layer = GtagcnLayer::from_weights(&mut store, "g", k, 1e-7, ws.clone(), MlpBlock::identity()).unwrap();
            let (_, out) = run(&layer, &mut store, &adj, h.clone());
            let mut want = Tensor::zeros(n, 4);
            let mut ak = Tensor::identity(n);
            for i in 0..=k {
                let w = &ws[if per_power { i } else { 0 }];
                let term = ak.matmul(&h).unwrap().matmul(w).unwrap().map(|v| (v + 1e-7).max(0.0));
                want = Tensor::new(n, 4, want.data().iter().zip(term.data()).map(|(a, b)| a + b).collect()).unwrap();
                ak = ak.matmul(&dense).unwrap();
            }
            assert!(out.max_abs_diff(&want) < 1e-10, "per_power={per_power}");
        }
    }

    #[test]
    fn zero_projection_sums_epsilons() {
        let mut store = ParamStore::new();
        let k = 6;
        let layer = GtagcnLayer::from_weights(
            &mut store,
            "g",
            k,
            1e-7,
            vec![Tensor::zeros(2, 3)],
            MlpBlock::identity(),
        )
        .unwrap();
        let a = CsrMatrix::from_edges(4, &[(0, 1), (1, 2), (2, 3)], true).unwrap();
        let adj = Arc::new(normalized_adjacency(&a, false).unwrap());
        let (pre, _) = run(&layer, &mut store, &adj, Tensor::ones(4, 2));
        assert!(pre.data().iter().all(|&v| (v - 7e-7).abs() < 1e-20));
    }

    #[test]
    fn rejects_bad_configuration() {
        let mut store = ParamStore::new();
        assert!(
            GtagcnLayer::from_weights(&mut store, "g", 1, 0.0, vec![Tensor::zeros(1, 1)], MlpBlock::identity())
                .is_err()
        );
        let two = vec![Tensor::zeros(1, 1), Tensor::zeros(1, 1)];
        assert!(GtagcnLayer::from_weights(&mut store, "g", 3, 1e-7, two, MlpBlock::identity()).is_err());
    }

    #[test]
    fn gradient_through_full_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, edges) = random_graph(7, 0.4, &mut rng);
        let a = CsrMatrix::from_edges(n, &edges, true).unwrap();
        let adj = Arc::new(normalized_adjacency(&a, false).unwrap());
        let mut store = ParamStore::new();
        let layer = GtagcnLayer::new(&mut store, "g", 3, 4, 6, 1e-7, false, &[4, 4, 4], true, &mut rng).unwrap();
        let mut inputs = store.tensors().to_vec();
        inputs.push(Tensor::glorot_uniform(n, 3, &mut rng));
        let buffers = store.buffers().to_vec();
        let report = grad_check(
            |tape, vars| {
                let mut bufs = buffers.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (params, x) = vars.split_at(vars.len() - 1);
                let mut s = Session::with_vars(tape, params.to_vec(), &mut bufs, true, &mut rng);
                let y = layer.forward(&mut s, &adj, x[0])?;
                let sq = s.tape.mul(y, y)?;
                s.tape.sum(sq)
            },
            &inputs,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
