use rand_chacha::ChaCha8Rng;

use super::params::{BufferId, ParamId, ParamStore, Session};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Stage {
    w: ParamId,
    b: ParamId,
    bn: Option<(ParamId, ParamId, BufferId)>,
}

/// Affine stages with optional batch normalization and ReLU between them.
/// The last stage is linear.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    stages: Vec<Stage>,
    dims: Vec<usize>,
}

impl MlpBlock {
    /// `dims` lists the widths `d_0 → d_1 → … → d_m`, giving `m` stages.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        batch_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weights = dims
            .windows(2)
            .map(|w| (Tensor::glorot_uniform(w[0], w[1], rng), Tensor::zeros(1, w[1])))
            .collect();
        Self::from_weights(store, name, weights, batch_norm)
    }

    /// Builds a block from explicit `(W, b)` pairs.
    pub fn from_weights(
        store: &mut ParamStore,
        name: &str,
        weights: Vec<(Tensor, Tensor)>,
        batch_norm: bool,
    ) -> Result<Self> {
        let Some(first) = weights.first() else {
            return Err(Error::Config(format!("{name}: MLP needs at least one stage")));
        };
        let mut dims = vec![first.0.rows()];
        let last = weights.len() - 1;
        let mut stages = Vec::with_capacity(weights.len());
        for (i, (w, b)) in weights.into_iter().enumerate() {
            if w.rows() != *dims.last().unwrap() || b.shape() != (1, w.cols()) {
                return Err(Error::shape(
                    "mlp",
                    format!("stage {i} chaining from width {}", dims.last().unwrap()),
                    format!("W {:?}, b {:?}", w.shape(), b.shape()),
                ));
            }
            let cols = w.cols();
            dims.push(cols);
            let w = store.add(format!("{name}.{i}.w"), w);
            let b = store.add(format!("{name}.{i}.b"), b);
            let bn = (batch_norm && i < last).then(|| {
                (
                    store.add(format!("{name}.{i}.bn_gamma"), Tensor::ones(1, cols)),
                    store.add(format!("{name}.{i}.bn_beta"), Tensor::zeros(1, cols)),
                    store.add_bn(cols),
                )
            });
            stages.push(Stage { w, b, bn });
        }
        Ok(MlpBlock { stages, dims })
    }

    /// A block with no stages: forward returns its input.
    pub fn identity() -> Self {
        MlpBlock {
            stages: Vec::new(),
            dims: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.stages.len().saturating_sub(1);
        for (i, st) in self.stages.iter().enumerate() {
            let w = s.param(st.w);
            let b = s.param(st.b);
            h = s.tape.matmul(h, w)?;
            h = s.tape.add(h, b)?;
            if i < last {
                if let Some((gamma, beta, buf)) = st.bn {
                    h = s.batch_norm(h, gamma, beta, buf)?;
                }
                h = s.tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
