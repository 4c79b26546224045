use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, Session};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// `ReLU( Σ_{k=0..K} Â^k H G_k + 1·b )` with one full matrix per power.
#[derive(Clone, Debug)]
pub struct TagcnLayer {
    g: Vec<ParamId>,
    b: ParamId,
}

impl TagcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = (0..=k).map(|_| Tensor::glorot_uniform(d_in, d_out, rng)).collect();
        Self::from_weights(store, name, g, Tensor::zeros(1, d_out))
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, g: Vec<Tensor>, b: Tensor) -> Result<Self> {
        let Some(first) = g.first() else {
            return Err(Error::Config(format!("{name}: need K + 1 >= 1 filter matrices")));
        };
        let shape = first.shape();
        if g.iter().any(|m| m.shape() != shape) || b.shape() != (1, shape.1) {
            return Err(Error::Config(format!(
                "{name}: filter matrices or bias differ in shape"
            )));
        }
        let g = g
            .into_iter()
            .enumerate()
            .map(|(i, m)| store.add(format!("{name}.g{i}"), m))
            .collect();
        let b = store.add(format!("{name}.b"), b);
        Ok(TagcnLayer { g, b })
    }

    pub fn k(&self) -> usize {
        self.g.len() - 1
    }

    pub fn forward(&self, s: &mut Session, adj: &Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let powers = s.tape.power_apply(adj, h, self.k())?;
        let mut acc: Option<Var> = None;
        for (p, &g) in powers.into_iter().zip(&self.g) {
            let t = s.tape.matmul(p, s.param(g))?;
            acc = Some(match acc {
                None => t,
                Some(a) => s.tape.add(a, t)?,
            });
        }
        let biased = s.tape.add(acc.expect("K + 1 >= 1 terms"), s.param(self.b))?;
        s.tape.relu(biased)
    }
}
