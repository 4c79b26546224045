use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::MlpBlock;
use super::params::{ParamId, ParamStore, Session};
use crate::autodiff::{Reduce, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Neighbor-message aggregation rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Aggregation {
    Softmax { beta: f64 },
    PowerMean { p: f64 },
    Mean,
    Max,
}

impl Aggregation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Aggregation::PowerMean { p } if p == 0.0 || !p.is_finite() => Err(Error::Config(format!(
                "power-mean exponent must be finite and nonzero, got {p}"
            ))),
            Aggregation::Softmax { beta } if !beta.is_finite() => {
                Err(Error::Config(format!("softmax temperature must be finite, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    /// Aggregates the rows of `messages` per segment.
    pub fn apply(&self, tape: &mut Tape, messages: Var, segments: &[usize], count: usize) -> Result<Var> {
        match *self {
            Aggregation::Softmax { beta } => tape.segment_softmax_aggregate(messages, segments, count, beta),
            Aggregation::PowerMean { p } => tape.segment_powermean_aggregate(messages, segments, count, p),
            Aggregation::Mean => tape.segment_reduce(messages, segments, count, Reduce::Mean),
            Aggregation::Max => tape.segment_reduce(messages, segments, count, Reduce::Max),
        }
    }
}

/// `ReLU(h_u + h_e) + ε`, with `h_e` omitted when absent.
pub fn gen_message(h_u: &[f64], h_e: Option<&[f64]>, epsilon: f64) -> Result<Vec<f64>> {
    if let Some(e) = h_e {
        if e.len() != h_u.len() {
            return Err(Error::shape(
                "gen_message",
                format!("{} entries", h_u.len()),
                format!("{}", e.len()),
            ));
        }
    }
    Ok(h_u
        .iter()
        .enumerate()
        .map(|(i, &v)| (v + h_e.map_or(0.0, |e| e[i])).max(0.0) + epsilon)
        .collect())
}

fn aggregate_rows(messages: &[Vec<f64>], agg: Aggregation) -> Result<Vec<f64>> {
    if messages.is_empty() {
        return Err(Error::invalid("aggregate", "empty message set"));
    }
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::from_rows(messages)?);
    let out = agg.apply(&mut tape, m, &vec![0; messages.len()], 1)?;
    Ok(tape.value(out).data().to_vec())
}

/// Per-coordinate `Σ_u softmax_u(β m) · m_u` over a nonempty message set.
pub fn softmax_aggregate(messages: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    aggregate_rows(messages, Aggregation::Softmax { beta })
}

/// Per-coordinate `(mean_u m_u^p)^(1/p)` over strictly positive messages.
pub fn powermean_aggregate(messages: &[Vec<f64>], p: f64) -> Result<Vec<f64>> {
    aggregate_rows(messages, Aggregation::PowerMean { p })
}

/// `MLP( h + s·‖h‖·m/‖m‖ )` row by row. A zero-norm message row is an error.
pub fn message_norm_update(s: &mut Session, h: Var, m: Var, scale: f64, mlp: &MlpBlock) -> Result<Var> {
    if let Some(i) = (0..s.tape.value(m).rows()).find(|&i| s.tape.value(m).row(i).iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid("message_norm", format!("message row {i} has zero norm")));
    }
    let h_norm = s.tape.row_norm(h)?;
    let m_norm = s.tape.row_norm(m)?;
    let inv = s.tape.recip(m_norm)?;
    let unit = s.tape.mul_col(m, inv)?;
    let scaled = s.tape.mul_col(unit, h_norm)?;
    let scaled = s.tape.scale(scaled, scale)?;
    let updated = s.tape.add(h, scaled)?;
    mlp.forward(s, updated)
}

/// GTAGCN with the power sum replaced by a GEN aggregation over the `K + 1`
/// hop messages of each node.
///
/// Messages are `ReLU(Â^k H W) + ε`. With message normalization the
/// aggregate `m` is combined with `Z = H W` as `Z + s·‖Z‖·m/‖m‖` before the
/// MLP.
#[derive(Clone, Debug)]
pub struct GenGtagcnLayer {
    k: usize,
    w: ParamId,
    epsilon: f64,
    aggregation: Aggregation,
    message_norm: Option<f64>,
    mlp: MlpBlock,
}

impl GenGtagcnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        k: usize,
        epsilon: f64,
        aggregation: Aggregation,
        message_norm: Option<f64>,
        mlp_dims: &[usize],
        mlp_batch_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        aggregation.validate()?;
        if epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "{name}: epsilon must be positive, got {epsilon}"
            )));
        }
        let w = store.add(format!("{name}.w0"), Tensor::glorot_uniform(d_in, d_out, rng));
        let mlp = if mlp_dims.len() >= 2 {
            MlpBlock::new(store, &format!("{name}.mlp"), mlp_dims, mlp_batch_norm, rng)?
        } else {
            MlpBlock::identity()
        };
        Ok(GenGtagcnLayer {
            k,
            w,
            epsilon,
            aggregation,
            message_norm,
            mlp,
        })
    }

    pub fn forward(&self, s: &mut Session, adj: &Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let z = s.tape.matmul(h, s.param(self.w))?;
        let n = s.tape.value(z).rows();
        let mut messages = Vec::with_capacity(self.k + 1);
        for p in s.tape.power_apply(adj, z, self.k)? {
            let r = s.tape.relu(p)?;
            messages.push(s.tape.add_scalar(r, self.epsilon)?);
        }
        let stacked = s.tape.vstack(&messages)?;
        let segments: Vec<usize> = (0..=self.k).flat_map(|_| 0..n).collect();
        let m = self.aggregation.apply(s.tape, stacked, &segments, n)?;
        match self.message_norm {
            Some(scale) => message_norm_update(s, z, m, scale, &self.mlp),
            None => self.mlp.forward(s, m),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::sparse::normalized_adjacency;

    #[test]
    fn message_examples() {
        assert_eq!(gen_message(&[1.0, -1.0], None, 1e-7).unwrap(), vec![1.0 + 1e-7, 1e-7]);
        assert_eq!(gen_message(&[1.0], Some(&[2.0]), 0.0).unwrap(), vec![3.0]);
        assert!(gen_message(&[1.0], Some(&[2.0, 3.0]), 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let m = vec![vec![1.0], vec![3.0]];
        assert!((softmax_aggregate(&m, 0.0).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!((softmax_aggregate(&m, 100.0).unwrap()[0] - 3.0).abs() < 1e-8);
        assert_eq!(softmax_aggregate(&[vec![0.7, -2.0]], 5.0).unwrap(), vec![0.7, -2.0]);
        assert!(softmax_aggregate(&[], 1.0).is_err());
    }

    #[test]
    fn powermean_examples() {
        let m = vec![vec![1.0], vec![3.0]];
        assert!((powermean_aggregate(&m, 1.0).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!((powermean_aggregate(&m, 2.0).unwrap()[0] - 5f64.sqrt()).abs() < 1e-15);
        assert!((powermean_aggregate(&m, -1.0).unwrap()[0] - 1.5).abs() < 1e-15);
        assert!(powermean_aggregate(&m, 0.0).is_err());
        assert!(powermean_aggregate(&[vec![1.0], vec![0.0]], 1.0).is_err());
    }

    fn norm_update(h: &[f64], m: &[f64], scale: f64) -> Result<Vec<f64>> {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = store.session(&mut tape, false, &mut rng);
        let hv = s.tape.constant(Tensor::row_vector(h.to_vec()));
        let mv = s.tape.constant(Tensor::row_vector(m.to_vec()));
        let out = message_norm_update(&mut s, hv, mv, scale, &MlpBlock::identity())?;
        Ok(s.tape.value(out).data().to_vec())
    }

    #[test]
    fn message_norm_examples() {
        assert_eq!(norm_update(&[3.0, 4.0], &[0.5, 2.0], 0.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(norm_update(&[3.0, 4.0], &[0.0, 1.0], 1.0).unwrap(), vec![3.0, 9.0]);
        let a = norm_update(&[1.0, -2.0], &[0.3, 0.4], 0.7).unwrap();
        let b = norm_update(&[1.0, -2.0], &[3.0, 4.0], 0.7).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(norm_update(&[1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn gen_gtagcn_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = CsrMatrix::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)], true).unwrap();
        let adj = Arc::new(normalized_adjacency(&a, false).unwrap());
        for (agg, norm) in [
            (Aggregation::Softmax { beta: 1.5 }, None),
            (Aggregation::PowerMean { p: 2.0 }, Some(1.0)),
        ] {
            let mut store = ParamStore::new();
            let layer =
                GenGtagcnLayer::new(&mut store, "g", 3, 4, 3, 1e-7, agg, norm, &[4, 4, 4], false, &mut rng).unwrap();
            let mut inputs = store.tensors().to_vec();
            inputs.push(Tensor::glorot_uniform(5, 3, &mut rng));
            let report = grad_check(
                |tape, vars| {
                    let mut bufs = Vec::new();
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let (params, x) = vars.split_at(vars.len() - 1);
                    let mut s = Session::with_vars(tape, params.to_vec(), &mut bufs, false, &mut rng);
                    let y = layer.forward(&mut s, &adj, x[0])?;
                    let sq = s.tape.mul(y, y)?;
                    s.tape.sum(sq)
                },
                &inputs,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{agg:?}: {report:?}");
        }
    }
}
