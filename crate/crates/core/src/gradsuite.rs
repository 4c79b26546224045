//! Finite-difference audit of every differentiable op, layer and model
//! assembly in the crate.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Reduce, Tape, Tensor, Var};
use crate::data::{batch_graphs, Graph};
use crate::error::Result;
use crate::layers::{Aggregation, GcnLayer, GenGtagcnLayer, GtagcnLayer, MlpBlock, ParamStore, Session, TagcnLayer};
use crate::model::{build_model, ModelConfig, ModelInput, Operator};
use crate::sparse::{normalized_adjacency, CsrMatrix};

pub const TOLERANCE: f64 = 1e-4;

/// Deliberate bugs used to prove that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// ReLU whose backward pass is the identity.
    Relu,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passes(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> &CheckResult {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("suite has checks")
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results
            .iter()
            .filter(|r| r.max_rel_err >= self.tolerance)
            .collect()
    }

    /// One line per check: name, worst relative error, verdict.
    pub fn table(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.results {
            let verdict = if r.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(out, "{:width$}  {:.3e}  {verdict}", r.name, r.max_rel_err).unwrap();
        }
        out
    }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("sized data")
}

/// Random entries bounded away from zero, so kinks stay out of the
/// finite-difference stencil.
fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(rows, cols, -1.0, 1.0, rng).map(|v| v.signum() * (0.1 + v.abs()))
}

/// `sum(y ⊙ R)` with a fixed random `R`, giving every output entry a
/// distinct weight.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let (r, c) = tape.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let w = tape.constant(uniform(r, c, -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn relu(tape: &mut Tape, x: Var, fault: Option<Fault>) -> Result<Var> {
    let r = tape.relu(x)?;
    if fault != Some(Fault::Relu) {
        return Ok(r);
    }
    // Same forward value, but the gradient flows through x unchanged.
    let neg = tape.scale(x, -1.0)?;
    let diff = tape.add(r, neg)?;
    let frozen = tape.detach(diff);
    tape.add(x, frozen)
}

fn graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    // Keep every node attached so segment ops see nonempty neighborhoods.
    for i in 1..n {
        if !edges.iter().any(|&(a, b)| a == i || b == i) {
            edges.push((i - 1, i));
        }
    }
    edges
}

fn adjacency(n: usize, rng: &mut ChaCha8Rng) -> Result<Arc<CsrMatrix>> {
    let a = CsrMatrix::from_edges(n, &graph(n, 0.4, rng), true)?;
    Ok(Arc::new(normalized_adjacency(&a, true)?))
}

/// Gradient check of a layer or model whose parameters live in `store`,
/// with one extra input `x`.
fn check_params<F>(store: &ParamStore, x: Option<Tensor>, f: F) -> Result<f64>
where
    F: Fn(&mut Session, Option<Var>) -> Result<Var>,
{
    let mut inputs = store.tensors().to_vec();
    let has_x = x.is_some();
    inputs.extend(x);
    let buffers = store.buffers().to_vec();
    let report = grad_check(
        |tape, vars| {
            let mut bufs = buffers.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let (params, x) = if has_x {
                vars.split_at(vars.len() - 1)
            } else {
                (vars, &[][..])
            };
            let mut s = Session::with_vars(tape, params.to_vec(), &mut bufs, true, &mut rng);
            let y = f(&mut s, x.first().copied())?;
            project(s.tape, y)
        },
        &inputs,
    )?;
    Ok(report.max_rel_err)
}

type OpCheck = fn(&mut ChaCha8Rng, Option<Fault>) -> Result<f64>;

fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("matmul", |rng, _| {
            let ins = [uniform(3, 4, -1.0, 1.0, rng), uniform(4, 2, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("add", |rng, _| {
            let ins = [uniform(3, 4, -1.0, 1.0, rng), uniform(1, 4, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("add_scalar", |rng, _| {
            let ins = [uniform(3, 2, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.add_scalar(v[0], 0.7)?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("scale", |rng, _| {
            let ins = [uniform(3, 2, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.scale(v[0], -1.3)?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("mul", |rng, _| {
            let ins = [uniform(3, 3, -1.0, 1.0, rng), uniform(3, 3, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("relu", |rng, fault| {
            let ins = [away_from_zero(4, 3, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = relu(t, v[0], fault)?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("dropout", |rng, _| {
            let ins = [uniform(5, 4, -1.0, 1.0, rng)];
            let f = |t: &mut Tape, v: &[Var]| {
                let mut r = ChaCha8Rng::seed_from_u64(9);
                let y = t.dropout(v[0], 0.5, true, &mut r)?;
                project(t, y)
            };
            Ok(grad_check(f, &ins)?.max_rel_err)
        }),
        ("batch_norm", |rng, _| {
            let ins = [
                uniform(6, 3, -1.0, 1.0, rng),
                uniform(1, 3, 0.5, 1.5, rng),
                uniform(1, 3, -0.5, 0.5, rng),
            ];
            let f = |t: &mut Tape, v: &[Var]| {
                let mut st = crate::autodiff::BnState::new(3);
                let y = t.batch_norm(v[0], v[1], v[2], &mut st, true)?;
                project(t, y)
            };
            Ok(grad_check(f, &ins)?.max_rel_err)
        }),
        ("log_softmax", |rng, _| {
            let ins = [uniform(4, 5, -2.0, 2.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.log_softmax(v[0])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("nll_masked", |rng, _| {
            let ins = [uniform(5, 3, -2.0, 2.0, rng)];
            let f = |t: &mut Tape, v: &[Var]| {
                let lp = t.log_softmax(v[0])?;
                t.nll_masked(lp, &[0, 2, 1, 1, 0], &[0, 1, 3])
            };
            Ok(grad_check(f, &ins)?.max_rel_err)
        }),
        ("spmm", |rng, _| {
            let adj = adjacency(6, rng)?;
            let ins = [uniform(6, 3, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.spmm(&adj, v[0])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("power_apply", |rng, _| {
            let adj = adjacency(6, rng)?;
            let ins = [uniform(6, 3, -1.0, 1.0, rng)];
            let f = |t: &mut Tape, v: &[Var]| {
                let powers = t.power_apply(&adj, v[0], 4)?;
                let all = t.vstack(&powers)?;
                project(t, all)
            };
            Ok(grad_check(f, &ins)?.max_rel_err)
        }),
        ("segment_reduce", |rng, _| {
            let ins = [uniform(7, 3, -1.0, 1.0, rng)];
            let segs = [0, 1, 0, 2, 2, 1, 0];
            let f = |t: &mut Tape, v: &[Var]| {
                let parts = [Reduce::Mean, Reduce::Sum, Reduce::Max]
                    .into_iter()
                    .map(|m| t.segment_reduce(v[0], &segs, 3, m))
                    .collect::<Result<Vec<_>>>()?;
                let all = t.vstack(&parts)?;
                project(t, all)
            };
            Ok(grad_check(f, &ins)?.max_rel_err)
        }),
        ("softmax_aggregate", |rng, _| {
            let ins = [uniform(7, 3, -1.0, 1.0, rng)];
            let segs = [0, 1, 0, 2, 2, 1, 0];
            let f = |t: &mut Tape, v: &[Var]| {
                let y = t.segment_softmax_aggregate(v[0], &segs, 3, 1.7)?;
                project(t, y)
            };
            Ok(grad_check(f, &ins)?.max_rel_err)
        }),
        ("powermean_aggregate", |rng, _| {
            let ins = [uniform(7, 3, 0.2, 2.0, rng)];
            let segs = [0, 1, 0, 2, 2, 1, 0];
            let f = |t: &mut Tape, v: &[Var]| {
                let y = t.segment_powermean_aggregate(v[0], &segs, 3, 2.5)?;
                project(t, y)
            };
            Ok(grad_check(f, &ins)?.max_rel_err)
        }),
        ("gather_rows", |rng, _| {
            let ins = [uniform(4, 3, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("vstack", |rng, _| {
            let ins = [uniform(2, 3, -1.0, 1.0, rng), uniform(3, 3, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.vstack(&[v[0], v[1], v[0]])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("row_norm", |rng, _| {
            let ins = [away_from_zero(4, 3, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.row_norm(v[0])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("mul_col", |rng, _| {
            let ins = [uniform(4, 3, -1.0, 1.0, rng), uniform(4, 1, -1.0, 1.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.mul_col(v[0], v[1])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
        ("recip", |rng, _| {
            let ins = [uniform(4, 2, 0.5, 2.0, rng)];
            Ok(grad_check(
                |t, v| {
                    let y = t.recip(v[0])?;
                    project(t, y)
                },
                &ins,
            )?
            .max_rel_err)
        }),
    ]
}

fn layer_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("mlp", |rng, _| {
            let mut store = ParamStore::new();
            let mlp = MlpBlock::new(&mut store, "m", &[3, 5, 5, 2], true, rng)?;
            check_params(&store, Some(uniform(6, 3, -1.0, 1.0, rng)), |s, x| {
                mlp.forward(s, x.unwrap())
            })
        }),
        ("gcn", |rng, _| {
            let adj = adjacency(6, rng)?;
            let mut store = ParamStore::new();
            let l = GcnLayer::new(&mut store, "g", 3, 4, true, rng);
            check_params(&store, Some(away_from_zero(6, 3, rng)), |s, x| {
                l.forward(s, &adj, x.unwrap())
            })
        }),
        ("tagcn k=3", |rng, _| {
            let adj = adjacency(6, rng)?;
            let mut store = ParamStore::new();
            let l = TagcnLayer::new(&mut store, "t", 3, 4, 3, rng)?;
            check_params(&store, Some(away_from_zero(6, 3, rng)), |s, x| {
                l.forward(s, &adj, x.unwrap())
            })
        }),
        ("gtagcn k=6", |rng, _| {
            let adj = adjacency(7, rng)?;
            let mut store = ParamStore::new();
            let l = GtagcnLayer::new(&mut store, "g", 3, 4, 6, 1e-7, false, &[4, 4, 4], true, rng)?;
            check_params(&store, Some(away_from_zero(7, 3, rng)), |s, x| {
                l.forward(s, &adj, x.unwrap())
            })
        }),
        ("gtagcn k=3 per-power", |rng, _| {
            let adj = adjacency(7, rng)?;
            let mut store = ParamStore::new();
            let l = GtagcnLayer::new(&mut store, "g", 3, 4, 3, 1e-7, true, &[4, 4, 4], true, rng)?;
            check_params(&store, Some(away_from_zero(7, 3, rng)), |s, x| {
                l.forward(s, &adj, x.unwrap())
            })
        }),
        ("gen-gtagcn softmax", |rng, _| {
            let adj = adjacency(6, rng)?;
            let mut store = ParamStore::new();
            let agg = Aggregation::Softmax { beta: 1.5 };
            let l = GenGtagcnLayer::new(&mut store, "e", 3, 4, 3, 1e-7, agg, None, &[4, 4, 4], true, rng)?;
            check_params(&store, Some(away_from_zero(6, 3, rng)), |s, x| {
                l.forward(s, &adj, x.unwrap())
            })
        }),
        ("gen-gtagcn powermean", |rng, _| {
            let adj = adjacency(6, rng)?;
            let mut store = ParamStore::new();
            let agg = Aggregation::PowerMean { p: 2.0 };
            let l = GenGtagcnLayer::new(&mut store, "e", 3, 4, 3, 1e-7, agg, None, &[4, 4, 4], true, rng)?;
            check_params(&store, Some(away_from_zero(6, 3, rng)), |s, x| {
                l.forward(s, &adj, x.unwrap())
            })
        }),
        ("gen-gtagcn msgnorm", |rng, _| {
            let adj = adjacency(6, rng)?;
            let mut store = ParamStore::new();
            let agg = Aggregation::Softmax { beta: 1.0 };
            let l = GenGtagcnLayer::new(&mut store, "e", 3, 4, 2, 1e-7, agg, Some(0.8), &[4, 4, 4], true, rng)?;
            check_params(&store, Some(away_from_zero(6, 3, rng)), |s, x| {
                l.forward(s, &adj, x.unwrap())
            })
        }),
        ("model gtagcn node", |rng, _| model_check(Operator::Gtagcn, false, rng)),
        ("model gcn node", |rng, _| model_check(Operator::Gcn, false, rng)),
        ("model tagcn graph", |rng, _| model_check(Operator::Tagcn, true, rng)),
        ("model gtagcn graph", |rng, _| model_check(Operator::Gtagcn, true, rng)),
    ]
}

/// Whole model, dropout included, through the negative log-likelihood.
fn model_check(op: Operator, graph_level: bool, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = ModelConfig {
        operator: op,
        hidden: 6,
        dropout: 0.3,
        seed: rng.random(),
        ..ModelConfig::default()
    };
    let d = 4;
    let input = if graph_level {
        let graphs = (0..3)
            .map(|i| {
                let n = 4 + i;
                Graph::new(n, graph(n, 0.5, rng), uniform(n, d, -1.0, 1.0, rng), Some(i % 2))
            })
            .collect::<Result<Vec<_>>>()?;
        ModelInput::graph_level(batch_graphs(&graphs)?, &cfg)?
    } else {
        let n = 8;
        ModelInput::node_level(
            &Graph::new(n, graph(n, 0.3, rng), uniform(n, d, -1.0, 1.0, rng), None)?,
            &cfg,
        )?
    };
    let model = build_model(&cfg, d, 3, graph_level)?;
    let rows = input.output_rows();
    let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
    let mask: Vec<usize> = (0..rows).collect();
    let inputs = model.params().tensors().to_vec();
    let buffers = model.params().buffers().to_vec();
    let report = grad_check(
        |tape, vars| {
            let mut bufs = buffers.clone();
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let mut s = Session::with_vars(tape, vars.to_vec(), &mut bufs, true, &mut r);
            let lp = model.forward_with(&mut s, &input)?;
            s.tape.nll_masked(lp, &labels, &mask)
        },
        &inputs,
    )?;
    Ok(report.max_rel_err)
}

/// Runs every check with a fixed seed.
pub fn run_suite(fault: Option<Fault>) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for (i, (name, check)) in op_checks().into_iter().chain(layer_checks()).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let err = check(&mut rng, fault)?;
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
        });
    }
    Ok(SuiteReport {
        results,
        tolerance: TOLERANCE,
    })
}
