use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::tensor::{matmul_into, matmul_t, t_matmul, Tensor};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Per-segment reduction used by graph readout and neighbor aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Mean,
    Sum,
    Max,
}

/// Running statistics of one batch-normalization site.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(cols: usize) -> Self {
        BnState {
            running_mean: vec![0.0; cols],
            running_var: vec![1.0; cols],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct Segments {
    index: Vec<usize>,
    counts: Vec<usize>,
}

impl Segments {
    fn new(op: &'static str, index: &[usize], count: usize, rows: usize) -> Result<Self> {
        if index.len() != rows {
            return Err(Error::shape(
                op,
                format!("{rows} segment ids"),
                format!("{}", index.len()),
            ));
        }
        let mut counts = vec![0usize; count];
        for &s in index {
            if s >= count {
                return Err(Error::invalid(op, format!("segment id {s} out of range for {count}")));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(op, format!("segment {empty} is empty")));
        }
        Ok(Segments {
            index: index.to_vec(),
            counts,
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Mul(usize, usize),
    Relu(usize),
    Dropout(usize, Vec<f64>),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        training: bool,
    },
    LogSoftmax(usize),
    Nll {
        logp: usize,
        picks: Vec<(usize, usize)>,
    },
    Sum(usize),
    Spmm(Arc<CsrMatrix>, usize),
    SegmentReduce {
        x: usize,
        seg: Segments,
        mode: Reduce,
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        x: usize,
        seg: Segments,
        beta: f64,
        weights: Tensor,
    },
    SegmentPowerMean {
        x: usize,
        seg: Segments,
        p: f64,
    },
    GatherRows(usize, Vec<usize>),
    VStack(Vec<usize>),
    RowNorm(usize),
    MulCol(usize, usize),
    Recip(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records dense-matrix operations for one forward pass and replays them in
/// reverse to compute gradients.
///
/// Leaves created with `requires_grad = true` receive gradients; everything
/// else is treated as a constant. A tape supports one backward pass; call
/// [`Tape::reset_grads`] to run another.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[self.idx(v)].grad.as_ref()
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.consumed = false;
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    fn idx(&self, v: Var) -> usize {
        assert!(self.contains(v), "variable does not belong to this tape");
        v.index
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[usize], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn check_owned(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        for v in vars {
            if !self.contains(*v) {
                return Err(Error::invalid(op, "variable recorded on a different tape"));
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_owned("matmul", &[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{} rows on the right", av.cols()),
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        matmul_into(av, bv, &mut out);
        self.push("matmul", out, &[a.index, b.index], Op::MatMul(a.index, b.index))
    }

    /// Elementwise sum, or broadcast of a `1 x cols` row over every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_owned("add", &[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let mut out = av.clone();
            out.add_assign(bv);
            return self.push("add", out, &[a.index, b.index], Op::Add(a.index, b.index));
        }
        if bv.rows() == 1 && bv.cols() == av.cols() {
            let mut out = av.clone();
            for i in 0..out.rows() {
                for (o, &r) in out.row_mut(i).iter_mut().zip(bv.data()) {
                    *o += r;
                }
            }
            return self.push("add", out, &[a.index, b.index], Op::AddRow(a.index, b.index));
        }
        Err(Error::shape(
            "add",
            format!("{:?} or 1x{}", av.shape(), av.cols()),
            format!("{:?}", bv.shape()),
        ))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_owned("add_scalar", &[a])?;
        let out = self.value(a).map(|v| v + c);
        self.push("add_scalar", out, &[a.index], Op::AddScalar(a.index))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_owned("scale", &[a])?;
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, &[a.index], Op::Scale(a.index, c))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_owned("mul", &[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.rows(), av.cols(), data)?;
        self.push("mul", out, &[a.index, b.index], Op::Mul(a.index, b.index))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_owned("relu", &[a])?;
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, &[a.index], Op::Relu(a.index))
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        self.check_owned("dropout", &[x])?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.rows(), xv.cols(), data)?;
        self.push("dropout", out, &[x.index], Op::Dropout(x.index, mask))
    }

    /// Column-wise batch normalization with affine `gamma`/`beta` rows.
    ///
    /// Training mode normalizes by the batch statistics and folds them into
    /// `state` with momentum [`BN_MOMENTUM`] (the running variance uses the
    /// unbiased estimate); evaluation mode uses `state` as is.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BnState, training: bool) -> Result<Var> {
        self.check_owned("batch_norm", &[x, gamma, beta])?;
        let xv = self.value(x);
        let (n, d) = xv.shape();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != (1, d) {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} 1x{d}"),
                    format!("{:?}", self.value(v).shape()),
                ));
            }
        }
        if state.running_mean.len() != d || state.running_var.len() != d {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats of width {d}"),
                "other width",
            ));
        }
        if n == 0 {
            return Err(Error::invalid("batch_norm", "empty batch"));
        }
        let (mean, var) = if training {
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for i in 0..n {
                for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            for j in 0..d {
                let unbiased = if n > 1 {
                    var[j] * n as f64 / (n - 1) as f64
                } else {
                    var[j]
                };
                state.running_mean[j] = (1.0 - BN_MOMENTUM) * state.running_mean[j] + BN_MOMENTUM * mean[j];
                state.running_var[j] = (1.0 - BN_MOMENTUM) * state.running_var[j] + BN_MOMENTUM * unbiased;
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, d);
        for i in 0..n {
            for (j, (h, v)) in xhat.row_mut(i).iter_mut().zip(xv.row(i)).enumerate() {
                *h = (v - mean[j]) * inv_std[j];
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            for (j, (o, h)) in out.row_mut(i).iter_mut().zip(xhat.row(i)).enumerate() {
                *o = gv[j] * h + bv[j];
            }
        }
        self.push(
            "batch_norm",
            out,
            &[x.index, gamma.index, beta.index],
            Op::BatchNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                xhat,
                inv_std,
                training,
            },
        )
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_owned("log_softmax", &[a])?;
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", out, &[a.index], Op::LogSoftmax(a.index))
    }

    /// Mean of `-logp[i, labels[i]]` over the rows listed in `rows`.
    pub fn nll_masked(&mut self, logp: Var, labels: &[usize], rows: &[usize]) -> Result<Var> {
        self.check_owned("nll_masked", &[logp])?;
        let lv = self.value(logp);
        if labels.len() != lv.rows() {
            return Err(Error::shape(
                "nll_masked",
                format!("{} labels", lv.rows()),
                format!("{}", labels.len()),
            ));
        }
        if rows.is_empty() {
            return Err(Error::invalid("nll_masked", "empty mask"));
        }
        let mut picks = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for &r in rows {
            if r >= lv.rows() {
                return Err(Error::invalid("nll_masked", format!("row {r} out of range")));
            }
            let c = labels[r];
            if c >= lv.cols() {
                return Err(Error::invalid(
                    "nll_masked",
                    format!("label {c} out of range for {} classes", lv.cols()),
                ));
            }
            total -= lv.get(r, c);
            picks.push((r, c));
        }
        let out = Tensor::scalar(total / rows.len() as f64);
        self.push(
            "nll_masked",
            out,
            &[logp.index],
            Op::Nll {
                logp: logp.index,
                picks,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_owned("sum", &[a])?;
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, &[a.index], Op::Sum(a.index))
    }

    /// Sparse-dense product `S X`; `S` is a constant.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        self.check_owned("spmm", &[x])?;
        let out = s.spmm(self.value(x))?;
        self.push("spmm", out, &[x.index], Op::Spmm(Arc::clone(s), x.index))
    }

    /// `[X, S X, …, S^k X]` as tape variables.
    pub fn power_apply(&mut self, s: &Arc<CsrMatrix>, x: Var, k: usize) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(k + 1);
        out.push(x);
        for _ in 0..k {
            let next = self.spmm(s, *out.last().unwrap())?;
            out.push(next);
        }
        Ok(out)
    }

    /// Reduces the rows of `x` into `count` segments; row `i` belongs to
    /// segment `segments[i]`. Every segment must be nonempty. `Max` routes
    /// gradients to the first maximal row of each column.
    pub fn segment_reduce(&mut self, x: Var, segments: &[usize], count: usize, mode: Reduce) -> Result<Var> {
        self.check_owned("segment_reduce", &[x])?;
        let xv = self.value(x);
        let seg = Segments::new("segment_reduce", segments, count, xv.rows())?;
        let d = xv.cols();
        let mut out = Tensor::filled(count, d, if mode == Reduce::Max { f64::NEG_INFINITY } else { 0.0 });
        let mut argmax = if mode == Reduce::Max {
            vec![usize::MAX; count * d]
        } else {
            Vec::new()
        };
        for (i, &s) in seg.index.iter().enumerate() {
            let row = xv.row(i);
            for j in 0..d {
                let cur = out.get(s, j);
                match mode {
                    Reduce::Sum | Reduce::Mean => out.set(s, j, cur + row[j]),
                    Reduce::Max => {
                        if row[j] > cur {
                            out.set(s, j, row[j]);
                            argmax[s * d + j] = i;
                        }
                    }
                }
            }
        }
        if mode == Reduce::Mean {
            for s in 0..count {
                let c = seg.counts[s] as f64;
                out.row_mut(s).iter_mut().for_each(|v| *v /= c);
            }
        }
        self.push(
            "segment_reduce",
            out,
            &[x.index],
            Op::SegmentReduce {
                x: x.index,
                seg,
                mode,
                argmax,
            },
        )
    }

    /// Softmax-weighted aggregation per segment and coordinate:
    /// `Σ_u softmax_u(β m) · m_u`.
    pub fn segment_softmax_aggregate(&mut self, x: Var, segments: &[usize], count: usize, beta: f64) -> Result<Var> {
        self.check_owned("softmax_aggregate", &[x])?;
        let xv = self.value(x);
        let seg = Segments::new("softmax_aggregate", segments, count, xv.rows())?;
        let d = xv.cols();
        let mut max = Tensor::filled(count, d, f64::NEG_INFINITY);
        for (i, &s) in seg.index.iter().enumerate() {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if beta * v > max.get(s, j) {
                    max.set(s, j, beta * v);
                }
            }
        }
        let mut weights = Tensor::zeros(xv.rows(), d);
        let mut denom = Tensor::zeros(count, d);
        for (i, &s) in seg.index.iter().enumerate() {
            for (j, &v) in xv.row(i).iter().enumerate() {
                let e = (beta * v - max.get(s, j)).exp();
                weights.set(i, j, e);
                denom.set(s, j, denom.get(s, j) + e);
            }
        }
        let mut out = Tensor::zeros(count, d);
        for (i, &s) in seg.index.iter().enumerate() {
            for j in 0..d {
                let w = weights.get(i, j) / denom.get(s, j);
                weights.set(i, j, w);
                out.set(s, j, out.get(s, j) + w * xv.get(i, j));
            }
        }
        self.push(
            "softmax_aggregate",
            out,
            &[x.index],
            Op::SegmentSoftmax {
                x: x.index,
                seg,
                beta,
                weights,
            },
        )
    }

    /// Power mean per segment and coordinate: `(mean_u m_u^p)^{1/p}`.
    /// Messages must be strictly positive and `p` nonzero.
    pub fn segment_powermean_aggregate(&mut self, x: Var, segments: &[usize], count: usize, p: f64) -> Result<Var> {
        self.check_owned("powermean_aggregate", &[x])?;
        if p == 0.0 || !p.is_finite() {
            return Err(Error::invalid("powermean_aggregate", "p must be finite and nonzero"));
        }
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::invalid(
                "powermean_aggregate",
                format!("messages must be strictly positive, found {bad}"),
            ));
        }
        let seg = Segments::new("powermean_aggregate", segments, count, xv.rows())?;
        let d = xv.cols();
        let mut acc = Tensor::zeros(count, d);
        for (i, &s) in seg.index.iter().enumerate() {
            for (j, &v) in xv.row(i).iter().enumerate() {
                acc.set(s, j, acc.get(s, j) + v.powf(p));
            }
        }
        for s in 0..count {
            let c = seg.counts[s] as f64;
            acc.row_mut(s).iter_mut().for_each(|v| *v = (*v / c).powf(1.0 / p));
        }
        self.push(
            "powermean_aggregate",
            acc,
            &[x.index],
            Op::SegmentPowerMean { x: x.index, seg, p },
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check_owned("gather_rows", &[x])?;
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range")));
        }
        let out = xv.select_rows(rows);
        self.push("gather_rows", out, &[x.index], Op::GatherRows(x.index, rows.to_vec()))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_owned("vstack", parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("vstack", "nothing to stack"))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != d {
                return Err(Error::shape("vstack", format!("{d} columns"), format!("{}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, d, data)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        self.push("vstack", out, &idx, Op::VStack(idx.clone()))
    }

    /// Euclidean norm of each row, as an `n x 1` column.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        self.check_owned("row_norm", &[x])?;
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|i| xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(xv.rows(), 1, data)?;
        self.push("row_norm", out, &[x.index], Op::RowNorm(x.index))
    }

    /// Scales row `i` of `x` by `col[i]`, where `col` is `n x 1`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.check_owned("mul_col", &[x, col])?;
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.shape() != (xv.rows(), 1) {
            return Err(Error::shape(
                "mul_col",
                format!("{}x1", xv.rows()),
                format!("{:?}", cv.shape()),
            ));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let c = cv.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        self.push("mul_col", out, &[x.index, col.index], Op::MulCol(x.index, col.index))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.check_owned("recip", &[x])?;
        let out = self.value(x).map(|v| 1.0 / v);
        self.push("recip", out, &[x.index], Op::Recip(x.index))
    }

    /// Reverse pass from a scalar `loss`. Every `requires_grad` leaf ends up
    /// with a gradient (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.contains(loss) {
            return Err(Error::Backward("loss is not recorded on this tape".into()));
        }
        if self.consumed {
            return Err(Error::Backward("backward already ran; reset gradients first".into()));
        }
        if self.nodes[loss.index].value.shape() != (1, 1) {
            return Err(Error::Backward(format!(
                "loss must be 1x1, got {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.index].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.index).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            for (input, contribution) in self.backward_rule(idx, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut self.nodes[input].grad {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                let (r, c) = node.value.shape();
                node.grad = Some(Tensor::zeros(r, c));
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_rule(&self, idx: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if self.wants(*a) {
                    out.push((*a, matmul_t(g, val(*b))));
                }
                if self.wants(*b) {
                    out.push((*b, t_matmul(val(*a), g)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => {
                let mut row = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (r, v) in row.iter_mut().zip(g.row(i)) {
                        *r += v;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::row_vector(row))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = zip_map(g, bv, |x, y| x * y);
                let gb = zip_map(g, av, |x, y| x * y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(a) => vec![(*a, zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                vec![(*a, Tensor::new(g.rows(), g.cols(), data).unwrap())]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, d) = g.shape();
                let gamma_v = val(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += g.get(i, j) * xhat.get(i, j);
                        dbeta[j] += g.get(i, j);
                    }
                }
                let mut dx = Tensor::zeros(n, d);
                let nf = n as f64;
                for i in 0..n {
                    for j in 0..d {
                        let v = if *training {
                            gamma_v[j] * inv_std[j] / nf * (nf * g.get(i, j) - dbeta[j] - xhat.get(i, j) * dgamma[j])
                        } else {
                            gamma_v[j] * inv_std[j] * g.get(i, j)
                        };
                        dx.set(i, j, v);
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::row_vector(dgamma)),
                    (*beta, Tensor::row_vector(dbeta)),
                ]
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d -= y.get(i, j).exp() * gsum;
                    }
                }
                vec![(*a, dx)]
            }
            Op::Nll { logp, picks } => {
                let lv = val(*logp);
                let mut dx = Tensor::zeros(lv.rows(), lv.cols());
                let scale = g.get(0, 0) / picks.len() as f64;
                for &(r, c) in picks {
                    dx.set(r, c, dx.get(r, c) - scale);
                }
                vec![(*logp, dx)]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::filled(r, c, g.get(0, 0)))]
            }
            Op::Spmm(s, a) => vec![(*a, s.spmm_transposed(g))],
            Op::SegmentReduce { x, seg, mode, argmax } => {
                let (rows, d) = val(*x).shape();
                let mut dx = Tensor::zeros(rows, d);
                match mode {
                    Reduce::Sum | Reduce::Mean => {
                        for (i, &s) in seg.index.iter().enumerate() {
                            let scale = if *mode == Reduce::Mean {
                                1.0 / seg.counts[s] as f64
                            } else {
                                1.0
                            };
                            for j in 0..d {
                                dx.set(i, j, g.get(s, j) * scale);
                            }
                        }
                    }
                    Reduce::Max => {
                        for s in 0..seg.counts.len() {
                            for j in 0..d {
                                let i = argmax[s * d + j];
                                dx.set(i, j, dx.get(i, j) + g.get(s, j));
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SegmentSoftmax { x, seg, beta, weights } => {
                let xv = val(*x);
                let out = &node.value;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &s) in seg.index.iter().enumerate() {
                    for j in 0..xv.cols() {
                        let w = weights.get(i, j);
                        let v = g.get(s, j) * w * (1.0 + beta * (xv.get(i, j) - out.get(s, j)));
                        dx.set(i, j, v);
                    }
                }
                vec![(*x, dx)]
            }
            Op::SegmentPowerMean { x, seg, p } => {
                let xv = val(*x);
                let out = &node.value;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &s) in seg.index.iter().enumerate() {
                    let c = seg.counts[s] as f64;
                    for j in 0..xv.cols() {
                        let ratio = xv.get(i, j) / out.get(s, j);
                        dx.set(i, j, g.get(s, j) * ratio.powf(p - 1.0) / c);
                    }
                }
                vec![(*x, dx)]
            }
            Op::GatherRows(x, rows) => {
                let (r, d) = val(*x).shape();
                let mut dx = Tensor::zeros(r, d);
                for (k, &src) in rows.iter().enumerate() {
                    for (o, v) in dx.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                vec![(*x, dx)]
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let r = val(p).rows();
                    let rows: Vec<usize> = (offset..offset + r).collect();
                    out.push((p, g.select_rows(&rows)));
                    offset += r;
                }
                out
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let norms = &node.value;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let nrm = norms.get(i, 0);
                    if nrm > 0.0 {
                        let gi = g.get(i, 0) / nrm;
                        for (o, v) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                            *o = gi * v;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (val(*x), val(*col));
                let mut dx = g.clone();
                let mut dc = Tensor::zeros(cv.rows(), 1);
                for i in 0..xv.rows() {
                    let c = cv.get(i, 0);
                    dx.row_mut(i).iter_mut().for_each(|v| *v *= c);
                    let dot: f64 = g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum();
                    dc.set(i, 0, dot);
                }
                vec![(*x, dx), (*col, dc)]
            }
            Op::Recip(x) => vec![(*x, zip_map(g, val(*x), |gv, v| -gv / (v * v)))],
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).unwrap()
}
