use serde::{Deserialize, Serialize};

use super::kernels::{self, gemm, Layout};
use super::{GradBuf, Gradients, ParamId, ParamStore, Result, Tensor, TensorError};
use crate::par;
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Sigmoid,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply<F: Real>(self, x: F) -> F {
        match self {
            Activation::Gelu => kernels::gelu(x),
            Activation::Sigmoid => kernels::sigmoid(x),
            Activation::Relu => x.max(F::zero()),
            Activation::Silu => x * kernels::sigmoid(x),
        }
    }

    pub fn derivative<F: Real>(self, x: F) -> F {
        match self {
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Sigmoid => {
                let s = kernels::sigmoid(x);
                s * (F::one() - s)
            }
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Silu => {
                let s = kernels::sigmoid(x);
                s * (F::one() + x * (F::one() - s))
            }
        }
    }
}

/// Weighted multiset of table rows; the bag's embedding is
/// `Σ weight · table[row]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag<F> {
    pub entries: Vec<(usize, F)>,
}

/// Contiguous run of rows `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Segment>,
    },
    SegmentAttention {
        x: Var,
        query: Var,
        segments: Vec<Segment>,
        weights: Vec<F>,
    },
    Softmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Reshape(Var),
    SumLast(Var),
    MulBcastLast(Var, Var),
    Sum(Var),
    EmbeddingBag {
        table: Var,
        bags: Vec<Bag<F>>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation for reverse accumulation.
///
/// Parameters are read from the borrowed store without copying; the tape is
/// single-use and cheap to drop.
pub struct Tape<'p, F: Real> {
    params: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    /// A tape without parameters; only constants can be recorded.
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.expect("parameter leaf without store").value(id),
            _ => node.value.as_ref().expect("op node has a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "detached tape cannot hold parameters");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let store = self.params.ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let id = store.id(name)?;
        Ok(self.param(id))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, &mut out, false);
        let t = Tensor::new_unchecked_finite(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `x[…×d_in] · w[d_in×d_out] + b[d_out]`, broadcast over leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear bias", &sw, self.shape(b)));
            }
        }
        let n = self.value(x).len() / din;
        let mut out = vec![F::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_mut(dout).for_each(|r| r.copy_from_slice(bias));
        }
        gemm(n, din, dout, self.value(x).data(), Layout::Normal, self.value(w).data(), Layout::Normal, &mut out, b.is_some());
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new_unchecked_finite(shape, out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push("linear", t, Op::Linear { x, w, b }, &inputs)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new_unchecked_finite(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new_unchecked_finite(ta.shape().to_vec(), ta.data().iter().map(|&v| v * c).collect())?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let ta = self.value(a);
        let t = Tensor::new_unchecked_finite(ta.shape().to_vec(), ta.data().iter().map(|&v| v * c).collect())?;
        self.push("scale_by", t, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new_unchecked_finite(ta.shape().to_vec(), ta.data().iter().map(|&v| kind.apply(v)).collect())?;
        self.push("activation", t, Op::Act(a, kind), &[a])
    }

    /// Standardizes each trailing vector with population variance, then
    /// applies `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.rows();
        let mut out = vec![F::zero(); tx.len()];
        let mut xhat = vec![F::zero(); tx.len()];
        let mut inv_std = vec![F::zero(); rows];
        let dn = F::lit(d as f64);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new_unchecked_finite(tx.shape().to_vec(), out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    fn check_segments(&self, op: &'static str, x: Var, segments: &[Segment]) -> Result<(usize, usize)> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(mismatch(op, tx.shape(), &[0, 0]));
        }
        if segments.is_empty() || segments.iter().any(|s| s.len == 0) {
            return Err(TensorError::EmptyInput { op });
        }
        let rows = tx.shape()[0];
        if let Some(s) = segments.iter().find(|s| s.start + s.len > rows) {
            return Err(mismatch(op, tx.shape(), &[s.start + s.len]));
        }
        Ok((rows, tx.cols()))
    }

    /// Columnwise maximum of each row segment: `[R×d] → [S×d]`. Ties route the
    /// gradient to the lowest row index.
    pub fn segment_max(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let (_, d) = self.check_segments("segment_max", x, segments)?;
        let tx = self.value(x);
        let mut out = vec![F::zero(); segments.len() * d];
        let mut argmax = vec![0usize; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let (o, a) = (&mut out[s * d..(s + 1) * d], &mut argmax[s * d..(s + 1) * d]);
            o.copy_from_slice(tx.row(seg.start));
            a.iter_mut().for_each(|v| *v = seg.start);
            for r in seg.start + 1..seg.start + seg.len {
                for (j, &v) in tx.row(r).iter().enumerate() {
                    if v > o[j] {
                        o[j] = v;
                        a[j] = r;
                    }
                }
            }
        }
        let t = Tensor::new_unchecked_finite(vec![segments.len(), d], out)?;
        self.push("segment_max", t, Op::SegmentMax { x, argmax }, &[x])
    }

    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let (_, d) = self.check_segments("segment_mean", x, segments)?;
        let tx = self.value(x);
        let mut out = vec![F::zero(); segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for r in seg.start..seg.start + seg.len {
                o.iter_mut().zip(tx.row(r)).for_each(|(a, &b)| *a += b);
            }
            let inv = F::one() / F::lit(seg.len as f64);
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new_unchecked_finite(vec![segments.len(), d], out)?;
        self.push("segment_mean", t, Op::SegmentMean { x, segments: segments.to_vec() }, &[x])
    }

    /// Attention pooling with one learned query: per segment,
    /// `softmax(rows · q)`-weighted sum of the rows.
    pub fn segment_attention(&mut self, x: Var, query: Var, segments: &[Segment]) -> Result<Var> {
        let (rows, d) = self.check_segments("segment_attention", x, segments)?;
        if self.shape(query) != [d] {
            return Err(mismatch("segment_attention", self.shape(x), self.shape(query)));
        }
        let (tx, q) = (self.value(x), self.value(query).data());
        let mut weights = vec![F::zero(); rows];
        let mut out = vec![F::zero(); segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let w = &mut weights[seg.start..seg.start + seg.len];
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = tx.row(seg.start + i).iter().zip(q).map(|(&a, &b)| a * b).sum();
            }
            softmax_in_place(w);
            let o = &mut out[s * d..(s + 1) * d];
            for (i, &wi) in w.iter().enumerate() {
                o.iter_mut().zip(tx.row(seg.start + i)).for_each(|(a, &b)| *a += wi * b);
            }
        }
        let t = Tensor::new_unchecked_finite(vec![segments.len(), d], out)?;
        let op = Op::SegmentAttention {
            x,
            query,
            segments: segments.to_vec(),
            weights,
        };
        self.push("segment_attention", t, op, &[x, query])
    }

    /// Columnwise maximum over all rows: `[r×d] → [d]`.
    pub fn row_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("row_max_pool", &s, &[0, 0]));
        }
        let m = self.segment_max(x, &[Segment { start: 0, len: s[0] }])?;
        self.reshape(m, vec![s[1]])
    }

    /// Numerically stable softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut out = ta.data().to_vec();
        out.chunks_mut(ta.cols()).for_each(softmax_in_place);
        let t = Tensor::new_unchecked_finite(ta.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(TensorError::EmptyInput { op: "concat" })?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", &first, s));
            }
            width += s[s.len() - 1];
        }
        let rows = self.value(parts[0]).rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = width;
        let t = Tensor::new_unchecked_finite(shape, out)?;
        self.push("concat", t, Op::Concat(parts.to_vec()), parts)
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let first = self.shape(*items.first().ok_or(TensorError::EmptyInput { op: "stack" })?).to_vec();
        let mut out = Vec::with_capacity(items.len() * first.iter().product::<usize>());
        for &v in items {
            if self.shape(v) != first.as_slice() {
                return Err(mismatch("stack", &first, self.shape(v)));
            }
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first);
        let t = Tensor::new_unchecked_finite(shape, out)?;
        self.push("stack", t, Op::Stack(items.to_vec()), items)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(mismatch("reshape", ta.shape(), &shape));
        }
        let t = Tensor::new_unchecked_finite(shape, ta.data().to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Sums the trailing axis, keeping it with extent 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().chunks(ta.cols()).map(|r| r.iter().copied().sum()).collect();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let t = Tensor::new_unchecked_finite(shape, out)?;
        self.push("sum_last", t, Op::SumLast(a), &[a])
    }

    /// `a[…×d] ⊙ s[…×1]`, broadcasting `s` along the trailing axis.
    pub fn mul_bcast_last(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.cols() != 1 || ts.rows() != ta.rows() || ts.shape()[..ts.shape().len() - 1] != ta.shape()[..ta.shape().len() - 1] {
            return Err(mismatch("mul_bcast_last", ta.shape(), ts.shape()));
        }
        let d = ta.cols();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ts.data()[i / d])
            .collect();
        let t = Tensor::new_unchecked_finite(ta.shape().to_vec(), out)?;
        self.push("mul_bcast_last", t, Op::MulBcastLast(a, s), &[a, s])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// One output row per bag: `Σ weight · table[row]`.
    pub fn embedding_bag(&mut self, table: Var, bags: Vec<Bag<F>>) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(mismatch("embedding_bag", tt.shape(), &[0, 0]));
        }
        if bags.is_empty() || bags.iter().any(|b| b.entries.is_empty()) {
            return Err(TensorError::EmptyInput { op: "embedding_bag" });
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&(row, _)) = bags.iter().flat_map(|b| &b.entries).find(|(r, _)| *r >= vocab) {
            return Err(mismatch("embedding_bag", tt.shape(), &[row]));
        }
        let mut out = vec![F::zero(); bags.len() * d];
        par::for_each_chunk_mut(&mut out, d, |c, o| {
            for &(row, w) in &bags[c].entries {
                o.iter_mut().zip(tt.row(row)).for_each(|(a, &b)| *a += w * b);
            }
        });
        let t = Tensor::new_unchecked_finite(vec![bags.len(), d], out)?;
        self.push("embedding_bag", t, Op::EmbeddingBag { table, bags }, &[table])
    }

    /// Mean cross-entropy of `logits[b×C]` against class indices. Returns the
    /// scalar loss and the softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor<F>)> {
        let tl = self.value(logits);
        let classes = tl.cols();
        if tl.shape().len() != 2 || tl.rows() != targets.len() {
            return Err(mismatch("softmax_cross_entropy", tl.shape(), &[targets.len(), classes]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::InvalidTarget { target: t, classes });
        }
        let mut probs = Vec::with_capacity(tl.len());
        let mut loss = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            loss += log_sum - (row[t] - max);
            probs.extend(row.iter().map(|&v| (v - max - log_sum).exp()));
        }
        loss /= F::lit(targets.len() as f64);
        let probs_t = Tensor::new_unchecked_finite(tl.shape().to_vec(), probs.clone())?;
        let op = Op::SoftmaxXent {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        let v = self.push("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])?;
        Ok((v, probs_t))
    }

    /// Reverse accumulation from a scalar `loss`. Parameter gradients are
    /// added into `grads`, so calling this twice doubles them.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<F>) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut g: Vec<Option<GradBuf<F>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(GradBuf::Dense(vec![F::one()]));
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(id, &gi),
                _ => {
                    let len = self.value(Var(i)).len();
                    let dy = match gi {
                        GradBuf::Dense(d) => d,
                        rows => rows.to_dense(len),
                    };
                    self.backprop(i, &dy, &mut g);
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, dy: &[F], g: &mut [Option<GradBuf<F>>]) {
        let needs = |v: Var| self.requires_grad(v);
        let acc = |g: &mut [Option<GradBuf<F>>], v: Var, d: Vec<F>| match &mut g[v.0] {
            Some(buf) => buf.add_dense(&d),
            slot @ None => *slot = Some(GradBuf::Dense(d)),
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(m, n, k, dy, Layout::Normal, tb.data(), Layout::Transposed, &mut da, false);
                    acc(g, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(k, m, n, ta.data(), Layout::Transposed, dy, Layout::Normal, &mut db, false);
                    acc(g, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (din, dout) = (tw.shape()[0], tw.shape()[1]);
                let n = tx.len() / din;
                if needs(*x) {
                    let mut dx = vec![F::zero(); n * din];
                    gemm(n, dout, din, dy, Layout::Normal, tw.data(), Layout::Transposed, &mut dx, false);
                    acc(g, *x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![F::zero(); din * dout];
                    gemm(din, n, dout, tx.data(), Layout::Transposed, dy, Layout::Normal, &mut dw, false);
                    acc(g, *w, dw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![F::zero(); dout];
                        dy.chunks(dout).for_each(|r| db.iter_mut().zip(r).for_each(|(a, &v)| *a += v));
                        acc(g, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(g, *a, dy.to_vec());
                }
                if needs(*b) {
                    acc(g, *b, dy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    acc(g, *a, dy.iter().zip(tb).map(|(&d, &v)| d * v).collect());
                }
                if needs(*b) {
                    acc(g, *b, dy.iter().zip(ta).map(|(&d, &v)| d * v).collect());
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc(g, *a, dy.iter().map(|&d| d * *c).collect());
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).data()[0];
                if needs(*a) {
                    acc(g, *a, dy.iter().map(|&d| d * c).collect());
                }
                if needs(*s) {
                    let ds = dy.iter().zip(self.value(*a).data()).map(|(&d, &v)| d * v).sum();
                    acc(g, *s, vec![ds]);
                }
            }
            Op::Act(a, kind) => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    acc(g, *a, dy.iter().zip(x).map(|(&d, &v)| d * kind.derivative(v)).collect());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).len();
                let gm = self.value(*gamma).data();
                if needs(*gamma) {
                    let mut dg = vec![F::zero(); d];
                    for (r, h) in dy.chunks(d).zip(xhat.chunks(d)) {
                        dg.iter_mut().zip(r.iter().zip(h)).for_each(|(a, (&dv, &hv))| *a += dv * hv);
                    }
                    acc(g, *gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![F::zero(); d];
                    dy.chunks(d).for_each(|r| db.iter_mut().zip(r).for_each(|(a, &v)| *a += v));
                    acc(g, *beta, db);
                }
                if needs(*x) {
                    let dn = F::lit(d as f64);
                    let mut dx = vec![F::zero(); dy.len()];
                    for (row, inv) in inv_std.iter().enumerate() {
                        let (dyr, h) = (&dy[row * d..(row + 1) * d], &xhat[row * d..(row + 1) * d]);
                        let dh: Vec<F> = dyr.iter().zip(gm).map(|(&a, &b)| a * b).collect();
                        let sum_dh: F = dh.iter().copied().sum();
                        let sum_dh_h: F = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[row * d + j] = *inv / dn * (dn * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    acc(g, *x, dx);
                }
            }
            Op::SegmentMax { x, argmax } => {
                if needs(*x) {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let mut dx = vec![F::zero(); tx.len()];
                    for (idx, (&r, &dv)) in argmax.iter().zip(dy).enumerate() {
                        dx[r * d + idx % d] += dv;
                    }
                    acc(g, *x, dx);
                }
            }
            Op::SegmentMean { x, segments } => {
                if needs(*x) {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let mut dx = vec![F::zero(); tx.len()];
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = F::one() / F::lit(seg.len as f64);
                        for r in seg.start..seg.start + seg.len {
                            for j in 0..d {
                                dx[r * d + j] += dy[s * d + j] * inv;
                            }
                        }
                    }
                    acc(g, *x, dx);
                }
            }
            Op::SegmentAttention { x, query, segments, weights } => {
                let (tx, q) = (self.value(*x), self.value(*query).data());
                let d = tx.cols();
                let mut dx = vec![F::zero(); tx.len()];
                let mut dq = vec![F::zero(); d];
                for (s, seg) in segments.iter().enumerate() {
                    let dout = &dy[s * d..(s + 1) * d];
                    let w = &weights[seg.start..seg.start + seg.len];
                    let dw: Vec<F> = (0..seg.len)
                        .map(|i| tx.row(seg.start + i).iter().zip(dout).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let mix: F = w.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
                    for i in 0..seg.len {
                        let r = seg.start + i;
                        let ds = w[i] * (dw[i] - mix);
                        for j in 0..d {
                            dx[r * d + j] += w[i] * dout[j] + ds * q[j];
                            dq[j] += ds * tx.row(r)[j];
                        }
                    }
                }
                if needs(*x) {
                    acc(g, *x, dx);
                }
                if needs(*query) {
                    acc(g, *query, dq);
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = self.value(Var(i));
                    let d = y.cols();
                    let mut dx = vec![F::zero(); dy.len()];
                    for ((o, yr), dr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(dy.chunks(d)) {
                        let dot: F = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        o.iter_mut().zip(yr.iter().zip(dr)).for_each(|(v, (&yv, &dv))| *v = yv * (dv - dot));
                    }
                    acc(g, *a, dx);
                }
            }
            Op::Concat(parts) => {
                let width = self.value(Var(i)).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let d = dy.chunks(width).flat_map(|r| &r[offset..offset + w]).copied().collect();
                        acc(g, p, d);
                    }
                    offset += w;
                }
            }
            Op::Stack(items) => {
                let n = self.value(items[0]).len();
                for (k, &v) in items.iter().enumerate() {
                    if needs(v) {
                        acc(g, v, dy[k * n..(k + 1) * n].to_vec());
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    acc(g, *a, dy.to_vec());
                }
            }
            Op::SumLast(a) => {
                if needs(*a) {
                    let d = self.value(*a).cols();
                    acc(g, *a, (0..dy.len() * d).map(|k| dy[k / d]).collect());
                }
            }
            Op::MulBcastLast(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s).data());
                let d = ta.cols();
                if needs(*a) {
                    acc(g, *a, dy.iter().enumerate().map(|(k, &v)| v * ts[k / d]).collect());
                }
                if needs(*s) {
                    let ds = dy
                        .chunks(d)
                        .zip(ta.data().chunks(d))
                        .map(|(dr, ar)| dr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    acc(g, *s, ds);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc(g, *a, vec![dy[0]; self.value(*a).len()]);
                }
            }
            Op::EmbeddingBag { table, bags } => {
                if needs(*table) {
                    let d = self.value(*table).cols();
                    let buf = g[table.0].get_or_insert_with(|| GradBuf::Rows {
                        width: d,
                        rows: Default::default(),
                    });
                    for (c, bag) in bags.iter().enumerate() {
                        for &(row, w) in &bag.entries {
                            buf.add_row(row, w, &dy[c * d..(c + 1) * d]);
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                if needs(*logits) {
                    let classes = self.value(*logits).cols();
                    let scale = dy[0] / F::lit(targets.len() as f64);
                    let mut dl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * classes + t] -= scale;
                    }
                    acc(g, *logits, dl);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(params: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, shape, data) in params {
            s.insert(*n, Tensor::new(shape.clone(), data.clone()).unwrap(), true).unwrap();
        }
        s
    }

    fn act(kind: Activation, x: f64) -> f64 {
        let mut tape = Tape::<f64>::detached();
        let v = tape.constant(Tensor::vector(vec![x]).unwrap());
        let y = tape.activation(v, kind).unwrap();
        tape.value(y).data()[0]
    }

    #[test]
    fn activation_reference_points() {
        assert_eq!(act(Activation::Gelu, 0.0), 0.0);
        assert_eq!(act(Activation::Sigmoid, 0.0), 0.5);
        assert!((act(Activation::Gelu, 1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((act(Activation::Gelu, -1.0) + 0.158_655_253_931_457_07).abs() < 1e-15);
        assert!((act(Activation::Gelu, 10.0) - 10.0).abs() < 1e-6);
        assert_eq!(act(Activation::Relu, -2.0), 0.0);
        assert!((act(Activation::Silu, 1.0) - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let s = store(&[("g", vec![2], vec![1.0, 1.0]), ("b", vec![2], vec![0.0, 0.0]), ("b5", vec![2], vec![5.0, 5.0])]);
        let mut tape = Tape::new(&s);
        let (g, b, b5) = (tape.param_named("g").unwrap(), tape.param_named("b").unwrap(), tape.param_named("b5").unwrap());
        let x = tape.constant(Tensor::vector(vec![1.0, 3.0]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
        let c = tape.constant(Tensor::vector(vec![4.0, 4.0]).unwrap());
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let y5 = tape.layer_norm(x, g, b5, 1e-12).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for (a, b) in tape.value(y5).data().iter().zip(tape.value(y).data()) {
            assert_eq!(*a, b + 5.0);
        }
        let wrong = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(tape.layer_norm(wrong, g, b, 1e-5), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn max_pool_examples_and_tie_break() {
        let s = store(&[("m", vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]), ("t", vec![2, 2], vec![2.0; 4])]);
        let mut tape = Tape::new(&s);
        let m = tape.param_named("m").unwrap();
        let y = tape.row_max_pool(m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let t = tape.param_named("t").unwrap();
        let yt = tape.row_max_pool(t).unwrap();
        assert_eq!(tape.value(yt).data(), &[2.0, 2.0]);
        let l = tape.sum(yt).unwrap();
        let mut grads = Gradients::for_store(&s);
        tape.backward(l, &mut grads).unwrap();
        assert_eq!(grads.dense(s.id("t").unwrap(), 4), vec![1.0, 1.0, 0.0, 0.0]);

        let mut tape = Tape::<f64>::detached();
        let one = tape.constant(Tensor::from_rows(&[vec![7.0, -1.0]]).unwrap());
        let y = tape.row_max_pool(one).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, -1.0]);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        assert!(matches!(tape.segment_max(x, &[]), Err(TensorError::EmptyInput { .. })));
    }

    fn xent(logits: Vec<f64>, target: usize) -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::detached();
        let l = tape.constant(Tensor::new(vec![1, logits.len()], logits).unwrap());
        let (loss, probs) = tape.softmax_cross_entropy(l, &[target]).unwrap();
        (tape.value(loss).data()[0], probs.into_data())
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, probs) = xent(vec![0.0; 7], 2);
        assert!((loss - 7f64.ln()).abs() < 1e-15);
        assert!(probs.iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-15));
        assert!(xent(vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0).0 < 1e-3);
        // log-sum-exp of 0..=6 evaluated at 40 digits.
        let (loss, probs) = xent((0..7).map(f64::from).collect(), 3);
        assert!((loss - 3.457_762_847_404_242_8).abs() < 1e-14);
        assert!((probs[6] - 0.632_697_504_272_354_99).abs() < 1e-15);
        let mut tape = Tape::<f64>::detached();
        let l = tape.constant(Tensor::zeros(&[1, 7]));
        assert_eq!(
            tape.softmax_cross_entropy(l, &[7]).unwrap_err(),
            TensorError::InvalidTarget { target: 7, classes: 7 }
        );
    }

    #[test]
    fn softmax_is_stable_at_large_magnitude() {
        let mut tape = Tape::<f64>::detached();
        let l = tape.constant(Tensor::vector(vec![1e4, -1e4, 0.0, 1e4 - 1.0, 3.0, -2.0, 9999.5]).unwrap());
        let p = tape.softmax(l).unwrap();
        assert!((tape.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_reference_gradients() {
        let s = store(&[("w", vec![2], vec![1.0, 2.0]), ("u", vec![2, 3], vec![0.5; 6]), ("unused", vec![1], vec![3.0])]);
        let mut tape = Tape::new(&s);
        let w = tape.param_named("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        let mut grads = Gradients::for_store(&s);
        tape.backward(l, &mut grads).unwrap();
        assert_eq!(grads.dense(s.id("w").unwrap(), 2), vec![2.0, 4.0]);
        assert!(grads.get(s.id("unused").unwrap()).is_none());

        let mut tape = Tape::new(&s);
        let u = tape.param_named("u").unwrap();
        let l = tape.sum(u).unwrap();
        let mut grads = Gradients::for_store(&s);
        tape.backward(l, &mut grads).unwrap();
        assert_eq!(grads.dense(s.id("u").unwrap(), 6), vec![1.0; 6]);
        assert_eq!(tape.backward(u, &mut grads).unwrap_err(), TensorError::NotScalar(vec![2, 3]));
    }

    #[test]
    fn second_backward_doubles_exactly() {
        let s = store(&[("w", vec![2, 2], vec![0.3, -1.2, 0.7, 2.0])]);
        let mut tape = Tape::new(&s);
        let w = tape.param_named("w").unwrap();
        let h = tape.activation(w, Activation::Gelu).unwrap();
        let h = tape.matmul(h, w).unwrap();
        let l = tape.sum(h).unwrap();
        let mut once = Gradients::for_store(&s);
        tape.backward(l, &mut once).unwrap();
        let mut twice = once.clone();
        tape.backward(l, &mut twice).unwrap();
        let id = s.id("w").unwrap();
        for (a, b) in once.dense(id, 4).iter().zip(twice.dense(id, 4)) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.reshape(a, vec![5]).is_err());
        assert!(tape.concat(&[]).is_err());
        let r = tape.reshape(a, vec![3, 2]).unwrap();
        assert_eq!(tape.shape(r), &[3, 2]);
        let cat = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), &[2, 6]);
    }

    #[test]
    fn embedding_bag_sums_weighted_rows() {
        let s = store(&[("t", vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]);
        let mut tape = Tape::new(&s);
        let t = tape.param_named("t").unwrap();
        let bags = vec![Bag { entries: vec![(0, 0.5), (2, 1.0)] }, Bag { entries: vec![(1, 2.0)] }];
        let e = tape.embedding_bag(t, bags).unwrap();
        assert_eq!(tape.value(e).data(), &[5.5, 7.0, 6.0, 8.0]);
        let l = tape.sum(e).unwrap();
        let mut grads = Gradients::for_store(&s);
        tape.backward(l, &mut grads).unwrap();
        let g = grads.get(s.id("t").unwrap()).unwrap();
        assert!(matches!(g, GradBuf::Rows { .. }));
        assert_eq!(g.to_dense(6), vec![0.5, 0.5, 2.0, 2.0, 1.0, 1.0]);
        let bad = vec![Bag { entries: vec![(3, 1.0)] }];
        assert!(tape.embedding_bag(t, bad).is_err());
    }
}
