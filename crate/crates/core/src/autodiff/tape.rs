//! Tape of primitive operations with reverse accumulation.
//!
//! Every primitive records one node holding the forward value and enough
//! saved state to run its backward rule. Nodes are appended in execution
//! order, so the tape is always topologically sorted and `backward` is a
//! single reverse sweep. A tape and its tensors are confined to one thread
//! during a forward/backward pass.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: S,
    },
    ScaleRows {
        x: TensorId,
        factors: Vec<S>,
    },
    ConcatLast {
        a: TensorId,
        b: TensorId,
    },
    NarrowLast {
        x: TensorId,
        start: usize,
        width: usize,
    },
    Tanh {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    SoftmaxLast {
        x: TensorId,
    },
    Gather {
        table: TensorId,
        ids: Vec<usize>,
    },
    Conv1d {
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    },
    MaxPoolTime {
        x: TensorId,
        argmax: Vec<usize>,
    },
    Dropout {
        x: TensorId,
        mask: Vec<S>,
    },
    Reshape {
        x: TensorId,
    },
    SelectTime {
        x: TensorId,
        t: usize,
    },
    StackTime {
        xs: Vec<TensorId>,
    },
    MaskedMeanTime {
        x: TensorId,
        mask: Vec<S>,
        counts: Vec<S>,
    },
    MaskedCrossEntropy {
        logits: TensorId,
        probs: Vec<S>,
        targets: Vec<usize>,
        mask: Vec<S>,
        valid: usize,
    },
    SumAll {
        x: TensorId,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Execution-ordered record of primitive operations.
#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of `id`, materializing zeros for tensors not on any path to
    /// the loss.
    pub fn take(&mut self, id: TensorId, len: usize) -> Vec<S> {
        match self.grads[id.0].take() {
            Some(g) => {
                debug_assert_eq!(g.len(), len);
                g
            }
            None => vec![S::zero(); len],
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Records an input tensor. Whether gradients flow into it is taken
    /// from the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<S>) -> TensorId {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, needs_grad: bool) -> TensorId {
        let value = Tensor::new(shape, data).expect("op produced a malformed tensor");
        self.push(value, op, needs_grad)
    }

    /// `a @ b` where `a` is `[m,k]` or `[batch,m,k]` (leading axes flattened
    /// into rows) and `b` is `[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.row_count(), av.last_dim(), bv.last_dim());
        let mut data = vec![S::zero(); m * n];
        mat_mul(av.data(), bv.data(), m, k, n, &mut data);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, Op::MatMul { a, b }, ng))
    }

    /// Adds a rank-1 bias along the last axis.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if bv.rank() != 1 || bv.len() != xv.last_dim() {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let n = bv.len();
        let mut data = xv.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + bv.data()[i % n];
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.out(shape, data, Op::AddBias { x, bias }, ng))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = av.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, Op::Add { a, b }, ng))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = av.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, Op::Mul { a, b }, ng))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: TensorId, factor: S) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::Scale { x, factor }, ng))
    }

    /// Multiplies row `r` (the tensor viewed as `[rows, last_dim]`) by the
    /// constant `factors[r]`. Factors are data, not tape tensors: no
    /// gradient flows into them.
    pub fn scale_rows(&mut self, x: TensorId, factors: Vec<S>) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.row_count(), xv.last_dim());
        if factors.len() != rows {
            return Err(shape_err(
                "scale_rows",
                format!("{:?} with {} row factors", xv.shape(), factors.len()),
            ));
        }
        let mut data = xv.data().to_vec();
        for (r, &f) in factors.iter().enumerate() {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v = *v * f;
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::ScaleRows { x, factors }, ng))
    }

    /// Concatenates two tensors along the last axis; leading axes must match.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let lead_a = &av.shape()[..av.rank() - 1];
        let lead_b = &bv.shape()[..bv.rank() - 1];
        if lead_a != lead_b {
            return Err(shape_err(
                "concat_last_axis",
                format!("{:?} ++ {:?}", av.shape(), bv.shape()),
            ));
        }
        let (rows, ca, cb) = (av.row_count(), av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, Op::ConcatLast { a, b }, ng))
    }

    /// Slice `[start, start+width)` of the last axis.
    pub fn narrow_last(&mut self, x: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let cols = xv.last_dim();
        if width == 0 || start + width > cols {
            return Err(shape_err(
                "narrow_last_axis",
                format!("[{start}, {start}+{width}) of {:?}", xv.shape()),
            ));
        }
        let rows = xv.row_count();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + width]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::NarrowLast { x, start, width }, ng))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v.tanh()).collect();
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::Tanh { x }, ng))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let one = S::one();
        let data = xv
            .data()
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::Sigmoid { x }, ng))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v.max(S::zero())).collect();
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::Relu { x }, ng))
    }

    /// Row-wise softmax over the last axis, computed with the max-shift
    /// trick.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.row_count(), xv.last_dim());
        let mut data = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            softmax_row(row, &mut data[r * cols..(r + 1) * cols]);
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::SoftmaxLast { x }, ng))
    }

    /// Looks up rows of `table` (`[vocab, dim]`) by index. The output shape
    /// is `prefix_shape + [dim]` with `prefix_shape` multiplying out to
    /// `ids.len()`.
    pub fn gather(
        &mut self,
        table: TensorId,
        ids: &[usize],
        prefix_shape: &[usize],
    ) -> Result<TensorId> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(shape_err(
                "embedding_gather",
                format!("table must be rank 2, got {:?}", tv.shape()),
            ));
        }
        let prefix: usize = prefix_shape.iter().product();
        if prefix != ids.len() || prefix_shape.is_empty() || prefix_shape.len() > 2 {
            return Err(shape_err(
                "embedding_gather",
                format!("prefix {prefix_shape:?} for {} ids", ids.len()),
            ));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(shape_err(
                    "embedding_gather",
                    format!("index {id} out of range for table [{vocab}, {dim}]"),
                ));
            }
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(dim);
        let ng = self.needs(table);
        Ok(self.out(
            shape,
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Temporal convolution with same (zero) padding and stride 1 over
    /// `x: [n, time, in_channels]` with `kernel: [width, in_channels,
    /// filters]` and `bias: [filters]`.
    pub fn conv1d_over_time(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let (xv, kv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        if xv.rank() != 3 || kv.rank() != 3 || bv.rank() != 1 {
            return Err(shape_err(
                "conv1d_over_time",
                format!("{:?}, {:?}, {:?}", xv.shape(), kv.shape(), bv.shape()),
            ));
        }
        let (n, time, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (width, kin, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if kin != cin || bv.len() != cout {
            return Err(shape_err(
                "conv1d_over_time",
                format!("{:?}, {:?}, {:?}", xv.shape(), kv.shape(), bv.shape()),
            ));
        }
        let pad = (width - 1) / 2;
        let mut data = vec![S::zero(); n * time * cout];
        for i in 0..n {
            for t in 0..time {
                let orow = &mut data[(i * time + t) * cout..(i * time + t + 1) * cout];
                orow.copy_from_slice(bv.data());
                for w in 0..width {
                    let src = t + w;
                    if src < pad || src - pad >= time {
                        continue;
                    }
                    let xrow =
                        &xv.data()[(i * time + src - pad) * cin..(i * time + src - pad + 1) * cin];
                    for (ci, &a) in xrow.iter().enumerate() {
                        let krow = &kv.data()[(w * cin + ci) * cout..(w * cin + ci + 1) * cout];
                        for (o, &k) in orow.iter_mut().zip(krow) {
                            *o = *o + a * k;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.out(
            vec![n, time, cout],
            data,
            Op::Conv1d { x, kernel, bias },
            ng,
        ))
    }

    /// Max over the time axis of `x: [n, time, channels]`, ties to the
    /// earliest position.
    pub fn max_pool_over_time(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 {
            return Err(shape_err(
                "max_pool_over_time",
                format!("expected rank 3, got {:?}", xv.shape()),
            ));
        }
        let (n, time, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = vec![S::zero(); n * ch];
        let mut argmax = vec![0usize; n * ch];
        for i in 0..n {
            for c in 0..ch {
                let mut best = xv.data()[(i * time) * ch + c];
                let mut best_t = 0;
                for t in 1..time {
                    let v = xv.data()[(i * time + t) * ch + c];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                data[i * ch + c] = best;
                argmax[i * ch + c] = best_t;
            }
        }
        let ng = self.needs(x);
        Ok(self.out(vec![n, ch], data, Op::MaxPoolTime { x, argmax }, ng))
    }

    /// Inverted dropout. In eval mode this is the identity (the input id is
    /// returned and nothing is recorded); in train mode each element is
    /// zeroed with probability `rate` and survivors scale by `1/(1-rate)`.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        train_mode: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if !train_mode || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let xv = &self.nodes[x.0].value;
        let mask: Vec<S> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::Dropout { x, mask }, ng))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != xv.len() || shape.is_empty() || shape.len() > 3 {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", xv.shape(), shape),
            ));
        }
        let data = xv.data().to_vec();
        let ng = self.needs(x);
        Ok(self.out(shape, data, Op::Reshape { x }, ng))
    }

    /// Slice `x[:, t, :]` of `x: [batch, time, dim]`.
    pub fn select_time(&mut self, x: TensorId, t: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || t >= xv.shape()[1] {
            return Err(shape_err(
                "select_time",
                format!("t={t} of {:?}", xv.shape()),
            ));
        }
        let (batch, time, dim) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            data.extend_from_slice(&xv.data()[(b * time + t) * dim..(b * time + t + 1) * dim]);
        }
        let ng = self.needs(x);
        Ok(self.out(vec![batch, dim], data, Op::SelectTime { x, t }, ng))
    }

    /// Stacks `time` rank-2 tensors `[batch, dim]` into `[batch, time, dim]`.
    pub fn stack_time(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(shape_err("stack_time", "no inputs".into()));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if first.len() != 2 {
            return Err(shape_err(
                "stack_time",
                format!("expected rank 2 inputs, got {first:?}"),
            ));
        }
        for &x in xs {
            if self.nodes[x.0].value.shape() != first.as_slice() {
                return Err(shape_err(
                    "stack_time",
                    format!(
                        "mismatched input {:?} vs {:?}",
                        self.nodes[x.0].value.shape(),
                        first
                    ),
                ));
            }
        }
        let (batch, dim) = (first[0], first[1]);
        let time = xs.len();
        let mut data = vec![S::zero(); batch * time * dim];
        for (t, &x) in xs.iter().enumerate() {
            let xd = self.nodes[x.0].value.data();
            for b in 0..batch {
                data[(b * time + t) * dim..(b * time + t + 1) * dim]
                    .copy_from_slice(&xd[b * dim..(b + 1) * dim]);
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.out(
            vec![batch, time, dim],
            data,
            Op::StackTime { xs: xs.to_vec() },
            ng,
        ))
    }

    /// Mean of `x: [batch, time, dim]` over valid time positions, weighted
    /// by a 0/1 `mask` of length `batch*time`.
    pub fn masked_mean_over_time(&mut self, x: TensorId, mask: &[S]) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || mask.len() != xv.shape()[0] * xv.shape()[1] {
            return Err(shape_err(
                "masked_mean_over_time",
                format!("{:?} with mask of {}", xv.shape(), mask.len()),
            ));
        }
        let (batch, time, dim) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let half = S::from_f64(0.5);
        let mut counts = vec![S::zero(); batch];
        for b in 0..batch {
            counts[b] = mask[b * time..(b + 1) * time].iter().copied().sum();
            if counts[b] < half {
                return Err(Error::Invalid(format!(
                    "masked_mean_over_time: batch row {b} has no valid positions"
                )));
            }
        }
        let mut data = vec![S::zero(); batch * dim];
        for b in 0..batch {
            for t in 0..time {
                let m = mask[b * time + t];
                if m <= S::zero() {
                    continue;
                }
                let xrow = &xv.data()[(b * time + t) * dim..(b * time + t + 1) * dim];
                let orow = &mut data[b * dim..(b + 1) * dim];
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o = *o + m * v;
                }
            }
            for o in &mut data[b * dim..(b + 1) * dim] {
                *o = *o / counts[b];
            }
        }
        let ng = self.needs(x);
        Ok(self.out(
            vec![batch, dim],
            data,
            Op::MaskedMeanTime {
                x,
                mask: mask.to_vec(),
                counts,
            },
            ng,
        ))
    }

    /// Mean cross-entropy over valid rows. `logits` is `[rows, classes]` or
    /// `[batch, time, classes]` (rows = batch*time); `targets` and `mask`
    /// have one entry per row. Masked rows contribute nothing, so their
    /// logits are irrelevant. Errors when the mask has no valid rows.
    pub fn masked_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[S],
    ) -> Result<TensorId> {
        let lv = &self.nodes[logits.0].value;
        let (rows, classes) = (lv.row_count(), lv.last_dim());
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err(
                "masked_cross_entropy",
                format!(
                    "{:?} with {} targets, {} mask entries",
                    lv.shape(),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let half = S::from_f64(0.5);
        let valid = mask.iter().filter(|&&m| m > half).count();
        if valid == 0 {
            return Err(Error::Invalid(
                "masked_cross_entropy: mask has no valid positions".into(),
            ));
        }
        let mut probs = vec![S::zero(); rows * classes];
        let mut total = S::zero();
        for r in 0..rows {
            if mask[r] <= half {
                continue;
            }
            let target = targets[r];
            if target >= classes {
                return Err(Error::Invalid(format!(
                    "masked_cross_entropy: target {target} out of range for {classes} classes"
                )));
            }
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let prow = &mut probs[r * classes..(r + 1) * classes];
            softmax_row(row, prow);
            // -log p[target], computed from the shifted logits for stability
            let max = row.iter().copied().fold(row[0], |a, b| a.max(b));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total = total + (lse - row[target]);
        }
        let loss = total / S::from_f64(valid as f64);
        let ng = self.needs(logits);
        Ok(self.out(
            vec![1],
            vec![loss],
            Op::MaskedCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                valid,
            },
            ng,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let total = xv.data().iter().copied().sum();
        let ng = self.needs(x);
        Ok(self.out(vec![1], vec![total], Op::SumAll { x }, ng))
    }

    /// Reverse accumulation from a scalar loss. Gradients are summed where
    /// a tensor feeds several consumers; tensors on no path to the loss get
    /// zero gradient (materialized lazily by [`Gradients::take`]).
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Vec<S>>],
        id: TensorId,
    ) -> Option<&'g mut Vec<S>> {
        if !self.needs(id) {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn accumulate(&self, i: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.row_count(), av.last_dim(), bv.last_dim());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    mat_mul_bt(gy, bv.data(), m, n, k, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    mat_mul_at(av.data(), gy, m, k, n, gb);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    add_assign(gx, gy);
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let n = gb.len();
                    for (i, &g) in gy.iter().enumerate() {
                        gb[i % n] = gb[i % n] + g;
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_assign(ga, gy);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    add_assign(gb, gy);
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let bd = self.nodes[b.0].value.data();
                    for ((g, &u), &v) in ga.iter_mut().zip(gy).zip(bd) {
                        *g = *g + u * v;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let ad = self.nodes[a.0].value.data();
                    for ((g, &u), &v) in gb.iter_mut().zip(gy).zip(ad) {
                        *g = *g + u * v;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (g, &u) in gx.iter_mut().zip(gy) {
                        *g = *g + u * *factor;
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let cols = gx.len() / factors.len();
                    for (r, &f) in factors.iter().enumerate() {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gx[idx] = gx[idx] + gy[idx] * f;
                        }
                    }
                }
            }
            Op::ConcatLast { a, b } => {
                let ca = self.nodes[a.0].value.last_dim();
                let cb = self.nodes[b.0].value.last_dim();
                let rows = y.row_count();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..rows {
                        let src = &gy[r * (ca + cb)..r * (ca + cb) + ca];
                        add_assign(&mut ga[r * ca..(r + 1) * ca], src);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..rows {
                        let src = &gy[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                        add_assign(&mut gb[r * cb..(r + 1) * cb], src);
                    }
                }
            }
            Op::NarrowLast { x, start, width } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let cols = self.nodes[x.0].value.last_dim();
                    let rows = y.row_count();
                    for r in 0..rows {
                        let dst = &mut gx[r * cols + start..r * cols + start + width];
                        add_assign(dst, &gy[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((g, &u), &v) in gx.iter_mut().zip(gy).zip(y.data()) {
                        *g = *g + u * (S::one() - v * v);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((g, &u), &v) in gx.iter_mut().zip(gy).zip(y.data()) {
                        *g = *g + u * v * (S::one() - v);
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let xd = self.nodes[x.0].value.data();
                    for ((g, &u), &v) in gx.iter_mut().zip(gy).zip(xd) {
                        if v > S::zero() {
                            *g = *g + u;
                        }
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let cols = y.last_dim();
                    for r in 0..y.row_count() {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &gy[r * cols..(r + 1) * cols];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    let dim = self.nodes[table.0].value.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        add_assign(dst, &gy[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let xv = &self.nodes[x.0].value;
                let kv = &self.nodes[kernel.0].value;
                let (n, time, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (width, _, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let pad = (width - 1) / 2;
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in 0..n * time {
                        add_assign(gb, &gy[row * cout..(row + 1) * cout]);
                    }
                }
                if let Some(gk) = self.grad_slot(grads, *kernel) {
                    for i in 0..n {
                        for t in 0..time {
                            let grow = &gy[(i * time + t) * cout..(i * time + t + 1) * cout];
                            for w in 0..width {
                                let src = t + w;
                                if src < pad || src - pad >= time {
                                    continue;
                                }
                                let xrow = &xv.data()[(i * time + src - pad) * cin..];
                                for ci in 0..cin {
                                    let a = xrow[ci];
                                    let dst =
                                        &mut gk[(w * cin + ci) * cout..(w * cin + ci + 1) * cout];
                                    for (d, &g) in dst.iter_mut().zip(grow) {
                                        *d = *d + a * g;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..n {
                        for t in 0..time {
                            let grow = &gy[(i * time + t) * cout..(i * time + t + 1) * cout];
                            for w in 0..width {
                                let src = t + w;
                                if src < pad || src - pad >= time {
                                    continue;
                                }
                                let dst = &mut gx[(i * time + src - pad) * cin
                                    ..(i * time + src - pad + 1) * cin];
                                for (ci, d) in dst.iter_mut().enumerate() {
                                    let krow = &kv.data()
                                        [(w * cin + ci) * cout..(w * cin + ci + 1) * cout];
                                    let mut acc = S::zero();
                                    for (&k, &g) in krow.iter().zip(grow) {
                                        acc = acc + k * g;
                                    }
                                    *d = *d + acc;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPoolTime { x, argmax } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let xv = &self.nodes[x.0].value;
                    let (time, ch) = (xv.shape()[1], xv.shape()[2]);
                    for (i, (&g, &t)) in gy.iter().zip(argmax).enumerate() {
                        let (row, c) = (i / ch, i % ch);
                        let idx = (row * time + t) * ch + c;
                        gx[idx] = gx[idx] + g;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((g, &u), &m) in gx.iter_mut().zip(gy).zip(mask) {
                        *g = *g + u * m;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    add_assign(gx, gy);
                }
            }
            Op::SelectTime { x, t } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let xv = &self.nodes[x.0].value;
                    let (time, dim) = (xv.shape()[1], xv.shape()[2]);
                    let batch = xv.shape()[0];
                    for b in 0..batch {
                        let dst = &mut gx[(b * time + t) * dim..(b * time + t + 1) * dim];
                        add_assign(dst, &gy[b * dim..(b + 1) * dim]);
                    }
                }
            }
            Op::StackTime { xs } => {
                let (batch, time, dim) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                for (t, &x) in xs.iter().enumerate() {
                    if let Some(gx) = self.grad_slot(grads, x) {
                        for b in 0..batch {
                            let dst = &mut gx[b * dim..(b + 1) * dim];
                            add_assign(dst, &gy[(b * time + t) * dim..(b * time + t + 1) * dim]);
                        }
                    }
                }
            }
            Op::MaskedMeanTime { x, mask, counts } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let xv = &self.nodes[x.0].value;
                    let (batch, time, dim) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    for b in 0..batch {
                        for t in 0..time {
                            let m = mask[b * time + t];
                            if m <= S::zero() {
                                continue;
                            }
                            let f = m / counts[b];
                            let dst = &mut gx[(b * time + t) * dim..(b * time + t + 1) * dim];
                            for (d, &g) in dst.iter_mut().zip(&gy[b * dim..(b + 1) * dim]) {
                                *d = *d + f * g;
                            }
                        }
                    }
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                probs,
                targets,
                mask,
                valid,
            } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let classes = self.nodes[logits.0].value.last_dim();
                    let half = S::from_f64(0.5);
                    let scale = gy[0] / S::from_f64(*valid as f64);
                    for (r, (&m, &target)) in mask.iter().zip(targets).enumerate() {
                        if m <= half {
                            continue;
                        }
                        let prow = &probs[r * classes..(r + 1) * classes];
                        let dst = &mut gl[r * classes..(r + 1) * classes];
                        for (c, (d, &p)) in dst.iter_mut().zip(prow).enumerate() {
                            let indicator = if c == target { S::one() } else { S::zero() };
                            *d = *d + scale * (p - indicator);
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let g = gy[0];
                    for v in gx.iter_mut() {
                        *v = *v + g;
                    }
                }
            }
        }
    }
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(row[0], |a, b| a.max(b));
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`.
fn mat_mul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += g @ bᵀ` with `g: [m,n]`, `b: [k,n]`, `out: [m,k]`.
fn mat_mul_bt<S: Scalar>(g: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            *o = *o + acc;
        }
    }
}

/// `out += aᵀ @ g` with `a: [m,k]`, `g: [m,n]`, `out: [k,n]`.
fn mat_mul_at<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}
