//! Reverse-mode automatic differentiation over a linear tape.
//!
//! The tape is define-by-run: every forward pass records its ops in execution
//! order, and `backward` replays them in exact reverse order, accumulating
//! vector-Jacobian products. A tape and its tensors are confined to one
//! thread; independent tapes can run on independent threads.
//!
//! Any op whose output contains a NaN or infinity fails immediately with
//! [`Error::NonFinite`] rather than letting the value propagate.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Silu { a: Var },
    RmsNorm { a: Var, gain: Var, eps: T },
    SoftmaxLastDim { a: Var },
    AttnScores { q: Var, k: Var },
    CausalSoftmax { a: Var },
    AttnMix { weights: Var, v: Var },
    Rope { a: Var, theta: f64, offset: usize },
    Reshape { a: Var },
    Transpose { a: Var },
    SliceRows { a: Var, start: usize },
    Embed { table: Var, tokens: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed ops with enough state to run reverse-mode
/// accumulation. Rebuilt per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf that does not receive gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Record a leaf that accumulates gradient during `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf or intermediate, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape tracks value")
        })
    }

    fn push_op(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Silu { a }
            | Op::SoftmaxLastDim { a }
            | Op::CausalSoftmax { a }
            | Op::Rope { a, .. }
            | Op::Reshape { a }
            | Op::Transpose { a }
            | Op::SliceRows { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::RmsNorm { a, gain, .. } => vec![*a, *gain],
            Op::AttnScores { q, k } => vec![*q, *k],
            Op::AttnMix { weights, v } => vec![*weights, *v],
            Op::Embed { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a 2-d tensor, got {:?}", other),
            }),
        }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [a, b, c] => Ok((*a, *b, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a 3-d tensor, got {:?}", other),
            }),
        }
    }

    // ---- op constructors -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims disagree: {:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, ka, n, out.data_mut());
        self.push_op("matmul", out, Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op(name, out, op)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op("scale", out, Op::Scale { a, factor })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let mut out = Tensor::zeros(self.shape(a).to_vec());
        kernels::silu(self.value(a).data(), out.data_mut());
        self.push_op("silu", out, Op::Silu { a })
    }

    /// RMS normalization along the last axis with a learned gain vector.
    pub fn rmsnorm(&mut self, a: Var, gain: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "rmsnorm",
            detail: "input must have at least one axis".into(),
        })?;
        if self.shape(gain) != [d] {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                detail: format!("gain {:?} does not match last dim {}", self.shape(gain), d),
            });
        }
        let rows = self.value(a).len() / d;
        let mut out = Tensor::zeros(shape);
        kernels::rmsnorm_rows(
            self.value(a).data(),
            self.value(gain).data(),
            eps,
            rows,
            d,
            out.data_mut(),
        );
        self.push_op("rmsnorm", out, Op::RmsNorm { a, gain, eps })
    }

    /// Softmax along the last axis (rows of the trailing dimension).
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax_lastdim",
            detail: "input must have at least one axis".into(),
        })?;
        let rows = self.value(a).len() / cols;
        let mut out = Tensor::zeros(shape);
        kernels::softmax_rows(self.value(a).data(), rows, cols, out.data_mut());
        self.push_op("softmax_lastdim", out, Op::SoftmaxLastDim { a })
    }

    /// Causal attention logits: q, k are [t, heads, hd] -> [heads, t, t].
    pub fn attn_scores(&mut self, q: Var, k: Var) -> Result<Var> {
        let (t, heads, hd) = self.dims3("attn_scores", q)?;
        if self.shape(k) != [t, heads, hd] {
            return Err(Error::ShapeMismatch {
                op: "attn_scores",
                detail: format!("q {:?} vs k {:?}", self.shape(q), self.shape(k)),
            });
        }
        let mut out = Tensor::zeros(vec![heads, t, t]);
        kernels::attn_scores(self.value(q).data(), self.value(k).data(), t, heads, hd, out.data_mut());
        self.push_op("attn_scores", out, Op::AttnScores { q, k })
    }

    /// Softmax over each causal prefix of a [heads, t, t] score tensor.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (heads, t, t2) = self.dims3("causal_softmax", a)?;
        if t != t2 {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                detail: format!("scores must be square per head, got {:?}", self.shape(a)),
            });
        }
        let mut out = Tensor::zeros(vec![heads, t, t]);
        kernels::causal_softmax(self.value(a).data(), t, heads, out.data_mut());
        self.push_op("causal_softmax", out, Op::CausalSoftmax { a })
    }

    /// Mix cached values by attention weights: [heads,t,t] x [t,heads,hd]
    /// -> [t, heads*hd].
    pub fn attn_mix(&mut self, weights: Var, v: Var) -> Result<Var> {
        let (heads, t, _) = self.dims3("attn_mix", weights)?;
        let (tv, hv, hd) = self.dims3("attn_mix", v)?;
        if tv != t || hv != heads {
            return Err(Error::ShapeMismatch {
                op: "attn_mix",
                detail: format!("weights {:?} vs v {:?}", self.shape(weights), self.shape(v)),
            });
        }
        let mut out = Tensor::zeros(vec![t, heads * hd]);
        kernels::attn_mix(self.value(weights).data(), self.value(v).data(), t, heads, hd, out.data_mut());
        self.push_op("attn_mix", out, Op::AttnMix { weights, v })
    }

    /// Rotary embedding on [t, heads, hd]; rows rotate at absolute positions
    /// `offset..offset + t`.
    pub fn rope(&mut self, a: Var, theta: f64, offset: usize) -> Result<Var> {
        let (t, heads, hd) = self.dims3("rope", a)?;
        if hd % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                detail: format!("head dim must be even, got {hd}"),
            });
        }
        let mut out = Tensor::zeros(vec![t, heads, hd]);
        kernels::rope(self.value(a).data(), t, heads, hd, theta, offset, false, out.data_mut());
        self.push_op("rope", out, Op::Rope { a, theta, offset })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push_op("reshape", out, Op::Reshape { a })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let mut out = Tensor::zeros(vec![c, r]);
        kernels::transpose(self.value(a).data(), r, c, out.data_mut());
        self.push_op("transpose", out, Op::Transpose { a })
    }

    /// Contiguous row range of a 2-d tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, rows: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", a)?;
        if start + rows > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of 0..{r}", start + rows),
            });
        }
        let data = self.value(a).data()[start * c..(start + rows) * c].to_vec();
        let out = Tensor::new(vec![rows, c], data)?;
        self.push_op("slice_rows", out, Op::SliceRows { a, start })
    }

    /// Embedding lookup from a [vocab, d] table.
    pub fn embed(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embed", table)?;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Config(format!("token {bad} out of vocabulary range {vocab}")));
        }
        let mut out = Tensor::zeros(vec![tokens.len(), d]);
        kernels::embed(self.value(table).data(), tokens, d, out.data_mut());
        self.push_op("embed", out, Op::Embed { table, tokens: tokens.to_vec() })
    }

    /// Mean token-level negative log-likelihood; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2("cross_entropy", logits)?;
        if rows != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{rows} logit rows vs {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Config(format!("target {bad} out of vocabulary range {vocab}")));
        }
        let loss = kernels::cross_entropy(self.value(logits).data(), targets, vocab);
        self.push_op(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        self.push_op("sum", Tensor::scalar(acc), Op::Sum { a })
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// gradient-requiring ancestor; leaves without `requires_grad` stay
    /// untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn wants_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, contribution: &[T]) -> Result<()> {
        if contribution.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(grad) => {
                for (g, &c) in grad.iter_mut().zip(contribution) {
                    *g = *g + c;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
        Ok(())
    }

    /// Move-in variant: the first contribution becomes the grad buffer
    /// without a copy.
    fn accumulate_owned(&mut self, v: Var, contribution: Vec<T>) -> Result<()> {
        if contribution.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(grad) => {
                for (g, c) in grad.iter_mut().zip(contribution) {
                    *g = *g + c;
                }
            }
            None => node.grad = Some(contribution),
        }
        Ok(())
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op<T>, g: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants_grad(*a) {
                    // dA = dOut * B^T
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    self.accumulate_owned(*a, da)?;
                }
                if self.wants_grad(*b) {
                    // dB = A^T * dOut
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn(self.value(*a).data(), g, m, k, n, &mut db);
                    self.accumulate_owned(*b, db)?;
                }
            }
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g)?;
                }
                if self.wants_grad(*b) {
                    self.accumulate(*b, g)?;
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g)?;
                }
                if self.wants_grad(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accumulate_owned(*b, neg)?;
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    let da: Vec<T> =
                        g.iter().zip(self.value(*b).data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate_owned(*a, da)?;
                }
                if self.wants_grad(*b) {
                    let db: Vec<T> =
                        g.iter().zip(self.value(*a).data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate_owned(*b, db)?;
                }
            }
            Op::Scale { a, factor } => {
                if self.wants_grad(*a) {
                    let da: Vec<T> = g.iter().map(|&v| v * *factor).collect();
                    self.accumulate_owned(*a, da)?;
                }
            }
            Op::Silu { a } => {
                if self.wants_grad(*a) {
                    let mut da = vec![T::zero(); g.len()];
                    kernels::silu_backward(self.value(*a).data(), g, &mut da);
                    self.accumulate_owned(*a, da)?;
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let d = *self.shape(*a).last().expect("validated at record time");
                let rows = self.value(*a).len() / d;
                let mut da = vec![T::zero(); rows * d];
                let mut dgain = vec![T::zero(); d];
                kernels::rmsnorm_backward(
                    self.value(*a).data(),
                    self.value(*gain).data(),
                    *eps,
                    rows,
                    d,
                    g,
                    &mut da,
                    &mut dgain,
                );
                if self.wants_grad(*a) {
                    self.accumulate_owned(*a, da)?;
                }
                if self.wants_grad(*gain) {
                    self.accumulate_owned(*gain, dgain)?;
                }
            }
            Op::SoftmaxLastDim { a } => {
                if self.wants_grad(*a) {
                    let cols = *self.shape(*a).last().expect("validated at record time");
                    let rows = self.value(*a).len() / cols;
                    let y = self.nodes[out_idx].value.data();
                    let mut da = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        kernels::softmax_row_backward(
                            &y[r * cols..(r + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            &mut da[r * cols..(r + 1) * cols],
                        );
                    }
                    self.accumulate_owned(*a, da)?;
                }
            }
            Op::AttnScores { q, k } => {
                let (t, heads, hd) = match self.shape(*q) {
                    [t, h, hd] => (*t, *h, *hd),
                    _ => unreachable!("validated at record time"),
                };
                let mut dq = vec![T::zero(); t * heads * hd];
                let mut dk = vec![T::zero(); t * heads * hd];
                kernels::attn_scores_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    t,
                    heads,
                    hd,
                    g,
                    &mut dq,
                    &mut dk,
                );
                if self.wants_grad(*q) {
                    self.accumulate_owned(*q, dq)?;
                }
                if self.wants_grad(*k) {
                    self.accumulate_owned(*k, dk)?;
                }
            }
            Op::CausalSoftmax { a } => {
                if self.wants_grad(*a) {
                    let (heads, t) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let y = self.nodes[out_idx].value.data();
                    let mut da = vec![T::zero(); heads * t * t];
                    kernels::causal_softmax_backward(y, t, heads, g, &mut da);
                    self.accumulate_owned(*a, da)?;
                }
            }
            Op::AttnMix { weights, v } => {
                let (heads, t) = (self.shape(*weights)[0], self.shape(*weights)[1]);
                let hd = self.shape(*v)[2];
                let mut dw = vec![T::zero(); heads * t * t];
                let mut dv = vec![T::zero(); t * heads * hd];
                kernels::attn_mix_backward(
                    self.value(*weights).data(),
                    self.value(*v).data(),
                    t,
                    heads,
                    hd,
                    g,
                    &mut dw,
                    &mut dv,
                );
                if self.wants_grad(*weights) {
                    self.accumulate_owned(*weights, dw)?;
                }
                if self.wants_grad(*v) {
                    self.accumulate_owned(*v, dv)?;
                }
            }
            Op::Rope { a, theta, offset } => {
                if self.wants_grad(*a) {
                    let (t, heads, hd) = match self.shape(*a) {
                        [t, h, hd] => (*t, *h, *hd),
                        _ => unreachable!("validated at record time"),
                    };
                    let mut da = vec![T::zero(); t * heads * hd];
                    kernels::rope(g, t, heads, hd, *theta, *offset, true, &mut da);
                    self.accumulate_owned(*a, da)?;
                }
            }
            Op::Reshape { a } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g)?;
                }
            }
            Op::Transpose { a } => {
                if self.wants_grad(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![T::zero(); r * c];
                    kernels::transpose(g, c, r, &mut da);
                    self.accumulate_owned(*a, da)?;
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants_grad(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![T::zero(); r * c];
                    da[start * c..start * c + g.len()].copy_from_slice(g);
                    self.accumulate_owned(*a, da)?;
                }
            }
            Op::Embed { table, tokens } => {
                if self.wants_grad(*table) {
                    let (vocab, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let mut dt = vec![T::zero(); vocab * d];
                    for (i, &tok) in tokens.iter().enumerate() {
                        for c in 0..d {
                            dt[tok * d + c] = dt[tok * d + c] + g[i * d + c];
                        }
                    }
                    self.accumulate_owned(*table, dt)?;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants_grad(*logits) {
                    let vocab = self.shape(*logits)[1];
                    let mut dl = vec![T::zero(); self.value(*logits).len()];
                    kernels::cross_entropy_backward(
                        self.value(*logits).data(),
                        targets,
                        vocab,
                        g[0],
                        &mut dl,
                    );
                    self.accumulate_owned(*logits, dl)?;
                }
            }
            Op::Sum { a } => {
                if self.wants_grad(*a) {
                    let da = vec![g[0]; self.value(*a).len()];
                    self.accumulate_owned(*a, da)?;
                }
            }
        }
        Ok(())
    }
}

/// Compare the autodiff gradient of a scalar-valued tensor function against
/// central finite differences. Returns the worst relative error
/// `|ad - fd| / (|ad| + |fd| + 1e-12)` over all coordinates of `x`.
pub fn check_gradient<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let loss_value = tape.value(loss);
    if !loss_value.is_scalar() {
        return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
    }
    tape.backward(loss)?;
    let ad: Vec<f64> = match tape.grad(xv) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.input(point);
        let l = f(&mut t, v)?;
        t.value(l).item()
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let rel = (ad[i] - fd).abs() / (ad[i].abs() + fd.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
