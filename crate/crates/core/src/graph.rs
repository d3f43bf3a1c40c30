//! Reverse-mode automatic differentiation over [`Tensor`] kernels.
//!
//! A [`Graph`] records every operation applied to its variables in execution
//! order, so parents always precede children and a single reverse sweep
//! visits each node once. A graph can be differentiated exactly once; a
//! second [`Graph::backward`] is an error rather than a silent accumulation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{normal_cdf, normal_pdf, split_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu(Var),
    Concat(Var, Var, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    MeanAxis(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<S>,
    },
}

impl<S> Op<S> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Concat(a, b, _) => {
                vec![*a, *b]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Softmax(x, _)
            | Op::Gelu(x)
            | Op::Narrow { x, .. }
            | Op::Reshape(x)
            | Op::MeanAxis(x, _)
            | Op::Sum(x)
            | Op::CrossEntropy { logits: x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operands of `v`, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the differentiated loss with respect to `v`, if `v` was
    /// reached by the backward sweep.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds a leaf whose gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.derived(out, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_bias(self.value(bias))?;
        Ok(self.derived(out, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).scale(c);
        self.derived(out, Op::Scale(x, c))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.derived(out, Op::Softmax(x, axis)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (out, xhat, inv_std) =
            self.value(x)
                .layer_norm_parts(self.value(gamma), self.value(beta), eps)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        self.derived(out, Op::Gelu(x))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let out = Tensor::concat(self.value(a), self.value(b), axis)?;
        Ok(self.derived(out, Op::Concat(a, b, axis)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.derived(out, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).mean_axis(axis)?;
        Ok(self.derived(out, Op::MeanAxis(x, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = self.value(x).sum();
        self.derived(out, Op::Sum(x))
    }

    /// Softmax cross-entropy of a logit vector against an integer class.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 {
            return Err(Error::shape(format!(
                "cross_entropy expects a logit vector, got {:?}",
                z.shape()
            )));
        }
        if label >= z.numel() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                z.numel()
            )));
        }
        let probs = z.softmax(0)?.into_data();
        let max = z.data().iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + z.data().iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        let loss = Tensor::scalar(lse - z.data()[label]);
        Ok(self.derived(
            loss,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Populates gradients of the scalar `loss` on every ancestor that
    /// requires them. Leaf tensors receive their gradient in
    /// [`Tensor::grad`] as well as through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on one graph".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Graph(
                "loss is detached: no ancestor requires a gradient".into(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(dy);
                continue;
            }
            for (parent, g) in self.adjoint(node, &dy)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
            }
            grads[id] = Some(dy);
        }

        for (node, grad) in self.nodes.iter_mut().zip(&grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, grad) {
                node.value.set_grad(g.clone())?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn adjoint(&self, node: &Node<S>, dy: &[S]) -> Result<Vec<(Var, Vec<S>)>> {
        let y = &node.value;
        let dy_t = || Tensor::new(y.shape().to_vec(), dy.to_vec());
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let dy = dy_t()?;
                let da = dy.matmul(&self.value(*b).transpose()?)?;
                let db = self.value(*a).transpose()?.matmul(&dy)?;
                vec![(*a, da.into_data()), (*b, db.into_data())]
            }
            Op::Transpose(x) => vec![(*x, dy_t()?.transpose()?.into_data())],
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::AddBias(x, b) => {
                let d = self.value(*b).numel();
                let mut db = vec![S::zero(); d];
                for row in dy.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                }
                vec![(*x, dy.to_vec()), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, dy.iter().map(|&g| g * *c).collect())],
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let yv = y.data();
                let mut dx = vec![S::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: S = (0..n).map(|j| dy[idx(j)] * yv[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = yv[idx(j)] * (dy[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let d = g.len();
                let width = S::from_usize(d).unwrap();
                let mut dx = vec![S::zero(); dy.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let (dyr, xh) = (&dy[rows.clone()], &xhat[rows.clone()]);
                    let mut mean_g = S::zero();
                    let mut mean_gx = S::zero();
                    for j in 0..d {
                        let gh = dyr[j] * g[j];
                        mean_g = mean_g + gh;
                        mean_gx = mean_gx + gh * xh[j];
                        dgamma[j] = dgamma[j] + dyr[j] * xh[j];
                        dbeta[j] = dbeta[j] + dyr[j];
                    }
                    mean_g = mean_g / width;
                    mean_gx = mean_gx / width;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dyr[j] * g[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let dx = xs
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| g * (normal_cdf(v) + v * normal_pdf(v)))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Concat(a, b, axis) => {
                let dy = dy_t()?;
                let na = self.value(*a).shape()[*axis];
                let nb = self.value(*b).shape()[*axis];
                vec![
                    (*a, dy.narrow(*axis, 0, na)?.into_data()),
                    (*b, dy.narrow(*axis, na, nb)?.into_data()),
                ]
            }
            Op::Narrow { x, axis, start } => {
                let xshape = self.value(*x).shape();
                let (outer, n, inner) = split_axis(xshape, *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let src = &dy[o * len * inner..(o + 1) * len * inner];
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, dy.to_vec())],
            Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.value(*x).shape(), *axis);
                let denom = S::from_usize(n).unwrap();
                let mut dx = vec![S::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] = dy[o * inner + i] / denom;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![dy[0]; self.value(*x).numel()])],
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut dx: Vec<S> = probs.iter().map(|&p| p * dy[0]).collect();
                dx[*label] = dx[*label] - dy[0];
                vec![(*logits, dx)]
            }
        };
        Ok(out)
    }
}
