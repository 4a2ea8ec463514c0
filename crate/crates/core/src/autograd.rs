//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose parents already live on the tape, so the
//! insertion order is a topological order and `backward` is a single reverse
//! sweep. Gradients are kept for leaves created with `requires_grad` and for
//! interior nodes marked with [`Tape::retain_grad`]; everything else is
//! dropped once the sweep finishes.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-element coefficients of the weighted binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceCoefficients {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Select {
        input: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    BinaryCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        coefficients: BceCoefficients,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::FullyConnected { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::GlobalAvgPool(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MaxPool2d { input: x, .. }
            | Op::Select { input: x, .. }
            | Op::CrossEntropy { logits: x, .. }
            | Op::BinaryCrossEntropy { logits: x, .. } => vec![*x],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Relu(_) => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::FullyConnected { .. } => "fully_connected",
            Op::Softmax(_) => "softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Select { .. } => "select",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    retain: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of a forward computation, replayed backwards for gradients.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Keep the gradient of an interior node after `backward`.
    ///
    /// Must be called before the node's consumers are recorded: a retained
    /// node is treated as differentiable even when none of its own inputs are.
    pub fn retain_grad(&mut self, var: Var) {
        let node = &mut self.nodes[var.0];
        node.retain = true;
        node.requires_grad = true;
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes[var.0].grad.as_ref()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        debug_assert!(
            value.all_finite() || !op.parents().iter().all(|p| self.nodes[p.0].value.all_finite()),
            "{} produced a non-finite value from finite inputs",
            op.name()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, geometry) = ops::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
        ))
    }

    /// Adds `bias[c]` to every cell of channel `c` of a `[B, C, H, W]` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let s = x.shape();
        if s.len() != 4 || b.shape() != [s[1]] {
            return Err(Error::shape(
                "channel_bias",
                format!("input {:?}, bias {:?}", s, b.shape()),
            ));
        }
        let plane = s[2] * s[3];
        let mut out = x.clone();
        for (chunk_index, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let bc = b.data()[chunk_index % s[1]];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self.push(out, Op::ChannelBias { input, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(input))
    }

    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d_forward(self.value(input), size)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::fully_connected(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::FullyConnected { input, weight, bias }))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(logits))?;
        Ok(self.push(out, Op::Softmax(logits)))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid(input))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|v| v.f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.data().iter().map(|v| v.f64()).sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(T::of(s)), Op::Mean(input))
    }

    /// Scalar view of one element, addressed by flat row-major index.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let v = *x
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("select", format!("index {index} out of {} elements", x.len())))?;
        Ok(self.push(Tensor::scalar(v), Op::Select { input, index }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", s, labels.len()),
            ));
        }
        let mut total = 0.0;
        for (row, &label) in x.data().chunks_exact(s[1]).zip(labels) {
            let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            total -= ops::log_softmax_row(&row)[label];
        }
        let loss = Tensor::scalar(T::of(total / labels.len().max(1) as f64));
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Weighted binary cross-entropy on pre-sigmoid logits `[B, C]`, where
    /// `labels[n]` is the single positive class of row `n`:
    ///
    /// `L = (1/B) Σ_n [ pos · softplus(-z_{n,y}) + neg · Σ_{k≠y} softplus(z_{n,k}) ]`
    ///
    /// which equals `-(1/B) Σ_n [pos · log σ(z_y) + neg · Σ log(1 - σ(z_k))]`.
    pub fn binary_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        coefficients: BceCoefficients,
    ) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("logits {:?} with {} labels", s, labels.len()),
            ));
        }
        let mut total = 0.0;
        for (row, &label) in x.data().chunks_exact(s[1]).zip(labels) {
            for (k, z) in row.iter().enumerate() {
                let z = z.f64();
                total += if k == label {
                    coefficients.positive * ops::softplus(-z)
                } else {
                    coefficients.negative * ops::softplus(z)
                };
            }
        }
        let loss = Tensor::scalar(T::of(total / labels.len().max(1) as f64));
        Ok(self.push(
            loss,
            Op::BinaryCrossEntropy {
                logits,
                labels: labels.to_vec(),
                coefficients,
            },
        ))
    }

    /// Populate gradients of the scalar `root` with respect to every
    /// differentiable node reachable from it.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.local_backward(idx, &g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[idx];
            if node.retain || matches!(node.op, Op::Leaf) {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                let (dx, dk) = ops::conv2d_backward(
                    geometry,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    needs(input),
                    needs(kernel),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, dk));
                }
                out
            }
            Op::ChannelBias { input, bias } => {
                let s = g.shape();
                let plane = s[2] * s[3];
                let mut db = vec![0.0f64; s[1]];
                for (i, chunk) in g.data().chunks_exact(plane).enumerate() {
                    db[i % s[1]] += chunk.iter().map(|v| v.f64()).sum::<f64>();
                }
                let db = Tensor::new([s[1]], db.into_iter().map(T::of).collect()).unwrap();
                vec![(*input, g.clone()), (*bias, db)]
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::new(xv.shape(), data).unwrap())]
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let d = dx.data_mut();
                for (&src, &gi) in argmax.iter().zip(g.data()) {
                    d[src] += gi;
                }
                vec![(*input, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let cells = s[2] * s[3];
                let scale = 1.0 / cells as f64;
                let mut data = Vec::with_capacity(s.iter().product());
                for &gi in g.data() {
                    let v = T::of(gi.f64() * scale);
                    data.extend(std::iter::repeat_n(v, cells));
                }
                vec![(*x, Tensor::new(s, data).unwrap())]
            }
            Op::FullyConnected { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (batch, n, c) = (x.shape()[0], w.shape()[0], w.shape()[1]);
                let (xd, wd, gd) = (x.data(), w.data(), g.data());
                let mut out = Vec::new();
                if needs(input) {
                    let mut dx = Vec::with_capacity(batch * n);
                    for b in 0..batch {
                        for i in 0..n {
                            let acc: f64 = (0..c).map(|k| gd[b * c + k].f64() * wd[i * c + k].f64()).sum();
                            dx.push(T::of(acc));
                        }
                    }
                    out.push((*input, Tensor::new([batch, n], dx).unwrap()));
                }
                if needs(weight) {
                    let mut dw = Vec::with_capacity(n * c);
                    for i in 0..n {
                        for k in 0..c {
                            let acc: f64 = (0..batch)
                                .map(|b| xd[b * n + i].f64() * gd[b * c + k].f64())
                                .sum();
                            dw.push(T::of(acc));
                        }
                    }
                    out.push((*weight, Tensor::new([n, c], dw).unwrap()));
                }
                if needs(bias) {
                    let db = (0..c)
                        .map(|k| T::of((0..batch).map(|b| gd[b * c + k].f64()).sum()))
                        .collect();
                    out.push((*bias, Tensor::new([c], db).unwrap()));
                }
                out
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.shape()[1];
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                    dx.extend(yr.iter().zip(gr).map(|(a, b)| T::of(a.f64() * (b.f64() - dot))));
                }
                vec![(*x, Tensor::new(y.shape(), dx).unwrap())]
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gi)| T::of(s.f64() * (1.0 - s.f64()) * gi.f64()))
                    .collect();
                vec![(*x, Tensor::new(y.shape(), data).unwrap())]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
                let db = g.data().iter().zip(av.data()).map(|(&p, &q)| p * q).collect();
                vec![
                    (*a, Tensor::new(av.shape(), da).unwrap()),
                    (*b, Tensor::new(bv.shape(), db).unwrap()),
                ]
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(self.value(*x).shape(), gv))]
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = T::of(g.data()[0].f64() / xv.len().max(1) as f64);
                vec![(*x, Tensor::full(xv.shape(), gv))]
            }
            Op::Select { input, index } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                dx.data_mut()[*index] = g.data()[0];
                vec![(*input, dx)]
            }
            Op::CrossEntropy { logits, labels } => {
                let x = self.value(*logits);
                let c = x.shape()[1];
                let scale = g.data()[0].f64() / labels.len().max(1) as f64;
                let mut dx = Vec::with_capacity(x.len());
                for (row, &label) in x.data().chunks_exact(c).zip(labels) {
                    let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
                    let logp = ops::log_softmax_row(&row);
                    for (k, lp) in logp.iter().enumerate() {
                        let onehot = if k == label { 1.0 } else { 0.0 };
                        dx.push(T::of(scale * (lp.exp() - onehot)));
                    }
                }
                vec![(*logits, Tensor::new(x.shape(), dx).unwrap())]
            }
            Op::BinaryCrossEntropy {
                logits,
                labels,
                coefficients,
            } => {
                let x = self.value(*logits);
                let c = x.shape()[1];
                let scale = g.data()[0].f64() / labels.len().max(1) as f64;
                let mut dx = Vec::with_capacity(x.len());
                for (row, &label) in x.data().chunks_exact(c).zip(labels) {
                    for (k, z) in row.iter().enumerate() {
                        let s = ops::sigmoid_scalar(z.f64());
                        let d = if k == label {
                            -coefficients.positive * (1.0 - s)
                        } else {
                            coefficients.negative * s
                        };
                        dx.push(T::of(scale * d));
                    }
                }
                vec![(*logits, Tensor::new(x.shape(), dx).unwrap())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([2, 3], |i| i as f64 * 0.5 - 1.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn sigmoid_of_product_at_origin() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(0.0));
        let x = tape.constant(Tensor::scalar(1.0));
        let wx = tape.mul(w, x).unwrap();
        let s = tape.sigmoid(wx);
        tape.backward(s).unwrap();
        assert!((tape.grad(w).unwrap().data()[0] - 0.25).abs() < 1e-15);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros([3]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn retained_interior_gradient_survives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 2, 2], |i| i as f64));
        let r = tape.relu(x);
        tape.retain_grad(r);
        let pooled = tape.global_avg_pool(r).unwrap();
        let w = tape.constant(Tensor::new([2, 1], vec![2.0, -1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([1]));
        let logits = tape.fully_connected(pooled, w, b).unwrap();
        let root = tape.select(logits, 0).unwrap();
        tape.backward(root).unwrap();
        let g = tape.grad(r).unwrap();
        assert_eq!(g.data()[..4], [0.5; 4]);
        assert_eq!(g.data()[4..], [-0.25; 4]);
        // Unretained interior nodes do not keep gradients.
        assert!(tape.grad(pooled).is_none());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn([2, 3, 6, 6], |i| {
            ((i * 37) % 11) as f32 / 7.0 - 0.6
        }));
        let k = tape.param(Tensor::from_fn([4, 3, 3, 3], |i| {
            ((i * 13) % 7) as f32 / 5.0 - 0.5
        }));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let r = tape.relu(y);
        let p = tape.max_pool2d(r, 2).unwrap();
        let s = tape.mean(p);
        tape.backward(s).unwrap();
        let first = (tape.grad(x).unwrap().clone(), tape.grad(k).unwrap().clone());
        tape.backward(s).unwrap();
        assert!(first.0.bits_eq(tape.grad(x).unwrap()));
        assert!(first.1.bits_eq(tape.grad(k).unwrap()));
    }
}
