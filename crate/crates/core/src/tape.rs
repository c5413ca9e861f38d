//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! whatever its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse once, accumulating gradients for named parameters and for leaves
//! created with [`Tape::input`]. Nodes that cannot reach a differentiable
//! leaf are never visited.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, BnMode};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Leaf {
    Constant,
    Input,
    Param(String),
}

enum Op<T> {
    Leaf(Leaf),
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, pad: usize },
    Conv1d { input: Var, kernel: Var, bias: Var, stride: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Softmax { input: Var, axis: usize },
    StatPool { input: Var },
    Squash { input: Var },
    Dropout { input: Var, mask: Vec<T> },
    RoutePredict { w: Var, u: Var },
    WeightedSum { c: Var, uhat: Var },
    Agreement { uhat: Var, v: Var },
    MeanAxis { input: Var, axis: usize },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { input: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    params: BTreeMap<String, Tensor<T>>,
    inputs: BTreeMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a parameter registered on the tape. Parameters that were
    /// recorded but do not influence the loss get zeros.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient for a leaf created with [`Tape::input`].
    pub fn input(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }

    /// Parameter gradients in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn take_input(&mut self, var: Var) -> Option<Tensor<T>> {
        self.inputs.remove(&var)
    }
}

/// Single-owner recording of a forward computation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    guided_relu: bool,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            guided_relu: false,
            consumed: false,
        }
    }

    /// Switch relu backward to the guided rule (used for saliency maps).
    pub fn set_guided_relu(&mut self, guided: bool) {
        self.guided_relu = guided;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, deps: &[Var]) -> Result<Var> {
        for &d in deps {
            self.check(d)?;
        }
        let needs = deps.iter().any(|&d| self.needs(d));
        self.push(value, op, needs)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(Leaf::Constant), false)
            .expect("constants may be added to a consumed tape only by mistake")
    }

    /// A leaf whose gradient is reported in [`Gradients::input`].
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf(Leaf::Input), true)
    }

    /// Register a named trainable parameter. Registering the same name twice
    /// returns the existing handle.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push(value.clone(), Op::Leaf(Leaf::Param(name.to_owned())), true)?;
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let y = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        self.record(y, Op::Conv2d { input, kernel, bias, stride, pad }, &[input, kernel, bias])
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let y = ops::conv1d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        self.record(y, Op::Conv1d { input, kernel, bias, stride }, &[input, kernel, bias])
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        self.check(input)?;
        let p = ops::maxpool2d(self.value(input), k, stride)?;
        self.record(p.output, Op::MaxPool { input, argmax: p.argmax }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let y = ops::relu(self.value(input));
        self.record(y, Op::Relu { input }, &[input])
    }

    /// Batch norm; in train mode also returns the batch mean and variance so
    /// the caller can update running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        for v in [input, gamma, beta] {
            self.check(v)?;
        }
        let train = matches!(mode, BnMode::Train);
        let bn = ops::batch_norm(self.value(input), self.value(gamma), self.value(beta), mode, ops::BN_EPS)?;
        let var = self.record(
            bn.output,
            Op::BatchNorm { input, gamma, beta, xhat: bn.xhat, inv_std: bn.inv_std, train },
            &[input, gamma, beta],
        )?;
        Ok((var, bn.batch_stats))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check(input)?;
        let y = ops::softmax(self.value(input), axis)?;
        self.record(y, Op::Softmax { input, axis }, &[input])
    }

    pub fn statistical_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let y = ops::statistical_pool(self.value(input))?;
        self.record(y, Op::StatPool { input }, &[input])
    }

    pub fn squash(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let y = ops::squash(self.value(input))?;
        self.record(y, Op::Squash { input }, &[input])
    }

    /// Train-mode inverted dropout.
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        self.check(input)?;
        let (y, mask) = ops::dropout(self.value(input), p, rng)?;
        self.record(y, Op::Dropout { input, mask }, &[input])
    }

    pub fn route_predict(&mut self, w: Var, u: Var) -> Result<Var> {
        self.check(w)?;
        self.check(u)?;
        let y = ops::route_predict(self.value(w), self.value(u))?;
        self.record(y, Op::RoutePredict { w, u }, &[w, u])
    }

    pub fn weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        self.check(c)?;
        self.check(uhat)?;
        let y = ops::weighted_sum(self.value(c), self.value(uhat))?;
        self.record(y, Op::WeightedSum { c, uhat }, &[c, uhat])
    }

    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        self.check(uhat)?;
        self.check(v)?;
        let y = ops::agreement(self.value(uhat), self.value(v))?;
        self.record(y, Op::Agreement { uhat, v }, &[uhat, v])
    }

    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check(input)?;
        let y = ops::mean_axis(self.value(input), axis)?;
        self.record(y, Op::MeanAxis { input, axis }, &[input])
    }

    /// Mean clamped cross-entropy over the batch; a scalar.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.check(probs)?;
        let l = ops::cross_entropy(self.value(probs), labels)?;
        self.record(
            Tensor::scalar(l),
            Op::CrossEntropy { probs, labels: labels.to_vec() },
            &[probs],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(y, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record(y, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check(input)?;
        let y = self.value(input).map(|x| x * factor);
        self.record(y, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let s = T::from_f64_lossy(self.value(input).sum_f64());
        self.record(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&parts, axis)?;
        self.record(y, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let y = self.value(input).clone().reshape(shape)?;
        self.record(y, Op::Reshape { input }, &[input])
    }

    /// Back-propagate from a scalar `loss`. A tape can be replayed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(self.value(loss).map(|_| T::one()));
        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        if acc.shape() != t.shape() {
                            return Err(Error::Tape(format!(
                                "gradient shape {:?} does not match {:?}",
                                t.shape(),
                                acc.shape()
                            )));
                        }
                        acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += *b);
                    }
                    slot @ None => *slot = Some(t),
                }
                Ok(())
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf(Leaf::Constant) => {}
                Op::Leaf(Leaf::Input) => {
                    out.inputs.insert(Var(idx), g);
                }
                Op::Leaf(Leaf::Param(name)) => {
                    out.params.insert(name.clone(), g);
                }
                &Op::Conv2d { input, kernel, bias, stride, pad } => {
                    let need_in = self.nodes[input.0].needs_grad;
                    let cg = ops::conv2d_backward(val(input), val(kernel), val(bias), stride, pad, &g, need_in)?;
                    if let Some(dx) = cg.input {
                        send(input, dx)?;
                    }
                    send(kernel, cg.kernel)?;
                    send(bias, cg.bias)?;
                }
                &Op::Conv1d { input, kernel, bias, stride } => {
                    let need_in = self.nodes[input.0].needs_grad;
                    let cg = ops::conv1d_backward(val(input), val(kernel), val(bias), stride, &g, need_in)?;
                    if let Some(dx) = cg.input {
                        send(input, dx)?;
                    }
                    send(kernel, cg.kernel)?;
                    send(bias, cg.bias)?;
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::maxpool2d_backward(val(*input).shape(), argmax, &g);
                    send(*input, dx)?;
                }
                &Op::Relu { input } => {
                    let dx = ops::relu_backward(val(input), &g, self.guided_relu);
                    send(input, dx)?;
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                    let (dx, dg, db) =
                        ops::batch_norm_backward(val(*input).shape(), val(*gamma), xhat, inv_std, *train, &g)?;
                    send(*input, dx)?;
                    send(*gamma, dg)?;
                    send(*beta, db)?;
                }
                &Op::Softmax { input, axis } => {
                    let dx = ops::softmax_backward(&node.value, &g, axis)?;
                    send(input, dx)?;
                }
                &Op::StatPool { input } => {
                    let dx = ops::statistical_pool_backward(val(input), &g)?;
                    send(input, dx)?;
                }
                &Op::Squash { input } => {
                    let dx = ops::squash_backward(val(input), &g)?;
                    send(input, dx)?;
                }
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    send(*input, Tensor::from_parts_unchecked(g.shape().to_vec(), data))?;
                }
                &Op::RoutePredict { w, u } => {
                    let (dw, du) = ops::route_predict_backward(val(w), val(u), &g)?;
                    send(w, dw)?;
                    send(u, du)?;
                }
                &Op::WeightedSum { c, uhat } => {
                    let (dc, du) = ops::weighted_sum_backward(val(c), val(uhat), &g)?;
                    send(c, dc)?;
                    send(uhat, du)?;
                }
                &Op::Agreement { uhat, v } => {
                    let (du, dv) = ops::agreement_backward(val(uhat), val(v), &g)?;
                    send(uhat, du)?;
                    send(v, dv)?;
                }
                &Op::MeanAxis { input, axis } => {
                    let dx = ops::mean_axis_backward(val(input).shape(), axis, &g)?;
                    send(input, dx)?;
                }
                Op::CrossEntropy { probs, labels } => {
                    let dp = ops::cross_entropy_backward(val(*probs), labels, g.item()?)?;
                    send(*probs, dp)?;
                }
                &Op::Add { a, b } => {
                    send(a, g.clone())?;
                    send(b, g)?;
                }
                &Op::Mul { a, b } => {
                    let da = g.zip_map(val(b), |x, y| x * y)?;
                    let db = g.zip_map(val(a), |x, y| x * y)?;
                    send(a, da)?;
                    send(b, db)?;
                }
                &Op::Scale { input, factor } => {
                    send(input, g.map(|x| x * factor))?;
                }
                &Op::Sum { input } => {
                    let s = g.item()?;
                    send(input, val(input).map(|_| s))?;
                }
                Op::Concat { inputs, axis } => {
                    let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| val(*v).shape().to_vec()).collect();
                    for (v, part) in inputs.iter().zip(ops::concat_backward(&shapes, *axis, &g)) {
                        send(*v, part)?;
                    }
                }
                &Op::Reshape { input } => {
                    send(input, g.reshape(val(input).shape())?)?;
                }
            }
        }

        for (name, &v) in &self.params {
            out.params
                .entry(name.clone())
                .or_insert_with(|| self.nodes[v.0].value.zeros_like());
        }
        Ok(out)
    }
}
