//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each call appends a
//! node holding its output value and whatever the backward pass needs, so
//! execution order is already a topological order. [`Graph::gradients`]
//! walks the list once in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, DiceSums, NormStats};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations selectable through [`Graph::pointwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale(f64),
}

enum Op<T: Real> {
    Leaf,
    Param,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Softmax(Var),
    SoftDice {
        probs: Var,
        targets: Vec<u8>,
        smooth: f64,
        sums: DiceSums<T>,
    },
    Sum(Var),
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Conv3d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::Upsample2(x)
            | Op::Softmax(x)
            | Op::Sum(x) => {
                vec![*x]
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::InstanceNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::SoftDice { probs, .. } => vec![*probs],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        value.ensure_finite("input")?;
        Ok(self.push(value, Op::Leaf))
    }

    /// Free leaf whose gradient is tracked (used for input-gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        value.ensure_finite("variable")?;
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Binds a stored parameter. Binding the same name twice returns the same
    /// node, so shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let mut value = p.value.clone();
        value.clear_grad();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv3d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn conv1x1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        kernels::check_pointwise_kernel(self.value(weight).shape())?;
        self.conv3d(input, weight, Some(bias), 1, 0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(Error::RankMismatch {
                op,
                expected: sa.len(),
                got: sb.len(),
            });
        }
        match sa.iter().zip(sb).position(|(x, y)| x != y) {
            Some(axis) => Err(Error::shape(op, format!("axis {axis}"), sa[axis], sb[axis])),
            None => Ok(()),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let out = self.value(x).map(|v| v * f);
        out.ensure_finite("scale")?;
        Ok(self.push(out, Op::Scale(x, f)))
    }

    pub fn pointwise(&mut self, kind: Pointwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Pointwise::Add | Pointwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::arg(
                "pointwise",
                format!("{kind:?} takes {arity} operand(s), got {}", operands.len()),
            ));
        }
        match kind {
            Pointwise::Relu => Ok(self.relu(operands[0])),
            Pointwise::Sigmoid => Ok(self.sigmoid(operands[0])),
            Pointwise::Add => self.add(operands[0], operands[1]),
            Pointwise::Mul => self.mul(operands[0], operands[1]),
            Pointwise::Scale(f) => self.scale(operands[0], f),
        }
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            kernels::instance_norm(self.value(input), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            },
        ))
    }

    pub fn down2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn up2(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2(self.value(input))?;
        Ok(self.push(out, Op::Upsample2(input)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::channel_softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Soft Dice loss on probabilities (already softmaxed).
    pub fn soft_dice(&mut self, probs: Var, targets: &[u8], smooth: f64) -> Result<Var> {
        let (loss, sums) = kernels::soft_dice(self.value(probs), targets, smooth)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: "dice_loss",
                index: 0,
            });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                probs,
                targets: targets.to_vec(),
                smooth,
                sums,
            },
        ))
    }

    /// Channel softmax followed by soft Dice.
    pub fn dice_loss(&mut self, logits: Var, targets: &[u8], smooth: f64) -> Result<Var> {
        let probs = self.channel_softmax(logits)?;
        self.soft_dice(probs, targets, smooth)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node
    /// that requires one.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::GraphOrder {
                        node: idx,
                        input: input.0,
                    });
                }
            }
            self.propagate(idx, &g, &mut grads)?;
            out[idx] = Some(g);
        }
        Ok(Gradients { grads: out })
    }

    /// Runs [`Graph::gradients`] and adds the result into the gradient
    /// buffers of the trainable parameters in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            let p = store.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(v) {
                p.value.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut send = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = kernels::conv3d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *padding,
                    g,
                    self.needs(*input),
                )?;
                if let Some(dx) = cg.input {
                    send(*input, dx);
                }
                if self.needs(*weight) {
                    send(*weight, cg.weight);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        send(*b, cg.bias);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data();
                send(
                    *x,
                    y.iter()
                        .zip(g)
                        .map(|(&s, &d)| d * s * (T::one() - s))
                        .collect(),
                );
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    send(*a, g.to_vec());
                }
                if self.needs(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    send(*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.needs(*b) {
                    send(*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|&d| d * *f).collect()),
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            } => {
                let ng = kernels::instance_norm_backward(
                    self.value(*input),
                    self.value(*gamma),
                    stats,
                    g,
                );
                if self.needs(*input) {
                    send(*input, ng.input);
                }
                if self.needs(*gamma) {
                    send(*gamma, ng.gamma);
                }
                if self.needs(*beta) {
                    send(*beta, ng.beta);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                send(
                    *input,
                    kernels::max_pool2_backward(self.value(*input).len(), argmax, g),
                );
            }
            Op::Upsample2(x) => send(*x, kernels::upsample2_backward(self.value(*x).shape(), g)),
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape();
                let cb = self.value(*b).shape()[1];
                let (n, ca) = (sa[0], sa[1]);
                let vol: usize = sa[2..].iter().product();
                let mut ga = Vec::with_capacity(n * ca * vol);
                let mut gb = Vec::with_capacity(n * cb * vol);
                for chunk in g.chunks((ca + cb) * vol) {
                    ga.extend_from_slice(&chunk[..ca * vol]);
                    gb.extend_from_slice(&chunk[ca * vol..]);
                }
                if self.needs(*a) {
                    send(*a, ga);
                }
                if self.needs(*b) {
                    send(*b, gb);
                }
            }
            Op::Softmax(x) => send(
                *x,
                kernels::channel_softmax_backward(&self.nodes[idx].value, g),
            ),
            Op::SoftDice {
                probs,
                targets,
                smooth,
                sums,
            } => send(
                *probs,
                kernels::soft_dice_backward(
                    self.value(*probs).shape(),
                    targets,
                    sums,
                    *smooth,
                    g[0],
                ),
            ),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
        }
        Ok(())
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
