//! Reverse-mode differentiation over a recorded list of operations.
//!
//! A [`Graph`] is built fresh for each forward pass. Every operation appends a
//! node holding its output; [`Graph::backward`] walks the nodes in exact
//! reverse creation order and accumulates gradients into their inputs.

use crate::attention::{self, GaussianParamMap, RenderMode, Rendering};
use crate::error::{Error, Result};
use crate::ops::{self, Activation, Binary, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{all_finite, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Pointwise {
        input: Var,
        kind: Activation,
    },
    Elementwise {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Upsample2x {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        pred: Var,
        target: Tensor<T>,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    ActivateParams {
        raw: Var,
    },
    RenderAttention {
        params: Var,
        rendering: Rendering<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Pointwise { .. } => "pointwise",
            Op::Elementwise { .. } => "elementwise",
            Op::Upsample2x { .. } => "upsample2x",
            Op::Concat { .. } => "concat_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
            Op::ActivateParams { .. } => "activate_params",
            Op::RenderAttention { .. } => "render_attention",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; its gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out = ops::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            geom,
        )?;
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn pointwise(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let out = ops::pointwise_forward(self.value(input), kind)?;
        let rg = self.needs(input);
        self.push(out, Op::Pointwise { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.pointwise(input, Activation::Relu)
    }

    pub fn logistic(&mut self, input: Var) -> Result<Var> {
        self.pointwise(input, Activation::Logistic)
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let out = ops::elementwise_forward(self.value(a), self.value(b), kind)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Elementwise { a, b, kind }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Binary::Mul)
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample2x_forward(self.value(input));
        let rg = self.needs(input);
        self.push(out, Op::Upsample2x { input }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_forward(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat { a, b }, rg)
    }

    /// Mean binary cross-entropy against a fixed `{0, 1}` target.
    pub fn cross_entropy(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = ops::cross_entropy_forward(self.value(pred), target)?;
        let rg = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                pred,
                target: target.clone(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).sum();
        let rg = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.needs(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Raw `(B, H, W, 6)` head output to constrained Gaussian parameters.
    pub fn activate_params(&mut self, raw: Var) -> Result<Var> {
        let map = attention::activate_params(self.value(raw))?;
        let rg = self.needs(raw);
        self.push(map.into_tensor(), Op::ActivateParams { raw }, rg)
    }

    /// Renders the attention map `(B, H, W, 1)` from a constrained parameter node.
    pub fn render_attention(&mut self, params: Var, mode: RenderMode) -> Result<Var> {
        let map = GaussianParamMap::new(self.value(params).clone())?;
        let rendering = attention::render_attention(&map, mode)?;
        let rg = self.needs(params);
        self.push(
            rendering.attention.clone(),
            Op::RenderAttention { params, rendering },
            rg,
        )
    }

    /// Parameter map held by a node created with [`Graph::activate_params`].
    pub fn param_map(&self, v: Var) -> Result<GaussianParamMap<T>> {
        GaussianParamMap::new(self.value(v).clone())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of `loss` with respect to every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).shape() != Shape::scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            for (v, gi) in self.input_grads(idx, &g)? {
                self.accumulate(v, gi);
            }
        }

        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let Some(g) = grad {
                if node.requires_grad && !all_finite(g) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    self.value(bias),
                    geom,
                    g,
                )?;
                out.push((input, grads.input));
                out.push((kernel, grads.kernel));
                out.push((bias, grads.bias));
            }
            &Op::Pointwise { input, kind } => {
                let gi = ops::pointwise_backward(self.value(input), &node.value, kind, g);
                out.push((input, gi));
            }
            &Op::Elementwise { a, b, kind } => match kind {
                Binary::Add => {
                    out.push((a, g.to_vec()));
                    out.push((b, g.to_vec()));
                }
                Binary::Mul => {
                    let ga = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    let gb = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    out.push((a, ga));
                    out.push((b, gb));
                }
            },
            &Op::Upsample2x { input } => {
                let gi = ops::upsample2x_backward(self.value(input).shape(), g);
                out.push((input, gi));
            }
            &Op::Concat { a, b } => {
                let (ga, gb) = ops::concat_backward(
                    self.value(a).shape().channels,
                    self.value(b).shape().channels,
                    g,
                );
                out.push((a, ga));
                out.push((b, gb));
            }
            Op::CrossEntropy { pred, target } => {
                let pred = *pred;
                let gp = ops::cross_entropy_backward(self.value(pred), target, g[0]);
                out.push((pred, gp));
            }
            &Op::Sum { input } => {
                let n = self.value(input).len();
                out.push((input, vec![g[0]; n]));
            }
            &Op::Scale { input, factor } => {
                out.push((input, g.iter().map(|&v| v * factor).collect()));
            }
            &Op::ActivateParams { raw } => {
                let gr = attention::activate_params_backward(self.value(raw), g);
                out.push((raw, gr));
            }
            Op::RenderAttention { params, rendering } => {
                let params = *params;
                let map = GaussianParamMap::new(self.value(params).clone())?;
                let gp = attention::attention_backward(&map, rendering, rendering.mode, g)?;
                out.push((params, gp));
            }
        }
        Ok(out)
    }

    /// Sign of every ReLU input recorded so far, in creation order. Two
    /// forward passes with equal patterns lie on the same linear piece of
    /// every ReLU, which finite-difference checks rely on.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Pointwise {
                input,
                kind: Activation::Relu,
            } = node.op
            {
                out.extend(self.value(input).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Clears every gradient so [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }
}
