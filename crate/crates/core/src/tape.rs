//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse creation
//! order and returns gradients for every leaf created with [`Tape::param`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, ChannelAffine, ConvGeom};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        input: Var,
        k: usize,
    },
    Affine {
        input: Var,
        affine: Arc<ChannelAffine>,
    },
    Activate {
        input: Var,
        f: Activation,
    },
    PlaneWave {
        wave_numbers: Var,
        phases: Vec<f64>,
        origin: (usize, usize),
    },
    Concat {
        inputs: Vec<Var>,
    },
    ChannelMean {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    MeanSq {
        input: Var,
    },
    /// Scalar-valued function whose gradient was computed during forward.
    ScalarWithGrad {
        input: Var,
        grad: Option<Tensor4<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the tape's parameter leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<Var, Tensor4<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf created with [`Tape::param`]. `None` for constants.
    pub fn get(&self, var: Var) -> Option<&Tensor4<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor4<T>> {
        self.grads.remove(&var)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor4<T> {
        &self.nodes[var.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, var: Var) -> T {
        self.nodes[var.0].value.data()[0]
    }

    fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor4<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, op, rg))
    }

    fn vector(&self, var: Var, expected: usize, what: &str) -> Result<Vec<T>> {
        let v = self.value(var);
        if v.numel() != expected {
            return Err(Error::Dimension(format!(
                "{what} has {} entries, expected {expected}",
                v.numel()
            )));
        }
        Ok(v.data().to_vec())
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let b = match bias {
            Some(b) => Some(self.vector(b, self.value(weight).shape().channels, "conv_transpose2d bias")?),
            None => None,
        };
        let out = kernels::conv_transpose2d(self.value(input), self.value(weight), b.as_deref(), geom)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push_checked(
            "conv_transpose2d",
            out,
            Op::ConvTranspose {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        )
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let b = match bias {
            Some(b) => Some(self.vector(b, self.value(weight).shape().batch, "conv2d bias")?),
            None => None,
        };
        let out = kernels::conv2d(self.value(input), self.value(weight), b.as_deref(), geom)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push_checked(
            "conv2d",
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        )
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(input), k)?;
        self.push_checked("avg_pool2d", out, Op::AvgPool { input, k }, &[input])
    }

    /// Fixed-statistics batch normalization; differentiable in `input` only.
    pub fn batch_norm_fixed(&mut self, input: Var, affine: Arc<ChannelAffine>) -> Result<Var> {
        let out = affine.apply(self.value(input))?;
        self.push_checked("batch_norm_fixed", out, Op::Affine { input, affine }, &[input])
    }

    pub fn activate(&mut self, input: Var, f: Activation) -> Result<Var> {
        let out = kernels::activate(self.value(input), f);
        self.push_checked("activation", out, Op::Activate { input, f }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activate(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activate(input, Activation::Tanh)
    }

    pub fn sin(&mut self, input: Var) -> Result<Var> {
        self.activate(input, Activation::Sin)
    }

    pub fn plane_wave(&mut self, wave_numbers: Var, phases: &[f64], origin: (usize, usize)) -> Result<Var> {
        let out = kernels::plane_wave(self.value(wave_numbers), phases, origin)?;
        self.push_checked(
            "plane_wave",
            out,
            Op::PlaneWave {
                wave_numbers,
                phases: phases.to_vec(),
                origin,
            },
            &[wave_numbers],
        )
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor4<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        self.push_checked(
            "concat_channels",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let out = kernels::channel_mean(self.value(input));
        self.push_checked("channel_mean", out, Op::ChannelMean { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_with(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push_checked("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_with(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push_checked("sub", out, Op::Sub { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let out = self.value(input).map(|v| T::from_f64(v.as_f64() * factor));
        self.push_checked("scale", out, Op::Scale { input, factor }, &[input])
    }

    /// Mean of squared elements, as a 1×1×1×1 node.
    pub fn mean_sq(&mut self, input: Var) -> Result<Var> {
        let v = kernels::mean_sq(self.value(input))?;
        self.push_checked(
            "mean_sq",
            Tensor4::scalar(T::from_f64(v)),
            Op::MeanSq { input },
            &[input],
        )
    }

    /// Records a scalar function of `input` whose value and gradient the
    /// caller computed. Pass `grad = None` when no gradient is needed; the
    /// node then acts as a constant.
    pub fn scalar_with_grad(&mut self, input: Var, value: f64, grad: Option<Tensor4<T>>) -> Result<Var> {
        if let Some(g) = &grad {
            if g.shape() != self.value(input).shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {} does not match input {}",
                    g.shape(),
                    self.value(input).shape()
                )));
            }
        }
        let deps: &[Var] = if grad.is_some() { &[input] } else { &[] };
        self.push_checked(
            "scalar function",
            Tensor4::scalar(T::from_f64(value)),
            Op::ScalarWithGrad { input, grad },
            deps,
        )
    }

    /// Gradients of the scalar node `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape.numel() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (var, contrib) in self.local_grads(node, &g) {
                if !self.requires_grad(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }

        let mut out = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = if idx <= loss.0 {
                    grads[idx].take()
                } else {
                    None
                };
                let g = g.unwrap_or_else(|| Tensor4::zeros(node.value.shape()));
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "gradient of leaf {idx} is not finite"
                    )));
                }
                out.insert(Var(idx), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor4<T>) -> Vec<(Var, Tensor4<T>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::ConvTranspose {
                input,
                weight,
                bias,
                geom,
            } => {
                let w = self.value(*weight);
                if self.requires_grad(*input) {
                    let xs = self.value(*input).shape();
                    out.push((*input, kernels::conv_transpose2d_grad_input(g, w, xs, *geom)));
                }
                if self.requires_grad(*weight) {
                    let gw = kernels::conv_transpose2d_grad_weight(g, self.value(*input), w.shape(), *geom);
                    out.push((*weight, gw));
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        out.push((*b, self.reshape_vector(*b, kernels::channel_sums(g))));
                    }
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let w = self.value(*weight);
                if self.requires_grad(*input) {
                    let xs = self.value(*input).shape();
                    out.push((*input, kernels::conv2d_grad_input(g, w, xs, *geom)));
                }
                if self.requires_grad(*weight) {
                    let gw = kernels::conv2d_grad_weight(g, self.value(*input), w.shape(), *geom);
                    out.push((*weight, gw));
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        out.push((*b, self.reshape_vector(*b, kernels::channel_sums(g))));
                    }
                }
            }
            Op::AvgPool { input, k } => {
                let xs = self.value(*input).shape();
                out.push((*input, kernels::avg_pool2d_grad(g, *k, xs)));
            }
            Op::Affine { input, affine } => out.push((*input, affine.grad(g))),
            Op::Activate { input, f } => {
                out.push((*input, kernels::activate_grad(g, self.value(*input), *f)));
            }
            Op::PlaneWave {
                wave_numbers,
                phases,
                origin,
            } => {
                let k = self.value(*wave_numbers);
                out.push((*wave_numbers, kernels::plane_wave_grad(g, k, phases, *origin)));
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for &v in inputs {
                    let c = self.value(v).shape().channels;
                    out.push((v, kernels::channel_slice(g, start, c)));
                    start += c;
                }
            }
            Op::ChannelMean { input } => {
                let xs = self.value(*input).shape();
                out.push((*input, kernels::channel_mean_grad(g, xs)));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                out.push((*input, g.map(|v| T::from_f64(v.as_f64() * f))));
            }
            Op::MeanSq { input } => {
                let x = self.value(*input);
                let k = 2.0 * g.data()[0].as_f64() / x.numel() as f64;
                out.push((*input, x.map(|v| T::from_f64(v.as_f64() * k))));
            }
            Op::ScalarWithGrad { input, grad } => {
                if let Some(local) = grad {
                    let k = g.data()[0].as_f64();
                    out.push((*input, local.map(|v| T::from_f64(v.as_f64() * k))));
                }
            }
        }
        out
    }

    fn reshape_vector(&self, var: Var, values: Vec<T>) -> Tensor4<T> {
        Tensor4::from_vec(self.value(var).shape(), values).expect("bias gradient matches bias length")
    }
}

/// Wraps a vector as a 1×C×1×1 tensor.
pub fn channel_vector<T: Scalar>(values: &[T]) -> Tensor4<T> {
    Tensor4::from_vec(Shape4::new(1, values.len(), 1, 1), values.to_vec()).expect("sized from slice")
}
