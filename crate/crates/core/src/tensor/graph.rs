use super::ops::{self, BatchNormConfig, BatchStats, BnMode, BnSaved, ConvGeom, RunningStats};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        shape: (usize, usize, usize),
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// A single-use tape recording forward operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and `backward` walks it once in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; its `requires_grad` flag decides whether a gradient is kept.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Adds a leaf with values copied from `tensor`.
    pub fn leaf_ref(&mut self, tensor: &Tensor<T>) -> Var {
        self.leaf_copy(tensor, tensor.requires_grad)
    }

    /// Adds a leaf with values copied from `tensor` and an explicit gradient flag.
    pub fn leaf_copy(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        let value = Tensor {
            dims: tensor.dims.clone(),
            values: tensor.values.clone(),
            requires_grad,
            grad: None,
        };
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.dims(input), self.dims(weight), stride, pad)?;
        let out = ops::conv2d_forward(
            &geom,
            self.value(input).values(),
            self.value(weight).values(),
        );
        let value = Tensor::new(geom.out_dims(), out)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(value, rg, Op::Conv2d { input, weight, geom }))
    }

    /// Batch normalization over the N, H and W axes of an NCHW input.
    ///
    /// In train mode the batch statistics are returned so the owner of
    /// `stats` can apply the running update; the graph never mutates them.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        mode: BnMode,
        cfg: BatchNormConfig,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        ops::bn_check(self.dims(input), self.value(gamma), self.value(beta), stats)?;
        let dims = self.dims(input).to_vec();
        let (y, saved, batch) = ops::bn_forward(
            &dims,
            self.value(input).values(),
            self.value(gamma).values(),
            self.value(beta).values(),
            stats,
            mode,
            cfg,
        );
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(dims, y)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
        );
        Ok((v, batch))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let values = x.values().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.dims().to_vec(), values).expect("same dims");
        let rg = self.rg(input);
        self.push(value, rg, Op::Relu(input))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::DimensionMismatch {
                op,
                axes: "all axes",
                detail: format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shaped tensors (residual connection).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("residual_add", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), values)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), values)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).values().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), rg, Op::Sum(input))
    }

    /// NCHW -> N x C mean over the spatial axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        if dims.len() != 4 {
            return Err(TensorError::DimensionMismatch {
                op: "global_avg_pool",
                axes: "input rank",
                detail: format!("expected NCHW, got {dims:?}"),
            });
        }
        let hw = dims[2] * dims[3];
        let denom = T::from_f64(hw as f64);
        let values = self
            .value(input)
            .values()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![dims[0], dims[1]], values)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::GlobalAvgPool(input)))
    }

    /// `x W^T + b` with `W: [out, in]`; the input is flattened past axis 0.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let shape = ops::linear_dims(self.dims(input), self.dims(weight), self.dims(bias))?;
        let y = ops::linear_forward(
            shape,
            self.value(input).values(),
            self.value(weight).values(),
            self.value(bias).values(),
        );
        let value = Tensor::new(vec![shape.0, shape.2], y)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                shape,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) =
            ops::softmax_cross_entropy(self.dims(logits), self.value(logits).values(), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar node.
    ///
    /// Gradients are returned for every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(TensorError::NotScalar(root.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
        }
        let leaves = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Leaf) && n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (dx, dw) = ops::conv2d_backward(
                    geom,
                    self.value(*input).values(),
                    self.value(*weight).values(),
                    dy,
                    self.rg(*input),
                    self.rg(*weight),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *weight, dw);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = ops::bn_backward(
                    self.dims(*input),
                    self.value(*gamma).values(),
                    saved,
                    dy,
                );
                if self.rg(*input) {
                    accumulate(grads, *input, dx);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Relu(input) => {
                let dx = self
                    .value(*input)
                    .values()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *input, dx);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = dy.iter().zip(self.value(*b).values()).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = dy.iter().zip(self.value(*a).values()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                accumulate(grads, *input, vec![dy[0]; n]);
            }
            Op::GlobalAvgPool(input) => {
                let dims = self.dims(*input);
                let hw = dims[2] * dims[3];
                let denom = T::from_f64(hw as f64);
                let mut dx = Vec::with_capacity(self.value(*input).numel());
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g / denom, hw));
                }
                accumulate(grads, *input, dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
                shape,
            } => {
                let (dx, dw, db) = ops::linear_backward(
                    *shape,
                    self.value(*input).values(),
                    self.value(*weight).values(),
                    dy,
                );
                if self.rg(*input) {
                    accumulate(grads, *input, dx);
                }
                if self.rg(*weight) {
                    accumulate(grads, *weight, dw);
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, db);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.dims(*logits)[1];
                let scale = dy[0] / T::from_f64(labels.len() as f64);
                let mut dz = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    dz[i * k + label] = dz[i * k + label] - T::one();
                }
                for v in &mut dz {
                    *v = *v * scale;
                }
                accumulate(grads, *logits, dz);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
