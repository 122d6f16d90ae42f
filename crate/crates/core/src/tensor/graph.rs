use super::{round_to_precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the recorded operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    AddBias,
    Matmul,
    Permute,
    Reshape,
    Concat,
    Slice,
    Subsample,
    Sum,
    Mean,
    Max,
    SumAxis,
    Gelu,
    Relu,
    LeakyRelu,
    Log,
    Exp,
    Gather,
    Conv2d,
    ConvTranspose2d,
    Bilinear,
    Softmax,
    BatchNorm,
    LayerNorm,
    PixelCe,
}

impl OpKind {
    pub const ALL: [OpKind; 31] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddBias,
        OpKind::Matmul,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Subsample,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::SumAxis,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Gather,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Bilinear,
        OpKind::Softmax,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::PixelCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddBias => "add_bias",
            OpKind::Matmul => "matmul",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Subsample => "subsample",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::SumAxis => "sum_axis",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Gather => "gather",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::Bilinear => "bilinear_resize",
            OpKind::Softmax => "softmax",
            OpKind::BatchNorm => "batch_norm",
            OpKind::LayerNorm => "layer_norm",
            OpKind::PixelCe => "pixel_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Subsample {
        x: Var,
        stride: usize,
    },
    Sum(Var),
    Mean(Var),
    Max {
        x: Var,
        index: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Exp(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Bilinear {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    PixelCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        clamped: Vec<bool>,
    },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Subsample { .. } => OpKind::Subsample,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Max { .. } => OpKind::Max,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(..) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Log(..) => OpKind::Log,
            Op::Exp(..) => OpKind::Exp,
            Op::Gather { .. } => OpKind::Gather,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Bilinear { .. } => OpKind::Bilinear,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::PixelCe { .. } => OpKind::PixelCe,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Log(x)
            | Op::Exp(x) => vec![*x],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Subsample { x, .. }
            | Op::Max { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Gather { x, .. }
            | Op::Bilinear { x }
            | Op::Softmax { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::PixelCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Confined to one thread; build a fresh graph per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
            consumed: false,
        }
    }

    /// Deliberately corrupts the backward rule of one op kind. Negative control for gradient checks.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copies a value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone().with_requires_grad(false);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Operands recorded for `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Every recorded node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub(crate) fn push(&mut self, shape: &[usize], mut data: Vec<f64>, op: Op) -> Result<Var> {
        let kind = op.kind();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: kind.name().to_string(),
                index,
            });
        }
        round_to_precision(&mut data);
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let mut value = Tensor::new(shape, data)?;
        value = value.with_requires_grad(needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar output. Leaf gradients accumulate; the graph is consumed.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::invalid("backward", "graph already consumed"));
        }
        let out_shape = self.shape(output).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        self.consumed = true;
        if !self.nodes[output.0].needs_grad {
            return Ok(());
        }
        self.nodes[output.0].value.accumulate_grad(&[1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(grad_out) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let mut contributions = self.backward_node(idx, &grad_out);
            if self.fault == Some(self.nodes[idx].op.kind()) {
                if let Some((_, g)) = contributions.first_mut() {
                    for v in g.iter_mut() {
                        *v = *v * 1.5 + 1e-2;
                    }
                }
            }
            for (var, g) in contributions {
                if self.nodes[var.0].needs_grad {
                    self.nodes[var.0].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let need = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let mut res = Vec::new();
                if need(a) {
                    res.push((*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                }
                if need(b) {
                    res.push((*b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
                }
                res
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let mut res = Vec::new();
                if need(a) {
                    res.push((*a, g.iter().zip(bv).map(|(g, b)| g / b).collect()));
                }
                if need(b) {
                    res.push((
                        *b,
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    ));
                }
                res
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::AddBias { x, bias, axis } => {
                let shape = self.shape(*x);
                vec![
                    (*x, g.to_vec()),
                    (*bias, super::ops::reduce_to_axis(g, shape, *axis)),
                ]
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => super::ops::matmul_backward(
                self,
                (*a, *b),
                (*batch, *m, *k, *n, *shared_b),
                g,
            ),
            Op::Permute { x, axes } => {
                vec![(*x, super::ops::permute_backward(g, out.shape(), axes))]
            }
            Op::Concat { inputs, axis } => super::ops::concat_backward(self, inputs, *axis, g),
            Op::Slice { x, axis, start } => {
                vec![(
                    *x,
                    super::ops::slice_backward(g, self.shape(*x), *axis, *start, out.shape()[*axis]),
                )]
            }
            Op::Subsample { x, stride } => {
                vec![(*x, super::ops::subsample_backward(g, self.shape(*x), *stride))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Max { x, index } => {
                let mut v = vec![0.0; self.value(*x).numel()];
                v[*index] = g[0];
                vec![(*x, v)]
            }
            Op::SumAxis { x, axis } => {
                vec![(*x, super::ops::sum_axis_backward(g, self.shape(*x), *axis))]
            }
            Op::Gelu(x) => vec![(
                *x,
                self.data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, g)| g * super::ops::gelu_grad(v))
                    .collect(),
            )],
            Op::Relu(x) => vec![(
                *x,
                self.data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, g)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::LeakyRelu(x, slope) => vec![(
                *x,
                self.data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, g)| if v > 0.0 { *g } else { g * slope })
                    .collect(),
            )],
            Op::Log(x) => vec![(
                *x,
                self.data(*x).iter().zip(g).map(|(v, g)| g / v).collect(),
            )],
            Op::Exp(x) => vec![(*x, out.data().iter().zip(g).map(|(y, g)| g * y).collect())],
            Op::Gather { x, indices } => {
                let mut v = vec![0.0; self.value(*x).numel()];
                for (&i, gv) in indices.iter().zip(g) {
                    v[i] += gv;
                }
                vec![(*x, v)]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            } => super::conv::conv2d_backward(self, (*x, *w, *b), (*stride, *padding, *groups), g),
            Op::ConvTranspose2d { x, w, b, stride } => {
                super::conv::conv_transpose2d_backward(self, (*x, *w, *b), *stride, g)
            }
            Op::Bilinear { x } => {
                vec![(*x, super::conv::bilinear_backward(self.shape(*x), out.shape(), g))]
            }
            Op::Softmax { x, axis } => {
                vec![(*x, super::norm::softmax_backward(out, *axis, g))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => super::norm::batch_norm_backward(
                self,
                (*x, *gamma, *beta),
                xhat,
                inv_std,
                *batch_stats,
                g,
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => super::norm::layer_norm_backward(self, (*x, *gamma, *beta), xhat, inv_std, g),
            Op::PixelCe {
                logits,
                probs,
                labels,
                clamped,
            } => vec![(
                *logits,
                super::norm::pixel_ce_backward(self.shape(*logits), probs, labels, clamped, g),
            )],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn detached_tensor_receives_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let d = g.detach(x);
        let y = g.mul(d, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(d).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn graph_is_consumed_by_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn op_kind_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
