//! Elementwise, shape, reduction and activation operations.

use super::gemm::gemm;
use super::graph::{Graph, Op, Var};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() * SQRT_2_OVER_PI * 0.5;
    cdf + x * pdf
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduce_to_axis(g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = around(shape, axis);
    let mut out = vec![0.0; n];
    for o in 0..outer {
        for (c, acc) in out.iter_mut().enumerate() {
            let base = (o * n + c) * inner;
            *acc += g[base..base + inner].iter().sum::<f64>();
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn permute_backward(g: &[f64], out_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    permute_data(g, out_shape, &inverse).1
}

pub(crate) fn slice_backward(
    g: &[f64],
    in_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f64> {
    let (outer, n, inner) = around(in_shape, axis);
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let src = o * len * inner;
        let dst = (o * n + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    out
}

pub(crate) fn subsample_backward(g: &[f64], in_shape: &[usize], stride: usize) -> Vec<f64> {
    let (bc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0.0; bc * h * w];
    for p in 0..bc {
        for i in 0..oh {
            for j in 0..ow {
                out[p * h * w + i * stride * w + j * stride] = g[p * oh * ow + i * ow + j];
            }
        }
    }
    out
}

pub(crate) fn sum_axis_backward(g: &[f64], in_shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = around(in_shape, axis);
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for c in 0..n {
            let dst = (o * n + c) * inner;
            out[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    out
}

pub(crate) fn concat_backward(
    graph: &Graph,
    inputs: &[Var],
    axis: usize,
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let first = graph.shape(inputs[0]);
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|v| graph.shape(*v)[axis]).sum();
    let mut offset = 0;
    let mut res = Vec::with_capacity(inputs.len());
    for v in inputs {
        let n = graph.shape(*v)[axis];
        let mut part = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = (o * total + offset) * inner;
            part.extend_from_slice(&g[src..src + n * inner]);
        }
        offset += n;
        if graph.requires_grad(*v) {
            res.push((*v, part));
        }
    }
    res
}

pub(crate) fn matmul_backward(
    graph: &Graph,
    (a, b): (Var, Var),
    (batch, m, k, n, shared_b): (usize, usize, usize, usize, bool),
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let (av, bv) = (graph.data(a), graph.data(b));
    let mut res = Vec::new();
    if graph.requires_grad(a) {
        let mut ga = vec![0.0; batch * m * k];
        for t in 0..batch {
            let boff = if shared_b { 0 } else { t * k * n };
            // dA = dC · Bᵀ
            gemm(
                m,
                n,
                k,
                1.0,
                &g[t * m * n..],
                false,
                &bv[boff..],
                true,
                0.0,
                &mut ga[t * m * k..],
            );
        }
        res.push((a, ga));
    }
    if graph.requires_grad(b) {
        let mut gb = vec![0.0; if shared_b { k * n } else { batch * k * n }];
        for t in 0..batch {
            let boff = if shared_b { 0 } else { t * k * n };
            // dB = Aᵀ · dC
            gemm(
                k,
                m,
                n,
                1.0,
                &av[t * m * k..],
                true,
                &g[t * m * n..],
                false,
                1.0,
                &mut gb[boff..],
            );
        }
        res.push((b, gb));
    }
    res
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        (a, b): (Var, Var),
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, op)
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", (a, b), Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", (a, b), Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", (a, b), Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", (a, b), Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map_unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map_unary(x, Op::AddScalar(x), |v| v + s)
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match axis {axis} of {shape:?}", self.shape(bias)),
            ));
        }
        let (outer, n, inner) = around(&shape, axis);
        let bv = self.data(bias);
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for (c, b) in bv.iter().enumerate().take(n) {
                let base = (o * n + c) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        self.push(&shape, data, Op::AddBias { x, bias, axis })
    }

    /// Batched matrix product over the last two axes. `b` may be 2-D and shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", "operands need rank >= 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_dims = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if k != k2 || (!shared_b && &sb[..sb.len() - 2] != batch_dims) {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = batch_dims.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.data(a), self.data(b));
        for t in 0..batch {
            let boff = if shared_b { 0 } else { t * k * n };
            gemm(
                m,
                k,
                n,
                1.0,
                &av[t * m * k..],
                false,
                &bv[boff..],
                false,
                0.0,
                &mut out[t * m * n..],
            );
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        self.push(
            &shape,
            out,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} for rank {}", shape.len())));
        }
        let (out_shape, data) = permute_data(self.data(x), &shape, axes);
        self.push(
            &out_shape,
            data,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        self.push(shape, data, Op::Reshape(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", first.len())));
        }
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|v| self.shape(*v)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis];
                data.extend_from_slice(&self.data(*v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            &shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = around(&shape, axis);
        let xv = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(&out_shape, data, Op::Slice { x, axis, start })
    }

    /// Keeps the top-left element of every `stride x stride` window of an NCHW tensor.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("subsample", format!("expected NCHW, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::invalid(
                "subsample",
                format!("stride {stride} must divide {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / stride, w / stride);
        let xv = self.data(x);
        let mut data = Vec::with_capacity(shape[0] * shape[1] * oh * ow);
        for p in 0..shape[0] * shape[1] {
            for i in 0..oh {
                for j in 0..ow {
                    data.push(xv[p * h * w + i * stride * w + j * stride]);
                }
            }
        }
        self.push(&[shape[0], shape[1], oh, ow], data, Op::Subsample { x, stride })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(&[1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.data(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(&[1], vec![s], Op::Mean(x))
    }

    /// Global maximum; the gradient flows to the first maximal element.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let v = self.data(x);
        let mut index = 0;
        for (i, &val) in v.iter().enumerate() {
            if val > v[index] {
                index = i;
            }
        }
        let m = v[index];
        self.push(&[1], vec![m], Op::Max { x, index })
    }

    /// Sums out `axis`, removing it from the shape (a rank-1 input reduces to `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, n, inner) = around(&shape, axis);
        let xv = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for c in 0..n {
                let base = (o * n + c) * inner;
                for i in 0..inner {
                    data[o * inner + i] += xv[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(&out_shape, data, Op::SumAxis { x, axis })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Gelu(x), gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map_unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { v * slope })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Exp(x), f64::exp)
    }

    /// Picks flat elements of `x` by index into a rank-1 result. Differentiable;
    /// repeated indices accumulate their gradients.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.data(x);
        if indices.is_empty() {
            return Err(Error::invalid("gather", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of bounds for {} elements", xv.len()),
            ));
        }
        let data = indices.iter().map(|&i| xv[i]).collect();
        self.push(
            &[indices.len()],
            data,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        )
    }
}
