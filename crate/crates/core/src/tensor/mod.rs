//! Dense row-major tensors and the reverse-mode autodiff engine built on them.
//!
//! A [`Tensor`] is a plain value: shape, contiguous `f64` buffer and an
//! optional gradient slot. Differentiable computation happens on a [`Graph`],
//! which records every operation and replays them in reverse on
//! [`Graph::backward`].

mod conv;
mod gemm;
pub mod gradcheck;
mod graph;
mod labels;
mod norm;
mod ops;
pub mod rng;

use std::cell::Cell;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, CheckReport, InputCheck};
pub use labels::LabelMap;
pub use graph::{Graph, OpKind, Var};
pub use norm::BatchStats;

/// Storage precision used for values produced by graph operations.
///
/// Buffers are always `f64`. In `F32` mode every forward result and every
/// optimizer update is rounded through `f32`, which reproduces single
/// precision storage while keeping one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

/// Current precision of the calling thread.
pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Switches the calling thread's precision until the guard is dropped.
pub fn set_precision(p: Precision) -> PrecisionGuard {
    let prev = PRECISION.with(|c| c.replace(p));
    PrecisionGuard { prev }
}

#[must_use = "precision reverts when the guard is dropped"]
pub struct PrecisionGuard {
    prev: Precision,
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        PRECISION.with(|c| c.set(self.prev));
    }
}

pub(crate) fn round_to_precision(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in data {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Writes the golden-test dump: `LUCT`, u32 rank, u32 extents, u8 dtype, raw LE buffer.
    pub fn write_dump<W: Write>(&self, mut w: W, dtype: DumpDtype) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[dtype as u8])?;
        match dtype {
            DumpDtype::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            DumpDtype::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<(Tensor, DumpDtype)> {
        let bad = |what: &str| Error::Format(format!("tensor dump: {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != DUMP_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated rank"))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated extents"))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(|_| bad("truncated dtype"))?;
        let dtype = match code[0] {
            0 => DumpDtype::F32,
            1 => DumpDtype::F64,
            c => return Err(bad(&format!("unknown dtype code {c}"))),
        };
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            DumpDtype::F32 => {
                for _ in 0..n {
                    r.read_exact(&mut u32buf).map_err(|_| bad("truncated data"))?;
                    data.push(f32::from_le_bytes(u32buf) as f64);
                }
            }
            DumpDtype::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
                    data.push(f64::from_le_bytes(b));
                }
            }
        }
        Ok((Tensor::new(&shape, data)?, dtype))
    }
}

const DUMP_MAGIC: &[u8; 4] = b"LUCT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DumpDtype {
    F32 = 0,
    F64 = 1,
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}
