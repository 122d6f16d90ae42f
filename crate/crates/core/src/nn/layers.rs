use serde::{Deserialize, Serialize};

use super::{BnUpdate, BufferId, Builder, Init, Mode, ParamId, Session};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    LeakyRelu,
    Identity,
}

impl Activation {
    pub fn apply(self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => s.graph.gelu(x),
            Activation::LeakyRelu => s.graph.leaky_relu(x, LEAKY_SLOPE),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        zero_init: bool,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Kaiming { fan_in }
        };
        let weight = b.param("weight", &[cout, cin / groups, kernel, kernel], init, true);
        let bias = bias.then(|| b.param("bias", &[cout], Init::Zeros, false));
        Self {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            groups,
        }
    }

    /// 1x1 convolution with bias.
    pub fn pointwise(b: &mut Builder, cin: usize, cout: usize, zero_init: bool) -> Self {
        Self::new(b, cin, cout, 1, 1, 0, 1, true, zero_init)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels / self.groups * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let bias = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, bias, self.stride, self.padding, self.groups)
    }
}

/// Fully connected layer over the last axis; weight is `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, fin: usize, fout: usize, zero_init: bool) -> Self {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Kaiming { fan_in: fin }
        };
        Self {
            weight: b.param("weight", &[fout, fin], init, true),
            bias: b.param("bias", &[fout], Init::Zeros, false),
            in_features: fin,
            out_features: fout,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = s.graph.reshape(x, &[rows, self.in_features])?;
        let w = s.param(self.weight);
        let wt = s.graph.transpose(w)?;
        let y = s.graph.matmul(flat, wt)?;
        let bias = s.param(self.bias);
        let y = s.graph.add_bias(y, bias, 1)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_features;
        s.graph.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize) -> Self {
        Self {
            gamma: b.param("gamma", &[channels], Init::Ones, false),
            beta: b.param("beta", &[channels], Init::Zeros, false),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, gamma, beta, None, NORM_EPS)?;
                if let Some(stats) = stats {
                    s.record_bn(BnUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        momentum: BN_MOMENTUM,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.buffer(self.running_mean).data().to_vec();
                let var = s.buffer(self.running_var).data().to_vec();
                let (y, _) = s.graph.batch_norm(x, gamma, beta, Some((&mean, &var)), NORM_EPS)?;
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, features: usize) -> Self {
        Self {
            gamma: b.param("gamma", &[features], Init::Ones, false),
            beta: b.param("beta", &[features], Init::Zeros, false),
        }
    }

    /// Normalizes the last axis.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.graph.layer_norm(x, gamma, beta, NORM_EPS)
    }

    /// Normalizes the channel axis of an NCHW tensor.
    pub fn forward_nchw(&self, s: &mut Session, x: Var) -> Result<Var> {
        let nhwc = s.graph.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(s, nhwc)?;
        s.graph.permute(y, &[0, 3, 1, 2])
    }
}

/// Normalization over the channels of an NCHW map.
#[derive(Debug, Clone)]
pub enum Norm2d {
    Batch(BatchNorm2d),
    Layer(LayerNorm),
}

impl Norm2d {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Norm2d::Batch(bn) => bn.forward(s, x),
            Norm2d::Layer(ln) => ln.forward_nchw(s, x),
        }
    }
}

/// Convolution followed by normalization and activation.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: Norm2d,
    pub act: Activation,
}

impl ConvNormAct {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.norm.forward(s, y)?;
        self.act.apply(s, y)
    }
}

/// 3x3 (or strided) conv without bias, batch norm, LeakyReLU: the plain CNN unit.
pub fn conv_bn_lrelu(b: &mut Builder, cin: usize, cout: usize, stride: usize) -> ConvNormAct {
    let conv = Conv2d::new(&mut b.child("conv"), cin, cout, 3, stride, 1, 1, false, false);
    let norm = Norm2d::Batch(BatchNorm2d::new(&mut b.child("bn"), cout));
    ConvNormAct {
        conv,
        norm,
        act: Activation::LeakyRelu,
    }
}
