//! The local-global (LG) block and its four residual sub-blocks:
//!
//! ```text
//! x     = LocalAggregation(x_in) + x_in
//! y     = CMLP(x) + x
//! z     = TransConv(GlobalSparseAttention(y)) + y
//! x_out = MLP(z) + z
//! ```
//!
//! The last projection of every residual branch starts at zero, so a freshly
//! built block is exactly the identity.

use serde::{Deserialize, Serialize};

use super::layers::{Activation, BatchNorm2d, Conv2d, LayerNorm, Linear, Norm2d};
use super::{Builder, Init, ParamId, Session};
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    /// Token sampling stride `r`: one token per `r x r` window.
    pub sample_stride: usize,
    pub mlp_ratio: f64,
    /// Normalization inside the local aggregation branch.
    pub norm_kind: NormKind,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn new(channels: usize, heads: usize, sample_stride: usize) -> Self {
        Self {
            channels,
            heads,
            sample_stride,
            mlp_ratio: 4.0,
            norm_kind: NormKind::Batch,
            activation: Activation::Gelu,
        }
    }

    pub fn hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "block_config",
                format!("channels {} not divisible by heads {}", self.channels, self.heads),
            ));
        }
        if self.sample_stride == 0 {
            return Err(Error::invalid("block_config", "sample stride must be >= 1"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::invalid("block_config", "mlp_ratio must be positive"));
        }
        Ok(())
    }

    fn check_input(&self, op: &'static str, s: &Session, x: Var) -> Result<(usize, usize)> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                op,
                format!("expected [B, {}, H, W], got {shape:?}", self.channels),
            ));
        }
        Ok((shape[2], shape[3]))
    }
}

fn residual(s: &mut Session, branch: Var, x: Var) -> Result<Var> {
    s.graph.add(branch, x)
}

/// Pointwise conv, depthwise 3x3 conv, pointwise projection, plus the input.
#[derive(Debug, Clone)]
pub struct LocalAggregation {
    cfg: BlockConfig,
    pw1: Conv2d,
    norm1: Norm2d,
    dw: Conv2d,
    norm2: Norm2d,
    pw2: Conv2d,
}

fn make_norm(b: &mut Builder, kind: NormKind, c: usize) -> Norm2d {
    match kind {
        NormKind::Batch => Norm2d::Batch(BatchNorm2d::new(b, c)),
        NormKind::Layer => Norm2d::Layer(LayerNorm::new(b, c)),
    }
}

impl LocalAggregation {
    pub fn new(b: &mut Builder, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        Self {
            cfg: cfg.clone(),
            pw1: Conv2d::pointwise(&mut b.child("pw1"), c, c, false),
            norm1: make_norm(&mut b.child("norm1"), cfg.norm_kind, c),
            dw: Conv2d::new(&mut b.child("dw"), c, c, 3, 1, 1, c, true, false),
            norm2: make_norm(&mut b.child("norm2"), cfg.norm_kind, c),
            pw2: Conv2d::pointwise(&mut b.child("pw2"), c, c, true),
        }
    }

    pub fn projection(&self) -> &Conv2d {
        &self.pw2
    }

    pub fn forward(&self, s: &mut Session, x_in: Var) -> Result<Var> {
        self.cfg.check_input("local_aggregation", s, x_in)?;
        let h = self.pw1.forward(s, x_in)?;
        let h = self.norm1.forward(s, h)?;
        let h = self.cfg.activation.apply(s, h)?;
        let h = self.dw.forward(s, h)?;
        let h = self.norm2.forward(s, h)?;
        let h = self.cfg.activation.apply(s, h)?;
        let h = self.pw2.forward(s, h)?;
        residual(s, h, x_in)
    }
}

/// Two 1x1 convolutions with an activation between, plus the input.
#[derive(Debug, Clone)]
pub struct ConvMlp {
    cfg: BlockConfig,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ConvMlp {
    pub fn new(b: &mut Builder, cfg: &BlockConfig) -> Self {
        let (c, hdim) = (cfg.channels, cfg.hidden());
        Self {
            cfg: cfg.clone(),
            fc1: Conv2d::pointwise(&mut b.child("fc1"), c, hdim, false),
            fc2: Conv2d::pointwise(&mut b.child("fc2"), hdim, c, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.cfg.check_input("cmlp", s, x)?;
        let h = self.fc1.forward(s, x)?;
        let h = self.cfg.activation.apply(s, h)?;
        let h = self.fc2.forward(s, h)?;
        residual(s, h, x)
    }
}

/// Multi-head self-attention over one token per `r x r` window.
///
/// Tokens are the top-left element of each window (stride-`r` subsampling),
/// layer-normalized before the QKV projection. The output stays at the
/// reduced `H/r x W/r` resolution.
#[derive(Debug, Clone)]
pub struct GlobalSparseAttention {
    cfg: BlockConfig,
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
}

/// Attention output together with the attention matrix `[B * heads, N, N]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Var,
    pub tokens: usize,
}

impl GlobalSparseAttention {
    pub fn new(b: &mut Builder, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        Self {
            cfg: cfg.clone(),
            norm: LayerNorm::new(&mut b.child("norm"), c),
            qkv: Linear::new(&mut b.child("qkv"), c, 3 * c, false),
            proj: Linear::new(&mut b.child("proj"), c, c, false),
        }
    }

    pub fn value_projection(&self) -> (&Linear, &Linear, &LayerNorm) {
        (&self.qkv, &self.proj, &self.norm)
    }

    pub fn forward(&self, s: &mut Session, y: Var) -> Result<Var> {
        Ok(self.forward_traced(s, y)?.output)
    }

    pub fn forward_traced(&self, s: &mut Session, y: Var) -> Result<AttentionTrace> {
        let (h, w) = self.cfg.check_input("global_sparse_attention", s, y)?;
        let r = self.cfg.sample_stride;
        if h % r != 0 || w % r != 0 {
            return Err(Error::invalid(
                "global_sparse_attention",
                format!("sample stride {r} must divide {h}x{w}"),
            ));
        }
        let batch = s.graph.shape(y)[0];
        let (c, heads, d) = (self.cfg.channels, self.cfg.heads, self.cfg.head_dim());
        let (th, tw) = (h / r, w / r);
        let n = th * tw;

        let sampled = s.graph.subsample(y, r)?;
        let tokens = s.graph.permute(sampled, &[0, 2, 3, 1])?;
        let tokens = s.graph.reshape(tokens, &[batch, n, c])?;
        let tokens = self.norm.forward(s, tokens)?;
        let qkv = self.qkv.forward(s, tokens)?;
        let qkv = s.graph.reshape(qkv, &[batch, n, 3, heads, d])?;
        let qkv = s.graph.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let sl = s.graph.slice(qkv, 0, i, 1)?;
            *part = s.graph.reshape(sl, &[batch * heads, n, d])?;
        }
        let [q, k, v] = parts;
        let kt = s.graph.transpose(k)?;
        let scores = s.graph.matmul(q, kt)?;
        let scores = s.graph.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = s.graph.softmax(scores, 2)?;
        let out = s.graph.matmul(attn, v)?;
        let out = s.graph.reshape(out, &[batch, heads, n, d])?;
        let out = s.graph.permute(out, &[0, 2, 1, 3])?;
        let out = s.graph.reshape(out, &[batch, n, c])?;
        let out = self.proj.forward(s, out)?;
        let out = s.graph.reshape(out, &[batch, th, tw, c])?;
        let output = s.graph.permute(out, &[0, 3, 1, 2])?;
        Ok(AttentionTrace {
            output,
            weights: attn,
            tokens: n,
        })
    }
}

/// Spreads attended tokens back over their windows with a stride-`r`
/// transposed convolution and adds the full-resolution input.
#[derive(Debug, Clone)]
pub struct TransConvSpread {
    cfg: BlockConfig,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TransConvSpread {
    pub fn new(b: &mut Builder, cfg: &BlockConfig) -> Self {
        let (c, r) = (cfg.channels, cfg.sample_stride);
        Self {
            cfg: cfg.clone(),
            weight: b.param("weight", &[c, c, r, r], Init::Zeros, true),
            bias: b.param("bias", &[c], Init::Zeros, false),
        }
    }

    pub fn forward(&self, s: &mut Session, attended: Var, y: Var) -> Result<Var> {
        let (h, w) = self.cfg.check_input("trans_conv_spread", s, y)?;
        let r = self.cfg.sample_stride;
        let a = s.graph.shape(attended).to_vec();
        let ys = s.graph.shape(y);
        if a.len() != 4 || a[0] != ys[0] || a[1] != ys[1] || a[2] * r != h || a[3] * r != w {
            return Err(Error::shape(
                "trans_conv_spread",
                format!("attended {a:?} does not map to {ys:?} at stride {r}"),
            ));
        }
        let wv = s.param(self.weight);
        let bv = s.param(self.bias);
        let spread = s.graph.conv_transpose2d(attended, wv, Some(bv), r)?;
        residual(s, spread, y)
    }
}

/// Token-wise two-layer perceptron over channels, plus the input.
#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: BlockConfig,
    norm: Option<LayerNorm>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, cfg: &BlockConfig, pre_norm: bool) -> Self {
        let (c, hdim) = (cfg.channels, cfg.hidden());
        Self {
            cfg: cfg.clone(),
            norm: pre_norm.then(|| LayerNorm::new(&mut b.child("norm"), c)),
            fc1: Linear::new(&mut b.child("fc1"), c, hdim, false),
            fc2: Linear::new(&mut b.child("fc2"), hdim, c, true),
        }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        self.cfg.check_input("mlp", s, z)?;
        let t = s.graph.permute(z, &[0, 2, 3, 1])?;
        let t = match &self.norm {
            Some(n) => n.forward(s, t)?,
            None => t,
        };
        let h = self.fc1.forward(s, t)?;
        let h = self.cfg.activation.apply(s, h)?;
        let h = self.fc2.forward(s, h)?;
        let h = s.graph.permute(h, &[0, 3, 1, 2])?;
        residual(s, h, z)
    }
}

#[derive(Debug, Clone)]
pub struct LgBlock {
    pub cfg: BlockConfig,
    pub local: LocalAggregation,
    pub cmlp: ConvMlp,
    pub attention: GlobalSparseAttention,
    pub spread: TransConvSpread,
    pub mlp: Mlp,
}

impl LgBlock {
    pub fn new(b: &mut Builder, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            local: LocalAggregation::new(&mut b.child("local"), cfg),
            cmlp: ConvMlp::new(&mut b.child("cmlp"), cfg),
            attention: GlobalSparseAttention::new(&mut b.child("attn"), cfg),
            spread: TransConvSpread::new(&mut b.child("spread"), cfg),
            mlp: Mlp::new(&mut b.child("mlp"), cfg, true),
        })
    }

    pub fn forward(&self, s: &mut Session, x_in: Var) -> Result<Var> {
        let (h, w) = self.cfg.check_input("lg_block", s, x_in)?;
        let r = self.cfg.sample_stride;
        if h % r != 0 || w % r != 0 {
            return Err(Error::invalid(
                "lg_block",
                format!("sample stride {r} must divide {h}x{w}"),
            ));
        }
        let x = self.local.forward(s, x_in)?;
        let y = self.cmlp.forward(s, x)?;
        let a = self.attention.forward(s, y)?;
        let z = self.spread.forward(s, a, y)?;
        self.mlp.forward(s, z)
    }
}
