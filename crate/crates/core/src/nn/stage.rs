//! Plain convolutional encoder and decoder stages.

use serde::{Deserialize, Serialize};

use super::blocks::{BlockConfig, LgBlock};
use super::layers::{conv_bn_lrelu, ConvNormAct};
use super::{Builder, Session};
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub downsample: bool,
    pub lg_enabled: bool,
}

/// Features produced by one encoder stage.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Output of the two full-resolution convolutions (`out_channels / 2`).
    pub pre_down: Var,
    /// Stage output after downsampling and the optional LG block.
    pub out: Var,
}

/// Two 3x3 conv units at `out/2` channels, a stride-2 3x3 conv to `out`
/// channels, then an LG block when enabled.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub spec: StageSpec,
    conv1: ConvNormAct,
    conv2: ConvNormAct,
    down: ConvNormAct,
    pub lg: Option<LgBlock>,
}

impl EncoderStage {
    pub fn new(b: &mut Builder, spec: &StageSpec, block: Option<&BlockConfig>) -> Result<Self> {
        if spec.out_channels < 2 || !spec.out_channels.is_multiple_of(2) || spec.in_channels == 0 {
            return Err(Error::invalid(
                "encoder_stage",
                format!("invalid widths {} -> {}", spec.in_channels, spec.out_channels),
            ));
        }
        let mid = spec.out_channels / 2;
        let stride = if spec.downsample { 2 } else { 1 };
        let lg = match (spec.lg_enabled, block) {
            (false, _) => None,
            (true, Some(cfg)) => {
                if cfg.channels != spec.out_channels {
                    return Err(Error::invalid(
                        "encoder_stage",
                        format!("LG block width {} != stage width {}", cfg.channels, spec.out_channels),
                    ));
                }
                Some(LgBlock::new(&mut b.child("lg"), cfg)?)
            }
            (true, None) => {
                return Err(Error::invalid("encoder_stage", "LG enabled without a block config"))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            conv1: conv_bn_lrelu(&mut b.child("conv1"), spec.in_channels, mid, 1),
            conv2: conv_bn_lrelu(&mut b.child("conv2"), mid, mid, 1),
            down: conv_bn_lrelu(&mut b.child("down"), mid, spec.out_channels, stride),
            lg,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<EncoderOutput> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "encoder_stage",
                format!("expected [B, {}, H, W], got {shape:?}", self.spec.in_channels),
            ));
        }
        if self.spec.downsample && (!shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2)) {
            return Err(Error::invalid(
                "encoder_stage",
                format!("odd spatial extent {}x{}", shape[2], shape[3]),
            ));
        }
        let h = self.conv1.forward(s, x)?;
        let pre_down = self.conv2.forward(s, h)?;
        let mut out = self.down.forward(s, pre_down)?;
        if let Some(lg) = &self.lg {
            out = lg.forward(s, out)?;
        }
        Ok(EncoderOutput { pre_down, out })
    }
}

/// Bilinear x2 upsampling, channel concatenation with the skip, and two
/// 3x3 conv units reducing `C + C/2` channels to `C/2`.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub in_channels: usize,
    conv1: ConvNormAct,
    conv2: ConvNormAct,
}

impl DecoderStage {
    pub fn new(b: &mut Builder, in_channels: usize) -> Result<Self> {
        if in_channels < 2 || !in_channels.is_multiple_of(2) {
            return Err(Error::invalid(
                "decoder_stage",
                format!("input width {in_channels} must be even"),
            ));
        }
        let half = in_channels / 2;
        Ok(Self {
            in_channels,
            conv1: conv_bn_lrelu(&mut b.child("conv1"), in_channels + half, half, 1),
            conv2: conv_bn_lrelu(&mut b.child("conv2"), half, half, 1),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels / 2
    }

    pub fn forward(&self, s: &mut Session, x: Var, skip: Var) -> Result<Var> {
        let xs = s.graph.shape(x).to_vec();
        let ss = s.graph.shape(skip).to_vec();
        let c = self.in_channels;
        if xs.len() != 4 || xs[1] != c {
            return Err(Error::shape("decoder_stage", format!("expected [B, {c}, H, W], got {xs:?}")));
        }
        if ss != [xs[0], c / 2, 2 * xs[2], 2 * xs[3]] {
            return Err(Error::shape(
                "decoder_stage",
                format!("skip {ss:?} does not match input {xs:?}"),
            ));
        }
        let up = s.graph.bilinear_resize(x, 2 * xs[2], 2 * xs[3])?;
        let cat = s.graph.concat(&[up, skip], 1)?;
        let h = self.conv1.forward(s, cat)?;
        self.conv2.forward(s, h)
    }
}
