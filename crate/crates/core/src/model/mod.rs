//! The full network: four encoder stages with optional LG blocks, four
//! decoder stages with skip connections, and one output head per selected
//! decoder depth. The fused prediction is the sum of the head logits.

pub mod complexity;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Conv2d;
use crate::nn::{
    Activation, BlockConfig, Builder, DecoderStage, EncoderStage, Mode, NormKind, ParamStore,
    Session, StageSpec,
};
use crate::tensor::rng::{DetRng, Domain};
use crate::tensor::{Graph, Tensor, Var};

pub use complexity::{complexity, flop_count, param_count, Complexity, PAPER_GFLOPS, PAPER_PARAMS_M};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Width of the first convolutions; stage `i` (0-based) emits
    /// `2^(i+1) * base_width` channels.
    pub base_width: usize,
    pub sample_strides: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub mlp_ratio: f64,
    pub lg_enabled: bool,
    /// Number of trailing decoder depths with an output head (1..=4).
    pub fusion_depth: usize,
    pub input_size: (usize, usize),
    pub norm_kind: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            base_width: 16,
            sample_strides: [4, 2, 2, 1],
            heads: [1, 2, 4, 8],
            mlp_ratio: 4.0,
            lg_enabled: true,
            fusion_depth: 4,
            input_size: (64, 64),
            norm_kind: NormKind::Batch,
        }
    }
}

impl ModelConfig {
    /// A reconstruction of the full-size model at 224x224 with 9 classes.
    pub fn paper_preset() -> Self {
        Self {
            num_classes: 9,
            base_width: 22,
            input_size: (224, 224),
            ..Self::default()
        }
    }

    /// Output channels of each encoder stage.
    pub fn stage_widths(&self) -> [usize; NUM_STAGES] {
        std::array::from_fn(|i| self.base_width << (i + 1))
    }

    pub fn stage_specs(&self) -> [StageSpec; NUM_STAGES] {
        let widths = self.stage_widths();
        std::array::from_fn(|i| StageSpec {
            in_channels: if i == 0 { self.in_channels } else { widths[i - 1] },
            out_channels: widths[i],
            downsample: true,
            lg_enabled: self.lg_enabled,
        })
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            channels: self.stage_widths()[stage],
            heads: self.heads[stage],
            sample_stride: self.sample_strides[stage],
            mlp_ratio: self.mlp_ratio,
            norm_kind: self.norm_kind,
            activation: Activation::Gelu,
        }
    }

    /// Input channels of decoder `j` (0-based, coarsest first).
    pub fn decoder_widths(&self) -> [usize; NUM_STAGES] {
        let widths = self.stage_widths();
        std::array::from_fn(|j| widths[NUM_STAGES - 1 - j])
    }

    /// Indices of the decoders that carry an output head.
    pub fn head_decoders(&self) -> std::ops::Range<usize> {
        NUM_STAGES - self.fusion_depth..NUM_STAGES
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("model_config", detail));
        if self.in_channels == 0 || self.base_width == 0 {
            return bad("in_channels and base_width must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if !(1..=NUM_STAGES).contains(&self.fusion_depth) {
            return bad(format!("fusion_depth {} not in 1..=4", self.fusion_depth));
        }
        if self.lg_enabled {
            for i in 0..NUM_STAGES {
                self.block_config(i).validate()?;
            }
        }
        self.check_input_size(self.input_size.0, self.input_size.1)
    }

    /// Every extent must survive four halvings and every sampling stride must
    /// divide its stage's feature map.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
            return Err(Error::invalid(
                "model_input",
                format!("spatial size {h}x{w} must be a positive multiple of 16"),
            ));
        }
        if self.lg_enabled {
            for (i, &r) in self.sample_strides.iter().enumerate() {
                let (sh, sw) = (h >> (i + 1), w >> (i + 1));
                if r == 0 || sh % r != 0 || sw % r != 0 {
                    return Err(Error::invalid(
                        "model_input",
                        format!("stride {r} does not divide stage {} map {sh}x{sw}", i + 1),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// 1x1 convolution to class logits followed by bilinear resizing to the
/// output resolution.
#[derive(Debug, Clone)]
pub struct CieHead {
    pub conv: Conv2d,
}

impl CieHead {
    pub fn new(b: &mut Builder, channels: usize, num_classes: usize) -> Self {
        Self {
            conv: Conv2d::pointwise(b, channels, num_classes, false),
        }
    }

    pub fn forward(&self, s: &mut Session, feat: Var, out_size: (usize, usize)) -> Result<Var> {
        let shape = s.graph.shape(feat);
        if shape.len() == 4 && (shape[2] > out_size.0 || shape[3] > out_size.1) {
            log::warn!(
                "output head downscales {}x{} to {}x{}",
                shape[2],
                shape[3],
                out_size.0,
                out_size.1
            );
        }
        let logits = self.conv.forward(s, feat)?;
        let ls = s.graph.shape(logits);
        if (ls[2], ls[3]) == out_size {
            return Ok(logits);
        }
        s.graph.bilinear_resize(logits, out_size.0, out_size.1)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// One `[B, classes, H, W]` logit map per head, coarsest decoder first.
    pub head_logits: Vec<Var>,
    pub fused_logits: Var,
    /// Post-LG outputs of the four encoder stages.
    pub encoder_features: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct LucfNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<EncoderStage>,
    pub decoders: Vec<DecoderStage>,
    pub heads: Vec<CieHead>,
}

impl LucfNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(seed, Domain::Init, &[]);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut encoders = Vec::with_capacity(NUM_STAGES);
        for (i, spec) in cfg.stage_specs().iter().enumerate() {
            let block = cfg.block_config(i);
            encoders.push(EncoderStage::new(
                &mut b.child(&format!("enc{}", i + 1)),
                spec,
                Some(&block),
            )?);
        }
        let mut decoders = Vec::with_capacity(NUM_STAGES);
        for (j, &c) in cfg.decoder_widths().iter().enumerate() {
            decoders.push(DecoderStage::new(&mut b.child(&format!("dec{}", j + 1)), c)?);
        }
        let heads = cfg
            .head_decoders()
            .map(|j| {
                CieHead::new(
                    &mut b.child(&format!("head{}", j + 1)),
                    decoders[j].out_channels(),
                    cfg.num_classes,
                )
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoders,
            decoders,
            heads,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ForwardOutputs> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [B, {}, H, W], got {shape:?}", self.cfg.in_channels),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        self.cfg.check_input_size(h, w)?;

        let mut feat = x;
        let mut full_res = None;
        let mut encoder_features = Vec::with_capacity(NUM_STAGES);
        for enc in &self.encoders {
            let out = enc.forward(s, feat)?;
            full_res.get_or_insert(out.pre_down);
            encoder_features.push(out.out);
            feat = out.out;
        }
        let full_res = full_res.expect("four stages");

        let mut head_logits = Vec::with_capacity(self.heads.len());
        let first_head = self.cfg.head_decoders().start;
        for (j, dec) in self.decoders.iter().enumerate() {
            // Decoder j joins encoder stage 3 - j; the last one joins the
            // full-resolution convolutions of stage 1.
            let skip = if j + 1 < NUM_STAGES {
                encoder_features[NUM_STAGES - 2 - j]
            } else {
                full_res
            };
            feat = dec.forward(s, feat, skip)?;
            if j >= first_head {
                head_logits.push(self.heads[j - first_head].forward(s, feat, (h, w))?);
            }
        }
        let mut fused = head_logits[0];
        for &hl in &head_logits[1..] {
            fused = s.graph.add(fused, hl)?;
        }
        Ok(ForwardOutputs {
            head_logits,
            fused_logits: fused,
            encoder_features,
        })
    }

    /// Gradient-free forward pass returning `(head logits, fused logits)`.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.store, mode).inference();
        let xv = s.graph.constant(x.clone());
        let out = self.forward(&mut s, xv)?;
        let heads = out.head_logits.iter().map(|&v| g.value(v).clone()).collect();
        Ok((heads, g.value(out.fused_logits).clone()))
    }

    /// Channel-averaged post-LG feature map of encoder stage `stage`
    /// (1-based), min-max normalized per sample to `[0, 1]`; `[B, h, w]`.
    /// A constant map becomes all 0.5.
    pub fn dump_features(&self, x: &Tensor, stage: usize, mode: Mode) -> Result<Tensor> {
        if !(1..=NUM_STAGES).contains(&stage) {
            return Err(Error::invalid(
                "dump_features",
                format!("stage {stage} not in 1..=4"),
            ));
        }
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.store, mode).inference();
        let xv = s.graph.constant(x.clone());
        let out = self.forward(&mut s, xv)?;
        let feat = g.value(out.encoder_features[stage - 1]);
        Ok(heat_map(feat))
    }
}

/// Channel mean of an NCHW tensor, normalized to `[0, 1]` per sample.
pub fn heat_map(feat: &Tensor) -> Tensor {
    let [b, c, h, w] = [feat.shape()[0], feat.shape()[1], feat.shape()[2], feat.shape()[3]];
    let plane = h * w;
    let mut out = vec![0.0; b * plane];
    for (bi, dst) in out.chunks_mut(plane).enumerate() {
        for ci in 0..c {
            let src = &feat.data()[(bi * c + ci) * plane..][..plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d /= c as f64);
        let lo = dst.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            dst.iter_mut().for_each(|d| *d = (*d - lo) / (hi - lo));
        } else {
            dst.iter_mut().for_each(|d| *d = 0.5);
        }
    }
    Tensor::new(&[b, h, w], out).expect("consistent shape")
}

/// Writes one `[h, w]` plane with values in `[0, 1]` as binary PGM.
pub fn write_pgm(path: &std::path::Path, plane: &[f64], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = plane
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&bytes);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            heads: [1, 1, 2, 2],
            input_size: (32, 32),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stage_widths_double() {
        assert_eq!(tiny().stage_widths(), [8, 16, 32, 64]);
        assert_eq!(tiny().decoder_widths(), [64, 32, 16, 8]);
    }

    #[test]
    fn heads_at_full_resolution_and_fused_is_sum() {
        let net = LucfNet::new(&tiny(), 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 32, 32], |i| (i as f64 * 0.37).sin());
        let (heads, fused) = net.predict(&x, Mode::Train).unwrap();
        assert_eq!(heads.len(), 4);
        let mut sum = heads[0].clone();
        for h in &heads {
            assert_eq!(h.shape(), &[2, 4, 32, 32]);
        }
        for h in &heads[1..] {
            for (a, b) in sum.data_mut().iter_mut().zip(h.data()) {
                *a += b;
            }
        }
        assert_eq!(sum.data(), fused.data());
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = LucfNet::new(&tiny(), 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 24, 32]);
        assert!(net.predict(&x, Mode::Eval).is_err());
    }

    #[test]
    fn fusion_depth_bounds() {
        for d in [0, 5] {
            let cfg = ModelConfig { fusion_depth: d, ..tiny() };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn heat_map_normalization() {
        let t = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let m = heat_map(&t);
        assert_eq!(m.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let c = heat_map(&Tensor::full(&[1, 3, 2, 2], 7.0));
        assert!(c.data().iter().all(|&v| v == 0.5));
    }
}
