//! Closed-form parameter and FLOP accounting.
//!
//! Counting rules: 2 FLOPs per multiply-accumulate in convolutions, linear
//! layers and transposed convolutions (biases not counted); attention counts
//! `QK^T` and `AV` as `2 N^2 C` each and 3 FLOPs per softmax score.
//! Normalization, activations, residual additions and bilinear resizing are
//! not counted.

use serde::Serialize;

use super::{ModelConfig, NUM_STAGES};
use crate::nn::BlockConfig;

/// Reference figures reported for the published model at 1x1x224x224.
pub const PAPER_PARAMS_M: f64 = 6.93;
pub const PAPER_GFLOPS: f64 = 6.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub params: u64,
    pub flops: u64,
}

fn conv_params(cin: u64, cout: u64, k: u64, groups: u64, bias: bool) -> u64 {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

/// Conv + batch norm, the plain CNN unit.
fn unit_params(cin: u64, cout: u64) -> u64 {
    conv_params(cin, cout, 3, 1, false) + 2 * cout
}

pub fn lg_block_params(b: &BlockConfig) -> u64 {
    let c = b.channels as u64;
    let h = b.hidden() as u64;
    let r = b.sample_stride as u64;
    let local = 2 * (c * c + c) + 2 * (2 * c) + (9 * c + c);
    let cmlp = 2 * c * h + h + c;
    let attn = 2 * c + (3 * c * c + 3 * c) + (c * c + c);
    let spread = c * c * r * r + c;
    let mlp = 2 * c + 2 * c * h + h + c;
    local + cmlp + attn + spread + mlp
}

pub fn param_count(cfg: &ModelConfig) -> u64 {
    let widths = cfg.stage_widths().map(|w| w as u64);
    let mut total = 0;
    for (i, spec) in cfg.stage_specs().iter().enumerate() {
        let (cin, out) = (spec.in_channels as u64, widths[i]);
        let mid = out / 2;
        total += unit_params(cin, mid) + unit_params(mid, mid) + unit_params(mid, out);
        if cfg.lg_enabled {
            total += lg_block_params(&cfg.block_config(i));
        }
    }
    for c in cfg.decoder_widths().map(|w| w as u64) {
        total += unit_params(c + c / 2, c / 2) + unit_params(c / 2, c / 2);
    }
    let k = cfg.num_classes as u64;
    for j in cfg.head_decoders() {
        total += conv_params(cfg.decoder_widths()[j] as u64 / 2, k, 1, 1, true);
    }
    total
}

/// FLOPs of the attention core over `tokens` tokens of width `channels`.
pub fn attention_core_flops(tokens: u64, channels: u64, heads: u64) -> u64 {
    let n2 = tokens * tokens;
    2 * n2 * channels + 3 * n2 * heads + 2 * n2 * channels
}

/// FLOPs of one LG block on an `h x w` map.
pub fn lg_block_flops(b: &BlockConfig, h: u64, w: u64) -> u64 {
    let c = b.channels as u64;
    let hid = b.hidden() as u64;
    let r = b.sample_stride as u64;
    let px = h * w;
    let n = px / (r * r);
    let local = 2 * px * (c * c + 9 * c + c * c);
    let cmlp = 2 * px * 2 * c * hid;
    let attn = 2 * n * (3 * c * c + c * c) + attention_core_flops(n, c, b.heads as u64);
    let spread = 2 * px * c * c;
    let mlp = 2 * px * 2 * c * hid;
    local + cmlp + attn + spread + mlp
}

pub fn flop_count(cfg: &ModelConfig, input: (usize, usize)) -> u64 {
    let (h, w) = (input.0 as u64, input.1 as u64);
    let widths = cfg.stage_widths().map(|w| w as u64);
    let conv3 = |cin: u64, cout: u64, px: u64| 2 * 9 * cin * cout * px;
    let mut total = 0;
    let mut px = h * w;
    for (i, spec) in cfg.stage_specs().iter().enumerate() {
        let (cin, out) = (spec.in_channels as u64, widths[i]);
        let mid = out / 2;
        let down_px = px / 4;
        total += conv3(cin, mid, px) + conv3(mid, mid, px) + conv3(mid, out, down_px);
        if cfg.lg_enabled {
            let s = 2u64.pow(i as u32 + 1);
            total += lg_block_flops(&cfg.block_config(i), h / s, w / s);
        }
        px = down_px;
    }
    let k = cfg.num_classes as u64;
    let first_head = cfg.head_decoders().start;
    for (j, c) in cfg.decoder_widths().map(|w| w as u64).into_iter().enumerate() {
        let s = 2u64.pow((NUM_STAGES - 1 - j) as u32);
        let px = (h / s) * (w / s);
        total += conv3(c + c / 2, c / 2, px) + conv3(c / 2, c / 2, px);
        if j >= first_head {
            total += 2 * (c / 2) * k * px;
        }
    }
    total
}

pub fn complexity(cfg: &ModelConfig, input: (usize, usize)) -> Complexity {
    Complexity {
        params: param_count(cfg),
        flops: flop_count(cfg, input),
    }
}
