//! Closed-form complexity against counts read off an actual forward pass.

use lucf::model::complexity::{attention_core_flops, complexity, flop_count, param_count};
use lucf::model::{LucfNet, ModelConfig};
use lucf::nn::{Mode, Session};
use lucf::tensor::{Graph, OpKind, Tensor};

/// FLOPs of every conv, transposed conv, matmul and softmax recorded on the tape.
fn tape_flops(g: &Graph) -> u64 {
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    let mut total = 0;
    for v in g.vars() {
        let ins = g.inputs(v);
        total += match g.op_kind(v) {
            OpKind::Conv2d => {
                let w = g.shape(ins[1]);
                2 * numel(g.shape(v)) * numel(&w[1..])
            }
            OpKind::ConvTranspose2d => {
                let w = g.shape(ins[1]);
                2 * numel(g.shape(ins[0])) * numel(&w[1..])
            }
            OpKind::Matmul => {
                let a = g.shape(ins[0]);
                2 * numel(g.shape(v)) * a[a.len() - 1] as u64
            }
            OpKind::Softmax => 3 * numel(g.shape(v)),
            _ => 0,
        };
    }
    total
}

fn configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig {
            base_width: 4,
            heads: [1, 2, 2, 4],
            ..ModelConfig::default()
        },
        ModelConfig {
            base_width: 6,
            lg_enabled: false,
            fusion_depth: 1,
            num_classes: 3,
            input_size: (32, 48),
            ..ModelConfig::default()
        },
        ModelConfig {
            base_width: 2,
            in_channels: 3,
            sample_strides: [2, 2, 1, 1],
            mlp_ratio: 2.0,
            fusion_depth: 2,
            heads: [1, 1, 1, 1],
            input_size: (32, 32),
            ..ModelConfig::default()
        },
    ]
}

#[test]
fn params_match_enumeration() {
    for cfg in configs() {
        let net = LucfNet::new(&cfg, 0).unwrap();
        let enumerated: usize = net.store.params().iter().map(|p| p.value.numel()).sum();
        assert_eq!(param_count(&cfg), enumerated as u64, "{cfg:?}");
    }
}

#[test]
fn flops_match_tape() {
    for cfg in configs() {
        let net = LucfNet::new(&cfg, 0).unwrap();
        let (h, w) = cfg.input_size;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &net.store, Mode::Eval).inference();
        let x = s.graph.constant(Tensor::zeros(&[1, cfg.in_channels, h, w]));
        net.forward(&mut s, x).unwrap();
        assert_eq!(flop_count(&cfg, (h, w)), tape_flops(&g), "{cfg:?}");
    }
}

#[test]
fn sparse_attention_saves_r4() {
    for r in [1u64, 2, 4, 7] {
        let n = 56 * 56;
        assert_eq!(
            attention_core_flops(n / (r * r), 64, 4) * r.pow(4),
            attention_core_flops(n, 64, 4)
        );
    }
}

#[test]
fn full_size_reconstruction_context() {
    let cfg = ModelConfig::paper_preset();
    let c = complexity(&cfg, (224, 224));
    // Reference figures (6.93 M, 6.60 GFLOPs) are context only.
    assert!((c.params as f64 / 1e6 - 6.93).abs() < 0.1, "{c:?}");
}
