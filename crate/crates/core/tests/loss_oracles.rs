use std::time::Instant;

use lucf::loss::{
    deep_supervision_loss, hybrid_loss, lovasz_class_loss, lovasz_softmax, ohem_terms, LossConfig,
    LovaszClasses,
};
use lucf::tensor::rng::{DetRng, Domain};
use lucf::tensor::{Graph, LabelMap, Tensor};
use proptest::prelude::*;

/// Discrete Jaccard loss of the prediction induced by a 0/1 error vector:
/// an erroneous foreground pixel is missed, an erroneous background pixel is
/// predicted.
fn jaccard_loss(errors: &[bool], fg: &[bool]) -> f64 {
    let gt = fg.iter().filter(|&&f| f).count();
    let missed = errors.iter().zip(fg).filter(|(&e, &f)| e && f).count();
    let extra = errors.iter().zip(fg).filter(|(&e, &f)| e && !f).count();
    if gt + extra == 0 {
        return 0.0;
    }
    1.0 - (gt - missed) as f64 / (gt + extra) as f64
}

fn bits(mask: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

#[test]
fn lovasz_equals_discrete_jaccard_on_binary_errors() {
    let start = Instant::now();
    for n in 1..=10usize {
        // A few label patterns per size, including all-background and all-foreground.
        let mut patterns = vec![0u32, (1 << n) - 1];
        let mut rng = DetRng::new(n as u64, Domain::Test, &[]);
        patterns.extend((0..2).map(|_| rng.below(1 << n) as u32));
        for &lab in &patterns {
            let fg = bits(lab, n);
            let labels = LabelMap::new(&[1, 1, n], fg.iter().map(|&f| usize::from(f)).collect()).unwrap();
            for e in 0..1u32 << n {
                let err = bits(e, n);
                let ef: Vec<f64> = err.iter().map(|&b| f64::from(u8::from(b))).collect();
                let oracle = jaccard_loss(&err, &fg);
                assert!((lovasz_class_loss(&ef, &fg) - oracle).abs() <= 1e-12);

                // Two-class softmax with one-hot probabilities: both classes
                // see the same error vector, the background with flipped labels.
                let p1: Vec<f64> = (0..n).map(|i| if fg[i] != err[i] { 1.0 } else { 0.0 }).collect();
                let probs = Tensor::from_fn(&[1, 2, 1, n], |i| if i < n { 1.0 - p1[i] } else { p1[i - n] });
                let mut g = Graph::new();
                let pv = g.constant(probs);
                let l = lovasz_softmax(&mut g, pv, &labels, LovaszClasses::All).unwrap();
                let bg: Vec<bool> = fg.iter().map(|f| !f).collect();
                let expected = 0.5 * (oracle + jaccard_loss(&err, &bg));
                assert!((g.value(l).item() - expected).abs() <= 1e-12, "n={n} labels={lab:b} errors={e:b}");
            }
        }
    }
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn perfect_prediction_gives_zero() {
    let labels = LabelMap::new(&[1, 2, 2], vec![0, 1, 2, 1]).unwrap();
    let probs = Tensor::from_fn(&[1, 3, 2, 2], |i| f64::from(u8::from(labels.data()[i % 4] == i / 4)));
    let mut g = Graph::new();
    let p = g.constant(probs);
    let l = lovasz_softmax(&mut g, p, &labels, LovaszClasses::All).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

fn random_fixture(rng: &mut DetRng) -> (Tensor, LabelMap) {
    let (b, c, h, w) = (1 + rng.below(2), 2 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5));
    let scale = rng.uniform_range(0.1, 5.0);
    let logits = Tensor::from_fn(&[b, c, h, w], |_| scale * rng.normal());
    let labels = LabelMap::new(&[b, h, w], (0..b * h * w).map(|_| rng.below(c)).collect()).unwrap();
    (logits, labels)
}

#[test]
fn ohem_hard_mean_never_below_full_mean() {
    let mut rng = DetRng::new(42, Domain::Test, &[]);
    for case in 0..1000 {
        let (logits, labels) = random_fixture(&mut rng);
        let theta = rng.uniform_range(0.05, 0.95);
        let frac = rng.uniform_range(0.01, 1.0);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let t = ohem_terms(&mut g, x, &labels, theta, frac).unwrap();
        let (org, re) = (g.value(t.org).item(), g.value(t.re).item());
        assert!(re >= org - 1e-12, "case {case}: re {re} < org {org}");
        assert!(!t.hard.is_empty());
    }
}

#[test]
fn uniform_predictions_double_the_mean() {
    let labels = LabelMap::new(&[1, 3, 3], (0..9).map(|i| i % 4).collect()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 3, 3]));
    let t = ohem_terms(&mut g, x, &labels, 0.7, 1.0 / 16.0).unwrap();
    assert_eq!(t.hard.len(), 9);
    let (org, re) = (g.value(t.org).item(), g.value(t.re).item());
    assert!((re - org).abs() < 1e-15 && (org - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn hybrid_is_linear_in_weight() {
    let mut rng = DetRng::new(7, Domain::Test, &[]);
    for _ in 0..20 {
        let (logits, labels) = random_fixture(&mut rng);
        let at = |w: f64| {
            let cfg = LossConfig { hybrid_weight: w, ..LossConfig::lovasz_ohem() };
            let mut g = Graph::new();
            let x = g.constant(logits.clone());
            let l = hybrid_loss(&mut g, x, &labels, &cfg).unwrap();
            g.value(l.total).item()
        };
        let (l0, l1) = (at(0.0), at(1.0));
        for w in [0.25, 0.5, 0.75] {
            assert!((at(w) - ((1.0 - w) * l0 + w * l1)).abs() < 1e-12);
        }
    }
}

#[test]
fn deep_supervision_sums_heads() {
    let mut rng = DetRng::new(8, Domain::Test, &[]);
    let (a, labels) = random_fixture(&mut rng);
    let b = Tensor::from_fn(a.shape(), |_| rng.normal());
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let (one, r1) = deep_supervision_loss(&mut g, &[av], &labels, &cfg).unwrap();
    let single = hybrid_loss(&mut g, av, &labels, &cfg).unwrap();
    assert_eq!(g.value(one).item(), g.value(single.total).item());
    assert_eq!(r1.per_head.len(), 1);

    let (_, r2) = deep_supervision_loss(&mut g, &[av, bv], &labels, &cfg).unwrap();
    assert!((r2.total - r2.per_head.iter().sum::<f64>()).abs() < 1e-9);
    let (_, twice) = deep_supervision_loss(&mut g, &[av, av], &labels, &cfg).unwrap();
    assert!((twice.total - 2.0 * r1.total).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn lovasz_class_loss_bounded(
        errors in prop::collection::vec(0.0f64..=1.0, 1..24),
        seed in any::<u64>(),
    ) {
        let mut rng = DetRng::new(seed, Domain::Test, &[]);
        let fg: Vec<bool> = errors.iter().map(|_| rng.bernoulli(0.4)).collect();
        let l = lovasz_class_loss(&errors, &fg);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l), "{l}");
    }

    #[test]
    fn lovasz_class_loss_monotone(
        errors in prop::collection::vec(0.0f64..=1.0, 1..24),
        seed in any::<u64>(),
        frac in 0.0f64..1.0,
    ) {
        let mut rng = DetRng::new(seed, Domain::Test, &[]);
        let fg: Vec<bool> = errors.iter().map(|_| rng.bernoulli(0.4)).collect();
        let i = rng.below(errors.len());
        let mut lower = errors.clone();
        lower[i] *= frac;
        prop_assert!(lovasz_class_loss(&lower, &fg) <= lovasz_class_loss(&errors, &fg) + 1e-12);
    }
}
