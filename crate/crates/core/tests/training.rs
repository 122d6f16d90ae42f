use lucf::data::{gen_synthetic, DatasetSpec, SegSample};
use lucf::metrics::HdVariant;
use lucf::model::{LucfNet, ModelConfig};
use lucf::nn::{Builder, Init, ParamStore};
use lucf::tensor::rng::{DetRng, Domain};
use lucf::train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lucf::train::optim::{lr_schedule, OptimConfig, OptimState};
use lucf::train::{evaluate_run, history_csv, TrainConfig, Trainer};

fn setup() -> (TrainConfig, Vec<SegSample>) {
    let data = gen_synthetic(&DatasetSpec {
        num_samples: 5,
        size: (32, 32),
        num_classes: 3,
        seed: 11,
        ..DatasetSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            base_width: 2,
            num_classes: 3,
            heads: [1, 1, 1, 1],
            input_size: (32, 32),
            ..ModelConfig::default()
        },
        batch_size: 2,
        epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    (cfg, data)
}

#[test]
fn identical_runs_are_bit_identical() {
    let (cfg, data) = setup();
    let run = || {
        let mut t = Trainer::new(&cfg, data.len()).unwrap();
        let rows = t.run(&data, u64::MAX, |_| {}).unwrap();
        (history_csv(&rows, cfg.model.fusion_depth), t.checkpoint().to_bytes())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
    assert_eq!(h1.lines().count(), 1 + 6);
}

#[test]
fn resume_reproduces_uninterrupted_history() {
    let (cfg, data) = setup();
    let mut full = Trainer::new(&cfg, data.len()).unwrap();
    let all = full.run(&data, u64::MAX, |_| {}).unwrap();

    // Stop mid-epoch, go through a file, continue.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mut first = Trainer::new(&cfg, data.len()).unwrap();
    let mut rows = first.run(&data, 2, |_| {}).unwrap();
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    rows.extend(resumed.run(&data, u64::MAX, |_| {}).unwrap());

    let heads = cfg.model.fusion_depth;
    assert_eq!(history_csv(&rows, heads), history_csv(&all, heads));
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn save_load_save_is_byte_identical() {
    let (cfg, data) = setup();
    let mut t = Trainer::new(&cfg, data.len()).unwrap();
    t.run(&data, 1, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&t.checkpoint(), &a).unwrap();
    save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn truncated_file_fails_to_load() {
    let (cfg, data) = setup();
    let t = Trainer::new(&cfg, data.len()).unwrap();
    let bytes = t.checkpoint().to_bytes();
    for cut in [0, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
}

fn scalar_store(v: f64, decay: bool) -> ParamStore {
    let mut s = ParamStore::new();
    let mut rng = DetRng::new(0, Domain::Test, &[]);
    let id = Builder::new(&mut s, &mut rng).param("w", &[1], Init::Zeros, decay);
    s.param_mut(id).value.data_mut()[0] = v;
    s
}

#[test]
fn two_steps_on_a_quadratic() {
    // f(w) = 0.5 a w^2, grad a w; hand recurrence of v <- m v + g + wd w, w <- w - lr v
    let (a, m, wd, lr) = (3.0, 0.9, 0.1, 0.05);
    let mut s = scalar_store(2.0, true);
    let cfg = OptimConfig { lr, momentum: m, weight_decay: wd, power: 0.0 };
    let mut opt = OptimState::new(cfg, &s, 10);
    let (mut w, mut v) = (2.0f64, 0.0f64);
    for _ in 0..2 {
        let g = a * s.params()[0].value.data()[0];
        opt.step(&mut s, &[Some(vec![g])]).unwrap();
        v = m * v + a * w + wd * w;
        w -= lr * v;
        assert!((s.params()[0].value.data()[0] - w).abs() < 1e-12);
    }
}

#[test]
fn decay_alone_shrinks_the_norm() {
    // without momentum |w| contracts every step; with it, it may overshoot but still shrinks overall
    for (momentum, monotone) in [(0.0, true), (0.9, false)] {
        let mut s = scalar_store(-1.5, true);
        let cfg = OptimConfig { lr: 0.1, momentum, weight_decay: 0.5, power: 0.9 };
        let mut opt = OptimState::new(cfg, &s, 20);
        let mut prev = 1.5;
        for _ in 0..19 {
            opt.step(&mut s, &[Some(vec![0.0])]).unwrap();
            let now = s.params()[0].value.data()[0].abs();
            if monotone {
                assert!(now < prev, "{now} >= {prev}");
            }
            prev = now;
        }
        assert!(prev < 1.5, "momentum {momentum}: {prev}");
    }
}

#[test]
fn schedule_is_non_increasing() {
    let mut prev = f64::INFINITY;
    for it in 0..=100 {
        let lr = lr_schedule(it, 100, 0.05, 0.9).unwrap();
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn untrained_model_predicts_background() {
    // Zero head weights make every logit equal; ties break to class 0.
    let (cfg, data) = setup();
    let mut net = LucfNet::new(&cfg.model, 0).unwrap();
    for p in net.store.params_mut() {
        if p.name.starts_with("head") {
            p.value.data_mut().fill(0.0);
        }
    }
    let r = evaluate_run(&net, &data, 2, HdVariant::Hd95, None).unwrap();
    assert!(r.rows.iter().all(|row| row.dsc == 0.0 || row.absent));
}
