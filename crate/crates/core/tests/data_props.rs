use lucf::data::{augment, flip_horizontal, gen_synthetic, split, DatasetSpec, SegSample, ShapeFamily};
use lucf::tensor::{LabelMap, Tensor};
use proptest::prelude::*;

fn sample(h: usize, w: usize, seed: u64) -> SegSample {
    let label = LabelMap::new(&[h, w], (0..h * w).map(|i| (i * 7 + seed as usize) % 5).collect()).unwrap();
    let image = Tensor::from_fn(&[1, h, w], |i| label.data()[i] as f64 / 4.0);
    SegSample::new(image, label, "s").unwrap()
}

#[test]
fn histogram_matches_recount() {
    for family in [ShapeFamily::Ellipses, ShapeFamily::Polygons, ShapeFamily::Nested] {
        let spec = DatasetSpec { num_samples: 4, shape_family: family, ..DatasetSpec::default() };
        for s in gen_synthetic(&spec).unwrap() {
            let mut counts = vec![0usize; spec.num_classes];
            for &l in s.label.data() {
                counts[l] += 1;
            }
            assert_eq!(s.label.histogram(spec.num_classes), counts);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn split_seventy_ten_twenty() {
    let s = split(100, (0.7, 0.1, 0.2), 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
}

proptest! {
    #[test]
    fn augmentation_preserves_histogram_and_pairing(seed in any::<u64>(), square in any::<bool>()) {
        let s = if square { sample(8, 8, seed % 7) } else { sample(4, 8, seed % 7) };
        let a = augment(&s, seed);
        prop_assert_eq!(a.label.histogram(5), s.label.histogram(5));
        prop_assert_eq!(&a.image.shape()[1..], a.label.shape());
        // the image was a function of the label; it must still be
        for (v, &l) in a.image.data().iter().zip(a.label.data()) {
            prop_assert_eq!(*v, l as f64 / 4.0);
        }
    }

    #[test]
    fn augmentation_commutes_with_relabeling(seed in any::<u64>()) {
        let s = sample(8, 8, 3);
        let perm = [2usize, 0, 4, 1, 3];
        let relabel = |x: &SegSample| {
            let mut y = x.clone();
            y.label.data_mut().iter_mut().for_each(|l| *l = perm[*l]);
            y
        };
        prop_assert_eq!(augment(&relabel(&s), seed).label, relabel(&augment(&s, seed)).label);
    }

    #[test]
    fn double_flip_is_identity(seed in 0u64..50) {
        let s = sample(4, 8, seed);
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    }

    #[test]
    fn split_partitions(n in 3usize..200, a in 0.2f64..0.6, b in 0.1f64..0.3, seed in any::<u64>()) {
        let c = 1.0 - a - b;
        let s = match split(n, (a, b, c), seed) {
            Ok(s) => s,
            Err(_) => {
                // only refused when a rounded partition would be empty
                let (t, v) = ((a * n as f64).round() as usize, (b * n as f64).round() as usize);
                prop_assert!(t == 0 || v == 0 || t + v >= n);
                return Ok(());
            }
        };
        prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, (a, b, c), seed).unwrap(), s);
    }
}
