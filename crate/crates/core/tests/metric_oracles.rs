use lucf::metrics::{dsc, evaluate, hausdorff, iou, HdVariant, Mask, Spacing};
use lucf::tensor::rng::{DetRng, Domain};
use lucf::tensor::LabelMap;
use proptest::prelude::*;

const N: usize = 32;

/// Union of a few random rectangles and disks, or sparse noise, or empty.
fn random_mask(rng: &mut DetRng) -> Mask {
    match rng.below(10) {
        0 => Mask::from_fn(N, N, |_, _| false),
        1 => {
            let bits: Vec<bool> = (0..N * N).map(|_| rng.bernoulli(0.1)).collect();
            Mask::new(N, N, bits).unwrap()
        }
        _ => {
            let shapes: Vec<(f64, f64, f64, bool)> = (0..1 + rng.below(3))
                .map(|_| {
                    (
                        rng.uniform_range(0.0, N as f64),
                        rng.uniform_range(0.0, N as f64),
                        rng.uniform_range(1.0, 9.0),
                        rng.bernoulli(0.5),
                    )
                })
                .collect();
            Mask::from_fn(N, N, |y, x| {
                shapes.iter().any(|&(cy, cx, r, disk)| {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    if disk {
                        dy * dy + dx * dx <= r * r
                    } else {
                        dy.abs() <= r && dx.abs() <= r * 0.6
                    }
                })
            })
        }
    }
}

fn brute_counts(a: &Mask, b: &Mask) -> (f64, f64, f64) {
    let (mut i, mut na, mut nb) = (0.0, 0.0, 0.0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            i += f64::from(u8::from(p && q));
            na += f64::from(u8::from(p));
            nb += f64::from(u8::from(q));
        }
    }
    (i, na, nb)
}

/// Set pixels with any 8-neighbour unset or outside the image.
fn brute_boundary(m: &Mask) -> Vec<(f64, f64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(y as usize, x as usize) {
                continue;
            }
            let edge = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (ny, nx) = (y + dy, x + dx);
                    ny < 0 || nx < 0 || ny >= h || nx >= w || !m.get(ny as usize, nx as usize)
                })
            });
            if edge {
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

fn brute_hausdorff(a: &Mask, b: &Mask, q: f64, s: Spacing) -> f64 {
    let (ea, eb) = (a.count() == 0, b.count() == 0);
    if ea && eb {
        return 0.0;
    }
    if ea || eb {
        return ((a.height() as f64 * s.row).powi(2) + (a.width() as f64 * s.col).powi(2)).sqrt();
    }
    let (pa, pb) = (brute_boundary(a), brute_boundary(b));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|t| (((p.0 - t.0) * s.row).powi(2) + ((p.1 - t.1) * s.col).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut d = directed(&pa, &pb);
    d.extend(directed(&pb, &pa));
    d.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (d.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (rank - lo as f64)
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut rng = DetRng::new(2024, Domain::Test, &[]);
    for case in 0..200 {
        let (a, b) = (random_mask(&mut rng), random_mask(&mut rng));
        let (i, na, nb) = brute_counts(&a, &b);
        let want_dsc = if na + nb == 0.0 { 1.0 } else { 2.0 * i / (na + nb) };
        let union = na + nb - i;
        let want_iou = if union == 0.0 { 1.0 } else { i / union };
        assert!((dsc(&a, &b).unwrap() - want_dsc).abs() <= 1e-9, "case {case}");
        assert!((iou(&a, &b).unwrap() - want_iou).abs() <= 1e-9, "case {case}");
        let spacing = if case % 3 == 0 {
            Spacing { row: 0.7, col: 1.3 }
        } else {
            Spacing::default()
        };
        for q in [95.0, 100.0] {
            let got = hausdorff(&a, &b, q, spacing).unwrap();
            let want = brute_hausdorff(&a, &b, q, spacing);
            assert!((got - want).abs() <= 1e-9, "case {case} q {q}: {got} vs {want}");
        }
        let (h95, h100) = (
            hausdorff(&a, &b, 95.0, spacing).unwrap(),
            hausdorff(&a, &b, 100.0, spacing).unwrap(),
        );
        assert!(h95 <= h100);
        assert_eq!(h100, hausdorff(&b, &a, 100.0, spacing).unwrap());
    }
}

#[test]
fn three_four_five() {
    let a = Mask::from_fn(8, 8, |y, x| (y, x) == (0, 0));
    let b = Mask::from_fn(8, 8, |y, x| (y, x) == (3, 4));
    assert_eq!(hausdorff(&a, &b, 100.0, Spacing::default()).unwrap(), 5.0);
    assert_eq!(hausdorff(&a, &b, 95.0, Spacing::default()).unwrap(), 5.0);
}

#[test]
fn evaluate_hand_fixture() {
    // class 1: gt rows 0-1 x cols 0-3, prediction rows 0-1 x cols 0-1
    // class 2: identical 4x4 squares in the lower right
    let gt = LabelMap::new(&[8, 8], (0..64).map(|i| {
        let (y, x) = (i / 8, i % 8);
        if y < 2 && x < 4 { 1 } else if y >= 4 && x >= 4 { 2 } else { 0 }
    }).collect()).unwrap();
    let pred = LabelMap::new(&[8, 8], (0..64).map(|i| {
        let (y, x) = (i / 8, i % 8);
        if y < 2 && x < 2 { 1 } else if y >= 4 && x >= 4 { 2 } else { 0 }
    }).collect()).unwrap();
    let r = evaluate(&pred, &gt, 3, None, HdVariant::Hd100).unwrap();
    // |P| = 4, |G| = 8, overlap 4; boundary distances 0 x8, 1 x2, 2 x2
    assert!((r.per_class_dsc[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.per_class_iou[0] - 0.5).abs() < 1e-15);
    assert_eq!(r.per_class_hd[0], 2.0);
    assert_eq!((r.per_class_dsc[1], r.per_class_iou[1], r.per_class_hd[1]), (1.0, 1.0, 0.0));
    assert!((r.mean_dsc - 5.0 / 6.0).abs() < 1e-15);
    assert!((r.mean_iou - 0.75).abs() < 1e-15);
    assert_eq!(r.mean_hd, 1.0);
    assert!(r.absent_classes.is_empty());
    assert!(r.to_csv().starts_with("case,class,dsc,iou,hd100,absent\n"));
}

#[test]
fn absent_class_is_flagged_and_perfect() {
    let gt = LabelMap::new(&[1, 4, 4], vec![1; 16]).unwrap();
    let r = evaluate(&gt, &gt, 4, None, HdVariant::Hd95).unwrap();
    assert_eq!(r.absent_classes, vec![2, 3]);
    assert_eq!((r.mean_dsc, r.mean_hd), (1.0, 0.0));
}

#[test]
fn means_invariant_under_consistent_relabeling() {
    let mut rng = DetRng::new(5, Domain::Test, &[]);
    let k = 5;
    let gt = LabelMap::new(&[2, 16, 16], (0..512).map(|_| rng.below(k)).collect()).unwrap();
    let pred = LabelMap::new(&[2, 16, 16], gt.data().iter().map(|&l| if rng.bernoulli(0.2) { rng.below(k) } else { l }).collect()).unwrap();
    let base = evaluate(&pred, &gt, k, None, HdVariant::Hd95).unwrap();
    let perm = [0, 3, 1, 4, 2];
    let relabel = |m: &LabelMap| LabelMap::new(m.shape(), m.data().iter().map(|&l| perm[l]).collect()).unwrap();
    let r = evaluate(&relabel(&pred), &relabel(&gt), k, None, HdVariant::Hd95).unwrap();
    assert!((r.mean_dsc - base.mean_dsc).abs() < 1e-12);
    assert!((r.mean_iou - base.mean_iou).abs() < 1e-12);
    assert!((r.mean_hd - base.mean_hd).abs() < 1e-12);
}

fn arb_mask() -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), 12 * 12).prop_map(|b| Mask::new(12, 12, b).unwrap())
}

proptest! {
    #[test]
    fn dsc_iou_identity_and_symmetry(a in arb_mask(), b in arb_mask()) {
        let (d, j) = (dsc(&a, &b).unwrap(), iou(&a, &b).unwrap());
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        prop_assert!(j <= d + 1e-15);
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert_eq!(j, iou(&b, &a).unwrap());
    }

    #[test]
    fn hausdorff_translation_covariant(dy in 0usize..4, dx in 0usize..4, seed in any::<u64>()) {
        let mut rng = DetRng::new(seed, Domain::Test, &[]);
        let pts: Vec<(usize, usize)> = (0..6).map(|_| (rng.below(8), rng.below(8))).collect();
        let other: Vec<(usize, usize)> = (0..6).map(|_| (rng.below(8), rng.below(8))).collect();
        // Interior placement keeps the image border out of the boundary rule.
        let at = |set: &[(usize, usize)], oy: usize, ox: usize| {
            Mask::from_fn(20, 20, |y, x| set.iter().any(|&(py, px)| (py + 4 + oy, px + 4 + ox) == (y, x)))
        };
        let s = Spacing::default();
        let h0 = hausdorff(&at(&pts, 0, 0), &at(&other, 0, 0), 95.0, s).unwrap();
        let h1 = hausdorff(&at(&pts, dy, dx), &at(&other, dy, dx), 95.0, s).unwrap();
        prop_assert!((h0 - h1).abs() < 1e-12);
    }
}
