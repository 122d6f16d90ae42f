//! Synthetic segmentation data, augmentation, splitting and file I/O.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::{DetRng, Domain};
use crate::tensor::{LabelMap, Tensor};

pub use io::{load_dataset, load_sample, save_image, save_mask, write_dataset, Manifest};

/// An image `[C, H, W]` with values in `[0, 1]` and its `[H, W]` class map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub label: LabelMap,
    pub id: String,
}

impl SegSample {
    pub fn new(image: Tensor, label: LabelMap, id: impl Into<String>) -> Result<Self> {
        let (is, ls) = (image.shape(), label.shape());
        if is.len() != 3 || ls.len() != 2 || is[1..] != *ls {
            return Err(Error::shape(
                "seg_sample",
                format!("image {is:?} does not pair with label {ls:?}"),
            ));
        }
        Ok(Self {
            image,
            label,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.label.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.label.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Stacks samples into an `[N, C, H, W]` batch and `[N, H, W]` labels.
pub fn collate(samples: &[&SegSample]) -> Result<(Tensor, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("collate", "empty batch"))?;
    let mut data = Vec::with_capacity(first.image.numel() * samples.len());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::shape(
                "collate",
                format!("{:?} vs {:?}", s.image.shape(), first.image.shape()),
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.label).collect();
    Ok((Tensor::new(&shape, data)?, LabelMap::stack(&labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    #[default]
    Ellipses,
    Polygons,
    /// Each class sits inside the previous one, down to a small innermost structure.
    Nested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub size: (usize, usize),
    pub num_classes: usize,
    pub shape_family: ShapeFamily,
    pub noise_sigma: f64,
    pub seed: u64,
    pub channels: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_samples: 100,
            size: (64, 64),
            num_classes: 4,
            shape_family: ShapeFamily::Ellipses,
            noise_sigma: 0.05,
            seed: 0,
            channels: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        let bad = |d: String| Err(Error::invalid("dataset_spec", d));
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return bad(format!("size {h}x{w} must be a positive multiple of 16"));
        }
        if !(2..=256).contains(&self.num_classes) {
            return bad(format!("num_classes {} not in 2..=256", self.num_classes));
        }
        if self.num_samples == 0 || self.channels == 0 {
            return bad("num_samples and channels must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        Ok(())
    }

    /// Image intensity of `class`, evenly spaced in `[0.1, 0.9]`.
    pub fn class_intensity(&self, class: usize) -> f64 {
        0.1 + 0.8 * class as f64 / (self.num_classes - 1) as f64
    }
}

/// A filled region described by an inside test.
enum Region {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Region {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Region::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Region::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let ((yi, xi), (yj, xj)) = (pts[i], pts[j]);
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn random_ellipse(rng: &mut DetRng, cy: f64, cx: f64, r_lo: f64, r_hi: f64) -> Region {
    Region::Ellipse {
        cy,
        cx,
        ry: rng.uniform_range(r_lo, r_hi),
        rx: rng.uniform_range(r_lo, r_hi),
        angle: rng.uniform_range(0.0, std::f64::consts::PI),
    }
}

/// Star-shaped polygon with 3 to 7 vertices at jittered radii.
fn random_polygon(rng: &mut DetRng, cy: f64, cx: f64, r_lo: f64, r_hi: f64) -> Region {
    let n = 3 + rng.below(5);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let pts = (0..n)
        .map(|k| {
            let a = phase + std::f64::consts::TAU * k as f64 / n as f64;
            let r = rng.uniform_range(r_lo, r_hi);
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    Region::Polygon(pts)
}

fn sample_regions(spec: &DatasetSpec, rng: &mut DetRng) -> Vec<(usize, Region)> {
    let (h, w) = (spec.size.0 as f64, spec.size.1 as f64);
    let side = h.min(w);
    let fg = spec.num_classes - 1;
    let mut out = Vec::with_capacity(fg);
    match spec.shape_family {
        ShapeFamily::Ellipses | ShapeFamily::Polygons => {
            // Larger structures first so that later (smaller) ones stay visible.
            for k in 0..fg {
                let shrink = 1.0 - 0.5 * k as f64 / fg.max(1) as f64;
                let (r_lo, r_hi) = (side * 0.10 * shrink, side * 0.28 * shrink);
                let cy = rng.uniform_range(r_hi, h - r_hi);
                let cx = rng.uniform_range(r_hi, w - r_hi);
                let region = if spec.shape_family == ShapeFamily::Ellipses {
                    random_ellipse(rng, cy, cx, r_lo, r_hi)
                } else {
                    random_polygon(rng, cy, cx, r_lo, r_hi)
                };
                out.push((k + 1, region));
            }
        }
        ShapeFamily::Nested => {
            let mut r = side * rng.uniform_range(0.30, 0.40);
            let mut cy = rng.uniform_range(r + 1.0, h - r - 1.0);
            let mut cx = rng.uniform_range(r + 1.0, w - r - 1.0);
            for k in 0..fg {
                out.push((k + 1, random_ellipse(rng, cy, cx, r * 0.75, r)));
                // The next structure fits inside the inscribed circle of this one.
                let inner = r * 0.75 * 0.6;
                let slack = r * 0.75 - inner;
                cy += rng.uniform_range(-slack, slack) * 0.5;
                cx += rng.uniform_range(-slack, slack) * 0.5;
                r = inner.max(2.0);
            }
        }
    }
    out
}

/// One sample; a pure function of `(spec, index)`.
pub fn gen_sample(spec: &DatasetSpec, index: usize) -> Result<SegSample> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = DetRng::new(spec.seed, Domain::Synth, &[index as u64]);
    let regions = sample_regions(spec, &mut rng);
    let mut label = vec![0usize; h * w];
    for (class, region) in &regions {
        for y in 0..h {
            for x in 0..w {
                if region.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    label[y * w + x] = *class;
                }
            }
        }
    }
    let mut image = Vec::with_capacity(spec.channels * h * w);
    for _ in 0..spec.channels {
        for &l in &label {
            let base = spec.class_intensity(l);
            let v = if spec.noise_sigma > 0.0 {
                (base + spec.noise_sigma * rng.normal()).clamp(0.0, 1.0)
            } else {
                base
            };
            image.push(v);
        }
    }
    SegSample::new(
        Tensor::new(&[spec.channels, h, w], image)?,
        LabelMap::new(&[h, w], label)?,
        format!("case{index:04}"),
    )
}

pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    (0..spec.num_samples).map(|i| gen_sample(spec, i)).collect()
}

/// Applies `f(y, x) -> (source y, source x)` to every plane of the sample.
fn remap(sample: &SegSample, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> SegSample {
    let (h, w, c) = (sample.height(), sample.width(), sample.channels());
    let mut image = Vec::with_capacity(c * out_h * out_w);
    let mut label = Vec::with_capacity(out_h * out_w);
    let src = sample.image.data();
    for ch in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = f(y, x);
                image.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = f(y, x);
            label.push(sample.label.data()[sy * w + sx]);
        }
    }
    SegSample {
        image: Tensor::new(&[c, out_h, out_w], image).expect("remap preserves size"),
        label: LabelMap::new(&[out_h, out_w], label).expect("remap preserves size"),
        id: sample.id.clone(),
    }
}

pub fn flip_horizontal(s: &SegSample) -> SegSample {
    let w = s.width();
    remap(s, s.height(), w, |y, x| (y, w - 1 - x))
}

pub fn flip_vertical(s: &SegSample) -> SegSample {
    let h = s.height();
    remap(s, h, s.width(), |y, x| (h - 1 - y, x))
}

/// Rotation by 90 degrees counter-clockwise.
pub fn rot90(s: &SegSample) -> SegSample {
    let (h, w) = (s.height(), s.width());
    // Output (y, x) of size w x h takes input (x, w - 1 - y).
    remap(s, w, h, |y, x| (x, w - 1 - y))
}

/// Random horizontal and vertical flips (p = 0.5 each) and a rotation by a
/// random multiple of 90 degrees; non-square samples only rotate by 0 or 180
/// degrees so that their shape is kept.
pub fn augment(sample: &SegSample, seed: u64) -> SegSample {
    augment_with(sample, &mut DetRng::new(seed, Domain::Augment, &[]))
}

pub fn augment_with(sample: &SegSample, rng: &mut DetRng) -> SegSample {
    let hflip = rng.bernoulli(0.5);
    let vflip = rng.bernoulli(0.5);
    let mut quarter = rng.below(4);
    if sample.height() != sample.width() {
        quarter &= !1;
    }
    let mut out = sample.clone();
    if hflip {
        out = flip_horizontal(&out);
    }
    if vflip {
        out = flip_vertical(&out);
    }
    for _ in 0..quarter {
        out = rot90(&out);
    }
    out
}

/// Index partition into train / validation / test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` under `seed` and cuts it into `round(f0 n)` training,
/// `round(f1 n)` validation and the remaining test indices.
pub fn split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "split",
            format!("fractions {fractions:?} must be in [0, 1] and sum to 1"),
        ));
    }
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::invalid(
            "split",
            format!("{n} samples leave an empty partition under {fractions:?}"),
        ));
    }
    let perm = DetRng::new(seed, Domain::Split, &[n as u64]).permutation(n);
    Ok(Split {
        train: perm[..n_train].to_vec(),
        val: perm[n_train..n_train + n_val].to_vec(),
        test: perm[n_train + n_val..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            num_samples: 3,
            size: (32, 48),
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn noiseless_intensities_are_class_constants() {
        for family in [ShapeFamily::Ellipses, ShapeFamily::Polygons, ShapeFamily::Nested] {
            let s = DatasetSpec {
                noise_sigma: 0.0,
                shape_family: family,
                ..spec()
            };
            for sample in gen_synthetic(&s).unwrap() {
                for (v, &l) in sample.image.data().iter().zip(sample.label.data()) {
                    assert_eq!(*v, s.class_intensity(l));
                }
            }
        }
    }

    #[test]
    fn nested_keeps_every_class() {
        let s = DatasetSpec {
            shape_family: ShapeFamily::Nested,
            size: (64, 64),
            num_samples: 10,
            ..DatasetSpec::default()
        };
        for sample in gen_synthetic(&s).unwrap() {
            assert!(sample.label.histogram(4).iter().all(|&n| n > 0), "{}", sample.id);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic(&spec()).unwrap(), gen_synthetic(&spec()).unwrap());
    }

    #[test]
    fn invalid_size() {
        let s = DatasetSpec {
            size: (100, 100),
            ..spec()
        };
        assert!(gen_synthetic(&s).is_err());
    }

    #[test]
    fn rotations_and_flips_cycle() {
        let s = gen_sample(&spec(), 0).unwrap();
        let r = rot90(&rot90(&rot90(&rot90(&s))));
        assert_eq!(r, s);
        assert_eq!(rot90(&s).label.shape(), &[48, 32]);
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        assert_eq!(flip_vertical(&flip_vertical(&s)), s);
    }

    #[test]
    fn rot90_direction() {
        // [[0, 1], [2, 3]] rotated counter-clockwise is [[1, 3], [0, 2]].
        let s = SegSample::new(
            Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            LabelMap::new(&[2, 2], vec![0, 1, 2, 3]).unwrap(),
            "t",
        )
        .unwrap();
        assert_eq!(rot90(&s).label.data(), &[1, 3, 0, 2]);
    }

    #[test]
    fn split_sizes() {
        let s = split(100, (0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split(100, (0.7, 0.1, 0.2), 3).unwrap());
        assert!(split(3, (0.7, 0.1, 0.2), 0).is_err());
        assert!(split(10, (0.5, 0.5, 0.5), 0).is_err());
    }
}
