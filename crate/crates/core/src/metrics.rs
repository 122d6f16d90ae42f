//! Overlap and boundary-distance metrics on 2-D masks.
//!
//! Hausdorff distances are measured between boundary pixels (mask pixels with
//! at least one 8-neighbour outside the mask; the image border counts as
//! outside) using exact Euclidean distance transforms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} with {} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    /// Pixels of `labels` (an `[H, W]` slice) equal to `class`.
    pub fn of_class(labels: &[usize], height: usize, width: usize, class: usize) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Mask pixels with an 8-neighbour outside the mask or the image.
    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.height as isize, self.width as isize);
        Mask::from_fn(self.height, self.width, |y, x| {
            if !self.get(y, x) {
                return false;
            }
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        return true;
                    }
                    if !self.get(ny as usize, nx as usize) {
                        return true;
                    }
                }
            }
            false
        })
    }

    /// `(row, col)` of every set pixel.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len())
            .filter(|&i| self.data[i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

fn same_shape(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    (inter, a.count(), b.count())
}

/// `2 |P & G| / (|P| + |G|)`; both empty gives 1.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape("dsc", pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P & G| / |P | G|`; both empty gives 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape("iou", pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Pixel spacing `(row, col)` in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self { row: 1.0, col: 1.0 }
    }
}

/// 1-D squared distance transform (lower envelope of parabolas) of `f`
/// with sample spacing `s`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    // Skip leading infinite samples; they never form part of the envelope.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let pos = |q: usize| q as f64 * s;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let sep = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if sep <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = sep;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
pub fn squared_distance_transform(mask: &Mask, spacing: Spacing) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut grid: Vec<f64> = mask
        .data
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, spacing.row, &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, spacing.col, &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
fn directed_distances(from: &Mask, to: &Mask, spacing: Spacing) -> Vec<f64> {
    let dt = squared_distance_transform(to, spacing);
    from.data
        .iter()
        .zip(&dt)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Diagonal length of the image in physical units.
pub fn image_diagonal(height: usize, width: usize, spacing: Spacing) -> f64 {
    (height as f64 * spacing.row).hypot(width as f64 * spacing.col)
}

/// Percentile of the pooled directed boundary distances in both directions;
/// `percentile = 100` is the classic Hausdorff distance. One empty mask gives
/// the image diagonal, two empty masks give 0.
pub fn hausdorff(pred: &Mask, gt: &Mask, percentile_q: f64, spacing: Spacing) -> Result<f64> {
    same_shape("hausdorff", pred, gt)?;
    if !(percentile_q > 0.0 && percentile_q <= 100.0) {
        return Err(Error::invalid(
            "hausdorff",
            format!("percentile {percentile_q} not in (0, 100]"),
        ));
    }
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok(image_diagonal(pred.height, pred.width, spacing))
        }
        _ => {}
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let mut d = directed_distances(&bp, &bg, spacing);
    d.extend(directed_distances(&bg, &bp, spacing));
    Ok(percentile(&d, percentile_q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HdVariant {
    #[default]
    Hd95,
    Hd100,
}

impl HdVariant {
    pub fn percentile(self) -> f64 {
        match self {
            HdVariant::Hd95 => 95.0,
            HdVariant::Hd100 => 100.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HdVariant::Hd95 => "hd95",
            HdVariant::Hd100 => "hd100",
        }
    }
}

impl std::str::FromStr for HdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hd95" => Ok(HdVariant::Hd95),
            "hd100" | "hd" => Ok(HdVariant::Hd100),
            other => Err(Error::invalid("hd_variant", format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub case: usize,
    pub class: usize,
    pub dsc: f64,
    pub iou: f64,
    pub hd: f64,
    /// Class absent from both prediction and ground truth.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_classes: usize,
    pub hd_variant: HdVariant,
    /// Foreground classes `1..num_classes`, each averaged over cases.
    pub per_class_dsc: Vec<f64>,
    pub per_class_hd: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_hd: f64,
    pub mean_iou: f64,
    /// Foreground classes absent from prediction and ground truth in every case.
    pub absent_classes: Vec<usize>,
    pub rows: Vec<ClassMetrics>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-case, per-foreground-class metrics for `[B, H, W]` (or `[H, W]`) label
/// maps. Background (class 0) is excluded from the means.
pub fn evaluate(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    spacing: Option<Spacing>,
    variant: HdVariant,
) -> Result<MetricReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "evaluate",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    if num_classes < 2 {
        return Err(Error::invalid("evaluate", "need at least one foreground class"));
    }
    pred.check_range(num_classes)?;
    gt.check_range(num_classes)?;
    let s = pred.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 => (s[1], s[2]),
        _ => return Err(Error::shape("evaluate", format!("expected [B, H, W], got {s:?}"))),
    };
    let spacing = spacing.unwrap_or_default();
    let plane = h * w;
    let cases = pred.len() / plane;
    let mut rows = Vec::with_capacity(cases * (num_classes - 1));
    for case in 0..cases {
        let p = &pred.data()[case * plane..][..plane];
        let g = &gt.data()[case * plane..][..plane];
        for class in 1..num_classes {
            let pm = Mask::of_class(p, h, w, class)?;
            let gm = Mask::of_class(g, h, w, class)?;
            rows.push(ClassMetrics {
                case,
                class,
                dsc: dsc(&pm, &gm)?,
                iou: iou(&pm, &gm)?,
                hd: hausdorff(&pm, &gm, variant.percentile(), spacing)?,
                absent: pm.is_empty() && gm.is_empty(),
            });
        }
    }
    let fg = num_classes - 1;
    let per_class = |f: fn(&ClassMetrics) -> f64| -> Vec<f64> {
        (0..fg)
            .map(|c| mean(&rows.iter().skip(c).step_by(fg).map(f).collect::<Vec<_>>()))
            .collect()
    };
    let per_class_dsc = per_class(|r| r.dsc);
    let per_class_iou = per_class(|r| r.iou);
    let per_class_hd = per_class(|r| r.hd);
    let absent_classes = (1..num_classes)
        .filter(|&c| rows.iter().filter(|r| r.class == c).all(|r| r.absent))
        .collect();
    Ok(MetricReport {
        num_classes,
        hd_variant: variant,
        mean_dsc: mean(&per_class_dsc),
        mean_hd: mean(&per_class_hd),
        mean_iou: mean(&per_class_iou),
        per_class_dsc,
        per_class_hd,
        per_class_iou,
        absent_classes,
        rows,
    })
}

impl MetricReport {
    /// One row per case per class.
    pub fn to_csv(&self) -> String {
        let mut out = format!("case,class,dsc,iou,{},absent\n", self.hd_variant.label());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.case, r.class, r.dsc, r.iou, r.hd, r.absent
            );
        }
        out
    }

    /// Summary without the per-row table.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_classes": self.num_classes,
            "hd_variant": self.hd_variant.label(),
            "mean_dsc": self.mean_dsc,
            "mean_iou": self.mean_iou,
            "mean_hd": self.mean_hd,
            "per_class_dsc": self.per_class_dsc,
            "per_class_iou": self.per_class_iou,
            "per_class_hd": self.per_class_hd,
            "absent_classes": self.absent_classes,
            "cases": self.rows.iter().map(|r| r.case).max().map_or(0, |c| c + 1),
        })
    }
}
