//! Segmentation losses: cross-entropy, soft Dice, Lovász-Softmax, pixel-level
//! online hard example mining (OHEM), their hybrid, and the deep-supervision
//! sum over output heads.
//!
//! Every loss is recorded on a [`Graph`] so it can be differentiated. Index
//! selections (the Lovász sort order, the OHEM hard set) are computed from
//! forward values and held constant during the backward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, LabelMap, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;
/// Tolerance on per-pixel channel sums accepted as a probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Which classes the Lovász-Softmax average runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LovaszClasses {
    /// Every class, including ones absent from the batch.
    #[default]
    All,
    /// Only classes present in the labels.
    Present,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the region term; the pixel term gets `1 - hybrid_weight`.
    pub hybrid_weight: f64,
    pub ohem_threshold: f64,
    pub ohem_min_kept_fraction: f64,
    pub use_lovasz: bool,
    pub use_ohem: bool,
    pub use_dice: bool,
    pub use_ce: bool,
    pub lovasz_classes: LovaszClasses,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::lovasz_ohem()
    }
}

impl LossConfig {
    pub fn lovasz_ohem() -> Self {
        Self {
            hybrid_weight: 0.5,
            ohem_threshold: 0.7,
            ohem_min_kept_fraction: 1.0 / 16.0,
            use_lovasz: true,
            use_ohem: true,
            use_dice: false,
            use_ce: false,
            lovasz_classes: LovaszClasses::All,
        }
    }

    /// The cross-entropy + Dice baseline, mixed half and half.
    pub fn ce_dice() -> Self {
        Self {
            use_lovasz: false,
            use_ohem: false,
            use_dice: true,
            use_ce: true,
            ..Self::lovasz_ohem()
        }
    }

    /// Parses a `+`-separated list of `ce`, `dice`, `lovasz`, `ohem`.
    pub fn with_terms(mut self, spec: &str) -> Result<Self> {
        self.use_ce = false;
        self.use_dice = false;
        self.use_lovasz = false;
        self.use_ohem = false;
        for term in spec.split('+').map(str::trim) {
            match term.to_ascii_lowercase().as_str() {
                "ce" => self.use_ce = true,
                "dice" => self.use_dice = true,
                "lovasz" => self.use_lovasz = true,
                "ohem" => self.use_ohem = true,
                other => {
                    return Err(Error::invalid(
                        "loss_config",
                        format!("unknown loss term {other:?}"),
                    ))
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// `+`-joined names of the enabled terms.
    pub fn terms(&self) -> String {
        let names = [
            (self.use_ce, "ce"),
            (self.use_dice, "dice"),
            (self.use_lovasz, "lovasz"),
            (self.use_ohem, "ohem"),
        ];
        names
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("loss_config", d));
        if !(self.use_ce || self.use_dice || self.use_lovasz || self.use_ohem) {
            return bad("at least one loss term must be enabled".into());
        }
        if !(0.0..=1.0).contains(&self.hybrid_weight) {
            return bad(format!("hybrid_weight {} not in [0, 1]", self.hybrid_weight));
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold < 1.0) {
            return bad(format!("ohem_threshold {} not in (0, 1)", self.ohem_threshold));
        }
        if !(self.ohem_min_kept_fraction > 0.0 && self.ohem_min_kept_fraction <= 1.0) {
            return bad(format!(
                "ohem_min_kept_fraction {} not in (0, 1]",
                self.ohem_min_kept_fraction
            ));
        }
        Ok(())
    }

    fn has_region(&self) -> bool {
        self.use_lovasz || self.use_dice
    }
}

/// Loss values of one or more heads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_head: Vec<f64>,
    /// Enabled components summed over heads: `ce`, `dice`, `lovasz`,
    /// `ohem_org`, `ohem_re`.
    pub components: BTreeMap<String, f64>,
}

pub const COMPONENTS: [&str; 5] = ["ce", "dice", "lovasz", "ohem_org", "ohem_re"];

fn check_labels(op: &'static str, shape: &[usize], labels: &LabelMap) -> Result<()> {
    if shape.len() != 4 || labels.shape() != [shape[0], shape[2], shape[3]] {
        return Err(Error::shape(
            op,
            format!("labels {:?} for predictions {shape:?}", labels.shape()),
        ));
    }
    labels.check_range(shape[1])
}

/// Mean over all pixels of `-ln max(p_true, 1e-12)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &LabelMap) -> Result<Var> {
    check_labels("cross_entropy", g.shape(logits), labels)?;
    let ce = g.pixel_cross_entropy(logits, labels.data())?;
    g.mean(ce)
}

/// Class-major one-hot constant `[C, B*H*W]` with pixel order `(b, h, w)`.
fn one_hot_class_major(labels: &LabelMap, classes: usize) -> Tensor {
    let m = labels.len();
    let mut data = vec![0.0; classes * m];
    for (i, &l) in labels.data().iter().enumerate() {
        data[l * m + i] = 1.0;
    }
    Tensor::new(&[classes, m], data).expect("consistent shape")
}

/// `[B, C, H, W]` -> `[C, B*H*W]`.
fn class_major(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[1, 0, 2, 3])?;
    g.reshape(t, &[s[1], s[0] * s[2] * s[3]])
}

/// `1 - mean_c (2 sum p y + eps) / (sum p + sum y + eps)`.
pub fn dice_loss(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    check_labels("dice_loss", &shape, labels)?;
    let classes = shape[1];
    let onehot = one_hot_class_major(labels, classes);
    let y_sum: Vec<f64> = onehot
        .data()
        .chunks(labels.len())
        .map(|row| row.iter().sum::<f64>() + DICE_EPS)
        .collect();
    let p = class_major(g, probs)?;
    let y = g.constant(onehot);
    let py = g.mul(p, y)?;
    let inter = g.sum_axis(py, 1)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let p_sum = g.sum_axis(p, 1)?;
    let y_sum = g.constant(Tensor::new(&[classes], y_sum)?);
    let den = g.add(p_sum, y_sum)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Descending order of `errors`, ties broken by ascending index.
pub fn descending_order(errors: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    idx
}

/// Gradient of the Lovász extension of the Jaccard loss along a sorted
/// foreground indicator: `g_k = J(first k) - J(first k - 1)`, where `J(S)` is
/// the Jaccard loss of predicting the set `S`.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász extension of the Jaccard loss for one class, evaluated on plain
/// values: `sum_k e_(k) g_k` over errors sorted in decreasing order.
pub fn lovasz_class_loss(errors: &[f64], fg: &[bool]) -> f64 {
    let order = descending_order(errors);
    let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
    lovasz_grad(&fg_sorted)
        .iter()
        .zip(&order)
        .map(|(g, &i)| g * errors[i])
        .sum()
}

fn check_simplex(probs: &Tensor) -> Result<()> {
    let s = probs.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let x = probs.data();
    for bi in 0..b {
        for p in 0..plane {
            let sum: f64 = (0..c).map(|ci| x[(bi * c + ci) * plane + p]).sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(
                    "lovasz_softmax",
                    format!("channel sum {sum} at pixel {} is not 1", bi * plane + p),
                ));
            }
        }
    }
    Ok(())
}

/// Lovász-Softmax over all pixels of the batch. Per class, pixel errors are
/// `1 - p` on foreground and `p` elsewhere; the class loss is the Lovász
/// extension of the Jaccard loss at that error vector.
pub fn lovasz_softmax(
    g: &mut Graph,
    probs: Var,
    labels: &LabelMap,
    classes_mode: LovaszClasses,
) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    check_labels("lovasz_softmax", &shape, labels)?;
    check_simplex(g.value(probs))?;
    let classes = shape[1];
    let m = labels.len();
    let p = class_major(g, probs)?;
    let present = labels.histogram(classes);
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        if classes_mode == LovaszClasses::Present && present[c] == 0 {
            continue;
        }
        let fg: Vec<bool> = labels.data().iter().map(|&l| l == c).collect();
        let pc = g.slice(p, 0, c, 1)?;
        let pc = g.reshape(pc, &[m])?;
        // e = p (1 - 2 fg) + fg
        let sign = Tensor::from_fn(&[m], |i| if fg[i] { -1.0 } else { 1.0 });
        let sign = g.constant(sign);
        let e = g.mul(pc, sign)?;
        let fg_t = g.constant(Tensor::from_fn(&[m], |i| f64::from(u8::from(fg[i]))));
        let e = g.add(e, fg_t)?;
        let order = descending_order(g.data(e));
        let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let weights = g.constant(Tensor::new(&[m], lovasz_grad(&fg_sorted))?);
        let sorted = g.gather(e, &order)?;
        let weighted = g.mul(sorted, weights)?;
        per_class.push(g.sum(weighted)?);
    }
    if per_class.is_empty() {
        return Err(Error::invalid("lovasz_softmax", "no classes to average"));
    }
    let n = per_class.len() as f64;
    let stacked = g.concat(&per_class, 0)?;
    let total = g.sum(stacked)?;
    g.scale(total, 1.0 / n)
}

/// The two OHEM terms: mean CE over all pixels and mean CE over hard pixels.
#[derive(Debug, Clone)]
pub struct OhemTerms {
    pub org: Var,
    pub re: Var,
    pub hard: Vec<usize>,
}

/// Indices of hard pixels: true-class probability below `threshold`,
/// enlarged to at least `ceil(min_kept_fraction * M)` by taking the lowest
/// confidences (ties by pixel index). Returned in ascending pixel order.
pub fn select_hard(p_true: &[f64], threshold: f64, min_kept_fraction: f64) -> Vec<usize> {
    let m = p_true.len();
    let min_kept = ((min_kept_fraction * m as f64).ceil() as usize).clamp(1, m);
    let hard: Vec<usize> = (0..m).filter(|&i| p_true[i] < threshold).collect();
    if hard.len() >= min_kept {
        return hard;
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p_true[a].total_cmp(&p_true[b]).then(a.cmp(&b)));
    idx.truncate(min_kept);
    idx.sort_unstable();
    idx
}

fn true_class_probs(logits: &Tensor, labels: &LabelMap) -> Vec<f64> {
    let s = logits.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let x = logits.data();
    labels
        .data()
        .iter()
        .enumerate()
        .map(|(pix, &l)| {
            let (b, p) = (pix / plane, pix % plane);
            let at = |ci: usize| x[(b * c + ci) * plane + p];
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..c).map(|ci| (at(ci) - max).exp()).sum();
            (at(l) - max).exp() / total
        })
        .collect()
}

/// OHEM terms for NCHW logits; the loss itself is `org + re`.
pub fn ohem_terms(
    g: &mut Graph,
    logits: Var,
    labels: &LabelMap,
    threshold: f64,
    min_kept_fraction: f64,
) -> Result<OhemTerms> {
    check_labels("ohem_loss", g.shape(logits), labels)?;
    if labels.is_empty() {
        return Err(Error::invalid("ohem_loss", "empty batch"));
    }
    let p_true = true_class_probs(g.value(logits), labels);
    let hard = select_hard(&p_true, threshold, min_kept_fraction);
    let ce = g.pixel_cross_entropy(logits, labels.data())?;
    let org = g.mean(ce)?;
    let picked = g.gather(ce, &hard)?;
    let re = g.mean(picked)?;
    Ok(OhemTerms { org, re, hard })
}

pub fn ohem_loss(
    g: &mut Graph,
    logits: Var,
    labels: &LabelMap,
    threshold: f64,
    min_kept_fraction: f64,
) -> Result<Var> {
    let t = ohem_terms(g, logits, labels, threshold, min_kept_fraction)?;
    g.add(t.org, t.re)
}

/// Loss of one head together with its enabled components.
#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub total: Var,
    pub components: Vec<(&'static str, Var)>,
}

/// `w * region + (1 - w) * pixel`, where region sums the enabled Lovász and
/// Dice terms and pixel sums the enabled OHEM and CE terms. With only one
/// side enabled, that side is the loss.
pub fn hybrid_loss(g: &mut Graph, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<HeadLoss> {
    cfg.validate()?;
    check_labels("hybrid_loss", g.shape(logits), labels)?;
    let mut components = Vec::new();
    let mut region = Vec::new();
    let mut pixel = Vec::new();
    if cfg.has_region() {
        let probs = g.softmax_channel(logits)?;
        if cfg.use_lovasz {
            let l = lovasz_softmax(g, probs, labels, cfg.lovasz_classes)?;
            components.push(("lovasz", l));
            region.push(l);
        }
        if cfg.use_dice {
            let d = dice_loss(g, probs, labels)?;
            components.push(("dice", d));
            region.push(d);
        }
    }
    if cfg.use_ce {
        let ce = cross_entropy(g, logits, labels)?;
        components.push(("ce", ce));
        pixel.push(ce);
    }
    if cfg.use_ohem {
        let t = ohem_terms(g, logits, labels, cfg.ohem_threshold, cfg.ohem_min_kept_fraction)?;
        components.push(("ohem_org", t.org));
        components.push(("ohem_re", t.re));
        pixel.push(t.org);
        pixel.push(t.re);
    }
    let region = sum_all(g, &region)?;
    let pixel = sum_all(g, &pixel)?;
    let total = match (region, pixel) {
        (Some(r), Some(p)) => {
            let r = g.scale(r, cfg.hybrid_weight)?;
            let p = g.scale(p, 1.0 - cfg.hybrid_weight)?;
            g.add(r, p)?
        }
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => unreachable!("validated config enables a term"),
    };
    Ok(HeadLoss { total, components })
}

fn sum_all(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// Unweighted sum of the hybrid loss of every head against the same
/// full-resolution labels.
pub fn deep_supervision_loss(
    g: &mut Graph,
    head_logits: &[Var],
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    if head_logits.is_empty() {
        return Err(Error::invalid("deep_supervision_loss", "no heads"));
    }
    let mut totals = Vec::with_capacity(head_logits.len());
    let mut components: BTreeMap<String, f64> = BTreeMap::new();
    for &h in head_logits {
        let hl = hybrid_loss(g, h, labels, cfg)?;
        for (name, v) in &hl.components {
            *components.entry((*name).to_string()).or_insert(0.0) += g.value(*v).item();
        }
        totals.push(hl.total);
    }
    let total = sum_all(g, &totals)?.expect("non-empty");
    let report = LossReport {
        total: g.value(total).item(),
        per_head: totals.iter().map(|&v| g.value(v).item()).collect(),
        components,
    };
    Ok((total, report))
}
