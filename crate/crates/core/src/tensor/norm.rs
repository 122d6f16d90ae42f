//! Softmax, normalization layers and the fused per-pixel cross-entropy.

use super::graph::{Graph, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax_backward(out: &Tensor, axis: usize, g: &[f64]) -> Vec<f64> {
    let (outer, n, inner) = around(out.shape(), axis);
    let y = out.data();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n).map(|c| g[base + c * inner] * y[base + c * inner]).sum();
            for c in 0..n {
                let k = base + c * inner;
                dx[k] = y[k] * (g[k] - dot);
            }
        }
    }
    dx
}

/// Per-channel statistics of one batch-norm call in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the estimate folded into running statistics.
    pub var: Vec<f64>,
}

pub(crate) fn batch_norm_backward(
    graph: &Graph,
    (x, gamma, beta): (Var, Var, Var),
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let shape = graph.shape(x);
    let (batch, ch) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let n = (batch * plane) as f64;
    let gv = graph.data(gamma);
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * plane;
            for k in off..off + plane {
                dgamma[c] += g[k] * xhat[k];
                dbeta[c] += g[k];
            }
        }
    }
    let mut res = Vec::new();
    if graph.requires_grad(x) {
        let mut dx = vec![0.0; g.len()];
        for c in 0..ch {
            let scale = gv[c] * inv_std[c];
            for b in 0..batch {
                let off = (b * ch + c) * plane;
                for k in off..off + plane {
                    dx[k] = if batch_stats {
                        scale / n * (n * g[k] - dbeta[c] - xhat[k] * dgamma[c])
                    } else {
                        scale * g[k]
                    };
                }
            }
        }
        res.push((x, dx));
    }
    res.push((gamma, dgamma));
    res.push((beta, dbeta));
    res
}

pub(crate) fn layer_norm_backward(
    graph: &Graph,
    (x, gamma, beta): (Var, Var, Var),
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let shape = graph.shape(x);
    let d = *shape.last().expect("rank checked in forward");
    let rows = g.len() / d;
    let gv = graph.data(gamma);
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = vec![0.0; g.len()];
    let nf = d as f64;
    for r in 0..rows {
        let row = r * d..(r + 1) * d;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for (c, k) in row.clone().enumerate() {
            dgamma[c] += g[k] * xhat[k];
            dbeta[c] += g[k];
            let dxh = g[k] * gv[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[k];
        }
        for (c, k) in row.enumerate() {
            let dxh = g[k] * gv[c];
            dx[k] = inv_std[r] / nf * (nf * dxh - sum_dxhat - xhat[k] * sum_dxhat_xhat);
        }
    }
    let mut res = Vec::new();
    if graph.requires_grad(x) {
        res.push((x, dx));
    }
    res.push((gamma, dgamma));
    res.push((beta, dbeta));
    res
}

pub(crate) fn pixel_ce_backward(
    logit_shape: &[usize],
    probs: &[f64],
    labels: &[usize],
    clamped: &[bool],
    g: &[f64],
) -> Vec<f64> {
    let (batch, ch) = (logit_shape[0], logit_shape[1]);
    let plane: usize = logit_shape[2..].iter().product();
    let mut dx = vec![0.0; probs.len()];
    for b in 0..batch {
        for p in 0..plane {
            let pix = b * plane + p;
            if clamped[pix] {
                continue;
            }
            for c in 0..ch {
                let k = (b * ch + c) * plane + p;
                let onehot = if labels[pix] == c { 1.0 } else { 0.0 };
                dx[k] = g[pix] * (probs[k] - onehot);
            }
        }
    }
    dx
}

impl Graph {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, n, inner) = around(&shape, axis);
        let xv = self.data(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|c| xv[base + c * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for c in 0..n {
                    let e = (xv[base + c * inner] - max).exp();
                    out[base + c * inner] = e;
                    total += e;
                }
                for c in 0..n {
                    out[base + c * inner] /= total;
                }
            }
        }
        self.push(&shape, out, Op::Softmax { x, axis })
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::shape(
                "softmax_channel",
                format!("expected NCHW, got {:?}", self.shape(x)),
            ));
        }
        self.softmax(x, 1)
    }

    /// Batch normalization over axis 1 of an `[N, C, ...]` tensor.
    ///
    /// With `running == None` the batch statistics are used and returned;
    /// otherwise the given `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("rank {} < 2", shape.len())));
        }
        let (batch, ch) = (shape[0], shape[1]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params must be [{ch}] for input {shape:?}"),
            ));
        }
        let plane: usize = shape[2..].iter().product();
        let xv = self.data(x);
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let n = (batch * plane) as f64;
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * plane;
                        mean[c] += xv[off..off + plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * plane;
                        var[c] += xv[off..off + plane]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| if n > 1.0 { v / (n - 1.0) } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= n);
                (
                    mean.clone(),
                    var,
                    Some(BatchStats {
                        mean,
                        var: unbiased,
                    }),
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for k in off..off + plane {
                    xhat[k] = (xv[k] - mean[c]) * inv_std[c];
                    out[k] = gv[c] * xhat[k] + bv[c];
                }
            }
        }
        let batch_stats = stats.is_some();
        let v = self.push(
            &shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, stats))
    }

    /// Layer normalization over the last axis with per-feature affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank 0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params must be [{d}] for input {shape:?}"),
            ));
        }
        let xv = self.data(x);
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let k = r * d + c;
                xhat[k] = (xv[k] - mean) * is;
                out[k] = gv[c] * xhat[k] + bv[c];
            }
        }
        self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-pixel cross-entropy `-ln max(softmax(logits)[label], 1e-12)` for NCHW logits.
    /// `labels` is in `(b, h, w)` order; the result has one entry per pixel in that order.
    pub fn pixel_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected NCHW logits, got {shape:?}"),
            ));
        }
        let (batch, ch) = (shape[0], shape[1]);
        let plane = shape[2] * shape[3];
        if labels.len() != batch * plane {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for logits {shape:?}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= ch) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: ch,
            });
        }
        let xv = self.data(logits);
        let mut probs = vec![0.0; xv.len()];
        let mut ce = vec![0.0; batch * plane];
        let mut clamped = vec![false; batch * plane];
        let log_floor = LOG_CLAMP.ln();
        for b in 0..batch {
            for p in 0..plane {
                let at = |c: usize| (b * ch + c) * plane + p;
                let max = (0..ch).map(|c| xv[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..ch).map(|c| (xv[at(c)] - max).exp()).sum();
                for c in 0..ch {
                    probs[at(c)] = (xv[at(c)] - max).exp() / total;
                }
                let pix = b * plane + p;
                let logp = xv[at(labels[pix])] - max - total.ln();
                if logp < log_floor {
                    clamped[pix] = true;
                    ce[pix] = -log_floor;
                } else {
                    ce[pix] = -logp;
                }
            }
        }
        self.push(
            &[batch * plane],
            ce,
            Op::PixelCe {
                logits,
                probs,
                labels: labels.to_vec(),
                clamped,
            },
        )
    }
}
