//! Convolution, non-overlapping transposed convolution and bilinear resampling.
//!
//! All three operate on NCHW tensors. Convolution lowers each (batch, group)
//! slice to a single GEMM over an im2col buffer.

use super::conv_out_extent;
use super::gemm::gemm;
use super::graph::{Graph, Op, Var};
use crate::error::{Error, Result};

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn kdim(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn opix(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], geo: &ConvGeom, col: &mut [f64]) {
    let (h, w) = (geo.h, geo.w);
    let opix = geo.opix();
    for c in 0..geo.cin_g() {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut col[row * opix..(row + 1) * opix];
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.padding as isize;
                    let line = &mut dst[oy * geo.ow..(oy + 1) * geo.ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kj) as isize - geo.padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], geo: &ConvGeom, dx: &mut [f64]) {
    let (h, w) = (geo.h, geo.w);
    let opix = geo.opix();
    for c in 0..geo.cin_g() {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src = &col[row * opix..(row + 1) * opix];
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..geo.ow {
                        let ix = (ox * geo.stride + kj) as isize - geo.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(
    graph: &Graph,
    x: Var,
    w: Var,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let xs = graph.shape(x);
    let ws = graph.shape(w);
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {xs:?} and weight {ws:?} must both be rank 4"),
        ));
    }
    if groups == 0 || !xs[1].is_multiple_of(groups) || !ws[0].is_multiple_of(groups) {
        return Err(Error::invalid(
            "conv2d",
            format!("groups {groups} must divide Cin {} and Cout {}", xs[1], ws[0]),
        ));
    }
    if ws[1] * groups != xs[1] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {ws:?} expects {} input channels, input {xs:?} has {}",
                ws[1] * groups,
                xs[1]
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let oh = conv_out_extent(xs[2], ws[2], stride, padding);
    let ow = conv_out_extent(xs[3], ws[3], stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} larger than padded input {xs:?}", ws[2], ws[3]),
        ));
    };
    Ok(ConvGeom {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        oh,
        ow,
        stride,
        padding,
        groups,
    })
}

pub(crate) fn conv2d_backward(
    graph: &Graph,
    (x, w, b): (Var, Var, Option<Var>),
    (stride, padding, groups): (usize, usize, usize),
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let geo = conv_geometry(graph, x, w, stride, padding, groups).expect("validated in forward");
    let (xv, wv) = (graph.data(x), graph.data(w));
    let (need_x, need_w) = (graph.requires_grad(x), graph.requires_grad(w));
    let (kdim, opix, cin_g, cout_g) = (geo.kdim(), geo.opix(), geo.cin_g(), geo.cout_g());
    let in_plane = geo.h * geo.w;
    let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
    let mut dw = vec![0.0; if need_w { wv.len() } else { 0 }];
    let mut col = vec![0.0; kdim * opix];
    let mut dcol = vec![0.0; kdim * opix];
    for bi in 0..geo.batch {
        for gi in 0..groups {
            let x_off = (bi * geo.cin + gi * cin_g) * in_plane;
            let g_off = (bi * geo.cout + gi * cout_g) * opix;
            let w_off = gi * cout_g * kdim;
            let gslice = &g[g_off..g_off + cout_g * opix];
            if need_w {
                im2col(&xv[x_off..], &geo, &mut col);
                gemm(
                    cout_g,
                    opix,
                    kdim,
                    1.0,
                    gslice,
                    false,
                    &col,
                    true,
                    1.0,
                    &mut dw[w_off..w_off + cout_g * kdim],
                );
            }
            if need_x {
                gemm(
                    kdim,
                    cout_g,
                    opix,
                    1.0,
                    &wv[w_off..],
                    true,
                    gslice,
                    false,
                    0.0,
                    &mut dcol,
                );
                col2im(&dcol, &geo, &mut dx[x_off..x_off + cin_g * in_plane]);
            }
        }
    }
    let mut res = Vec::new();
    if need_x {
        res.push((x, dx));
    }
    if need_w {
        res.push((w, dw));
    }
    if let Some(b) = b {
        if graph.requires_grad(b) {
            let mut db = vec![0.0; geo.cout];
            for bi in 0..geo.batch {
                for (c, acc) in db.iter_mut().enumerate() {
                    let off = (bi * geo.cout + c) * opix;
                    *acc += g[off..off + opix].iter().sum::<f64>();
                }
            }
            res.push((b, db));
        }
    }
    res
}

fn check_transpose(graph: &Graph, x: Var, w: Var, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let xs = graph.shape(x);
    let ws = graph.shape(w);
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input {xs:?} and weight {ws:?} must both be rank 4"),
        ));
    }
    if stride == 0 || ws[2] != stride || ws[3] != stride {
        return Err(Error::invalid(
            "conv_transpose2d",
            format!("kernel {}x{} must equal stride {stride}", ws[2], ws[3]),
        ));
    }
    if ws[0] != xs[1] {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("weight {ws:?} expects {} input channels, got {}", ws[0], xs[1]),
        ));
    }
    Ok((xs[0], xs[1], ws[1], xs[2], xs[3]))
}

pub(crate) fn conv_transpose2d_backward(
    graph: &Graph,
    (x, w, b): (Var, Var, Option<Var>),
    s: usize,
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let (batch, cin, cout, h, wd) = check_transpose(graph, x, w, s).expect("validated in forward");
    let (xv, wv) = (graph.data(x), graph.data(w));
    let (oh, ow) = (h * s, wd * s);
    let hw = h * wd;
    let kdim = cout * s * s;
    let mut gcol = vec![0.0; kdim * hw];
    let mut dx = vec![0.0; if graph.requires_grad(x) { xv.len() } else { 0 }];
    let mut dw = vec![0.0; if graph.requires_grad(w) { wv.len() } else { 0 }];
    for bi in 0..batch {
        // gather the output gradient into [cout*s*s, h*w]
        for co in 0..cout {
            for ki in 0..s {
                for kj in 0..s {
                    let row = (co * s + ki) * s + kj;
                    for i in 0..h {
                        for j in 0..wd {
                            gcol[row * hw + i * wd + j] =
                                g[((bi * cout + co) * oh + i * s + ki) * ow + j * s + kj];
                        }
                    }
                }
            }
        }
        let x_off = bi * cin * hw;
        if !dx.is_empty() {
            gemm(cin, kdim, hw, 1.0, wv, false, &gcol, false, 0.0, &mut dx[x_off..x_off + cin * hw]);
        }
        if !dw.is_empty() {
            gemm(cin, hw, kdim, 1.0, &xv[x_off..], false, &gcol, true, 1.0, &mut dw);
        }
    }
    let mut res = Vec::new();
    if !dx.is_empty() {
        res.push((x, dx));
    }
    if !dw.is_empty() {
        res.push((w, dw));
    }
    if let Some(b) = b {
        if graph.requires_grad(b) {
            let mut db = vec![0.0; cout];
            let opix = oh * ow;
            for bi in 0..batch {
                for (c, acc) in db.iter_mut().enumerate() {
                    let off = (bi * cout + c) * opix;
                    *acc += g[off..off + opix].iter().sum::<f64>();
                }
            }
            res.push((b, db));
        }
    }
    res
}

/// Source sampling taps for one axis: `(i0, i1, frac)` per output index.
///
/// Half-pixel centres: `src = (i + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_backward(in_shape: &[usize], out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[(p * oh + i) * ow + j];
                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                plane[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}

impl Graph {
    /// 2-D cross-correlation with zero padding. `weight` is `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geo = conv_geometry(self, x, weight, stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), geo.cout),
                ));
            }
        }
        let (kdim, opix, cin_g, cout_g) = (geo.kdim(), geo.opix(), geo.cin_g(), geo.cout_g());
        let in_plane = geo.h * geo.w;
        let mut out = vec![0.0; geo.batch * geo.cout * opix];
        let mut col = vec![0.0; kdim * opix];
        {
            let xv = self.data(x);
            let wv = self.data(weight);
            for bi in 0..geo.batch {
                for gi in 0..groups {
                    let x_off = (bi * geo.cin + gi * cin_g) * in_plane;
                    im2col(&xv[x_off..], &geo, &mut col);
                    let o_off = (bi * geo.cout + gi * cout_g) * opix;
                    gemm(
                        cout_g,
                        kdim,
                        opix,
                        1.0,
                        &wv[gi * cout_g * kdim..],
                        false,
                        &col,
                        false,
                        0.0,
                        &mut out[o_off..o_off + cout_g * opix],
                    );
                }
            }
            if let Some(b) = bias {
                let bv = self.data(b);
                for bi in 0..geo.batch {
                    for (c, bc) in bv.iter().enumerate() {
                        let off = (bi * geo.cout + c) * opix;
                        out[off..off + opix].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        self.push(
            &[geo.batch, geo.cout, geo.oh, geo.ow],
            out,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                stride,
                padding,
                groups,
            },
        )
    }

    /// Transposed convolution with `kernel == stride` (disjoint output windows).
    /// `weight` is `[Cin, Cout, stride, stride]`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (batch, cin, cout, h, wd) = check_transpose(self, x, weight, stride)?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias {:?} for {cout} output channels", self.shape(b)),
                ));
            }
        }
        let s = stride;
        let (oh, ow) = (h * s, wd * s);
        let hw = h * wd;
        let kdim = cout * s * s;
        let mut out = vec![0.0; batch * cout * oh * ow];
        let mut ycol = vec![0.0; kdim * hw];
        {
            let xv = self.data(x);
            let wv = self.data(weight);
            for bi in 0..batch {
                gemm(kdim, cin, hw, 1.0, wv, true, &xv[bi * cin * hw..], false, 0.0, &mut ycol);
                for co in 0..cout {
                    for ki in 0..s {
                        for kj in 0..s {
                            let row = (co * s + ki) * s + kj;
                            for i in 0..h {
                                for j in 0..wd {
                                    out[((bi * cout + co) * oh + i * s + ki) * ow + j * s + kj] =
                                        ycol[row * hw + i * wd + j];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = self.data(b);
                let opix = oh * ow;
                for bi in 0..batch {
                    for (c, bc) in bv.iter().enumerate() {
                        let off = (bi * cout + c) * opix;
                        out[off..off + opix].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        self.push(
            &[batch, cout, oh, ow],
            out,
            Op::ConvTranspose2d {
                x,
                w: weight,
                b: bias,
                stride,
            },
        )
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("expected NCHW, got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "output extents must be >= 1"));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xv = self.data(x);
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        self.push(&[shape[0], shape[1], out_h, out_w], out, Op::Bilinear { x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn all_ones_three_by_three() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(g.value(y).at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.5 - 1.0));
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::ones(&[4, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1, 2), Err(Error::InvalidArgument { .. })));
        let w2 = g.constant(Tensor::ones(&[4, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, w2, None, 1, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn strided_output_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 1, 8, 6]));
        let w = g.constant(Tensor::ones(&[3, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4, 3]);
    }

    #[test]
    fn transpose_tiles_disjoint_windows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(
            g.data(y),
            &[
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
        let bad = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(g.conv_transpose2d(x, bad, None, 2).is_err());
    }

    #[test]
    fn transpose_zero_input_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let w = g.constant(Tensor::ones(&[2, 3, 2, 2]));
        let b = g.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.conv_transpose2d(x, w, Some(b), 2).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(g.value(y).at(&[0, c, i, j]), [0.5, -1.0, 2.0][c]);
                }
            }
        }
    }

    #[test]
    fn bilinear_half_pixel_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = g.bilinear_resize(x, 1, 4).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_identity_and_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 3, 5], |i| (i as f64).sin()));
        let same = g.bilinear_resize(x, 3, 5).unwrap();
        assert_eq!(g.data(same), g.data(x));
        let c = g.constant(Tensor::full(&[1, 1, 4, 4], 0.3));
        for (h, w) in [(1, 1), (7, 3), (16, 9)] {
            let r = g.bilinear_resize(c, h, w).unwrap();
            assert!(g.data(r).iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }
}
