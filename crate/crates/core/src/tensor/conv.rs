//! Spatial ops on rank-4 `[B, C, H, W]` maps: convolution, depthwise
//! convolution, 2x2 average pooling, and 2x nearest/bilinear upsampling.

use super::graph::{check_rank4, Graph, NodeKind, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a conv axis.
fn conv_out(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if k > padded {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Valid output range for a kernel offset: all `o` with
/// `0 <= o*stride - padding + koff < extent`.
fn out_range(extent: usize, out_extent: usize, stride: usize, padding: usize, koff: usize) -> (usize, usize) {
    let lo = if koff >= padding {
        0
    } else {
        (padding - koff).div_ceil(stride)
    };
    let hi_num = extent + padding;
    let hi = if hi_num > koff {
        (((hi_num - koff - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl<T: Scalar> Graph<T> {
    /// `conv2d(x[B,Cin,H,W], w[Cout,Cin,kh,kw], bias[Cout])`
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be >= 1".into()));
        }
        let (b, cin, h, wid) = check_rank4(&self.nodes[x.0].value, "conv2d")?;
        let tw = &self.nodes[w.0].value;
        if tw.rank() != 4 {
            return Err(Error::shape(format!("conv2d weight must be rank-4, got {:?}", tw.shape)));
        }
        let (cout, wcin, kh, kw) = (tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {cin}, weight expects {wcin}"
            )));
        }
        if self.nodes[bias.0].value.shape != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?}, expected [{cout}]",
                self.nodes[bias.0].value.shape
            )));
        }
        let oh = conv_out(h, kh, stride, padding)?;
        let ow = conv_out(wid, kw, stride, padding)?;

        let xd = &self.nodes[x.0].value.data;
        let wd = &tw.data;
        let bd = &self.nodes[bias.0].value.data;
        let mut out = vec![T::ZERO; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                let plane = &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                for v in plane.iter_mut() {
                    *v = bd[co];
                }
                for ci in 0..cin {
                    let x_plane = &xd[(bi * cin + ci) * h * wid..(bi * cin + ci + 1) * h * wid];
                    for khi in 0..kh {
                        let (o_lo, o_hi) = out_range(h, oh, stride, padding, khi);
                        for kwi in 0..kw {
                            let wv = wd[((co * cin + ci) * kh + khi) * kw + kwi];
                            let (c_lo, c_hi) = out_range(wid, ow, stride, padding, kwi);
                            for o in o_lo..o_hi {
                                let ih = o * stride + khi - padding;
                                let x_row = &x_plane[ih * wid..(ih + 1) * wid];
                                let o_row = &mut plane[o * ow..(o + 1) * ow];
                                if stride == 1 {
                                    let xoff = c_lo + kwi - padding;
                                    for (dst, &xv) in o_row[c_lo..c_hi]
                                        .iter_mut()
                                        .zip(&x_row[xoff..xoff + (c_hi - c_lo)])
                                    {
                                        *dst += wv * xv;
                                    }
                                } else {
                                    for oc in c_lo..c_hi {
                                        let iw = oc * stride + kwi - padding;
                                        o_row[oc] += wv * x_row[iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor { shape: vec![b, cout, oh, ow], data: out, requires_grad: false, grad: None };
        Ok(self.push(t, vec![x, w, bias], NodeKind::Conv2d { stride, padding }))
    }

    /// Depthwise 3x3-style conv: `x[B,C,H,W] * k[C,kh,kw] + bias[C]`,
    /// one kernel plane per channel.
    pub fn dwconv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (b, c, h, w) = check_rank4(&self.nodes[x.0].value, "dwconv2d")?;
        let tk = &self.nodes[kernel.0].value;
        if tk.rank() != 3 || tk.shape[0] != c {
            return Err(Error::shape(format!(
                "dwconv2d kernel {:?} vs {c} channels",
                tk.shape
            )));
        }
        let (kh, kw) = (tk.shape[1], tk.shape[2]);
        if self.nodes[bias.0].value.shape != [c] {
            return Err(Error::shape("dwconv2d bias shape".into()));
        }
        let oh = conv_out(h, kh, 1, padding)?;
        let ow = conv_out(w, kw, 1, padding)?;
        let xd = &self.nodes[x.0].value.data;
        let kd = &tk.data;
        let bd = &self.nodes[bias.0].value.data;
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &mut out[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                for v in plane.iter_mut() {
                    *v = bd[ci];
                }
                let x_plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for khi in 0..kh {
                    let (o_lo, o_hi) = out_range(h, oh, 1, padding, khi);
                    for kwi in 0..kw {
                        let kv = kd[(ci * kh + khi) * kw + kwi];
                        let (c_lo, c_hi) = out_range(w, ow, 1, padding, kwi);
                        for o in o_lo..o_hi {
                            let ih = o + khi - padding;
                            let x_row = &x_plane[ih * w..(ih + 1) * w];
                            let o_row = &mut plane[o * ow..(o + 1) * ow];
                            let xoff = c_lo + kwi - padding;
                            for (dst, &xv) in o_row[c_lo..c_hi]
                                .iter_mut()
                                .zip(&x_row[xoff..xoff + (c_hi - c_lo)])
                            {
                                *dst += kv * xv;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor { shape: vec![b, c, oh, ow], data: out, requires_grad: false, grad: None };
        Ok(self.push(t, vec![x, kernel, bias], NodeKind::DwConv2d { padding }))
    }

    /// 2x2 average pooling, stride 2. Extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = check_rank4(&self.nodes[x.0].value, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even extents, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = &self.nodes[x.0].value.data;
        let quarter = T::from_f64(0.25);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                let r0 = &plane[(2 * oy) * w..(2 * oy + 1) * w];
                let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..ow {
                    out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
                }
            }
        }
        let t = Tensor { shape: vec![b, c, oh, ow], data: out, requires_grad: false, grad: None };
        Ok(self.push(t, vec![x], NodeKind::AvgPool2))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = check_rank4(&self.nodes[x.0].value, "upsample_nearest2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
                for ox in 0..ow {
                    out.push(row[ox / 2]);
                }
            }
        }
        let t = Tensor { shape: vec![b, c, oh, ow], data: out, requires_grad: false, grad: None };
        Ok(self.push(t, vec![x], NodeKind::UpsampleNearest2))
    }

    /// 2x bilinear upsample with half-pixel alignment and edge clamping.
    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = check_rank4(&self.nodes[x.0].value, "upsample_bilinear2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let ytab = bilinear_taps(h);
        let xtab = bilinear_taps(w);
        let xd = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for &(y0, y1, ty) in &ytab {
                let ty = T::from_f64(ty);
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                for &(x0, x1, tx) in &xtab {
                    let tx = T::from_f64(tx);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * tx;
                    out.push(top + (bot - top) * ty);
                }
            }
        }
        let t = Tensor { shape: vec![b, c, oh, ow], data: out, requires_grad: false, grad: None };
        Ok(self.push(t, vec![x], NodeKind::UpsampleBilinear2))
    }

    pub(crate) fn backward_conv2d(
        &self,
        node: usize,
        stride: usize,
        padding: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let px = self.nodes[node].parents[0].0;
        let pw = self.nodes[node].parents[1].0;
        let pb = self.nodes[node].parents[2].0;
        let xs = self.nodes[px].value.shape.clone();
        let ws = self.nodes[pw].value.shape.clone();
        let os = self.nodes[node].value.shape.clone();
        let (b, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);

        if self.nodes[pb].requires_grad {
            let gb = self.grad_buf(grads, pb);
            for bi in 0..b {
                for co in 0..cout {
                    let plane = &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                    let mut acc = T::ZERO;
                    for &gv in plane {
                        acc += gv;
                    }
                    gb[co] += acc;
                }
            }
        }
        if self.nodes[pw].requires_grad {
            let xd = &self.nodes[px].value.data;
            let gw = self.grad_buf(grads, pw);
            for bi in 0..b {
                for co in 0..cout {
                    let g_plane = &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                    for ci in 0..cin {
                        let x_plane = &xd[(bi * cin + ci) * h * wid..(bi * cin + ci + 1) * h * wid];
                        for khi in 0..kh {
                            let (o_lo, o_hi) = out_range(h, oh, stride, padding, khi);
                            for kwi in 0..kw {
                                let (c_lo, c_hi) = out_range(wid, ow, stride, padding, kwi);
                                let mut acc = T::ZERO;
                                for o in o_lo..o_hi {
                                    let ih = o * stride + khi - padding;
                                    let x_row = &x_plane[ih * wid..(ih + 1) * wid];
                                    let g_row = &g_plane[o * ow..(o + 1) * ow];
                                    if stride == 1 {
                                        let xoff = c_lo + kwi - padding;
                                        for (&gv, &xv) in g_row[c_lo..c_hi]
                                            .iter()
                                            .zip(&x_row[xoff..xoff + (c_hi - c_lo)])
                                        {
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for oc in c_lo..c_hi {
                                            acc += g_row[oc] * x_row[oc * stride + kwi - padding];
                                        }
                                    }
                                }
                                gw[((co * cin + ci) * kh + khi) * kw + kwi] += acc;
                            }
                        }
                    }
                }
            }
        }
        if self.nodes[px].requires_grad {
            let wd = &self.nodes[pw].value.data;
            let gx = self.grad_buf(grads, px);
            for bi in 0..b {
                for co in 0..cout {
                    let g_plane = &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                    for ci in 0..cin {
                        let gx_plane =
                            &mut gx[(bi * cin + ci) * h * wid..(bi * cin + ci + 1) * h * wid];
                        for khi in 0..kh {
                            let (o_lo, o_hi) = out_range(h, oh, stride, padding, khi);
                            for kwi in 0..kw {
                                let wv = wd[((co * cin + ci) * kh + khi) * kw + kwi];
                                let (c_lo, c_hi) = out_range(wid, ow, stride, padding, kwi);
                                for o in o_lo..o_hi {
                                    let ih = o * stride + khi - padding;
                                    let g_row = &g_plane[o * ow..(o + 1) * ow];
                                    let gx_row = &mut gx_plane[ih * wid..(ih + 1) * wid];
                                    if stride == 1 {
                                        let xoff = c_lo + kwi - padding;
                                        for (dst, &gv) in gx_row[xoff..xoff + (c_hi - c_lo)]
                                            .iter_mut()
                                            .zip(&g_row[c_lo..c_hi])
                                        {
                                            *dst += wv * gv;
                                        }
                                    } else {
                                        for oc in c_lo..c_hi {
                                            gx_row[oc * stride + kwi - padding] += wv * g_row[oc];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn backward_dwconv2d(
        &self,
        node: usize,
        padding: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let px = self.nodes[node].parents[0].0;
        let pk = self.nodes[node].parents[1].0;
        let pb = self.nodes[node].parents[2].0;
        let xs = self.nodes[px].value.shape.clone();
        let ks = self.nodes[pk].value.shape.clone();
        let os = self.nodes[node].value.shape.clone();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ks[1], ks[2]);
        let (oh, ow) = (os[2], os[3]);

        if self.nodes[pb].requires_grad {
            let gb = self.grad_buf(grads, pb);
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &gout[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                    let mut acc = T::ZERO;
                    for &gv in plane {
                        acc += gv;
                    }
                    gb[ci] += acc;
                }
            }
        }
        if self.nodes[pk].requires_grad {
            let xd = &self.nodes[px].value.data;
            let gk = self.grad_buf(grads, pk);
            for bi in 0..b {
                for ci in 0..c {
                    let g_plane = &gout[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                    let x_plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for khi in 0..kh {
                        let (o_lo, o_hi) = out_range(h, oh, 1, padding, khi);
                        for kwi in 0..kw {
                            let (c_lo, c_hi) = out_range(w, ow, 1, padding, kwi);
                            let mut acc = T::ZERO;
                            for o in o_lo..o_hi {
                                let ih = o + khi - padding;
                                let xoff = c_lo + kwi - padding;
                                for (&gv, &xv) in g_plane[o * ow + c_lo..o * ow + c_hi]
                                    .iter()
                                    .zip(&x_plane[ih * w + xoff..ih * w + xoff + (c_hi - c_lo)])
                                {
                                    acc += gv * xv;
                                }
                            }
                            gk[(ci * kh + khi) * kw + kwi] += acc;
                        }
                    }
                }
            }
        }
        if self.nodes[px].requires_grad {
            let kd = &self.nodes[pk].value.data;
            let gx = self.grad_buf(grads, px);
            for bi in 0..b {
                for ci in 0..c {
                    let g_plane = &gout[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                    let gx_plane = &mut gx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for khi in 0..kh {
                        let (o_lo, o_hi) = out_range(h, oh, 1, padding, khi);
                        for kwi in 0..kw {
                            let kv = kd[(ci * kh + khi) * kw + kwi];
                            let (c_lo, c_hi) = out_range(w, ow, 1, padding, kwi);
                            for o in o_lo..o_hi {
                                let ih = o + khi - padding;
                                let xoff = c_lo + kwi - padding;
                                for (dst, &gv) in gx_plane
                                    [ih * w + xoff..ih * w + xoff + (c_hi - c_lo)]
                                    .iter_mut()
                                    .zip(&g_plane[o * ow + c_lo..o * ow + c_hi])
                                {
                                    *dst += kv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn backward_avg_pool2(&self, node: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let p = self.nodes[node].parents[0].0;
        let xs = self.nodes[p].value.shape.clone();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let g = self.grad_buf(grads, p);
        for bc in 0..b * c {
            let g_plane = &gout[bc * oh * ow..(bc + 1) * oh * ow];
            let x_plane = &mut g[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g_plane[oy * ow + ox] * quarter;
                    x_plane[2 * oy * w + 2 * ox] += gv;
                    x_plane[2 * oy * w + 2 * ox + 1] += gv;
                    x_plane[(2 * oy + 1) * w + 2 * ox] += gv;
                    x_plane[(2 * oy + 1) * w + 2 * ox + 1] += gv;
                }
            }
        }
    }

    pub(crate) fn backward_upsample_nearest2(
        &self,
        node: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let p = self.nodes[node].parents[0].0;
        let xs = self.nodes[p].value.shape.clone();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ow = 2 * w;
        let g = self.grad_buf(grads, p);
        for bc in 0..b * c {
            let g_plane = &gout[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            let x_plane = &mut g[bc * h * w..(bc + 1) * h * w];
            for oy in 0..2 * h {
                let row = &g_plane[oy * ow..(oy + 1) * ow];
                let x_row = &mut x_plane[(oy / 2) * w..(oy / 2 + 1) * w];
                for ox in 0..ow {
                    x_row[ox / 2] += row[ox];
                }
            }
        }
    }

    pub(crate) fn backward_upsample_bilinear2(
        &self,
        node: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let p = self.nodes[node].parents[0].0;
        let xs = self.nodes[p].value.shape.clone();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ow = 2 * w;
        let ytab = bilinear_taps(h);
        let xtab = bilinear_taps(w);
        let g = self.grad_buf(grads, p);
        for bc in 0..b * c {
            let g_plane = &gout[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            let x_plane = &mut g[bc * h * w..(bc + 1) * h * w];
            for (oy, &(y0, y1, ty)) in ytab.iter().enumerate() {
                let ty = T::from_f64(ty);
                let row = &g_plane[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, tx)) in xtab.iter().enumerate() {
                    let tx = T::from_f64(tx);
                    let gv = row[ox];
                    let w00 = (T::ONE - ty) * (T::ONE - tx);
                    let w01 = (T::ONE - ty) * tx;
                    let w10 = ty * (T::ONE - tx);
                    let w11 = ty * tx;
                    x_plane[y0 * w + x0] += gv * w00;
                    x_plane[y0 * w + x1] += gv * w01;
                    x_plane[y1 * w + x0] += gv * w10;
                    x_plane[y1 * w + x1] += gv * w11;
                }
            }
        }
    }
}

/// Per-output-pixel source taps for 2x bilinear: `(lo, hi, frac)`.
fn bilinear_taps(extent: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * extent)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let lo = floor.max(0.0) as usize;
            let hi = ((floor + 1.0).max(0.0) as usize).min(extent - 1);
            let lo = lo.min(extent - 1);
            (lo, hi, if floor < 0.0 { 0.0 } else { t })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn one_by_one_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        // corner 4, edge-center 6, center 9
        assert_eq!(g.data(y), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn conv_rejects_kernel_larger_than_padded_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
    }

    #[test]
    fn avg_pool_averages_quads() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.data(y), &[2.5]);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![7., 9.]).unwrap());
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 4]);
        assert_eq!(g.data(y), &[7., 7., 9., 9., 7., 7., 9., 9.]);
    }

    #[test]
    fn bilinear_preserves_constant_maps() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 5.0));
        let y = g.upsample_bilinear2(x).unwrap();
        assert!(g.data(y).iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }
}
