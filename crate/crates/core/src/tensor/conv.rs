//! 2-D convolution and transposed convolution on NHWC tensors, backed by
//! im2col + GEMM.

use super::ops::gemm;
use super::{check_inputs, Tensor};
use crate::error::{Error, Result};

/// Spatial padding mode for `conv2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Output is `ceil(in / stride)`; zeros split evenly, extra at the end.
    Same,
    /// No padding; output is `(in - k) / stride + 1`.
    Valid,
}

fn out_and_pad(input: usize, k: usize, stride: usize, pad: Pad) -> Result<(usize, usize)> {
    match pad {
        Pad::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        Pad::Valid => {
            if input < k {
                return Err(Error::invalid(
                    "conv2d",
                    format!("input dim {input} smaller than kernel {k}"),
                ));
            }
            Ok(((input - k) / stride + 1, 0))
        }
    }
}

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.kh * g.kw * g.cin;
    let mut col = vec![0.0; g.b * g.oh * g.ow * cols];
    let mut r = 0;
    for b in 0..g.b {
        let xb = &x[b * g.h * g.w * g.cin..];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = r * cols;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let dst = base + (ky * g.kw + kx) * g.cin;
                        col[dst..dst + g.cin].copy_from_slice(&xb[src..src + g.cin]);
                    }
                }
                r += 1;
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.kh * g.kw * g.cin;
    let mut dx = vec![0.0; g.b * g.h * g.w * g.cin];
    let mut r = 0;
    for b in 0..g.b {
        let off = b * g.h * g.w * g.cin;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = r * cols;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = off + (iy as usize * g.w + ix as usize) * g.cin;
                        let src = base + (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += dcol[src + c];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    dx
}

impl Tensor {
    /// 2-D convolution. `self` is (B,H,W,Cin), `weight` is (KH,KW,Cin,Cout),
    /// `bias` is (Cout).
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: Pad,
    ) -> Result<Tensor> {
        check_inputs("conv2d", &[self, weight, bias])?;
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[3] != weight.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (b, h, w, cin) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (kh, kw, cout) = (weight.shape()[0], weight.shape()[1], weight.shape()[3]);
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (oh, pad_top) = out_and_pad(h, kh, stride, pad)?;
        let (ow, pad_left) = out_and_pad(w, kw, stride, pad)?;
        let geom = ConvGeom {
            b,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        };
        let rows = b * oh * ow;
        let cols = kh * kw * cin;
        let col = im2col(&self.data(), &geom);
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cols, cout, &col, false, &weight.data(), false, &mut out);
        {
            let bd = bias.data();
            for row in out.chunks_exact_mut(cout) {
                for (v, bv) in row.iter_mut().zip(bd.iter()) {
                    *v += bv;
                }
            }
        }
        let x = self.clone();
        let wt = weight.clone();
        let x_tracked = self.tracked();
        let w_tracked = weight.tracked();
        let b_tracked = bias.tracked();
        Ok(Tensor::from_op(
            out,
            vec![b, oh, ow, cout],
            vec![self.clone(), weight.clone(), bias.clone()],
            |_| {
                Box::new(move |g| {
                    // The column matrix is regenerated rather than saved;
                    // gathers are cheap next to the GEMMs.
                    let col = (x_tracked || w_tracked).then(|| im2col(&x.data(), &geom));
                    let dw = w_tracked.then(|| {
                        let mut dw = vec![0.0; cols * geom.cout];
                        gemm(
                            cols,
                            rows,
                            geom.cout,
                            col.as_ref().unwrap(),
                            true,
                            g,
                            false,
                            &mut dw,
                        );
                        dw
                    });
                    let db = b_tracked.then(|| {
                        let mut db = vec![0.0; geom.cout];
                        for row in g.chunks_exact(geom.cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        db
                    });
                    let dx = x_tracked.then(|| {
                        let mut dcol = vec![0.0; rows * cols];
                        gemm(rows, geom.cout, cols, g, false, &wt.data(), true, &mut dcol);
                        col2im(&dcol, &geom)
                    });
                    vec![dx, dw, db]
                })
            },
        ))
    }

    /// Transposed 2-D convolution. `self` is (B,H,W,Cin), `weight` is
    /// (KH,KW,Cin,Cout); output is `(H-1)*stride + KH - 2*pad` per spatial
    /// dim.
    pub fn conv2d_transpose(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        check_inputs("conv2d_transpose", &[self, weight, bias])?;
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[3] != weight.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (b, h, w, cin) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (kh, kw, cout) = (weight.shape()[0], weight.shape()[1], weight.shape()[3]);
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        if oh < 2 * pad || ow < 2 * pad {
            return Err(Error::invalid("conv2d_transpose", "padding too large"));
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let rows = b * h * w;
        let kcc = kh * kw * cout;
        // Weight permuted to (Cin, KH*KW*Cout) so the forward is one GEMM.
        let wperm = permute_weight(&weight.data(), kh, kw, cin, cout);
        let mut tmp = vec![0.0; rows * kcc];
        gemm(rows, cin, kcc, &self.data(), false, &wperm, false, &mut tmp);
        let mut out = vec![0.0; b * oh * ow * cout];
        scatter_tmp(&tmp, &mut out, b, h, w, oh, ow, kh, kw, cout, stride, pad, true);
        {
            let bd = bias.data();
            for row in out.chunks_exact_mut(cout) {
                for (v, bv) in row.iter_mut().zip(bd.iter()) {
                    *v += bv;
                }
            }
        }
        let x = self.clone();
        let x_tracked = self.tracked();
        let w_tracked = weight.tracked();
        let b_tracked = bias.tracked();
        Ok(Tensor::from_op(
            out,
            vec![b, oh, ow, cout],
            vec![self.clone(), weight.clone(), bias.clone()],
            |_| {
                Box::new(move |g| {
                    // dtmp mirrors the forward scatter as a gather from g.
                    let mut dtmp = vec![0.0; rows * kcc];
                    scatter_tmp(g, &mut dtmp, b, h, w, oh, ow, kh, kw, cout, stride, pad, false);
                    let dx = x_tracked.then(|| {
                        let mut dx = vec![0.0; rows * cin];
                        gemm(rows, kcc, cin, &dtmp, false, &wperm, true, &mut dx);
                        dx
                    });
                    let dw = w_tracked.then(|| {
                        let mut dwp = vec![0.0; cin * kcc];
                        gemm(cin, rows, kcc, &x.data(), true, &dtmp, false, &mut dwp);
                        unpermute_weight(&dwp, kh, kw, cin, cout)
                    });
                    let db = b_tracked.then(|| {
                        let mut db = vec![0.0; cout];
                        for row in g.chunks_exact(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        db
                    });
                    vec![dx, dw, db]
                })
            },
        ))
    }
}

fn permute_weight(w: &[f64], kh: usize, kw: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for ky in 0..kh {
        for kx in 0..kw {
            for ci in 0..cin {
                for co in 0..cout {
                    out[ci * kh * kw * cout + (ky * kw + kx) * cout + co] =
                        w[((ky * kw + kx) * cin + ci) * cout + co];
                }
            }
        }
    }
    out
}

fn unpermute_weight(wp: &[f64], kh: usize, kw: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; wp.len()];
    for ky in 0..kh {
        for kx in 0..kw {
            for ci in 0..cin {
                for co in 0..cout {
                    out[((ky * kw + kx) * cin + ci) * cout + co] =
                        wp[ci * kh * kw * cout + (ky * kw + kx) * cout + co];
                }
            }
        }
    }
    out
}

/// When `forward` is true, scatter-add `tmp` rows into the (B,OH,OW,Cout)
/// buffer; otherwise gather from it into `tmp`-shaped `dst`.
#[allow(clippy::too_many_arguments)]
fn scatter_tmp(
    src: &[f64],
    dst: &mut [f64],
    b: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    forward: bool,
) {
    let kcc = kh * kw * cout;
    let mut r = 0;
    for bi in 0..b {
        let img = bi * oh * ow * cout;
        for iy in 0..h {
            for ix in 0..w {
                let base = r * kcc;
                for ky in 0..kh {
                    let oy = (iy * stride + ky) as isize - pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox = (ix * stride + kx) as isize - pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let pix = img + (oy as usize * ow + ox as usize) * cout;
                        let t = base + (ky * kw + kx) * cout;
                        if forward {
                            for c in 0..cout {
                                dst[pix + c] += src[t + c];
                            }
                        } else {
                            for c in 0..cout {
                                dst[t + c] = src[pix + c];
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}
