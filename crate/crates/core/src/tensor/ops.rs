//! Forward operations and their vector-Jacobian products.

use super::{check_inputs, Tensor};
use crate::error::{Error, Result};

/// `out = A · B` into `out`, row-major. When a flag is set the slice holds
/// the transpose of the logical operand, addressed through strides so no
/// copy is made.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// rhs broadcasts over lhs when its shape is a suffix of lhs's shape.
fn broadcast_blocks(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<usize> {
    let ls = lhs.shape();
    let rs = rhs.shape();
    if rs.len() > ls.len() || ls[ls.len() - rs.len()..] != *rs {
        return Err(Error::ShapeMismatch {
            op,
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        });
    }
    Ok(lhs.numel() / rhs.numel())
}

/// Sum `g` over leading broadcast blocks down to `chunk` elements.
fn reduce_to_chunk(g: &[f64], chunk: usize) -> Vec<f64> {
    let mut out = vec![0.0; chunk];
    for block in g.chunks_exact(chunk) {
        for (o, v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        check_inputs("add", &[self, rhs])?;
        let blocks = broadcast_blocks("add", self, rhs)?;
        let chunk = rhs.numel();
        let rd = rhs.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + rd[i % chunk])
            .collect();
        drop(rd);
        let shape = self.shape().to_vec();
        let rhs_tracked = rhs.tracked();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            |_| {
                Box::new(move |g| {
                    let db = if rhs_tracked {
                        Some(if blocks == 1 {
                            g.to_vec()
                        } else {
                            reduce_to_chunk(g, chunk)
                        })
                    } else {
                        None
                    };
                    vec![Some(g.to_vec()), db]
                })
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        check_inputs("sub", &[self, rhs])?;
        let blocks = broadcast_blocks("sub", self, rhs)?;
        let chunk = rhs.numel();
        let rd = rhs.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v - rd[i % chunk])
            .collect();
        drop(rd);
        let shape = self.shape().to_vec();
        let rhs_tracked = rhs.tracked();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            |_| {
                Box::new(move |g| {
                    let db = if rhs_tracked {
                        let mut r = if blocks == 1 {
                            g.to_vec()
                        } else {
                            reduce_to_chunk(g, chunk)
                        };
                        r.iter_mut().for_each(|v| *v = -*v);
                        Some(r)
                    } else {
                        None
                    };
                    vec![Some(g.to_vec()), db]
                })
            },
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        check_inputs("mul", &[self, rhs])?;
        let _ = broadcast_blocks("mul", self, rhs)?;
        let chunk = rhs.numel();
        let rd = rhs.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * rd[i % chunk])
            .collect();
        drop(rd);
        let shape = self.shape().to_vec();
        let lhs = self.clone();
        let rhs_c = rhs.clone();
        let rhs_tracked = rhs.tracked();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            |_| {
                Box::new(move |g| {
                    let ld = lhs.data();
                    let rd = rhs_c.data();
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * rd[i % chunk])
                        .collect();
                    let db = if rhs_tracked {
                        let mut acc = vec![0.0; chunk];
                        for (i, gv) in g.iter().enumerate() {
                            acc[i % chunk] += gv * ld[i];
                        }
                        Some(acc)
                    } else {
                        None
                    };
                    vec![Some(da), db]
                })
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        check_inputs("scale", &[self])?;
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| vec![Some(g.iter().map(|v| v * c).collect())])
        }))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        check_inputs("add_scalar", &[self])?;
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| vec![Some(g.to_vec())])
        }))
    }

    pub fn sqr(&self) -> Result<Tensor> {
        check_inputs("sqr", &[self])?;
        let out: Vec<f64> = self.data().iter().map(|v| v * v).collect();
        let shape = self.shape().to_vec();
        let x = self.clone();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| {
                let xd = x.data();
                vec![Some(g.iter().zip(xd.iter()).map(|(gv, xv)| 2.0 * xv * gv).collect())]
            })
        }))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        check_inputs("matmul", &[self, rhs])?;
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &rhs.data(), false, &mut out);
        let a = self.clone();
        let b = rhs.clone();
        let a_tracked = self.tracked();
        let b_tracked = rhs.tracked();
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            |_| {
                Box::new(move |g| {
                    let da = a_tracked.then(|| {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g, false, &b.data(), true, &mut da);
                        da
                    });
                    let db = b_tracked.then(|| {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &a.data(), true, g, false, &mut db);
                        db
                    });
                    vec![da, db]
                })
            },
        ))
    }

    /// Batched matrix product: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        check_inputs("bmm", &[self, rhs])?;
        if self.rank() != 3
            || rhs.rank() != 3
            || self.shape()[0] != rhs.shape()[0]
            || self.shape()[2] != rhs.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = rhs.shape()[2];
        let mut out = vec![0.0; bs * m * n];
        {
            let ad = self.data();
            let bd = rhs.data();
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let a = self.clone();
        let b = rhs.clone();
        let a_tracked = self.tracked();
        let b_tracked = rhs.tracked();
        Ok(Tensor::from_op(
            out,
            vec![bs, m, n],
            vec![self.clone(), rhs.clone()],
            |_| {
                Box::new(move |g| {
                    let da = a_tracked.then(|| {
                        let bd = b.data();
                        let mut da = vec![0.0; bs * m * k];
                        for i in 0..bs {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bd[i * k * n..(i + 1) * k * n],
                                true,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                        da
                    });
                    let db = b_tracked.then(|| {
                        let ad = a.data();
                        let mut db = vec![0.0; bs * k * n];
                        for i in 0..bs {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                        db
                    });
                    vec![da, db]
                })
            },
        ))
    }

    /// Reshape to a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_inputs("reshape", &[self])?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |_| Box::new(move |g| vec![Some(g.to_vec())]),
        ))
    }

    /// Apply a pure index permutation: `out[i] = in[map[i]]`.
    pub(crate) fn permutation_op(
        &self,
        op: &'static str,
        out_shape: Vec<usize>,
        map: Vec<usize>,
    ) -> Result<Tensor> {
        check_inputs(op, &[self])?;
        debug_assert_eq!(map.len(), out_shape.iter().product::<usize>());
        let xd = self.data();
        let out: Vec<f64> = map.iter().map(|&i| xd[i]).collect();
        drop(xd);
        let in_len = self.numel();
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], |_| {
            Box::new(move |g| {
                let mut dx = vec![0.0; in_len];
                for (gv, &i) in g.iter().zip(&map) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Transpose a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank 2, got shape {:?}", self.shape()),
            ));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut map = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                map.push(i * n + j);
            }
        }
        self.permutation_op("transpose", vec![n, m], map)
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::invalid(
                "transpose_last2",
                format!("expected rank 3, got shape {:?}", self.shape()),
            ));
        }
        let (b, m, n) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let mut map = Vec::with_capacity(b * m * n);
        for bi in 0..b {
            for j in 0..n {
                for i in 0..m {
                    map.push(bi * m * n + i * n + j);
                }
            }
        }
        self.permutation_op("transpose_last2", vec![b, n, m], map)
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no tensors given"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            check_inputs("concat", &[p])?;
            if p.rank() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: parts[0].shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for p in parts {
                let slab = p.shape()[axis] * inner;
                let d = p.data();
                out.extend_from_slice(&d[o * slab..(o + 1) * slab]);
            }
        }
        let slabs: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(out, out_shape, parents, |_| {
            Box::new(move |g| {
                let total_slab: usize = slabs.iter().sum();
                let mut grads: Vec<Vec<f64>> =
                    slabs.iter().map(|s| Vec::with_capacity(s * outer)).collect();
                for o in 0..outer {
                    let mut off = o * total_slab;
                    for (pi, &slab) in slabs.iter().enumerate() {
                        grads[pi].extend_from_slice(&g[off..off + slab]);
                        off += slab;
                    }
                }
                grads.into_iter().map(Some).collect()
            })
        }))
    }

    /// Zero-pad the last axis up to `width`.
    pub fn pad_last(&self, width: usize) -> Result<Tensor> {
        check_inputs("pad_last", &[self])?;
        let last = *self.shape().last().ok_or_else(|| {
            Error::invalid("pad_last", "rank 0 tensor")
        })?;
        if width < last {
            return Err(Error::invalid(
                "pad_last",
                format!("target width {width} smaller than current {last}"),
            ));
        }
        let rows = self.numel() / last;
        let mut out = vec![0.0; rows * width];
        {
            let d = self.data();
            for r in 0..rows {
                out[r * width..r * width + last].copy_from_slice(&d[r * last..(r + 1) * last]);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(rows * last);
                for r in 0..rows {
                    dx.extend_from_slice(&g[r * width..r * width + last]);
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Copy `len` indices starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_inputs("slice", &[self])?;
        if axis >= self.rank() || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} out of bounds for axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let dim = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let in_len = self.numel();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| {
                let mut dx = vec![0.0; in_len];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Tile a leading unit axis `n` times: (1, ...) -> (n, ...).
    pub fn repeat_axis0(&self, n: usize) -> Result<Tensor> {
        check_inputs("repeat_axis0", &[self])?;
        if self.shape().first() != Some(&1) {
            return Err(Error::invalid(
                "repeat_axis0",
                format!("leading axis must be 1, got {:?}", self.shape()),
            ));
        }
        let chunk = self.numel();
        let d = self.data();
        let mut out = Vec::with_capacity(chunk * n);
        for _ in 0..n {
            out.extend_from_slice(&d);
        }
        drop(d);
        let mut shape = self.shape().to_vec();
        shape[0] = n;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| vec![Some(reduce_to_chunk(g, chunk))])
        }))
    }

    /// (B,T,D) -> (B*heads, T, D/heads), splitting the feature axis.
    pub fn split_heads(&self, heads: usize) -> Result<Tensor> {
        if self.rank() != 3 || self.shape()[2] % heads != 0 {
            return Err(Error::invalid(
                "split_heads",
                format!("shape {:?} not splittable into {heads} heads", self.shape()),
            ));
        }
        let (b, t, d) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let dh = d / heads;
        let mut map = Vec::with_capacity(b * t * d);
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    for j in 0..dh {
                        map.push(bi * t * d + ti * d + h * dh + j);
                    }
                }
            }
        }
        self.permutation_op("split_heads", vec![b * heads, t, dh], map)
    }

    /// Inverse of `split_heads`.
    pub fn merge_heads(&self, heads: usize) -> Result<Tensor> {
        if self.rank() != 3 || self.shape()[0] % heads != 0 {
            return Err(Error::invalid(
                "merge_heads",
                format!("shape {:?} not mergeable from {heads} heads", self.shape()),
            ));
        }
        let (bh, t, dh) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let b = bh / heads;
        let d = dh * heads;
        let mut map = Vec::with_capacity(b * t * d);
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    for j in 0..dh {
                        map.push((bi * heads + h) * t * dh + ti * dh + j);
                    }
                }
            }
        }
        self.permutation_op("merge_heads", vec![b, t, d], map)
    }

    /// Softmax over the last axis, numerically stabilised.
    pub fn softmax_last(&self) -> Result<Tensor> {
        check_inputs("softmax", &[self])?;
        let last = *self.shape().last().ok_or_else(|| {
            Error::invalid("softmax", "rank 0 tensor")
        })?;
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |y| {
            let y = y.to_vec();
            Box::new(move |g| {
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / last {
                    let ys = &y[r * last..(r + 1) * last];
                    let gs = &g[r * last..(r + 1) * last];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for i in 0..last {
                        dx[r * last + i] = ys[i] * (gs[i] - dot);
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Layer normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        check_inputs("layer_norm", &[self, gamma, beta])?;
        let last = *self.shape().last().ok_or_else(|| {
            Error::invalid("layer_norm", "rank 0 tensor")
        })?;
        if gamma.shape() != [last] || beta.shape() != [last] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / last;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xs = &xd[r * last..(r + 1) * last];
            let mean = xs.iter().sum::<f64>() / last as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..last {
                let xh = (xs[i] - mean) * is;
                xhat[r * last + i] = xh;
                out[r * last + i] = xh * gd[i] + bd[i];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let shape = self.shape().to_vec();
        let gamma_c = gamma.clone();
        let gamma_tracked = gamma.tracked();
        let beta_tracked = beta.tracked();
        let x_tracked = self.tracked();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            |_| {
                Box::new(move |g| {
                    let gd = gamma_c.data();
                    let nf = last as f64;
                    let dx = x_tracked.then(|| {
                        let mut dx = vec![0.0; xhat.len()];
                        for r in 0..rows {
                            let base = r * last;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for i in 0..last {
                                let gg = g[base + i] * gd[i];
                                s1 += gg;
                                s2 += gg * xhat[base + i];
                            }
                            for i in 0..last {
                                let gg = g[base + i] * gd[i];
                                dx[base + i] =
                                    inv_std[r] * (gg - s1 / nf - xhat[base + i] * s2 / nf);
                            }
                        }
                        dx
                    });
                    let dgamma = gamma_tracked.then(|| {
                        let mut dg = vec![0.0; last];
                        for r in 0..rows {
                            for i in 0..last {
                                dg[i] += g[r * last + i] * xhat[r * last + i];
                            }
                        }
                        dg
                    });
                    let dbeta = beta_tracked.then(|| reduce_to_chunk(g, last));
                    vec![dx, dgamma, dbeta]
                })
            },
        ))
    }

    /// GELU with the usual tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        check_inputs("gelu", &[self])?;
        const K0: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K1: f64 = 0.044715;
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (K0 * (x + K1 * x * x * x)).tanh()))
            .collect();
        let shape = self.shape().to_vec();
        let xt = self.clone();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| {
                let xd = xt.data();
                let dx = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(gv, &x)| {
                        let t = (K0 * (x + K1 * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * K0 * (1.0 + 3.0 * K1 * x * x);
                        gv * d
                    })
                    .collect();
                vec![Some(dx)]
            })
        }))
    }

    pub fn relu(&self) -> Result<Tensor> {
        check_inputs("relu", &[self])?;
        let out: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape().to_vec();
        let xt = self.clone();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |_| {
            Box::new(move |g| {
                let xd = xt.data();
                let dx = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            })
        }))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        check_inputs("sigmoid", &[self])?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], |y| {
            let y = y.to_vec();
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                vec![Some(dx)]
            })
        }))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        check_inputs("sum", &[self])?;
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Ok(Tensor::from_op(vec![s], vec![1], vec![self.clone()], |_| {
            Box::new(move |g| vec![Some(vec![g[0]; n])])
        }))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        check_inputs("mean", &[self])?;
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Ok(Tensor::from_op(vec![s], vec![1], vec![self.clone()], |_| {
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])])
        }))
    }

    /// Mean over the middle axis of a rank-3 tensor: (B,T,D) -> (B,D).
    pub fn mean_axis1(&self) -> Result<Tensor> {
        check_inputs("mean_axis1", &[self])?;
        if self.rank() != 3 {
            return Err(Error::invalid(
                "mean_axis1",
                format!("expected rank 3, got {:?}", self.shape()),
            ));
        }
        let (b, t, d) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let xd = self.data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..d {
                    out[bi * d + j] += xd[bi * t * d + ti * d + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        drop(xd);
        Ok(Tensor::from_op(out, vec![b, d], vec![self.clone()], |_| {
            Box::new(move |g| {
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..d {
                            dx[bi * t * d + ti * d + j] = g[bi * d + j] / t as f64;
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Gather rows of a (K,d) table: out[i] = table[idx[i]].
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        check_inputs("gather_rows", &[self])?;
        if self.rank() != 2 {
            return Err(Error::invalid(
                "gather_rows",
                format!("expected rank-2 table, got {:?}", self.shape()),
            ));
        }
        let (k, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {k} rows"),
            ));
        }
        let td = self.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        drop(td);
        let idx = idx.to_vec();
        let n = idx.len();
        Ok(Tensor::from_op(out, vec![n, d], vec![self.clone()], |_| {
            Box::new(move |g| {
                let mut dt = vec![0.0; k * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                vec![Some(dt)]
            })
        }))
    }

    /// Forward value of `z_q`, gradient routed unchanged to `z_e`.
    pub fn straight_through(z_e: &Tensor, z_q: &Tensor) -> Result<Tensor> {
        check_inputs("straight_through", &[z_e, z_q])?;
        if z_e.shape() != z_q.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: z_e.shape().to_vec(),
                rhs: z_q.shape().to_vec(),
            });
        }
        Ok(Tensor::from_op(
            z_q.to_vec(),
            z_q.shape().to_vec(),
            vec![z_e.clone(), z_q.clone()],
            |_| Box::new(move |g| vec![Some(g.to_vec()), None]),
        ))
    }

    /// Mean cross-entropy between logits (B,C) and integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        check_inputs("cross_entropy", &[self])?;
        if self.rank() != 2 || self.shape()[0] != labels.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits {:?} vs {} labels", self.shape(), labels.len()),
            ));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let xd = self.data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &xd[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + i] = e;
                sum += e;
            }
            for i in 0..c {
                probs[r * c + i] /= sum;
            }
            loss += sum.ln() + max - row[labels[r]];
        }
        loss /= b as f64;
        drop(xd);
        // Soft-label variant is handled by `cross_entropy_soft`.
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            |_| {
                Box::new(move |g| {
                    let scale = g[0] / b as f64;
                    let mut dx = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        dx[r * c + y] -= 1.0;
                    }
                    dx.iter_mut().for_each(|v| *v *= scale);
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// Mean cross-entropy against full target distributions (B,C), as
    /// produced by mixup.
    pub fn cross_entropy_soft(&self, targets: &Tensor) -> Result<Tensor> {
        check_inputs("cross_entropy_soft", &[self, targets])?;
        if self.shape() != targets.shape() || self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_soft",
                lhs: self.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        let xd = self.data();
        let td = targets.data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &xd[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + i] = e;
                sum += e;
            }
            let lse = sum.ln() + max;
            for i in 0..c {
                probs[r * c + i] /= sum;
                loss += td[r * c + i] * (lse - row[i]);
            }
        }
        loss /= b as f64;
        drop(xd);
        let tgt = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone(), targets.clone()],
            |_| {
                Box::new(move |g| {
                    let scale = g[0] / b as f64;
                    let mut dx = vec![0.0; b * c];
                    for r in 0..b {
                        let tsum: f64 = tgt[r * c..(r + 1) * c].iter().sum();
                        for i in 0..c {
                            dx[r * c + i] =
                                scale * (tsum * probs[r * c + i] - tgt[r * c + i]);
                        }
                    }
                    vec![Some(dx), None]
                })
            },
        ))
    }

    /// Mean squared error against a target of identical shape.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        check_inputs("mse", &[self, target])?;
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = self.numel();
        let xd = self.data();
        let td = target.data();
        let loss = xd
            .iter()
            .zip(td.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        drop(xd);
        drop(td);
        let a = self.clone();
        let b = target.clone();
        let b_tracked = target.tracked();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone(), target.clone()],
            |_| {
                Box::new(move |g| {
                    let ad = a.data();
                    let bd = b.data();
                    let scale = 2.0 * g[0] / n as f64;
                    let da: Vec<f64> = ad
                        .iter()
                        .zip(bd.iter())
                        .map(|(x, t)| scale * (x - t))
                        .collect();
                    let db = b_tracked.then(|| da.iter().map(|v| -v).collect());
                    vec![Some(da), db]
                })
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let a = t(&[2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 7.0, 0.0, 1.0], &[3, 3]);
        let r = eye.matmul(&a).unwrap();
        assert_eq!(r.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[1.0, 2.0, 3.0], &[3, 1]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[1, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let x = t(&[0.0, 0.0, 0.0, 0.0], &[4]);
        let y = x.softmax_last().unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_shift() {
        // Zero variance: normalised values vanish, output equals the shift.
        let x = t(&[3.0; 5], &[5]);
        let gamma = t(&[2.0; 5], &[5]);
        let beta = t(&[0.5, -1.0, 0.0, 7.0, 2.0], &[5]);
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        for (yv, bv) in y.to_vec().iter().zip(beta.to_vec()) {
            assert!((yv - bv).abs() < 1e-9, "{yv} vs {bv}");
        }
    }

    #[test]
    fn concat_then_complementary_slices_roundtrip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0, 9.0, 10.0], &[2, 3]);
        let c = Tensor::concat(1, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        let a2 = c.slice(1, 0, 2).unwrap();
        let b2 = c.slice(1, 2, 3).unwrap();
        assert_eq!(a2.to_vec(), a.to_vec());
        assert_eq!(b2.to_vec(), b.to_vec());
    }

    #[test]
    fn pad_then_slice_identity() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let p = a.pad_last(7).unwrap();
        assert_eq!(p.shape(), &[2, 7]);
        let back = p.slice(1, 0, 3).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        // Padding itself is zero.
        assert_eq!(p.to_vec()[3..7], [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_scatters_gradient_to_selected_rows_only() {
        let table = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).trainable();
        let out = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        out.sum_all().unwrap().backward().unwrap();
        // Row 1 untouched, row 2 hit twice.
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn straight_through_copies_value_and_routes_grad() {
        let z_e = t(&[0.3, -0.2], &[2]).trainable();
        let z_q = t(&[1.0, 0.0], &[2]).trainable();
        let ste = Tensor::straight_through(&z_e, &z_q).unwrap();
        assert_eq!(ste.to_vec(), z_q.to_vec());
        ste.sum_all().unwrap().backward().unwrap();
        assert_eq!(z_e.grad().unwrap(), vec![1.0, 1.0]);
        assert!(z_q.grad().is_none());
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Three classes, label 1: loss = lse(z) - z_1.
        let logits = t(&[1.0, 2.0, 0.5], &[1, 3]);
        let loss = logits.cross_entropy(&[1]).unwrap().item();
        let lse = (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp()).ln();
        assert!((loss - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let x = t(&(0..24).map(|v| v as f64).collect::<Vec<_>>(), &[2, 3, 4]);
        let s = x.split_heads(2).unwrap();
        assert_eq!(s.shape(), &[4, 3, 2]);
        let m = s.merge_heads(2).unwrap();
        assert_eq!(m.to_vec(), x.to_vec());
    }

    #[test]
    fn transpose_roundtrip() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(y.transpose().unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = t(&(0..12).map(|v| v as f64).collect::<Vec<_>>(), &[2, 2, 3]);
        let b = t(&(0..18).map(|v| (v as f64) * 0.5).collect::<Vec<_>>(), &[2, 3, 3]);
        let c = a.bmm(&b).unwrap();
        for i in 0..2 {
            let ai = a.slice(0, i, 1).unwrap().reshape(&[2, 3]).unwrap();
            let bi = b.slice(0, i, 1).unwrap().reshape(&[3, 3]).unwrap();
            let ci = ai.matmul(&bi).unwrap();
            let got = c.slice(0, i, 1).unwrap().reshape(&[2, 3]).unwrap();
            for (x, y) in got.to_vec().iter().zip(ci.to_vec()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
