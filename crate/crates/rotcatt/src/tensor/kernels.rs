//! Raw array kernels behind the tape ops.
//!
//! Convolutions route through im2col + gemm (ndarray dispatches f32/f64 dot
//! to matrixmultiply). Everything is single-threaded and deterministic; the
//! normalization layers accumulate their statistics in f64.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4, Axis};

use super::Elem;

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds padded `k x k` windows into rows of shape (B*Ho*Wo, C*k*k).
pub fn im2col<T: Elem>(x: &ArrayView4<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let cols = c * k * k;
    let mut out = Array2::<T>::zeros((b * ho * wo, cols));
    let xs = x.as_slice().expect("im2col: standard layout");
    let os = out.as_slice_mut().unwrap();
    let mut row = 0usize;
    for bi in 0..b {
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad as isize;
                let rbase = row * cols;
                for ci in 0..c {
                    let cbase = rbase + ci * k * k;
                    let xcbase = (bi * c + ci) * h * w;
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let xrow = xcbase + y as usize * w;
                        let obase = cbase + ky * k;
                        for kx in 0..k {
                            let xcol = x0 + kx as isize;
                            if xcol < 0 || xcol >= w as isize {
                                continue;
                            }
                            os[obase + kx] = xs[xrow + xcol as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Scatter-adds im2col rows back into an image (adjoint of [`im2col`]).
pub fn col2im<T: Elem>(
    cols: &ArrayView2<T>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (b, c, h, w) = dims;
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let ncols = c * k * k;
    let mut out = Array4::<T>::zeros((b, c, h, w));
    let cs = cols.as_slice().expect("col2im: standard layout");
    let os = out.as_slice_mut().unwrap();
    let mut row = 0usize;
    for bi in 0..b {
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad as isize;
                let rbase = row * ncols;
                for ci in 0..c {
                    let cbase = rbase + ci * k * k;
                    let ocbase = (bi * c + ci) * h * w;
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let orow = ocbase + y as usize * w;
                        let ibase = cbase + ky * k;
                        for kx in 0..k {
                            let xcol = x0 + kx as isize;
                            if xcol < 0 || xcol >= w as isize {
                                continue;
                            }
                            os[orow + xcol as usize] = os[orow + xcol as usize] + cs[ibase + kx];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn rows_to_nchw<T: Elem>(rows: Array2<T>, b: usize, ho: usize, wo: usize, co: usize) -> Array4<T> {
    let y = rows.into_shape_with_order((b, ho, wo, co)).unwrap();
    y.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
}

fn nchw_to_rows<T: Elem>(x: &ArrayView4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let m = x.permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned();
    m.into_shape_with_order((b * h * w, c)).unwrap()
}

pub fn conv2d_forward<T: Elem>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    bias: Option<&ArrayView1<T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (b, _c, h, wd) = x.dim();
    let (co, ci, k, _) = w.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let col = im2col(x, k, stride, pad);
    let w2 = w.to_shape((co, ci * k * k)).unwrap();
    let mut y2 = col.dot(&w2.t());
    if let Some(bias) = bias {
        y2 += bias;
    }
    rows_to_nchw(y2, b, ho, wo, co)
}

/// Returns (dx, dw, db); each side is computed only when requested.
pub fn conv2d_backward<T: Elem>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView4<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<T>>, Option<Array4<T>>, Array1<T>) {
    let (co, ci, k, _) = w.dim();
    let dy2 = nchw_to_rows(dy);
    let db = dy2.sum_axis(Axis(0));
    let w2 = w.to_shape((co, ci * k * k)).unwrap();
    let dw = if need_dw {
        let col = im2col(x, k, stride, pad);
        let dw2 = dy2.t().dot(&col);
        Some(dw2.into_shape_with_order((co, ci, k, k)).unwrap())
    } else {
        None
    };
    let dx = if need_dx {
        let dcol = dy2.dot(&w2);
        Some(col2im(&dcol.view(), x.dim(), k, stride, pad))
    } else {
        None
    };
    (dx, dw, db)
}

/// Transposed convolution with a 2x2 kernel and stride 2 (non-overlapping).
/// Weight layout is (Cin, Cout, 2, 2).
pub fn conv_transpose2_forward<T: Elem>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    bias: Option<&ArrayView1<T>>,
) -> Array4<T> {
    let (b, ci, h, wd) = x.dim();
    let co = w.dim().1;
    let x2 = nchw_to_rows(x);
    let w2 = w.to_shape((ci, co * 4)).unwrap();
    let y2 = x2.dot(&w2);
    let y2s = y2.as_slice().unwrap();
    let mut out = Array4::<T>::zeros((b, co, 2 * h, 2 * wd));
    let os = out.as_slice_mut().unwrap();
    let (oh, ow) = (2 * h, 2 * wd);
    for bi in 0..b {
        for iy in 0..h {
            for ix in 0..wd {
                let r = ((bi * h + iy) * wd + ix) * co * 4;
                for c in 0..co {
                    let base = ((bi * co + c) * oh + 2 * iy) * ow + 2 * ix;
                    let v = &y2s[r + c * 4..r + c * 4 + 4];
                    os[base] = v[0];
                    os[base + 1] = v[1];
                    os[base + ow] = v[2];
                    os[base + ow + 1] = v[3];
                }
            }
        }
    }
    if let Some(bias) = bias {
        for (mut ch, &bc) in out.axis_iter_mut(Axis(1)).zip(bias.iter()) {
            ch.mapv_inplace(|v| v + bc);
        }
    }
    out
}

pub fn conv_transpose2_backward<T: Elem>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView4<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<T>>, Option<Array4<T>>, Array1<T>) {
    let (b, ci, h, wd) = x.dim();
    let co = w.dim().1;
    let (oh, ow) = (2 * h, 2 * wd);
    // gather dy into rows matching the forward scatter
    let mut dy2 = Array2::<T>::zeros((b * h * wd, co * 4));
    {
        let ds = dy.as_slice().expect("standard layout");
        let gs = dy2.as_slice_mut().unwrap();
        for bi in 0..b {
            for iy in 0..h {
                for ix in 0..wd {
                    let r = ((bi * h + iy) * wd + ix) * co * 4;
                    for c in 0..co {
                        let base = ((bi * co + c) * oh + 2 * iy) * ow + 2 * ix;
                        gs[r + c * 4] = ds[base];
                        gs[r + c * 4 + 1] = ds[base + 1];
                        gs[r + c * 4 + 2] = ds[base + ow];
                        gs[r + c * 4 + 3] = ds[base + ow + 1];
                    }
                }
            }
        }
    }
    let db = {
        let mut db = Array1::<T>::zeros(co);
        for c in 0..co {
            let mut acc = 0.0f64;
            for v in dy.index_axis(Axis(1), c).iter() {
                acc += v.to_f64();
            }
            db[c] = T::from_f64(acc);
        }
        db
    };
    let w2 = w.to_shape((ci, co * 4)).unwrap();
    let dx = if need_dx {
        let dx2 = dy2.dot(&w2.t());
        let dx = dx2.into_shape_with_order((b, h, wd, ci)).unwrap();
        Some(dx.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned())
    } else {
        None
    };
    let dw = if need_dw {
        let x2 = nchw_to_rows(x);
        let dw2 = x2.t().dot(&dy2);
        Some(dw2.into_shape_with_order((ci, co, 2, 2)).unwrap())
    } else {
        None
    };
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the per-output
/// argmax code (dy*2+dx); ties resolve to the first maximum in scan order.
pub fn maxpool2_forward<T: Elem>(x: &ArrayView4<T>) -> (Array4<T>, Vec<u8>) {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<T>::zeros((b, c, ho, wo));
    let mut idx = vec![0u8; b * c * ho * wo];
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().unwrap();
    let mut o = 0usize;
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..ho {
            let r0 = base + 2 * oy * w;
            let r1 = r0 + w;
            for ox in 0..wo {
                let xcol = 2 * ox;
                let cand = [xs[r0 + xcol], xs[r0 + xcol + 1], xs[r1 + xcol], xs[r1 + xcol + 1]];
                let mut best = 0usize;
                for j in 1..4 {
                    if cand[j] > cand[best] {
                        best = j;
                    }
                }
                ys[o] = cand[best];
                idx[o] = best as u8;
                o += 1;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<T: Elem>(
    dy: &ArrayView4<T>,
    idx: &[u8],
    in_dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c, h, w) = in_dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let ds = dy.as_slice().expect("standard layout");
    let os = dx.as_slice_mut().unwrap();
    let mut o = 0usize;
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let code = idx[o] as usize;
                let (dyy, dxx) = (code / 2, code % 2);
                let pos = base + (2 * oy + dyy) * w + 2 * ox + dxx;
                os[pos] = os[pos] + ds[o];
                o += 1;
            }
        }
    }
    dx
}

/// Source indices/weight for bilinear resize by an integer factor
/// (half-pixel centers, borders clamped).
pub fn lerp_table(in_size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out = in_size * factor;
    (0..out)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (in_size - 1) as f64 {
                (in_size - 1, in_size - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

pub fn bilinear_up_forward<T: Elem>(x: &ArrayView4<T>, factor: usize) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let ty = lerp_table(h, factor);
    let tx = lerp_table(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Array4::<T>::zeros((b, c, oh, ow));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * oh * ow;
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = ibase + y0 * w;
            let r1 = ibase + y1 * w;
            let orow = obase + oy * ow;
            let wy = T::from_f64(wy);
            let one = T::one();
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64(wx);
                let top = xs[r0 + x0] * (one - wx) + xs[r0 + x1] * wx;
                let bot = xs[r1 + x0] * (one - wx) + xs[r1 + x1] * wx;
                ys[orow + ox] = top * (one - wy) + bot * wy;
            }
        }
    }
    y
}

pub fn bilinear_up_backward<T: Elem>(
    dy: &ArrayView4<T>,
    in_dims: (usize, usize, usize, usize),
    factor: usize,
) -> Array4<T> {
    let (b, c, h, w) = in_dims;
    let ty = lerp_table(h, factor);
    let tx = lerp_table(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let ds = dy.as_slice().expect("standard layout");
    let os = dx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * oh * ow;
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = ibase + y0 * w;
            let r1 = ibase + y1 * w;
            let orow = obase + oy * ow;
            let wy = T::from_f64(wy);
            let one = T::one();
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = ds[orow + ox];
                let wx = T::from_f64(wx);
                let gt = g * (one - wy);
                let gb = g * wy;
                os[r0 + x0] = os[r0 + x0] + gt * (one - wx);
                os[r0 + x1] = os[r0 + x1] + gt * wx;
                os[r1 + x0] = os[r1 + x0] + gb * (one - wx);
                os[r1 + x1] = os[r1 + x1] + gb * wx;
            }
        }
    }
    dx
}

/// Per-channel batch statistics over (B, H, W), accumulated in f64.
/// Returns (mean, biased variance).
pub fn batch_stats<T: Elem>(x: &ArrayView4<T>) -> (Array1<T>, Array1<T>) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let xs = x.as_slice().expect("standard layout");
    let mut mean = Array1::<T>::zeros(c);
    let mut var = Array1::<T>::zeros(c);
    for ci in 0..c {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for &v in &xs[base..base + h * w] {
                let v = v.to_f64();
                s += v;
                s2 += v * v;
            }
        }
        let m = s / n;
        mean[ci] = T::from_f64(m);
        var[ci] = T::from_f64((s2 / n - m * m).max(0.0));
    }
    (mean, var)
}

/// Normalizes with the given per-channel mean/invstd and applies the affine.
pub fn batchnorm_apply<T: Elem>(
    x: &ArrayView4<T>,
    mean: &ArrayView1<T>,
    invstd: &ArrayView1<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((b, c, h, w));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let scale = gamma[ci] * invstd[ci];
            let shift = beta[ci] - mean[ci] * scale;
            for i in base..base + h * w {
                ys[i] = xs[i] * scale + shift;
            }
        }
    }
    y
}

/// Train-mode batchnorm input gradient plus the affine gradients.
pub fn batchnorm_train_backward<T: Elem>(
    x: &ArrayView4<T>,
    gamma: &ArrayView1<T>,
    mean: &ArrayView1<T>,
    invstd: &ArrayView1<T>,
    dy: &ArrayView4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let xs = x.as_slice().unwrap();
    let ds = dy.as_slice().unwrap();
    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let os = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        let m = mean[ci].to_f64();
        let istd = invstd[ci].to_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in base..base + h * w {
                let g = ds[i].to_f64();
                sum_dy += g;
                sum_dy_xhat += g * (xs[i].to_f64() - m) * istd;
            }
        }
        dbeta[ci] = T::from_f64(sum_dy);
        dgamma[ci] = T::from_f64(sum_dy_xhat);
        let k = gamma[ci].to_f64() * istd;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in base..base + h * w {
                let g = ds[i].to_f64();
                let xhat = (xs[i].to_f64() - m) * istd;
                os[i] = T::from_f64(k * (g - sum_dy / n - xhat * sum_dy_xhat / n));
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batchnorm gradients (normalization constants are fixed).
pub fn batchnorm_eval_backward<T: Elem>(
    x: &ArrayView4<T>,
    gamma: &ArrayView1<T>,
    mean: &ArrayView1<T>,
    invstd: &ArrayView1<T>,
    dy: &ArrayView4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (b, c, h, w) = x.dim();
    let xs = x.as_slice().unwrap();
    let ds = dy.as_slice().unwrap();
    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let os = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        let m = mean[ci].to_f64();
        let istd = invstd[ci].to_f64();
        let k = T::from_f64(gamma[ci].to_f64() * istd);
        let mut sdb = 0.0f64;
        let mut sdg = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in base..base + h * w {
                let g = ds[i].to_f64();
                sdb += g;
                sdg += g * (xs[i].to_f64() - m) * istd;
                os[i] = ds[i] * k;
            }
        }
        dbeta[ci] = T::from_f64(sdb);
        dgamma[ci] = T::from_f64(sdg);
    }
    (dx, dgamma, dbeta)
}

/// Layer norm over the last axis. Returns (y, row means, row invstds).
pub fn layernorm_forward<T: Elem>(
    x: &ArrayD<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    eps: f64,
) -> (ArrayD<T>, Vec<f64>, Vec<f64>) {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let xs = x.as_slice().expect("standard layout");
    let mut y = ArrayD::<T>::zeros(x.raw_dim());
    let ys = y.as_slice_mut().unwrap();
    let mut means = Vec::with_capacity(rows);
    let mut invstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let base = r * d;
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for &v in &xs[base..base + d] {
            let v = v.to_f64();
            s += v;
            s2 += v * v;
        }
        let m = s / d as f64;
        let var = (s2 / d as f64 - m * m).max(0.0);
        let istd = 1.0 / (var + eps).sqrt();
        means.push(m);
        invstds.push(istd);
        for j in 0..d {
            let xhat = (xs[base + j].to_f64() - m) * istd;
            ys[base + j] = T::from_f64(xhat) * gamma[j] + beta[j];
        }
    }
    (y, means, invstds)
}

pub fn layernorm_backward<T: Elem>(
    x: &ArrayD<T>,
    gamma: &ArrayView1<T>,
    means: &[f64],
    invstds: &[f64],
    dy: &ArrayD<T>,
) -> (ArrayD<T>, Array1<T>, Array1<T>) {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let xs = x.as_slice().unwrap();
    let ds = dy.as_slice().unwrap();
    let mut dx = ArrayD::<T>::zeros(x.raw_dim());
    let os = dx.as_slice_mut().unwrap();
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    for r in 0..rows {
        let base = r * d;
        let m = means[r];
        let istd = invstds[r];
        let mut mean_g = 0.0f64;
        let mut mean_gx = 0.0f64;
        for j in 0..d {
            let xhat = (xs[base + j].to_f64() - m) * istd;
            let g = ds[base + j].to_f64();
            dgamma[j] += g * xhat;
            dbeta[j] += g;
            let gg = g * gamma[j].to_f64();
            mean_g += gg;
            mean_gx += gg * xhat;
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            let xhat = (xs[base + j].to_f64() - m) * istd;
            let gg = ds[base + j].to_f64() * gamma[j].to_f64();
            os[base + j] = T::from_f64(istd * (gg - mean_g - xhat * mean_gx));
        }
    }
    let dgamma = Array1::from_vec(dgamma.into_iter().map(T::from_f64).collect());
    let dbeta = Array1::from_vec(dbeta.into_iter().map(T::from_f64).collect());
    (dx, dgamma, dbeta)
}

/// Numerically-stable softmax over the last axis.
pub fn softmax_last<T: Elem>(x: &ArrayD<T>) -> ArrayD<T> {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let xs = x.as_slice().expect("standard layout");
    let mut y = ArrayD::<T>::zeros(x.raw_dim());
    let ys = y.as_slice_mut().unwrap();
    for r in 0..rows {
        let base = r * d;
        let row = &xs[base..base + d];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for j in 0..d {
            let e = (row[j] - mx).exp();
            ys[base + j] = e;
            sum = sum + e;
        }
        for j in 0..d {
            ys[base + j] = ys[base + j] / sum;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    #[test]
    fn conv_identity_kernel() {
        let x = Array::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let y = conv2d_forward(&x.view(), &w.view(), None, 1, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_known_sum() {
        // all-ones 3x3 kernel on all-ones input, pad 1: interior 9, corner 4
        let x = Array4::<f64>::ones((1, 1, 3, 3));
        let w = Array4::<f64>::ones((1, 1, 3, 3));
        let y = conv2d_forward(&x.view(), &w.view(), None, 1, 1);
        assert_eq!(y[[0, 0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 6.0);
    }

    #[test]
    fn strided_conv_matches_patch_sum() {
        // kernel = stride = 2 with ones: sums of 2x2 blocks
        let x = Array::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let w = Array4::<f64>::ones((1, 1, 2, 2));
        let y = conv2d_forward(&x.view(), &w.view(), None, 2, 0);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 0.0 + 1.0 + 4.0 + 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 10.0 + 11.0 + 14.0 + 15.0);
    }

    #[test]
    fn maxpool_picks_max_and_routes_grad() {
        let x = array![[[[1.0, 2.0], [3.0, 4.0]]]].into_dyn();
        let x4 = x.view().into_dimensionality().unwrap();
        let (y, idx) = maxpool2_forward(&x4);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dy = Array4::<f64>::ones((1, 1, 1, 1));
        let dx = maxpool2_backward(&dy.view(), &idx, (1, 1, 2, 2));
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn upsample_doubles_dims_exactly() {
        let x = Array4::<f64>::ones((2, 3, 5, 7));
        let y = bilinear_up_forward(&x.view(), 2);
        assert_eq!(y.dim(), (2, 3, 10, 14));
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn conv_transpose_doubles_and_places_taps() {
        let x = array![[[[2.0]]]];
        let mut w = Array4::<f64>::zeros((1, 1, 2, 2));
        w[[0, 0, 0, 0]] = 1.0;
        w[[0, 0, 1, 1]] = 3.0;
        let y = conv_transpose2_forward(&x.view(), &w.view(), None);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 2.0);
        assert_eq!(y[[0, 0, 1, 1]], 6.0);
        assert_eq!(y[[0, 0, 0, 1]], 0.0);
    }

    #[test]
    fn softmax_rows_normalize() {
        let x = array![[1.0f64, 2.0, 3.0], [0.0, 0.0, 0.0]].into_dyn();
        let y = softmax_last(&x);
        for r in 0..2 {
            let s: f64 = (0..3).map(|j| y[[r, j]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((y[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }
}
