//! Forward/backward primitives: 3D convolution, group normalization, ReLU,
//! max pooling, trilinear upsampling, linear layers, and global pooling.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};

#[inline]
fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output spatial extents of a convolution or pooling window.
pub fn conv_out_spatial(
    spatial: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
) -> [usize; 3] {
    [
        out_extent(spatial[0], k, stride, pad),
        out_extent(spatial[1], k, stride, pad),
        out_extent(spatial[2], k, stride, pad),
    ]
}

/// y[b,co] = bias[co] + sum_ci sum_k x[b,ci,...] * w[co,ci,k...]
///
/// `x`: [B, Ci, D, H, W]; `w`: [Co, Ci, K, K, K]; `bias`: [Co].
pub fn conv3d_forward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let [bsz, ci, d, h, wd] = x.dim5();
    let ws = w.shape();
    assert_eq!(ws.len(), 5);
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], ci, "weight Ci mismatch");
    assert_eq!(ws[3], k);
    assert_eq!(ws[4], k);
    assert_eq!(bias.len(), co);
    let [od, oh, ow] = conv_out_spatial([d, h, wd], k, stride, pad);
    let mut y = Tensor::<F>::zeros(&[bsz, co, od, oh, ow]);
    let slab = od * oh * ow;
    let xd = x.data();
    let wdat = w.data();
    let bdat = bias.data();

    y.data_mut()
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(slab_idx, y_slab)| {
            let b = slab_idx / co;
            let c_out = slab_idx % co;
            for v in y_slab.iter_mut() {
                *v = bdat[c_out];
            }
            for c_in in 0..ci {
                let x_base = (b * ci + c_in) * d * h * wd;
                let w_base = (c_out * ci + c_in) * k * k * k;
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wdat[w_base + (kd * k + kh) * k + kw];
                            if wv == F::zero() {
                                continue;
                            }
                            for o_d in 0..od {
                                let id = (o_d * stride + kd) as isize - pad as isize;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                for o_h in 0..oh {
                                    let ih = (o_h * stride + kh) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let x_row = x_base + (id as usize * h + ih as usize) * wd;
                                    let y_row = (o_d * oh + o_h) * ow;
                                    // smallest output index with an in-bounds tap
                                    let lo = if pad > kw {
                                        (pad - kw + stride - 1) / stride
                                    } else {
                                        0
                                    };
                                    for o_w in lo..ow {
                                        let iw = (o_w * stride + kw) as isize - pad as isize;
                                        if iw < 0 {
                                            continue;
                                        }
                                        if iw >= wd as isize {
                                            break;
                                        }
                                        y_slab[y_row + o_w] += wv * xd[x_row + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Gradients of [`conv3d_forward`] with respect to input, weights, and bias.
pub fn conv3d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let [bsz, ci, d, h, wd] = x.dim5();
    let ws = w.shape().to_vec();
    let (co, k) = (ws[0], ws[2]);
    let [_, _, od, oh, ow] = dy.dim5();
    let xd = x.data();
    let wdat = w.data();
    let dyd = dy.data();

    // bias gradient: fixed summation order
    let mut db = Tensor::<F>::zeros(&[co]);
    {
        let dbd = db.data_mut();
        for b in 0..bsz {
            for c_out in 0..co {
                let base = (b * co + c_out) * od * oh * ow;
                let mut acc = F::zero();
                for i in 0..od * oh * ow {
                    acc += dyd[base + i];
                }
                dbd[c_out] += acc;
            }
        }
    }

    // weight gradient: one task per output channel
    let mut dw = Tensor::<F>::zeros(&ws);
    let w_slab = ci * k * k * k;
    dw.data_mut()
        .par_chunks_mut(w_slab)
        .enumerate()
        .for_each(|(c_out, dw_slab)| {
            for b in 0..bsz {
                let dy_base = (b * co + c_out) * od * oh * ow;
                for c_in in 0..ci {
                    let x_base = (b * ci + c_in) * d * h * wd;
                    for kd in 0..k {
                        for kh in 0..k {
                            for kw in 0..k {
                                let mut acc = F::zero();
                                for o_d in 0..od {
                                    let id = (o_d * stride + kd) as isize - pad as isize;
                                    if id < 0 || id >= d as isize {
                                        continue;
                                    }
                                    for o_h in 0..oh {
                                        let ih = (o_h * stride + kh) as isize - pad as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let x_row = x_base + (id as usize * h + ih as usize) * wd;
                                        let dy_row = dy_base + (o_d * oh + o_h) * ow;
                                        for o_w in 0..ow {
                                            let iw =
                                                (o_w * stride + kw) as isize - pad as isize;
                                            if iw < 0 || iw >= wd as isize {
                                                continue;
                                            }
                                            acc += dyd[dy_row + o_w] * xd[x_row + iw as usize];
                                        }
                                    }
                                }
                                dw_slab[(c_in * k * k + kd * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            }
        });

    // input gradient: one task per batch element
    let mut dx = Tensor::<F>::zeros(&[bsz, ci, d, h, wd]);
    let x_slab = ci * d * h * wd;
    dx.data_mut()
        .par_chunks_mut(x_slab)
        .enumerate()
        .for_each(|(b, dx_slab)| {
            for c_out in 0..co {
                let dy_base = (b * co + c_out) * od * oh * ow;
                for c_in in 0..ci {
                    let w_base = (c_out * ci + c_in) * k * k * k;
                    let dx_base = c_in * d * h * wd;
                    for kd in 0..k {
                        for kh in 0..k {
                            for kw in 0..k {
                                let wv = wdat[w_base + (kd * k + kh) * k + kw];
                                if wv == F::zero() {
                                    continue;
                                }
                                for o_d in 0..od {
                                    let id = (o_d * stride + kd) as isize - pad as isize;
                                    if id < 0 || id >= d as isize {
                                        continue;
                                    }
                                    for o_h in 0..oh {
                                        let ih = (o_h * stride + kh) as isize - pad as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let dx_row =
                                            dx_base + (id as usize * h + ih as usize) * wd;
                                        let dy_row = dy_base + (o_d * oh + o_h) * ow;
                                        for o_w in 0..ow {
                                            let iw =
                                                (o_w * stride + kw) as isize - pad as isize;
                                            if iw < 0 || iw >= wd as isize {
                                                continue;
                                            }
                                            dx_slab[dx_row + iw as usize] +=
                                                wv * dyd[dy_row + o_w];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    (dx, dw, db)
}

/// Per-(sample, group) statistics cached by the group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

/// Group normalization over channel groups and all spatial positions.
/// `x`: [B, C, ...]; `gamma`, `beta`: [C].
pub fn group_norm_forward<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    eps: f64,
) -> (Tensor<F>, GroupNormCache) {
    let shape = x.shape();
    let (bsz, c) = (shape[0], shape[1]);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let spatial: usize = shape[2..].iter().product();
    let gc = c / groups;
    let n = gc * spatial;
    let xd = x.data();
    let mut y = Tensor::<F>::zeros(shape);
    let yd = y.data_mut();
    let mut mean = vec![0.0f64; bsz * groups];
    let mut inv_std = vec![0.0f64; bsz * groups];
    for b in 0..bsz {
        for g in 0..groups {
            let start = (b * c + g * gc) * spatial;
            let mut sum = 0.0f64;
            for i in 0..n {
                sum += xd[start + i].as_f64();
            }
            let mu = sum / n as f64;
            let mut var = 0.0f64;
            for i in 0..n {
                let dv = xd[start + i].as_f64() - mu;
                var += dv * dv;
            }
            var /= n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            mean[b * groups + g] = mu;
            inv_std[b * groups + g] = istd;
            for ch in 0..gc {
                let cidx = g * gc + ch;
                let ga = gamma.data()[cidx].as_f64();
                let be = beta.data()[cidx].as_f64();
                let row = (b * c + cidx) * spatial;
                for i in 0..spatial {
                    let xn = (xd[row + i].as_f64() - mu) * istd;
                    yd[row + i] = F::of_f64(xn * ga + be);
                }
            }
        }
    }
    (
        y,
        GroupNormCache {
            mean,
            inv_std,
            groups,
        },
    )
}

/// Gradients of [`group_norm_forward`].
pub fn group_norm_backward<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    cache: &GroupNormCache,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let shape = x.shape();
    let (bsz, c) = (shape[0], shape[1]);
    let groups = cache.groups;
    let gc = c / groups;
    let spatial: usize = shape[2..].iter().product();
    let n = gc * spatial;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::<F>::zeros(shape);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..bsz {
        for g in 0..groups {
            let mu = cache.mean[b * groups + g];
            let istd = cache.inv_std[b * groups + g];
            // first pass: group means of gamma*dy and gamma*dy*xhat
            let mut mean_gdy = 0.0f64;
            let mut mean_gdy_xhat = 0.0f64;
            for ch in 0..gc {
                let cidx = g * gc + ch;
                let ga = gamma.data()[cidx].as_f64();
                let row = (b * c + cidx) * spatial;
                for i in 0..spatial {
                    let xhat = (xd[row + i].as_f64() - mu) * istd;
                    let dyv = dyd[row + i].as_f64();
                    let gdy = ga * dyv;
                    mean_gdy += gdy;
                    mean_gdy_xhat += gdy * xhat;
                    dgamma[cidx] += dyv * xhat;
                    dbeta[cidx] += dyv;
                }
            }
            mean_gdy /= n as f64;
            mean_gdy_xhat /= n as f64;
            for ch in 0..gc {
                let cidx = g * gc + ch;
                let ga = gamma.data()[cidx].as_f64();
                let row = (b * c + cidx) * spatial;
                for i in 0..spatial {
                    let xhat = (xd[row + i].as_f64() - mu) * istd;
                    let gdy = ga * dyd[row + i].as_f64();
                    dx.data_mut()[row + i] =
                        F::of_f64(istd * (gdy - mean_gdy - xhat * mean_gdy_xhat));
                }
            }
        }
    }
    let dgamma = Tensor::from_vec(&[c], dgamma.into_iter().map(F::of_f64).collect());
    let dbeta = Tensor::from_vec(&[c], dbeta.into_iter().map(F::of_f64).collect());
    (dx, dgamma, dbeta)
}

pub fn relu_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    y
}

/// `y` is the ReLU output; gradient passes where the output is positive.
pub fn relu_backward<F: Real>(dy: &Tensor<F>, y: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (d, out) in dx.data_mut().iter_mut().zip(y.data()) {
        if *out <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

/// Max pooling; returns output and the flat input index of each maximum
/// (first maximum in scan order wins, so ties are deterministic).
pub fn maxpool3d_forward<F: Real>(
    x: &Tensor<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, Vec<usize>) {
    let [bsz, c, d, h, w] = x.dim5();
    let [od, oh, ow] = conv_out_spatial([d, h, w], k, stride, pad);
    let mut y = Tensor::<F>::zeros(&[bsz, c, od, oh, ow]);
    let mut argmax = vec![0usize; bsz * c * od * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    let mut out_idx = 0usize;
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * d * h * w;
            for o_d in 0..od {
                for o_h in 0..oh {
                    for o_w in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for kd in 0..k {
                            let id = (o_d * stride + kd) as isize - pad as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for kh in 0..k {
                                let ih = (o_h * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (o_w * stride + kw) as isize - pad as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let idx = base
                                        + (id as usize * h + ih as usize) * w
                                        + iw as usize;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        yd[out_idx] = best;
                        argmax[out_idx] = best_idx;
                        out_idx += 1;
                    }
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool3d_backward<F: Real>(
    dy: &Tensor<F>,
    argmax: &[usize],
    in_shape: &[usize],
) -> Tensor<F> {
    let mut dx = Tensor::<F>::zeros(in_shape);
    let dxd = dx.data_mut();
    for (i, &idx) in argmax.iter().enumerate() {
        dxd[idx] += dy.data()[i];
    }
    dx
}

#[inline]
fn lin_coords(out: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    // align_corners = false mapping, clamped to the valid range
    let scale = in_len as f64 / out_len as f64;
    let pos = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Trilinear resize of a 5D tensor to the target spatial extents.
pub fn upsample_trilinear_forward<F: Real>(x: &Tensor<F>, out_sp: [usize; 3]) -> Tensor<F> {
    let [bsz, c, d, h, w] = x.dim5();
    let [od, oh, ow] = out_sp;
    let mut y = Tensor::<F>::zeros(&[bsz, c, od, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    let mut out_idx = 0usize;
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * d * h * w;
            for o_d in 0..od {
                let (d0, d1, td) = lin_coords(o_d, od, d);
                for o_h in 0..oh {
                    let (h0, h1, th) = lin_coords(o_h, oh, h);
                    for o_w in 0..ow {
                        let (w0, w1, tw) = lin_coords(o_w, ow, w);
                        let g = |di: usize, hi: usize, wi: usize| {
                            xd[base + (di * h + hi) * w + wi].as_f64()
                        };
                        let v = g(d0, h0, w0) * (1.0 - td) * (1.0 - th) * (1.0 - tw)
                            + g(d1, h0, w0) * td * (1.0 - th) * (1.0 - tw)
                            + g(d0, h1, w0) * (1.0 - td) * th * (1.0 - tw)
                            + g(d1, h1, w0) * td * th * (1.0 - tw)
                            + g(d0, h0, w1) * (1.0 - td) * (1.0 - th) * tw
                            + g(d1, h0, w1) * td * (1.0 - th) * tw
                            + g(d0, h1, w1) * (1.0 - td) * th * tw
                            + g(d1, h1, w1) * td * th * tw;
                        yd[out_idx] = F::of_f64(v);
                        out_idx += 1;
                    }
                }
            }
        }
    }
    y
}

/// Transpose of [`upsample_trilinear_forward`].
pub fn upsample_trilinear_backward<F: Real>(dy: &Tensor<F>, in_sp: [usize; 3]) -> Tensor<F> {
    let [bsz, c, od, oh, ow] = dy.dim5();
    let [d, h, w] = in_sp;
    let mut dx = Tensor::<F>::zeros(&[bsz, c, d, h, w]);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let mut out_idx = 0usize;
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * d * h * w;
            for o_d in 0..od {
                let (d0, d1, td) = lin_coords(o_d, od, d);
                for o_h in 0..oh {
                    let (h0, h1, th) = lin_coords(o_h, oh, h);
                    for o_w in 0..ow {
                        let (w0, w1, tw) = lin_coords(o_w, ow, w);
                        let g = dyd[out_idx].as_f64();
                        out_idx += 1;
                        let mut add = |di: usize, hi: usize, wi: usize, wt: f64| {
                            let idx = base + (di * h + hi) * w + wi;
                            dxd[idx] += F::of_f64(g * wt);
                        };
                        add(d0, h0, w0, (1.0 - td) * (1.0 - th) * (1.0 - tw));
                        add(d1, h0, w0, td * (1.0 - th) * (1.0 - tw));
                        add(d0, h1, w0, (1.0 - td) * th * (1.0 - tw));
                        add(d1, h1, w0, td * th * (1.0 - tw));
                        add(d0, h0, w1, (1.0 - td) * (1.0 - th) * tw);
                        add(d1, h0, w1, td * (1.0 - th) * tw);
                        add(d0, h1, w1, (1.0 - td) * th * tw);
                        add(d1, h1, w1, td * th * tw);
                    }
                }
            }
        }
    }
    dx
}

/// y[b,o] = bias[o] + sum_i x[b,i] * w[o,i]
pub fn linear_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    let [bsz, inp] = x.dim2();
    let [out, win] = w.dim2();
    assert_eq!(inp, win);
    let mut y = Tensor::<F>::zeros(&[bsz, out]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for b in 0..bsz {
        for o in 0..out {
            let mut acc = bias.data()[o];
            let wrow = o * inp;
            let xrow = b * inp;
            for i in 0..inp {
                acc += wd[wrow + i] * xd[xrow + i];
            }
            yd[b * out + o] = acc;
        }
    }
    y
}

pub fn linear_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let [bsz, inp] = x.dim2();
    let [out, _] = w.dim2();
    let mut dx = Tensor::<F>::zeros(&[bsz, inp]);
    let mut dw = Tensor::<F>::zeros(&[out, inp]);
    let mut db = Tensor::<F>::zeros(&[out]);
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    for b in 0..bsz {
        for o in 0..out {
            let g = dyd[b * out + o];
            db.data_mut()[o] += g;
            let wrow = o * inp;
            let xrow = b * inp;
            for i in 0..inp {
                dx.data_mut()[xrow + i] += g * wd[wrow + i];
                dw.data_mut()[wrow + i] += g * xd[xrow + i];
            }
        }
    }
    (dx, dw, db)
}

/// Mean over all spatial positions: [B, C, D, H, W] -> [B, C].
pub fn global_avg_pool_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let [bsz, c, d, h, w] = x.dim5();
    let n = d * h * w;
    let mut y = Tensor::<F>::zeros(&[bsz, c]);
    let xd = x.data();
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * n;
            let mut acc = 0.0f64;
            for i in 0..n {
                acc += xd[base + i].as_f64();
            }
            y.data_mut()[b * c + ch] = F::of_f64(acc / n as f64);
        }
    }
    y
}

pub fn global_avg_pool_backward<F: Real>(dy: &Tensor<F>, in_shape: &[usize]) -> Tensor<F> {
    let [bsz, c, d, h, w] = [
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    ];
    let n = d * h * w;
    let mut dx = Tensor::<F>::zeros(in_shape);
    let inv = F::of_f64(1.0 / n as f64);
    for b in 0..bsz {
        for ch in 0..c {
            let g = dy.data()[b * c + ch] * inv;
            let base = (b * c + ch) * n;
            for i in 0..n {
                dx.data_mut()[base + i] = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Projected loss L = sum(y * proj); dL/dy = proj.
    fn fd_check<Fwd: Fn(&Tensor<f64>) -> Tensor<f64>>(
        x: &Tensor<f64>,
        proj: &Tensor<f64>,
        analytic_dx: &Tensor<f64>,
        forward: Fwd,
        tol: f64,
    ) {
        let step = 1e-5;
        let loss = |t: &Tensor<f64>| -> f64 {
            forward(t)
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..24 {
            let i = rng.random_range(0..x.len());
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let analytic = analytic_dx.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < tol,
                "elem {i}: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv3d_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8, 8]);
        let w = Tensor::<f64>::zeros(&[4, 1, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert_eq!(conv3d_forward(&x, &w, &b, 2, 1).shape(), &[1, 4, 4, 4, 4]);
        assert_eq!(conv3d_forward(&x, &w, &b, 1, 1).shape(), &[1, 4, 8, 8, 8]);
        let w1 = Tensor::<f64>::zeros(&[2, 1, 1, 1, 1]);
        let b1 = Tensor::<f64>::zeros(&[2]);
        assert_eq!(conv3d_forward(&x, &w1, &b1, 1, 0).shape(), &[1, 2, 8, 8, 8]);
    }

    #[test]
    fn conv3d_known_value() {
        // single 1x1x1 weight of 2.0, bias 0.5
        let x = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![3.0, -1.0]);
        let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![2.0]);
        let b = Tensor::from_vec(&[1], vec![0.5]);
        let y = conv3d_forward(&x, &w, &b, 1, 0);
        assert_eq!(y.data(), &[6.5, -1.5]);
    }

    #[test]
    fn conv3d_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 3, 7)] {
            let x = randn(&mut rng, &[2, 2, 6, 6, 6]);
            let w = randn(&mut rng, &[3, 2, k, k, k]);
            let b = randn(&mut rng, &[3]);
            let y = conv3d_forward(&x, &w, &b, stride, pad);
            let proj = randn(&mut rng, y.shape());
            let (dx, dw, db) = conv3d_backward(&x, &w, &proj, stride, pad);
            fd_check(&x, &proj, &dx, |t| conv3d_forward(t, &w, &b, stride, pad), 1e-5);
            fd_check(&w, &proj, &dw, |t| conv3d_forward(&x, t, &b, stride, pad), 1e-5);
            fd_check(&b, &proj, &db, |t| conv3d_forward(&x, &w, t, stride, pad), 1e-5);
        }
    }

    #[test]
    fn group_norm_normalizes_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[2, 4, 3, 3, 3]);
        let gamma = Tensor::<f64>::full(&[4], 1.0);
        let beta = Tensor::<f64>::zeros(&[4]);
        let (y, _) = group_norm_forward(&x, &gamma, &beta, 2, 1e-5);
        // per (b, g) mean ~ 0, var ~ 1
        let spatial = 27;
        for b in 0..2 {
            for g in 0..2 {
                let start = (b * 4 + g * 2) * spatial;
                let vals = &y.data()[start..start + 2 * spatial];
                let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let var: f64 =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }

        let gamma = randn(&mut rng, &[4]);
        let beta = randn(&mut rng, &[4]);
        let (y, cache) = group_norm_forward(&x, &gamma, &beta, 2, 1e-5);
        let proj = randn(&mut rng, y.shape());
        let (dx, dgamma, dbeta) = group_norm_backward(&x, &gamma, &cache, &proj);
        fd_check(
            &x,
            &proj,
            &dx,
            |t| group_norm_forward(t, &gamma, &beta, 2, 1e-5).0,
            1e-4,
        );
        fd_check(
            &gamma,
            &proj,
            &dgamma,
            |t| group_norm_forward(&x, t, &beta, 2, 1e-5).0,
            1e-5,
        );
        fd_check(
            &beta,
            &proj,
            &dbeta,
            |t| group_norm_forward(&x, &gamma, t, 2, 1e-5).0,
            1e-5,
        );
    }

    #[test]
    fn relu_and_backward() {
        let x = Tensor::from_vec(&[1, 4], vec![-1.0, 0.0, 0.5, 2.0]);
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let dy = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 1.0, 1.0]);
        let dx = relu_backward(&dy, &y);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 2, 6, 6, 6]);
        let (y, argmax) = maxpool3d_forward(&x, 3, 2, 1);
        assert_eq!(y.shape(), &[2, 2, 3, 3, 3]);
        let proj = randn(&mut rng, y.shape());
        let dx = maxpool3d_backward(&proj, &argmax, x.shape());
        fd_check(&x, &proj, &dx, |t| maxpool3d_forward(t, 3, 2, 1).0, 1e-4);
    }

    #[test]
    fn upsample_gradients_match_fd_and_preserve_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 2, 3, 3, 3]);
        let constant = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 0.7);
        let up = upsample_trilinear_forward(&constant, [5, 5, 5]);
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let y = upsample_trilinear_forward(&x, [6, 6, 6]);
        let proj = randn(&mut rng, y.shape());
        let dx = upsample_trilinear_backward(&proj, [3, 3, 3]);
        fd_check(&x, &proj, &dx, |t| upsample_trilinear_forward(t, [6, 6, 6]), 1e-5);
    }

    #[test]
    fn linear_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 5]);
        let w = randn(&mut rng, &[4, 5]);
        let b = randn(&mut rng, &[4]);
        let y = linear_forward(&x, &w, &b);
        assert_eq!(y.shape(), &[3, 4]);
        let proj = randn(&mut rng, y.shape());
        let (dx, dw, db) = linear_backward(&x, &w, &proj);
        fd_check(&x, &proj, &dx, |t| linear_forward(t, &w, &b), 1e-6);
        fd_check(&w, &proj, &dw, |t| linear_forward(&x, t, &b), 1e-6);
        fd_check(&b, &proj, &db, |t| linear_forward(&x, &w, t), 1e-6);
    }

    #[test]
    fn global_pool_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[2, 3, 2, 2, 2]);
        let y = global_avg_pool_forward(&x);
        assert_eq!(y.shape(), &[2, 3]);
        let proj = randn(&mut rng, y.shape());
        let dx = global_avg_pool_backward(&proj, x.shape());
        fd_check(&x, &proj, &dx, |t| global_avg_pool_forward(t), 1e-6);
    }
}
