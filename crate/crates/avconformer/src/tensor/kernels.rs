//! Raw compute kernels on row-major slices, generic over the scalar.
//!
//! Forward and backward passes are separate pure functions so the autodiff
//! layer stays thin. Backward kernels are written gather-style (each output
//! element owned by exactly one writer), which keeps rayon parallelism
//! deterministic for any thread count.

use rayon::prelude::*;

use super::Real;

pub(crate) const PAR_THRESHOLD: usize = 16 * 1024;

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

// ── Matmul ─────────────────────────────────────────────────────────────

/// Batched matmul: a is (bm, m, p); b is (bb, p, q), or (bb, q, p) when
/// `transpose_b`. bb must equal bm or 1 (broadcast). Output (bm, m, q).
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Real>(
    a: &[F],
    b: &[F],
    bm: usize,
    m: usize,
    p: usize,
    q: usize,
    bb: usize,
    transpose_b: bool,
    out: &mut [F],
) {
    debug_assert_eq!(out.len(), bm * m * q);
    let body = |(row, out_row): (usize, &mut [F])| {
        let batch = row / m;
        let i = row % m;
        let a_row = &a[batch * m * p + i * p..][..p];
        let b_off = if bb == 1 { 0 } else { batch * p * q };
        if transpose_b {
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[b_off + j * p..][..p];
                let mut s = F::ZERO;
                for k in 0..p {
                    s += a_row[k] * b_row[k];
                }
                *o = s;
            }
        } else {
            out_row.fill(F::ZERO);
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b[b_off + k * q..][..q];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
    };
    if bm * m * q >= PAR_THRESHOLD {
        out.par_chunks_mut(q).enumerate().for_each(body);
    } else {
        out.chunks_mut(q).enumerate().for_each(body);
    }
}

// ── Convolution ────────────────────────────────────────────────────────

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output spatial extents per the floor formula, or None if the kernel
/// exceeds the padded input on some axis.
pub fn conv_out_shape(
    input: &[usize],
    kernel: &[usize],
    stride: &[usize],
    pad: &[usize],
) -> Option<Vec<usize>> {
    input
        .iter()
        .zip(kernel)
        .zip(stride)
        .zip(pad)
        .map(|(((&i, &k), &s), &p)| conv_out_len(i, k, s, p))
        .collect()
}

/// conv1d forward with groups. x (n, cin, l); w (cout, cin/g, k);
/// bias (cout) optional; out (n, cout, lo).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd<F: Real>(
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    out: &mut [F],
) {
    let lo = conv_out_len(l, k, stride, pad).expect("checked by caller");
    let cpg_in = cin / groups;
    let cpg_out = cout / groups;
    let body = |(row, o_row): (usize, &mut [F])| {
        let b = row / cout;
        let co = row % cout;
        let g = co / cpg_out;
        let bias_v = bias.map_or(F::ZERO, |bv| bv[co]);
        for (oi, o) in o_row.iter_mut().enumerate() {
            let mut s = bias_v;
            for ci_local in 0..cpg_in {
                let ci = g * cpg_in + ci_local;
                let x_row = &x[(b * cin + ci) * l..][..l];
                let w_row = &w[(co * cpg_in + ci_local) * k..][..k];
                for (ki, &wv) in w_row.iter().enumerate() {
                    let xi = oi * stride + ki;
                    if xi >= pad && xi - pad < l {
                        s += wv * x_row[xi - pad];
                    }
                }
            }
            *o = s;
        }
    };
    if n * cout * lo >= PAR_THRESHOLD {
        out.par_chunks_mut(lo).enumerate().for_each(body);
    } else {
        out.chunks_mut(lo).enumerate().for_each(body);
    }
}

/// Gradients for conv1d. Backward w.r.t. x gathers over output positions
/// with o = (xi + pad - ki) / stride.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd<F: Real>(
    x: &[F],
    w: &[F],
    gout: &[F],
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    gx: &mut [F],
    gw: &mut [F],
    gbias: Option<&mut [F]>,
) {
    let lo = conv_out_len(l, k, stride, pad).unwrap();
    let cpg_in = cin / groups;
    let cpg_out = cout / groups;
    gx.chunks_mut(l).enumerate().for_each(|(row, gx_row)| {
        let b = row / cin;
        let ci = row % cin;
        let g = ci / cpg_in;
        let ci_local = ci % cpg_in;
        for (xi, gxe) in gx_row.iter_mut().enumerate() {
            let mut s = F::ZERO;
            for ki in 0..k {
                let shifted = xi + pad;
                if shifted < ki {
                    continue;
                }
                let num = shifted - ki;
                if num % stride != 0 {
                    continue;
                }
                let oi = num / stride;
                if oi >= lo {
                    continue;
                }
                for co_local in 0..cpg_out {
                    let co = g * cpg_out + co_local;
                    s += w[(co * cpg_in + ci_local) * k + ki] * gout[(b * cout + co) * lo + oi];
                }
            }
            *gxe += s;
        }
    });
    for co in 0..cout {
        let g = co / cpg_out;
        for ci_local in 0..cpg_in {
            let ci = g * cpg_in + ci_local;
            for ki in 0..k {
                let mut s = F::ZERO;
                for b in 0..n {
                    let x_row = &x[(b * cin + ci) * l..][..l];
                    let go_row = &gout[(b * cout + co) * lo..][..lo];
                    for (oi, &go) in go_row.iter().enumerate() {
                        let xi = oi * stride + ki;
                        if xi >= pad && xi - pad < l {
                            s += go * x_row[xi - pad];
                        }
                    }
                }
                gw[(co * cpg_in + ci_local) * k + ki] += s;
            }
        }
    }
    if let Some(gb) = gbias {
        for b in 0..n {
            for co in 0..cout {
                let go_row = &gout[(b * cout + co) * lo..][..lo];
                for &go in go_row {
                    gb[co] += go;
                }
            }
        }
    }
}

/// conv2d forward. x (n, cin, h, w); weight (cout, cin/g, kh, kw).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<F: Real>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    n: usize,
    cin: usize,
    (h, w): (usize, usize),
    cout: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    groups: usize,
    out: &mut [F],
) {
    let ho = conv_out_len(h, kh, sh, ph).unwrap();
    let wo = conv_out_len(w, kw, sw, pw).unwrap();
    let cpg_in = cin / groups;
    let cpg_out = cout / groups;
    let body = |(plane, o_plane): (usize, &mut [F])| {
        let b = plane / cout;
        let co = plane % cout;
        let g = co / cpg_out;
        let bias_v = bias.map_or(F::ZERO, |bv| bv[co]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias_v;
                for ci_local in 0..cpg_in {
                    let ci = g * cpg_in + ci_local;
                    let x_plane = &x[((b * cin + ci) * h) * w..][..h * w];
                    let w_plane = &weight[((co * cpg_in + ci_local) * kh) * kw..][..kh * kw];
                    for ky in 0..kh {
                        let iy = oy * sh + ky;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let x_row = &x_plane[(iy - ph) * w..][..w];
                        let w_row = &w_plane[ky * kw..][..kw];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let ix = ox * sw + kx;
                            if ix >= pw && ix - pw < w {
                                s += wv * x_row[ix - pw];
                            }
                        }
                    }
                }
                o_plane[oy * wo + ox] = s;
            }
        }
    };
    if n * cout * ho * wo >= PAR_THRESHOLD {
        out.par_chunks_mut(ho * wo).enumerate().for_each(body);
    } else {
        out.chunks_mut(ho * wo).enumerate().for_each(body);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<F: Real>(
    x: &[F],
    weight: &[F],
    gout: &[F],
    n: usize,
    cin: usize,
    (h, w): (usize, usize),
    cout: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    groups: usize,
    gx: &mut [F],
    gw: &mut [F],
    gbias: Option<&mut [F]>,
) {
    let ho = conv_out_len(h, kh, sh, ph).unwrap();
    let wo = conv_out_len(w, kw, sw, pw).unwrap();
    let cpg_in = cin / groups;
    let cpg_out = cout / groups;
    let gx_body = |(plane, gx_plane): (usize, &mut [F])| {
        let b = plane / cin;
        let ci = plane % cin;
        let g = ci / cpg_in;
        let ci_local = ci % cpg_in;
        for iy in 0..h {
            for ix in 0..w {
                let mut s = F::ZERO;
                for ky in 0..kh {
                    let sy = iy + ph;
                    if sy < ky || (sy - ky) % sh != 0 {
                        continue;
                    }
                    let oy = (sy - ky) / sh;
                    if oy >= ho {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = ix + pw;
                        if sx < kx || (sx - kx) % sw != 0 {
                            continue;
                        }
                        let ox = (sx - kx) / sw;
                        if ox >= wo {
                            continue;
                        }
                        for co_local in 0..cpg_out {
                            let co = g * cpg_out + co_local;
                            s += weight[((co * cpg_in + ci_local) * kh + ky) * kw + kx]
                                * gout[((b * cout + co) * ho + oy) * wo + ox];
                        }
                    }
                }
                gx_plane[iy * w + ix] += s;
            }
        }
    };
    if n * cin * h * w >= PAR_THRESHOLD {
        gx.par_chunks_mut(h * w).enumerate().for_each(gx_body);
    } else {
        gx.chunks_mut(h * w).enumerate().for_each(gx_body);
    }
    let gw_body = |(widx, gw_e): (usize, &mut F)| {
        let kx = widx % kw;
        let ky = (widx / kw) % kh;
        let ci_local = (widx / (kw * kh)) % cpg_in;
        let co = widx / (kw * kh * cpg_in);
        let g = co / cpg_out;
        let ci = g * cpg_in + ci_local;
        let mut s = F::ZERO;
        for b in 0..n {
            let x_plane = &x[((b * cin + ci) * h) * w..][..h * w];
            let go_plane = &gout[((b * cout + co) * ho) * wo..][..ho * wo];
            for oy in 0..ho {
                let iy = oy * sh + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                for ox in 0..wo {
                    let ix = ox * sw + kx;
                    if ix >= pw && ix - pw < w {
                        s += go_plane[oy * wo + ox] * x_plane[(iy - ph) * w + ix - pw];
                    }
                }
            }
        }
        *gw_e += s;
    };
    if gw.len() * n * ho * wo >= PAR_THRESHOLD {
        gw.par_iter_mut().enumerate().for_each(gw_body);
    } else {
        gw.iter_mut().enumerate().for_each(gw_body);
    }
    if let Some(gb) = gbias {
        for b in 0..n {
            for co in 0..cout {
                for &go in &gout[((b * cout + co) * ho) * wo..][..ho * wo] {
                    gb[co] += go;
                }
            }
        }
    }
}

/// conv3d forward, groups = 1. x (n, cin, d, h, w); weight (cout, cin, kd, kh, kw).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_fwd<F: Real>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    n: usize,
    cin: usize,
    (d, h, w): (usize, usize, usize),
    cout: usize,
    (kd, kh, kw): (usize, usize, usize),
    (sd, sh, sw): (usize, usize, usize),
    (pd, ph, pw): (usize, usize, usize),
    out: &mut [F],
) {
    let do_ = conv_out_len(d, kd, sd, pd).unwrap();
    let ho = conv_out_len(h, kh, sh, ph).unwrap();
    let wo = conv_out_len(w, kw, sw, pw).unwrap();
    let vol_o = do_ * ho * wo;
    let body = |(plane, o_vol): (usize, &mut [F])| {
        let b = plane / cout;
        let co = plane % cout;
        let bias_v = bias.map_or(F::ZERO, |bv| bv[co]);
        for od in 0..do_ {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias_v;
                    for ci in 0..cin {
                        let x_vol = &x[(b * cin + ci) * d * h * w..][..d * h * w];
                        let w_vol = &weight[(co * cin + ci) * kd * kh * kw..][..kd * kh * kw];
                        for kz in 0..kd {
                            let iz = od * sd + kz;
                            if iz < pd || iz - pd >= d {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = oy * sh + ky;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox * sw + kx;
                                    if ix >= pw && ix - pw < w {
                                        s += w_vol[(kz * kh + ky) * kw + kx]
                                            * x_vol[((iz - pd) * h + (iy - ph)) * w + ix - pw];
                                    }
                                }
                            }
                        }
                    }
                    o_vol[(od * ho + oy) * wo + ox] = s;
                }
            }
        }
    };
    if n * cout * vol_o >= PAR_THRESHOLD {
        out.par_chunks_mut(vol_o).enumerate().for_each(body);
    } else {
        out.chunks_mut(vol_o).enumerate().for_each(body);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_bwd<F: Real>(
    x: &[F],
    weight: &[F],
    gout: &[F],
    n: usize,
    cin: usize,
    (d, h, w): (usize, usize, usize),
    cout: usize,
    (kd, kh, kw): (usize, usize, usize),
    (sd, sh, sw): (usize, usize, usize),
    (pd, ph, pw): (usize, usize, usize),
    gx: &mut [F],
    gw: &mut [F],
    gbias: Option<&mut [F]>,
) {
    let do_ = conv_out_len(d, kd, sd, pd).unwrap();
    let ho = conv_out_len(h, kh, sh, ph).unwrap();
    let wo = conv_out_len(w, kw, sw, pw).unwrap();
    let gx_body = |(plane, gx_vol): (usize, &mut [F])| {
        let b = plane / cin;
        let ci = plane % cin;
        for iz in 0..d {
            for iy in 0..h {
                for ix in 0..w {
                    let mut s = F::ZERO;
                    for kz in 0..kd {
                        let sz = iz + pd;
                        if sz < kz || (sz - kz) % sd != 0 {
                            continue;
                        }
                        let od = (sz - kz) / sd;
                        if od >= do_ {
                            continue;
                        }
                        for ky in 0..kh {
                            let sy = iy + ph;
                            if sy < ky || (sy - ky) % sh != 0 {
                                continue;
                            }
                            let oy = (sy - ky) / sh;
                            if oy >= ho {
                                continue;
                            }
                            for kx in 0..kw {
                                let sx = ix + pw;
                                if sx < kx || (sx - kx) % sw != 0 {
                                    continue;
                                }
                                let ox = (sx - kx) / sw;
                                if ox >= wo {
                                    continue;
                                }
                                for co in 0..cout {
                                    s += weight
                                        [((co * cin + ci) * kd + kz) * kh * kw + ky * kw + kx]
                                        * gout[((b * cout + co) * do_ + od) * ho * wo
                                            + oy * wo
                                            + ox];
                                }
                            }
                        }
                    }
                    gx_vol[(iz * h + iy) * w + ix] += s;
                }
            }
        }
    };
    if n * cin * d * h * w >= PAR_THRESHOLD {
        gx.par_chunks_mut(d * h * w).enumerate().for_each(gx_body);
    } else {
        gx.chunks_mut(d * h * w).enumerate().for_each(gx_body);
    }
    let gw_body = |(widx, gw_e): (usize, &mut F)| {
        let kx = widx % kw;
        let ky = (widx / kw) % kh;
        let kz = (widx / (kw * kh)) % kd;
        let ci = (widx / (kw * kh * kd)) % cin;
        let co = widx / (kw * kh * kd * cin);
        let mut s = F::ZERO;
        for b in 0..n {
            for od in 0..do_ {
                let iz = od * sd + kz;
                if iz < pd || iz - pd >= d {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy * sh + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox * sw + kx;
                        if ix >= pw && ix - pw < w {
                            s += gout[((b * cout + co) * do_ + od) * ho * wo + oy * wo + ox]
                                * x[((b * cin + ci) * d + iz - pd) * h * w + (iy - ph) * w + ix
                                    - pw];
                        }
                    }
                }
            }
        }
        *gw_e += s;
    };
    if gw.len() * n >= PAR_THRESHOLD {
        gw.par_iter_mut().enumerate().for_each(gw_body);
    } else {
        gw.iter_mut().enumerate().for_each(gw_body);
    }
    if let Some(gb) = gbias {
        for b in 0..n {
            for co in 0..cout {
                for &go in &gout[(b * cout + co) * do_ * ho * wo..][..do_ * ho * wo] {
                    gb[co] += go;
                }
            }
        }
    }
}

// ── Pooling ────────────────────────────────────────────────────────────

/// Non-overlapping row pooling: (rows, d) -> (ceil(rows/k), d). The final
/// partial window is averaged over its actual length.
pub fn avg_pool1d_fwd<F: Real>(x: &[F], rows: usize, d: usize, k: usize, out: &mut [F]) {
    let rows_out = rows.div_ceil(k);
    for ro in 0..rows_out {
        let start = ro * k;
        let len = k.min(rows - start);
        let inv = F::ONE / F::from_f64(len as f64);
        for c in 0..d {
            let mut s = F::ZERO;
            for r in start..start + len {
                s += x[r * d + c];
            }
            out[ro * d + c] = s * inv;
        }
    }
}

pub fn avg_pool1d_bwd<F: Real>(gout: &[F], rows: usize, d: usize, k: usize, gx: &mut [F]) {
    let rows_out = rows.div_ceil(k);
    for ro in 0..rows_out {
        let start = ro * k;
        let len = k.min(rows - start);
        let inv = F::ONE / F::from_f64(len as f64);
        for c in 0..d {
            let g = gout[ro * d + c] * inv;
            for r in start..start + len {
                gx[r * d + c] += g;
            }
        }
    }
}

/// Each input row repeated k times, truncated to target_len rows.
pub fn upsample_nearest1d_fwd<F: Real>(x: &[F], d: usize, k: usize, target_len: usize, out: &mut [F]) {
    for r in 0..target_len {
        let src = r / k;
        out[r * d..(r + 1) * d].copy_from_slice(&x[src * d..(src + 1) * d]);
    }
}

pub fn upsample_nearest1d_bwd<F: Real>(gout: &[F], d: usize, k: usize, target_len: usize, gx: &mut [F]) {
    for r in 0..target_len {
        let src = r / k;
        for c in 0..d {
            gx[src * d + c] += gout[r * d + c];
        }
    }
}

/// Spatial max pooling on (n, c, h, w); records flat argmax per output cell.
#[allow(clippy::too_many_arguments)]
pub fn max_pool2d_fwd<F: Real>(
    x: &[F],
    n: usize,
    c: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    out: &mut [F],
    argmax: &mut [usize],
) {
    let ho = conv_out_len(h, kh, sh, ph).unwrap();
    let wo = conv_out_len(w, kw, sw, pw).unwrap();
    for plane in 0..n * c {
        let x_plane = &x[plane * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = F::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..kh {
                    let iy = oy * sh + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox * sw + kx;
                        if ix < pw || ix - pw >= w {
                            continue;
                        }
                        let idx = (iy - ph) * w + (ix - pw);
                        if x_plane[idx] > best {
                            best = x_plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o_idx = (plane * ho + oy) * wo + ox;
                out[o_idx] = best;
                argmax[o_idx] = plane * h * w + best_idx;
            }
        }
    }
}

pub fn max_pool2d_bwd<F: Real>(gout: &[F], argmax: &[usize], gx: &mut [F]) {
    for (g, &idx) in gout.iter().zip(argmax) {
        gx[idx] += *g;
    }
}

// ── Row-wise softmax family ────────────────────────────────────────────

/// Softmax over contiguous rows of width `d`. Returns Err(row) if a row has
/// no finite entry (everything masked), which would otherwise silently
/// produce a uniform row.
pub fn softmax_rows<F: Real>(x: &[F], d: usize, out: &mut [F]) -> std::result::Result<(), usize> {
    for (row, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mut max = F::neg_infinity();
        for &v in xr {
            max = max.maximum(v);
        }
        if !max.is_finite() {
            return Err(row);
        }
        let mut sum = F::ZERO;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = F::ONE / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    Ok(())
}

pub fn softmax_rows_bwd<F: Real>(y: &[F], gout: &[F], d: usize, gx: &mut [F]) {
    for ((yr, gr), gxr) in y.chunks(d).zip(gout.chunks(d)).zip(gx.chunks_mut(d)) {
        let mut dot = F::ZERO;
        for (a, b) in yr.iter().zip(gr) {
            dot += *a * *b;
        }
        for ((gx_e, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
            *gx_e += yv * (gv - dot);
        }
    }
}

pub fn log_softmax_rows<F: Real>(
    x: &[F],
    d: usize,
    out: &mut [F],
) -> std::result::Result<(), usize> {
    for (row, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mut max = F::neg_infinity();
        for &v in xr {
            max = max.maximum(v);
        }
        if !max.is_finite() {
            return Err(row);
        }
        let mut sum = F::ZERO;
        for &v in xr {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    Ok(())
}

pub fn log_softmax_rows_bwd<F: Real>(y: &[F], gout: &[F], d: usize, gx: &mut [F]) {
    for ((yr, gr), gxr) in y.chunks(d).zip(gout.chunks(d)).zip(gx.chunks_mut(d)) {
        let mut gsum = F::ZERO;
        for &g in gr {
            gsum += g;
        }
        for ((gx_e, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
            *gx_e += gv - yv.exp() * gsum;
        }
    }
}

// ── Normalization ──────────────────────────────────────────────────────

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm over the last axis, with affine. Saves per-row
/// (mean, inv_std) for backward.
pub fn layer_norm_fwd<F: Real>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    d: usize,
    out: &mut [F],
    stats: &mut Vec<(F, F)>,
) {
    let inv_d = F::ONE / F::from_f64(d as f64);
    let eps = F::from_f64(LN_EPS);
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mut mean = F::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::ZERO;
        for &v in xr {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let inv_std = F::ONE / (var + eps).sqrt();
        for c in 0..d {
            or[c] = (xr[c] - mean) * inv_std * gamma[c] + beta[c];
        }
        stats.push((mean, inv_std));
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd<F: Real>(
    x: &[F],
    gamma: &[F],
    gout: &[F],
    stats: &[(F, F)],
    d: usize,
    gx: &mut [F],
    ggamma: &mut [F],
    gbeta: &mut [F],
) {
    let inv_d = F::ONE / F::from_f64(d as f64);
    for (row, (xr, gr)) in x.chunks(d).zip(gout.chunks(d)).enumerate() {
        let (mean, inv_std) = stats[row];
        let mut sum_g = F::ZERO;
        let mut sum_gx = F::ZERO;
        for c in 0..d {
            let xhat = (xr[c] - mean) * inv_std;
            let gl = gr[c] * gamma[c];
            sum_g += gl;
            sum_gx += gl * xhat;
            ggamma[c] += gr[c] * xhat;
            gbeta[c] += gr[c];
        }
        let gx_row = &mut gx[row * d..(row + 1) * d];
        for c in 0..d {
            let xhat = (xr[c] - mean) * inv_std;
            let gl = gr[c] * gamma[c];
            gx_row[c] += inv_std * (gl - inv_d * sum_g - xhat * inv_d * sum_gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = [1.0f32, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        matmul(&eye, &b, 1, 2, 2, 2, 1, false, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let a = [1.0f32, 2.0];
        let b = [3.0, 4.0];
        let mut out = [0.0; 1];
        matmul(&a, &b, 1, 1, 2, 1, 1, false, &mut out);
        assert_eq!(out[0], 11.0);
    }

    #[test]
    fn matmul_transpose_b_matches_plain() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 3x2
        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 3.0]; // 2x3 (= b transposed)
        let mut out1 = [0.0; 4];
        let mut out2 = [0.0; 4];
        matmul(&a, &b, 1, 2, 3, 2, 1, false, &mut out1);
        matmul(&a, &bt, 1, 2, 3, 2, 1, true, &mut out2);
        assert_eq!(out1, out2);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = [1.0f32, 2.0, 3.0];
        let w = [1.0];
        let mut out = [0.0; 3];
        conv1d_fwd(&x, &w, None, 1, 1, 3, 1, 1, 1, 0, 1, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_shape_formula() {
        // Audio-stem shaped case: 80x1001 input, 3x3 kernel, stride 2, pad 1.
        let s = conv_out_shape(&[80, 1001], &[3, 3], &[2, 2], &[1, 1]).unwrap();
        assert_eq!(s, vec![40, 501]);
        assert!(conv_out_shape(&[2], &[5], &[1], &[0]).is_none());
    }

    #[test]
    fn conv_shape_floor_formula_grid() {
        for input in [5usize, 8, 13] {
            for kernel in [1usize, 2, 3, 5] {
                for stride in [1usize, 2, 3] {
                    for pad in [0usize, 1, 2] {
                        if kernel > input + 2 * pad {
                            continue;
                        }
                        let got = conv_out_shape(&[input], &[kernel], &[stride], &[pad]).unwrap();
                        let expect = (input + 2 * pad - kernel) / stride + 1;
                        assert_eq!(got[0], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn avg_pool_partial_window() {
        let x = [1.0f32, 2.0, 3.0];
        let mut out = [0.0; 2];
        avg_pool1d_fwd(&x, 3, 1, 2, &mut out);
        assert_eq!(out, [1.5, 3.0]);
        let x4 = [1.0f32, 2.0, 3.0, 4.0];
        let mut out2 = [0.0; 2];
        avg_pool1d_fwd(&x4, 4, 1, 2, &mut out2);
        assert_eq!(out2, [1.5, 3.5]);
    }

    #[test]
    fn upsample_truncates() {
        let x = [1.0f32, 2.0];
        let mut out = [0.0; 3];
        upsample_nearest1d_fwd(&x, 1, 2, 3, &mut out);
        assert_eq!(out, [1.0, 1.0, 2.0]);
        let mut out4 = [0.0; 4];
        upsample_nearest1d_fwd(&x, 1, 2, 4, &mut out4);
        assert_eq!(out4, [1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_stable_and_normalized() {
        let x = [1000.0f32, 0.0];
        let mut out = [0.0; 2];
        softmax_rows(&x, 2, &mut out).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!(out[1].abs() < 1e-6);
        let x2 = [0.0f32, 0.0];
        softmax_rows(&x2, 2, &mut out).unwrap();
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn softmax_all_masked_detected() {
        let x = [f32::NEG_INFINITY, f32::NEG_INFINITY];
        let mut out = [0.0; 2];
        assert_eq!(softmax_rows(&x, 2, &mut out), Err(0));
    }

    #[test]
    fn layer_norm_constant_row_zero() {
        let x = [3.0f32, 3.0, 3.0, 3.0];
        let gamma = [1.0f32; 4];
        let beta = [0.0f32; 4];
        let mut out = [0.0f32; 4];
        let mut stats = Vec::new();
        layer_norm_fwd(&x, &gamma, &beta, 4, &mut out, &mut stats);
        for v in out {
            assert!(v.abs() < 1e-5);
        }
    }
}
