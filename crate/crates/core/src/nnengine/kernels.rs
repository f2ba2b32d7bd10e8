//! Forward and backward kernels on raw row-major slices.
//!
//! Forward kernels accumulate each output element in an order that does not
//! depend on the number of time steps, so running them frame by frame with
//! carried history reproduces the batch result bit for bit.

use crate::par;

/// Per-channel causal convolution. `hist` holds the `k - 1` columns that
/// precede `x` for every channel; `w[c, k-1]` multiplies the current sample.
pub fn depthwise_fwd(x: &[f32], hist: &[f32], w: &[f32], c: usize, t: usize, k: usize) -> Vec<f32> {
    let h = k - 1;
    let mut y = vec![0.0f32; c * t];
    par::for_each_chunk_mut(&mut y, t.max(1), t * k, |ch, yr| {
        let wr = &w[ch * k..(ch + 1) * k];
        let xr = &x[ch * t..(ch + 1) * t];
        let hr = &hist[ch * h..(ch + 1) * h];
        for (ti, out) in yr.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (j, &wj) in wr.iter().enumerate() {
                // Input index ti + j - h, taken from history when negative.
                let idx = ti + j;
                let v = if idx < h { hr[idx] } else { xr[idx - h] };
                acc += wj * v;
            }
            *out = acc;
        }
    });
    y
}

/// Gradients of [`depthwise_fwd`] with respect to `x` and `w`.
pub fn depthwise_bwd(gy: &[f32], x: &[f32], hist: &[f32], w: &[f32], c: usize, t: usize, k: usize) -> (Vec<f32>, Vec<f32>) {
    let h = k - 1;
    let rows = par::map(c, t * k * 2, |ch| {
        let wr = &w[ch * k..(ch + 1) * k];
        let xr = &x[ch * t..(ch + 1) * t];
        let hr = &hist[ch * h..(ch + 1) * h];
        let gr = &gy[ch * t..(ch + 1) * t];
        let mut gx = vec![0.0f32; t];
        let mut gw = vec![0.0f32; k];
        for (ti, &g) in gr.iter().enumerate() {
            for j in 0..k {
                let idx = ti + j;
                if idx < h {
                    gw[j] += g * hr[idx];
                } else {
                    gw[j] += g * xr[idx - h];
                    gx[idx - h] += g * wr[j];
                }
            }
        }
        (gx, gw)
    });
    let mut gx = Vec::with_capacity(c * t);
    let mut gw = Vec::with_capacity(c * k);
    for (a, b) in rows {
        gx.extend(a);
        gw.extend(b);
    }
    (gx, gw)
}

/// `y[o, t] = sum_i w[o, i] x[i, t] + b[o]`.
pub fn pointwise_fwd(x: &[f32], w: &[f32], b: &[f32], ci: usize, co: usize, t: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; co * t];
    par::for_each_chunk_mut(&mut y, t.max(1), ci * t, |o, yr| {
        let wr = &w[o * ci..(o + 1) * ci];
        for (i, &wi) in wr.iter().enumerate() {
            let xr = &x[i * t..(i + 1) * t];
            for (yv, &xv) in yr.iter_mut().zip(xr) {
                *yv += wi * xv;
            }
        }
        let bo = b[o];
        yr.iter_mut().for_each(|v| *v += bo);
    });
    y
}

pub fn pointwise_bwd(gy: &[f32], x: &[f32], w: &[f32], ci: usize, co: usize, t: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; ci * t];
    par::for_each_chunk_mut(&mut gx, t.max(1), co * t, |i, gxr| {
        for o in 0..co {
            let wv = w[o * ci + i];
            let gr = &gy[o * t..(o + 1) * t];
            for (a, &g) in gxr.iter_mut().zip(gr) {
                *a += wv * g;
            }
        }
    });
    let mut gw = vec![0.0f32; co * ci];
    par::for_each_chunk_mut(&mut gw, ci.max(1), ci * t, |o, gwr| {
        let gr = &gy[o * t..(o + 1) * t];
        for (i, v) in gwr.iter_mut().enumerate() {
            let xr = &x[i * t..(i + 1) * t];
            *v = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
        }
    });
    let gb = (0..co).map(|o| gy[o * t..(o + 1) * t].iter().sum()).collect();
    (gx, gw, gb)
}

/// Full causal convolution, `w` shaped `[co, ci, k]`.
pub fn conv_fwd(x: &[f32], hist: &[f32], w: &[f32], b: &[f32], ci: usize, co: usize, t: usize, k: usize) -> Vec<f32> {
    let h = k - 1;
    let mut y = vec![0.0f32; co * t];
    par::for_each_chunk_mut(&mut y, t.max(1), ci * k * t, |o, yr| {
        for i in 0..ci {
            let wr = &w[(o * ci + i) * k..(o * ci + i + 1) * k];
            let xr = &x[i * t..(i + 1) * t];
            let hr = &hist[i * h..(i + 1) * h];
            for (ti, yv) in yr.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (j, &wj) in wr.iter().enumerate() {
                    let idx = ti + j;
                    let v = if idx < h { hr[idx] } else { xr[idx - h] };
                    acc += wj * v;
                }
                *yv += acc;
            }
        }
        let bo = b[o];
        yr.iter_mut().for_each(|v| *v += bo);
    });
    y
}

pub fn conv_bwd(gy: &[f32], x: &[f32], hist: &[f32], w: &[f32], ci: usize, co: usize, t: usize, k: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let h = k - 1;
    let mut gx = vec![0.0f32; ci * t];
    par::for_each_chunk_mut(&mut gx, t.max(1), co * k * t, |i, gxr| {
        for o in 0..co {
            let wr = &w[(o * ci + i) * k..(o * ci + i + 1) * k];
            let gr = &gy[o * t..(o + 1) * t];
            for (ti, &g) in gr.iter().enumerate() {
                for (j, &wj) in wr.iter().enumerate() {
                    let idx = ti + j;
                    if idx >= h {
                        gxr[idx - h] += g * wj;
                    }
                }
            }
        }
    });
    let mut gw = vec![0.0f32; co * ci * k];
    par::for_each_chunk_mut(&mut gw, (ci * k).max(1), ci * k * t, |o, gwr| {
        let gr = &gy[o * t..(o + 1) * t];
        for i in 0..ci {
            let xr = &x[i * t..(i + 1) * t];
            let hr = &hist[i * h..(i + 1) * h];
            for j in 0..k {
                let mut acc = 0.0f32;
                for (ti, &g) in gr.iter().enumerate() {
                    let idx = ti + j;
                    let v = if idx < h { hr[idx] } else { xr[idx - h] };
                    acc += g * v;
                }
                gwr[i * k + j] = acc;
            }
        }
    });
    let gb = (0..co).map(|o| gy[o * t..(o + 1) * t].iter().sum()).collect();
    (gx, gw, gb)
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalizes every column over channels: `(x - mean) / sqrt(var + eps)`.
/// Returns the normalized values and the per-column reciprocal deviations.
pub fn channel_norm_fwd(x: &[f32], c: usize, t: usize) -> (Vec<f32>, Vec<f32>) {
    let mut z = vec![0.0f32; c * t];
    let mut inv = vec![0.0f32; t];
    for ti in 0..t {
        let mut mean = 0.0f64;
        for ch in 0..c {
            mean += x[ch * t + ti] as f64;
        }
        mean /= c as f64;
        let mut var = 0.0f64;
        for ch in 0..c {
            let d = x[ch * t + ti] as f64 - mean;
            var += d * d;
        }
        var /= c as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        inv[ti] = r as f32;
        for ch in 0..c {
            z[ch * t + ti] = ((x[ch * t + ti] as f64 - mean) * r) as f32;
        }
    }
    (z, inv)
}

pub fn channel_norm_bwd(gz: &[f32], z: &[f32], inv: &[f32], c: usize, t: usize) -> Vec<f32> {
    let mut gx = vec![0.0f32; c * t];
    for ti in 0..t {
        let (mut mg, mut mgz) = (0.0f64, 0.0f64);
        for ch in 0..c {
            let g = gz[ch * t + ti] as f64;
            mg += g;
            mgz += g * z[ch * t + ti] as f64;
        }
        mg /= c as f64;
        mgz /= c as f64;
        let r = inv[ti] as f64;
        for ch in 0..c {
            let i = ch * t + ti;
            gx[i] = (r * (gz[i] as f64 - mg - z[i] as f64 * mgz)) as f32;
        }
    }
    gx
}

/// One tap pair of a linear resampler: `y[j] = x[i0] * (1 - frac) + x[i1] * frac`.
/// `i0 == -1` addresses the carried history column.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: isize,
    pub i1: isize,
    pub frac: f32,
}

fn checked_out_len(t: usize, num: usize, den: usize) -> Option<usize> {
    if (t * num) % den != 0 {
        None
    } else {
        Some(t * num / den)
    }
}

/// Aligned grid: output `j` samples input position `j * den / num`, holding
/// the last input value past the end.
pub fn aligned_taps(t: usize, num: usize, den: usize) -> Option<Vec<Tap>> {
    let n = checked_out_len(t, num, den)?;
    Some(
        (0..n)
            .map(|j| {
                let q = j * den / num;
                let rem = j * den % num;
                let i0 = q.min(t - 1) as isize;
                let i1 = (q + 1).min(t - 1) as isize;
                Tap {
                    i0,
                    i1: if rem == 0 { i0 } else { i1 },
                    frac: rem as f32 / num as f32,
                }
            })
            .collect(),
    )
}

/// Causal grid for upsampling: output `j` samples input position
/// `(j + 1) * den / num - 1`, so the last output of a block lands exactly on
/// the last input and nothing beyond it is read.
pub fn causal_taps(t: usize, num: usize, den: usize) -> Option<Vec<Tap>> {
    let n = checked_out_len(t, num, den)?;
    Some(
        (0..n)
            .map(|j| {
                let q = (j + 1) * den / num;
                let rem = (j + 1) * den % num;
                let i0 = q as isize - 1;
                Tap {
                    i0,
                    i1: if rem == 0 { i0 } else { i0 + 1 },
                    frac: rem as f32 / num as f32,
                }
            })
            .collect(),
    )
}

/// Applies taps row by row. `hist` is one column per channel (index -1).
pub fn resample_fwd(x: &[f32], hist: &[f32], taps: &[Tap], c: usize, t: usize) -> Vec<f32> {
    let n = taps.len();
    let mut y = vec![0.0f32; c * n];
    for ch in 0..c {
        let xr = &x[ch * t..(ch + 1) * t];
        let at = |i: isize| if i < 0 { hist[ch] } else { xr[i as usize] };
        for (j, tap) in taps.iter().enumerate() {
            y[ch * n + j] = if tap.i0 == tap.i1 {
                at(tap.i0)
            } else {
                at(tap.i0) * (1.0 - tap.frac) + at(tap.i1) * tap.frac
            };
        }
    }
    y
}

pub fn resample_bwd(gy: &[f32], taps: &[Tap], c: usize, t: usize) -> Vec<f32> {
    let n = taps.len();
    let mut gx = vec![0.0f32; c * t];
    for ch in 0..c {
        for (j, tap) in taps.iter().enumerate() {
            let g = gy[ch * n + j];
            if tap.i0 == tap.i1 {
                if tap.i0 >= 0 {
                    gx[ch * t + tap.i0 as usize] += g;
                }
            } else {
                if tap.i0 >= 0 {
                    gx[ch * t + tap.i0 as usize] += g * (1.0 - tap.frac);
                }
                gx[ch * t + tap.i1 as usize] += g * tap.frac;
            }
        }
    }
    gx
}

pub fn nearest_up_fwd(x: &[f32], c: usize, t: usize, r: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(c * t * r);
    for ch in 0..c {
        for &v in &x[ch * t..(ch + 1) * t] {
            y.extend(std::iter::repeat(v).take(r));
        }
    }
    y
}

pub fn nearest_up_bwd(gy: &[f32], c: usize, t: usize, r: usize) -> Vec<f32> {
    (0..c * t).map(|i| gy[i * r..(i + 1) * r].iter().sum()).collect()
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// 2-D convolution over `[ci, h, w]` with zero padding, weights `[co, ci, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    fn input_at(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
        let ix = (ox * self.sw + kx) as isize - self.pw as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

pub fn conv2d_fwd(x: &[f32], wt: &[f32], b: &[f32], g: &Conv2dGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0.0f32; g.co * oh * ow];
    let kk = g.kh * g.kw;
    par::for_each_chunk_mut(&mut y, oh * ow, g.ci * kk * oh * ow, |o, yr| {
        for i in 0..g.ci {
            let xi = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
            let wr = &wt[(o * g.ci + i) * kk..(o * g.ci + i + 1) * kk];
            for oy in 0..oh {
                for ky in 0..g.kh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.input_at(oy, ky, ox, kx) {
                                acc += wr[ky * g.kw + kx] * xi[iy * g.w + ix];
                            }
                        }
                        yr[oy * ow + ox] += acc;
                    }
                }
            }
        }
        let bo = b[o];
        yr.iter_mut().for_each(|v| *v += bo);
    });
    y
}

pub fn conv2d_bwd(gy: &[f32], x: &[f32], wt: &[f32], g: &Conv2dGeom) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.kh * g.kw;
    let mut gx = vec![0.0f32; g.ci * g.h * g.w];
    par::for_each_chunk_mut(&mut gx, g.h * g.w, g.co * kk * oh * ow, |i, gxr| {
        for o in 0..g.co {
            let wr = &wt[(o * g.ci + i) * kk..(o * g.ci + i + 1) * kk];
            let gr = &gy[o * oh * ow..(o + 1) * oh * ow];
            for oy in 0..oh {
                for ky in 0..g.kh {
                    for ox in 0..ow {
                        let gv = gr[oy * ow + ox];
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.input_at(oy, ky, ox, kx) {
                                gxr[iy * g.w + ix] += wr[ky * g.kw + kx] * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    let mut gw = vec![0.0f32; g.co * g.ci * kk];
    par::for_each_chunk_mut(&mut gw, g.ci * kk, g.ci * kk * oh * ow, |o, gwr| {
        let gr = &gy[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..g.ci {
            let xi = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = 0.0f32;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some((iy, ix)) = g.input_at(oy, ky, ox, kx) {
                                acc += gr[oy * ow + ox] * xi[iy * g.w + ix];
                            }
                        }
                    }
                    gwr[i * kk + ky * g.kw + kx] = acc;
                }
            }
        }
    });
    let gb = (0..g.co)
        .map(|o| gy[o * oh * ow..(o + 1) * oh * ow].iter().sum())
        .collect();
    (gx, gw, gb)
}
