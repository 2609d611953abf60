//! Per-layer forward/backward kernels. Each operates on a single sample in
//! row-major layout; reductions accumulate in f64.

/// Conv2d geometry. Weight layout is `[out_ch, in_ch, k, k]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let num_h = h + 2 * self.pad;
        let num_w = w + 2 * self.pad;
        if num_h < self.kernel || num_w < self.kernel || self.stride == 0 {
            return None;
        }
        Some(((num_h - self.kernel) / self.stride + 1, (num_w - self.kernel) / self.stride + 1))
    }
}

pub fn conv2d_forward(
    x: &[f32],
    (h, w): (usize, usize),
    g: &ConvGeom,
    weight: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let (oh, ow) = g.out_hw(h, w).expect("validated conv geometry");
    let k = g.kernel;
    let mut out = vec![0.0f32; g.out_ch * oh * ow];
    for o in 0..g.out_ch {
        let w_o = o * g.in_ch * k * k;
        for oy in 0..oh {
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let mut acc = bias[o] as f64;
                for i in 0..g.in_ch {
                    let x_i = i * h * w;
                    let w_oi = w_o + i * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_i + iy as usize * w;
                        let w_row = w_oi + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += weight[w_row + kx] as f64 * x[x_row + ix as usize] as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    gout: &[f32],
    x: &[f32],
    (h, w): (usize, usize),
    g: &ConvGeom,
    weight: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = g.out_hw(h, w).expect("validated conv geometry");
    let k = g.kernel;
    let mut dx = vec![0.0f32; g.in_ch * h * w];
    let mut dw = vec![0.0f32; weight.len()];
    let mut db = vec![0.0f32; g.out_ch];
    for o in 0..g.out_ch {
        let w_o = o * g.in_ch * k * k;
        let mut db_acc = 0.0f64;
        for oy in 0..oh {
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..ow {
                let gv = gout[(o * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                db_acc += gv as f64;
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                for i in 0..g.in_ch {
                    let x_i = i * h * w;
                    let w_oi = w_o + i * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_i + iy as usize * w;
                        let w_row = w_oi + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = x_row + ix as usize;
                            dw[w_row + kx] += gv * x[xi];
                            dx[xi] += gv * weight[w_row + kx];
                        }
                    }
                }
            }
        }
        db[o] = db_acc as f32;
    }
    (dx, dw, db)
}

/// Normalizes per group, then applies the per-channel affine. Returns
/// `(y, xhat, inv_std)` with one `inv_std` per group.
pub fn group_norm_forward(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let gsize = cpg * h * w;
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; groups];
    for gi in 0..groups {
        let base = gi * gsize;
        let slice = &x[base..base + gsize];
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for &v in slice {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
        let mean = sum / gsize as f64;
        let var = (sq / gsize as f64 - mean * mean).max(0.0);
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[gi] = istd as f32;
        for ci in 0..cpg {
            let ch = gi * cpg + ci;
            let (gam, bet) = (gamma[ch] as f64, beta[ch] as f64);
            for s in 0..h * w {
                let idx = base + ci * h * w + s;
                let xh = (x[idx] as f64 - mean) * istd;
                xhat[idx] = xh as f32;
                y[idx] = (xh * gam + bet) as f32;
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    gout: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    (c, h, w): (usize, usize, usize),
    groups: usize,
    gamma: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let gsize = cpg * h * w;
    let mut dx = vec![0.0f32; gout.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for gi in 0..groups {
        let base = gi * gsize;
        // h_i = gout_i * gamma_{c(i)}; dx = istd*(h - mean(h) - xhat*mean(h*xhat))
        let mut sum_h = 0.0f64;
        let mut sum_hx = 0.0f64;
        for ci in 0..cpg {
            let ch = gi * cpg + ci;
            let gam = gamma[ch] as f64;
            let mut dg = 0.0f64;
            let mut db = 0.0f64;
            for s in 0..h * w {
                let idx = base + ci * h * w + s;
                let go = gout[idx] as f64;
                let hh = go * gam;
                sum_h += hh;
                sum_hx += hh * xhat[idx] as f64;
                dg += go * xhat[idx] as f64;
                db += go;
            }
            dgamma[ch] = dg as f32;
            dbeta[ch] = db as f32;
        }
        let mean_h = sum_h / gsize as f64;
        let mean_hx = sum_hx / gsize as f64;
        let istd = inv_std[gi] as f64;
        for ci in 0..cpg {
            let ch = gi * cpg + ci;
            let gam = gamma[ch] as f64;
            for s in 0..h * w {
                let idx = base + ci * h * w + s;
                let hh = gout[idx] as f64 * gam;
                dx[idx] = (istd * (hh - mean_h - xhat[idx] as f64 * mean_hx)) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Weight layout `[out, in]`.
pub fn linear_forward(x: &[f32], weight: &[f32], bias: &[f32], out_f: usize) -> Vec<f32> {
    let in_f = x.len();
    let mut out = vec![0.0f32; out_f];
    for o in 0..out_f {
        let row = o * in_f;
        let mut acc = bias[o] as f64;
        for i in 0..in_f {
            acc += weight[row + i] as f64 * x[i] as f64;
        }
        out[o] = acc as f32;
    }
    out
}

pub fn linear_backward(
    gout: &[f32],
    x: &[f32],
    weight: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let out_f = gout.len();
    let in_f = x.len();
    let mut dx = vec![0.0f32; in_f];
    let mut dw = vec![0.0f32; out_f * in_f];
    for o in 0..out_f {
        let gv = gout[o];
        let row = o * in_f;
        for i in 0..in_f {
            dw[row + i] = gv * x[i];
            dx[i] += gv * weight[row + i];
        }
    }
    (dx, dw, gout.to_vec())
}

pub fn relu_forward(x: &[f32]) -> (Vec<f32>, Vec<bool>) {
    let mut out = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for &v in x {
        let keep = v > 0.0;
        mask.push(keep);
        out.push(if keep { v } else { 0.0 });
    }
    (out, mask)
}

pub fn relu_backward(gout: &[f32], mask: &[bool]) -> Vec<f32> {
    gout.iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect()
}

/// Non-overlapping k-by-k max pooling; trailing rows/cols that do not fill a
/// window are dropped. Ties resolve to the first maximum.
pub fn max_pool_forward(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    k: usize,
) -> (Vec<f32>, Vec<u32>, (usize, usize, usize)) {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0f32; c * oh * ow];
    let mut argmax = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = (ci * h + oy * k + ky) * w + ox * k + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oidx = (ci * oh + oy) * ow + ox;
                out[oidx] = best;
                argmax[oidx] = best_idx as u32;
            }
        }
    }
    (out, argmax, (c, oh, ow))
}

pub fn max_pool_backward(gout: &[f32], argmax: &[u32], in_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; in_len];
    for (g, &a) in gout.iter().zip(argmax) {
        dx[a as usize] += g;
    }
    dx
}

pub fn global_avg_pool_forward(x: &[f32], (c, h, w): (usize, usize, usize)) -> Vec<f32> {
    let hw = h * w;
    (0..c)
        .map(|ci| {
            let mut acc = 0.0f64;
            for s in 0..hw {
                acc += x[ci * hw + s] as f64;
            }
            (acc / hw as f64) as f32
        })
        .collect()
}

pub fn global_avg_pool_backward(gout: &[f32], (c, h, w): (usize, usize, usize)) -> Vec<f32> {
    let hw = h * w;
    let mut dx = vec![0.0f32; c * hw];
    for ci in 0..c {
        let gv = gout[ci] / hw as f32;
        for s in 0..hw {
            dx[ci * hw + s] = gv;
        }
    }
    dx
}
