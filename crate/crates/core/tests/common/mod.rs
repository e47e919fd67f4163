//! Straight-line reference implementations on flat `f64` buffers.
//!
//! Nothing here touches the tape; every formula is written out with plain
//! loops so it can serve as an independent oracle.

#![allow(dead_code)]

use csasr::network::ModelConfig;
use csasr::params::ModelParams;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maclaurin series; accurate to ~1e-10 for |z| ≤ 4, saturated beyond.
pub fn erf(z: f64) -> f64 {
    if z.abs() > 4.0 {
        return z.signum() * (1.0 - 1.6e-8);
    }
    let mut term = z;
    let mut sum = z;
    for n in 1..120 {
        term *= -z * z / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// `y[r] = x[r]·W + b` with `W` stored `[din, dout]` row-major.
pub fn linear(x: &[f64], din: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    let rows = x.len() / din;
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + o];
            }
            y[r * dout + o] = acc;
        }
    }
    y
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Grouped cross-correlation, stride 1, zero padding; `x: [n,c,h,w]`,
/// `w: [cout, c/groups, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    cout: usize,
    k: usize,
    bias: &[f64],
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let cin_g = c / groups;
    let cout_g = cout / groups;
    let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut y = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..cin_g {
                        let ch = g * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                acc += xv * weight[((o * cin_g + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    y[((b * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

fn p<'a>(params: &'a ModelParams<f64>, name: &str) -> &'a [f64] {
    params.get(name).unwrap_or_else(|e| panic!("{e}")).data()
}

/// Per-channel gate from the sum of the global max and mean of each
/// channel, through `fc1 → ReLU → fc2 → sigmoid`. Returns `[n, c]`.
pub fn channel_attention(f: &[f64], (n, c, h, w): (usize, usize, usize, usize), params: &ModelParams<f64>, prefix: &str) -> Vec<f64> {
    let w1 = p(params, &format!("{prefix}fc1.weight"));
    let b1 = p(params, &format!("{prefix}fc1.bias"));
    let w2 = p(params, &format!("{prefix}fc2.weight"));
    let b2 = p(params, &format!("{prefix}fc2.bias"));
    let hidden = b1.len();
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        let mut pooled = vec![0.0; c];
        for ch in 0..c {
            let plane = &f[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            pooled[ch] = max + mean;
        }
        let mut z = vec![0.0; hidden];
        for j in 0..hidden {
            let mut acc = b1[j];
            for ch in 0..c {
                acc += pooled[ch] * w1[ch * hidden + j];
            }
            z[j] = acc.max(0.0);
        }
        for ch in 0..c {
            let mut acc = b2[ch];
            for j in 0..hidden {
                acc += z[j] * w2[j * c + ch];
            }
            out.push(sigmoid(acc));
        }
    }
    out
}

/// Per-pixel gate from the sum of the cross-channel max and mean maps,
/// through one `k×k` convolution (padding k/2) and a sigmoid. Returns `[n, h, w]`.
pub fn spatial_attention(f: &[f64], (n, c, h, w): (usize, usize, usize, usize), params: &ModelParams<f64>, prefix: &str) -> Vec<f64> {
    let kw = p(params, &format!("{prefix}conv.weight"));
    let kb = p(params, &format!("{prefix}conv.bias"))[0];
    let k = (kw.len() as f64).sqrt() as usize;
    let r = (k / 2) as isize;
    let mut pooled = vec![0.0; n * h * w];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| f[((b * c + ch) * h + y) * w + x]).collect();
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                pooled[(b * h + y) * w + x] = max + vals.iter().sum::<f64>() / c as f64;
            }
        }
    }
    let mut out = vec![0.0; n * h * w];
    for b in 0..n {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = kb;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let wv = kw[((dy + r) as usize) * k + (dx + r) as usize];
                        acc += wv * pooled[(b * h + sy as usize) * w + sx as usize];
                    }
                }
                out[(b * h + y as usize) * w + x as usize] = sigmoid(acc);
            }
        }
    }
    out
}

/// Spatial-gate FFN on tokens `[n, gh·gw, d]`: `fc1`, GeLU, split in two
/// halves, 3×3 depth-wise conv of the second half over the token grid,
/// elementwise product with the first half, then `fc2`.
pub fn sgfn(x: &[f64], n: usize, (gh, gw): (usize, usize), d: usize, params: &ModelParams<f64>, prefix: &str) -> Vec<f64> {
    let w1 = p(params, &format!("{prefix}fc1.weight"));
    let b1 = p(params, &format!("{prefix}fc1.bias"));
    let dw = p(params, &format!("{prefix}dw.weight"));
    let db = p(params, &format!("{prefix}dw.bias"));
    let w2 = p(params, &format!("{prefix}fc2.weight"));
    let b2 = p(params, &format!("{prefix}fc2.bias"));
    let hidden = b1.len();
    let half = hidden / 2;
    let t = gh * gw;
    let h: Vec<f64> = linear(x, d, w1, b1).into_iter().map(gelu).collect();
    let mut gated = vec![0.0; n * t * half];
    for b in 0..n {
        for gy in 0..gh as isize {
            for gx in 0..gw as isize {
                let tok = gy as usize * gw + gx as usize;
                for ch in 0..half {
                    let mut acc = db[ch];
                    for ky in -1isize..=1 {
                        for kx in -1isize..=1 {
                            let (sy, sx) = (gy + ky, gx + kx);
                            if sy < 0 || sx < 0 || sy >= gh as isize || sx >= gw as isize {
                                continue;
                            }
                            let src = sy as usize * gw + sx as usize;
                            let wv = dw[(ch * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                            acc += wv * h[(b * t + src) * hidden + half + ch];
                        }
                    }
                    gated[(b * t + tok) * half + ch] = h[(b * t + tok) * hidden + ch] * acc;
                }
            }
        }
    }
    linear(&gated, half, w2, b2)
}

/// Multi-head scaled dot-product attention with `q/k/v/o` projections.
/// Queries come from `q_src: [n, tq, d]`, keys and values from `kv_src: [n, tk, d]`.
pub fn attention(q_src: &[f64], kv_src: &[f64], n: usize, d: usize, heads: usize, params: &ModelParams<f64>, prefix: &str) -> Vec<f64> {
    let proj = |x: &[f64], name: &str| {
        linear(x, d, p(params, &format!("{prefix}{name}.weight")), p(params, &format!("{prefix}{name}.bias")))
    };
    let (q, k, v) = (proj(q_src, "q"), proj(kv_src, "k"), proj(kv_src, "v"));
    let tq = q_src.len() / (n * d);
    let tk = kv_src.len() / (n * d);
    let dh = d / heads;
    let mut ctx = vec![0.0; n * tq * d];
    for b in 0..n {
        for hd in 0..heads {
            for i in 0..tq {
                let logits: Vec<f64> = (0..tk)
                    .map(|j| {
                        (0..dh)
                            .map(|e| q[(b * tq + i) * d + hd * dh + e] * k[(b * tk + j) * d + hd * dh + e])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..dh {
                    ctx[(b * tq + i) * d + hd * dh + e] =
                        (0..tk).map(|j| exps[j] / z * v[(b * tk + j) * d + hd * dh + e]).sum();
                }
            }
        }
    }
    proj(&ctx, "o")
}

/// Cubic convolution weight with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Direct 2-D bicubic resampling of one plane: half-pixel centers, edge
/// clamping, weights normalized over the 4×4 support.
pub fn bicubic_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let (fy, fx) = (sy.floor() as i64, sx.floor() as i64);
            let (mut acc, mut norm) = (0.0, 0.0);
            for iy in fy - 1..=fy + 2 {
                for ix in fx - 1..=fx + 2 {
                    let wgt = cubic(sy - iy as f64) * cubic(sx - ix as f64);
                    let v = src[iy.clamp(0, h as i64 - 1) as usize * w + ix.clamp(0, w as i64 - 1) as usize];
                    acc += wgt * v;
                    norm += wgt;
                }
            }
            out[oy * ow + ox] = acc / norm;
        }
    }
    out
}

/// Textbook Adam with bias correction on a scalar gradient trace.
pub fn adam_trace(w0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
        out.push(w);
    }
    out
}

/// Parameter count of the network, tallied from the architecture description.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.feat_channels;
    let cin = cfg.in_channels;
    let t = &cfg.transformer;
    let d = t.embed_dim;
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let lin = |i: usize, o: usize| i * o + o;
    let hidden = (c / cfg.csa.reduction).max(1);
    let stage = conv(c, c, 3) + lin(c, hidden) + lin(hidden, c) + conv(1, 1, cfg.csa.spatial_kernel);
    let up: usize = match cfg.scale {
        4 => 2 * conv(4 * c, c, 3),
        s => conv(c * s * s, c, 3),
    };
    let attn = 4 * lin(d, d);
    let ffn = lin(d, 2 * d) + conv(d, 1, 3) + lin(d, d);
    let ln = 2 * d;
    let encoder = t.num_encoders * (2 * ln + attn + ffn);
    let decoder = t.num_decoders * (4 * ln + 2 * attn + ffn);
    let pos = if t.use_positional_embedding { t.pos_grid * t.pos_grid * d } else { 0 };
    let (lr_raw, hr_raw) = (c * t.patch_h * t.patch_w, c * t.patch_h * t.patch_w * cfg.scale * cfg.scale);
    let fusion = cfg.num_stages * (lr_raw * d + pos + encoder)
        + (hr_raw * d + pos + encoder)
        + cfg.num_stages * decoder
        + d * hr_raw;
    conv(c, cin, 3) + cfg.num_stages * stage + up + fusion + conv(c, c, 1) + conv(cin, c, 3)
}
