//! Raw loops behind the differentiable ops.
//!
//! Every output element is produced by exactly one task with a fixed
//! summation order, so results do not depend on the rayon thread count.

use rayon::prelude::*;

use super::Real;

/// Below this many multiply-adds the loops run on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// `c[b] = a[b] · w[b]` for row-major `a: [m,k]`, `w: [k,p]`.
///
/// `a_batched`/`w_batched` say whether the operand advances with the batch
/// index or is shared by all batches.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_forward<T: Real>(
    a: &[T],
    w: &[T],
    out: &mut [T],
    batch: usize,
    a_batched: bool,
    w_batched: bool,
    m: usize,
    k: usize,
    p: usize,
) {
    let row = |(r, out_row): (usize, &mut [T])| {
        let b = r / m;
        let i = r % m;
        let a_off = if a_batched { b * m * k } else { 0 } + i * k;
        let w_off = if w_batched { b * k * p } else { 0 };
        for kk in 0..k {
            let av = a[a_off + kk];
            if av == T::zero() {
                continue;
            }
            let w_row = &w[w_off + kk * p..w_off + (kk + 1) * p];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += av * wv;
            }
        }
    };
    if batch * m * k * p >= PAR_THRESHOLD {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
}

/// `da[b] += g[b] · w[b]ᵀ`
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_grad_a<T: Real>(
    g: &[T],
    w: &[T],
    da: &mut [T],
    batch: usize,
    a_batched: bool,
    w_batched: bool,
    m: usize,
    k: usize,
    p: usize,
) {
    if a_batched {
        let row = |(r, da_row): (usize, &mut [T])| {
            let b = r / m;
            let i = r % m;
            let g_row = &g[(b * m + i) * p..(b * m + i + 1) * p];
            let w_off = if w_batched { b * k * p } else { 0 };
            for (kk, d) in da_row.iter_mut().enumerate() {
                let w_row = &w[w_off + kk * p..w_off + (kk + 1) * p];
                *d += dot(g_row, w_row);
            }
        };
        if batch * m * k * p >= PAR_THRESHOLD {
            da.par_chunks_mut(k).enumerate().for_each(row);
        } else {
            da.chunks_mut(k).enumerate().for_each(row);
        }
    } else {
        // a shared across the batch: sum the per-batch contributions
        let row = |(i, da_row): (usize, &mut [T])| {
            for b in 0..batch {
                let g_row = &g[(b * m + i) * p..(b * m + i + 1) * p];
                let w_off = if w_batched { b * k * p } else { 0 };
                for (kk, d) in da_row.iter_mut().enumerate() {
                    *d += dot(g_row, &w[w_off + kk * p..w_off + (kk + 1) * p]);
                }
            }
        };
        if batch * m * k * p >= PAR_THRESHOLD {
            da.par_chunks_mut(k).enumerate().for_each(row);
        } else {
            da.chunks_mut(k).enumerate().for_each(row);
        }
    }
}

/// `dw[b] += a[b]ᵀ · g[b]`, summed over the batch when `w` is shared.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_grad_w<T: Real>(
    a: &[T],
    g: &[T],
    dw: &mut [T],
    batch: usize,
    a_batched: bool,
    w_batched: bool,
    m: usize,
    k: usize,
    p: usize,
) {
    // one task per row kk of dw (per batch when w is batched)
    let row = |(r, dw_row): (usize, &mut [T])| {
        let (batches, kk) = if w_batched {
            (r / k..r / k + 1, r % k)
        } else {
            (0..batch, r)
        };
        for b in batches {
            let a_off = if a_batched { b * m * k } else { 0 };
            for i in 0..m {
                let av = a[a_off + i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let g_row = &g[(b * m + i) * p..(b * m + i + 1) * p];
                for (d, &gv) in dw_row.iter_mut().zip(g_row) {
                    *d += av * gv;
                }
            }
        }
    };
    if batch * m * k * p >= PAR_THRESHOLD {
        dw.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        dw.chunks_mut(p).enumerate().for_each(row);
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn work(&self) -> usize {
        self.n * self.cout * self.cin_g() * self.kh * self.kw * self.out_h() * self.out_w()
    }

    /// Valid output columns for kernel column `kx`: those whose input
    /// column `ox + kx - pad` lies inside the image.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.out_w());
        (lo, hi.max(lo))
    }

    fn oy_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.out_h());
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let task = |(idx, o): (usize, &mut [T])| {
        let n = idx / g.cout;
        let co = idx % g.cout;
        let grp = co / cout_g;
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            let xin = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.kw {
                    let wv = wt[((co * cin_g + cl) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.ox_range(kx);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - g.pad;
                        let src = &xin[iy * g.w + ox0 + kx - g.pad..iy * g.w + ox1 + kx - g.pad];
                        let dst = &mut o[oy * wo + ox0..oy * wo + ox1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(task);
    } else {
        out.chunks_mut(plane).enumerate().for_each(task);
    }
}

pub(crate) fn conv2d_grad_input<T: Real>(g: &ConvGeom, dout: &[T], wt: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let task = |(idx, d): (usize, &mut [T])| {
        let n = idx / g.cin;
        let ci = idx % g.cin;
        let grp = ci / cin_g;
        let cl = ci % cin_g;
        for co in grp * cout_g..(grp + 1) * cout_g {
            let go = &dout[(n * g.cout + co) * ho * wo..(n * g.cout + co + 1) * ho * wo];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.kw {
                    let wv = wt[((co * cin_g + cl) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.ox_range(kx);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - g.pad;
                        let src = &go[oy * wo + ox0..oy * wo + ox1];
                        let dst = &mut d[iy * g.w + ox0 + kx - g.pad..iy * g.w + ox1 + kx - g.pad];
                        for (dv, &s) in dst.iter_mut().zip(src) {
                            *dv += wv * s;
                        }
                    }
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        dx.par_chunks_mut(g.h * g.w).enumerate().for_each(task);
    } else {
        dx.chunks_mut(g.h * g.w).enumerate().for_each(task);
    }
}

pub(crate) fn conv2d_grad_weight<T: Real>(g: &ConvGeom, dout: &[T], x: &[T], dw: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let ksize = cin_g * g.kh * g.kw;
    let task = |(co, d): (usize, &mut [T])| {
        let grp = co / cout_g;
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            for ky in 0..g.kh {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.ox_range(kx);
                    let mut s = T::zero();
                    for n in 0..g.n {
                        let go = &dout[(n * g.cout + co) * ho * wo..(n * g.cout + co + 1) * ho * wo];
                        let xin = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
                        for oy in oy0..oy1 {
                            let iy = oy + ky - g.pad;
                            let a = &go[oy * wo + ox0..oy * wo + ox1];
                            let b = &xin[iy * g.w + ox0 + kx - g.pad..iy * g.w + ox1 + kx - g.pad];
                            s += dot(a, b);
                        }
                    }
                    d[(cl * g.kh + ky) * g.kw + kx] += s;
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        dw.par_chunks_mut(ksize).enumerate().for_each(task);
    } else {
        dw.chunks_mut(ksize).enumerate().for_each(task);
    }
}

pub(crate) fn conv2d_grad_bias<T: Real>(g: &ConvGeom, dout: &[T], db: &mut [T]) {
    let plane = g.out_h() * g.out_w();
    for (co, d) in db.iter_mut().enumerate() {
        let mut s = T::zero();
        for n in 0..g.n {
            for &v in &dout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane] {
                s += v;
            }
        }
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..4 * 5).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut out = vec![0.0; 2 * 3 * 5];
        matmul_forward(&a, &w, &mut out, 2, true, false, 3, 4, 5);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for kk in 0..4 {
                        s += a[b * 12 + i * 4 + kk] * w[kk * 5 + j];
                    }
                    assert!((out[b * 15 + i * 5 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_ranges_cover_padding() {
        let g = ConvGeom { n: 1, cin: 1, h: 3, w: 3, cout: 1, kh: 3, kw: 3, pad: 1, groups: 1 };
        assert_eq!(g.ox_range(0), (1, 3));
        assert_eq!(g.ox_range(1), (0, 3));
        assert_eq!(g.ox_range(2), (0, 2));
    }
}
