//! Differentiable operations recorded on a [`Tape`].

use super::kernels::{self, ConvGeom};
use super::tape::Tape;
use super::{fault, strides_of, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `0.5·x·(1 + erf(x/√2))`.
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative at `x` given the forward output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let cdf = T::from_f64(0.5)
                    * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * T::from_f64(0.5)).exp()
                    * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
            Activation::Sigmoid => {
                y * (T::one() - y) * T::from_f64(fault::sigmoid_backward_scale())
            }
        }
    }
}

/// Reductions of a `[N,C,H,W]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Global max over H,W per channel, giving `[N,C,1,1]`.
    ChannelMax,
    ChannelAvg,
    /// Max across channels per pixel, giving `[N,1,H,W]`.
    SpatialMax,
    SpatialAvg,
}

/// How the right operand of an elementwise op maps onto the left one.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Bcast {
    Same,
    /// `[N,C,1,1]` against `[N,C,H,W]`.
    Channel { hw: usize },
    /// `[N,1,H,W]` against `[N,C,H,W]`.
    Spatial { c: usize, hw: usize },
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        if a.len() == 4 && b.len() == 4 && a[0] == b[0] {
            let hw = a[2] * a[3];
            if b[1] == a[1] && b[2] == 1 && b[3] == 1 {
                return Ok(Bcast::Channel { hw });
            }
            if b[1] == 1 && b[2] == a[2] && b[3] == a[3] {
                return Ok(Bcast::Spatial { c: a[1], hw });
            }
        }
        Err(Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() })
    }

    #[inline]
    fn map(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Channel { hw } => i / hw,
            Bcast::Spatial { c, hw } => (i / (c * hw)) * hw + i % hw,
        }
    }
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        p: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        mode: PoolMode,
    },
    /// `out[o] = x[index[o]]`; covers permutes, pixel shuffles and slices.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    /// `b` has the shape of a trailing suffix of `x`.
    AddBias {
        x: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    L1Mean {
        a: Var,
        b: Var,
    },
}

impl<T: Real> Op<T> {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::L1Mean { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Act { x, .. }
            | Op::Softmax { x }
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Gather { x, .. }
            | Op::Scale { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![*x],
        }
    }

    /// Vector-Jacobian products of node `out` for the inputs that need them.
    pub fn backward(&self, tape: &Tape<T>, out: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| tape.nodes[v.index()].value.data();
        let needs = |v: Var| tape.nodes[v.index()].needs_grad;
        let zeros = |v: Var| vec![T::zero(); tape.nodes[v.index()].value.numel()];
        let mut res = Vec::new();
        match self {
            Op::Leaf => {}
            &Op::Matmul { a, b, batch, a_batched, b_batched, m, k, p } => {
                if needs(a) {
                    let mut da = zeros(a);
                    kernels::matmul_grad_a(g, val(b), &mut da, batch, a_batched, b_batched, m, k, p);
                    res.push((a, da));
                }
                if needs(b) {
                    let mut db = zeros(b);
                    kernels::matmul_grad_w(val(a), g, &mut db, batch, a_batched, b_batched, m, k, p);
                    res.push((b, db));
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                if needs(x) {
                    let mut dx = zeros(x);
                    kernels::conv2d_grad_input(&geom, g, val(w), &mut dx);
                    res.push((x, dx));
                }
                if needs(w) {
                    let mut dw = zeros(w);
                    kernels::conv2d_grad_weight(&geom, g, val(x), &mut dw);
                    res.push((w, dw));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = zeros(b);
                    kernels::conv2d_grad_bias(&geom, g, &mut db);
                    res.push((b, db));
                }
            }
            &Op::Act { x, kind } => {
                let y = tape.nodes[out].value.data();
                let dx = val(x)
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                    .collect();
                res.push((x, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).len();
                let gam = val(*gamma);
                if needs(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    let inv_d = T::one() / T::from_usize(d);
                    for (row, r) in rstd.iter().enumerate() {
                        let span = row * d..(row + 1) * d;
                        let (gr, xh) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            dx[row * d + j] = *r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    res.push((*x, dx));
                }
                if needs(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gv * xh;
                    }
                    res.push((*gamma, dg));
                }
                if needs(*beta) {
                    let mut db = vec![T::zero(); d];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                    res.push((*beta, db));
                }
            }
            &Op::Softmax { x } => {
                let y = &tape.nodes[out].value;
                let d = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = zeros(*x);
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                res.push((*x, dx));
            }
            &Op::AvgPool { x, mode } => {
                let s = tape.nodes[x.index()].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = zeros(x);
                match mode {
                    PoolMode::ChannelAvg => {
                        let inv = T::one() / T::from_usize(hw);
                        for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                            plane.iter_mut().for_each(|v| *v = gv * inv);
                        }
                    }
                    PoolMode::SpatialAvg => {
                        let inv = T::one() / T::from_usize(c);
                        for ni in 0..n {
                            for ci in 0..c {
                                for p in 0..hw {
                                    dx[(ni * c + ci) * hw + p] = g[ni * hw + p] * inv;
                                }
                            }
                        }
                    }
                    _ => unreachable!("max modes use MaxPool"),
                }
                res.push((x, dx));
            }
            Op::Gather { x, index } => {
                let mut dx = zeros(*x);
                for (&src, &gv) in index.iter().zip(g) {
                    dx[src] += gv;
                }
                res.push((*x, dx));
            }
            &Op::Add { a, b, bc } => {
                if needs(a) {
                    res.push((a, g.to_vec()));
                }
                if needs(b) {
                    let mut db = zeros(b);
                    for (i, &gv) in g.iter().enumerate() {
                        db[bc.map(i)] += gv;
                    }
                    res.push((b, db));
                }
            }
            &Op::Mul { a, b, bc } => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let da = g.iter().enumerate().map(|(i, &gv)| gv * bv[bc.map(i)]).collect();
                    res.push((a, da));
                }
                if needs(b) {
                    let mut db = zeros(b);
                    for (i, &gv) in g.iter().enumerate() {
                        db[bc.map(i)] += gv * av[i];
                    }
                    res.push((b, db));
                }
            }
            &Op::AddBias { x, b } => {
                if needs(x) {
                    res.push((x, g.to_vec()));
                }
                if needs(b) {
                    let mut db = zeros(b);
                    let m = db.len();
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % m] += gv;
                    }
                    res.push((b, db));
                }
            }
            &Op::Scale { x, factor } => {
                res.push((x, g.iter().map(|&v| v * factor).collect()));
            }
            &Op::Reshape { x } => res.push((x, g.to_vec())),
            &Op::Sum { x } => res.push((x, vec![g[0]; tape.nodes[x.index()].value.numel()])),
            &Op::L1Mean { a, b } => {
                let (av, bv) = (val(a), val(b));
                let inv = g[0] / T::from_usize(av.len());
                let sign: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        if x > y {
                            inv
                        } else if x < y {
                            -inv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if needs(b) {
                    res.push((b, sign.iter().map(|&s| -s).collect()));
                }
                if needs(a) {
                    res.push((a, sign));
                }
            }
        }
        res
    }
}

fn require_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects a rank-{rank} tensor"),
        });
    }
    Ok(())
}

/// Source offsets of `pixel_shuffle`: output `[N,C,H·r,W·r]` from input
/// `[N,C·r²,H,W]` with `out[n,c,h·r+i,w·r+j] = in[n,c·r²+i·r+j,h,w]`.
fn shuffle_index(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h * r, w * r);
    let mut index = Vec::with_capacity(n * c * ho * wo);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, i) = (oy / r, oy % r);
                    let (x, j) = (ox / r, ox % r);
                    let cin = ci * r * r + i * r + j;
                    index.push(((ni * c * r * r + cin) * h + y) * w + x);
                }
            }
        }
    }
    index
}

impl<T: Real> Tape<T> {
    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.index()].value.data()
    }

    /// Batched matrix product `[..,M,K] × [..,K,P]`.
    ///
    /// Leading extents must agree, or one side may be a plain matrix that is
    /// shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        let mismatch = || Error::ShapeMismatch { op: "matmul", left: sa.clone(), right: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let lead = match (ba.is_empty(), bb.is_empty()) {
            (_, true) => ba.to_vec(),
            (true, false) => bb.to_vec(),
            (false, false) if ba == bb => ba.to_vec(),
            _ => return Err(mismatch()),
        };
        let batch: usize = lead.iter().product();
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        let mut out = vec![T::zero(); batch * m * p];
        kernels::matmul_forward(self.data(a), self.data(b), &mut out, batch, a_batched, b_batched, m, k, p);
        let mut shape = lead;
        shape.extend([m, p]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Matmul { a, b, batch, a_batched, b_batched, m, k, p }))
    }

    /// Stride-1 cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let sw = self.node(w)?.value.shape().to_vec();
        require_rank("conv2d", &sx, 4)?;
        require_rank("conv2d", &sw, 4)?;
        let (kh, kw) = (sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel { kh, kw });
        }
        if groups == 0 || sx[1] % groups != 0 {
            return Err(Error::GroupMismatch { what: "input channels", channels: sx[1], groups });
        }
        if sw[0] % groups != 0 {
            return Err(Error::GroupMismatch { what: "output channels", channels: sw[0], groups });
        }
        if sw[1] != sx[1] / groups {
            return Err(Error::ShapeMismatch { op: "conv2d", left: sx, right: sw });
        }
        if sx[2] + 2 * padding < kh || sx[3] + 2 * padding < kw {
            return Err(Error::ShapeMismatch { op: "conv2d", left: sx, right: sw });
        }
        if let Some(b) = b {
            let sb = self.node(b)?.value.shape();
            if sb != [sw[0]] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", left: sw.clone(), right: sb.to_vec() });
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh,
            kw,
            pad: padding,
            groups,
        };
        let mut out = vec![T::zero(); geom.n * geom.cout * geom.out_h() * geom.out_w()];
        kernels::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)), &mut out);
        let value = Tensor::new([geom.n, geom.cout, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| kind.apply(v)).collect())?;
        Ok(self.push(value, Op::Act { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Normalizes each vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let d = *sx.last().unwrap_or(&1);
        for p in [gamma, beta] {
            let sp = self.node(p)?.value.shape();
            if sp != [d] {
                return Err(Error::ShapeMismatch { op: "layer_norm", left: sx, right: sp.to_vec() });
            }
        }
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let eps = T::from_f64(eps);
        let inv_d = T::one() / T::from_usize(d);
        let xs = self.data(x);
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * gm[j] + bt[j]);
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let d = *xv.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    pub fn pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let xv = &self.node(x)?.value;
        require_rank("pool", xv.shape(), 4)?;
        let s = xv.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let d = xv.data();
        match mode {
            PoolMode::ChannelMax => {
                let mut out = Vec::with_capacity(n * c);
                let mut argmax = Vec::with_capacity(n * c);
                for (pi, plane) in d.chunks(hw).enumerate() {
                    let mut best = 0;
                    for (j, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = j;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(pi * hw + best);
                }
                let value = Tensor::new([n, c, 1, 1], out)?;
                Ok(self.push(value, Op::MaxPool { x, argmax }))
            }
            PoolMode::SpatialMax => {
                let mut out = Vec::with_capacity(n * hw);
                let mut argmax = Vec::with_capacity(n * hw);
                for ni in 0..n {
                    for p in 0..hw {
                        let mut best = ni * c * hw + p;
                        for ci in 1..c {
                            let idx = (ni * c + ci) * hw + p;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        out.push(d[best]);
                        argmax.push(best);
                    }
                }
                let value = Tensor::new([n, 1, h, w], out)?;
                Ok(self.push(value, Op::MaxPool { x, argmax }))
            }
            PoolMode::ChannelAvg => {
                let inv = T::one() / T::from_usize(hw);
                let out = d.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                let value = Tensor::new([n, c, 1, 1], out)?;
                Ok(self.push(value, Op::AvgPool { x, mode }))
            }
            PoolMode::SpatialAvg => {
                let inv = T::one() / T::from_usize(c);
                let mut out = vec![T::zero(); n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..hw {
                            out[ni * hw + p] += d[(ni * c + ci) * hw + p];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v = *v * inv);
                let value = Tensor::new([n, 1, h, w], out)?;
                Ok(self.push(value, Op::AvgPool { x, mode }))
            }
        }
    }

    /// `[N,C·r²,H,W] → [N,C,H·r,W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.node(x)?.value.shape().to_vec();
        require_rank("pixel_shuffle", &s, 4)?;
        if r == 0 || s[1] % (r * r) != 0 {
            return Err(Error::ShuffleChannels { channels: s[1], r2: r * r });
        }
        let c = s[1] / (r * r);
        let index = shuffle_index(s[0], c, s[2], s[3], r);
        self.gather(x, [s[0], c, s[2] * r, s[3] * r], index)
    }

    /// Inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.node(x)?.value.shape().to_vec();
        require_rank("pixel_unshuffle", &s, 4)?;
        if r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("spatial extents not divisible by r={r}"),
            });
        }
        let (h, w) = (s[2] / r, s[3] / r);
        let fwd = shuffle_index(s[0], s[1], h, w, r);
        // fwd[o] is where shuffled element o came from; invert it
        let mut index = vec![0; fwd.len()];
        for (o, &src) in fwd.iter().enumerate() {
            index[src] = o;
        }
        self.gather(x, [s[0], s[1] * r * r, h, w], index)
    }

    pub(crate) fn gather(&mut self, x: Var, shape: impl Into<Vec<usize>>, index: Vec<usize>) -> Result<Var> {
        let xs = self.data(x);
        let out = index.iter().map(|&i| xs[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Gather { x, index }))
    }

    /// Reorders axes so that output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.node(x)?.value.shape().to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape { shape: s, reason: format!("bad permutation {perm:?}") });
        }
        let in_strides = strides_of(&s);
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel: usize = s.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; s.len()];
        let mut offset = 0usize;
        for _ in 0..numel {
            index.push(offset);
            for axis in (0..counter.len()).rev() {
                counter[axis] += 1;
                offset += strides[axis];
                if counter[axis] < out_shape[axis] {
                    break;
                }
                offset -= strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
        self.gather(x, out_shape, index)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.node(x)?.value.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("slice axis {axis} [{start}, {})", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * s[axis] + a) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut shape = s;
        shape[axis] = len;
        self.gather(x, shape, index)
    }

    /// `[G₁,G₂,D] → [gh·gw, D]`, the top-left `gh × gw` corner flattened row-major.
    pub fn grid_crop(&mut self, x: Var, gh: usize, gw: usize) -> Result<Var> {
        let s = self.node(x)?.value.shape().to_vec();
        require_rank("grid_crop", &s, 3)?;
        if gh > s[0] || gw > s[1] || gh == 0 || gw == 0 {
            return Err(Error::InvalidShape { shape: s, reason: format!("cannot crop {gh}x{gw}") });
        }
        let d = s[2];
        let mut index = Vec::with_capacity(gh * gw * d);
        for i in 0..gh {
            for j in 0..gw {
                let base = (i * s[1] + j) * d;
                index.extend(base..base + d);
            }
        }
        self.gather(x, [gh * gw, d], index)
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Bcast, Vec<T>, Vec<usize>)> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        let bc = Bcast::resolve(op, &sa, &sb)?;
        Ok((bc, self.data(b).to_vec(), sa))
    }

    /// Elementwise sum; `b` may also be an `[N,C,1,1]` or `[N,1,H,W]` gate.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, bv, shape) = self.elementwise(a, b, "add")?;
        let out = self.data(a).iter().enumerate().map(|(i, &v)| v + bv[bc.map(i)]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Add { a, b, bc }))
    }

    /// Elementwise product; `b` may also be an `[N,C,1,1]` or `[N,1,H,W]` gate.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, bv, shape) = self.elementwise(a, b, "mul")?;
        let out = self.data(a).iter().enumerate().map(|(i, &v)| v * bv[bc.map(i)]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Mul { a, b, bc }))
    }

    /// Adds `b` repeated over the leading axes of `x`; `b`'s shape must be
    /// a trailing suffix of `x`'s.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(Error::ShapeMismatch { op: "add_bias", left: sx, right: sb });
        }
        let bv = self.data(b);
        let m = bv.len();
        let out = self.data(x).iter().enumerate().map(|(i, &v)| v + bv[i % m]).collect();
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::AddBias { x, b }))
    }

    /// `x·w + b` over the last axis, with `w: [Din, Dout]` and `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let xv = &self.node(x)?.value;
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * factor).collect())?;
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.node(x)?.value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "l1_loss", left: sa, right: sb });
        }
        let (av, bv) = (self.data(a), self.data(b));
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Tensor::scalar(total / T::from_usize(av.len()));
        Ok(self.push(value, Op::L1Mean { a, b }))
    }
}
