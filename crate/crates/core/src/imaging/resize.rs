//! Separable cubic-convolution resampling.
//!
//! Output sample `d` reads source coordinate `(d + 0.5)·in/out − 0.5`,
//! taps outside the image are clamped to the edge, and no prefilter is
//! applied when shrinking.

use super::ImageF32;

/// Kernel parameter of the cubic convolution (Catmull-Rom).
pub const CUBIC_A: f64 = -0.5;

pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four source indices and weights for each output position.
fn taps(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = (d as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut idx = [0usize; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let i = base - 1 + k as isize;
                idx[k] = i.clamp(0, input as isize - 1) as usize;
                wts[k] = cubic_weight(t - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Resamples a planar `c×h×w` buffer to `c×out_h×out_w`.
pub fn bicubic_planar(src: &[f64], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), c * h * w);
    assert!(out_h > 0 && out_w > 0, "output extents must be positive");
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut out = vec![0.0; c * out_h * out_w];
    let mut rows = vec![0.0; h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            for (x, (idx, wts)) in tx.iter().enumerate() {
                rows[y * out_w + x] = (0..4).map(|k| wts[k] * line[idx[k]]).sum();
            }
        }
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (y, (idx, wts)) in ty.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] = (0..4).map(|k| wts[k] * rows[idx[k] * out_w + x]).sum();
            }
        }
    }
    out
}

pub fn bicubic_resize(img: &ImageF32, out_h: usize, out_w: usize) -> ImageF32 {
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let out = bicubic_planar(&src, img.channels, img.height, img.width, out_h, out_w);
    ImageF32 {
        channels: img.channels,
        height: out_h,
        width: out_w,
        data: out.into_iter().map(|v| v as f32).collect(),
    }
}
