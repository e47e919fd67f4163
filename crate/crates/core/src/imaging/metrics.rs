//! Full-reference quality metrics, evaluated in `f64`.

use super::{ImageError, ImageF32};

/// Returned by [`psnr`] when both images are identical.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_shapes(a: &ImageF32, b: &ImageF32) -> Result<(), ImageError> {
    if a.shape() != b.shape() {
        return Err(ImageError::ShapeMismatch { left: a.shape(), right: b.shape() });
    }
    Ok(())
}

pub fn mse(a: &ImageF32, b: &ImageF32) -> Result<f64, ImageError> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `peak` is 1 for `[0,1]` images.
pub fn psnr(a: &ImageF32, b: &ImageF32, peak: f64) -> Result<f64, ImageError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g[y] * g[x];
            total += g[y] * g[x];
        }
    }
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity, averaged over valid window positions and
/// then over channels. Dynamic range is 1.
pub fn ssim(a: &ImageF32, b: &ImageF32) -> Result<f64, ImageError> {
    check_shapes(a, b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ImageError::TooSmall { h, w, min: SSIM_WINDOW });
    }
    let win = gaussian_window();
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    let row = (y + dy) * w + x;
                    for dx in 0..SSIM_WINDOW {
                        let g = win[dy * SSIM_WINDOW + dx];
                        let va = pa[row + dx] as f64;
                        let vb = pb[row + dx] as f64;
                        ma += g * va;
                        mb += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_known_values() {
        let a = ImageF32::filled(3, 4, 4, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = ImageF32::filled(3, 4, 4, 0.6);
        let p = psnr(&a, &b, 1.0).unwrap();
        let d = 0.6f32 as f64 - 0.5f32 as f64;
        assert!((p - 10.0 * (1.0 / (d * d)).log10()).abs() < 1e-9);
        assert!((p - 20.0).abs() < 1e-5);
        let c = ImageF32::filled(3, 4, 5, 0.5);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_size_check() {
        let data: Vec<f32> = (0..3 * 16 * 16).map(|i| ((i * 7) % 29) as f32 / 28.0).collect();
        let a = ImageF32::new(3, 16, 16, data).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = ImageF32::filled(3, 10, 16, 0.0);
        assert!(matches!(ssim(&small, &small), Err(ImageError::TooSmall { .. })));
        let flat_a = ImageF32::filled(3, 12, 12, 0.5);
        let flat_b = ImageF32::filled(3, 12, 12, 0.25);
        let expect = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        assert!((ssim(&flat_a, &flat_b).unwrap() - expect).abs() < 1e-9);
        let window = gaussian_window();
        assert!((window.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
