//! Image comparison metrics on `[0, 1]` RGB images.

use crate::raster::RgbImage;

/// Reported instead of infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_dims(a: &RgbImage, b: &RgbImage) {
    assert_eq!(
        (a.width, a.height),
        (b.width, b.height),
        "metric inputs must have equal dimensions"
    );
}

/// Mean squared error over all channels.
pub fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
    check_dims(a, b);
    let n = (a.pixels.len() * 3).max(1) as f64;
    a.pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as f64 - q[c] as f64).powi(2)))
        .sum::<f64>()
        / n
}

/// Mean absolute error over all channels.
pub fn l1(a: &RgbImage, b: &RgbImage) -> f64 {
    check_dims(a, b);
    let n = (a.pixels.len() * 3).max(1) as f64;
    a.pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as f64 - q[c] as f64).abs()))
        .sum::<f64>()
        / n
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio in dB with peak 1.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    psnr_from_mse(mse(a, b))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Structural similarity: 11×11 Gaussian window (σ = 1.5), computed per
/// channel over fully-contained windows and averaged. Images smaller than
/// the window are treated as a single window with uniform weights.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    check_dims(a, b);
    let (w, h) = (a.width, a.height);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let score = |mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64| {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cxy = sxy - mx * my;
        ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    };
    let mut total = 0.0;
    let mut count = 0usize;
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        let n = (w * h).max(1) as f64;
        for c in 0..3 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (p, q) in a.pixels.iter().zip(&b.pixels) {
                let (x, y) = (p[c] as f64, q[c] as f64);
                mx += x;
                my += y;
                sxx += x * x;
                syy += y * y;
                sxy += x * y;
            }
            total += score(mx / n, my / n, sxx / n, syy / n, sxy / n);
            count += 1;
        }
        return total / count as f64;
    }
    let g = gaussian_window();
    for c in 0..3 {
        for r0 in 0..=h - SSIM_WINDOW {
            for c0 in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, gi) in g.iter().enumerate() {
                    for (j, gj) in g.iter().enumerate() {
                        let k = (r0 + i) * w + c0 + j;
                        let wt = gi * gj;
                        let x = a.pixels[k][c] as f64;
                        let y = b.pixels[k][c] as f64;
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                total += score(mx, my, sxx, syy, sxy);
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::filled(w, h, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                let v = (r * w + c) as f32 / (w * h) as f32;
                img.set(r, c, [v, 1.0 - v, 0.5 * v]);
            }
        }
        img
    }

    #[test]
    fn identical_images() {
        let a = ramp(16, 16);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        assert_eq!(l1(&a, &a), 0.0);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset() {
        let a = RgbImage::filled(4, 4, [0.5; 3]);
        let b = RgbImage::filled(4, 4, [0.6; 3]);
        assert!((mse(&a, &b) - 0.01).abs() < 1e-7);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-4);
        assert!((l1(&a, &b) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn ssim_drops_with_noise() {
        let a = ramp(24, 24);
        let mut b = a.clone();
        for (i, p) in b.pixels.iter_mut().enumerate() {
            let s = if i % 2 == 0 { 0.1 } else { -0.1 };
            *p = p.map(|v| (v + s).clamp(0.0, 1.0));
        }
        let s = ssim(&a, &b);
        assert!(s < 0.9 && s > -1.0, "{s}");
    }
}
