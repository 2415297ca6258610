//! Image quality metrics on `[0, 1]` RGB images.

use crate::error::{Error, Result};
use crate::scenes::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            "metrics",
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `-10 log10(mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter(&x, w, h, &taps);
        let my = filter(&y, w, h, &taps);
        let mxx = filter(&prod(&x, &x), w, h, &taps);
        let myy = filter(&prod(&y, &y), w, h, &taps);
        let mxy = filter(&prod(&x, &y), w, h, &taps);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = mxx[i] - ux * ux;
                let vy = myy[i] - uy * uy;
                let cov = mxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    /// Direct windowed statistics with 2-D Gaussian weights.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (w, h) = (a.width(), a.height());
        let r = 5i64;
        let weight = |dx: i64, dy: i64| (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
        let norm: f64 = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| weight(dx, dy))).sum();
        let mut per_channel = Vec::new();
        for ch in 0..3 {
            let mut acc = 0.0;
            let mut count = 0;
            for cy in 5..h - 5 {
                for cx in 5..w - 5 {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let q = weight(dx, dy) / norm;
                            let px = (cx as i64 + dx) as usize;
                            let py = (cy as i64 + dy) as usize;
                            let u = a.pixel(px, py)[ch] as f64;
                            let v = b.pixel(px, py)[ch] as f64;
                            sx += q * u;
                            sy += q * v;
                            sxx += q * u * u;
                            syy += q * v * v;
                            sxy += q * u * v;
                        }
                    }
                    let (c1, c2) = (0.0001, 0.0009);
                    let num = (2.0 * sx * sy + c1) * (2.0 * (sxy - sx * sy) + c2);
                    let den = (sx * sx + sy * sy + c1) * (sxx - sx * sx + syy - sy * sy + c2);
                    acc += num / den;
                    count += 1;
                }
            }
            per_channel.push(acc / count as f64);
        }
        per_channel.iter().sum::<f64>() / 3.0
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(16, 16, &mut rng);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_mse_one_hundredth_is_20() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = random_image(16, 16, &mut rng);
            let b = random_image(16, 16, &mut rng);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let a = Image::filled(16, 16, [0.0; 3]);
        let b = Image::filled(16, 12, [0.0; 3]);
        assert!(psnr(&a, &b).is_err() && ssim(&a, &b).is_err());
    }
}
