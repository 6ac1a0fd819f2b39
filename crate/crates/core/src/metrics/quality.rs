//! PSNR and windowed SSIM on `[0, 1]`-ranged images.

use super::MetricsError;
use crate::image::Image;
use crate::num::Scalar;

/// Report cap for identical images, in dB.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<(), MetricsError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MetricsError::ShapeMismatch(
            a.height(),
            a.width(),
            b.height(),
            b.width(),
        ));
    }
    Ok(())
}

/// `10 * log10(1 / MSE)` in dB, capped at [`PSNR_CAP`]. Accumulates in f64.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let mut sum = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        sum += d * d;
    }
    let mse = sum / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean local SSIM over 8x8 windows with stride 4 on the luma plane.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall(h, w, SSIM_WINDOW));
    }
    let ga: Vec<f64> = a.to_grayscale().iter().map(|v| v.as_f64()).collect();
    let gb: Vec<f64> = b.to_grayscale().iter().map(|v| v.as_f64()).collect();

    let mut total = 0.0;
    let mut windows = 0usize;
    let mut wy = 0;
    while wy + SSIM_WINDOW <= h {
        let mut wx = 0;
        while wx + SSIM_WINDOW <= w {
            total += window_ssim(&ga, &gb, w, wy, wx);
            windows += 1;
            wx += SSIM_STRIDE;
        }
        wy += SSIM_STRIDE;
    }
    Ok(total / windows as f64)
}

fn window_ssim(a: &[f64], b: &[f64], width: usize, wy: usize, wx: usize) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in wy..wy + SSIM_WINDOW {
        for x in wx..wx + SSIM_WINDOW {
            let va = a[y * width + x];
            let vb = b[y * width + x];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let mu_a = sa / n;
    let mu_b = sb / n;
    let var_a = saa / n - mu_a * mu_a;
    let var_b = sbb / n - mu_b * mu_b;
    let cov = sab / n - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform01};

    fn random_image(seed: u64, h: usize, w: usize) -> Image<f32> {
        let mut rng = stream(seed, "metric-img", 0);
        let data: Vec<f32> = (0..h * w * 3).map(|_| uniform01(&mut rng) as f32).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let zeros = Image::<f32>::zeros(16, 16);
        let ones = Image::new(16, 16, vec![1.0f32; 16 * 16 * 3]).unwrap();
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        let bad = Image::<f32>::zeros(8, 8);
        assert!(matches!(
            psnr(&a, &bad),
            Err(MetricsError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        for seed in 0..20 {
            let a = random_image(seed, 16, 16);
            let b = random_image(seed + 100, 16, 16);
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        let d = a.get(y, x, c) as f64 - b.get(y, x, c) as f64;
                        sum += d * d;
                        count += 1;
                    }
                }
            }
            let oracle = 10.0 * (1.0 / (sum / count as f64)).log10();
            let got = psnr(&a, &b).unwrap();
            assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn ssim_cases() {
        let a = random_image(3, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        // Inverting a non-constant image cannot keep structural similarity at 1.
        let inv_data: Vec<f32> = a.data().iter().map(|v| 1.0 - v).collect();
        let inv = Image::new(16, 16, inv_data).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let small = random_image(4, 4, 4);
        assert!(matches!(
            ssim(&small, &small),
            Err(MetricsError::ImageTooSmall(..))
        ));
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        // Direct reimplementation of the windowed formula with plain loops.
        for seed in 0..20 {
            let a = random_image(seed + 40, 16, 16);
            let b = random_image(seed + 140, 16, 16);
            let ga = a.to_grayscale();
            let gb = b.to_grayscale();
            let mut vals = Vec::new();
            for wy in (0..=8).step_by(4) {
                for wx in (0..=8).step_by(4) {
                    let mut pa = Vec::new();
                    let mut pb = Vec::new();
                    for y in wy..wy + 8 {
                        for x in wx..wx + 8 {
                            pa.push(ga[y * 16 + x] as f64);
                            pb.push(gb[y * 16 + x] as f64);
                        }
                    }
                    let n = 64.0;
                    let mu_a = pa.iter().sum::<f64>() / n;
                    let mu_b = pb.iter().sum::<f64>() / n;
                    let var_a = pa.iter().map(|v| (v - mu_a) * (v - mu_a)).sum::<f64>() / n;
                    let var_b = pb.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
                    let cov = pa
                        .iter()
                        .zip(&pb)
                        .map(|(x, y)| (x - mu_a) * (y - mu_b))
                        .sum::<f64>()
                        / n;
                    vals.push(
                        ((2.0 * mu_a * mu_b + 1e-4) * (2.0 * cov + 9e-4))
                            / ((mu_a * mu_a + mu_b * mu_b + 1e-4) * (var_a + var_b + 9e-4)),
                    );
                }
            }
            let oracle = vals.iter().sum::<f64>() / vals.len() as f64;
            let got = ssim(&a, &b).unwrap();
            assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn metric_bounds_on_random_pairs() {
        for seed in 0..50 {
            let a = random_image(seed + 500, 16, 16);
            let b = random_image(seed + 700, 16, 16);
            let p = psnr(&a, &b).unwrap();
            assert!((0.0..=PSNR_CAP).contains(&p));
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s), "ssim {s}");
        }
    }
}
