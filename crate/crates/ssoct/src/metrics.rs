//! Image quality metrics and per-A-line spatial-frequency analysis.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::acquisition::OctImage;
use crate::error::{Error, Result};
use crate::fft;

/// PSNR in dB for images normalized to [0, 1] (MAX = 1):
/// `10 * log10(1 / MSE)`. Identical images return `f64::INFINITY`,
/// reported downstream as "inf".
pub fn psnr(a: &OctImage, b: &OctImage) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "psnr",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    let n = a.pixels().len() as f64;
    let mse: f64 =
        a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -half..=half {
        for x in -half..=half {
            let r2 = (y * y + x * x) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5),
/// C1 = 0.01^2, C2 = 0.03^2 for a [0, 1] dynamic range, windows placed
/// fully inside the images (no padding).
pub fn ssim(a: &OctImage, b: &OctImage) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {}x{} smaller than the {0}x{0} window", h, SSIM_WINDOW),
        ));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for wy in 0..SSIM_WINDOW {
                let ra = &a.row(top + wy)[left..left + SSIM_WINDOW];
                let rb = &b.row(top + wy)[left..left + SSIM_WINDOW];
                let wrow = &win[wy * SSIM_WINDOW..(wy + 1) * SSIM_WINDOW];
                for wx in 0..SSIM_WINDOW {
                    let g = wrow[wx];
                    mu_a += g * ra[wx];
                    mu_b += g * rb[wx];
                    aa += g * (ra[wx] * ra[wx]);
                    bb += g * (rb[wx] * rb[wx]);
                    // associate symmetrically so ssim(a, b) == ssim(b, a) bitwise
                    ab += g * (ra[wx] * rb[wx]);
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = ((mu_a * mu_a + mu_b * mu_b) + SSIM_C1) * ((var_a + var_b) + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-column log-magnitude spectra plus their column-average, DC first.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyProfile {
    /// `per_column[col][bin]`, W columns of H bins each.
    pub per_column: Vec<Vec<f64>>,
    /// Mean over columns, per bin (length H).
    pub averaged: Vec<f64>,
}

const PROFILE_EPSILON: f64 = 1e-12;

/// 1-D Fourier transform along each A-line (vertical axis): per column the
/// DFT magnitude with `log10(mag + 1e-12)`, and the bin-wise mean profile.
pub fn spatial_frequency_profile(img: &OctImage) -> Result<FrequencyProfile> {
    let h = img.height();
    if h < 2 {
        return Err(Error::shape("spatial_frequency_profile", "image height must be >= 2"));
    }
    let w = img.width();
    let mut per_column = Vec::with_capacity(w);
    let mut averaged = vec![0.0f64; h];
    for col in 0..w {
        let column: Vec<f64> = (0..h).map(|r| img.get(r, col)).collect();
        let logmag: Vec<f64> = fft::forward_dft_magnitude(&column)
            .into_iter()
            .map(|m| (m + PROFILE_EPSILON).log10())
            .collect();
        for (acc, &v) in averaged.iter_mut().zip(&logmag) {
            *acc += v;
        }
        per_column.push(logmag);
    }
    averaged.iter_mut().for_each(|v| *v /= w as f64);
    Ok(FrequencyProfile { per_column, averaged })
}

/// Root-mean-square difference of the averaged log profiles.
pub fn profile_distance(p: &FrequencyProfile, q: &FrequencyProfile) -> Result<f64> {
    if p.averaged.len() != q.averaged.len() {
        return Err(Error::shape(
            "profile_distance",
            format!("{} vs {} bins", p.averaged.len(), q.averaged.len()),
        ));
    }
    let n = p.averaged.len() as f64;
    let ss: f64 = p
        .averaged
        .iter()
        .zip(&q.averaged)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}

/// Writes the averaged profile as CSV rows `(bin_index, mean_log_magnitude)`.
pub fn write_profile_csv(path: &Path, profile: &FrequencyProfile) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "bin_index,mean_log_magnitude")?;
    for (bin, v) in profile.averaged.iter().enumerate() {
        writeln!(out, "{},{}", bin, v)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> OctImage {
        let mut px = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                px.push(f(r, c));
            }
        }
        OctImage::new(h, w, px, Provenance::Reference).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> OctImage {
        let px: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        OctImage::new(h, w, px, Provenance::Reference).unwrap()
    }

    #[test]
    fn psnr_sentinel_and_known_values() {
        let a = image(4, 4, |_, _| 0.2);
        assert!(psnr(&a, &a).unwrap().is_infinite());

        let zeros = image(4, 4, |_, _| 0.0);
        let ones = image(4, 4, |_, _| 1.0);
        assert!((psnr(&zeros, &ones).unwrap() - 0.0).abs() < 1e-12);

        // Uniform 0.1 offset -> MSE 0.01 -> 20 dB.
        let b = image(4, 4, |_, _| 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 6, 5);
        let b = random_image(&mut rng, 6, 5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let c = random_image(&mut rng, 5, 6);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = random_image(&mut rng, 13, 17);
            assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        let (mu1, mu2) = (0.3, 0.7);
        let a = image(12, 12, |_, _| mu1);
        let b = image(12, 12, |_, _| mu2);
        let expected = (2.0 * mu1 * mu2 + SSIM_C1) / (mu1 * mu1 + mu2 * mu2 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric_and_rejects_small_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 14, 12);
        let b = random_image(&mut rng, 14, 12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let tiny = random_image(&mut rng, 10, 12);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    /// Sliding-window oracle computing the covariance directly from
    /// centered products rather than the E[xy] - mu_x mu_y identity.
    fn ssim_oracle(a: &OctImage, b: &OctImage) -> f64 {
        let win = gaussian_window();
        let (h, w) = (a.height(), a.width());
        let mut total = 0.0;
        let mut count = 0;
        for top in 0..=h - 11 {
            for left in 0..=w - 11 {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for wy in 0..11 {
                    for wx in 0..11 {
                        mu_a += win[wy * 11 + wx] * a.get(top + wy, left + wx);
                        mu_b += win[wy * 11 + wx] * b.get(top + wy, left + wx);
                    }
                }
                let mut va = 0.0;
                let mut vb = 0.0;
                let mut cov = 0.0;
                for wy in 0..11 {
                    for wx in 0..11 {
                        let g = win[wy * 11 + wx];
                        let da = a.get(top + wy, left + wx) - mu_a;
                        let db = b.get(top + wy, left + wx) - mu_b;
                        va += g * da * da;
                        vb += g * db * db;
                        cov += g * da * db;
                    }
                }
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a = random_image(&mut rng, 15, 13);
            let b = random_image(&mut rng, 15, 13);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_oracle(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn profile_constant_image_is_dc_only() {
        let img = image(16, 4, |_, _| 0.5);
        let p = spatial_frequency_profile(&img).unwrap();
        assert_eq!(p.averaged.len(), 16);
        assert!(p.averaged[0] > 0.0); // DC = 16 * 0.5 = 8 -> log10 ~ 0.9
        for bin in 1..16 {
            assert!((p.averaged[bin] - PROFILE_EPSILON.log10()).abs() < 1e-6);
        }
    }

    #[test]
    fn profile_single_period_sinusoid_dominates_bin_one() {
        let h = 32;
        let img = image(h, 3, |r, _| {
            0.5 + 0.4 * (std::f64::consts::TAU * r as f64 / h as f64).sin()
        });
        let p = spatial_frequency_profile(&img).unwrap();
        // Ignore DC; the dominant non-DC bin must sit at folded frequency 1
        // (bins 1 and h-1 mirror each other for real input).
        let best =
            (1..h).max_by(|&a, &b| p.averaged[a].partial_cmp(&p.averaged[b]).unwrap()).unwrap();
        assert_eq!(best.min(h - best), 1);
    }

    #[test]
    fn profile_distance_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 16, 8);
        let b = random_image(&mut rng, 16, 8);
        let pa = spatial_frequency_profile(&a).unwrap();
        let pb = spatial_frequency_profile(&b).unwrap();
        assert_eq!(profile_distance(&pa, &pa).unwrap(), 0.0);
        assert_eq!(profile_distance(&pa, &pb).unwrap(), profile_distance(&pb, &pa).unwrap());

        // Uniform offset delta -> RMS distance == delta.
        let delta = 0.37;
        let shifted = FrequencyProfile {
            per_column: pa.per_column.clone(),
            averaged: pa.averaged.iter().map(|v| v + delta).collect(),
        };
        assert!((profile_distance(&pa, &shifted).unwrap() - delta).abs() < 1e-12);

        let c = random_image(&mut rng, 12, 8);
        let pc = spatial_frequency_profile(&c).unwrap();
        assert!(profile_distance(&pa, &pc).is_err());
    }
}
