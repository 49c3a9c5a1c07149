//! Thin wrappers over rustfft for per-A-line transforms.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        cell.borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let dir = if inverse { FftDirection::Inverse } else { FftDirection::Forward };
                FftPlanner::new().plan_fft(len, dir)
            })
            .clone()
    })
}

/// Normalized inverse DFT of a real sequence: `(1/N) sum_k s_k e^{+2pi i k n / N}`.
pub fn inverse_dft(real: &[f64]) -> Vec<Complex<f64>> {
    let n = real.len();
    let mut buf: Vec<Complex<f64>> = real.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan(n, true).process(&mut buf);
    let scale = 1.0 / n as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Unnormalized forward DFT magnitudes of a real sequence, all N bins.
pub fn forward_dft_magnitude(real: &[f64]) -> Vec<f64> {
    let n = real.len();
    let mut buf: Vec<Complex<f64>> = real.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan(n, false).process(&mut buf);
    buf.iter().map(|c| c.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn inverse_dft_of_cosine_peaks_at_its_bin() {
        let n = 64;
        let z = 9usize;
        let row: Vec<f64> = (0..n).map(|i| (2.0 * PI * z as f64 * i as f64 / n as f64).cos()).collect();
        let spec = inverse_dft(&row);
        // cos at integer frequency z -> amplitude 1/2 at bins z and n - z.
        assert!((spec[z].norm() - 0.5).abs() < 1e-12);
        assert!((spec[n - z].norm() - 0.5).abs() < 1e-12);
        let rest: f64 = (0..n)
            .filter(|&i| i != z && i != n - z)
            .map(|i| spec[i].norm())
            .fold(0.0, f64::max);
        assert!(rest < 1e-12);
    }

    #[test]
    fn parseval_with_normalized_inverse() {
        let row: Vec<f64> = (0..128).map(|i| ((i * 37 % 61) as f64 / 61.0) - 0.5).collect();
        let spectrum_energy: f64 = row.iter().map(|v| v * v).sum();
        let inv = inverse_dft(&row);
        let image_energy: f64 = inv.iter().map(|c| c.norm_sqr()).sum();
        let ratio = spectrum_energy / (row.len() as f64 * image_energy);
        assert!((ratio - 1.0).abs() < 1e-10, "parseval ratio {}", ratio);
    }

    #[test]
    fn forward_magnitude_constant_input_is_dc_only() {
        let mags = forward_dft_magnitude(&[3.0; 17]);
        assert!((mags[0] - 51.0).abs() < 1e-9);
        assert!(mags[1..].iter().all(|&m| m < 1e-9));
    }
}
