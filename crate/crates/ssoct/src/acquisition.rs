//! Spectral-spatial down-scaling of interferograms.
//!
//! The acquisition model keeps `1/l` of each A-line spectrum (a centered
//! window, or every l-th sample for the uniform baseline), reconstructs by
//! per-line inverse DFT, takes the magnitude of the first `N_k/2` depth
//! samples, and skips pixels at factor `m` in both directions using the
//! floor index law. Truncation zeroes samples on the full `N_k` grid, so
//! the spectrally degraded image keeps the reference pixel grid and only
//! the spatial skip changes the image size.
//!
//! Normalization: the reference image is min-max scaled to [0, 1], and the
//! same affine map is reused for every degraded version of the same frame
//! so that PSNR comparisons share one scale.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::phantom::SpectralFrame;
use crate::scale;

const LOG_EPSILON: f64 = 1e-12;

/// Spectral/spatial scale factor pair, both >= 1. Doubles as the
/// magnification factor pair requested at reconstruction time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub l: f64,
    pub m: f64,
}

impl Factors {
    pub fn new(l: f64, m: f64) -> Result<Self> {
        if !(l.is_finite() && m.is_finite() && l >= 1.0 && m >= 1.0) {
            return Err(Error::arg(
                "factors",
                format!("factors must be finite and >= 1, got ({}, {})", l, m),
            ));
        }
        Ok(Factors { l, m })
    }

    /// Fraction of raw spectral samples acquired: `1 / (l * m)`.
    pub fn compression_ratio(&self) -> f64 {
        1.0 / (self.l * self.m)
    }
}

/// How the spectral factor is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralMode {
    /// Keep a centered window of length `round(N_k / l)`.
    Center,
    /// Keep every l-th sample (integer l only).
    Uniform,
}

impl std::str::FromStr for SpectralMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(SpectralMode::Center),
            "uniform" => Ok(SpectralMode::Uniform),
            other => Err(Error::arg("mode", format!("expected center|uniform, got {}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Reference,
    Degraded(Factors),
    Reconstructed(Factors),
}

/// A real-valued intensity image with pixels in [0, 1], row-major,
/// axial direction vertical (depth increases downward).
#[derive(Debug, Clone, PartialEq)]
pub struct OctImage {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
    pub axial_pixel_pitch: f64,
    pub lateral_pixel_pitch: f64,
    pub provenance: Provenance,
}

impl OctImage {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w {
            return Err(Error::shape(
                "oct_image",
                format!("{}x{} vs {} pixels", h, w, pixels.len()),
            ));
        }
        if !pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::arg("oct_image", "pixels must lie in [0, 1]"));
        }
        Ok(OctImage {
            h,
            w,
            pixels,
            axial_pixel_pitch: 1.0,
            lateral_pixel_pitch: 1.0,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.w + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.pixels[row * self.w..(row + 1) * self.w]
    }

    /// Extracts a rectangular window (used for training patches).
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<OctImage> {
        if top + h > self.h || left + w > self.w {
            return Err(Error::shape(
                "crop",
                format!(
                    "window {}x{} at ({},{}) exceeds image {}x{}",
                    h, w, top, left, self.h, self.w
                ),
            ));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for r in 0..h {
            pixels.extend_from_slice(&self.pixels[(top + r) * self.w + left..][..w]);
        }
        let mut out = OctImage::new(h, w, pixels, self.provenance.clone())?;
        out.axial_pixel_pitch = self.axial_pixel_pitch;
        out.lateral_pixel_pitch = self.lateral_pixel_pitch;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Spectral down-scaling
// ---------------------------------------------------------------------------

/// Keeps the centered window of length `round(N_k / l)` in every A-line and
/// zeroes the rest; the grid length is unchanged. Window start index is
/// `floor((N_k - W_l) / 2)`.
pub fn truncate_spectrum_center(frame: &SpectralFrame, l: f64) -> Result<SpectralFrame> {
    if !(l.is_finite() && l >= 1.0) {
        return Err(Error::arg("truncate_spectrum_center", format!("l must be >= 1, got {}", l)));
    }
    let n_k = frame.n_k;
    let window = (n_k as f64 / l).round() as usize;
    if window < 2 {
        return Err(Error::arg(
            "truncate_spectrum_center",
            format!("window of {} samples is too narrow (need >= 2); l={} at N_k={}", window, l, n_k),
        ));
    }
    let start = (n_k - window) / 2;
    let mut out = frame.clone();
    for line in 0..out.w_lines {
        let row = out.line_mut(line);
        for v in &mut row[..start] {
            *v = 0.0;
        }
        for v in &mut row[start + window..] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Keeps samples at indices `i` with `i mod l == 0` and zeroes the rest.
/// Defined for integer factors only.
pub fn drop_spectrum_uniform(frame: &SpectralFrame, l: f64) -> Result<SpectralFrame> {
    if !(l.is_finite() && l >= 1.0) {
        return Err(Error::arg("drop_spectrum_uniform", format!("l must be >= 1, got {}", l)));
    }
    if l.fract() != 0.0 {
        return Err(Error::arg(
            "drop_spectrum_uniform",
            format!("uniform dropping is defined for integer factors only, got {}", l),
        ));
    }
    let step = l as usize;
    let mut out = frame.clone();
    for line in 0..out.w_lines {
        let row = out.line_mut(line);
        for (i, v) in row.iter_mut().enumerate() {
            if i % step != 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reconstruction to an intensity image
// ---------------------------------------------------------------------------

fn magnitude_image(frame: &SpectralFrame, log_compress: bool) -> (usize, usize, Vec<f64>) {
    let h = frame.n_k / 2;
    let w = frame.w_lines;
    let mut values = vec![0.0f64; h * w];
    for col in 0..w {
        let spectrum = fft::inverse_dft(frame.line(col));
        for (row, c) in spectrum[..h].iter().enumerate() {
            let mag = c.norm();
            values[row * w + col] =
                if log_compress { 20.0 * (mag + LOG_EPSILON).log10() } else { mag };
        }
    }
    (h, w, values)
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    min: f64,
    span: f64,
}

impl Affine {
    fn from_values(values: &[f64]) -> Affine {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
        }
        Affine { min, span: max - min }
    }

    fn apply(&self, v: f64) -> f64 {
        if self.span <= 0.0 {
            0.0
        } else {
            ((v - self.min) / self.span).clamp(0.0, 1.0)
        }
    }
}

/// Full-spectrum reconstruction: per A-line inverse DFT, magnitude of the
/// first `N_k/2` depth samples (optionally log-compressed), then global
/// min-max normalization to [0, 1]. An all-zero frame maps to an all-zero
/// image. Output is `N_k/2 x W_lines`.
pub fn reconstruct_reference(frame: &SpectralFrame, log_compress: bool) -> Result<OctImage> {
    let (h, w, values) = magnitude_image(frame, log_compress);
    let affine = Affine::from_values(&values);
    let pixels = values.iter().map(|&v| affine.apply(v)).collect();
    OctImage::new(h, w, pixels, Provenance::Reference)
}

// ---------------------------------------------------------------------------
// Spatial skipping
// ---------------------------------------------------------------------------

/// Keeps rows and columns at the floor-law retained indices
/// `{floor(i * m)}`. Pixel pitches scale by `m`.
pub fn skip_spatial(image: &OctImage, m: f64) -> Result<OctImage> {
    if !(m.is_finite() && m >= 1.0) {
        return Err(Error::arg("skip_spatial", format!("m must be >= 1, got {}", m)));
    }
    let rows = scale::retained_indices(image.height(), m);
    let cols = scale::retained_indices(image.width(), m);
    if rows.len() < 8 || cols.len() < 8 {
        return Err(Error::shape(
            "skip_spatial",
            format!("output {}x{} is below the 8x8 minimum patch size", rows.len(), cols.len()),
        ));
    }
    let mut pixels = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        let src = image.row(r);
        pixels.extend(cols.iter().map(|&c| src[c]));
    }
    let mut out = OctImage::new(rows.len(), cols.len(), pixels, image.provenance.clone())?;
    out.axial_pixel_pitch = image.axial_pixel_pitch * m;
    out.lateral_pixel_pitch = image.lateral_pixel_pitch * m;
    Ok(out)
}

// ---------------------------------------------------------------------------
// The composed degradation pipeline
// ---------------------------------------------------------------------------

/// Spectral part of the degradation only: truncate/drop at factor `l`,
/// reconstruct on the full pixel grid, and normalize with the affine map of
/// this frame's own reference reconstruction. This is the cacheable stage;
/// [`degrade`] composes it with [`skip_spatial`].
pub fn degrade_spectral(
    frame: &SpectralFrame,
    l: f64,
    mode: SpectralMode,
    log_compress: bool,
) -> Result<OctImage> {
    let (_, _, reference_values) = magnitude_image(frame, log_compress);
    let affine = Affine::from_values(&reference_values);
    let truncated = match mode {
        SpectralMode::Center => truncate_spectrum_center(frame, l)?,
        SpectralMode::Uniform => drop_spectrum_uniform(frame, l)?,
    };
    let (h, w, values) = magnitude_image(&truncated, log_compress);
    let pixels = values.iter().map(|&v| affine.apply(v)).collect();
    OctImage::new(h, w, pixels, Provenance::Degraded(Factors { l, m: 1.0 }))
}

/// The full acquisition model: spectral truncation/dropping, inverse DFT
/// magnitude image on the reference affine scale, then spatial skipping at
/// factor `m` in both directions.
pub fn degrade(
    frame: &SpectralFrame,
    factors: Factors,
    mode: SpectralMode,
    log_compress: bool,
) -> Result<OctImage> {
    let spectral = degrade_spectral(frame, factors.l, mode, log_compress)?;
    let mut out = skip_spatial(&spectral, factors.m)?;
    out.provenance = Provenance::Degraded(factors);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Image container file ("OCIM")
// ---------------------------------------------------------------------------

const IMAGE_MAGIC: &[u8; 4] = b"OCIM";

/// Writes magic "OCIM", three u32 LE (H, W, reserved=0), then `H * W`
/// f32 LE pixels, row-major.
pub fn write_image(path: &Path, image: &OctImage) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(IMAGE_MAGIC)?;
    out.write_all(&(image.height() as u32).to_le_bytes())?;
    out.write_all(&(image.width() as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for &v in image.pixels() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<OctImage> {
    let mut input = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    input.read_exact(&mut header).map_err(|_| Error::Format {
        path: path.display().to_string(),
        detail: "truncated header".into(),
    })?;
    if &header[0..4] != IMAGE_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("bad magic {:?}, expected \"OCIM\"", &header[0..4]),
        });
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::Format { path: path.display().to_string(), detail: "size overflow".into() })?;
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes).map_err(|_| Error::Format {
        path: path.display().to_string(),
        detail: "truncated payload".into(),
    })?;
    let pixels: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if !pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "pixels outside [0, 1]".into(),
        });
    }
    OctImage::new(h, w, pixels, Provenance::Reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, FrameMeta, Layer, PhantomConfig};
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn frame_with(n_k: usize, w_lines: usize, fill: impl Fn(usize, usize) -> f64) -> SpectralFrame {
        let mut samples = vec![0.0; n_k * w_lines];
        for line in 0..w_lines {
            for k in 0..n_k {
                samples[line * n_k + k] = fill(line, k);
            }
        }
        SpectralFrame::new(w_lines, n_k, samples, FrameMeta::Unspecified).unwrap()
    }

    fn nonzero_indices(row: &[f64]) -> Vec<usize> {
        row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
    }

    #[test]
    fn truncate_center_index_sets() {
        let frame = frame_with(8, 2, |_, _| 1.0);
        let t2 = truncate_spectrum_center(&frame, 2.0).unwrap();
        assert_eq!(nonzero_indices(t2.line(0)), vec![2, 3, 4, 5]);
        let t4 = truncate_spectrum_center(&frame, 4.0).unwrap();
        assert_eq!(nonzero_indices(t4.line(1)), vec![3, 4]);
    }

    #[test]
    fn truncate_identity_at_l_one() {
        let frame = frame_with(16, 3, |line, k| (line * 16 + k) as f64 * 0.1);
        let out = truncate_spectrum_center(&frame, 1.0).unwrap();
        assert_eq!(out.samples(), frame.samples());
    }

    #[test]
    fn truncate_rejects_too_narrow_window() {
        let frame = frame_with(8, 1, |_, _| 1.0);
        assert!(truncate_spectrum_center(&frame, 6.0).is_err());
    }

    #[test]
    fn truncate_preserves_window_contents_bit_exactly() {
        let frame = frame_with(64, 2, |line, k| ((line + 1) * (k + 3)) as f64 * 0.01);
        let out = truncate_spectrum_center(&frame, 3.0).unwrap();
        let window = (64.0 / 3.0_f64).round() as usize;
        let start = (64 - window) / 2;
        for line in 0..2 {
            for k in start..start + window {
                assert_eq!(out.line(line)[k].to_bits(), frame.line(line)[k].to_bits());
            }
        }
    }

    #[test]
    fn drop_uniform_index_sets() {
        let frame = frame_with(8, 1, |_, _| 1.0);
        assert_eq!(
            drop_spectrum_uniform(&frame, 1.0).unwrap().samples(),
            frame.samples()
        );
        assert_eq!(nonzero_indices(drop_spectrum_uniform(&frame, 2.0).unwrap().line(0)), vec![0, 2, 4, 6]);
        assert_eq!(nonzero_indices(drop_spectrum_uniform(&frame, 4.0).unwrap().line(0)), vec![0, 4]);
        assert!(drop_spectrum_uniform(&frame, 2.5).is_err());
    }

    #[test]
    fn reconstruct_zero_frame_is_zero_image() {
        let frame = frame_with(64, 8, |_, _| 0.0);
        let img = reconstruct_reference(&frame, false).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_shape_rule() {
        let frame = frame_with(1024, 256, |_, k| (k as f64 * 0.01).sin());
        let img = reconstruct_reference(&frame, false).unwrap();
        assert_eq!((img.height(), img.width()), (512, 256));
    }

    #[test]
    fn reconstruct_single_cosine_argmax() {
        let z = 100usize;
        let frame = frame_with(1024, 4, |_, k| (TAU * z as f64 * k as f64 / 1024.0).cos());
        let img = reconstruct_reference(&frame, false).unwrap();
        for col in 0..4 {
            let best = (0..img.height()).max_by(|&a, &b| {
                img.get(a, col).partial_cmp(&img.get(b, col)).unwrap()
            });
            assert_eq!(best, Some(z));
        }
    }

    #[test]
    fn skip_identity_and_integer_factor() {
        let frame = frame_with(1024, 512, |line, k| ((line * 7 + k) % 13) as f64 / 13.0);
        let img = reconstruct_reference(&frame, false).unwrap(); // 512x512
        let same = skip_spatial(&img, 1.0).unwrap();
        assert_eq!(same.pixels(), img.pixels());
        let half = skip_spatial(&img, 2.0).unwrap();
        assert_eq!((half.height(), half.width()), (256, 256));
        assert_eq!(half.get(1, 1), img.get(2, 2));
        assert_eq!(half.axial_pixel_pitch, 2.0);
    }

    #[test]
    fn skip_rejects_tiny_output() {
        let img = OctImage::new(16, 16, vec![0.5; 256], Provenance::Reference).unwrap();
        assert!(skip_spatial(&img, 3.0).is_err());
    }

    #[test]
    fn skip_composition_consistency_for_integer_factors() {
        let img = OctImage::new(64, 48, (0..64 * 48).map(|i| (i % 7) as f64 / 7.0).collect(), Provenance::Reference)
            .unwrap();
        let a = skip_spatial(&skip_spatial(&img, 2.0).unwrap(), 2.0).unwrap();
        let b = skip_spatial(&img, 4.0).unwrap();
        assert_eq!((a.height(), a.width()), (b.height(), b.width()));
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn degrade_identity_factors_match_reference_bit_exactly() {
        let cfg = PhantomConfig { n_k: 256, w_lines: 32, ..PhantomConfig::default() };
        let (frame, _) = generate_phantom(&cfg).unwrap();
        let reference = reconstruct_reference(&frame, false).unwrap();
        let degraded =
            degrade(&frame, Factors::new(1.0, 1.0).unwrap(), SpectralMode::Center, false).unwrap();
        assert_eq!(degraded.pixels(), reference.pixels());
        let uniform =
            degrade(&frame, Factors::new(1.0, 1.0).unwrap(), SpectralMode::Uniform, false).unwrap();
        assert_eq!(uniform.pixels(), reference.pixels());
    }

    #[test]
    fn degrade_shapes_and_compression_ratio() {
        let cfg = PhantomConfig { n_k: 1024, w_lines: 256, ..PhantomConfig::default() };
        let (frame, _) = generate_phantom(&cfg).unwrap();
        let f = Factors::new(2.0, 2.0).unwrap();
        let img = degrade(&frame, f, SpectralMode::Center, false).unwrap();
        assert_eq!((img.height(), img.width()), (256, 128));
        assert!((f.compression_ratio() - 0.25).abs() < 1e-15);
        for (l, m) in [(2.0, 2.0), (1.0, 4.0), (4.0, 1.0)] {
            assert_eq!(Factors::new(l, m).unwrap().compression_ratio(), 0.25);
        }
    }

    #[test]
    fn truncation_energy_monotone_in_l() {
        let frame = frame_with(512, 4, |line, k| ((line + k) as f64 * 0.37).sin());
        let energy = |f: &SpectralFrame| -> f64 { f.samples().iter().map(|v| v * v).sum() };
        let base = energy(&frame);
        let mut prev = base;
        assert_eq!(energy(&truncate_spectrum_center(&frame, 1.0).unwrap()), base);
        for l in [1.3, 1.8, 2.0, 3.3, 4.0, 8.0] {
            let e = energy(&truncate_spectrum_center(&frame, l).unwrap());
            assert!(e <= prev + 1e-12, "energy increased at l={}", l);
            prev = e;
        }
    }

    /// Mean energy in the top quartile of axial frequency bins, on the
    /// magnitude image columns.
    fn axial_high_frequency_energy(img: &OctImage) -> f64 {
        let h = img.height();
        let mut acc = 0.0;
        let mut count = 0usize;
        for col in 0..img.width() {
            let column: Vec<f64> = (0..h).map(|r| img.get(r, col)).collect();
            let mags = crate::fft::forward_dft_magnitude(&column);
            for (b, &mag) in mags.iter().enumerate() {
                let freq = b.min(h - b);
                if freq as f64 >= 0.75 * (h as f64 / 2.0) {
                    acc += mag * mag;
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn degraded_images_lose_axial_high_frequency_energy() {
        let cfg = PhantomConfig { n_k: 512, w_lines: 64, ..PhantomConfig::default() };
        let (frame, _) = generate_phantom(&cfg).unwrap();
        let reference = reconstruct_reference(&frame, false).unwrap();
        let reference_hf = axial_high_frequency_energy(&reference);
        for l in [2.0, 3.0, 4.0] {
            let degraded = degrade_spectral(&frame, l, SpectralMode::Center, false).unwrap();
            let hf = axial_high_frequency_energy(&degraded);
            assert!(
                hf < reference_hf,
                "l={}: degraded HF {} not below reference {}",
                l,
                hf,
                reference_hf
            );
        }
    }

    #[test]
    fn image_file_roundtrip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ocim");
        let img = OctImage::new(5, 7, (0..35).map(|i| i as f64 / 34.0).collect(), Provenance::Reference)
            .unwrap();
        write_image(&path, &img).unwrap();
        let loaded = read_image(&path).unwrap();
        assert_eq!((loaded.height(), loaded.width()), (5, 7));
        for (a, b) in loaded.pixels().iter().zip(img.pixels()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(&path, b"XXXX000000000000").unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn degrade_with_single_bright_layer_shifts_peak_energy_down() {
        // A blurred boundary must still be near its original depth.
        let cfg = PhantomConfig {
            n_k: 512,
            w_lines: 32,
            layers: vec![Layer { depth_fraction: 0.4, reflectivity: 1.0, roughness: 0.0 }],
            scatterer_density: 0.0,
            source_fwhm_fraction: 1.0,
            noise_sigma: 0.0,
            seed: 3,
        };
        let (frame, _) = generate_phantom(&cfg).unwrap();
        let degraded = degrade_spectral(&frame, 4.0, SpectralMode::Center, false).unwrap();
        let col: Vec<f64> = (0..degraded.height()).map(|r| degraded.get(r, 0)).collect();
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let expected = (0.4 * 256.0) as usize;
        assert!(peak.abs_diff(expected) <= 2, "peak {} vs expected {}", peak, expected);
    }

    proptest! {
        #[test]
        fn truncation_window_nested_energy(l1 in 1.0f64..6.0, l2 in 1.0f64..6.0) {
            let frame = frame_with(256, 2, |line, k| ((line * 31 + k * 7) % 17) as f64 / 17.0 - 0.4);
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let e = |l: f64| -> f64 {
                truncate_spectrum_center(&frame, l).unwrap().samples().iter().map(|v| v * v).sum()
            };
            prop_assert!(e(hi) <= e(lo) + 1e-12);
        }
    }
}
